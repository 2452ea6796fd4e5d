"""Network building blocks: sparse FC, GRU, joint transformer, decoders."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import numcore as nc
from .numcore import ShapeError, Tensor


class Module:
    """Parameter container; children are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{key}.{i}", item

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return nc.parameter(rng.uniform(-bound, bound, size=shape))


def _zeros(shape) -> Tensor:
    return nc.parameter(np.zeros(shape))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, (n_out, n_in), n_in)
        self.bias = _zeros(n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return nc.linear(x, self.weight, self.bias)


class SFC(Module):
    """Block-diagonal linear layer: independent blocks, one shared bias vector.

    Blocks of identical shape are stored stacked as ``weight`` (n, out, in)
    and evaluated with one batched product; mixed-size blocks are stored as
    ``weights[i]`` of shape (out_i, in_i).
    """

    def __init__(self, blocks: Sequence[tuple[int, int]], rng: np.random.Generator):
        self.blocks = [tuple(b) for b in blocks]
        self.n_in = sum(i for i, _ in self.blocks)
        self.n_out = sum(o for _, o in self.blocks)
        self.uniform = len(set(self.blocks)) == 1 and len(self.blocks) > 1
        if self.uniform:
            i, o = self.blocks[0]
            bound = 1.0 / np.sqrt(i)
            self.weight = nc.parameter(rng.uniform(-bound, bound, size=(len(self.blocks), o, i)))
        else:
            self.weights = [_uniform(rng, (o, i), i) for i, o in self.blocks]
        self.bias = _zeros(self.n_out)

    def dense_weight(self) -> np.ndarray:
        """The equivalent (out, in) block-diagonal matrix."""
        w = np.zeros((self.n_out, self.n_in), dtype=self.bias.data.dtype)
        r = c = 0
        for k, (i, o) in enumerate(self.blocks):
            w[r:r + o, c:c + i] = self.weight.data[k] if self.uniform else self.weights[k].data
            r, c = r + o, c + i
        return w

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"SFC: input width {x.shape[-1]} does not match block inputs {self.n_in}")
        if self.uniform:
            return nc.block_linear(x, self.weight, self.bias)
        return nc.sparse_linear(x, self.weights, self.bias)


class GRUCell(Module):
    """Gated recurrent cell; gates stacked in (z, r, n) order."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_hidden = n_hidden
        self.w_ih = _uniform(rng, (3 * n_hidden, n_in), n_in)
        self.w_hh = _uniform(rng, (3 * n_hidden, n_hidden), n_hidden)
        self.bias = _zeros(3 * n_hidden)

    def __call__(self, x: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        h_new = nc.gru_cell(x, h, self.w_ih, self.w_hh, self.bias)
        return h_new, h_new


class TokenExpand(Module):
    """Flatten, one dense layer, reshape to ``n_tokens`` tokens of width ``d``.

    Serves both as the tracker-to-joint upsampler and the single-token
    expansion of the prediction encoder.
    """

    def __init__(self, n_in_tokens: int, d: int, n_tokens: int, rng: np.random.Generator):
        self.n_in_tokens, self.d, self.n_tokens = n_in_tokens, d, n_tokens
        self.fc = Linear(n_in_tokens * d, n_tokens * d, rng)

    def __call__(self, e: Tensor) -> Tensor:
        if e.shape[-1] != self.d or (self.n_in_tokens > 1 and e.shape[-2] != self.n_in_tokens):
            raise ShapeError(f"TokenExpand: expected (..., {self.n_in_tokens}, {self.d}), got {e.shape}")
        lead = e.shape[:-2] if self.n_in_tokens > 1 else e.shape[:-1]
        flat = nc.reshape(e, lead + (self.n_in_tokens * self.d,))
        return nc.reshape(self.fc(flat), lead + (self.n_tokens, self.d))


FUSIONS = ("concat_feat", "add", "concat_joint")


def fuse(t_x: Tensor, t_y: Tensor, method: str = "concat_feat") -> Tensor:
    if t_x.shape != t_y.shape:
        raise ShapeError(f"fuse: token shapes differ {t_x.shape} vs {t_y.shape}")
    if method == "concat_feat":
        return nc.concat([t_x, t_y], axis=-1)
    if method == "add":
        return nc.add(t_x, t_y)
    if method == "concat_joint":
        return nc.concat([t_x, t_y], axis=-2)
    raise ValueError(f"unknown fusion method {method!r}; expected one of {FUSIONS}")


class LayerNorm(Module):
    def __init__(self, n: int):
        self.gamma = nc.parameter(np.ones(n))
        self.beta = _zeros(n)

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.gamma, self.beta)


class SelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.width, self.heads = width, heads
        self.qkv = Linear(width, 3 * width, rng)
        self.out = Linear(width, width, rng)

    def __call__(self, x: Tensor, keep: list | None = None) -> Tensor:
        return self.out(nc.attention(self.qkv(x), self.heads, keep))


class EncoderLayer(Module):
    """Pre-LN block: x + attn(LN x), then x + FFN(LN x) with a ReLU FFN."""

    def __init__(self, width: int, heads: int, ffn: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(width)
        self.attn = SelfAttention(width, heads, rng)
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(width, ffn, rng)
        self.fc2 = Linear(ffn, width, rng)

    def __call__(self, x: Tensor, keep: list | None = None) -> Tensor:
        x = nc.add(x, self.attn(self.ln1(x), keep))
        return nc.add(x, self.fc2(nc.relu(self.fc1(self.ln2(x)))))


class JointRelationTransformer(Module):
    def __init__(self, n_tokens: int, width: int, layers: int, heads: int, ffn: int,
                 rng: np.random.Generator):
        self.n_tokens, self.width = n_tokens, width
        self.joint_embed = nc.parameter(rng.normal(0.0, 0.02, size=(n_tokens, width)))
        self.layers = [EncoderLayer(width, heads, ffn, rng) for _ in range(layers)]
        self.ln_out = LayerNorm(width)

    def __call__(self, tokens: Tensor, keep: list | None = None) -> Tensor:
        if tokens.shape[-2:] != (self.n_tokens, self.width):
            raise ShapeError(f"transformer expects (..., {self.n_tokens}, {self.width}), got {tokens.shape}")
        x = nc.add(tokens, self.joint_embed)
        for layer in self.layers:
            x = layer(x, keep)
        return self.ln_out(x)


# --------------------------------------------------------------------------
# decoders: token -> 9 values (local 6D rotation + position) per joint
# --------------------------------------------------------------------------

DECODERS = ("sfc", "multifc", "shared")
OUT_PER_JOINT = 9


class MLP(Module):
    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nc.relu(self.fc1(x)))


class SparseFCDecoder(Module):
    """All joints decoded at once through two block-diagonal layers."""

    def __init__(self, n_joints: int, width: int, hidden: int, rng: np.random.Generator):
        self.n_joints = n_joints
        self.fc1 = SFC([(width, hidden)] * n_joints, rng)
        self.fc2 = SFC([(hidden, OUT_PER_JOINT)] * n_joints, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        lead = tokens.shape[:-2]
        flat = nc.reshape(tokens, lead + (-1,))
        y = self.fc2(nc.relu(self.fc1(flat)))
        return nc.reshape(y, lead + (self.n_joints, OUT_PER_JOINT))

    def load_from_multifc(self, other: "MultiFCDecoder") -> None:
        self.fc1.weight.data[...] = np.stack([m.fc1.weight.data for m in other.mlps])
        self.fc1.bias.data[...] = np.concatenate([m.fc1.bias.data for m in other.mlps])
        self.fc2.weight.data[...] = np.stack([m.fc2.weight.data for m in other.mlps])
        self.fc2.bias.data[...] = np.concatenate([m.fc2.bias.data for m in other.mlps])


class MultiFCDecoder(Module):
    """One MLP per joint, evaluated one joint after another."""

    def __init__(self, n_joints: int, width: int, hidden: int, rng: np.random.Generator):
        self.mlps = [MLP(width, hidden, OUT_PER_JOINT, rng) for _ in range(n_joints)]

    def __call__(self, tokens: Tensor) -> Tensor:
        outs = [mlp(tokens[..., j, :]) for j, mlp in enumerate(self.mlps)]
        return nc.stack(outs, axis=-2)


class SharedDecoder(Module):
    """A dedicated MLP for the root joint; one MLP shared by all other joints."""

    def __init__(self, n_joints: int, width: int, hidden: int, rng: np.random.Generator):
        self.root = MLP(width, hidden, OUT_PER_JOINT, rng)
        self.body = MLP(width, hidden, OUT_PER_JOINT, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        root = self.root(tokens[..., 0:1, :])
        body = self.body(tokens[..., 1:, :])
        return nc.concat([root, body], axis=-2)


def make_decoder(kind: str, n_joints: int, width: int, hidden: int, rng: np.random.Generator) -> Module:
    if kind == "sfc":
        return SparseFCDecoder(n_joints, width, hidden, rng)
    if kind == "multifc":
        return MultiFCDecoder(n_joints, width, hidden, rng)
    if kind == "shared":
        return SharedDecoder(n_joints, width, hidden, rng)
    raise ValueError(f"unknown decoder {kind!r}; expected one of {DECODERS}")
