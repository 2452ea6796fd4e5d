"""Rotations in the 6D representation and forward kinematics on the 22-joint body.

Run:  python3 demos/01_rotations_and_kinematics.py
"""
import numpy as np

from reliavatar import rotmath
from reliavatar.skeleton import DEFAULT_TREE, NUM_JOINTS, forward_kinematics

rng = np.random.default_rng(0)

# A 6D rotation is the first two columns of the matrix.  Any non-degenerate
# 6-vector maps back to a proper rotation through Gram-Schmidt.
r6 = rng.normal(size=(4, 6))
R = rotmath.rot6d_to_matrix(r6)
print("rotations from random 6D vectors:", [rotmath.is_rotation(m) for m in R])
print("det:", np.round(np.linalg.det(R), 12))

# Scaling either half of the 6-vector does not change the rotation.
scaled = r6.copy()
scaled[:, :3] *= 7.0
print("scale invariant:", np.allclose(rotmath.rot6d_to_matrix(scaled), R))

# Round trip through the matrix is the identity on normalised 6D vectors.
back = rotmath.matrix_to_rot6d(R)
print("round trip error:", np.abs(rotmath.rot6d_to_matrix(back) - R).max())

# Geodesic angle between two rotations about the same axis is the angle gap.
a = rotmath.axis_angle_to_matrix(np.array([0.0, 0.0, 1.0]), np.deg2rad(10.0))
b = rotmath.axis_angle_to_matrix(np.array([0.0, 0.0, 1.0]), np.deg2rad(55.0))
print("geodesic angle [deg]:", float(rotmath.geodesic_angle_deg(a, b)))

# The relative rotation between frames (rotational velocity) takes a to b.
v = rotmath.rot6d_to_matrix(rotmath.rotation_velocity(rotmath.matrix_to_rot6d(a), rotmath.matrix_to_rot6d(b)))
print("a @ velocity == b:", np.allclose(a @ v, b))

# Forward kinematics: identity pose gives the rest skeleton offset by the root.
eye = np.broadcast_to(np.eye(3), (NUM_JOINTS, 3, 3))
G, P = forward_kinematics(DEFAULT_TREE, eye, np.array([0.0, 0.9, 0.0]))
print("rest pose joint heights [m]:", np.round(P[:, 1], 3))

# Bend every joint a little about x and watch the hands move.
bend = np.broadcast_to(rotmath.axis_angle_to_matrix(np.array([1.0, 0.0, 0.0]), 0.2), (NUM_JOINTS, 3, 3))
_, P2 = forward_kinematics(DEFAULT_TREE, bend, np.array([0.0, 0.9, 0.0]))
print("largest joint displacement [cm]:", round(100 * np.linalg.norm(P2 - P, axis=-1).max(), 2))
