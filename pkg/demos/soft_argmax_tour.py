"""A short walk through Soft-argmax on hand-made heat maps.

Run with ``python demos/soft_argmax_tour.py``; it prints a few numbers and
finishes in well under a second.
"""
import numpy as np

from posereg.softargmax import joint_probability, soft_argmax, soft_argmax_backward, spatial_softmax

# A flat map has no opinion: the estimate is the centre of the ramps.
flat = np.zeros((4, 4))
print("uniform 4x4 ->", soft_argmax(flat).data)  # (0.625, 0.625)

# One strong peak pulls the estimate toward its cell; scaling the map sharpens it.
peak = np.zeros((8, 8))
peak[2, 5] = 1.0
for beta in (1, 5, 50):
    x, y = soft_argmax(beta * peak).data
    print(f"beta={beta:>2}  x={x:.6f}  y={y:.6f}  (argmax cell gives {6 / 8}, {3 / 8})")

# Two equal peaks: the expectation sits between them, not on either one.
twin = np.zeros((8, 8))
twin[4, 1] = twin[4, 6] = 10.0
print("two peaks ->", soft_argmax(twin).data)

# The layer is differentiable: push x right and the gradient raises cells on the right.
grad = soft_argmax_backward(peak * 3, np.array([1.0, 0.0]))
print("d x / d h, row 2:", np.round(grad[2], 4))

# Presence comes from the raw maximum, not from the normalised map.
print("presence weak/strong:", float(joint_probability(peak * -2).data), float(joint_probability(peak * 4).data))
print("softmax still sums to", spatial_softmax(peak).data.sum())
