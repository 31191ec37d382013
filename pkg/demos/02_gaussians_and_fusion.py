"""
Fusing Gaussian experts
=======================

A product of Gaussian experts is again Gaussian: precisions add, means
are precision weighted.  Hidden experts simply drop out of the product.
"""

import math

import numpy as np

from vibeam import prob

prior = prob.DiagGaussian([0.0], [0.0])
camera = prob.DiagGaussian([0.0], [0.0])
radar = prob.DiagGaussian([2.0], [0.0])

fused = prob.poe_fuse(prior, [camera, radar], [1.0, 1.0], [True, True])
print("fused mean", fused.mean.item(), "variance", math.exp(fused.log_var.item()))

# a down-weighted expert pulls less
weak = prob.poe_fuse(prior, [camera, radar], [1.0, 0.2], [True, True])
print("radar at alpha=0.2 -> mean", round(weak.mean.item(), 4))

# per-row masks: the second row has no expert and keeps the prior
rows = prob.DiagGaussian(np.zeros((2, 1)), np.zeros((2, 1)))
e = prob.DiagGaussian(np.full((2, 1), 3.0), np.zeros((2, 1)))
print("masked rows:", prob.poe_fuse(rows, [e], [1.0], [np.array([True, False])]).mean.data.ravel())

# the KL of an expert from the fused posterior is what the encoder regularizer averages
print("KL(expert || fused) =", round(prob.kl(camera, fused).item(), 6))
