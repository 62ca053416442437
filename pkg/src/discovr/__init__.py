"""Dual-branch masked self-distillation for echo-like video.

A video encoder and an image encoder are trained jointly: each branch
distills masked student views toward an EMA teacher, and a shared
prototype bank aligns reconstructed video token features with image
spatial features through balanced cluster assignments. Downstream
evaluation (kNN, linear probe, segmentation, ejection-fraction
regression) runs on frozen features.
"""

__version__ = "0.1.0"
