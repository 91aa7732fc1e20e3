"""Saliency-guided pseudo-anomaly augmentation and two-head deviation scoring.

A small, CPU-only stack for open-set defect detection on textures: a tape
autodiff engine, a convolutional scoring network with normal/anomaly heads,
gradient-saliency driven cut-paste augmentation, deviation-loss training,
and an AUC evaluation harness with general / hard / anomaly-free protocols.
"""

__version__ = "0.1.0"
