"""Multi-scale attention point-cloud detector, desk scale.

Subpackages: tensor (autodiff engine), geometry (sampling/interpolation),
attention (single/dual key-value attention), model (detector + training),
evalmetrics (IoU/AP/mAP + reports), scenes (synthetic data + file formats),
cli (command-line entry points).
"""

__version__ = "0.1.0"
