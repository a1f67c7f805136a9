"""Geometric constellation shaping with autoencoders trained by a cubature Kalman filter.

The encoder/decoder pair in :mod:`.nn` is trained without gradients by
:mod:`.ckf`, which treats the network weights as the state of a Kalman filter
and the per-sample cross-entropy as its measurement.  This makes it possible
to learn constellations through non-differentiable channels such as blind
phase search carrier recovery (:mod:`.channels`).  :mod:`.metrics` estimates
mutual information, :mod:`.trainer` runs the training and test protocol.
"""

__version__ = "0.1.0"

from .ckf import CkfHyperparams, CkfState, ckf_step
from .channels import AwgnConfig, NlpnConfig, PhaseNoiseBpsConfig
from .trainer import TrainConfig, TrainReport, evaluate, grid_search, train

__all__ = [
    "AwgnConfig",
    "CkfHyperparams",
    "CkfState",
    "NlpnConfig",
    "PhaseNoiseBpsConfig",
    "TrainConfig",
    "TrainReport",
    "ckf_step",
    "evaluate",
    "grid_search",
    "train",
]
