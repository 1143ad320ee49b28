"""Dense deformable registration with a factored Levenberg-Marquardt optimizer."""

from .driver import RegConfig, RegResult, endpoint_error, register
from .field import StepScale, compose_warp, jacobian_det_min, normalize_step
from .lmopt import AdamConfig, GdConfig, LmConfig, LmState, lm_step_pointwise, lm_step_tiled
from .pyramid import PyramidSchedule
from .similarity import MetricConfig, residual
from .synth import SynthSpec, synth_pair

__version__ = "0.1.0"
