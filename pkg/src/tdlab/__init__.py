"""tdlab: a desk-scale laboratory for diffusion training with
temporal-proximity regularization.

Core pieces: forward diffusion and DDIM sampling (diffusion), synthetic
video with exact ground-truth motion (synthgen), a small differentiable
noise predictor with per-sample gradients and full Jacobians (denoiser),
frame-pair proximity weights (proximity), the composite training loss
(objective), the gradient-variance analysis on the window graph
(analysis), desk-scale sample-quality metrics (metrics), and the
training/evaluation harness behind the `tdlab` CLI (harness, cli).
"""

__version__ = "0.1.0"

from .diffusion import NoiseSchedule, FrameWindow, build_schedule
from .errors import (AnalysisError, ConfigError, DataFormatError,
                     DivergenceError, TdlabError)

__all__ = [
    "NoiseSchedule", "FrameWindow", "build_schedule",
    "TdlabError", "ConfigError", "DivergenceError", "DataFormatError",
    "AnalysisError", "__version__",
]
