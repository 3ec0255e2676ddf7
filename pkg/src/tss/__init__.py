"""Windowed, visit-controlled simulated tempering with on-the-fly estimation.

The package samples a discretized family of distributions while estimating
their free energy differences (and auxiliary observable averages) on the
fly.  Rungs are covered twice by overlapping windows with independent
per-window ledgers; a visit-control density steers sampling toward
under-visited rungs; history forgetting drops the earliest epochs; and a
global reconciliation turns the per-window estimates into the reported
free energies with jackknife error bars.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig
from .experiment import run_experiment
from .models import make_gaussian_ladder, make_identical_pair, make_model, make_uniform_pair
from .windows import build_layout, other_window

__all__ = [
    "ExperimentConfig",
    "run_experiment",
    "make_model",
    "make_uniform_pair",
    "make_gaussian_ladder",
    "make_identical_pair",
    "build_layout",
    "other_window",
    "__version__",
]
