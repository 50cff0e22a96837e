"""Multi-region short-term electric load forecasting.

TriForecaster combines region-expert mixing with context- and
time-specializing mixtures of experts, fused by a stochastic pooling
mechanism, on top of a small float64 autodiff engine. STL and MTL
baselines, a synthetic data generator, and a training CLI round out the
package.
"""

from .config import TrainConfig
from .data import DatasetBundle, load_dataset, synth_generate, write_synth_dataset
from .estimators import MTLRegressor, STLRegressor, TriForecasterRegressor
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "DatasetBundle",
    "MTLRegressor",
    "STLRegressor",
    "Tensor",
    "TrainConfig",
    "TriForecasterRegressor",
    "load_dataset",
    "no_grad",
    "synth_generate",
    "write_synth_dataset",
    "__version__",
]
