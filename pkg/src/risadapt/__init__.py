"""Self-adaptive RIS in a fading rich-scattering environment.

Coupled-dipole channel simulator, learned channel surrogate and perturber
sensor, and the sense-then-optimize loop that picks a 1-bit RIS
configuration.
"""

from .adapt import (ChannelModel, OptimizeParams, SensingModel, evaluate_instance,
                    optimize_config, predict_rssi, sense)
from .dataset import ProbeSet, generate_ce_dataset, generate_sensing_dataset, read_dataset, write_dataset
from .neuralnet import Mlp, MlpRegressor, TrainConfig, TrainReport
from .physics import DipoleProperties, FrequencyGrid, channel_dispersion, channel_spectrum
from .scene import (PerturberState, RisConfiguration, SceneSpec, arc_length_distance,
                    default_scene, instantiate, random_config)
from .simulator import ChannelSimulator

__version__ = "0.1.0"

__all__ = [
    "ChannelModel", "ChannelSimulator", "DipoleProperties", "FrequencyGrid", "Mlp",
    "MlpRegressor", "OptimizeParams", "PerturberState", "ProbeSet", "RisConfiguration",
    "SceneSpec", "SensingModel", "TrainConfig", "TrainReport", "arc_length_distance",
    "channel_dispersion", "channel_spectrum", "default_scene", "evaluate_instance",
    "generate_ce_dataset", "generate_sensing_dataset", "instantiate", "optimize_config",
    "predict_rssi", "random_config", "read_dataset", "sense", "write_dataset",
]
