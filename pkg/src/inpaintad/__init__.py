"""inpaintad: few-shot multi-class industrial anomaly detection that
masks candidate regions, inpaints them into normal patterns with a
latent diffusion port, and scores the perceptual difference."""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    InpaintADError,
    ParameterError,
    PipelineError,
    PortError,
    SamplingExhaustedError,
    UndefinedMetricError,
)

__all__ = [
    "RunConfig",
    "load_config",
    "InpaintADError",
    "ParameterError",
    "ContractError",
    "ConfigError",
    "DataError",
    "PortError",
    "PipelineError",
    "SamplingExhaustedError",
    "UndefinedMetricError",
    "__version__",
]
