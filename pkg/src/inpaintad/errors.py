"""Exception hierarchy shared by all modules.

Exit-code mapping for the CLI lives in cli.py: ConfigError -> 2,
DataError -> 3, PortError -> 4.
"""


class InpaintADError(Exception):
    """Base class for all package errors."""


class ParameterError(InpaintADError, ValueError):
    """A caller-supplied argument violates an operation precondition."""


class ContractError(InpaintADError):
    """An internal contract between modules was violated."""


class ConfigError(InpaintADError):
    """Run configuration is invalid or inconsistent."""


class DataError(InpaintADError):
    """Dataset layout, files, or caches are missing or malformed."""


class PortError(InpaintADError):
    """A pretrained-component port failed or does not satisfy its probes."""


class PipelineError(InpaintADError):
    """Inpainting aborted mid-trajectory; carries the failing step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class SamplingExhaustedError(ParameterError):
    """Rejection sampling hit max_tries; carries the last IoU seen."""

    def __init__(self, message: str, last_iou: float):
        super().__init__(message)
        self.last_iou = last_iou


class UndefinedMetricError(InpaintADError):
    """Metric is undefined for the given labels (e.g. single-class AUROC)."""


class TrainingDivergedError(InpaintADError):
    """Fine-tuning produced a non-finite loss; carries the trace so far."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace
