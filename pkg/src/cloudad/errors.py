"""Exception types shared across the package."""


class CloudError(Exception):
    """Base class for all cloudad errors."""


class DegenerateCloudError(CloudError):
    """Cloud has no spatial extent (all points identical)."""


class CloudParseError(CloudError):
    """Malformed XYZ/PLY input. Carries the offending location."""

    def __init__(self, message, *, line=None, offset=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if offset is not None:
            loc.append(f"byte {offset}")
        suffix = f" ({', '.join(loc)})" if loc else ""
        super().__init__(message + suffix)
        self.line = line
        self.offset = offset


class InjectionError(CloudError):
    """Defect injection could not be applied (e.g. empty target region)."""


class ConfigError(CloudError):
    """Invalid run configuration or config file."""


class CheckpointError(CloudError):
    """Unreadable or incompatible checkpoint file."""

    def __init__(self, message, *, offset=None):
        if offset is not None:
            message = f"{message} (byte {offset})"
        super().__init__(message)
        self.offset = offset


class ForwardError(CloudError):
    """Non-finite activation during a forward pass."""

    def __init__(self, message, *, layer=None):
        if layer is not None:
            message = f"{message} (layer {layer})"
        super().__init__(message)
        self.layer = layer


class AdvisorUpdateError(CloudError):
    """Advisor update produced non-finite values; state was not changed."""


class UndefinedMetricError(CloudError):
    """Metric is undefined for the given inputs (e.g. single-class AUROC)."""


class TrainingAbort(CloudError):
    """Training hit a non-finite loss; parameters rolled back to last good epoch."""

    def __init__(self, message, *, epoch=None):
        if epoch is not None:
            message = f"{message} (last good epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch


class DataError(CloudError):
    """Dataset/manifest mismatch or otherwise unusable input data."""
