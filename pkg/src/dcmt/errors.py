"""Exception types shared across the package.

Everything raised on purpose derives from DcmtError so the CLI can map
deliberate failures to exit code 1 and config mistakes to exit code 2.
"""

import math


class DcmtError(Exception):
    """Base class for deliberate, documented failures."""


class ContractError(DcmtError):
    """An input violated a documented precondition."""


class DimensionError(ContractError):
    """Shapes disagree with what an operation requires."""


class NumericsError(DcmtError):
    """A forward value became NaN or infinite."""


class SegmentationOverflowError(DcmtError):
    """Soft boundary mass does not fit into the available token slots."""

    def __init__(self, total_mass: float, k_max: int):
        self.total_mass = float(total_mass)
        self.k_max = int(k_max)
        super().__init__(
            f"boundary mass {self.total_mass:.6f} needs at least "
            f"{math.ceil(self.total_mass) + 1} slots but K_max={self.k_max}"
        )


class GridTooLargeError(ContractError):
    """emd_2d was handed more bins than the exact solver accepts."""

    def __init__(self, bins: int, limit: int):
        super().__init__(
            f"grid has {bins} bins, exact transport is limited to {limit}; "
            "coarsen the heatmaps before calling emd_2d"
        )


class NoErrorsError(DcmtError):
    """An error histogram with zero errors cannot be normalized."""


class CheckpointError(DcmtError):
    """A checkpoint file is unreadable or from an unknown format version."""


class ConfigError(DcmtError):
    """A run config file is malformed or contains unknown keys."""


class ReportInputError(DcmtError):
    """A run directory is missing files the report renderer needs."""

    def __init__(self, missing: list):
        self.missing = [str(m) for m in missing]
        super().__init__("missing report inputs: " + ", ".join(self.missing))
