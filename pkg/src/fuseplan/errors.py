"""Exception types shared across workload, planning, analysis, search and simulation."""


class FusePlanError(Exception):
    """Base class for all domain errors raised by this package."""


class InvalidDimension(FusePlanError):
    """A chain dimension is below the hardware minimum or otherwise malformed."""


class UnknownPreset(FusePlanError):
    """Requested workload preset id does not exist."""


class UnsupportedConvChain(FusePlanError):
    """Convolution chain shape outside the supported lowering (second conv must be 1x1)."""


class ClusterTooLarge(FusePlanError):
    """Requested cluster block count exceeds the device limit."""


class InfeasibleCluster(FusePlanError):
    """Cluster dimensions do not yield integral shuffle/reduce groups."""


class WrongTensorClass(FusePlanError):
    """Operation applied to a tensor role it does not accept."""


class CapacityExceeded(FusePlanError):
    """A tensor's resident footprint does not fit above its spill floor.

    Carries the tensor name, the floor level and the unplaced byte count so
    callers can report exactly what failed.
    """

    def __init__(self, tensor: str, floor: str, unplaced: int):
        self.tensor = tensor
        self.floor = floor
        self.unplaced = unplaced
        super().__init__(
            f"tensor {tensor!r}: {unplaced} bytes left after spill floor {floor!r}"
        )


class EmptySpace(FusePlanError):
    """No candidate survived pruning; records the stage that emptied the space."""

    def __init__(self, stage: str):
        self.stage = stage
        super().__init__(f"search space empty after stage {stage!r}")


class ProfileError(FusePlanError):
    """Device profile or workload file failed to parse or validate."""


class PlanError(FusePlanError):
    """Structurally invalid plan, or a plan rejected by an execution guardrail."""
