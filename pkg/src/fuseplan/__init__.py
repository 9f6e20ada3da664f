"""Fusion planning and tile-level dataflow simulation for GEMM operator chains
on GPUs with inter-block (cluster) connectivity."""

from .analyzer import analyze, io_traffic, place_tensor, tile_footprint
from .errors import (
    CapacityExceeded,
    ClusterTooLarge,
    EmptySpace,
    FusePlanError,
    InfeasibleCluster,
    InvalidDimension,
    PlanError,
    ProfileError,
    UnknownPreset,
    UnsupportedConvChain,
    WrongTensorClass,
)
from .hardware import (
    DeviceModel,
    default_h100,
    dsm_bandwidth,
    load_device_profile,
    save_device_profile,
    validate_profile,
)
from .plan import (
    ClusterConfig,
    FusionPlan,
    LoopSchedule,
    TileSizes,
    derive_cluster_groups,
    enumerate_schedules,
    make_plan,
    plan_from_json,
    plan_to_json,
    validate_plan,
)
from .search import cost, count_space, dsm_space_expansion, search
from .simulator import (
    SimConfig,
    execute_plan,
    make_inputs,
    oracle,
    sample_valid_plans,
    unfused_baseline,
    verify,
)
from .workload import (
    ChainGraph,
    ConvChainConfig,
    DimensionSpec,
    build_gated_ffn,
    build_standard_ffn,
    conv_chain_to_gemm,
    load_workload,
    preset,
    preset_ids,
    scale_to_desk,
)

__version__ = "0.1.0"
