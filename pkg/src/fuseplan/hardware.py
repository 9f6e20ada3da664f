"""Parametric device model: memory tiers, capacities, bandwidth curves, cluster limits.

Capacities that matter for feasibility (shared-memory size, cluster block
limit, MMA granularity) default to published H100 values.  Absolute
bandwidths are calibration placeholders: every correctness check in this
package depends only on byte volumes and on bandwidth *orderings*, never on
the absolute numbers.  Override them through a profile file when calibrated
measurements are available.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from .errors import ClusterTooLarge, ProfileError

# Fast-to-slow tier order; every mapping and traffic report uses these names.
LEVEL_ORDER = ("reg", "smem", "dsm", "l2", "global")


@dataclass(frozen=True)
class MemoryLevel:
    """One tier of the hierarchy.

    capacity_bytes is per block for reg/smem, per device for l2, and None for
    unbounded (global).  The dsm tier has no static capacity: it is the union
    of the cluster's shared memories and is sized per cluster configuration
    at query time.
    """

    name: str
    scope: str  # per-block | per-cluster | device
    capacity_bytes: Optional[int]
    bandwidth: float  # bytes/second; for dsm see DeviceModel.dsm_bandwidth_table


@dataclass(frozen=True)
class DeviceModel:
    name: str
    reg: MemoryLevel
    smem: MemoryLevel
    dsm_bandwidth_table: dict[int, float]  # cluster block-count -> bytes/s
    l2: Optional[MemoryLevel]
    global_mem: MemoryLevel
    max_cluster_blocks: int = 16
    cluster_dim_options: tuple[int, ...] = (1, 2, 4, 8, 16)
    mma_tile: tuple[int, int, int] = (16, 16, 16)

    def level(self, name: str) -> MemoryLevel:
        if name == "reg":
            return self.reg
        if name == "smem":
            return self.smem
        if name == "l2":
            if self.l2 is None:
                raise KeyError("device has no l2 tier")
            return self.l2
        if name == "global":
            return self.global_mem
        raise KeyError(name)

    def dsm_capacity(self, cluster_blocks: int) -> int:
        """Usable DSM pool for one cluster: the union of its shared memories."""
        if cluster_blocks > self.max_cluster_blocks:
            raise ClusterTooLarge(
                f"cluster of {cluster_blocks} blocks exceeds limit {self.max_cluster_blocks}"
            )
        return cluster_blocks * int(self.smem.capacity_bytes)

    def bandwidth(self, level_name: str, cluster_blocks: int = 1) -> float:
        if level_name == "dsm":
            return dsm_bandwidth(self, cluster_blocks)
        return self.level(level_name).bandwidth


def default_h100() -> DeviceModel:
    """H100 profile.

    Published facts: 227 KB usable SMEM per block, 3 TB/s HBM, at most 16
    blocks per cluster, 16x16x16 minimum MMA tile.  Register file size is the
    public per-SM figure.  All bandwidths besides global are placeholders
    shaped to the measured trend (DSM bandwidth decays with cluster size and
    beats HBM except at the largest cluster).
    """
    return DeviceModel(
        name="h100",
        reg=MemoryLevel("reg", "per-block", 256 * 1024, 6.0e14),
        smem=MemoryLevel("smem", "per-block", 227 * 1024, 1.28e14),
        dsm_bandwidth_table={2: 6.0e12, 4: 5.0e12, 8: 4.0e12, 16: 2.5e12},
        l2=MemoryLevel("l2", "device", 50 * 1024 * 1024, 1.0e13),
        global_mem=MemoryLevel("global", "device", None, 3.0e12),
    )


def dsm_bandwidth(device: DeviceModel, cluster_blocks: int) -> float:
    """Inter-block fabric bandwidth for a given cluster size.

    A single block has no inter-block hop, so the smem bandwidth applies.
    """
    if cluster_blocks > device.max_cluster_blocks:
        raise ClusterTooLarge(
            f"cluster of {cluster_blocks} blocks exceeds limit {device.max_cluster_blocks}"
        )
    if cluster_blocks <= 1:
        return device.smem.bandwidth
    try:
        return device.dsm_bandwidth_table[cluster_blocks]
    except KeyError:
        raise ProfileError(
            f"no dsm bandwidth entry for cluster size {cluster_blocks}; "
            f"table has {sorted(device.dsm_bandwidth_table)}"
        ) from None


def validate_profile(device: DeviceModel) -> list[str]:
    """Return the list of violated invariants (empty when the profile is sound)."""
    problems = []
    for lvl in (device.reg, device.smem):
        if lvl.capacity_bytes is None or lvl.capacity_bytes <= 0:
            problems.append(f"{lvl.name} capacity must be positive")
        if lvl.bandwidth <= 0:
            problems.append(f"{lvl.name} bandwidth must be positive")
    if device.l2 is not None and (device.l2.capacity_bytes or 0) <= 0:
        problems.append("l2 capacity must be positive when l2 is present")
    if device.global_mem.bandwidth <= 0:
        problems.append("global bandwidth must be positive")
    if device.max_cluster_blocks <= 0:
        problems.append("max_cluster_blocks must be positive")
    if any(c <= 0 for c in device.cluster_dim_options):
        problems.append("cluster_dim_options must be positive")

    table = device.dsm_bandwidth_table
    keys = sorted(table)
    for a, b in zip(keys, keys[1:]):
        if table[b] > table[a]:
            problems.append(f"dsm bandwidth not non-increasing at cluster size {b}")
    for key in keys:
        if key > device.max_cluster_blocks:
            problems.append(f"dsm table key {key} exceeds max_cluster_blocks")
    # All but the largest tabulated cluster must beat global bandwidth.
    for key in keys[:-1]:
        if table[key] < device.global_mem.bandwidth:
            problems.append(
                f"dsm bandwidth at cluster size {key} below global bandwidth"
            )
    return problems


# ---------------------------------------------------------------------------
# Profile files: line-oriented `key = value`, `#` comments.  Keys:
#   name, max_cluster_blocks, cluster_dim_options (comma list), mma_tile,
#   <tier>.capacity_bytes, <tier>.bandwidth_bytes_per_s, dsm.bandwidth[<n>].
# The l2 tier is optional.  save/load round-trips bit-exactly.
# ---------------------------------------------------------------------------


def _parse_kv_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ProfileError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ProfileError(f"line {lineno}: empty key or value")
        yield lineno, key, value


def load_device_profile(path) -> DeviceModel:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_device_profile(text)


def parse_device_profile(text: str) -> DeviceModel:
    base = default_h100()
    fields: dict[str, str] = {}
    dsm_table: dict[int, float] = {}
    saw_dsm_entry = False
    for lineno, key, value in _parse_kv_lines(text):
        if key.startswith("dsm.bandwidth[") and key.endswith("]"):
            try:
                size = int(key[len("dsm.bandwidth[") : -1])
                dsm_table[size] = float(value)
            except ValueError:
                raise ProfileError(f"line {lineno}: bad dsm bandwidth entry {key!r}")
            saw_dsm_entry = True
        else:
            fields[key] = value

    def _get_int(key, default):
        if key not in fields:
            return default
        try:
            return int(fields.pop(key))
        except ValueError:
            raise ProfileError(f"{key}: expected integer, got {fields[key]!r}")

    def _get_float(key, default):
        if key not in fields:
            return default
        try:
            return float(fields.pop(key))
        except ValueError:
            raise ProfileError(f"{key}: expected number, got {fields[key]!r}")

    name = fields.pop("name", base.name)
    max_blocks = _get_int("max_cluster_blocks", base.max_cluster_blocks)
    if "cluster_dim_options" in fields:
        try:
            options = tuple(
                sorted(int(tok) for tok in fields.pop("cluster_dim_options").split(","))
            )
        except ValueError:
            raise ProfileError("cluster_dim_options: expected comma-separated integers")
    else:
        options = base.cluster_dim_options
    if "mma_tile" in fields:
        toks = fields.pop("mma_tile").split(",")
        if len(toks) != 3:
            raise ProfileError("mma_tile: expected three comma-separated integers")
        mma = tuple(int(tok) for tok in toks)
    else:
        mma = base.mma_tile

    reg = MemoryLevel(
        "reg",
        "per-block",
        _get_int("reg.capacity_bytes", base.reg.capacity_bytes),
        _get_float("reg.bandwidth_bytes_per_s", base.reg.bandwidth),
    )
    smem = MemoryLevel(
        "smem",
        "per-block",
        _get_int("smem.capacity_bytes", base.smem.capacity_bytes),
        _get_float("smem.bandwidth_bytes_per_s", base.smem.bandwidth),
    )
    has_l2 = fields.pop("l2.present", "yes").lower() not in ("no", "false", "0")
    l2 = None
    if has_l2:
        l2 = MemoryLevel(
            "l2",
            "device",
            _get_int("l2.capacity_bytes", base.l2.capacity_bytes),
            _get_float("l2.bandwidth_bytes_per_s", base.l2.bandwidth),
        )
    else:
        fields.pop("l2.capacity_bytes", None)
        fields.pop("l2.bandwidth_bytes_per_s", None)
    global_mem = MemoryLevel(
        "global",
        "device",
        None,
        _get_float("global.bandwidth_bytes_per_s", base.global_mem.bandwidth),
    )
    if fields:
        raise ProfileError(f"unknown profile keys: {sorted(fields)}")

    device = DeviceModel(
        name=name,
        reg=reg,
        smem=smem,
        dsm_bandwidth_table=dsm_table if saw_dsm_entry else dict(base.dsm_bandwidth_table),
        l2=l2,
        global_mem=global_mem,
        max_cluster_blocks=max_blocks,
        cluster_dim_options=options,
        mma_tile=tuple(mma),
    )
    problems = validate_profile(device)
    if problems:
        raise ProfileError("; ".join(problems))
    return device


def serialize_device_profile(device: DeviceModel) -> str:
    lines = [
        f"name = {device.name}",
        f"max_cluster_blocks = {device.max_cluster_blocks}",
        "cluster_dim_options = " + ",".join(str(c) for c in device.cluster_dim_options),
        "mma_tile = " + ",".join(str(c) for c in device.mma_tile),
        f"reg.capacity_bytes = {device.reg.capacity_bytes}",
        f"reg.bandwidth_bytes_per_s = {device.reg.bandwidth!r}",
        f"smem.capacity_bytes = {device.smem.capacity_bytes}",
        f"smem.bandwidth_bytes_per_s = {device.smem.bandwidth!r}",
    ]
    for size in sorted(device.dsm_bandwidth_table):
        lines.append(f"dsm.bandwidth[{size}] = {device.dsm_bandwidth_table[size]!r}")
    if device.l2 is not None:
        lines.append(f"l2.capacity_bytes = {device.l2.capacity_bytes}")
        lines.append(f"l2.bandwidth_bytes_per_s = {device.l2.bandwidth!r}")
    else:
        lines.append("l2.present = no")
    lines.append(f"global.bandwidth_bytes_per_s = {device.global_mem.bandwidth!r}")
    return "\n".join(lines) + "\n"


def save_device_profile(device: DeviceModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_device_profile(device))


def with_cluster_options(device: DeviceModel, options) -> DeviceModel:
    """Copy of the device restricted to the given cluster dimension options."""
    return replace(device, cluster_dim_options=tuple(sorted(options)))
