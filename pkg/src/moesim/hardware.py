"""Hardware configurations for the stacked accelerator and its baselines.

The stacked design pairs a large planar array for dense GEMM work with a
pool of small stacked arrays that switch per job between GEMM and vector
modes. Baselines keep the planar array but replace the stacked pool with a
fixed SIMD pool, either on the logic die behind an interposer or inside the
DRAM dies.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import ConfigurationError
from .memory import PATH_INTERPOSER, PATH_TSV, EnergyModel
from .systolic import KIND_A3D, KIND_NSA, ArrayShape


@dataclass(frozen=True)
class HardwareConfig:
    name: str
    freq_hz: float
    nsa: ArrayShape | None
    a3d: ArrayShape | None
    simd_units: int
    simd_macs_per_unit: int
    simd_in_dram: bool
    hbm_stacks: int
    hbm_bytes: int
    hbm_bw_bytes_per_s: float
    weight_sram_bytes: int
    vcache_bytes: int
    transport_path: str
    energy: EnergyModel
    power_cap_cooled_w: float
    power_cap_uncooled_w: float

    def __post_init__(self):
        if self.transport_path not in (PATH_TSV, PATH_INTERPOSER):
            raise ConfigurationError(f"bad transport path {self.transport_path!r}")
        if self.nsa is None and self.a3d is None and self.simd_units == 0:
            raise ConfigurationError("hardware has no compute at all")

    @property
    def bytes_per_cycle(self) -> float:
        return self.hbm_bw_bytes_per_s / self.freq_hz

    @property
    def peak_macs_per_cycle(self) -> int:
        total = self.simd_units * self.simd_macs_per_unit
        if self.nsa:
            total += self.nsa.macs_per_cycle
        if self.a3d:
            total += self.a3d.macs_per_cycle
        return total

    @property
    def peak_flops(self) -> float:
        return 2.0 * self.peak_macs_per_cycle * self.freq_hz

    @property
    def ridge_flops_per_byte(self) -> float:
        """Arithmetic intensity where peak compute meets peak bandwidth."""
        return self.peak_flops / self.hbm_bw_bytes_per_s

    def pools(self) -> dict[str, int]:
        out = {}
        if self.nsa:
            out["nsa"] = self.nsa.count
        if self.a3d:
            out["a3d"] = self.a3d.count
        if self.simd_units:
            out["simd"] = self.simd_units
        return out

    def power_cap_w(self, cooling: bool) -> float:
        return self.power_cap_cooled_w if cooling else self.power_cap_uncooled_w


GIB = 1 << 30
MIB = 1 << 20


def _stacked(name: str, scale: int) -> HardwareConfig:
    return HardwareConfig(
        name=name,
        freq_hz=1e9,
        nsa=ArrayShape(KIND_NSA, 32, 384 * scale),
        a3d=ArrayShape(KIND_A3D, 16, 512 * scale),
        simd_units=0,
        simd_macs_per_unit=0,
        simd_in_dram=False,
        hbm_stacks=scale,
        hbm_bytes=36 * GIB * scale,
        hbm_bw_bytes_per_s=9600e9 * scale,
        weight_sram_bytes=16 * MIB * scale,
        vcache_bytes=16 * MIB * scale,
        transport_path=PATH_TSV,
        energy=EnergyModel(),
        power_cap_cooled_w=60.0 * scale,
        power_cap_uncooled_w=40.0 * scale,
    )


def _interposer_baseline(name: str, in_dram: bool, uncooled_w: float) -> HardwareConfig:
    return HardwareConfig(
        name=name,
        freq_hz=1e9,
        nsa=ArrayShape(KIND_NSA, 32, 384),
        a3d=None,
        simd_units=512,
        simd_macs_per_unit=8,
        simd_in_dram=in_dram,
        hbm_stacks=1,
        hbm_bytes=36 * GIB,
        hbm_bw_bytes_per_s=9600e9,
        weight_sram_bytes=16 * MIB,
        vcache_bytes=0,
        transport_path=PATH_INTERPOSER,
        energy=EnergyModel(),
        power_cap_cooled_w=60.0,
        power_cap_uncooled_w=uncooled_w,
    )


PRESETS = {
    "a3d1": _stacked("a3d1", 1),
    "a3d2": _stacked("a3d2", 2),
    # SIMD pool on the logic die, statically partitioned from the GEMM array
    "duplex-like": _interposer_baseline("duplex-like", in_dram=False, uncooled_w=25.0),
    # SIMD pool inside the DRAM dies: costlier in-memory MACs, and results
    # still cross the interposer like the rest of this preset's traffic
    "neupim-like": _interposer_baseline("neupim-like", in_dram=True, uncooled_w=18.0),
}


def get_preset(name: str) -> HardwareConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown hardware preset {name!r}; have {sorted(PRESETS)}") from None


def override(base: HardwareConfig, **fields) -> HardwareConfig:
    return replace(base, **fields)
