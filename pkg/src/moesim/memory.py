"""Backing-memory layout, fetch accounting, and transport energy.

Expert weights live in HBM split by the codec: low bytes on odd DRAM rows,
residual bytes on even rows. A reduced-width fetch therefore activates only
the odd rows and moves exactly half the bytes. Access rows are whole-row
granular.

Transport energy is charged per byte by path: through-silicon vias for the
stacked parts, SerDes plus an interposer link for the 2.5D baselines, and
nothing extra when compute happens inside the DRAM dies (those pay a
multiplier on each multiply-accumulate instead).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import CapacityError, ConfigurationError

ROW_BYTES = 1024

PATH_TSV = "tsv"
PATH_INTERPOSER = "interposer"
PATH_LOCAL = "local"
PATH_SRAM = "sram"


@dataclass(frozen=True)
class EnergyModel:
    """Per-byte and per-operation energy constants, all in picojoules."""

    dram_pj_per_byte: float = 3.5
    serdes_pj_per_byte: float = 1.5
    noc_pj_per_byte_mm: float = 0.8
    sram_pj_per_byte: float = 0.2
    tsv_pj_per_byte: float = 0.3
    mac_pj: float = 0.8
    indram_mac_penalty: float = 3.0
    noc_mm: float = 0.5

    def transport_pj_per_byte(self, path: str) -> float:
        if path == PATH_TSV:
            return self.dram_pj_per_byte + self.tsv_pj_per_byte
        if path == PATH_INTERPOSER:
            return (self.dram_pj_per_byte + self.serdes_pj_per_byte
                    + self.noc_pj_per_byte_mm * self.noc_mm)
        if path == PATH_LOCAL:
            return self.dram_pj_per_byte
        if path == PATH_SRAM:
            return self.sram_pj_per_byte
        raise ConfigurationError(f"unknown transport path {path!r}")

    def mac_pj_for(self, in_dram: bool) -> float:
        return self.mac_pj * (self.indram_mac_penalty if in_dram else 1.0)


@dataclass(frozen=True)
class ExpertPlacement:
    """Row spans of one expert's two byte streams inside its HBM stack."""

    layer: int
    expert: int
    low_bytes: int
    residual_bytes: int
    low_rows: tuple[int, ...]
    residual_rows: tuple[int, ...]

    @property
    def total_bytes(self) -> int:
        return self.low_bytes + self.residual_bytes


def place_experts(num_layers: int, num_experts: int, expert_bytes: int,
                  hbm_bytes: int, row_bytes: int = ROW_BYTES) -> dict[tuple[int, int], ExpertPlacement]:
    """Lay experts out in row pairs: low halves odd rows, residuals even.

    Raises :class:`CapacityError` when the model does not fit.
    """
    if expert_bytes % 2:
        raise ConfigurationError("expert byte size must be even to split")
    low_bytes = expert_bytes // 2
    rows_per_half = math.ceil(low_bytes / row_bytes)
    placements: dict[tuple[int, int], ExpertPlacement] = {}
    pair = 0  # row pair index: pair p covers rows (2p, 2p+1)
    for layer in range(num_layers):
        for expert in range(num_experts):
            even = tuple(2 * (pair + i) for i in range(rows_per_half))
            odd = tuple(r + 1 for r in even)
            placements[(layer, expert)] = ExpertPlacement(
                layer, expert, low_bytes, low_bytes, odd, even)
            pair += rows_per_half
    used = 2 * pair * row_bytes
    if used > hbm_bytes:
        raise CapacityError(
            f"expert weights need {used} bytes, memory holds {hbm_bytes}")
    return placements


@dataclass(frozen=True)
class Fetch:
    """One weight fetch: bytes moved and DRAM rows activated."""

    nbytes: int
    rows: int
    odd_rows_only: bool


def expert_fetch(placement: ExpertPlacement, precision: str) -> Fetch:
    if precision == "fp8":
        return Fetch(placement.low_bytes, len(placement.low_rows), True)
    if precision == "bf16":
        rows = len(placement.low_rows) + len(placement.residual_rows)
        return Fetch(placement.total_bytes, rows, False)
    raise ConfigurationError(f"unknown fetch precision {precision!r}")


class AccessLedger:
    """Byte, row-activation, and event counters grouped by traffic category."""

    def __init__(self):
        self._bytes: dict[str, int] = {}
        self._rows: dict[str, int] = {}
        self._events: dict[str, int] = {}

    def record(self, category: str, nbytes: int, rows: int = 0) -> None:
        self._bytes[category] = self._bytes.get(category, 0) + int(nbytes)
        self._rows[category] = self._rows.get(category, 0) + int(rows)
        self._events[category] = self._events.get(category, 0) + 1

    def bytes(self, category: str | None = None) -> int:
        if category is None:
            return sum(self._bytes.values())
        return self._bytes.get(category, 0)

    def rows(self, category: str | None = None) -> int:
        if category is None:
            return sum(self._rows.values())
        return self._rows.get(category, 0)

    def events(self, category: str | None = None) -> int:
        if category is None:
            return sum(self._events.values())
        return self._events.get(category, 0)

    def categories(self) -> list[str]:
        return sorted(self._bytes)

    def merge(self, other: "AccessLedger") -> None:
        for cat in other.categories():
            self._bytes[cat] = self._bytes.get(cat, 0) + other._bytes[cat]
            self._rows[cat] = self._rows.get(cat, 0) + other._rows[cat]
            self._events[cat] = self._events.get(cat, 0) + other._events[cat]

    def to_csv(self, fh) -> None:
        fh.write("category,bytes,row_activations,events\n")
        for cat in self.categories():
            fh.write(f"{cat},{self._bytes[cat]},{self._rows[cat]},{self._events[cat]}\n")


@dataclass
class EnergyLedger:
    """Accumulated energy in picojoules, grouped by component."""

    pj: dict[str, float] = field(default_factory=dict)

    def add(self, component: str, amount_pj: float) -> None:
        self.pj[component] = self.pj.get(component, 0.0) + amount_pj

    def add_transport(self, model: EnergyModel, path: str, nbytes: int) -> None:
        self.add(f"transport_{path}", model.transport_pj_per_byte(path) * nbytes)

    def add_macs(self, model: EnergyModel, count: float, in_dram: bool = False) -> None:
        self.add("mac_dram" if in_dram else "mac", model.mac_pj_for(in_dram) * count)

    def total_pj(self) -> float:
        return sum(self.pj.values())

    def total_mj(self) -> float:
        return self.total_pj() * 1e-9

    def merge(self, other: "EnergyLedger") -> None:
        for comp, amount in other.pj.items():
            self.add(comp, amount)
