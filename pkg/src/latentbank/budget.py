"""KV-footprint accounting for visible-prompt guidance versus selected-layer banks."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

from .errors import InvalidArgument

MIB = 1 << 20


@dataclass(frozen=True)
class BudgetInputs:
    L: int
    L_ctrl: int
    T_prompt: int
    S_bank: int
    n_kv_heads: int = 1
    head_dim: int = 1
    bytes_per_element: int = 2

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not isinstance(v, int) or v <= 0:
                raise InvalidArgument(f"{k} must be a positive integer, got {v!r}")
        if self.L_ctrl > self.L:
            raise InvalidArgument("L_ctrl cannot exceed L")


def kv_ratio(inputs: BudgetInputs) -> float:
    """Idealized guidance-storage ratio ``(L * T_prompt) / (L_ctrl * S_bank)``.

    Evaluated as an exact rational before the final float conversion.
    """
    den = inputs.L_ctrl * inputs.S_bank
    if den == 0:
        raise InvalidArgument("zero denominator")
    return float(Fraction(inputs.L * inputs.T_prompt, den))


def kv_bytes(layers: int, units: int, head_dim: int, positions: int, bytes_per_element: int = 2) -> int:
    """Exact bytes for K and V: ``2 * layers * units * head_dim * positions * bytes``."""
    for name, v in (("layers", layers), ("units", units), ("head_dim", head_dim),
                    ("positions", positions), ("bytes_per_element", bytes_per_element)):
        if not isinstance(v, int) or v <= 0:
            raise InvalidArgument(f"{name} must be a positive integer, got {v!r}")
    return 2 * layers * units * head_dim * positions * bytes_per_element  # Python ints never overflow


@dataclass(frozen=True)
class CacheSetup:
    """KV footprint of one guidance representation."""

    layers: int
    units: int
    head_dim: int
    positions: int
    bytes_per_element: int = 2

    @property
    def bytes(self) -> int:
        return kv_bytes(self.layers, self.units, self.head_dim, self.positions, self.bytes_per_element)


@dataclass(frozen=True)
class BudgetReport:
    name: str
    prompt_bytes: int
    bank_bytes: int
    ratio: float
    idealized_ratio: float

    @property
    def prompt_mib(self) -> float:
        return self.prompt_bytes / MIB

    @property
    def bank_mib(self) -> float:
        return self.bank_bytes / MIB

    HEADER = ("scenario", "prompt_bytes", "prompt_MiB", "bank_bytes", "bank_MiB", "ratio", "idealized_ratio")

    def row(self) -> tuple:
        return (self.name, self.prompt_bytes, f"{self.prompt_mib:.6f}", self.bank_bytes,
                f"{self.bank_mib:.6f}", f"{self.ratio:.6g}", f"{self.idealized_ratio:.6g}")


def budget_report(prompt: CacheSetup, bank: CacheSetup, name: str = "scenario") -> BudgetReport:
    if prompt.head_dim != bank.head_dim:
        raise InvalidArgument("prompt and bank setups disagree on head_dim")
    idealized = float(Fraction(prompt.layers * prompt.positions, bank.layers * bank.positions))
    ratio = float(Fraction(prompt.bytes, bank.bytes))
    return BudgetReport(name, prompt.bytes, bank.bytes, ratio, idealized)


def format_table(reports: list[BudgetReport]) -> str:
    rows = [BudgetReport.HEADER] + [r.row() for r in reports]
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in rows)


def format_csv(reports: list[BudgetReport]) -> str:
    rows = [BudgetReport.HEADER] + [r.row() for r in reports]
    return "\n".join(",".join(str(c) for c in r) for r in rows)
