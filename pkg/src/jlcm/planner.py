"""Turn the compression target alpha into per-layer codebook structure.

With ``b = floor(16 / alpha)`` index bits, the codebook holds ``2**b``
codewords. The bit budget left over once every weight pays for its index,

    slack = (16 / alpha - b) * n_o * n_i,

buys either scale factors (16 bits each) or extra codebooks
(``16 * codebook_size`` bits each). Both counts are clamped to ``[1, n_o]``
so group boundaries always fall on whole rows.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass


class PlanError(ValueError):
    pass


class Mode(str, enum.Enum):
    MULTI_SCALE = "multi_scale"
    MULTI_CODEBOOK = "multi_codebook"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        return cls(str(value).replace("-", "_"))


@dataclass(frozen=True)
class CompressionPlan:
    alpha: float
    mode: Mode
    codebook_size: int
    num_codebooks: int
    num_scales: int
    n_o: int
    n_i: int

    @property
    def bits_per_index(self) -> int:
        return self.codebook_size.bit_length() - 1

    @property
    def num_groups(self) -> int:
        """Contiguous row groups: one per codebook, or one per scale."""
        return self.num_codebooks if self.mode is Mode.MULTI_CODEBOOK else self.num_scales

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "mode": self.mode.value,
            "codebook_size": self.codebook_size,
            "num_codebooks": self.num_codebooks,
            "num_scales": self.num_scales,
            "bits_per_index": self.bits_per_index,
            "n_o": self.n_o,
            "n_i": self.n_i,
        }


def codebook_size_for(alpha: float) -> int:
    if not alpha > 1:
        raise PlanError("alpha must exceed 1")
    if alpha > 16:
        raise PlanError("alpha must not exceed 16 (a codebook needs at least 2 entries)")
    return 2 ** math.floor(16 / alpha)


def derive_plan(n_o: int, n_i: int, alpha: float, mode: Mode | str = Mode.MULTI_CODEBOOK) -> CompressionPlan:
    mode = Mode.parse(mode)
    if n_o < 1 or n_i < 1:
        raise PlanError(f"layer shape must be positive, got {n_o} x {n_i}")
    size = codebook_size_for(alpha)
    bits = size.bit_length() - 1
    slack = (16.0 / alpha - bits) * (n_o * n_i)
    scales = min(max(math.floor(slack / 16.0), 1), n_o)
    books = min(max(math.floor(slack / (16.0 * size)), 1), n_o)
    if mode is Mode.MULTI_SCALE:
        return CompressionPlan(alpha, mode, size, 1, scales, n_o, n_i)
    return CompressionPlan(alpha, mode, size, books, 0, n_o, n_i)


def predicted_footprint(plan: CompressionPlan, n_o: int | None = None, n_i: int | None = None) -> int:
    """Weight footprint in bits: 16-bit codewords and scales plus packed indices."""
    n_o = plan.n_o if n_o is None else n_o
    n_i = plan.n_i if n_i is None else n_i
    index_bits = plan.bits_per_index * n_o * n_i
    if plan.mode is Mode.MULTI_SCALE:
        return (plan.codebook_size + plan.num_scales) * 16 + index_bits
    return plan.num_codebooks * plan.codebook_size * 16 + index_bits


def budget_bits(n_o: int, n_i: int, alpha: float) -> float:
    return 16.0 * n_o * n_i / alpha
