"""Deterministic random streams and the token-corruption sampler.

Stream derivation
-----------------
Every random decision is drawn from a stream keyed by
``(master_seed, purpose, epoch, index)``. The 64-bit stream seed is::

    tag   = fnv1a64(purpose.encode("utf-8"))
    s     = mix64(master_seed)
    s     = mix64(s ^ tag)
    s     = mix64(s ^ epoch)
    s     = mix64(s ^ index)

where all arithmetic is modulo 2**64, ``fnv1a64`` is FNV-1a with offset
basis ``0xCBF29CE484222325`` and prime ``0x100000001B3``, and ``mix64`` is
the SplitMix64 step::

    z = (z + 0x9E3779B97F4A7C15)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

The stream then draws from ``numpy.random.Generator(PCG64(seed))``.
Negative epoch/index values are taken modulo 2**64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class ConfigError(ValueError):
    """Invalid run configuration (bad schedule, unknown key, ...)."""


def mix64(z: int) -> int:
    z = (z + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def stream_seed(master_seed: int, purpose: str, epoch: int, index: int) -> int:
    s = mix64(master_seed & MASK64)
    s = mix64(s ^ fnv1a64(purpose.encode("utf-8")))
    s = mix64(s ^ (epoch & MASK64))
    return mix64(s ^ (index & MASK64))


class RngStream:
    """A keyed random stream. Wraps a numpy ``Generator`` seeded from the key mix."""

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def next_u64(self) -> int:
        return int(self.gen.integers(0, 1 << 64, dtype=np.uint64, endpoint=False))

    def __repr__(self) -> str:
        return f"RngStream(seed=0x{self.seed:016x})"


def derive_stream(master_seed: int, purpose: str, epoch: int = 0, index: int = 0) -> RngStream:
    return RngStream(stream_seed(master_seed, purpose, epoch, index))


def round_half_up(x: float) -> int:
    # tolerance absorbs float error in products like 0.35 * 196
    return int(np.floor(x + 0.5 + 1e-9))


# -- sparsity schedule ----------------------------------------------------------

DEFAULT_SCHEDULE = ((0.0, 1), (0.40, 2), (0.55, 3), (0.65, 4))


@dataclass(frozen=True)
class SparsitySchedule:
    """Sparsity ratios paired with batch-size multipliers, drawn uniformly per iteration."""

    entries: tuple[tuple[float, int], ...] = DEFAULT_SCHEDULE

    def __post_init__(self):
        entries = tuple((float(r), int(m)) for r, m in self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise ConfigError("sparsity schedule must have at least one entry")
        for ratio, mult in entries:
            if not 0.0 <= ratio < 1.0:
                raise ConfigError(f"sparsity ratio {ratio} outside [0, 1)")
            if mult < 1:
                raise ConfigError(f"batch multiplier {mult} must be >= 1")

    @property
    def expected_multiplier(self) -> float:
        return float(np.mean([m for _, m in self.entries]))

    def to_text(self) -> str:
        return ",".join(f"{r:g}:{m}" for r, m in self.entries)

    @classmethod
    def from_text(cls, text: str) -> "SparsitySchedule":
        try:
            pairs = [item.split(":") for item in text.split(",") if item.strip()]
            return cls(tuple((float(r), int(m)) for r, m in pairs))
        except ValueError as exc:
            raise ConfigError(f"bad schedule '{text}': expected 'ratio:mult,...'") from exc


def sample_sparsity(schedule: SparsitySchedule, rng: RngStream) -> tuple[float, int]:
    if not schedule.entries:
        raise ConfigError("sparsity schedule is empty")
    return schedule.entries[int(rng.gen.integers(len(schedule.entries)))]


# -- corruption plans -----------------------------------------------------------

@dataclass
class CorruptionPlan:
    """Which grid positions a sample keeps and which kept tokens get a wrong position.

    ``kept`` holds 0-based grid indices in ascending order. ``pos_assignment``
    and ``labels`` are aligned with ``kept``: a token keeps its own index
    unless it is mismatched, in which case it points at a dropped position.
    """

    n_total: int
    kept: np.ndarray
    mismatched: np.ndarray
    pos_assignment: np.ndarray
    labels: np.ndarray
    sparsity: float
    theta: float

    @property
    def dropped(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_total), self.kept, assume_unique=True)

    @property
    def is_dense(self) -> bool:
        return self.sparsity == 0.0

    def validate(self) -> None:
        kept = set(self.kept.tolist())
        mism = set(self.mismatched.tolist())
        if not mism <= kept or not kept <= set(range(self.n_total)):
            raise AssertionError("plan sets are not nested B <= M <= U")
        for i, q, y in zip(self.kept, self.pos_assignment, self.labels):
            ok = (y == 1 and q not in kept and q != i) if i in mism else (y == 0 and q == i)
            if not ok:
                raise AssertionError(f"token {i}: label {y} with position {q} is inconsistent")


def sample_corruption_plan(n_total: int, sparsity: float, theta: float, rng: RngStream) -> CorruptionPlan:
    """Draw the kept set M, the mismatched subset B and the wrong positions for B."""
    if n_total < 2:
        raise ValueError("need at least 2 grid positions")
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity {sparsity} outside [0, 1)")
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta {theta} outside [0, 1]")
    n_keep = max(1, round_half_up((1.0 - sparsity) * n_total))

    gen = rng.gen
    kept = np.sort(gen.choice(n_total, size=n_keep, replace=False))
    n_drop = n_total - n_keep
    n_bad = 0 if sparsity == 0.0 else min(round_half_up(theta * n_keep), n_drop)

    slots = np.sort(gen.choice(n_keep, size=n_bad, replace=False)) if n_bad else np.empty(0, np.int64)
    dropped = np.setdiff1d(np.arange(n_total), kept, assume_unique=True)
    targets = gen.choice(dropped, size=n_bad, replace=False) if n_bad else np.empty(0, np.int64)

    pos = kept.copy()
    pos[slots] = targets
    labels = np.zeros(n_keep, dtype=np.int64)
    labels[slots] = 1
    return CorruptionPlan(
        n_total=n_total,
        kept=kept.astype(np.int64),
        mismatched=kept[slots].astype(np.int64),
        pos_assignment=pos.astype(np.int64),
        labels=labels,
        sparsity=float(sparsity),
        theta=float(theta),
    )


def importance_based_dropping(*_args, **_kwargs):
    """Attention-guided token dropping is deliberately unsupported; random dropping
    performed better in the token-dropping-policy ablation."""
    raise NotImplementedError("importance-based dropping is not supported; use random dropping")


def dense_plan(n_total: int) -> CorruptionPlan:
    idx = np.arange(n_total, dtype=np.int64)
    return CorruptionPlan(n_total, idx, np.empty(0, np.int64), idx.copy(), np.zeros(n_total, np.int64), 0.0, 0.0)


def plan_streams(master_seed: int, epoch: int, indices: Sequence[int], purpose: str = "corrupt") -> list[RngStream]:
    return [derive_stream(master_seed, purpose, epoch, int(i)) for i in indices]
