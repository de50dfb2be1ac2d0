"""Shared domain types, the denoising schedule and deterministic randomness.

Random numbers
--------------
Every random tensor in the package (initial noise, toy-backbone weights,
prompt embeddings) comes from :func:`gaussian`, which is defined only in
terms of bit-stable primitives:

1. ``numpy.random.SeedSequence(seed)`` seeds a ``PCG64`` bit generator
   (128-bit state, 64-bit outputs).
2. ``PCG64.random_raw`` draws raw ``uint64`` words.  Unlike the
   ``Generator`` sampling methods, the raw stream is fixed across numpy
   versions and platforms.
3. The top 53 bits of each word give ``u = (k + 0.5) / 2**53`` in (0, 1).
4. Consecutive pairs ``(u1, u2)`` go through the Box-Muller transform,
   ``sqrt(-2 ln u1) * cos(2 pi u2)`` and ``sqrt(-2 ln u1) * sin(2 pi u2)``,
   in float64.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_STEPS = 28
DEFAULT_REASONING_CUTOFF = 7
DEFAULT_GLYPH_WINDOW = (0.1, 0.4)
DEFAULT_SITES = (1, 2, 4, 26, 30, 54, 55)
# 19 double-stream + 38 single-stream attention operators.
TOTAL_SITES = 57
DOUBLE_STREAM_SITES = 19


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TokenGrid:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"grid dims must be >= 1, got {self.height}x{self.width}")

    @property
    def size(self) -> int:
        return self.height * self.width

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def coords(self, index: int) -> tuple[int, int]:
        return divmod(index, self.width)

    def index(self, row: int, col: int) -> int:
        return row * self.width + col


@dataclass(frozen=True, eq=False)
class LatentTokens:
    """Packed image-token latent, ``grid.size`` rows by ``channels`` columns."""

    grid: TokenGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != self.grid.size:
            raise ValueError(f"latent shape {v.shape} does not match grid with {self.grid.size} tokens")
        if not np.all(np.isfinite(v)):
            raise ValueError("latent contains non-finite values")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def same_shape(self, other: "LatentTokens") -> bool:
        return self.grid == other.grid and self.values.shape == other.values.shape

    def spatial(self) -> np.ndarray:
        """Values as an (H, W, C) array."""
        return self.values.reshape(self.grid.height, self.grid.width, -1)


@dataclass(frozen=True, eq=False)
class SpatialMap:
    """Real map over image tokens, values in [0, 1]."""

    grid: TokenGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.grid.size:
            raise ValueError(f"map length {v.shape[0]} != {self.grid.size} tokens")
        if not np.all(np.isfinite(v)):
            raise ValueError("map contains non-finite values")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError(f"map values must lie in [0, 1], got [{v.min()}, {v.max()}]")
        object.__setattr__(self, "values", _frozen(v))

    def as_2d(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    @classmethod
    def zeros(cls, grid: TokenGrid) -> "SpatialMap":
        return cls(grid, np.zeros(grid.size))


@dataclass(frozen=True, eq=False)
class HardMask:
    grid: TokenGrid
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits).reshape(-1)
        if b.shape[0] != self.grid.size:
            raise ValueError(f"mask length {b.shape[0]} != {self.grid.size} tokens")
        if not np.all((b == 0) | (b == 1)):
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "bits", _frozen(b.astype(bool)))

    def as_2d(self) -> np.ndarray:
        return self.bits.reshape(self.grid.shape)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def full(cls, grid: TokenGrid, value: int) -> "HardMask":
        return cls(grid, np.full(grid.size, bool(value)))


@dataclass(frozen=True)
class DenoiseSchedule:
    num_transitions: int
    step_sizes: tuple[float, ...]
    reasoning_cutoff: int
    glyph_window: tuple[float, float]
    glyph_strength: float

    def __post_init__(self):
        n = self.num_transitions
        if n < 1 or len(self.step_sizes) != n:
            raise ValueError(f"need {n} >= 1 step sizes, got {len(self.step_sizes)}")
        if any(dt < 0 for dt in self.step_sizes):
            raise ValueError("step sizes must be nonnegative")
        if abs(math.fsum(self.step_sizes) - 1.0) > 1e-9:
            raise ValueError(f"step sizes sum to {math.fsum(self.step_sizes)}, expected 1")
        if not 0 <= self.reasoning_cutoff <= n:
            raise ValueError(f"reasoning cutoff {self.reasoning_cutoff} outside [0, {n}]")
        lo, hi = self.glyph_window
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"glyph window {self.glyph_window} must satisfy 0 <= alpha <= beta <= 1")
        if self.glyph_strength < 0:
            raise ValueError("glyph strength must be >= 0")

    def progress(self, s: int) -> float:
        return progress(self, s)

    def in_glyph_window(self, s: int) -> bool:
        lo, hi = self.glyph_window
        return lo <= progress(self, s) <= hi


def build_schedule(
    n: int = DEFAULT_STEPS,
    s_r: int = DEFAULT_REASONING_CUTOFF,
    window: Sequence[float] = DEFAULT_GLYPH_WINDOW,
    strength: float = 1.0,
    step_sizes: Sequence[float] | None = None,
) -> DenoiseSchedule:
    """Uniform ``1/n`` steps unless explicit ``step_sizes`` are supplied."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if s_r > n:
        raise ValueError(f"reasoning cutoff {s_r} exceeds number of steps {n}")
    lo, hi = (float(w) for w in window)
    if lo > hi:
        raise ValueError(f"glyph window start {lo} > end {hi}")
    sizes = tuple(float(d) for d in step_sizes) if step_sizes is not None else (1.0 / n,) * n
    return DenoiseSchedule(n, sizes, s_r, (lo, hi), float(strength))


def progress(schedule: DenoiseSchedule, s: int) -> float:
    n = schedule.num_transitions
    if not 0 <= s <= n:
        raise ValueError(f"step {s} outside [0, {n}]")
    if s == n:
        return 1.0
    return min(1.0, math.fsum(schedule.step_sizes[:s]))


@dataclass(frozen=True)
class AttentionSiteSet:
    sites: tuple[int, ...]
    total_sites: int

    def __post_init__(self):
        if len(set(self.sites)) != len(self.sites):
            raise ValueError(f"duplicate sites in {self.sites}")
        bad = [l for l in self.sites if not 0 <= l < self.total_sites]
        if bad:
            raise ValueError(f"sites {bad} outside [0, {self.total_sites})")

    def __contains__(self, l: int) -> bool:
        return l in self.sites

    def __iter__(self):
        return iter(self.sites)

    def __len__(self):
        return len(self.sites)


@dataclass(frozen=True)
class Rect:
    """Normalized rectangle (left, top, right, bottom) in [0, 1]."""

    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self):
        vals = (self.left, self.top, self.right, self.bottom)
        if not all(0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"rect {vals} must lie in [0, 1]")
        if not (self.left < self.right and self.top < self.bottom):
            raise ValueError(f"rect {vals} has zero or negative area")

    @property
    def area(self) -> float:
        return (self.right - self.left) * (self.bottom - self.top)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.left, self.top, self.right, self.bottom)

    def intersection_area(self, other: "Rect") -> float:
        w = min(self.right, other.right) - max(self.left, other.left)
        h = min(self.bottom, other.bottom) - max(self.top, other.top)
        return w * h if w > 0 and h > 0 else 0.0


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    base_prompt: str
    edit_prompt: str
    target_text: str
    layout_rect: Rect
    text_token_indices: tuple[int, ...]
    occluder_token_indices: tuple[int, ...]
    seed: int = 0
    anchor_strength: float = 0.5
    anchor_fraction: float = 0.5
    occluder_phrase: str = ""
    category: str = ""
    # Region the evaluation compares the detected occluder against; defaults to layout_rect.
    eval_rect: Rect | None = None
    toy_script: tuple[dict, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.text_token_indices:
            raise ValueError("text_token_indices must be nonempty")
        if not self.occluder_token_indices:
            raise ValueError("occluder_token_indices must be nonempty")
        if not 0.0 <= self.anchor_strength <= 1.0:
            raise ValueError(f"anchor_strength {self.anchor_strength} outside [0, 1]")
        if not 0.0 <= self.anchor_fraction <= 1.0:
            raise ValueError(f"anchor_fraction {self.anchor_fraction} outside [0, 1]")
        if not self.target_text:
            raise ValueError("target_text must be nonempty")

    @property
    def text_region(self) -> Rect:
        return self.eval_rect if self.eval_rect is not None else self.layout_rect


def seed_from_key(*parts) -> int:
    """Stable 64-bit integer seed from arbitrary printable parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def gaussian(seed: int, shape: Sequence[int] | int) -> np.ndarray:
    """Standard normal float64 array; see the module docstring for the algorithm."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    n = int(np.prod(shape)) if shape else 1
    bitgen = np.random.PCG64(np.random.SeedSequence(int(seed) % 2**64))
    m = n + (n & 1)
    raw = bitgen.random_raw(m)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 2**53)
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(m)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:n].reshape(shape)


def seeded_noise(seed: int, grid: TokenGrid, channels: int) -> LatentTokens:
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    return LatentTokens(grid, gaussian(seed, (grid.size, channels)))
