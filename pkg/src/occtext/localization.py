"""Text band, anchor weighting and hard fusion mask derivation on the token grid."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import HardMask, Rect, SpatialMap, TokenGrid
from .glyph import square_dilate

__all__ = [
    "HardMask",
    "MaskParams",
    "NoTextEvidence",
    "SpatialMap",
    "TextBand",
    "band_centroid",
    "band_from_rect",
    "build_text_band",
    "derive_hard_mask",
    "make_anchor",
    "smooth",
    "weight_candidate",
]


class NoTextEvidence(ValueError):
    pass


@dataclass(frozen=True)
class MaskParams:
    smooth_sigma: float = 1.0
    threshold_frac: float = 0.5
    dilation_radius: int = 1
    band_threshold_frac: float = 0.5
    min_component_frac: float = 0.02
    anchor_sigma_frac: float = 0.25

    def __post_init__(self):
        for name in ("threshold_frac", "band_threshold_frac", "min_component_frac"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {v}")
        if self.smooth_sigma < 0:
            raise ValueError(f"smooth_sigma must be >= 0, got {self.smooth_sigma}")
        if self.dilation_radius < 0 or int(self.dilation_radius) != self.dilation_radius:
            raise ValueError(f"dilation_radius must be a nonnegative integer, got {self.dilation_radius}")
        if self.anchor_sigma_frac <= 0:
            raise ValueError("anchor_sigma_frac must be > 0")


@dataclass(frozen=True, eq=False)
class TextBand:
    band: SpatialMap
    center: tuple[float, float]
    rows: tuple[int, int]
    # True when the band came from the layout rectangle instead of attention/glyph evidence
    from_layout: bool = False


def smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, reflective borders, kernel truncated at 3 sigma."""
    if sigma <= 0:
        return np.asarray(field, dtype=np.float64)
    return ndimage.gaussian_filter(np.asarray(field, dtype=np.float64), sigma, mode="reflect", truncate=3.0)


def band_centroid(band: SpatialMap) -> tuple[float, float]:
    b = band.as_2d()
    total = b.sum()
    if total <= 0:
        raise ValueError("zero band has no centroid")
    rows, cols = np.indices(b.shape)
    return float((rows * b).sum() / total), float((cols * b).sum() / total)


def _band_from_rows(grid: TokenGrid, lo: int, hi: int, sigma: float, from_layout: bool) -> TextBand:
    ind = np.zeros(grid.shape)
    ind[lo : hi + 1, :] = 1.0
    b = smooth(ind, sigma)
    b = np.clip(b / b.max(), 0.0, 1.0)
    band = SpatialMap(grid, b.reshape(-1))
    return TextBand(band, band_centroid(band), (lo, hi), from_layout)


def build_text_band(a_text: SpatialMap, gate: SpatialMap, params: MaskParams) -> TextBand:
    """Row band around the strongest row of ``max(a_text, gate)``.

    Rows whose mean support reaches ``band_threshold_frac`` of the best row are
    candidates; the contiguous run containing the best row is kept.
    """
    if a_text.grid != gate.grid:
        raise ValueError("attention map and gate are on different grids")
    grid = a_text.grid
    support = np.maximum(a_text.as_2d(), gate.as_2d())
    if not support.any():
        raise NoTextEvidence("no text evidence")
    row_mean = support.mean(axis=1)
    peak = int(np.argmax(row_mean))
    keep = row_mean >= params.band_threshold_frac * row_mean[peak]
    lo = hi = peak
    while lo > 0 and keep[lo - 1]:
        lo -= 1
    while hi < grid.height - 1 and keep[hi + 1]:
        hi += 1
    return _band_from_rows(grid, lo, hi, params.smooth_sigma, False)


def band_from_rect(rect: Rect, grid: TokenGrid, params: MaskParams) -> TextBand:
    """Fallback band over the rows whose token centers fall inside ``rect``."""
    centers = (np.arange(grid.height) + 0.5) / grid.height
    inside = np.flatnonzero((centers >= rect.top) & (centers <= rect.bottom))
    if inside.size:
        lo, hi = int(inside[0]), int(inside[-1])
    else:
        lo = hi = int(np.argmin(np.abs(centers - (rect.top + rect.bottom) / 2)))
    return _band_from_rows(grid, lo, hi, params.smooth_sigma, True)


def band_width(band: SpatialMap) -> int:
    cols = (band.as_2d() > 0.5).any(axis=0)
    return int(cols.sum()) or band.grid.width


def make_anchor(band: SpatialMap, anchor_fraction: float, sigma_frac: float) -> SpatialMap:
    if not band.values.any():
        raise ValueError("zero band")
    grid = band.grid
    row_c, _ = band_centroid(band)
    col_c = anchor_fraction * (grid.width - 1)
    sigma = sigma_frac * band_width(band)
    rows, cols = np.indices(grid.shape)
    w = np.exp(-((rows - row_c) ** 2 + (cols - col_c) ** 2) / (2.0 * sigma**2))
    return SpatialMap(grid, (w / w.max()).reshape(-1))


def anchor_position(band: SpatialMap, anchor_fraction: float) -> tuple[float, float]:
    row_c, _ = band_centroid(band)
    return row_c, anchor_fraction * (band.grid.width - 1)


def weight_candidate(a_obj: SpatialMap, band: SpatialMap, anchor: SpatialMap, rho: float) -> SpatialMap:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    if not (a_obj.grid == band.grid == anchor.grid):
        raise ValueError("maps are on different grids")
    out = a_obj.values * band.values * ((1.0 - rho) + rho * anchor.values)
    return SpatialMap(a_obj.grid, np.clip(out, 0.0, 1.0))


def _round(v: float) -> int:
    return int(math.floor(v + 0.5))


def fallback_mask(band: SpatialMap, anchor: tuple[float, float], radius: int) -> np.ndarray:
    grid = band.grid
    r0, c0 = min(max(_round(anchor[0]), 0), grid.height - 1), min(max(_round(anchor[1]), 0), grid.width - 1)
    square = np.zeros(grid.shape, dtype=bool)
    square[max(r0 - radius, 0) : r0 + radius + 1, max(c0 - radius, 0) : c0 + radius + 1] = True
    band_rows = (band.as_2d() > 0.5).any(axis=1)
    clipped = square & band_rows[:, None]
    return clipped if clipped.any() else square


def derive_hard_mask(
    candidate: SpatialMap | np.ndarray,
    band: SpatialMap,
    band_center: tuple[float, float],
    params: MaskParams,
    anchor: tuple[float, float] | None = None,
) -> tuple[HardMask, bool]:
    """Smooth, threshold, pick the component nearest ``band_center``, dilate.

    Falls back to a ``(2r+1)``-square at ``anchor`` (default: the band center)
    when the picked component is smaller than ``min_component_frac`` of the band.
    Returns ``(mask, used_fallback)``.
    """
    grid = band.grid
    field = np.asarray(getattr(candidate, "values", candidate), dtype=np.float64).reshape(grid.shape)
    anchor = band_center if anchor is None else anchor
    field = smooth(field, params.smooth_sigma)
    peak = field.max()
    band_area = int((band.values > 0.5).sum())
    selected = None
    if peak > 0:
        binary = field >= params.threshold_frac * peak
        labels, n = ndimage.label(binary)
        best = None
        for lab in range(1, n + 1):
            rr, cc = np.nonzero(labels == lab)
            dist = math.hypot(rr.mean() - band_center[0], cc.mean() - band_center[1])
            key = (round(dist, 9), -rr.size, lab)
            if best is None or key < best[0]:
                best = (key, labels == lab)
        if best is not None:
            selected = best[1]
    if selected is None or selected.sum() < params.min_component_frac * band_area:
        bits = fallback_mask(band, anchor, params.dilation_radius)
        return HardMask(grid, bits.reshape(-1)), True
    bits = square_dilate(selected, params.dilation_radius)
    return HardMask(grid, bits.reshape(-1)), False
