"""Spectral glyph-mask injection: raster, gate, low-pass prior and windowed add.

The bundled font is a 5x7 monospaced bitmap (uppercase Latin, digits, basic
punctuation).  Lowercase letters render with the uppercase glyph; any other
character renders as a filled cell rectangle.  A "point size" is the integer
pixel scale of one font dot, so the rasterizer needs no font engine and is
bit-reproducible everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import DenoiseSchedule, LatentTokens, Rect, SpatialMap, TokenGrid

_FONT_ROWS = {
    "A": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "B": ("11110", "10001", "10001", "11110", "10001", "10001", "11110"),
    "C": ("01110", "10001", "10000", "10000", "10000", "10001", "01110"),
    "D": ("11110", "10001", "10001", "10001", "10001", "10001", "11110"),
    "E": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "F": ("11111", "10000", "10000", "11110", "10000", "10000", "10000"),
    "G": ("01110", "10001", "10000", "10111", "10001", "10001", "01111"),
    "H": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "I": ("00100", "00100", "00100", "00100", "00100", "00100", "00100"),
    "J": ("00111", "00010", "00010", "00010", "00010", "10010", "01100"),
    "K": ("10001", "10010", "10100", "11000", "10100", "10010", "10001"),
    "L": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "M": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "N": ("10001", "10001", "11001", "10101", "10011", "10001", "10001"),
    "O": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "P": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "Q": ("01110", "10001", "10001", "10001", "10101", "10010", "01101"),
    "R": ("11110", "10001", "10001", "11110", "10100", "10010", "10001"),
    "S": ("01111", "10000", "10000", "01110", "00001", "00001", "11110"),
    "T": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "U": ("10001", "10001", "10001", "10001", "10001", "10001", "01110"),
    "V": ("10001", "10001", "10001", "10001", "10001", "01010", "00100"),
    "W": ("10001", "10001", "10001", "10101", "10101", "10101", "01010"),
    "X": ("10001", "10001", "01010", "00100", "01010", "10001", "10001"),
    "Y": ("10001", "10001", "01010", "00100", "00100", "00100", "00100"),
    "Z": ("11111", "00001", "00010", "00100", "01000", "10000", "11111"),
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    " ": ("00000",) * 7,
    ".": ("00000", "00000", "00000", "00000", "00000", "01100", "01100"),
    ",": ("00000", "00000", "00000", "00000", "01100", "00100", "01000"),
    "!": ("00100", "00100", "00100", "00100", "00100", "00000", "00100"),
    "?": ("01110", "10001", "00001", "00010", "00100", "00000", "00100"),
    "-": ("00000", "00000", "00000", "11111", "00000", "00000", "00000"),
    "'": ("00100", "00100", "01000", "00000", "00000", "00000", "00000"),
    "&": ("01100", "10010", "10100", "01000", "10101", "10010", "01101"),
}
FONT = {ch: np.array([[c == "1" for c in row] for row in rows], dtype=bool) for ch, rows in _FONT_ROWS.items()}


@dataclass(frozen=True)
class FontSpec:
    cell_width: int = 5
    cell_height: int = 7
    spacing: int = 1
    min_scale: int = 1

    def glyph(self, ch: str) -> np.ndarray:
        g = FONT.get(ch.upper())
        if g is None or g.shape != (self.cell_height, self.cell_width):
            return np.ones((self.cell_height, self.cell_width), dtype=bool)
        return g

    def text_size(self, text: str, scale: int) -> tuple[int, int]:
        """(width, height) in pixels of ``text`` at the given dot scale."""
        n = len(text)
        return (n * self.cell_width + (n - 1) * self.spacing) * scale, self.cell_height * scale


DEFAULT_FONT = FontSpec()


@dataclass(frozen=True, eq=False)
class GlyphRaster:
    pixels: np.ndarray
    layout_rect: Rect

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 2 or not np.all((p == 0) | (p == 1)):
            raise ValueError("glyph raster must be a binary 2-D image")
        p = p.astype(np.uint8)
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)


@dataclass(frozen=True, eq=False)
class GlyphPrior:
    gate: SpatialMap
    prior: LatentTokens
    strength: float
    window: tuple[float, float]

    def __post_init__(self):
        if self.gate.grid.size != self.prior.values.shape[0]:
            raise ValueError("gate length does not match prior rows")


def rect_to_pixels(rect: Rect, canvas: tuple[int, int]) -> tuple[int, int, int, int]:
    """Pixel bounds (x0, y0, x1, y1), half-open, of a normalized rect on an (H, W) canvas."""
    h, w = canvas
    return (int(round(rect.left * w)), int(round(rect.top * h)), int(round(rect.right * w)), int(round(rect.bottom * h)))


def rasterize_glyph(
    target_text: str, layout_rect: Rect, canvas: tuple[int, int], font_spec: FontSpec = DEFAULT_FONT
) -> GlyphRaster:
    """Draw ``target_text`` centered in ``layout_rect`` at the largest scale that fits."""
    if not target_text:
        raise ValueError("empty target text")
    x0, y0, x1, y1 = rect_to_pixels(layout_rect, canvas)
    box_w, box_h = x1 - x0, y1 - y0
    tw, th = font_spec.text_size(target_text, 1)
    scale = min(box_w // tw if tw else 0, box_h // th)
    if scale < font_spec.min_scale:
        need_w, need_h = font_spec.text_size(target_text, font_spec.min_scale)
        raise ValueError(
            f"layout rect of {box_w}x{box_h} px is too small for {target_text!r}; "
            f"needs at least {need_w}x{need_h} px"
        )
    tw, th = font_spec.text_size(target_text, scale)
    ox = x0 + (box_w - tw) // 2
    oy = y0 + (box_h - th) // 2
    pixels = np.zeros(canvas, dtype=np.uint8)
    pitch = (font_spec.cell_width + font_spec.spacing) * scale
    dot = np.ones((scale, scale), dtype=np.uint8)
    for i, ch in enumerate(target_text):
        g = np.kron(font_spec.glyph(ch).astype(np.uint8), dot)
        cx = ox + i * pitch
        pixels[oy : oy + g.shape[0], cx : cx + g.shape[1]] = g
    return GlyphRaster(pixels, layout_rect)


def token_coverage(raster: GlyphRaster, grid: TokenGrid) -> np.ndarray:
    """Fraction of ink per token, area-downsampled to the grid; shape (H, W)."""
    px = raster.pixels.astype(np.float64)
    hp, wp = px.shape
    rows = np.linspace(0, hp, grid.height + 1).round().astype(int)
    cols = np.linspace(0, wp, grid.width + 1).round().astype(int)
    # summed-area table so non-divisible canvases still average exact pixel blocks
    sat = np.zeros((hp + 1, wp + 1))
    sat[1:, 1:] = px.cumsum(0).cumsum(1)
    r0, r1 = rows[:-1, None], rows[1:, None]
    c0, c1 = cols[None, :-1], cols[None, 1:]
    total = sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]
    area = np.maximum((r1 - r0) * (c1 - c0), 1)
    return total / area


def square_dilate(bits: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return bits.astype(bool)
    return ndimage.binary_dilation(bits, structure=np.ones((2 * radius + 1,) * 2, dtype=bool))


def make_gate(raster: GlyphRaster, grid: TokenGrid, dilation_tokens: int = 0) -> SpatialMap:
    cov = token_coverage(raster, grid)
    peak = cov.max()
    active = cov >= 0.5 * peak if peak > 0 else np.zeros(grid.shape, dtype=bool)
    active = square_dilate(active, dilation_tokens)
    return SpatialMap(grid, active.astype(np.float64).reshape(-1))


def radial_lowpass_mask(height: int, width: int, keep_fraction: float) -> np.ndarray:
    """Boolean DFT-domain mask keeping normalized radial frequency <= keep_fraction.

    Radial frequency is divided by that of the (0.5, 0.5) cycles/sample corner, so
    1.0 is the checkerboard frequency and keep_fraction=1 is all-pass.
    """
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    r = np.sqrt(fy**2 + fx**2) / np.sqrt(0.5)
    return r <= keep_fraction + 1e-12


def frequency_filter(latent: LatentTokens, grid: TokenGrid, keep_fraction: float = 0.25) -> LatentTokens:
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if latent.grid != grid:
        raise ValueError("latent is not shaped to the given grid")
    x = latent.values.reshape(grid.height, grid.width, -1)
    spec = np.fft.fft2(x, axes=(0, 1))
    spec *= radial_lowpass_mask(grid.height, grid.width, keep_fraction)[:, :, None]
    out = np.fft.ifft2(spec, axes=(0, 1)).real
    return LatentTokens(grid, out.reshape(grid.size, -1))


def inject_glyph(x: LatentTokens, prior: GlyphPrior, p_s: float) -> LatentTokens:
    """Add the gated prior when ``p_s`` lies in the closed window, else return ``x``."""
    if not x.same_shape(prior.prior):
        raise ValueError("latent and glyph prior shapes differ")
    lo, hi = prior.window
    if not lo <= p_s <= hi or prior.strength == 0:
        return x
    gate = prior.gate.values[:, None] > 0
    added = x.values + prior.strength * (prior.prior.values * prior.gate.values[:, None])
    return LatentTokens(x.grid, np.where(gate, added, x.values))


def build_glyph_prior(
    target_text: str,
    layout_rect: Rect,
    adapter,
    schedule: DenoiseSchedule,
    keep_fraction: float = 0.25,
    gate_dilation: int = 0,
    font_spec: FontSpec = DEFAULT_FONT,
) -> tuple[GlyphPrior, GlyphRaster]:
    raster = rasterize_glyph(target_text, layout_rect, adapter.image_size, font_spec)
    gate = make_gate(raster, adapter.grid, gate_dilation)
    encoded = adapter.encode_glyph(raster)
    prior = frequency_filter(encoded, adapter.grid, keep_fraction)
    return GlyphPrior(gate, prior, schedule.glyph_strength, schedule.glyph_window), raster


def save_gray(path: str | Path, image: np.ndarray) -> None:
    """Write a [0, 1] array as an 8-bit grayscale PGM."""
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255).astype(np.uint8), mode="L").save(str(path), format="PPM")
