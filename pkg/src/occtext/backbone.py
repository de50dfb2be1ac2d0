"""Flow-matching transformer adapter contract and a deterministic toy backbone.

An adapter exposes ``total_sites`` attention operators indexed ``0..total_sites-1``.
The first ``double_stream_sites`` indices are the double-stream family (separate
text/image projections), the rest are single-stream (shared projections).

Real backbones are loaded with ``load_backbone("plugin:NAME", ...)``: ``NAME`` is
an entry point in the ``occtext.backbones`` group or a ``module:callable`` path,
and the callable must return a :class:`BackboneAdapter`.
"""
from __future__ import annotations

import abc
import importlib
from dataclasses import dataclass, field
from importlib import metadata
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    DOUBLE_STREAM_SITES,
    TOTAL_SITES,
    LatentTokens,
    SpatialMap,
    TokenGrid,
    gaussian,
    seed_from_key,
)
from .glyph import GlyphRaster, token_coverage
from .kv import KVOverride, KVSlice, replace_image_kv


@dataclass(frozen=True, eq=False)
class Conditioning:
    prompt: str
    embeddings: np.ndarray
    digest: int


class AttentionRecord:
    """Post-softmax text-query rows over image keys, per recorded site.

    ``probs[site]`` has shape (heads, text_length, L_img).
    """

    def __init__(self, probs: Mapping[int, np.ndarray]):
        self.probs = dict(probs)

    @property
    def sites(self) -> tuple[int, ...]:
        return tuple(sorted(self.probs))

    def rows(self, token: int, sites: Iterable[int] | None = None) -> np.ndarray:
        """Array (n_sites, heads, L_img) of token ``token``'s image responses."""
        chosen = self.sites if sites is None else tuple(sites)
        missing = [l for l in chosen if l not in self.probs]
        if missing:
            raise KeyError(f"attention not recorded at sites {missing}")
        return np.stack([self.probs[l][:, token, :] for l in chosen])

    def __call__(self, token: int) -> np.ndarray:
        return self.rows(token).mean(axis=(0, 1))

    @staticmethod
    def average(records: Sequence["AttentionRecord"]) -> "AttentionRecord":
        sites = records[0].sites
        return AttentionRecord({l: np.mean([r.probs[l] for r in records], axis=0) for l in sites})


@dataclass(frozen=True, eq=False)
class ForwardResult:
    velocity: LatentTokens
    captured: tuple[KVSlice, ...]
    attention: AttentionRecord | None
    # sites whose image K/V were actually overridden in this call
    overridden: tuple[int, ...] = ()


class BackboneAdapter(abc.ABC):
    total_sites: int
    double_stream_sites: int
    grid: TokenGrid
    channels: int
    text_length: int
    image_size: tuple[int, int]

    @abc.abstractmethod
    def encode_prompt(self, prompt: str) -> Conditioning: ...

    @abc.abstractmethod
    def encode_glyph(self, raster: GlyphRaster) -> LatentTokens: ...

    @abc.abstractmethod
    def predict_velocity(
        self,
        x: LatentTokens,
        conditioning: Conditioning,
        s: int,
        sites: Iterable[int] = (),
        kv_override: KVOverride | None = None,
        capture: bool = True,
        record_attention: bool = False,
    ) -> ForwardResult:
        """Velocity at step ``s``.

        One KVSlice per site in ``sites`` is captured.  ``kv_override`` is honored
        only at sites in ``sites``; entries at other valid sites are ignored.
        """

    @abc.abstractmethod
    def decode(self, x_final: LatentTokens) -> np.ndarray: ...

    @property
    def aggregation_sites(self) -> tuple[int, ...]:
        return tuple(range(self.double_stream_sites))

    def check_sites(self, sites: Iterable[int]) -> tuple[int, ...]:
        sites = tuple(sites)
        bad = [l for l in sites if not 0 <= l < self.total_sites]
        if bad:
            raise ValueError(f"sites {bad} outside [0, {self.total_sites})")
        return sites


def flow_step(x: LatentTokens, v: LatentTokens, dt: float) -> LatentTokens:
    if not x.same_shape(v):
        raise ValueError(f"shape mismatch: latent {x.values.shape} vs velocity {v.values.shape}")
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    return LatentTokens(x.grid, x.values + dt * v.values)


def max_normalize(values: np.ndarray) -> np.ndarray:
    peak = values.max() if values.size else 0.0
    return values / peak if peak > 0 else np.zeros_like(values)


def extract_token_attention(
    record: AttentionRecord,
    indices: Iterable[int],
    grid: TokenGrid,
    sites: Iterable[int] | None = None,
    head_reduce: str = "mean",
    text_length: int | None = None,
) -> SpatialMap:
    """Average image responses of ``indices`` over heads, sites and tokens; max-normalize."""
    indices = tuple(indices)
    if not indices:
        raise ValueError("empty token index set")
    if text_length is not None:
        bad = [q for q in indices if not 0 <= q < text_length]
        if bad:
            raise ValueError(f"token indices {bad} outside [0, {text_length})")
    reducer = {"mean": np.mean, "max": np.max}[head_reduce]
    per_token = [reducer(record.rows(q, sites), axis=1).mean(axis=0) for q in indices]
    agg = np.clip(max_normalize(np.mean(per_token, axis=0)), 0.0, 1.0)
    return SpatialMap(grid, agg)


# ---------------------------------------------------------------------------
# Toy backbone


def profile_from_spec(spec: Mapping, grid: TokenGrid) -> np.ndarray:
    """Scripted image-token profile from a declarative entry.

    ``{"shape": "point", "token": 17}``, ``{"shape": "rect", "rect": [l, t, r, b]}``
    (normalized, token centers inside), or ``{"shape": "gaussian", "center": [x, y],
    "sigma": tokens}`` with a normalized center.
    """
    rows, cols = np.mgrid[0 : grid.height, 0 : grid.width]
    kind = spec.get("shape")
    if kind == "point":
        p = np.zeros(grid.size)
        p[int(spec["token"])] = 1.0
        return p
    if kind == "rect":
        l, t, r, b = spec["rect"]
        cx = (cols + 0.5) / grid.width
        cy = (rows + 0.5) / grid.height
        p = ((cx >= l) & (cx <= r) & (cy >= t) & (cy <= b)).astype(float)
        if not p.any():
            raise ValueError(f"rect profile {spec['rect']} covers no token centers")
        return p.reshape(-1)
    if kind == "gaussian":
        x, y = spec["center"]
        sigma = float(spec.get("sigma", 1.0))
        cx, cy = x * (grid.width - 1), y * (grid.height - 1)
        return np.exp(-((cols - cx) ** 2 + (rows - cy) ** 2) / (2 * sigma**2)).reshape(-1)
    raise ValueError(f"unknown profile shape {kind!r}")


@dataclass(frozen=True, eq=False)
class ToyBackboneScript:
    """Scripted post-softmax attention rows for selected text tokens.

    ``blend`` = 1 replaces scripted rows outright; smaller values mix in the
    native row as ``(1 - blend) * native + blend * scripted``.
    """

    profiles: Mapping[int, np.ndarray] = field(default_factory=dict)
    blend: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError(f"blend must be in [0, 1], got {self.blend}")
        clean = {}
        for q, p in self.profiles.items():
            p = np.asarray(p, dtype=np.float64).reshape(-1)
            if np.any(p < 0) or not np.all(np.isfinite(p)) or p.max() <= 0:
                raise ValueError(f"profile for token {q} must be nonnegative with a positive max")
            clean[int(q)] = p / p.max()
        object.__setattr__(self, "profiles", clean)

    @classmethod
    def from_specs(cls, specs: Iterable[Mapping], grid: TokenGrid, blend: float = 1.0) -> "ToyBackboneScript":
        profiles: dict[int, np.ndarray] = {}
        for spec in specs:
            p = profile_from_spec(spec, grid)
            for q in spec["tokens"]:
                profiles[int(q)] = p
        return cls(profiles, blend)


def _rms(h: np.ndarray) -> np.ndarray:
    return h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + 1e-6)


class ToyBackbone(BackboneAdapter):
    """Seeded joint-attention transformer over [text; image] tokens.

    Per site: RMS pre-norm, Q/K/V projection (per-stream weights for
    double-stream sites), softmax attention, scripted text-query rows,
    output projection, residual add scaled by ``1/sqrt(total_sites)``.
    Velocity is ``tanh(rms(h_img) @ W_out) - x``, so with step sizes summing
    to one the Euler trajectory stays bounded.  Decoding maps channel 0
    through ``0.5 + 0.5 * clip(t, -1, 1)`` onto square pixel blocks.
    """

    def __init__(
        self,
        grid: TokenGrid,
        channels: int,
        text_length: int,
        num_sites: int,
        heads: int,
        script: ToyBackboneScript,
        seed: int = 0,
        head_dim: int = 8,
        double_stream_sites: int | None = None,
        pixels_per_token: int = 8,
    ):
        for name, val in (("channels", channels), ("text_length", text_length), ("num_sites", num_sites),
                          ("heads", heads), ("head_dim", head_dim), ("pixels_per_token", pixels_per_token)):
            if val < 1:
                raise ValueError(f"{name} must be >= 1, got {val}")
        for q, p in script.profiles.items():
            if p.shape[0] != grid.size:
                raise ValueError(f"script profile for token {q} has length {p.shape[0]}, expected {grid.size}")
            if not 0 <= q < text_length:
                raise ValueError(f"scripted token {q} outside [0, {text_length})")
        self.grid = grid
        self.channels = channels
        self.text_length = text_length
        self.total_sites = num_sites
        self.heads = heads
        self.head_dim = head_dim
        self.double_stream_sites = (
            (num_sites * DOUBLE_STREAM_SITES) // TOTAL_SITES
            if double_stream_sites is None
            else double_stream_sites
        )
        self.pixels_per_token = pixels_per_token
        self.image_size = (grid.height * pixels_per_token, grid.width * pixels_per_token)
        self.script = script
        self.seed = seed

        d = heads * head_dim
        self.dim = d
        self.glyph_weights = np.array([(-1.0) ** c / (1.0 + c) for c in range(channels)])

        def w(name, *shape, scale=1.0):
            return gaussian(seed_from_key("toy", seed, name), shape) * scale

        self.w_in = w("in", channels, d, scale=1 / np.sqrt(channels))
        self.pos = w("pos", grid.size, d)
        self.w_time = w("time", 8, d, scale=0.5)
        self.w_out = w("out", d, channels, scale=1 / np.sqrt(d))
        self.site_weights = []
        for l in range(num_sites):
            if l < self.double_stream_sites:
                qkv = (w(f"qkv_txt{l}", d, 3 * d, scale=1 / np.sqrt(d)), w(f"qkv_img{l}", d, 3 * d, scale=1 / np.sqrt(d)))
                out = (w(f"o_txt{l}", d, d, scale=1 / np.sqrt(d)), w(f"o_img{l}", d, d, scale=1 / np.sqrt(d)))
            else:
                shared_qkv = w(f"qkv{l}", d, 3 * d, scale=1 / np.sqrt(d))
                shared_out = w(f"o{l}", d, d, scale=1 / np.sqrt(d))
                qkv, out = (shared_qkv, shared_qkv), (shared_out, shared_out)
            self.site_weights.append((qkv, out))
        self.res_scale = 1.0 / np.sqrt(num_sites)

        lt = text_length
        self._script_tokens = np.array(sorted(script.profiles), dtype=int)
        rows = np.zeros((len(self._script_tokens), lt + grid.size))
        for i, q in enumerate(self._script_tokens):
            p = script.profiles[q]
            rows[i, lt:] = p / p.sum()
        self._script_rows = rows

    def encode_prompt(self, prompt: str) -> Conditioning:
        digest = seed_from_key("prompt", prompt)
        return Conditioning(prompt, gaussian(digest, (self.text_length, self.dim)), digest)

    def encode_glyph(self, raster: GlyphRaster) -> LatentTokens:
        """Fixed linear encoder: channel c = (token ink coverage - 0.5) * (-1)**c / (1 + c)."""
        cov = token_coverage(raster, self.grid).reshape(-1)
        return LatentTokens(self.grid, (cov - 0.5)[:, None] * self.glyph_weights[None, :])

    def _time_embedding(self, s: int) -> np.ndarray:
        freqs = 1.0 / (4.0 ** np.arange(4))
        feats = np.concatenate([np.sin(s * freqs), np.cos(s * freqs)])
        return feats @ self.w_time

    def predict_velocity(self, x, conditioning, s, sites=(), kv_override=None, capture=True, record_attention=False):
        if x.grid != self.grid or x.channels != self.channels:
            raise ValueError(
                f"latent shape {x.values.shape} does not match adapter ({self.grid.size}, {self.channels})"
            )
        if s < 0:
            raise ValueError(f"step {s} must be >= 0")
        site_set = set(self.check_sites(sites))
        if kv_override is not None:
            self.check_sites(kv_override.base)
            if kv_override.mask.grid != self.grid:
                raise ValueError("override mask grid does not match adapter grid")
            for l, sl in kv_override.base.items():
                if sl.step != s:
                    raise ValueError(f"override slice for site {l} is from step {sl.step}, not {s}")

        lt, li, hd, nh = self.text_length, self.grid.size, self.head_dim, self.heads
        h = np.concatenate([conditioning.embeddings, x.values @ self.w_in + self.pos + self._time_embedding(s)])
        agg = set(self.aggregation_sites) if record_attention else set()
        captured, overridden, probs_rec = [], [], {}
        blend = self.script.blend
        for l, ((wq_t, wq_i), (wo_t, wo_i)) in enumerate(self.site_weights):
            hn = _rms(h)
            if wq_t is wq_i:
                qkv = hn @ wq_t
            else:
                qkv = np.concatenate([hn[:lt] @ wq_t, hn[lt:] @ wq_i])
            q, k, v = qkv[:, : self.dim], qkv[:, self.dim : 2 * self.dim], qkv[:, 2 * self.dim :]
            if l in site_set:
                own = KVSlice(l, s, k[:lt], v[:lt], k[lt:], v[lt:])
                if capture:
                    captured.append(own)
                if kv_override is not None and l in kv_override.base:
                    mixed = replace_image_kv(own, kv_override.base[l], kv_override.mask)
                    k = np.concatenate([k[:lt], mixed.image_keys])
                    v = np.concatenate([v[:lt], mixed.image_values])
                    overridden.append(l)
            qh = q.reshape(-1, nh, hd).transpose(1, 0, 2)
            kh = k.reshape(-1, nh, hd).transpose(1, 0, 2)
            vh = v.reshape(-1, nh, hd).transpose(1, 0, 2)
            logits = qh @ kh.transpose(0, 2, 1) / np.sqrt(hd)
            logits -= logits.max(axis=-1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=-1, keepdims=True)
            if len(self._script_tokens):
                scripted = self._script_rows[None]
                if blend < 1.0:
                    scripted = (1.0 - blend) * p[:, self._script_tokens] + blend * scripted
                p[:, self._script_tokens] = scripted
            if l in agg:
                probs_rec[l] = p[:, :lt, lt:].copy()
            o = (p @ vh).transpose(1, 0, 2).reshape(-1, self.dim)
            if wo_t is wo_i:
                o = o @ wo_t
            else:
                o = np.concatenate([o[:lt] @ wo_t, o[lt:] @ wo_i])
            h = h + self.res_scale * o
        vel = np.tanh(_rms(h[lt:]) @ self.w_out) - x.values
        return ForwardResult(
            LatentTokens(self.grid, vel),
            tuple(captured),
            AttentionRecord(probs_rec) if record_attention else None,
            tuple(overridden),
        )

    def decode(self, x_final: LatentTokens) -> np.ndarray:
        if x_final.grid != self.grid:
            raise ValueError("latent grid does not match adapter")
        g = 0.5 + 0.5 * np.clip(x_final.values[:, 0], -1.0, 1.0)
        block = np.ones((self.pixels_per_token, self.pixels_per_token))
        return np.kron(g.reshape(self.grid.shape), block)


def build_toy_backbone(
    grid: TokenGrid,
    channels: int,
    text_length: int,
    num_sites: int,
    heads: int,
    script: ToyBackboneScript | None = None,
    seed: int = 0,
    **kwargs,
) -> ToyBackbone:
    return ToyBackbone(grid, channels, text_length, num_sites, heads, script or ToyBackboneScript(), seed, **kwargs)


def load_backbone(name: str, **kwargs) -> BackboneAdapter:
    """``"toy"`` builds the toy backbone; ``"plugin:NAME"`` loads an external adapter factory."""
    if name == "toy":
        return build_toy_backbone(**kwargs)
    if not name.startswith("plugin:"):
        raise ValueError(f"unknown backbone {name!r}; expected 'toy' or 'plugin:NAME'")
    target = name[len("plugin:") :]
    factory = None
    for ep in metadata.entry_points(group="occtext.backbones"):
        if ep.name == target:
            factory = ep.load()
            break
    if factory is None:
        module, _, attr = target.partition(":")
        if not attr:
            raise ValueError(f"no entry point {target!r} in group occtext.backbones; use 'module:callable'")
        factory = getattr(importlib.import_module(module), attr)
    adapter = factory(**kwargs)
    if not isinstance(adapter, BackboneAdapter):
        raise TypeError(f"plugin {target!r} returned {type(adapter).__name__}, not a BackboneAdapter")
    return adapter
