"""Restarted dual-stream inference: reasoning pass, mask derivation, final edit pass.

Both passes start from the same ``z0``.  At every step the Base Stream runs
first (glyph-injected, capturing K/V at the configured sites); the Edit Stream
then runs at the same step with its image-token K/V at those sites mixed with
the Base slices under the hard mask.  The reasoning pass uses the all-zero
mask, i.e. full Base image-K/V substitution.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import AttentionRecord, BackboneAdapter, ForwardResult, extract_token_attention, flow_step
from .core import DEFAULT_SITES, DenoiseSchedule, HardMask, LatentTokens, Scenario, SpatialMap, seeded_noise
from .glyph import GlyphPrior, build_glyph_prior, inject_glyph, save_gray
from .kv import KVOverride, KVSlice, replace_image_kv
from .localization import (
    MaskParams,
    NoTextEvidence,
    TextBand,
    anchor_position,
    band_from_rect,
    build_text_band,
    derive_hard_mask,
    make_anchor,
    weight_candidate,
)

__all__ = [
    "KVCacheStore",
    "PipelineConfig",
    "PipelineResult",
    "final_edit_pass",
    "reasoning_pass",
    "replace_image_kv",
    "run_pipeline",
    "write_artifacts",
]

log = logging.getLogger(__name__)

MODES = ("text_only", "text_sgmi", "stacking", "full")


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    sites: tuple[int, ...] = DEFAULT_SITES
    mask: MaskParams = field(default_factory=MaskParams)
    # None means the adapter's default (all double-stream sites)
    aggregation_sites: tuple[int, ...] | None = None
    head_reduce: str = "mean"
    keep_fraction: float = 0.25
    gate_dilation: int = 0
    # average attention over steps 0..s_r instead of taking step s_r alone
    accumulate_maps: bool = False

    def __post_init__(self):
        if self.head_reduce not in ("mean", "max"):
            raise ValueError(f"head_reduce must be 'mean' or 'max', got {self.head_reduce!r}")
        if len(set(self.sites)) != len(self.sites):
            raise ValueError(f"duplicate sites in {self.sites}")


class KVCacheStore:
    """Same-step cache of Base Stream slices, keyed by (step, site)."""

    def __init__(self):
        self._slices: dict[tuple[int, int], KVSlice] = {}
        self._written: set[tuple[int, int]] = set()

    def put(self, sl: KVSlice) -> None:
        key = (sl.step, sl.site)
        if key in self._written:
            raise RuntimeError(f"K/V for step {sl.step}, site {sl.site} already written in this pass")
        self._written.add(key)
        self._slices[key] = sl

    def take_step(self, s: int) -> dict[int, KVSlice]:
        """Remove and return every slice of step ``s``; stale steps are an error."""
        stale = [k for k in self._slices if k[0] != s]
        if stale:
            raise RuntimeError(f"cache holds slices from other steps: {sorted(stale)}")
        out = {site: sl for (step, site), sl in self._slices.items()}
        self._slices.clear()
        return out

    def __len__(self):
        return len(self._slices)


@dataclass
class StreamLog:
    """Per-pass bookkeeping for tests and manifests."""

    overridden: list[tuple[int, ...]] = field(default_factory=list)
    # (consumer step, producer step, site) for every consumed Base slice
    provenance: list[tuple[int, int, int]] = field(default_factory=list)
    entry_latent: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class ReasoningResult:
    band: TextBand
    a_text: SpatialMap
    a_obj: SpatialMap
    anchor: SpatialMap
    candidate: SpatialMap
    mask: HardMask
    used_fallback: bool
    log: StreamLog


@dataclass(frozen=True, eq=False)
class FinalPassResult:
    edit: LatentTokens
    base: LatentTokens
    log: StreamLog


@dataclass(frozen=True, eq=False)
class PipelineResult:
    scenario_id: str
    seed: int
    mode: str
    image: np.ndarray
    final_latent: LatentTokens
    z0: LatentTokens
    mask: HardMask | None = None
    band: SpatialMap | None = None
    band_center: tuple[float, float] | None = None
    a_text: SpatialMap | None = None
    a_obj: SpatialMap | None = None
    anchor: SpatialMap | None = None
    candidate: SpatialMap | None = None
    used_fallback: bool = False
    band_from_layout: bool = False
    glyph: GlyphPrior | None = None
    reasoning_log: StreamLog | None = None
    final_log: StreamLog | None = None
    base_latent: LatentTokens | None = None

    @property
    def trace(self) -> list[tuple[int, ...]]:
        return self.final_log.overridden if self.final_log is not None else []


def _base_forward(adapter, x, cond, s, schedule, glyph, sites, record):
    x_in = inject_glyph(x, glyph, schedule.progress(s)) if glyph is not None else x
    return x_in, adapter.predict_velocity(x_in, cond, s, sites=sites, capture=True, record_attention=record)


def _dual_step(
    adapter: BackboneAdapter,
    s: int,
    x_base: LatentTokens,
    x_edit: LatentTokens,
    cond_base,
    cond_edit,
    schedule: DenoiseSchedule,
    glyph: GlyphPrior | None,
    mask: HardMask,
    sites: tuple[int, ...],
    store: KVCacheStore,
    slog: StreamLog,
    record: bool,
) -> tuple[LatentTokens, ForwardResult, ForwardResult]:
    x_in, out_b = _base_forward(adapter, x_base, cond_base, s, schedule, glyph, sites, record)
    for sl in out_b.captured:
        store.put(sl)
    base = store.take_step(s)
    out_e = adapter.predict_velocity(
        x_edit, cond_edit, s, sites=sites, kv_override=KVOverride(mask, base), capture=False, record_attention=record
    )
    slog.overridden.append(out_e.overridden)
    slog.provenance.extend((s, base[l].step, l) for l in out_e.overridden)
    return x_in, out_b, out_e


def reasoning_pass(
    scenario: Scenario,
    schedule: DenoiseSchedule,
    adapter: BackboneAdapter,
    glyph: GlyphPrior | None,
    z0: LatentTokens,
    config: PipelineConfig = PipelineConfig(),
) -> ReasoningResult:
    """Pass A: run steps ``0..s_r-1`` with full Base image-K/V substitution, then localize at ``s_r``."""
    grid = adapter.grid
    sites = adapter.check_sites(config.sites)
    cond_b = adapter.encode_prompt(scenario.base_prompt)
    cond_e = adapter.encode_prompt(scenario.edit_prompt)
    zero = HardMask.full(grid, 0)
    store = KVCacheStore()
    slog = StreamLog(entry_latent=z0.values)
    x_b = x_e = z0
    rec_b: list[AttentionRecord] = []
    rec_e: list[AttentionRecord] = []
    for s in range(schedule.reasoning_cutoff + 1):
        at_cutoff = s == schedule.reasoning_cutoff
        record = at_cutoff or config.accumulate_maps
        x_in, out_b, out_e = _dual_step(
            adapter, s, x_b, x_e, cond_b, cond_e, schedule, glyph, zero, sites, store, slog, record
        )
        if record:
            rec_b.append(out_b.attention)
            rec_e.append(out_e.attention)
        if not at_cutoff:
            dt = schedule.step_sizes[s]
            x_b = flow_step(x_in, out_b.velocity, dt)
            x_e = flow_step(x_e, out_e.velocity, dt)

    agg = config.aggregation_sites
    att_b = rec_b[0] if len(rec_b) == 1 else AttentionRecord.average(rec_b)
    att_e = rec_e[0] if len(rec_e) == 1 else AttentionRecord.average(rec_e)
    a_text = extract_token_attention(
        att_b, scenario.text_token_indices, grid, agg, config.head_reduce, adapter.text_length
    )
    a_obj = extract_token_attention(
        att_e, scenario.occluder_token_indices, grid, agg, config.head_reduce, adapter.text_length
    )
    gate = glyph.gate if glyph is not None else SpatialMap.zeros(grid)
    params = config.mask
    try:
        band = build_text_band(a_text, gate, params)
    except NoTextEvidence:
        log.warning("scenario %s: no text evidence, using layout band", scenario.scenario_id)
        band = band_from_rect(scenario.layout_rect, grid, params)
    anchor = make_anchor(band.band, scenario.anchor_fraction, params.anchor_sigma_frac)
    candidate = weight_candidate(a_obj, band.band, anchor, scenario.anchor_strength)
    mask, used_fallback = derive_hard_mask(
        candidate, band.band, band.center, params, anchor=anchor_position(band.band, scenario.anchor_fraction)
    )
    return ReasoningResult(band, a_text, a_obj, anchor, candidate, mask, used_fallback, slog)


def final_edit_pass(
    scenario: Scenario,
    schedule: DenoiseSchedule,
    adapter: BackboneAdapter,
    glyph: GlyphPrior | None,
    z0: LatentTokens,
    mask: HardMask,
    config: PipelineConfig = PipelineConfig(),
) -> FinalPassResult:
    """Pass B: restart from ``z0`` and run all steps with mask-guided image-K/V replacement."""
    if mask.count == 0:
        raise ValueError("final edit pass needs a nonempty mask")
    sites = adapter.check_sites(config.sites)
    cond_b = adapter.encode_prompt(scenario.base_prompt)
    cond_e = adapter.encode_prompt(scenario.edit_prompt)
    store = KVCacheStore()
    slog = StreamLog(entry_latent=z0.values)
    x_b = x_e = z0
    for s in range(schedule.num_transitions):
        x_in, out_b, out_e = _dual_step(
            adapter, s, x_b, x_e, cond_b, cond_e, schedule, glyph, mask, sites, store, slog, False
        )
        dt = schedule.step_sizes[s]
        x_b = flow_step(x_in, out_b.velocity, dt)
        x_e = flow_step(x_e, out_e.velocity, dt)
    return FinalPassResult(x_e, x_b, slog)


def run_single_stream(
    prompt: str,
    schedule: DenoiseSchedule,
    adapter: BackboneAdapter,
    z0: LatentTokens,
    glyph: GlyphPrior | None = None,
) -> LatentTokens:
    """Uncontrolled sampling of one prompt, optionally glyph-injected."""
    cond = adapter.encode_prompt(prompt)
    x = z0
    for s in range(schedule.num_transitions):
        x_in, out = _base_forward(adapter, x, cond, s, schedule, glyph, (), False)
        x = flow_step(x_in, out.velocity, schedule.step_sizes[s])
    return x


def run_pipeline(
    scenario: Scenario,
    schedule: DenoiseSchedule,
    adapter: BackboneAdapter,
    params: MaskParams | None = None,
    config: PipelineConfig | None = None,
    mode: str = "full",
    seed: int | None = None,
) -> PipelineResult:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    config = config or PipelineConfig()
    if params is not None:
        config = PipelineConfig(**{**asdict_shallow(config), "mask": params})
    seed = scenario.seed if seed is None else seed
    try:
        return _run(scenario, schedule, adapter, config, mode, seed)
    except Exception as exc:
        raise PipelineError(f"scenario {scenario.scenario_id!r} seed {seed}: {exc}") from exc


def asdict_shallow(cfg) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


def _run(scenario, schedule, adapter, config, mode, seed) -> PipelineResult:
    z0 = seeded_noise(seed, adapter.grid, adapter.channels)
    glyph = None
    if mode != "text_only":
        glyph, _ = build_glyph_prior(
            scenario.target_text, scenario.layout_rect, adapter, schedule, config.keep_fraction, config.gate_dilation
        )
    common = dict(scenario_id=scenario.scenario_id, seed=seed, mode=mode, z0=z0, glyph=glyph)
    if mode in ("text_only", "text_sgmi", "stacking"):
        prompt = scenario.edit_prompt if mode == "stacking" else scenario.base_prompt
        x_n = run_single_stream(prompt, schedule, adapter, z0, glyph)
        return PipelineResult(image=adapter.decode(x_n), final_latent=x_n, **common)

    reason = reasoning_pass(scenario, schedule, adapter, glyph, z0, config)
    final = final_edit_pass(scenario, schedule, adapter, glyph, z0, reason.mask, config)
    if not np.array_equal(reason.log.entry_latent, final.log.entry_latent):
        raise AssertionError("reasoning and final passes started from different latents")
    return PipelineResult(
        image=adapter.decode(final.edit),
        final_latent=final.edit,
        mask=reason.mask,
        band=reason.band.band,
        band_center=reason.band.center,
        a_text=reason.a_text,
        a_obj=reason.a_obj,
        anchor=reason.anchor,
        candidate=reason.candidate,
        used_fallback=reason.used_fallback,
        band_from_layout=reason.band.from_layout,
        reasoning_log=reason.log,
        final_log=final.log,
        base_latent=final.base,
        **common,
    )


def _token_image(values: np.ndarray, grid, scale: int = 8) -> np.ndarray:
    return np.kron(np.asarray(values, dtype=np.float64).reshape(grid.shape), np.ones((scale, scale)))


def image_digest(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float64).tobytes()).hexdigest()


def write_artifacts(
    result: PipelineResult,
    run_dir: str | Path,
    schedule: DenoiseSchedule,
    config: PipelineConfig,
    debug_maps: bool = False,
    extra: dict | None = None,
) -> Path:
    """Write ``image.pgm``, optional ``maps/*.pgm`` and ``manifest.json`` into ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_gray(run_dir / "image.pgm", result.image)
    maps_written = []
    if debug_maps:
        maps_dir = run_dir / "maps"
        maps_dir.mkdir(exist_ok=True)
        named = {
            "a_text": result.a_text,
            "a_obj": result.a_obj,
            "band": result.band,
            "anchor": result.anchor,
            "candidate": result.candidate,
        }
        for name, m in named.items():
            if m is not None:
                save_gray(maps_dir / f"{name}.pgm", _token_image(m.values, m.grid))
                maps_written.append(name)
        if result.mask is not None:
            save_gray(maps_dir / "mask.pgm", _token_image(result.mask.bits, result.mask.grid))
            maps_written.append("mask")
        if result.glyph is not None:
            g = result.glyph
            save_gray(maps_dir / "gate.pgm", _token_image(g.gate.values, g.gate.grid))
            p0 = g.prior.values[:, 0]
            span = np.ptp(p0)
            save_gray(maps_dir / "prior.pgm", _token_image((p0 - p0.min()) / span if span > 0 else p0 * 0, g.gate.grid))
            maps_written += ["gate", "prior"]
    manifest = {
        "scenario_id": result.scenario_id,
        "seed": result.seed,
        "mode": result.mode,
        "image": "image.pgm",
        "image_sha256": image_digest(result.image),
        "schedule": {
            "num_transitions": schedule.num_transitions,
            "reasoning_cutoff": schedule.reasoning_cutoff,
            "glyph_window": list(schedule.glyph_window),
            "glyph_strength": schedule.glyph_strength,
        },
        "sites": list(config.sites),
        "mask_params": asdict(config.mask),
        "maps": maps_written,
    }
    if result.mode == "full":
        manifest["used_fallback"] = result.used_fallback
        manifest["band_from_layout"] = result.band_from_layout
        manifest["mask_tokens"] = [int(i) for i in np.flatnonzero(result.mask.bits)]
        manifest["trace"] = {"final_pass": [list(t) for t in result.trace]}
    if extra:
        manifest.update(extra)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return run_dir
