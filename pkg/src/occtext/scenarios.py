"""Scenario file format: TOML with a ``[defaults]`` table and ``[[scenario]]`` entries.

Grammar (all keys optional unless marked)::

    [defaults]
    steps = 28                     # denoising transitions N
    reasoning_cutoff = 7           # s_r
    glyph_window = [0.1, 0.4]      # closed progress window
    glyph_strength = 1.0
    sites = [1, 2, 4, 26, 30, 54, 55]
    aggregation_sites = [0, 1]     # omit for all double-stream sites
    head_reduce = "mean"           # or "max"
    keep_fraction = 0.25           # low-pass cutoff of the glyph prior
    gate_dilation = 0
    accumulate_maps = false

    [defaults.mask]                # MaskParams fields
    smooth_sigma = 1.0
    threshold_frac = 0.5
    dilation_radius = 1
    band_threshold_frac = 0.5
    min_component_frac = 0.02
    anchor_sigma_frac = 0.25

    [defaults.toy]                 # toy backbone shape
    grid = [8, 8]
    channels = 16
    text_length = 16
    num_sites = 57
    heads = 2
    head_dim = 8
    seed = 0
    script_blend = 1.0

    [[scenario]]
    id = "poster-coffee"           # required, unique
    category = "poster"
    base_prompt = "..."            # required
    edit_prompt = "..."            # required
    target_text = "COFFEE"         # required
    occluder = "vinyl record"      # detector phrase
    layout_rect = [0.1, 0.3, 0.9, 0.7]   # required, normalized l, t, r, b
    eval_rect = [0.1, 0.3, 0.9, 0.7]     # defaults to layout_rect
    text_tokens = [3]              # required, Q
    occluder_tokens = [9, 10]      # required, O
    seed = 0
    anchor_strength = 0.5          # rho
    anchor_fraction = 0.5          # t

      [[scenario.toy_script]]      # scripted attention for the toy backbone
      tokens = [9, 10]
      shape = "gaussian"           # "point" (token=), "rect" (rect=), "gaussian" (center=, sigma=)
      center = [0.5, 0.5]
      sigma = 1.0
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .core import (
    DEFAULT_GLYPH_WINDOW,
    DEFAULT_REASONING_CUTOFF,
    DEFAULT_SITES,
    DEFAULT_STEPS,
    TOTAL_SITES,
    DenoiseSchedule,
    Rect,
    Scenario,
    build_schedule,
)
from .dualstream import PipelineConfig
from .localization import MaskParams


class ScenarioFileError(ValueError):
    pass


@dataclass(frozen=True)
class ToyConfig:
    grid: tuple[int, int] = (8, 8)
    channels: int = 16
    text_length: int = 16
    num_sites: int = TOTAL_SITES
    heads: int = 2
    head_dim: int = 8
    seed: int = 0
    script_blend: float = 1.0


@dataclass(frozen=True)
class ScenarioFile:
    scenarios: tuple[Scenario, ...]
    schedule: DenoiseSchedule = field(default_factory=build_schedule)
    config: PipelineConfig = field(default_factory=PipelineConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)

    def by_id(self, scenario_id: str) -> Scenario:
        for sc in self.scenarios:
            if sc.scenario_id == scenario_id:
                return sc
        raise KeyError(scenario_id)


_DEFAULT_KEYS = {
    "steps", "reasoning_cutoff", "glyph_window", "glyph_strength", "sites", "aggregation_sites",
    "head_reduce", "keep_fraction", "gate_dilation", "accumulate_maps", "mask", "toy",
}
_MASK_KEYS = set(MaskParams.__dataclass_fields__)
_TOY_KEYS = set(ToyConfig.__dataclass_fields__)
_SCENARIO_KEYS = {
    "id", "category", "base_prompt", "edit_prompt", "target_text", "occluder", "layout_rect", "eval_rect",
    "text_tokens", "occluder_tokens", "seed", "anchor_strength", "anchor_fraction", "toy_script",
}
_REQUIRED = ("id", "base_prompt", "edit_prompt", "target_text", "layout_rect", "text_tokens", "occluder_tokens")
_SCRIPT_KEYS = {"tokens", "shape", "token", "rect", "center", "sigma"}


def _check_keys(table: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ScenarioFileError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _rect(value, where: str) -> Rect:
    try:
        return Rect(*(float(v) for v in value))
    except (TypeError, ValueError) as exc:
        raise ScenarioFileError(f"{where}: {exc}") from None


def parse_scenarios(doc: dict, source: str = "<string>") -> ScenarioFile:
    _check_keys(doc, {"defaults", "scenario"}, source)
    d = doc.get("defaults", {})
    _check_keys(d, _DEFAULT_KEYS, f"{source}: defaults")
    _check_keys(d.get("mask", {}), _MASK_KEYS, f"{source}: defaults.mask")
    _check_keys(d.get("toy", {}), _TOY_KEYS, f"{source}: defaults.toy")
    try:
        schedule = build_schedule(
            int(d.get("steps", DEFAULT_STEPS)),
            int(d.get("reasoning_cutoff", DEFAULT_REASONING_CUTOFF)),
            d.get("glyph_window", DEFAULT_GLYPH_WINDOW),
            float(d.get("glyph_strength", 1.0)),
        )
    except ValueError as exc:
        raise ScenarioFileError(f"{source}: defaults: {exc}") from None
    try:
        mask = MaskParams(**d.get("mask", {}))
    except (TypeError, ValueError) as exc:
        raise ScenarioFileError(f"{source}: defaults.mask: {exc}") from None
    toy_d = dict(d.get("toy", {}))
    if "grid" in toy_d:
        toy_d["grid"] = tuple(int(v) for v in toy_d["grid"])
    toy = ToyConfig(**toy_d)
    agg = d.get("aggregation_sites")
    try:
        config = PipelineConfig(
            sites=tuple(int(s) for s in d.get("sites", DEFAULT_SITES)),
            mask=mask,
            aggregation_sites=tuple(int(s) for s in agg) if agg is not None else None,
            head_reduce=d.get("head_reduce", "mean"),
            keep_fraction=float(d.get("keep_fraction", 0.25)),
            gate_dilation=int(d.get("gate_dilation", 0)),
            accumulate_maps=bool(d.get("accumulate_maps", False)),
        )
    except ValueError as exc:
        raise ScenarioFileError(f"{source}: defaults: {exc}") from None
    bad_sites = [s for s in config.sites if not 0 <= s < toy.num_sites]
    if bad_sites:
        raise ScenarioFileError(f"{source}: defaults.sites: {bad_sites} outside [0, {toy.num_sites})")

    entries = doc.get("scenario", [])
    if not entries:
        raise ScenarioFileError(f"{source}: no [[scenario]] entries")
    scenarios, seen = [], set()
    for i, e in enumerate(entries):
        where = f"{source}: scenario[{i}]"
        _check_keys(e, _SCENARIO_KEYS, where)
        missing = [k for k in _REQUIRED if k not in e]
        if missing:
            raise ScenarioFileError(f"{where}: missing required key(s) {', '.join(missing)}")
        where = f"{source}: scenario[{i}] ({e['id']})"
        if e["id"] in seen:
            raise ScenarioFileError(f"{where}: duplicate id")
        seen.add(e["id"])
        script = []
        for j, entry in enumerate(e.get("toy_script", [])):
            _check_keys(entry, _SCRIPT_KEYS, f"{where}.toy_script[{j}]")
            if "tokens" not in entry or "shape" not in entry:
                raise ScenarioFileError(f"{where}.toy_script[{j}]: needs 'tokens' and 'shape'")
            script.append(dict(entry))
        try:
            sc = Scenario(
                scenario_id=str(e["id"]),
                base_prompt=e["base_prompt"],
                edit_prompt=e["edit_prompt"],
                target_text=e["target_text"],
                layout_rect=_rect(e["layout_rect"], f"{where}.layout_rect"),
                text_token_indices=tuple(int(q) for q in e["text_tokens"]),
                occluder_token_indices=tuple(int(q) for q in e["occluder_tokens"]),
                seed=int(e.get("seed", 0)),
                anchor_strength=float(e.get("anchor_strength", 0.5)),
                anchor_fraction=float(e.get("anchor_fraction", 0.5)),
                occluder_phrase=e.get("occluder", ""),
                category=e.get("category", ""),
                eval_rect=_rect(e["eval_rect"], f"{where}.eval_rect") if "eval_rect" in e else None,
                toy_script=tuple(script),
            )
        except ScenarioFileError:
            raise
        except (TypeError, ValueError) as exc:
            raise ScenarioFileError(f"{where}: {exc}") from None
        tokens = sc.text_token_indices + sc.occluder_token_indices
        bad = [q for q in tokens if not 0 <= q < toy.text_length]
        if bad:
            raise ScenarioFileError(f"{where}: token indices {bad} outside [0, {toy.text_length})")
        scenarios.append(sc)
    return ScenarioFile(tuple(scenarios), schedule, config, toy)


def load_scenarios(path: str | Path) -> ScenarioFile:
    path = Path(path)
    try:
        doc = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ScenarioFileError(f"{path}: parse error: {exc}") from None
    return parse_scenarios(doc, str(path))


def to_document(sf: ScenarioFile) -> dict:
    s, c = sf.schedule, sf.config
    if any(abs(dt - 1.0 / s.num_transitions) > 1e-15 for dt in s.step_sizes):
        raise ValueError("non-uniform step sizes cannot be expressed in the scenario file")
    defaults = {
        "steps": s.num_transitions,
        "reasoning_cutoff": s.reasoning_cutoff,
        "glyph_window": list(s.glyph_window),
        "glyph_strength": s.glyph_strength,
        "sites": list(c.sites),
        "head_reduce": c.head_reduce,
        "keep_fraction": c.keep_fraction,
        "gate_dilation": c.gate_dilation,
        "accumulate_maps": c.accumulate_maps,
        "mask": asdict(c.mask),
        "toy": {**asdict(sf.toy), "grid": list(sf.toy.grid)},
    }
    if c.aggregation_sites is not None:
        defaults["aggregation_sites"] = list(c.aggregation_sites)
    entries = []
    for sc in sf.scenarios:
        e = {
            "id": sc.scenario_id,
            "category": sc.category,
            "base_prompt": sc.base_prompt,
            "edit_prompt": sc.edit_prompt,
            "target_text": sc.target_text,
            "occluder": sc.occluder_phrase,
            "layout_rect": list(sc.layout_rect.as_tuple()),
            "text_tokens": list(sc.text_token_indices),
            "occluder_tokens": list(sc.occluder_token_indices),
            "seed": sc.seed,
            "anchor_strength": sc.anchor_strength,
            "anchor_fraction": sc.anchor_fraction,
        }
        if sc.eval_rect is not None:
            e["eval_rect"] = list(sc.eval_rect.as_tuple())
        if sc.toy_script:
            e["toy_script"] = [dict(x) for x in sc.toy_script]
        entries.append(e)
    return {"defaults": defaults, "scenario": entries}


def dump_scenarios(sf: ScenarioFile) -> str:
    return tomli_w.dumps(to_document(sf))


def bundled_scenarios_path() -> Path:
    return Path(__file__).parent / "data" / "scenarios.toml"
