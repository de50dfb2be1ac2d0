"""Command line entry point: ``occtext run`` and ``occtext eval``.

Run directory layout::

    OUT/<mode>/<scenario_id>__seed<k>/image.pgm
    OUT/<mode>/<scenario_id>__seed<k>/manifest.json
    OUT/<mode>/<scenario_id>__seed<k>/maps/*.pgm      (with --debug-maps)
    OUT/<mode>/index.json                             runs and failures of the last invocation
    OUT/<mode>/failures.json                          only when some run failed

Exit codes: 0 success, 1 some runs (or records) failed, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from .backbone import ToyBackboneScript, build_toy_backbone, load_backbone
from .core import TokenGrid
from .dualstream import MODES, run_pipeline, write_artifacts
from .evaluation import (
    DETECTION_THRESHOLD,
    EvalRecord,
    MockDetector,
    MockRecognizer,
    SubprocessDetector,
    SubprocessRecognizer,
    aggregate,
    evaluate_sample,
)
from .scenarios import ScenarioFile, ScenarioFileError, bundled_scenarios_path, load_scenarios

log = logging.getLogger("occtext")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2
TEXT_ONLY_MODES = ("text_only", "text_sgmi")


def run_dir_name(scenario_id: str, seed: int) -> str:
    return f"{scenario_id}__seed{seed}"


def make_adapter(sf: ScenarioFile, scenario, backbone: str = "toy"):
    toy = sf.toy
    if backbone == "toy":
        grid = TokenGrid(*toy.grid)
        script = ToyBackboneScript.from_specs(scenario.toy_script, grid, toy.script_blend)
        return build_toy_backbone(
            grid, toy.channels, toy.text_length, toy.num_sites, toy.heads, script, toy.seed, head_dim=toy.head_dim
        )
    return load_backbone(backbone, scenario=scenario, toy=toy)


def _one_run(args) -> tuple[str, int, str | None]:
    sf, scenario, seed, mode, out_dir, debug_maps, backbone = args
    try:
        adapter = make_adapter(sf, scenario, backbone)
        result = run_pipeline(scenario, sf.schedule, adapter, config=sf.config, mode=mode, seed=seed)
        write_artifacts(
            result,
            Path(out_dir) / run_dir_name(scenario.scenario_id, seed),
            sf.schedule,
            sf.config,
            debug_maps,
            extra={"backbone": backbone},
        )
        return scenario.scenario_id, seed, None
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        return scenario.scenario_id, seed, f"{type(exc).__name__}: {exc}"


def run_command(
    sf: ScenarioFile,
    mode: str,
    seeds: Sequence[int] | None,
    out_dir: str | Path,
    jobs: int = 1,
    debug_maps: bool = False,
    backbone: str = "toy",
) -> int:
    """Run every (scenario, seed) pair; seeds default to each scenario's own seed."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    mode_dir = Path(out_dir) / mode
    mode_dir.mkdir(parents=True, exist_ok=True)
    tasks = [
        (sf, sc, seed, mode, mode_dir, debug_maps, backbone)
        for sc in sf.scenarios
        for seed in (seeds if seeds else [sc.seed])
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_run, tasks))
    else:
        results = [_one_run(t) for t in tasks]
    failures = [{"scenario_id": s, "seed": k, "error": e} for s, k, e in results if e]
    index = {
        "mode": mode,
        "runs": [run_dir_name(s, k) for s, k, e in results if not e],
        "failed": [run_dir_name(f["scenario_id"], f["seed"]) for f in failures],
    }
    (mode_dir / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    fail_path = mode_dir / "failures.json"
    if failures:
        fail_path.write_text(json.dumps(failures, indent=2) + "\n")
        for f in failures:
            log.error("%s seed %s failed: %s", f["scenario_id"], f["seed"], f["error"])
    elif fail_path.exists():
        fail_path.unlink()
    log.info("%d runs, %d failed, artifacts in %s", len(results), len(failures), mode_dir)
    return EXIT_PARTIAL if failures else EXIT_OK


def collect_runs(run_dir: str | Path) -> list[tuple[Path, dict]]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    found = []
    for manifest in sorted(run_dir.rglob("manifest.json")):
        found.append((manifest.parent, json.loads(manifest.read_text())))
    return found


def eval_command(
    run_dir: str | Path,
    sf: ScenarioFile,
    recognizer,
    detector,
    threshold: float = DETECTION_THRESHOLD,
) -> tuple[str, list[EvalRecord]]:
    """Evaluate every run under ``run_dir``; returns the report text and the records."""
    runs = collect_runs(run_dir)
    if not runs:
        raise FileNotFoundError(f"no runs (manifest.json) found under {run_dir}")
    records = []
    for path, manifest in runs:
        sid, seed, mode = manifest["scenario_id"], int(manifest["seed"]), manifest["mode"]
        try:
            scenario = sf.by_id(sid)
        except KeyError:
            records.append(EvalRecord.invalid(sid, seed, "scenario not in scenario file", mode))
            continue
        image = path / manifest.get("image", "image.pgm")
        if not image.is_file():
            records.append(EvalRecord.invalid(sid, seed, f"missing image {image.name}", mode))
            continue
        records.append(evaluate_sample(image, scenario, recognizer, detector, seed, mode, threshold))
    records.sort(key=lambda r: (r.mode, r.scenario_id, r.seed))
    lines = [r.to_json() for r in records]
    for mode in sorted({r.mode for r in records}):
        group = [r for r in records if r.mode == mode]
        valid = [r for r in group if r.valid]
        block = {"summary": mode, "count": len(group), "invalid": len(group) - len(valid)}
        if valid:
            s = aggregate(valid)
            block["text_sim"] = round(s.text_sim, 6)
            text_only = mode in TEXT_ONLY_MODES
            block["occ_align"] = None if text_only else round(s.occ_align, 6)
            block["detect_rate"] = None if text_only else round(s.detect_rate, 6)
        lines.append(json.dumps(block))
    return "\n".join(lines) + "\n", records


def parse_seeds(text: str | None) -> list[int] | None:
    if not text:
        return None
    seeds = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, sep, hi = part.partition("-")
        seeds.extend(range(int(lo), int(hi) + 1) if sep and lo else [int(part)])
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occtext", description="Occluded text rendering with dual-stream K/V control.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="generate images for every scenario and seed")
    r.add_argument("--scenarios", default=str(bundled_scenarios_path()), help="scenario TOML file")
    r.add_argument("--mode", choices=MODES, default="full")
    r.add_argument("--seeds", help="comma list, ranges allowed: 0-7,11")
    r.add_argument("--out", required=True)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--debug-maps", action="store_true")
    r.add_argument("--backbone", default="toy", help="'toy' or 'plugin:NAME'")

    e = sub.add_parser("eval", help="score a run directory")
    e.add_argument("--runs", required=True, help="directory produced by 'occtext run'")
    e.add_argument("--scenarios", default=str(bundled_scenarios_path()))
    e.add_argument("--mock-ocr", help="JSON answer table for a mock recognizer")
    e.add_argument("--mock-detector", help="JSON answer table for a mock detector")
    e.add_argument("--ocr-cmd", help="external OCR command, '{image}' is substituted")
    e.add_argument("--detector-cmd", help="external detector command, '{image}' and '{phrase}' substituted")
    e.add_argument("--threshold", type=float, default=DETECTION_THRESHOLD)
    e.add_argument("--report", help="report path (default RUNS/report.jsonl)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        sf = load_scenarios(args.scenarios)
    except (ScenarioFileError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG

    if args.command == "run":
        try:
            seeds = parse_seeds(args.seeds)
        except ValueError:
            log.error("bad --seeds value %r", args.seeds)
            return EXIT_CONFIG
        if args.jobs < 1:
            log.error("--jobs must be >= 1")
            return EXIT_CONFIG
        return run_command(sf, args.mode, seeds, args.out, args.jobs, args.debug_maps, args.backbone)

    if args.mock_ocr:
        recognizer = MockRecognizer.from_file(args.mock_ocr)
    elif args.ocr_cmd:
        recognizer = SubprocessRecognizer(args.ocr_cmd)
    else:
        log.error("eval needs --mock-ocr or --ocr-cmd")
        return EXIT_CONFIG
    if args.mock_detector:
        detector = MockDetector.from_file(args.mock_detector)
    elif args.detector_cmd:
        detector = SubprocessDetector(args.detector_cmd)
    else:
        log.error("eval needs --mock-detector or --detector-cmd")
        return EXIT_CONFIG
    try:
        report, records = eval_command(args.runs, sf, recognizer, detector, args.threshold)
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    out = Path(args.report) if args.report else Path(args.runs) / "report.jsonl"
    out.write_text(report)
    sys.stdout.write(report)
    return EXIT_PARTIAL if any(not r.valid for r in records) else EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
