"""Bundled 8-scenario x 8-seed protocol on the toy backbone, scored with mock clients.

    python3 scripts/run_protocol.py --out runs/protocol --miss 0.125

``--miss`` is the fraction of runs for which the mock detector reports nothing,
so the printed detect_rate should equal ``1 - miss``.
"""
import argparse
import json
import time
from pathlib import Path

from occtext.cli import eval_command, run_command
from occtext.evaluation import MockDetector, MockRecognizer
from occtext.scenarios import bundled_scenarios_path, load_scenarios


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/protocol")
    p.add_argument("--scenarios", default=str(bundled_scenarios_path()))
    p.add_argument("--seeds", type=int, default=8)
    p.add_argument("--miss", type=float, default=0.0, help="fraction of runs the mock detector misses")
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()

    sf = load_scenarios(args.scenarios)
    seeds = list(range(args.seeds))
    t0 = time.perf_counter()
    status = run_command(sf, "full", seeds, args.out, jobs=args.jobs, debug_maps=True)
    print(f"run: exit {status}, {time.perf_counter() - t0:.1f}s")

    keys = [f"{sc.scenario_id}/{s}" for sc in sf.scenarios for s in seeds]
    n_miss = round(args.miss * len(keys))
    # spread the misses evenly over the run list
    missed = {keys[int(i * len(keys) / n_miss)]: None for i in range(n_miss)} if n_miss else {}
    report, records = eval_command(args.out, sf, MockRecognizer({}), MockDetector({"runs": missed}))
    out = Path(args.out) / "report.jsonl"
    out.write_text(report)
    print(report.strip().splitlines()[-1])
    print(f"{len(records)} records, report in {out}")
    fallbacks = sum(
        json.loads(m.read_text()).get("used_fallback", False) for m in Path(args.out, "full").rglob("manifest.json")
    )
    print(f"fallback masks: {fallbacks}/{len(records)}")


if __name__ == "__main__":
    main()
