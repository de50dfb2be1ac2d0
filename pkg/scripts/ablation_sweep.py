"""Run all four ablation modes on the bundled scenarios and compare outputs.

    python3 scripts/ablation_sweep.py --out runs/ablation --seeds 2

Without real OCR and detection models the metrics are not meaningful, so this
reports how far each variant's image moves from the text-only baseline and,
for the full mode, the mask size and fallback count.
"""
import argparse

import numpy as np

from occtext.cli import make_adapter
from occtext.dualstream import MODES, run_pipeline
from occtext.scenarios import bundled_scenarios_path, load_scenarios


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scenarios", default=str(bundled_scenarios_path()))
    p.add_argument("--seeds", type=int, default=2)
    args = p.parse_args()

    sf = load_scenarios(args.scenarios)
    diffs = {m: [] for m in MODES}
    masks, fallbacks = [], 0
    for sc in sf.scenarios:
        adapter = make_adapter(sf, sc)
        for seed in range(args.seeds):
            res = {m: run_pipeline(sc, sf.schedule, adapter, config=sf.config, mode=m, seed=seed) for m in MODES}
            ref = res["text_only"].image
            for m in MODES:
                diffs[m].append(float(np.abs(res[m].image - ref).mean()))
            masks.append(res["full"].mask.count)
            fallbacks += res["full"].used_fallback

    print(f"{'mode':<10} mean |image - text_only|")
    for m in MODES:
        print(f"{m:<10} {np.mean(diffs[m]):.4f}")
    print(f"full: mean mask size {np.mean(masks):.1f} tokens, fallback {fallbacks}/{len(masks)}")


if __name__ == "__main__":
    main()
