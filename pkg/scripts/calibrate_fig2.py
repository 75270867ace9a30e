"""
Fit the fig2 site speed factors
Grid search over the three free speed tiers, scored against the target aggregates
"""

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

BACKEND = Path(__file__).resolve().parent.parent / "backend"
sys.path.insert(0, str(BACKEND))

from harness import load_config  # noqa: E402
from simcore import collect_metrics, run_simulation  # noqa: E402
from settings import profiles_dir  # noqa: E402

logger = logging.getLogger("calibrate_fig2")

TARGETS = {
    "median_runtime": 4080.0,
    "mean_runtime": 4320.0,
    "makespan": 27000.0,
    "steady_state_intercompletion": 90.0,
}

# The fastest tier is pinned to the single-resource rate of one job per 42 minutes
# (3600 * 1.11 / 1.58 s); the median tier is pinned by the median runtime itself.
FIXED = {"ufl": 1.58, "nwu": 0.979}
GRID = {
    "umn": [1.05, 1.1, 1.15, 1.2],
    "utexas": [0.75, 0.8, 0.85, 0.9],
    "purdue": [0.26, 0.28, 0.301, 0.32],
}


def score(metrics) -> float:
    return sum(((getattr(metrics, k) - v) / v) ** 2 for k, v in TARGETS.items())


def evaluate(base, speeds, seed):
    config = base.model_copy(deep=True)
    for site in config.sites:
        site.speed = speeds[site.name]
    return collect_metrics(run_simulation(config, seed))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=str(profiles_dir() / "fig2_calibration.json"))
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO)

    base = load_config("fig2")
    best = None
    for values in itertools.product(*GRID.values()):
        speeds = {**FIXED, **dict(zip(GRID, values))}
        metrics = evaluate(base, speeds, args.seed)
        s = score(metrics)
        logger.info(f"{values} -> median {metrics.median_runtime:.1f} mean {metrics.mean_runtime:.1f} score {s:.5f}")
        if best is None or s < best[0]:
            best = (s, speeds, metrics)

    _, speeds, metrics = best
    result = {
        "fixed": FIXED,
        "grid": GRID,
        "predicted": {k: round(getattr(metrics, k), 2) for k in TARGETS},
        "score": "sum of squared relative errors against the targets",
        "seed": args.seed,
        "speeds": speeds,
        "targets": TARGETS,
    }
    Path(args.out).write_text(json.dumps(result, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(speeds, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
