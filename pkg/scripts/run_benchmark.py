#!/usr/bin/env python3
"""Run the full benchmark suite: gradient audit plus all five sweeps.

Renders the training and evaluation populations once, then shares them
and every reusable trained model across experiments (the default
configuration appears in several sweeps, so this saves four trainings).
Results land in --out as <kind>.csv plus <kind>_summary.json.

The default sizes take a few hours on one core; --quick scales the
populations down to a smoke run of a few minutes whose numbers are
noisier but show the same qualitative shapes.
"""

import argparse
import json
import logging
import sys
import time

from gazekit import experiments as ex
from gazekit import eyesim as es
from gazekit import pipeline as pl

SWEEP_KINDS = ("nparams", "ksweep", "distmode", "depthplanes", "irisanchor")

FULL = dict(
    train_persons=200, train_spp=300,
    eval_persons=40, calib_pool=100, test_per_person=100,
)
QUICK = dict(
    train_persons=40, train_spp=100,
    eval_persons=10, calib_pool=70, test_per_person=40,
)

# Per-experiment scene or schedule departures from the shared defaults.
# Kinds with identical `sim` settings share one rendered population below.
BENCH_OVERRIDES: dict = {}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results", help="output directory")
    ap.add_argument("--seed", type=int, default=20240)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument(
        "--quick", action="store_true", help="small populations, minutes not hours"
    )
    ap.add_argument(
        "--kinds", nargs="*", default=list(SWEEP_KINDS) + ["gradcheck"],
        choices=list(SWEEP_KINDS) + ["gradcheck"],
    )
    args = ap.parse_args()
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(name)s: %(message)s"
    )

    sizes = QUICK if args.quick else FULL
    base = dict(seed=args.seed, **sizes)

    t0 = time.time()
    cfgs = {
        kind: ex.ExperimentConfig(kind=kind, **base, **BENCH_OVERRIDES.get(kind, {}))
        for kind in args.kinds
    }

    # Experiments with the same scene geometry share one rendered
    # population, and the model cache key covers geometry and schedule,
    # so reuse across experiments is valid whenever the key matches.
    shared: dict = {}
    pretrained: dict = {}
    headlines = {}
    for kind in args.kinds:
        cfg = cfgs[kind]
        train_arrays = split = None
        if kind != "gradcheck":
            sig = json.dumps(cfg.sim, sort_keys=True, default=list)
            if sig not in shared:
                logging.info("rendering benchmark populations (%s)", kind)
                train_samples, _ = es.generate_samples(cfg.sim_train())
                eval_samples, _ = es.generate_samples(cfg.sim_eval())
                shared[sig] = (
                    pl.build_arrays(train_samples),
                    ex.split_eval(pl.build_arrays(eval_samples), cfg.calib_pool),
                )
            train_arrays, split = shared[sig]
        t = time.time()
        doc = ex.run_experiment(
            cfg, args.out, pretrained=pretrained,
            train_arrays=train_arrays, split=split, workers=args.workers,
        )
        headlines[kind] = doc["summary"]
        logging.info("%s finished in %.1f s", kind, time.time() - t)
        if kind == "gradcheck" and not doc["summary"]["passed"]:
            print("gradient audit failed; aborting", file=sys.stderr)
            return 2

    print(json.dumps(_headline(headlines), indent=1))
    logging.info("benchmark complete in %.1f s", time.time() - t0)
    return 0


def _headline(headlines: dict) -> dict:
    """The few numbers someone checks first, one per experiment."""
    out = {}
    if "gradcheck" in headlines:
        out["gradcheck_worst_rel_error"] = headlines["gradcheck"]["worst_rel_error"]
    if "ksweep" in headlines:
        bene = headlines["ksweep"].get("calibration_benefit", {})
        out["uncalibrated_deg"] = bene.get("uncalibrated_deg")
        out["calibrated_k9_deg"] = bene.get("calibrated_k9_deg")
    if "nparams" in headlines:
        out["nparams_plateau_stat"] = headlines["nparams"].get("plateau_stat")
    if "distmode" in headlines:
        out["distmode_gap_shrink"] = headlines["distmode"].get("gap_shrink", {}).get(
            "shrink_fraction"
        )
    if "depthplanes" in headlines:
        out["single_vs_three_plane_origin_ratio"] = headlines["depthplanes"].get(
            "median_ratio"
        )
    if "irisanchor" in headlines:
        out["iris_anchor_iqr_reduction"] = headlines["irisanchor"].get("iqr_reduction")
    return out


if __name__ == "__main__":
    raise SystemExit(main())
