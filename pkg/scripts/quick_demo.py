#!/usr/bin/env python3
"""End-to-end demo: simulate, train, calibrate one person, evaluate.

Small populations throughout; runs in about a minute and prints the
uncalibrated versus few-shot-calibrated test error.
"""

import argparse
import logging
import time

import numpy as np

from gazekit import calib as cb
from gazekit import diffnet as dn
from gazekit import eyesim as es
from gazekit import experiments as ex
from gazekit import pipeline as pl
from gazekit import trainer as tr


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--k", type=int, default=9, help="calibration samples per person")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

    t0 = time.time()
    train_sim = es.SimConfig(n_persons=30, samples_per_person=80, seed=args.seed)
    eval_sim = es.SimConfig(n_persons=6, samples_per_person=60, seed=args.seed + 1)
    train_samples, _ = es.generate_samples(train_sim)
    eval_samples, _ = es.generate_samples(eval_sim)
    arrays = pl.build_arrays(train_samples)
    print(f"rendered {arrays.n_samples} train samples in {time.time() - t0:.1f} s")

    cfg = tr.TrainConfig(seed=args.seed, epochs=args.epochs)
    params, report = tr.train(arrays, cfg)
    print(f"trained: final loss {report.final_train_loss:.2f} mm")

    split = ex.split_eval(pl.build_arrays(eval_samples), pool_size=args.k + 5)
    arch, hinges = cfg.arch(), cfg.hinges()
    p_bar = report.mean_calibration

    print(f"\n{'person':>6} {'uncalibrated':>13} {'k=' + str(args.k):>9}")
    rng = np.random.default_rng(args.seed)
    uncal_all, cal_all = [], []
    for m in range(split.n_persons):
        uncal, _ = ex._person_eval(params, arch, split, m, p_bar)
        chosen = np.sort(rng.choice(split.pools[m], size=args.k, replace=False))
        nb_c = pl.take_batch(split.nb, chosen)
        p_m = cb.calibrate(params, arch, nb_c, p_bar, hinges).p
        cal, _ = ex._person_eval(params, arch, split, m, p_m)
        uncal_all.append(uncal)
        cal_all.append(cal)
        print(f"{m:>6} {uncal:>12.2f}\N{DEGREE SIGN} {cal:>8.2f}\N{DEGREE SIGN}")
    print(
        f"{'mean':>6} {np.mean(uncal_all):>12.2f}\N{DEGREE SIGN} "
        f"{np.mean(cal_all):>8.2f}\N{DEGREE SIGN}"
    )
    print(f"\ntotal {time.time() - t0:.1f} s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
