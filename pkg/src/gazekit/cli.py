"""Command-line front end.

Subcommands cover the full workflow: render a synthetic dataset, train a
model on it, calibrate people, evaluate, and run the benchmark sweeps.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
failure (training divergence, failed gradient audit, degenerate data),
3 file I/O failure.  Set GAZEKIT_LOG=INFO (or DEBUG) for progress logs
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import eyesim as es
from . import pipeline as pl
from . import diffnet as dn
from . import calib as cb
from . import trainer as tr
from . import experiments as ex

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

CALIB_FORMAT = "gazekit-calib/1"

_CONFIG_ERRORS = (
    es.DatasetError,
    es.UnsupportedConfiguration,
    ex.ExperimentError,
    dn.ModelError,
    tr.TrainError,
    pl.PipelineError,
    TypeError,
    ValueError,
)


class CliFail(Exception):
    """Abort the command with a specific exit code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise CliFail(EXIT_IO, f"cannot read {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise CliFail(EXIT_USAGE, f"{path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise CliFail(EXIT_USAGE, f"{path}: top level must be a JSON object")
    return doc


def _write_json(path, doc: dict) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise CliFail(EXIT_IO, f"cannot write {path}: {exc}")


def _build(fn, *args, **kwargs):
    """Construct a config object; validation failures are usage errors."""
    try:
        return fn(*args, **kwargs)
    except _CONFIG_ERRORS as exc:
        raise CliFail(EXIT_USAGE, str(exc))


def _load_model(path):
    try:
        return dn.load_params(path)
    except OSError as exc:
        raise CliFail(EXIT_IO, f"cannot read {path}: {exc}")
    except dn.ModelError as exc:
        raise CliFail(EXIT_IO, str(exc))


def _load_arrays(path):
    try:
        return pl.load_arrays(path)
    except OSError as exc:
        raise CliFail(EXIT_IO, f"cannot read {path}: {exc}")
    except (es.DatasetError, pl.PipelineError) as exc:
        raise CliFail(EXIT_IO, f"{path}: {exc}")


def _compute(fn, *args, **kwargs):
    """Run a numerical phase; blowups map to the numeric exit code."""
    try:
        return fn(*args, **kwargs)
    except (dn.NumericalError, tr.TrainError, pl.PipelineError) as exc:
        raise CliFail(EXIT_NUMERIC, str(exc))
    except es.DatasetError as exc:
        raise CliFail(EXIT_NUMERIC, str(exc))
    except OSError as exc:
        raise CliFail(EXIT_IO, str(exc))


def _require_out(args, what: str):
    if not args.out:
        raise CliFail(EXIT_USAGE, f"{what} requires --out")
    return args.out


def _check_keys(doc: dict, allowed: set, context: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise CliFail(
            EXIT_USAGE, f"{context}: unknown config fields: {sorted(unknown)}"
        )


def _person_draw_rng(seed: int, person: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(person,))
    return np.random.Generator(np.random.Philox(ss))


# ----------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = _build(es.SimConfig.from_dict, doc)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        return EXIT_OK
    out = _require_out(args, "simulate")
    summary = _compute(es.generate_dataset, cfg, out)
    print(
        f"wrote {summary['samples']} samples for {summary['persons']} persons "
        f"to {out} ({summary['rejected']} rejected)"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.config:
        raise CliFail(EXIT_USAGE, "train requires --config")
    doc = _read_json(args.config)
    _check_keys(doc, {"sim", "dataset", "train"}, args.config)
    has_sim, has_data = "sim" in doc, "dataset" in doc
    if has_sim == has_data:
        raise CliFail(
            EXIT_USAGE, f"{args.config}: specify exactly one of 'sim' or 'dataset'"
        )
    train_d = dict(doc.get("train", {}))
    if args.seed is not None:
        train_d["seed"] = args.seed
    tcfg = _build(tr.TrainConfig.from_dict, train_d)
    sim_cfg = _build(es.SimConfig.from_dict, doc["sim"]) if has_sim else None

    if args.dry_run:
        effective = {"train": tcfg.to_dict()}
        if sim_cfg is not None:
            effective["sim"] = sim_cfg.to_dict()
        else:
            effective["dataset"] = doc["dataset"]
        print(json.dumps(effective, indent=1, sort_keys=True))
        return EXIT_OK

    out = _require_out(args, "train")
    model_path = os.path.join(out, "model.json")
    if os.path.exists(model_path) and not args.force:
        raise CliFail(
            EXIT_USAGE, f"{model_path} exists; pass --force to overwrite"
        )
    os.makedirs(out, exist_ok=True)

    if sim_cfg is not None:
        samples, info = _compute(es.generate_samples, sim_cfg)
        logger.info("rendered %d samples (%d rejected)", len(samples), info["rejected"])
        arrays = _compute(pl.build_arrays, samples)
    else:
        _, arrays = _load_arrays(doc["dataset"])

    params, report = _compute(tr.train, arrays, tcfg)
    try:
        dn.save_params(model_path, params, tcfg.arch(), report.mean_calibration)
        report.save_json(os.path.join(out, "report.json"))
        report.save_loss_csv(os.path.join(out, "loss.csv"))
    except OSError as exc:
        raise CliFail(EXIT_IO, f"cannot write results to {out}: {exc}")
    print(
        f"trained {report.final_p.shape[0]} persons, final loss "
        f"{report.final_train_loss:.3f} mm; model.json, report.json, loss.csv in {out}"
    )
    return EXIT_OK


def cmd_calibrate(args) -> int:
    if not args.config:
        raise CliFail(EXIT_USAGE, "calibrate requires --config")
    doc = _read_json(args.config)
    _check_keys(doc, {"model", "dataset", "k", "seed"}, args.config)
    missing = {"model", "dataset", "k"} - set(doc)
    if missing:
        raise CliFail(EXIT_USAGE, f"{args.config}: missing fields: {sorted(missing)}")
    k = doc["k"]
    if not isinstance(k, int) or k < 1:
        raise CliFail(EXIT_USAGE, f"{args.config}: 'k' must be a positive integer")
    seed = args.seed if args.seed is not None else doc.get("seed", 0)

    params, arch, p_bar = _load_model(doc["model"])
    if p_bar is None:
        p_bar = np.zeros(arch.p_dim)
    _, arrays = _load_arrays(doc["dataset"])
    nb = _compute(pl.normalize_batch, arrays)

    persons = []
    for m, pid in enumerate(arrays.unique_persons):
        idx = np.flatnonzero(arrays.person_index == m)
        if idx.size < k:
            raise CliFail(
                EXIT_USAGE,
                f"person {int(pid)} has {idx.size} samples, fewer than k={k}",
            )
        rng = _person_draw_rng(seed, m)
        chosen = np.sort(rng.choice(idx, size=k, replace=False))
        nb_c = pl.take_batch(nb, chosen)
        res = _compute(cb.calibrate, params, arch, nb_c, p_bar)
        persons.append(
            {
                "person": int(pid),
                "p": [float(x) for x in res.p],
                "final_error": res.final_error,
                "iterations": res.iterations,
                "converged": res.converged,
            }
        )
    out_doc = {
        "format": CALIB_FORMAT,
        "model": doc["model"],
        "k": k,
        "seed": seed,
        "persons": persons,
    }
    if args.out:
        _write_json(args.out, out_doc)
        print(f"calibrated {len(persons)} persons with k={k} into {args.out}")
    else:
        print(json.dumps(out_doc, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not args.config:
        raise CliFail(EXIT_USAGE, "evaluate requires --config")
    doc = _read_json(args.config)
    _check_keys(doc, {"model", "dataset", "calibration"}, args.config)
    missing = {"model", "dataset"} - set(doc)
    if missing:
        raise CliFail(EXIT_USAGE, f"{args.config}: missing fields: {sorted(missing)}")

    params, arch, p_bar = _load_model(doc["model"])
    if p_bar is None:
        p_bar = np.zeros(arch.p_dim)
    _, arrays = _load_arrays(doc["dataset"])
    nb = _compute(pl.normalize_batch, arrays)

    m_count = arrays.n_persons
    if "calibration" in doc:
        cal = _read_json(doc["calibration"])
        if cal.get("format") != CALIB_FORMAT:
            raise CliFail(
                EXIT_USAGE,
                f"{doc['calibration']}: format {cal.get('format')!r} is not "
                f"{CALIB_FORMAT!r}",
            )
        by_id = {e["person"]: e["p"] for e in cal.get("persons", [])}
        p_rows = np.zeros((m_count, arch.p_dim))
        for m, pid in enumerate(arrays.unique_persons):
            if int(pid) not in by_id:
                raise CliFail(
                    EXIT_USAGE,
                    f"{doc['calibration']}: no calibration for person {int(pid)}",
                )
            vec = np.asarray(by_id[int(pid)], dtype=float)
            if vec.shape != (arch.p_dim,):
                raise CliFail(
                    EXIT_USAGE,
                    f"{doc['calibration']}: person {int(pid)} vector has "
                    f"{vec.size} entries, model expects {arch.p_dim}",
                )
            p_rows[m] = vec
    else:
        p_rows = np.tile(p_bar, (m_count, 1))

    report = _compute(cb.evaluate, params, arch, nb, p_rows, arrays.unique_persons)
    out_doc = report.to_dict()
    if args.out:
        _write_json(args.out, out_doc)
        print(
            f"mean error {report.mean_error:.3f} deg over {m_count} persons; "
            f"report in {args.out}"
        )
    else:
        print(json.dumps(out_doc, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_experiment(args) -> int:
    if not args.config:
        raise CliFail(EXIT_USAGE, "experiment requires --config")
    doc = _read_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = _build(ex.ExperimentConfig.from_dict, doc)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        return EXIT_OK
    out = _require_out(args, "experiment")
    summary_doc = _compute(
        ex.run_experiment, cfg, out, workers=max(1, args.workers)
    )
    if cfg.kind == "gradcheck":
        worst = summary_doc["summary"]["worst_rel_error"]
        if not summary_doc["summary"]["passed"]:
            print(f"gradient audit FAILED: worst relative error {worst:.2e}")
            return EXIT_NUMERIC
        print(f"gradient audit passed: worst relative error {worst:.2e}")
    else:
        print(f"{cfg.kind} complete; summary in {out}/{cfg.kind}_summary.json")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    cfg = _build(ex.ExperimentConfig, kind="gradcheck", seed=seed)
    summary = _compute(ex.run_gradcheck, cfg, instances=args.instances)
    if args.out:
        _write_json(
            args.out,
            {"format": ex.SUMMARY_FORMAT, "kind": "gradcheck", "summary": summary},
        )
    worst = summary["worst_rel_error"]
    if not summary["passed"]:
        print(
            f"gradient audit FAILED: worst relative error {worst:.2e} "
            f"over {args.instances} instances"
        )
        return EXIT_NUMERIC
    print(
        f"gradient audit passed: worst relative error {worst:.2e} "
        f"over {args.instances} instances"
    )
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; this contract reserves 2 for
    numerical failures, so usage errors exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="gazekit",
        description="Synthetic-benchmark gaze estimation workflows.",
        epilog="Set GAZEKIT_LOG=INFO for progress logs on stderr.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, dry_run=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output file or directory")
        p.add_argument(
            "--workers", type=int, default=1,
            help="process count for sweep evaluation (experiment only)",
        )
        if dry_run:
            p.add_argument(
                "--dry-run", action="store_true",
                help="print the effective config and exit without writing",
            )

    p = sub.add_parser("simulate", help="render a synthetic dataset to JSON lines")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser(
        "train",
        help="fit a model; config holds 'train' plus 'sim' or 'dataset'",
    )
    common(p)
    p.add_argument(
        "--force", action="store_true", help="overwrite an existing model.json"
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "calibrate",
        help="fit per-person vectors; config holds model, dataset, k",
    )
    common(p, dry_run=False)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser(
        "evaluate",
        help="angular-error report; config holds model, dataset, optional calibration",
    )
    common(p, dry_run=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "experiment",
        help="run a benchmark sweep into --out",
        epilog=(
            "CSV columns: " + ",".join(ex.CSV_COLUMNS) + ". Rows append while "
            "the sweep runs and are rewritten in (value, k, person, repeat) "
            "order on success; kinds: " + ", ".join(ex.EXPERIMENT_KINDS) + "."
        ),
    )
    common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser(
        "gradcheck", help="finite-difference audit of the analytic gradients"
    )
    common(p, dry_run=False)
    p.add_argument(
        "--instances", type=int, default=20,
        help="number of random instances to audit",
    )
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _setup_logging() -> None:
    name = os.environ.get("GAZEKIT_LOG", "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level, stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliFail as exc:
        print(f"gazekit: {exc.message}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    raise SystemExit(main())
