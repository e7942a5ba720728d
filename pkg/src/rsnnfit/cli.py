"""``rsnn`` command line: synth, fit, eval, identify, oracle-check and replay.

Every command writes ``manifest.json`` next to its outputs. The manifest holds
the fully resolved configuration, so ``rsnn replay`` regenerates the same
files byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from .io import (FormatError, ValidationError, load_dataset, read_params, save_dataset,
                 write_params, write_stimulus)
from .losses import LossSpec
from .metrics import evaluate
from .oracle import (MAX_BINS, check_elbo_bound, check_sampler, check_unbiased,
                     enumerate_outcomes, random_instance, write_table_csv)
from .network import init_params
from .synthgen import (REFERENCE_FULL_SCALE, ExperimentPlan, RateSearchError, TeacherConfig,
                       generate_dataset, make_teacher, run_identification)
from .trainer import NumericalError, TrainConfig, train, write_curve, write_log

log = logging.getLogger("rsnnfit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_ORACLE = 0, 2, 3, 4, 5


class DataError(ValueError):
    """Inputs exist but do not fit together (shapes, missing files)."""


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _r(x) -> str:
    """Round-trippable text for config values."""
    return repr(x) if isinstance(x, float) else str(x)


# -- resolved config sections ------------------------------------------------

def teacher_sections(t: TeacherConfig) -> dict:
    return {
        "teacher": {"n_total": _r(t.n_total), "n_visible": _r(t.n_visible), "d_max": _r(t.d_max),
                    "weight_scale": _r(t.weight_scale), "hidden_out_scale": _r(t.hidden_out_scale),
                    "hidden_in_scale": _r(t.hidden_in_scale), "rate_low": _r(t.rate_band[0]),
                    "rate_high": _r(t.rate_band[1]), "target_rate": _r(t.target_rate),
                    "rate_trials": _r(t.rate_trials), "seed": _r(t.seed)},
        "stimulus": {"timesteps": _r(t.stimulus.timesteps), "tau": _r(t.stimulus.tau),
                     "amplitude": _r(t.stimulus.amplitude),
                     "drive_hidden": _r(t.stimulus.drive_hidden).lower()},
    }


def train_section(cfg: TrainConfig) -> dict:
    out = {"loss": cfg.loss_spec.format()}
    if cfg.loss_spec.t_clamp is not None:
        out["t_clamp"] = _r(cfg.loss_spec.t_clamp)
    for key in C.TRAIN_TYPES:
        value = getattr(cfg, key)
        if value is not None:
            out[key] = _r(value)
    return out


def plan_sections(plan: ExperimentPlan) -> dict:
    out = teacher_sections(plan.teacher)
    out["data"] = {"k_train": _r(plan.k_train), "k_val": _r(plan.k_val),
                   "k_test": _r(plan.k_test), "seed": _r(plan.seed)}
    if plan.eval_trials is not None:
        out["data"]["eval_trials"] = _r(plan.eval_trials)
    for s in plan.students:
        sec = {"n_hidden": _r(s.n_hidden), "init": s.init, "init_seed": _r(s.init_seed)}
        if s.d_max is not None:
            sec["d_max"] = _r(s.d_max)
        out[f"student.{s.name}"] = sec
        out[f"train.{s.name}"] = train_section(s.train)
    return out


# -- commands: each takes a resolved config and an output directory -----------

def run_synth(cfg: dict, out: Path) -> list:
    cp = C.from_dict(cfg)
    teacher_cfg = C.teacher_config(cp)
    sizes = C.data_sizes(cp)
    teacher, stim = make_teacher(teacher_cfg)
    data = generate_dataset(teacher, stim, sizes["k_train"], sizes["k_val"], sizes["k_test"],
                            sizes["seed"])
    paths = save_dataset(out, data)
    write_params(out / "teacher.rsnp", teacher)
    write_stimulus(out / "teacher_stimulus.rsni", stim)
    return [p.name for p in paths] + ["teacher.rsnp", "teacher_stimulus.rsni"]


def resolve_synth(args) -> dict:
    cp = C.load(args.config)
    t = C.teacher_config(cp)
    if args.seed is not None:
        t = replace(t, seed=args.seed)
    sizes = C.data_sizes(cp)
    if args.seed is not None:
        sizes["seed"] = args.seed
    out = teacher_sections(t)
    out["data"] = {k: _r(v) for k, v in sizes.items()}
    return out


def _load_data(directory):
    try:
        return load_dataset(directory)
    except FileNotFoundError as e:
        raise DataError(f"dataset file missing: {e.filename}") from None


def resolve_fit(args) -> dict:
    cp = C.load(args.config)
    base = Path(args.config).resolve().parent
    data_dir = C.get(cp, "data", "dir")
    data_dir = str((base / data_dir).resolve())
    spec = LossSpec.parse(args.loss, C.get(cp, "train", "t_clamp", int, None)) if args.loss \
        else C.loss_spec(cp, "train")
    cfg = C.train_config(cp, "train", spec=spec)
    if args.epochs is not None:
        cfg = replace(cfg, max_epochs=args.epochs)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if cp.has_section("model"):
        C._check_keys(cp, "model", ("n_visible", "n_hidden", "d_max", "init_seed"))
    model = {"n_hidden": _r(C.get(cp, "model", "n_hidden", int, 0)),
             "d_max": _r(C.get(cp, "model", "d_max", int, 2)),
             "init_seed": _r(C.get(cp, "model", "init_seed", int, cfg.seed))}
    if C.get(cp, "model", "n_visible", int, None) is not None:
        model["n_visible"] = _r(C.get(cp, "model", "n_visible", int))
    return {"data": {"dir": data_dir}, "model": model, "train": train_section(cfg)}


def run_fit(cfg: dict, out: Path) -> list:
    cp = C.from_dict(cfg)
    data = _load_data(C.get(cp, "data", "dir"))
    nv = C.get(cp, "model", "n_visible", int, data.n_visible)
    if nv != data.n_visible:
        raise DataError(f"model.n_visible={nv} but the dataset has {data.n_visible} neurons")
    nh = C.get(cp, "model", "n_hidden", int)
    model = init_params(nv + nh, nv, C.get(cp, "model", "d_max", int),
                        seed=C.get(cp, "model", "init_seed", int))
    tcfg = replace(C.train_config(cp, "train"), checkpoint_dir=str(out))
    if tcfg.batcher == "trials" and tcfg.batch_size > data.train.shape[0]:
        raise C.ConfigError(f"train.batch_size={tcfg.batch_size} exceeds the "
                            f"{data.train.shape[0]} training trials")
    params, history = train(model, data, tcfg)
    write_params(out / "model.rsnp", params)
    write_log(out / "train_log.json", replace(tcfg, checkpoint_dir=None), history)
    write_curve(out / "train_curve.csv", history)
    return ["model.rsnp", "train_log.json", "train_curve.csv"]


def resolve_eval(args) -> dict:
    sec = {"checkpoint": str(Path(args.checkpoint).resolve()),
           "dataset": str(Path(args.dataset).resolve()), "seed": str(args.seed)}
    if args.eval_trials is not None:
        sec["eval_trials"] = str(args.eval_trials)
    if args.multistep:
        parts = args.multistep.split(",")
        if len(parts) != 3:
            raise C.ConfigError("--multistep expects t,dt_max,M")
        try:
            t, lag, m = (int(x) for x in parts)
        except ValueError:
            raise C.ConfigError(f"--multistep: cannot parse {args.multistep!r}") from None
        sec["multistep"] = f"{t},{lag},{m}"
    return {"eval": sec}


def run_eval(cfg: dict, out: Path) -> list:
    cp = C.from_dict(cfg)
    try:
        p = read_params(C.get(cp, "eval", "checkpoint"))
    except FileNotFoundError as e:
        raise DataError(f"checkpoint missing: {e.filename}") from None
    data = _load_data(C.get(cp, "eval", "dataset"))
    if data.n_visible != p.n_visible:
        raise DataError(f"checkpoint has {p.n_visible} visible neurons, "
                        f"dataset has {data.n_visible}")
    ms = C.get(cp, "eval", "multistep", str, None)
    if ms is not None:
        ms = tuple(int(x) for x in ms.split(","))
        if ms[0] + ms[1] >= data.timesteps:
            raise C.ConfigError(f"--multistep t + dt_max must be < T={data.timesteps}")
    try:
        report = evaluate(p, data.stimulus, data.test,
                          trials=C.get(cp, "eval", "eval_trials", int, None),
                          seed=C.get(cp, "eval", "seed", int), multistep=ms)
    except ValueError as e:
        raise DataError(str(e)) from None
    return [path.name for path in report.write(out / "report")]


def resolve_identify(args) -> dict:
    plan = C.experiment_plan(C.load(args.plan))
    if args.seed is not None:
        plan = replace(plan, seed=args.seed)
    if args.epochs is not None:
        plan = replace(plan, students=tuple(
            replace(s, train=replace(s.train, max_epochs=args.epochs)) for s in plan.students))
    return plan_sections(plan)


COMPARISON_FIELDS = ("student", "loss_spec", "psth_corr_mean", "psth_corr_sd", "nc_r2",
                     "conn_r2", "test_nll", "error")


def run_identify(cfg: dict, out: Path) -> list:
    plan = C.experiment_plan(C.from_dict(cfg))
    result = run_identification(plan)
    files = ["teacher.rsnp"]
    write_params(out / "teacher.rsnp", result.teacher)
    rows = []
    for s in result.students:
        rows.append(s.row())
        if s.error is not None:
            continue
        write_params(out / f"{s.name}.rsnp", s.params)
        write_curve(out / f"{s.name}_curve.csv", s.history)
        s.stats.metadata["reference_full_scale"] = REFERENCE_FULL_SCALE
        files += [f"{s.name}.rsnp", f"{s.name}_curve.csv"]
        files += [p.name for p in s.stats.write(out / f"{s.name}_report")]
        np.savetxt(out / f"{s.name}_connectivity.csv", s.connectivity.student, delimiter=",",
                   fmt="%.17g")
        files.append(f"{s.name}_connectivity.csv")
    np.savetxt(out / "teacher_connectivity.csv",
               result.teacher.connectivity()[:plan.teacher.n_visible, :plan.teacher.n_visible],
               delimiter=",", fmt="%.17g")
    with open(out / "comparison.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=COMPARISON_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return files + ["teacher_connectivity.csv", "comparison.csv"]


def resolve_oracle(args) -> dict:
    n = args.n_visible + args.n_hidden
    if n * args.T > MAX_BINS:
        raise C.ConfigError(f"instance needs {n * args.T} binary bins; the cap is {MAX_BINS}")
    return {"oracle": {"n_visible": str(args.n_visible), "n_hidden": str(args.n_hidden),
                       "T": str(args.T), "samples": str(args.samples),
                       "elbo_samples": str(args.elbo_samples),
                       "instances": str(args.instances), "seed": str(args.seed),
                       "corrupt": str(args.corrupt).lower()}}


def run_oracle(cfg: dict, out: Path) -> list:
    cp = C.from_dict(cfg)
    g = lambda k: C.get(cp, "oracle", k, int)  # noqa: E731
    results = [
        check_sampler(seed=g("seed"), n=g("n_visible"), T=g("T"), samples=g("samples"),
                      corrupt=C.get(cp, "oracle", "corrupt", bool)),
        check_elbo_bound(seed=g("seed"), n_visible=g("n_visible"), n_hidden=g("n_hidden"),
                         T=g("T"), instances=g("instances"), samples=g("elbo_samples")),
        check_unbiased(seed=g("seed"), n=g("n_visible"), T=g("T"), samples=g("elbo_samples")),
    ]
    for r in results:
        print(r.line())
    p, stim = random_instance(g("seed"), g("n_visible"), g("n_visible"), g("T"))
    write_table_csv(out / "oracle_table.csv", enumerate_outcomes(p, stim))
    report = [{"name": r.name, "observed": r.observed, "tolerance": r.tolerance,
               "passed": bool(r.passed), "detail": r.detail} for r in results]
    (out / "oracle_report.json").write_text(json.dumps(report, indent=2) + "\n")
    if not all(r.passed for r in results):
        raise OracleFailure(", ".join(r.name for r in results if not r.passed))
    return ["oracle_report.json", "oracle_table.csv"]


class OracleFailure(RuntimeError):
    pass


RUNNERS = {"synth": run_synth, "fit": run_fit, "eval": run_eval, "identify": run_identify,
           "oracle-check": run_oracle}


def execute(command: str, cfg: dict, out: Path, threads: int = 1) -> dict:
    """Run ``command`` on a resolved config and write its manifest."""
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=threads):
        artifacts = RUNNERS[command](cfg, out)
    manifest = {"command": command, "config": cfg, "seed": _master_seed(command, cfg),
                "threads": threads, "artifacts": sorted(artifacts), "version": _version()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _master_seed(command, cfg):
    for sec, key in (("data", "seed"), ("train", "seed"), ("eval", "seed"), ("oracle", "seed")):
        if key in cfg.get(sec, {}):
            return int(cfg[sec][key])
    return None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rsnn", description="Fit stochastic spiking networks.")
    ap.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build a teacher and sample a dataset")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("fit", help="train a network on a dataset")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--loss", help="weighted terms, e.g. mle:0.2,psth:0.1,nc_mse:0.7")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="compare a checkpoint with held-out data")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--eval-trials", type=int)
    p.add_argument("--multistep", help="t,dt_max,M")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("identify", help="teacher/student identification experiment")
    p.add_argument("plan")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("oracle-check", help="exact-enumeration property suite")
    p.add_argument("--out", required=True)
    p.add_argument("--n-visible", type=int, default=2)
    p.add_argument("--n-hidden", type=int, default=2)
    p.add_argument("--T", type=int, default=3)
    p.add_argument("--samples", type=int, default=10 ** 6)
    p.add_argument("--elbo-samples", type=int, default=10 ** 5)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help="flip one sampler probability")

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="defaults to the manifest's directory")
    return ap


RESOLVERS = {"synth": resolve_synth, "fit": resolve_fit, "eval": resolve_eval,
             "identify": resolve_identify, "oracle-check": resolve_oracle}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            path = Path(args.manifest)
            try:
                manifest = json.loads(path.read_text())
                command, cfg = manifest["command"], manifest["config"]
            except (OSError, ValueError, KeyError) as e:
                raise C.ConfigError(f"unreadable manifest {path}: {e}") from None
            if command not in RUNNERS:
                raise C.ConfigError(f"manifest names unknown command {command!r}")
            out = Path(args.out) if args.out else path.parent
            execute(command, cfg, out, manifest.get("threads", args.threads))
        else:
            cfg = RESOLVERS[args.command](args)
            execute(args.command, cfg, Path(args.out), args.threads)
    except (C.ConfigError, RateSearchError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, ValidationError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        where = f" (diagnostic checkpoint: {e.checkpoint})" if e.checkpoint else ""
        print(f"numerical failure: {e}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except OracleFailure as e:
        print(f"oracle check failed: {e}", file=sys.stderr)
        return EXIT_ORACLE
    except ValueError as e:  # remaining validation failures come from user input
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
