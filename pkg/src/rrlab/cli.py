"""Command-line entry point: ``rrlab {train,eval,attack,verify,sweep-tau}``.

Exit codes: 0 success, 2 usage or configuration problem, 3 numeric failure,
4 verification failure. Every command writes ``manifest.json`` into its
output directory, also when it fails.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import ADAPTIVE_KINDS, AttackConfig, min_distortion, pgd, worst_case
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import Dataset, load_csv, save_csv, split
from .errors import (AttackError, ConfigError, EvaluationError, InvalidArgumentError,
                     ParseError, TrainingError, VersionError)
from .evaluation import build_report, pass_curve_csv
from .fileio import atomic_write_text
from .model import predict
from .rejection import (arithmetic_bin_edges, geometric_bin_edges, nsub, temperature_flip,
                        verify_lemma1, verify_theorem1)
from .seeding import derive_rng, derive_seed
from .training import train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
REJECTORS = ("conf", "tcon", "rcon", "aphi")
TAU_GRID = tuple(2.0 ** k for k in range(-4, 5))


class VerificationFailed(Exception):
    pass


class Run:
    """Collects what the manifest records and writes outputs atomically."""

    def __init__(self, command: str, out_dir: Path, argv: list[str]):
        self.command = command
        self.out = out_dir
        self.argv = argv
        self.config: dict = {}
        self.seed: int | None = None
        self.artifacts: dict[str, str] = {}
        self.t0 = time.perf_counter()

    def write(self, name: str, text: str, key: str | None = None) -> Path:
        path = self.out / name
        atomic_write_text(path, text)
        self.artifacts[key or name] = str(path)
        return path

    def manifest(self, status: str, exit_code: int, error: str | None = None) -> None:
        doc = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seed": self.seed,
            "artifacts": self.artifacts,
            "version": __version__,
            "status": status,
            "exit_code": exit_code,
            "error": error,
            "wall_seconds": round(time.perf_counter() - self.t0, 3),
        }
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            atomic_write_text(self.out / "manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
        except OSError:
            pass


def _threads() -> None:
    value = os.environ.get("RRLAB_THREADS")
    if value:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, value)


# --------------------------------------------------------------------------
# commands


def cmd_train(args, run: Run) -> int:
    cfg = load_config(args.config, args.set)
    run.config = cfg.resolved()
    run.seed = cfg.train.seed
    full = cfg.data.build()
    tr, rest = split(full, 1.0 - cfg.data.holdout, derive_seed(cfg.data.seed, "split"))
    val, test = split(rest, 0.5, derive_seed(cfg.data.seed, "split-holdout"))
    run.out.mkdir(parents=True, exist_ok=True)
    for name, ds in (("train", tr), ("val", val), ("test", test)):
        save_csv(ds, run.out / f"{name}.csv")
        run.artifacts[f"{name}_csv"] = str(run.out / f"{name}.csv")

    def progress(rec):
        if not args.quiet:
            print(f"epoch {rec.epoch}: cls {rec.cls_loss:.4f} rr {rec.rr_loss:.4f} "
                  f"clean {rec.clean_acc:.3f} pgd {rec.pgd_acc:.3f}", file=sys.stderr)

    best, log = train(cfg.train, tr, val, progress)
    save_checkpoint(best, run.out / "best.ckpt")
    run.artifacts["best_checkpoint"] = str(run.out / "best.ckpt")
    save_checkpoint(log.final, run.out / "final.ckpt")
    run.artifacts["final_checkpoint"] = str(run.out / "final.ckpt")
    run.write("trainlog.csv", log.csv(), "trainlog")
    run.write("config.txt", cfg.text(), "config")
    return EXIT_OK


def _load_inputs(args):
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_csv(args.data, n_classes=ckpt.arch.n_classes)
    if ds.dim != ckpt.arch.input_dim:
        raise ConfigError(f"dataset has {ds.dim} features, checkpoint expects {ckpt.arch.input_dim}")
    return ckpt, ds


def _attack_cfg(args, cfg: RunConfig) -> AttackConfig:
    a = cfg.train.validation_attack
    return replace(a, seed=derive_seed(cfg.train.seed, "eval-attack"))


def _scores(out, y, rejector: str) -> np.ndarray:
    if rejector == "conf":
        return out.confidence
    if rejector == "tcon":
        return out.tcon(y)
    if rejector == "rcon":
        return out.r_con
    return out.a_phi


def _emit_gnuplot(run: Run, csv_name: str, title: str) -> None:
    stem = csv_name.rsplit(".", 1)[0]
    script = (f"set datafile separator ','\nset key autotitle columnhead\n"
              f"set title '{title}'\nset xlabel 'xi'\n"
              f"plot for [c=2:5] '{csv_name}' using 1:c with lines\n")
    run.write(f"{stem}.gp", script)


def _read_threshold(directory: str, name: str) -> float:
    """``tpr_threshold`` from an eval CSV written by an earlier run."""
    path = Path(directory) / name
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError as exc:
        raise ConfigError(f"--threshold-from: {path} not found") from exc
    for i, line in enumerate(lines[1:], start=2):
        key, _, value = line.partition(",")
        if key == "tpr_threshold":
            try:
                return float(value)
            except ValueError as exc:
                raise ParseError(f"{path}:{i}: bad threshold {value!r}") from exc
    raise ParseError(f"{path}: no tpr_threshold row")


def _evaluate(args, run: Run, taus) -> int:
    cfg = load_config(args.config, args.set)
    run.config = cfg.resolved()
    run.seed = cfg.train.seed
    ckpt, ds = _load_inputs(args)
    params = ckpt.params
    X = ds.X
    if args.attack:
        res = pgd(params, ds.X, ds.y, _attack_cfg(args, cfg))
        X = res.x_star
    rejectors = args.rejector.split(",")
    for r in rejectors:
        if r not in REJECTORS:
            raise ConfigError(f"unknown rejector {r!r}; expected one of {REJECTORS}")
    run.out.mkdir(parents=True, exist_ok=True)
    for tau in taus:
        out = predict(params, X, tau_cls=tau)
        correct = out.y_m == ds.y
        suffix = "" if len(taus) == 1 else f"_tau{float(tau)!r}"
        for r in rejectors:
            fixed = _read_threshold(args.threshold_from, f"eval_{r}{suffix}.csv") if args.threshold_from else None
            rep = build_report(r, _scores(out, ds.y, r), correct, out.confidence, out.r_con,
                               tpr=args.tpr, tau=tau, threshold=fixed)
            run.write(f"eval_{r}{suffix}.csv", rep.csv())
            run.write(f"pass_{r}{suffix}.csv", pass_curve_csv(rep.pass_rows))
            if args.emit_gnuplot:
                _emit_gnuplot(run, f"pass_{r}{suffix}.csv", f"pass curve ({r}, tau={tau:g})")
            if not args.quiet:
                print(f"{r} tau={tau:g}: all {rep.all_accuracy:.4f} tpr-acc {rep.tpr_accuracy:.4f} "
                      f"auc {rep.roc_auc if rep.roc_auc is not None else float('nan'):.4f}")
    return EXIT_OK


def cmd_eval(args, run: Run) -> int:
    return _evaluate(args, run, TAU_GRID if args.tau_sweep else (1.0,))


def cmd_sweep_tau(args, run: Run) -> int:
    return _evaluate(args, run, TAU_GRID)


def cmd_attack(args, run: Run) -> int:
    cfg = load_config(args.config, args.set)
    run.config = cfg.resolved()
    run.seed = cfg.train.seed
    ckpt, ds = _load_inputs(args)
    params = ckpt.params
    base = _attack_cfg(args, cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    if args.mode == "normal":
        res = pgd(params, ds.X, ds.y, base)
    elif args.mode == "adaptive":
        kinds = args.kinds.split(",")
        etas = [float(e) for e in args.eta_grid.split(",")]
        for k in kinds:
            if k not in ADAPTIVE_KINDS:
                raise ConfigError(f"unknown adaptive objective {k!r}")
        results = []
        for k in kinds:
            for eta in ([0.0] if k == "ce" else etas):
                results.append(pgd(params, ds.X, ds.y, replace(base, objective=k, eta=eta)))
        res = worst_case(results, ds.y)
    else:
        ref = load_csv(args.median_data, n_classes=ckpt.arch.n_classes) if args.median_data else ds
        median = float(np.median(predict(params, ref.X).r_con))
        eps_max = args.eps_max if args.eps_max is not None else base.eps
        obj = args.kinds.split(",")[0] if args.kinds else "ce+rcon"
        cfg_md = replace(base, objective=obj, eta=float(args.eta_grid.split(",")[0]))
        found = min_distortion(params, ds.X, ds.y, median, cfg_md, eps_max, args.search_steps)
        ok = ~np.isnan(found)
        lines = ["idx,found,eps"] + [f"{i},{int(ok[i])},{float(found[i])!r}" for i in range(len(found))]
        run.write("min_distortion.csv", "\n".join(lines) + "\n")
        summary = ["metric,value", f"rejector_median,{median!r}", f"n,{len(found)}",
                   f"found,{int(ok.sum())}",
                   f"median_eps,{float(np.median(found[ok])) if ok.any() else float('nan')!r}",
                   f"mean_eps,{float(np.mean(found[ok])) if ok.any() else float('nan')!r}"]
        run.write("min_distortion_summary.csv", "\n".join(summary) + "\n")
        return EXIT_OK
    run.write("attack.csv", res.csv())
    if not args.quiet:
        print(f"attack success rate {float(np.mean(res.success)):.4f}")
    return EXIT_OK


def nsub_check(trials: int, seed: int) -> tuple[int, list[str]]:
    """Compare the closed-form class counts with explicit bin constructions."""
    rng = derive_rng(seed, "nsub")
    bad = []
    for _ in range(trials):
        xi = float(rng.uniform(0.01, 0.99))
        rho = float(rng.uniform(1e-4, 0.5))
        res = nsub(xi, rho)
        g = len(geometric_bin_edges(xi, rho)) - 1
        a = len(arithmetic_bin_edges(xi)) - 1
        if g != math.ceil(res.n1) or a != math.ceil(res.n2):
            bad.append(f"xi={xi!r} rho={rho!r} bins=({g},{a}) closed=({res.n1!r},{res.n2!r})")
    return len(bad), bad


def cmd_verify(args, run: Run) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    run.config = {"trials": args.trials, "inject_fault": args.inject_fault}
    run.seed = args.seed
    reports = [verify_lemma1(args.trials, args.seed, args.inject_fault),
               verify_theorem1(args.trials, args.seed, args.inject_fault)]
    text = [r.text() for r in reports]
    rows = ["check,violations,counter,value"]
    for r in reports:
        for k, v in r.counters.items():
            rows.append(f"{r.name},{r.violations},{k},{v}")
    n_bad, bad = nsub_check(min(args.trials, 1000), args.seed)
    ex = nsub(0.1, 0.01)
    text.append(f"[nsub] pairs={min(args.trials, 1000)} mismatches={n_bad} "
                f"nsub(0.1,0.01)={ex.n_sub} -> {'PASS' if n_bad == 0 else 'FAIL'}")
    text += [f"  counterexample: {b}" for b in bad[:5]]
    rows.append(f"nsub,{n_bad},pairs,{min(args.trials, 1000)}")
    flip = temperature_flip()
    text.append(f"[temperature] x1@1={flip[('x1', 1.0)]!r} x2@1={flip[('x2', 1.0)]!r} "
                f"x1@2={flip[('x1', 2.0)]!r} x2@2={flip[('x2', 2.0)]!r} "
                f"-> {'PASS' if flip['flipped'] else 'FAIL'}")
    rows.append(f"temperature,{0 if flip['flipped'] else 1},flipped,{int(flip['flipped'])}")
    run.write("verify.txt", "\n".join(text) + "\n")
    run.write("verify.csv", "\n".join(rows) + "\n")
    print("\n".join(text))
    total = sum(r.violations for r in reports) + n_bad + (0 if flip["flipped"] else 1)
    if total:
        raise VerificationFailed(f"{total} violation(s)")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rrlab", description="Rectified-rejection experiments")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--quiet", action="store_true")

    def cfg_args(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    t = sub.add_parser("train", help="train a two-head model")
    cfg_args(t)
    common(t, "runs/train")

    for name in ("eval", "sweep-tau"):
        e = sub.add_parser(name, help="score rejectors" if name == "eval" else "eval over a temperature grid")
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--attack", action="store_true", help="PGD-attack the data first")
        e.add_argument("--rejector", default="conf,tcon,rcon,aphi")
        e.add_argument("--tpr", type=float, default=0.95)
        e.add_argument("--tau-sweep", action="store_true")
        e.add_argument("--emit-gnuplot", action="store_true")
        e.add_argument("--threshold-from", metavar="DIR",
                       help="reuse the thresholds of an earlier eval run in DIR (e.g. clean data)")
        cfg_args(e)
        common(e, f"runs/{name}")

    a = sub.add_parser("attack", help="run attacks and export per-example results")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--mode", choices=("normal", "adaptive", "min-distortion"), default="normal")
    a.add_argument("--kinds", default=",".join(ADAPTIVE_KINDS))
    a.add_argument("--eta-grid", default="0.5,1,2")
    a.add_argument("--eps-max", type=float)
    a.add_argument("--search-steps", type=int, default=9)
    a.add_argument("--median-data", help="CSV whose median R-Con sets the success threshold")
    cfg_args(a)
    common(a, "runs/attack")

    v = sub.add_parser("verify", help="randomized checks of the rejection guarantees")
    v.add_argument("--trials", type=int, default=100_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--inject-fault", action="store_true", help="flip one inequality (self-test)")
    common(v, "runs/verify")
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep-tau": cmd_sweep_tau,
            "attack": cmd_attack, "verify": cmd_verify}


def main(argv=None) -> int:
    _threads()
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    run = Run(args.command, Path(args.out), argv)
    try:
        code = COMMANDS[args.command](args, run)
    except VerificationFailed as exc:
        run.manifest("verification-failed", EXIT_VERIFY, str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (TrainingError, EvaluationError, AttackError) as exc:
        where = ""
        if isinstance(exc, TrainingError) and exc.epoch is not None:
            where = f" (epoch {exc.epoch}, step {exc.step})"
        run.manifest("numeric-failure", EXIT_NUMERIC, f"{exc}{where}")
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParseError, VersionError, InvalidArgumentError, OSError) as exc:
        run.manifest("usage-error", EXIT_USAGE, str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    run.manifest("ok", code)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
