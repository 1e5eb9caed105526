"""Command-line front end: ``scvamp <command> [--config PATH] [--seed N] ...``.

Commands
--------
run            experiment named by ``kind`` in the config (default linear-bg)
train-score    train the pairwise score network and write a weight file
se             state evolution only
exit           EXIT transfer curves and staircase
diagnose       Gaussianity report of the prior-module input errors
langevin-demo  SC-VAMP with the Langevin observation module

Every experiment writes ``trace.csv`` and ``summary.json`` into ``--out``
(plus ``exit_curves.csv``, ``diagnostics.json`` or ``weights.json`` where
relevant).  Files are written to a temporary name and renamed into place.
Exit status: 0 success, 2 invalid configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile

import yaml

from . import __version__
from .dsm import DsmConfig, TrainingDiverged, save_weights, train_dsm
from .experiments import (TRACE_FIELDS, ConfigError, ExperimentConfig,
                          ExperimentFailed, make_prior, run_experiment, score_report)
from .numerics import deterministic_blas, get_workers, set_workers
from .score_models import PairwiseGaussianPrior

__all__ = ["main", "build_parser", "resolve_threads", "write_trace", "config_hash"]

TRACE_SCHEMA = "scvamp-trace/1"

COMMAND_KINDS = {
    "se": "se-only",
    "exit": "exit",
    "diagnose": "diagnostics",
    "langevin-demo": "langevin-demo",
}

PLOT_STUB = '''"""Plot the MSE trajectory in trace.csv (needs matplotlib)."""
import csv
import matplotlib.pyplot as plt

with open("trace.csv") as fh:
    rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
it = [int(r["iter"]) for r in rows]
plt.semilogy(it, [float(r["mse_actual"]) for r in rows], "o-", label="SC-VAMP (actual)")
plt.semilogy(it, [float(r["mse_se"]) for r in rows], "x--", label="SE")
plt.xlabel("iteration")
plt.ylabel("MSE per symbol")
plt.legend()
plt.savefig("mse.png", dpi=150)
'''


def resolve_threads(flag: int | None, environ=os.environ) -> int | None:
    """``--threads`` wins over ``SCVAMP_THREADS``; ``None`` means one worker."""
    if flag is not None:
        value = flag
    elif environ.get("SCVAMP_THREADS"):
        try:
            value = int(environ["SCVAMP_THREADS"])
        except ValueError:
            raise ConfigError("SCVAMP_THREADS: not an integer") from None
    else:
        return None
    if value < 1:
        raise ConfigError("threads: must be >= 1")
    return value


def _format(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    v = float(value)
    return "nan" if math.isnan(v) else repr(v)


def _atomic_write(path: str, text: str) -> None:
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace(path: str, rows: list) -> None:
    """CSV with a version-stamped comment line and shortest round-trip floats."""
    lines = [f"# {TRACE_SCHEMA} scvamp {__version__}", ",".join(TRACE_FIELDS)]
    for row in rows:
        lines.append(",".join(_format(row[k]) for k in TRACE_FIELDS))
    _atomic_write(path, "\n".join(lines) + "\n")


def _write_table(path: str, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(v if isinstance(v, str) else _format(v) for v in row) for row in rows]
    _atomic_write(path, "\n".join(lines) + "\n")


def _jsonable(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return _jsonable(obj.item())
    return obj


def _write_json(path: str, doc) -> None:
    _atomic_write(path, json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def config_hash(config: dict) -> str:
    canon = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path} ({exc.strerror})") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: {path} is not valid YAML ({exc})") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    return data


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scvamp", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"scvamp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "train-score", "se", "exit", "diagnose", "langevin-demo"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--seeds", help="comma-separated seed list; one run per seed "
                                       "under OUT/seed_<k>")
        p.add_argument("--out", default="scvamp-out", help="output directory")
        p.add_argument("--threads", type=int, help="worker threads for matrix "
                                                   "products (default: $SCVAMP_THREADS or 1; "
                                                   "results do not depend on it)")
    return parser


def _experiment(command: str, raw: dict, seed: int | None, out: str) -> int:
    kind = COMMAND_KINDS.get(command)
    if kind and raw.get("kind", kind) != kind:
        raise ConfigError(f"kind: config says {raw['kind']!r} but '{command}' "
                          f"runs {kind!r}")
    if seed is not None:
        raw = {**raw, "seed": seed}
    cfg = ExperimentConfig.from_dict(raw, kind)
    status = 0
    try:
        result = run_experiment(cfg)
    except ExperimentFailed as exc:
        result = exc.result
        result.summary["error"] = str(exc)
        status = 3
    cfg_dict = cfg.to_dict()
    if result.weights is not None:
        save_weights(result.weights, os.path.join(out, "weights.json"))
    write_trace(os.path.join(out, "trace.csv"), result.trace)
    for name, (header, rows) in result.tables.items():
        _write_table(os.path.join(out, name), header, rows)
    for name, doc in result.documents.items():
        _write_json(os.path.join(out, name), doc)
    if result.trace:
        _atomic_write(os.path.join(out, "plot_trace.py"), PLOT_STUB)
    summary = {"kind": cfg.kind, "seed": cfg.seed, "config_hash": config_hash(cfg_dict),
               "code_version": __version__, "config": cfg_dict,
               "results": result.summary}
    _write_json(os.path.join(out, "summary.json"), summary)
    _print_summary(cfg, result)
    if status:
        print(f"error: {result.summary['error']} (partial trace kept in {out})",
              file=sys.stderr)
    return status


def _print_summary(cfg, result) -> None:
    print(f"{cfg.kind}  seed={cfg.seed}")
    print(f"{'iter':>4} {'mse_actual':>14} {'mse_se':>14} {'v_in_B':>14}")
    for row in result.trace:
        print(f"{row['iter']:>4d} {row['mse_actual']:>14.6g} {row['mse_se']:>14.6g} "
              f"{row['v_in_B']:>14.6g}")
    for key in ("final_mse", "final_mse_se", "v_star", "mutual_information_nats",
                "wiener_mad", "decoupling_passed", "wall_clock"):
        if key in result.summary:
            print(f"{key}: {result.summary[key]}")


def _train_score(raw: dict, seed: int | None, out: str) -> int:
    unknown = sorted(set(raw) - {"dsm", "prior", "seed", "kind", "holdout"})
    if unknown:
        raise ConfigError(f"{unknown[0]}: not used by train-score")
    prior_spec = {"kind": "pairwise-gaussian", "var": 1.0, "xi": 0.9, **raw.get("prior", {})}
    try:
        prior = make_prior(prior_spec)
        kwargs = dict(raw.get("dsm", {}))
        if "arch" in kwargs:
            kwargs["arch"] = tuple(kwargs["arch"])
        kwargs["seed"] = seed if seed is not None else kwargs.get("seed", raw.get("seed", 0))
        dcfg = DsmConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dsm: {exc}") from exc
    if not isinstance(prior, PairwiseGaussianPrior):
        raise ConfigError("prior.kind: the pair network is trained on a pairwise prior")
    status = 0
    try:
        net, report = train_dsm(lambda r, c: prior.sample_prior(r, (c, 2)), dcfg)
    except TrainingDiverged as exc:
        net, report, status = None, exc.report, 3
    doc = {"seed": report.seed, "iterations": report.iterations,
           "final_loss": report.final_loss, "wall_clock": report.wall_clock,
           "checkpoints": report.checkpoints, "code_version": __version__,
           "config": {k: getattr(dcfg, k) for k in dcfg.__dataclass_fields__}}
    if net is not None:
        save_weights(net, os.path.join(out, "weights.json"))
        holdout = int(raw.get("holdout", 100_000))
        err, per = score_report(net, prior, dcfg.seed, holdout)
        doc["relative_score_error"] = err
        doc["relative_score_error_per_sigma"] = per
        print(f"final loss {report.final_loss:.6g}; relative score error vs "
              f"analytic {err:.4f}")
    _write_json(os.path.join(out, "training_report.json"), doc)
    if status:
        print(f"error: training diverged after {report.iterations} steps", file=sys.stderr)
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        threads = resolve_threads(args.threads)
        raw = load_config_file(args.config)
        seeds = [args.seed]
        if args.seeds:
            try:
                seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            except ValueError:
                raise ConfigError("--seeds: expected comma-separated integers") from None
        status = 0
        previous = get_workers()
        set_workers(threads or 1)
        try:
            with deterministic_blas():
                for seed in seeds:
                    out = (args.out if len(seeds) == 1
                           else os.path.join(args.out, f"seed_{seed}"))
                    if args.command == "train-score":
                        code = _train_score(raw, seed, out)
                    else:
                        code = _experiment(args.command, raw, seed, out)
                    status = max(status, code)
        finally:
            set_workers(previous)
        return status
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
