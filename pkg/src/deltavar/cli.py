"""Command line front end: train, sigma, deltavar, oracle, finetune, bench, cost.

Exit codes: 0 on success, 1 for a structured runtime failure (message on
stderr), 2 for a malformed config or command line (nothing is written).
Output directories are staged in a sibling ".partial" directory and renamed
into place on success, so a failed run never leaves a half-written report.
Floats are printed and serialized with shortest round-trip decimals; the only
environment variable consulted is DELTAVAR_THREADS (worker pool size, which
never changes any computed value).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import re
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (cost_accounting, dropout_variance_batch,
                        ensemble_variance_batch, train_ensemble)
from .bench import (Scenario, finetune_report, gen_dynamics, make_scenario,
                    run_scenario, survival_dataset, write_report)
from .covariance import (canonical_sigma, laplace_sigma, load_covariance,
                         sandwich, save_covariance)
from .autodiff import ParameterVector
from .delta_variance import GradientDelta, delta_variance
from .exceptions import ConfigError, DeltaVarError, StructuralError
from .models import Dataset, Model, TrainConfig, make_model, train
from .oracles import (adversarial_shift, eps_loo_variance,
                      gaussian_posterior_mc, loo_variance,
                      mahalanobis_gradient_distance, richardson_eps_loo)
from .qoi import make_qoi, parse_qoi, values_and_deltas
from .util import format_float, stable_json_dumps

_POWER_ALIAS = re.compile(r"^power(\d+)$")
_SIGMA_KINDS = ("fisher-full", "fisher-diag", "hessian", "sandwich")
_ORACLE_KINDS = ("posterior-mc", "loo", "eps-loo", "richardson",
                 "adversarial", "mahalanobis")


# ---------------------------------------------------------------------------
# config and option plumbing
# ---------------------------------------------------------------------------

def _load_config(args) -> dict:
    cfg: dict = {}
    path = getattr(args, "config", None)
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    for raw in getattr(args, "set", None) or []:
        key, sep, value = raw.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {raw!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object")
        node[parts[-1]] = parsed
    return cfg


def _pop_section(cfg: dict, name: str) -> dict:
    section = cfg.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(section)


def _take(section: dict, allowed: dict, where: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys {sorted(unknown)}; "
                          f"valid keys are {sorted(allowed)}")
    out = dict(allowed)
    out.update(section)
    return out


class _OutputDir:
    """Stage writes next to the target and rename into place on success."""

    def __init__(self, out, force: bool):
        self.final = Path(out)
        if self.final.exists() and not self.final.is_dir():
            raise StructuralError(f"{self.final} exists and is not a directory")
        if self.final.is_dir() and any(self.final.iterdir()) and not force:
            raise StructuralError(f"output directory {self.final} is not "
                                  "empty; pass --force to replace it")
        self.staging = self.final.with_name(self.final.name + ".partial")

    def __enter__(self) -> Path:
        if self.staging.exists():
            shutil.rmtree(self.staging)
        self.staging.mkdir(parents=True)
        return self.staging

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.staging, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.staging, self.final)
        return False


# ---------------------------------------------------------------------------
# model and dataset files
# ---------------------------------------------------------------------------

def save_model_dir(directory, model: Model, data: Dataset) -> None:
    """Write model.json (exact float params) and data.npz into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    hyper = {k: list(v) if isinstance(v, tuple) else v
             for k, v in model.hyper.items()}
    payload = {
        "kind": model.kind,
        "hyper": hyper,
        "blocks": [[n, s, l] for n, s, l in model.params.blocks],
        "params": [float(x) for x in model.params.data],
        "diagnostics": model.diagnostics,
    }
    (directory / "model.json").write_text(stable_json_dumps(payload) + "\n")
    np.savez(directory / "data.npz", inputs=data.inputs, targets=data.targets)


def load_model_dir(path):
    """Model and training data back from a directory written by `train`."""
    directory = Path(path)
    model_file = directory / "model.json"
    data_file = directory / "data.npz"
    if not model_file.exists():
        raise ConfigError(f"{directory} has no model.json (run `train` first)")
    obj = json.loads(model_file.read_text())
    hyper = obj["hyper"]
    if "widths" in hyper:
        hyper["widths"] = tuple(int(w) for w in hyper["widths"])
    params = ParameterVector(
        np.asarray(obj["params"], dtype=np.float64),
        tuple((str(n), int(s), int(l)) for n, s, l in obj["blocks"]))
    model = Model(kind=obj["kind"], params=params, hyper=hyper,
                  diagnostics=obj.get("diagnostics"))
    if not data_file.exists():
        raise ConfigError(f"{directory} has no data.npz (run `train` first)")
    with np.load(data_file) as npz:
        data = Dataset(npz["inputs"], npz["targets"])
    return model, data


def _build_dataset(spec) -> Dataset:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError('config needs a data object with a "kind"')
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "dynamics":
        opts = _take(spec, {"seed": 0, "n": 1500, "noise": 0.01}, "data")
        return gen_dynamics(int(opts["seed"]), int(opts["n"]),
                            float(opts["noise"]))
    if kind == "survival":
        opts = _take(spec, {"n": 1000, "rate": 0.9}, "data")
        return survival_dataset(int(opts["n"]), float(opts["rate"]))
    if kind == "file":
        opts = _take(spec, {"path": None}, "data")
        if not opts["path"]:
            raise ConfigError('file datasets need a "path"')
        try:
            with np.load(opts["path"]) as npz:
                return Dataset(npz["inputs"], npz["targets"])
        except OSError as exc:
            raise ConfigError(f"cannot read dataset: {exc}") from exc
    raise ConfigError(f"unknown data kind {kind!r}; "
                      "choose dynamics, survival or file")


def _build_model(spec) -> Model:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError('config needs a model object with a "kind"')
    spec = dict(spec)
    kind = spec.pop("kind")
    opts = _take(spec, {"d_in": 1, "d_out": 1, "hidden": [32, 32],
                        "seed": 0, "dropout_rate": 0.0}, "model")
    return make_model(kind, d_in=int(opts["d_in"]), d_out=int(opts["d_out"]),
                      hidden=tuple(int(w) for w in opts["hidden"]),
                      seed=int(opts["seed"]),
                      dropout_rate=float(opts["dropout_rate"]))


def _train_config(section: dict, seed_override) -> TrainConfig:
    opts = _take(section, {"steps": 2000, "learning_rate": None,
                           "batch": None, "seed": 0, "grad_tol": None,
                           "polish_steps": None}, "train")
    if seed_override is not None:
        opts["seed"] = seed_override
    return TrainConfig(
        steps=int(opts["steps"]),
        learning_rate=None if opts["learning_rate"] is None
        else float(opts["learning_rate"]),
        batch=None if opts["batch"] is None else int(opts["batch"]),
        seed=int(opts["seed"]),
        grad_tol=None if opts["grad_tol"] is None else float(opts["grad_tol"]),
        polish_steps=None if opts["polish_steps"] is None
        else int(opts["polish_steps"]))


# ---------------------------------------------------------------------------
# shared argument helpers
# ---------------------------------------------------------------------------

def _qoi_from_text(text: str, model: Model):
    short = _POWER_ALIAS.match(text.strip())
    if short:
        return make_qoi("power", model, exponent=float(short.group(1)))
    return parse_qoi(text, model)


def _parse_input(text: str, model: Model) -> np.ndarray:
    try:
        values = [float(part) for part in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--input expects comma-separated floats, "
                          f"got {text!r}") from exc
    z = np.asarray(values)
    if z.size != model.d_in:
        raise ConfigError(f"--input has {z.size} components but the model "
                          f"takes {model.d_in}")
    return z


def _resolve_sigma(spec: str, model: Model, data: Dataset, reg: float):
    if Path(spec).is_file():
        return load_covariance(spec)
    if spec == "fisher-full":
        return canonical_sigma(model, data, mode="full", reg=reg)
    if spec == "fisher-diag":
        return canonical_sigma(model, data, mode="diag", reg=reg)
    if spec == "hessian":
        return laplace_sigma(model, data, reg=reg)
    if spec == "sandwich":
        return sandwich(model, data, reg=reg)
    raise ConfigError(f"--sigma must be a saved covariance file or one of "
                      f"{_SIGMA_KINDS}, got {spec!r}")


def _scenario_from(cfg: dict, args) -> Scenario:
    kind = cfg.get("scenario", "dynamics")
    params = _pop_section(cfg, "params")
    seed = int(cfg.get("seed", 0))
    if args.seed is not None:
        seed = args.seed
    return make_scenario(kind, seed=seed, **params)


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_train(args, cfg) -> int:
    model = _build_model(_pop_section(cfg, "model"))
    data = _build_dataset(_pop_section(cfg, "data"))
    train_cfg = _train_config(_pop_section(cfg, "train"), args.seed)
    leftover = set(cfg) - {"model", "data", "train"}
    if leftover:
        raise ConfigError(f"unknown config sections {sorted(leftover)}")
    with _OutputDir(args.out, args.force) as out:
        fitted = train(model, data, train_cfg)
        save_model_dir(out, fitted, data)
    diag = fitted.diagnostics
    print(f"trained {fitted.kind} on {data.n} points: "
          f"final grad norm {format_float(diag['final_grad_norm'])}, "
          f"loss {format_float(diag['final_loss'])}, "
          f"steps {diag['steps']}")
    return 0


def _cmd_sigma(args, cfg) -> int:
    if cfg:
        raise ConfigError("sigma takes no config; use --model/--kind/--reg")
    model, data = load_model_dir(args.model)
    sigma = _resolve_sigma(args.kind, model, data, args.reg)
    with _OutputDir(args.out, args.force) as out:
        save_covariance(out / "sigma.bin", sigma)
    print(f"wrote {sigma.kind} covariance: dim {sigma.dim}, "
          f"reg {format_float(sigma.reg)}")
    return 0


def _cmd_deltavar(args, cfg) -> int:
    if cfg:
        raise ConfigError("deltavar takes no config; use flags")
    model, data = load_model_dir(args.model)
    u = _qoi_from_text(args.qoi, model)
    sigma = _resolve_sigma(args.sigma, model, data, args.reg)
    zs = np.stack([_parse_input(text, model) for text in args.input])
    _, deltas = values_and_deltas(u, zs)
    for row in deltas:
        nu = delta_variance(GradientDelta(row, source=u.qoi_id), sigma)
        print(format_float(nu))
    return 0


def _cmd_oracle(args, cfg) -> int:
    model, data = load_model_dir(args.model)
    u = _qoi_from_text(args.qoi, model)
    z = _parse_input(args.input, model)
    kind = args.kind
    seed = 0 if args.seed is None else args.seed
    if kind == "posterior-mc":
        opts = _take(cfg, {"samples": 100_000, "sigma": "fisher-full",
                           "reg": 0.0}, "posterior-mc")
        cov = _resolve_sigma(str(opts["sigma"]), model, data,
                             float(opts["reg"]))
        report = gaussian_posterior_mc(u, model.params.data, cov, z,
                                       samples=int(opts["samples"]),
                                       seed=seed)
    elif kind in ("loo", "eps-loo", "richardson"):
        opts = _take(cfg, {"eps": 1e-2, "max_points": 500}, kind)
        common = dict(max_points=int(opts["max_points"]))
        if kind == "loo":
            report = loo_variance(model, data, u, z, **common)
        elif kind == "eps-loo":
            report = eps_loo_variance(model, data, u, z,
                                      eps=float(opts["eps"]), **common)
        else:
            report = richardson_eps_loo(model, data, u, z,
                                        eps=float(opts["eps"]), **common)
    elif kind == "adversarial":
        opts = _take(cfg, {"eps": 1e-2, "mode": "offset", "delta": None,
                           "noise": None, "draws": 1000}, "adversarial")
        report = adversarial_shift(
            model, data, u, z, eps=float(opts["eps"]), mode=str(opts["mode"]),
            delta=None if opts["delta"] is None else float(opts["delta"]),
            sigma=None if opts["noise"] is None else float(opts["noise"]),
            draws=int(opts["draws"]), seed=seed)
    elif kind == "mahalanobis":
        if cfg:
            raise ConfigError("mahalanobis takes no options")
        report = mahalanobis_gradient_distance(model, data, u, z)
    else:
        raise ConfigError(f"unknown oracle kind {kind!r}; "
                          f"choose one of {_ORACLE_KINDS}")
    payload = {
        "kind": report.kind,
        "estimate": report.estimate,
        "spread": report.spread,
        "count": report.count,
        "seed": report.seed,
        "reg": report.reg,
        "grad_norm": (None if math.isnan(report.grad_norm)
                      else report.grad_norm),
    }
    print(stable_json_dumps(payload))
    return 0


def _cmd_finetune(args, cfg) -> int:
    scenario = _scenario_from(cfg, args)
    report = finetune_report(scenario)
    if args.out is not None:
        with _OutputDir(args.out, args.force) as out:
            (out / "scales.json").write_text(stable_json_dumps(report) + "\n")
    for qoi_id, entry in report.items():
        print(f"{qoi_id}: objective {format_float(entry['objective_at_init'])}"
              f" -> {format_float(entry['objective_value'])}")
    return 0


def _cmd_bench(args, cfg) -> int:
    scenario = _scenario_from(cfg, args)
    with _OutputDir(args.out, args.force) as out:
        result = run_scenario(scenario)
        write_report(out, result["rows"], result["metrics"],
                     result["provenance"])
        extras = emit_plotdata(out)
    final = Path(args.out)
    names = ["report.csv", "metrics.json", "provenance.json"]
    names += [p.name for p in extras]
    for name in names:
        print(final / name)
    return 0


def _cmd_cost(args, cfg) -> int:
    scenario = _scenario_from(cfg, args)
    if scenario.kind != "dynamics":
        raise ConfigError("cost profiles are measured on the dynamics scenario")
    from .bench import _dynamics_head, _dynamics_qois
    head = _dynamics_head(scenario)
    p = scenario.params
    ens = train_ensemble(head.model, head.splits.train, k=int(p["members"]),
                         mode="init-only", seed=head.ensemble_seed,
                         train_cfg=head.train_cfg)
    u = head.qois[-1]
    batch = min(32, head.splits.evaluation.n)
    z = head.splits.evaluation.inputs[:batch]
    model = head.model
    workloads = {
        "delta": lambda: values_and_deltas(u, z),
        "dropout": lambda: dropout_variance_batch(
            model, u, z, k=int(p["dropout_passes"]),
            rate=float(p["dropout_rate"]), seed=0),
        "ensemble": lambda: ensemble_variance_batch(ens, u, z),
    }
    profiles = {}
    for method in ("delta", "dropout", "ensemble"):
        k = int(p["members"]) if method == "ensemble" \
            else int(p["dropout_passes"])
        profiles[method] = cost_accounting(method, workload=workloads[method],
                                           k=k, repeats=args.repeats)
    for method, prof in profiles.items():
        print(f"{method}: {format_float(prof['seconds'])} s on {batch} inputs"
              f" (train x{format_float(float(prof['train_overhead']))},"
              f" evals {prof['inference_evals']},"
              f" grads {prof['inference_grads']})")
    if args.out is not None:
        with _OutputDir(args.out, args.force) as out:
            payload = {"batch": batch, "qoi": u.qoi_id, "profiles": profiles,
                       "note": "seconds are wall-clock medians and vary "
                               "between runs"}
            (out / "cost.json").write_text(stable_json_dumps(payload) + "\n")
    return 0


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(x) if isinstance(x, float)
                             else str(x) for x in row])
    return path


def emit_plotdata(report_dir) -> list:
    """Tidy plot-ready CSVs derived from a completed scenario report.

    Dynamics reports yield retention.csv (error-retention curves per quantity
    and method) and cost_quality.csv (counted costs against improvements vs
    the ensemble, with standard errors). Survival reports yield
    convergence.csv. Files land next to report.csv; the list of written
    paths is returned.
    """
    report_dir = Path(report_dir)
    report_file = report_dir / "report.csv"
    prov_file = report_dir / "provenance.json"
    metrics_file = report_dir / "metrics.json"
    for needed in (report_file, prov_file, metrics_file):
        if not needed.exists():
            raise ConfigError(f"{report_dir} is not a completed report "
                              f"directory (missing {needed.name})")
    provenance = json.loads(prov_file.read_text())
    metrics = json.loads(metrics_file.read_text())
    scenario = provenance.get("scenario")
    written = []

    if scenario == "dynamics":
        groups: dict = {}
        with open(report_file) as fh:
            for row in csv.DictReader(fh):
                key = (row["qoi_id"], row["method"])
                groups.setdefault(key, []).append(
                    (float(row["value"]), float(row["error"])))
        rows = []
        for qoi_id, method in sorted(groups):
            pairs = groups[(qoi_id, method)]
            variances = np.array([pair[0] for pair in pairs])
            errors = np.array([pair[1] for pair in pairs])
            order = np.argsort(-variances, kind="stable")
            tail_means = np.cumsum(errors[order][::-1])[::-1] \
                / np.arange(len(pairs), 0, -1)
            for i in range(len(pairs)):
                rows.append((qoi_id, method, i / len(pairs),
                             float(tail_means[i])))
        written.append(_write_csv(
            report_dir / "retention.csv",
            ("qoi_id", "method", "fraction_removed", "mean_abs_error"), rows))

        rows = []
        for method in sorted(metrics["aggregate"]):
            entry = metrics["aggregate"][method]
            for metric in ("auc", "corr", "loglik"):
                rows.append((method, metric,
                             float(entry["cost_train_overhead"]),
                             float(entry["cost_inference_evals"]),
                             float(entry["cost_inference_grads"]),
                             float(entry["cost_memory_factor"]),
                             float(entry[f"improvement_{metric}_mean"]),
                             float(entry[f"improvement_{metric}_stderr"])))
        written.append(_write_csv(
            report_dir / "cost_quality.csv",
            ("method", "metric", "train_overhead", "inference_evals",
             "inference_grads", "memory_factor", "improvement", "stderr"),
            rows))

    elif scenario == "survival":
        rows = []
        for entry in sorted(metrics["per_n"].values(), key=lambda e: e["n"]):
            rows.append((entry["n"], float(entry["analytic_var"]),
                         float(entry["true_var"]), float(entry["delta_var"]),
                         float(entry["ensemble_var"])))
        written.append(_write_csv(
            report_dir / "convergence.csv",
            ("n", "analytic_var", "true_var", "delta_var", "ensemble_var"),
            rows))

    return written


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deltavar",
        description="Gradient-based epistemic variance estimators, "
                    "oracles and benchmarks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False, with_out=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted keys, repeatable)")
        p.add_argument("--seed", type=int, help="master seed override")
        if with_out:
            p.add_argument("--out", required=out_required,
                           help="output directory")
            p.add_argument("--force", action="store_true",
                           help="replace a non-empty output directory")

    p = sub.add_parser("train", help="fit a model and save it with its data")
    common(p, out_required=True)

    p = sub.add_parser("sigma", help="build and save a parameter covariance")
    common(p, out_required=True)
    p.add_argument("--model", required=True, help="directory written by train")
    p.add_argument("--kind", default="fisher-diag",
                   help=f"one of {_SIGMA_KINDS}")
    p.add_argument("--reg", type=float, default=0.0, help="ridge term")

    p = sub.add_parser("deltavar",
                       help="print the delta variance of a quantity")
    common(p, with_out=False)
    p.add_argument("--model", required=True, help="directory written by train")
    p.add_argument("--sigma", default="fisher-diag",
                   help="covariance kind or saved sigma.bin path")
    p.add_argument("--reg", type=float, default=0.0, help="ridge term")
    p.add_argument("--qoi", required=True,
                   help='quantity id, e.g. "power10" or '
                        '"rollout:functional=mean,horizon=3"')
    p.add_argument("--input", action="append", required=True,
                   help="evaluation point (comma-separated floats, repeatable)")

    p = sub.add_parser("oracle", help="run a ground-truth oracle")
    common(p, with_out=False)
    p.add_argument("--model", required=True, help="directory written by train")
    p.add_argument("--kind", required=True, help=f"one of {_ORACLE_KINDS}")
    p.add_argument("--qoi", required=True, help="quantity id")
    p.add_argument("--input", required=True, help="evaluation point")

    p = sub.add_parser("finetune",
                       help="fit per-block scale factors on validation data")
    common(p)

    p = sub.add_parser("bench", help="run a benchmark scenario")
    common(p, out_required=True)

    p = sub.add_parser("cost", help="measure method cost profiles")
    common(p)
    p.add_argument("--repeats", type=int, default=7,
                   help="timing repetitions (median is reported)")
    return parser


_HANDLERS = {
    "train": _cmd_train,
    "sigma": _cmd_sigma,
    "deltavar": _cmd_deltavar,
    "oracle": _cmd_oracle,
    "finetune": _cmd_finetune,
    "bench": _cmd_bench,
    "cost": _cmd_cost,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        return _HANDLERS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DeltaVarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
