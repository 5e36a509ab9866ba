"""Ensemble and dropout variance baselines plus cost accounting.

Both baselines answer the same question as the quadratic-form estimator
(how much does u(z) move under plausible parameter changes) by brute force:
ensembles retrain K times, dropout perturbs activations K times. They anchor
the cost/quality comparisons.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .exceptions import StructuralError
from .models import Dataset, Model, TrainConfig, make_model, predict, train
from .qoi import (QuantityOfInterest, _as_input_matrix, _rollout_head,
                  _rollout_states, qoi_value)

ENSEMBLE_MODES = ("init-only", "bootstrap-resample")
DEFAULT_MEMBERS = 10
DROPOUT_RATE_GRID = tuple(np.geomspace(5e-3, 0.8, 14))


@dataclass(frozen=True)
class EnsembleState:
    """K independently trained members plus the seeds that produced them."""

    members: tuple[Model, ...]
    seeds: tuple[int, ...]
    mode: str

    def __post_init__(self):
        if len(self.members) < 2:
            raise StructuralError("an ensemble needs at least two members")
        if self.mode not in ENSEMBLE_MODES:
            raise StructuralError(f"unknown ensemble mode {self.mode!r}")
        if len(self.seeds) != len(self.members):
            raise StructuralError("one seed per member")

    @property
    def k(self) -> int:
        return len(self.members)


def train_ensemble(model: Model, data: Dataset, k: int = DEFAULT_MEMBERS,
                   mode: str = "init-only", seed: int = 0,
                   train_cfg: TrainConfig | None = None) -> EnsembleState:
    """Train K members from a template model.

    init-only reinitializes parameters per member (a fresh draw for the mlp;
    deterministic inits make convex members identical, which is the honest
    degenerate case). bootstrap-resample additionally refits each member on
    an N-out-of-N with-replacement resample.
    """
    if k < 2:
        raise StructuralError("an ensemble needs at least two members")
    if mode not in ENSEMBLE_MODES:
        raise StructuralError(f"unknown ensemble mode {mode!r}")
    cfg = train_cfg or TrainConfig()
    children = np.random.SeedSequence(seed).spawn(k)
    members = []
    seeds = []
    for child in children:
        member_seed = int(child.generate_state(1)[0])
        seeds.append(member_seed)
        if model.kind == "mlp":
            widths = model.hyper["widths"]
            template = make_model(
                "mlp", d_in=model.d_in, d_out=model.d_out,
                hidden=tuple(widths[1:-1]), seed=member_seed,
                dropout_rate=model.hyper.get("dropout_rate", 0.0))
        else:
            template = model.with_params(model.params.data)
        if mode == "bootstrap-resample":
            rng = np.random.default_rng(child)
            idx = rng.integers(0, data.n, data.n)
            member_data = Dataset(data.inputs[idx], data.targets[idx])
        else:
            member_data = data
        member_cfg = replace(cfg, seed=member_seed)
        members.append(train(template, member_data, member_cfg))
    return EnsembleState(members=tuple(members), seeds=tuple(seeds),
                         mode=mode)


def _bound(u: QuantityOfInterest, model: Model) -> QuantityOfInterest:
    if u.model is None:
        raise StructuralError("this quantity does not evaluate through a "
                              "model, so resampled parameters cannot move it")
    return QuantityOfInterest(u.kind, model, u.config)


def _batch_values(u: QuantityOfInterest, model: Model,
                  zs: np.ndarray) -> np.ndarray:
    """Values of u at each z row under one fixed parameter setting."""
    bound = _bound(u, model)
    if u.kind == "rollout":
        zb = _as_input_matrix(model, zs)
        states, _ = _rollout_states(model, zb, u.config["horizon"], False)
        values, _ = _rollout_head(bound, states)
        return values
    if u.kind == "set-product":
        # a set-product consumes the whole z set as one query
        return np.array([qoi_value(bound, zs)])
    return np.array([qoi_value(bound, z) for z in np.atleast_2d(zs)])


def ensemble_variance_batch(ens: EnsembleState, u: QuantityOfInterest,
                            zs) -> np.ndarray:
    """Unbiased variance of u across members, one entry per z row."""
    for member in ens.members:
        if member.diagnostics is None:
            raise StructuralError("ensemble member was never trained")
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    values = np.stack([_batch_values(u, member, zs)
                       for member in ens.members])
    return np.var(values, axis=0, ddof=1)


def ensemble_variance(ens: EnsembleState, u: QuantityOfInterest, z) -> float:
    return float(ensemble_variance_batch(ens, u, z)[0])


def _dropout_passes(model: Model, u: QuantityOfInterest, zs: np.ndarray,
                    k: int, rate: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Values under k stochastic passes, shape (k, queries).

    The k passes share one tiled forward: dropout masks are independent per
    row, so stacking k copies of the query batch into a single pass is the
    cheap implementation the weight-sharing allows.
    """
    bound = _bound(u, model)
    if u.kind == "rollout":
        zb = _as_input_matrix(model, zs)
        tiled = np.tile(zb, (k, 1))
        states = [tiled]
        x = tiled
        for _ in range(u.config["horizon"]):
            x = predict(model, x, rng=rng, dropout_rate=rate)
            states.append(x)
        values, _ = _rollout_head(bound, states)
        return values.reshape(k, zb.shape[0])
    if u.kind == "power":
        zb = _as_input_matrix(model, zs)
        tiled = np.tile(zb, (k, 1))
        out = predict(model, tiled, rng=rng, dropout_rate=rate)[:, 0]
        return (out ** u.config["exponent"]).reshape(k, zb.shape[0])
    if u.kind == "set-product":
        zb = _as_input_matrix(model, zs)
        tiled = np.tile(zb, (k, 1))
        out = predict(model, tiled, rng=rng, dropout_rate=rate)[:, 0]
        return np.prod(out.reshape(k, zb.shape[0]), axis=1, keepdims=True)
    raise StructuralError(f"dropout cannot perturb a {u.kind} quantity")


def dropout_variance_batch(model: Model, u: QuantityOfInterest, zs,
                           k: int = DEFAULT_MEMBERS, rate: float = 0.1,
                           seed: int = 0) -> np.ndarray:
    """Variance of u over k stochastic dropout passes, per z row."""
    if model.kind != "mlp":
        raise StructuralError("dropout needs an mlp (masks are inserted "
                              "post-hoc at evaluation time)")
    if not 0.0 < rate < 1.0:
        raise StructuralError("dropout rate must lie strictly in (0, 1)")
    if k < 2:
        raise StructuralError("need at least two dropout passes")
    rng = np.random.default_rng(seed)
    values = _dropout_passes(model, u, zs, k, rate, rng)
    return np.var(values, axis=0, ddof=1)


def dropout_variance(model: Model, u: QuantityOfInterest, z,
                     k: int = DEFAULT_MEMBERS, rate: float = 0.1,
                     seed: int = 0) -> float:
    return float(dropout_variance_batch(model, u, z, k, rate, seed)[0])


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------

def cost_accounting(method: str, workload: Callable[[], object] | None = None,
                    k: int = DEFAULT_MEMBERS, repeats: int = 5) -> dict:
    """Counted primitives per variance query, plus measured wall-clock.

    The counts follow from what each method must do: one gradient pass for
    the quadratic form, K forward evaluations for the resampling baselines,
    K retained parameter sets for an ensemble. `workload`, when given, is a
    zero-argument callable running one full batch of variance queries; its
    median wall-clock over `repeats` runs lands in the "seconds" key.
    """
    if method in ("delta", "delta-finetuned"):
        profile = {"method": method, "train_overhead": 1.0,
                   "inference_evals": 0, "inference_grads": 1,
                   "memory_factor": 1.0}
    elif method == "ensemble":
        profile = {"method": method, "train_overhead": float(k),
                   "inference_evals": k, "inference_grads": 0,
                   "memory_factor": float(k)}
    elif method == "dropout":
        profile = {"method": method, "train_overhead": 1.0,
                   "inference_evals": k, "inference_grads": 0,
                   "memory_factor": 1.0}
    else:
        raise StructuralError(f"unknown method {method!r}")
    if workload is not None:
        if repeats < 1:
            raise StructuralError("repeats must be positive")
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            workload()
            times.append(time.perf_counter() - start)
        profile["seconds"] = statistics.median(times)
    return profile
