"""Desk-scale probabilistic models and their training loop.

Four model kinds share one interface: bernoulli-rate (a single success
probability, inputs ignored), linear-regression and logistic (generalized
linear), and a small tanh MLP for learned dynamics. Squared-error training is
treated as a unit-variance Gaussian likelihood throughout, so "loss" always
means a negative log-likelihood and Fisher/Hessian quantities share one
convention.

Gradients come in two interchangeable forms: closed-form vectorized numpy
(used for training and Fisher accumulation) and tape recordings (used for
Hessians and as a cross-check). Tests verify the two routes agree.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterVector, Tape, Var
from .exceptions import StructuralError, TrainingError

MODEL_KINDS = ("bernoulli-rate", "linear-regression", "logistic", "mlp")

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Paired inputs (N, d_in) and targets (N, d_out), float64."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.inputs, dtype=np.float64))
        y = np.ascontiguousarray(np.asarray(self.targets, dtype=np.float64))
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim == 1:
            y = y[:, None]
        if x.ndim != 2 or y.ndim != 2:
            raise StructuralError("inputs and targets must be 2-d arrays")
        if x.shape[0] != y.shape[0]:
            raise StructuralError(
                f"inputs have {x.shape[0]} rows but targets have {y.shape[0]}")
        if x.shape[0] == 0:
            raise StructuralError("dataset is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise StructuralError("dataset contains non-finite values")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def d_out(self) -> int:
        return self.targets.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.inputs[idx], self.targets[idx])


def read_dataset_csv(path) -> Dataset:
    """Read a dataset from CSV with header columns x0..x{k},y0..y{m}."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    x_cols = [i for i, name in enumerate(header) if name.startswith("x")]
    y_cols = [i for i, name in enumerate(header) if name.startswith("y")]
    if not x_cols or not y_cols:
        raise StructuralError(f"CSV header must name x*/y* columns, got {header}")
    data = np.array([[float(cell) for cell in row] for row in rows], dtype=np.float64)
    return Dataset(data[:, x_cols], data[:, y_cols])


def write_dataset_csv(path, data: Dataset) -> None:
    header = [f"x{i}" for i in range(data.d_in)] + [f"y{i}" for i in range(data.d_out)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for xi, yi in zip(data.inputs, data.targets):
            writer.writerow([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Model:
    """A model kind, its flat parameters, and architecture hyperparameters.

    Value-like: train() returns a new Model and never mutates its input.
    """

    kind: str
    params: ParameterVector
    hyper: dict
    diagnostics: dict | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise StructuralError(f"unknown model kind {self.kind!r}")

    @property
    def d_in(self) -> int:
        return int(self.hyper["d_in"])

    @property
    def d_out(self) -> int:
        return int(self.hyper["d_out"])

    def with_params(self, data) -> "Model":
        if isinstance(data, ParameterVector):
            return replace(self, params=data)
        return replace(self, params=self.params.replace_data(data))


def make_model(kind: str, d_in: int = 1, d_out: int = 1,
               hidden: Sequence[int] = (32, 32), seed: int = 0,
               dropout_rate: float = 0.0) -> Model:
    """Construct an untrained model with a deterministic initialization."""
    if kind == "bernoulli-rate":
        if d_out != 1:
            raise StructuralError("bernoulli-rate is a scalar-output model")
        params = ParameterVector(np.array([0.5]), (("rate", 0, 1),))
        hyper = {"d_in": d_in, "d_out": 1}
    elif kind == "linear-regression":
        params = ParameterVector(np.zeros(d_in * d_out),
                                 (("weights", 0, d_in * d_out),))
        hyper = {"d_in": d_in, "d_out": d_out}
    elif kind == "logistic":
        if d_out != 1:
            raise StructuralError("logistic is a scalar-output model")
        params = ParameterVector(np.zeros(d_in), (("weights", 0, d_in),))
        hyper = {"d_in": d_in, "d_out": 1}
    elif kind == "mlp":
        widths = [d_in, *[int(h) for h in hidden], d_out]
        rng = np.random.default_rng(seed)
        chunks, blocks, cursor = [], [], 0
        for layer, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            w = rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)
            chunks.append(w.ravel())
            blocks.append((f"layer{layer}.W", cursor, n_in * n_out))
            cursor += n_in * n_out
            chunks.append(np.zeros(n_out))
            blocks.append((f"layer{layer}.b", cursor, n_out))
            cursor += n_out
        params = ParameterVector(np.concatenate(chunks), tuple(blocks))
        hyper = {"d_in": d_in, "d_out": d_out, "widths": widths,
                 "dropout_rate": float(dropout_rate), "init_seed": int(seed)}
    else:
        raise StructuralError(f"unknown model kind {kind!r}")
    return Model(kind=kind, params=params, hyper=hyper)


def _mlp_layers(model: Model) -> list[tuple[np.ndarray, np.ndarray]]:
    widths = model.hyper["widths"]
    theta = model.params.data
    layers, cursor = [], 0
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        w = theta[cursor:cursor + n_in * n_out].reshape(n_in, n_out)
        cursor += n_in * n_out
        b = theta[cursor:cursor + n_out]
        cursor += n_out
        layers.append((w, b))
    return layers


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    es = np.exp(s[~pos])
    out[~pos] = es / (1.0 + es)
    return out


def predict(model: Model, x, rng: np.random.Generator | None = None,
            dropout_rate: float | None = None) -> np.ndarray:
    """Model outputs for x of shape (d_in,) or (n, d_in).

    If rng is given and the effective dropout rate is positive, hidden
    activations of the mlp are masked with fresh inverted-dropout samples
    (the post-hoc insertion used by the dropout baseline).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != model.d_in:
        raise StructuralError(f"input has {xb.shape[1]} features, expected {model.d_in}")
    if model.kind == "bernoulli-rate":
        out = np.full((xb.shape[0], 1), model.params.data[0])
    elif model.kind == "linear-regression":
        w = model.params.data.reshape(model.d_in, model.d_out)
        out = xb @ w
    elif model.kind == "logistic":
        out = _sigmoid(xb @ model.params.data)[:, None]
    else:
        rate = model.hyper.get("dropout_rate", 0.0) if dropout_rate is None else dropout_rate
        h = xb
        layers = _mlp_layers(model)
        for w, b in layers[:-1]:
            h = np.tanh(h @ w + b)
            if rng is not None and rate > 0.0:
                mask = (rng.random(h.shape) >= rate).astype(np.float64)
                h = h * mask / (1.0 - rate)
        w, b = layers[-1]
        out = h @ w + b
    return out[0] if single else out


# ---------------------------------------------------------------------------
# log-likelihoods and their gradients (closed-form / batched numpy)
# ---------------------------------------------------------------------------

def loglik(model: Model, x, y) -> np.ndarray:
    """Per-example log-likelihoods log f_theta(x, y); shape (n,)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if model.kind == "bernoulli-rate":
        t = model.params.data[0]
        return (y[:, 0] * math.log(t) + (1.0 - y[:, 0]) * math.log(1.0 - t))
    if model.kind == "logistic":
        s = x @ model.params.data
        # log sigma(s) = -log(1+e^-s), computed stably via logaddexp
        return -(np.logaddexp(0.0, -s) * y[:, 0] + np.logaddexp(0.0, s) * (1.0 - y[:, 0]))
    pred = predict(model, x)
    resid = y - pred
    return -0.5 * np.einsum("nj,nj->n", resid, resid) - model.d_out * _HALF_LOG_2PI


def _mlp_forward_cache(model: Model, xb: np.ndarray):
    """Forward pass keeping per-layer inputs; no dropout (training path)."""
    layers = _mlp_layers(model)
    h_ins = [xb]
    h = xb
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        h_ins.append(h)
    w, b = layers[-1]
    out = h @ w + b
    return out, h_ins, layers


def mlp_vjp(model: Model, h_ins: list[np.ndarray], layers, gout: np.ndarray,
            per_example: bool = False):
    """Vector-Jacobian products of the mlp output.

    gout has shape (n, d_out). Returns (gparams, ginput) where gparams is the
    summed gradient (d,) or the per-example matrix (n, d) when per_example is
    set, and ginput is (n, d_in).
    """
    n = gout.shape[0]
    g = gout
    if per_example:
        pieces = []
    else:
        gparams = np.zeros(model.params.dim)
    cursor_ranges = []
    cursor = 0
    for w, b in layers:
        cursor_ranges.append((cursor, cursor + w.size, cursor + w.size + b.size))
        cursor = cursor_ranges[-1][2]
    for layer in range(len(layers) - 1, -1, -1):
        w, _b = layers[layer]
        h_in = h_ins[layer]
        if per_example:
            gw = np.einsum("ni,nj->nij", h_in, g).reshape(n, -1)
            gb = g
            pieces.append((layer, gw, gb))
        else:
            s0, s1, s2 = cursor_ranges[layer]
            gparams[s0:s1] = np.einsum("ni,nj->ij", h_in, g).ravel()
            gparams[s1:s2] = np.einsum("nj->j", g)
        g = g @ w.T
        if layer > 0:
            g = g * (1.0 - h_in * h_in)
    if per_example:
        out = np.zeros((n, model.params.dim))
        for layer, gw, gb in pieces:
            s0, s1, s2 = cursor_ranges[layer]
            out[:, s0:s1] = gw
            out[:, s1:s2] = gb
        return out, g
    return gparams, g


def loglik_grad(model: Model, x, y) -> np.ndarray:
    """Gradient of a single example's log-likelihood wrt the parameters."""
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if x.ndim != 1:
        raise StructuralError("loglik_grad takes a single example; "
                              "use loglik_grad_batch for batches")
    return loglik_grad_batch(model, x[None, :], y[None, :])[0]


def loglik_grad_batch(model: Model, X, Y) -> np.ndarray:
    """Per-example log-likelihood gradients, shape (n, d)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = X.shape[0]
    if model.kind == "bernoulli-rate":
        t = model.params.data[0]
        return (Y[:, 0] / t - (1.0 - Y[:, 0]) / (1.0 - t))[:, None]
    if model.kind == "linear-regression":
        w = model.params.data.reshape(model.d_in, model.d_out)
        resid = Y - X @ w
        return np.einsum("ni,nj->nij", X, resid).reshape(n, -1)
    if model.kind == "logistic":
        p = _sigmoid(X @ model.params.data)
        return (Y[:, 0] - p)[:, None] * X
    out, h_ins, layers = _mlp_forward_cache(model, X)
    gout = Y - out  # d loglik / d out for the unit-variance Gaussian
    gparams, _ = mlp_vjp(model, h_ins, layers, gout, per_example=True)
    return gparams


def mean_loglik_grad(model: Model, X, Y, weights: np.ndarray | None = None) -> np.ndarray:
    """Weighted mean of per-example log-likelihood gradients (fast path)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if weights is None:
        weights = np.ones(X.shape[0])
    wsum = float(np.einsum("n->", weights))
    if wsum <= 0.0:
        raise StructuralError("example weights sum to zero")
    if model.kind == "mlp":
        out, h_ins, layers = _mlp_forward_cache(model, X)
        gout = (Y - out) * weights[:, None]
        gparams, _ = mlp_vjp(model, h_ins, layers, gout, per_example=False)
        return gparams / wsum
    grads = loglik_grad_batch(model, X, Y)
    return np.einsum("n,nd->d", weights, grads) / wsum


# ---------------------------------------------------------------------------
# tape recordings
# ---------------------------------------------------------------------------

def record_predict(model: Model, tape: Tape, theta: Sequence[Var], x) -> list[Var]:
    """Record the model's forward pass on a tape; returns d_out variables."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != model.d_in:
        raise StructuralError(f"expected a single input of length {model.d_in}")
    if len(theta) != model.params.dim:
        raise StructuralError("theta variable list does not match the parameter count")
    if model.kind == "bernoulli-rate":
        return [theta[0]]
    if model.kind == "linear-regression":
        d_in, d_out = model.d_in, model.d_out
        outs = []
        for j in range(d_out):
            acc = theta[j] * float(x[0])
            for i in range(1, d_in):
                acc = acc + theta[i * d_out + j] * float(x[i])
            outs.append(acc)
        return outs
    if model.kind == "logistic":
        acc = theta[0] * float(x[0])
        for i in range(1, model.d_in):
            acc = acc + theta[i] * float(x[i])
        one = tape.const(1.0)
        return [one / (one + ad.exp(-acc))]
    widths = model.hyper["widths"]
    h: list = [tape.const(float(v)) for v in x]
    cursor = 0
    n_layers = len(widths) - 1
    for layer in range(n_layers):
        n_in, n_out = widths[layer], widths[layer + 1]
        w_base, b_base = cursor, cursor + n_in * n_out
        nxt = []
        for j in range(n_out):
            acc = theta[b_base + j]
            for i in range(n_in):
                acc = acc + theta[w_base + i * n_out + j] * h[i]
            nxt.append(ad.tanh(acc) if layer < n_layers - 1 else acc)
        h = nxt
        cursor = b_base + n_out
    return h


def record_nll(model: Model, tape: Tape, theta: Sequence[Var], x, y) -> Var:
    """Record one example's negative log-likelihood on a tape."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if model.kind == "bernoulli-rate":
        t = theta[0]
        yv = float(y[0])
        one = tape.const(1.0)
        return -(yv * ad.log(t) + (1.0 - yv) * ad.log(one - t))
    if model.kind == "logistic":
        p = record_predict(model, tape, theta, x)[0]
        yv = float(y[0])
        one = tape.const(1.0)
        return -(yv * ad.log(p) + (1.0 - yv) * ad.log(one - p))
    preds = record_predict(model, tape, theta, x)
    acc = tape.const(float(model.d_out) * _HALF_LOG_2PI)
    for j, pj in enumerate(preds):
        diff = pj - float(y[j])
        acc = acc + 0.5 * (diff * diff)
    return acc


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Optimizer settings. Defaults resolve per model kind inside train()."""

    steps: int = 2000
    learning_rate: float | None = None
    batch: int | None = None
    seed: int = 0
    example_weights: np.ndarray | None = None
    grad_tol: float | None = None
    polish_steps: int | None = None


def _objective(model: Model, data: Dataset, weights: np.ndarray, wsum: float,
               theta: np.ndarray) -> float:
    """Weighted mean negative log-likelihood; +inf outside the domain."""
    if model.kind == "bernoulli-rate" and not (0.0 < theta[0] < 1.0):
        return math.inf
    if not np.all(np.isfinite(theta)):
        return math.inf
    m = model.with_params(theta)
    with np.errstate(over="ignore", invalid="ignore"):
        ll = loglik(m, data.inputs, data.targets)
        value = float(-np.einsum("n,n->", weights, ll) / wsum)
    return value if math.isfinite(value) else math.inf


def _full_batch_gd(model: Model, data: Dataset, weights: np.ndarray,
                   theta: np.ndarray, steps: int, grad_tol: float,
                   lr0: float, step_offset: int = 0):
    """Backtracking gradient descent on the weighted mean NLL. Deterministic.

    Steps are accepted on an Armijo decrease while the loss can resolve one;
    once improvements fall below float64 loss resolution, acceptance switches
    to a strict gradient-norm decrease, which certifies progress all the way
    down to machine-precision optima on convex problems.
    """
    wsum = float(np.einsum("n->", weights))

    def grad_at(th: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore", invalid="ignore"):
            return -mean_loglik_grad(model.with_params(th), data.inputs,
                                     data.targets, weights)

    lr = lr0
    grad_norm = math.inf
    loss = _objective(model, data, weights, wsum, theta)
    steps_run = 0
    g = None
    for step in range(steps):
        if g is None:
            g = grad_at(theta)
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient during training",
                                step=step_offset + step)
        grad_norm = float(np.linalg.norm(g))
        if grad_norm <= grad_tol:
            break
        accepted = False
        step_lr = lr
        for _ in range(60):
            required = loss - 1e-4 * step_lr * grad_norm ** 2
            if required >= loss:
                break  # the margin no longer resolves in float64
            trial = theta - step_lr * g
            trial_loss = _objective(model, data, weights, wsum, trial)
            if math.isfinite(trial_loss) and trial_loss <= required:
                theta, loss = trial, trial_loss
                lr = min(step_lr * 2.0, 1e6)
                accepted, g = True, None
                break
            step_lr *= 0.5
        if not accepted:
            # loss differences are below float resolution; certify by ||grad||
            step_lr = lr
            for _ in range(60):
                trial = theta - step_lr * g
                trial_loss = _objective(model, data, weights, wsum, trial)
                if math.isfinite(trial_loss):
                    trial_g = grad_at(trial)
                    if (np.all(np.isfinite(trial_g))
                            and float(np.linalg.norm(trial_g)) < grad_norm):
                        theta, loss, g = trial, trial_loss, trial_g
                        lr = min(step_lr * 2.0, 1e6)
                        accepted = True
                        break
                step_lr *= 0.5
        steps_run = step + 1
        if not accepted:
            break  # no step size makes progress: at the achievable optimum
    return theta, grad_norm, loss, steps_run


def train(model: Model, data: Dataset, cfg: TrainConfig | None = None) -> Model:
    """Fit the model; returns a new Model carrying convergence diagnostics.

    Convex kinds run full-batch gradient descent with a backtracking step
    size. The mlp runs seeded mini-batch SGD followed by a full-batch polish
    phase; convergence is declared by the mean-gradient-norm threshold, never
    by step count alone. Per-example weights reweight the objective (a zero
    weight removes that point).
    """
    cfg = cfg or TrainConfig()
    if data.d_in != model.d_in or data.d_out != model.d_out:
        raise StructuralError(
            f"dataset is ({data.d_in} -> {data.d_out}) but the model is "
            f"({model.d_in} -> {model.d_out})")
    weights = (np.ones(data.n) if cfg.example_weights is None
               else np.asarray(cfg.example_weights, dtype=np.float64))
    if weights.shape != (data.n,):
        raise StructuralError("example_weights must have one entry per example")
    if np.any(weights < 0.0):
        raise StructuralError("example weights must be nonnegative")
    if float(weights.sum()) <= 0.0:
        raise StructuralError("example weights sum to zero")

    theta = model.params.data.copy()
    if model.kind != "mlp":
        grad_tol = 1e-10 if cfg.grad_tol is None else cfg.grad_tol
        lr0 = 1.0 if cfg.learning_rate is None else cfg.learning_rate
        theta, grad_norm, loss, steps_run = _full_batch_gd(
            model, data, weights, theta, cfg.steps, grad_tol, lr0)
        diagnostics = {"final_grad_norm": grad_norm, "final_loss": loss,
                       "steps": steps_run, "converged": grad_norm <= max(grad_tol, 1e-6)}
        return replace(model, params=model.params.replace_data(theta),
                       diagnostics=diagnostics)

    # mlp: mini-batch SGD then full-batch polish
    lr = 0.05 if cfg.learning_rate is None else cfg.learning_rate
    batch = min(32 if cfg.batch is None else cfg.batch, data.n)
    grad_tol = 1e-3 if cfg.grad_tol is None else cfg.grad_tol
    rng = np.random.default_rng(cfg.seed)
    X, Y = data.inputs, data.targets
    step = 0
    while step < cfg.steps:
        order = rng.permutation(data.n)
        for start in range(0, data.n, batch):
            if step >= cfg.steps:
                break
            idx = order[start:start + batch]
            w_batch = weights[idx]
            if float(w_batch.sum()) > 0.0:
                with np.errstate(over="ignore", invalid="ignore"):
                    g = -mean_loglik_grad(model.with_params(theta), X[idx],
                                          Y[idx], w_batch)
                if not np.all(np.isfinite(g)):
                    raise TrainingError("training diverged (non-finite gradient)",
                                        step=step)
                theta = theta - lr * g
                if not np.all(np.isfinite(theta)):
                    raise TrainingError("training diverged (non-finite parameters)",
                                        step=step)
            step += 1
    polish = cfg.steps if cfg.polish_steps is None else cfg.polish_steps
    theta, grad_norm, loss, polish_run = _full_batch_gd(
        model, data, weights, theta, polish, grad_tol, lr, step_offset=step)
    diagnostics = {"final_grad_norm": grad_norm, "final_loss": loss,
                   "steps": step + polish_run, "converged": grad_norm <= grad_tol}
    return replace(model, params=model.params.replace_data(theta),
                   diagnostics=diagnostics)
