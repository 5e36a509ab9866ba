"""Scalar quantities of interest sharing parameters with a trained model.

Explicit kinds (power, set-product, rollout-functional) differentiate through
the computation itself; implicit kinds (fixed points, eigenvalues) use the
implicit function theorem and eigenvector sensitivity formulas instead of
unrolling a solver.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .autodiff import ParameterVector, Tape, Var
from .delta_variance import GradientDelta
from .exceptions import (
    ConfigError,
    ConvergenceError,
    DegenerateEigenvalueError,
    NumericalError,
    StructuralError,
)
from .models import Model, _mlp_forward_cache, mlp_vjp, predict, record_predict

ROLLOUT_FUNCTIONALS = ("power", "mean", "max")
EIGEN_GAP_TOL = 1e-8
EIGEN_SIZE_CAP = 64


# ---------------------------------------------------------------------------
# problem types for the implicit kinds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FixedPointProblem:
    """A parameterized iteration w <- step(theta, w) expected to converge.

    `step` must accept its arguments either as floats or as tape variables
    (use the autodiff module functions for nonlinearities), so the same
    callable drives both the numeric solve and the Jacobian extraction.
    `component` selects which coordinate of the fixed point is the scalar
    quantity.
    """

    step: Callable
    params: ParameterVector
    w0: np.ndarray
    tol: float = 1e-12
    max_iters: int = 100_000
    component: int = 0

    def __post_init__(self):
        w0 = np.atleast_1d(np.asarray(self.w0, dtype=np.float64))
        if w0.ndim != 1 or not np.all(np.isfinite(w0)):
            raise StructuralError("w0 must be a finite vector")
        if self.tol <= 0.0 or self.max_iters < 1:
            raise StructuralError("tolerance and max_iters must be positive")
        if not 0 <= self.component < w0.size:
            raise StructuralError("component index outside the state vector")
        object.__setattr__(self, "w0", w0)


@dataclass(frozen=True)
class EigenProblem:
    """A chain of point masses between walls, coupled by springs.

    With n masses there are n+1 springs; the system matrix is A = M^-1 K for
    M = diag(masses) and the tridiagonal stiffness matrix K. `index` selects
    an eigenvalue of A in ascending order.
    """

    masses: np.ndarray
    stiffnesses: np.ndarray
    index: int

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=np.float64)
        k = np.asarray(self.stiffnesses, dtype=np.float64)
        if m.ndim != 1 or k.ndim != 1 or k.size != m.size + 1:
            raise StructuralError(
                "a chain of n masses needs exactly n+1 stiffnesses")
        if m.size > EIGEN_SIZE_CAP:
            raise StructuralError(f"chains are capped at {EIGEN_SIZE_CAP} masses")
        if np.any(m <= 0.0) or np.any(k <= 0.0):
            raise StructuralError("masses and stiffnesses must be positive")
        if not 0 <= self.index < m.size:
            raise StructuralError("eigen index outside range")
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "stiffnesses", k)

    @property
    def n(self) -> int:
        return self.masses.size

    def parameter_vector(self) -> ParameterVector:
        data = np.concatenate([self.masses, self.stiffnesses])
        blocks = (("masses", 0, self.n), ("stiffnesses", self.n, self.n + 1))
        return ParameterVector(data, blocks)


# ---------------------------------------------------------------------------
# the QoI container and registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantityOfInterest:
    kind: str
    model: Model | None
    config: Mapping = field(default_factory=dict)

    @property
    def qoi_id(self) -> str:
        """Canonical registry string: kind plus sorted scalar settings."""
        shown = {k: v for k, v in self.config.items()
                 if isinstance(v, (int, float, str))}
        if not shown:
            return self.kind
        parts = ",".join(f"{k}={shown[k]}" for k in sorted(shown))
        return f"{self.kind}:{parts}"


def make_qoi(kind: str, model: Model | None = None, **config) -> QuantityOfInterest:
    """Build and validate a quantity of interest."""
    if kind == "power":
        if model is None or model.d_out != 1:
            raise StructuralError("power quantities need a scalar-output model")
        exponent = float(config.get("exponent", 1.0))
        if not math.isfinite(exponent):
            raise StructuralError("exponent must be finite")
        return QuantityOfInterest(kind, model, {"exponent": exponent})
    if kind == "set-product":
        if model is None or model.d_out != 1:
            raise StructuralError("set products need a scalar-output model")
        return QuantityOfInterest(kind, model, {})
    if kind == "rollout":
        if model is None or model.kind != "mlp" or model.d_in != model.d_out:
            raise StructuralError(
                "rollouts need an mlp step model with matching input and "
                "output width")
        functional = config.get("functional", "power")
        if functional not in ROLLOUT_FUNCTIONALS:
            raise StructuralError(f"unknown rollout functional {functional!r}")
        horizon = int(config.get("horizon", 1))
        if horizon < 1:
            raise StructuralError("horizon must be at least 1")
        cfg = {"functional": functional, "horizon": horizon}
        if functional in ("power", "max"):
            component = int(config.get("component", 0))
            if not 0 <= component < model.d_in:
                raise StructuralError("component outside the state vector")
            cfg["component"] = component
        if functional == "power":
            cfg["exponent"] = float(config.get("exponent", 1.0))
        if functional == "max":
            window = int(config.get("window", horizon))
            if not 1 <= window <= horizon:
                raise StructuralError("window must lie in 1..horizon")
            cfg["window"] = window
        return QuantityOfInterest(kind, model, cfg)
    if kind == "fixed-point":
        problem = config.get("problem")
        if not isinstance(problem, FixedPointProblem):
            raise StructuralError("fixed-point quantities need a problem=...")
        return QuantityOfInterest(kind, model, {"problem": problem})
    if kind == "eigenvalue":
        problem = config.get("problem")
        if not isinstance(problem, EigenProblem):
            raise StructuralError("eigenvalue quantities need a problem=...")
        return QuantityOfInterest(kind, model, {"problem": problem})
    raise StructuralError(f"unknown quantity kind {kind!r}")


def parse_qoi(text: str, model: Model | None = None) -> QuantityOfInterest:
    """Parse a registry id like 'rollout:functional=power,horizon=2'."""
    text = text.strip()
    if not text:
        raise ConfigError("empty quantity id")
    kind, _, rest = text.partition(":")
    config = {}
    if rest:
        for item in rest.split(","):
            key, sep, value = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"malformed quantity setting {item!r}")
            config[key.strip()] = _parse_scalar(value.strip())
    try:
        return make_qoi(kind.strip(), model, **config)
    except (StructuralError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid quantity id {text!r}: {exc}") from exc


def _parse_scalar(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


# ---------------------------------------------------------------------------
# explicit kinds: values
# ---------------------------------------------------------------------------

def _as_input_matrix(model: Model, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0:
        z = z[None]
    if z.ndim == 1:
        z = z[None, :]
    if z.shape[1] != model.d_in:
        raise StructuralError(f"inputs must have width {model.d_in}")
    return z


def _rollout_states(model: Model, z_batch: np.ndarray, horizon: int,
                    keep_caches: bool):
    states = [z_batch]
    caches = []
    x = z_batch
    for _ in range(horizon):
        out, h_ins, layers = _mlp_forward_cache(model, x)
        if keep_caches:
            caches.append((h_ins, layers))
        states.append(out)
        x = out
    return states, caches


def _rollout_head(u: QuantityOfInterest, states):
    """Functional value and its gradient injections d value / d state_t."""
    cfg = u.config
    horizon = cfg["horizon"]
    batch = states[0].shape[0]
    dim = states[0].shape[1]
    inject = [np.zeros((batch, dim)) for _ in range(horizon + 1)]
    if cfg["functional"] == "power":
        c, p = cfg["component"], cfg["exponent"]
        base = states[horizon][:, c]
        values = base ** p
        inject[horizon][:, c] = p * base ** (p - 1.0)
    elif cfg["functional"] == "mean":
        values = states[horizon].mean(axis=1)
        inject[horizon][:, :] = 1.0 / dim
    else:  # max over the trailing window
        c, w = cfg["component"], cfg["window"]
        t0 = horizon - w + 1
        window_vals = np.stack([states[t][:, c] for t in range(t0, horizon + 1)])
        best = np.argmax(window_vals, axis=0)  # first maximum on ties
        values = window_vals[best, np.arange(batch)]
        for row in range(batch):
            inject[t0 + best[row]][row, c] = 1.0
    return values, inject


def _rollout_values_and_deltas(u: QuantityOfInterest, z_batch: np.ndarray):
    model = u.model
    horizon = u.config["horizon"]
    states, caches = _rollout_states(model, z_batch, horizon, keep_caches=True)
    values, inject = _rollout_head(u, states)
    g = inject[horizon]
    deltas = np.zeros((z_batch.shape[0], model.params.dim))
    for t in range(horizon, 0, -1):
        h_ins, layers = caches[t - 1]
        gp, gin = mlp_vjp(model, h_ins, layers, g, per_example=True)
        deltas += gp
        g = gin + inject[t - 1]
    return values, deltas


def qoi_value(u: QuantityOfInterest, z=None) -> float:
    """The scalar value at the trained parameters (no gradient work)."""
    if u.kind == "power":
        x = _as_input_matrix(u.model, z)[0]
        return float(predict(u.model, x)[0] ** u.config["exponent"])
    if u.kind == "set-product":
        xs = _as_input_matrix(u.model, z)
        return float(np.prod(predict(u.model, xs)[:, 0]))
    if u.kind == "rollout":
        zb = _as_input_matrix(u.model, z)
        states, _ = _rollout_states(u.model, zb, u.config["horizon"], False)
        values, _ = _rollout_head(u, states)
        return float(values[0])
    if u.kind == "fixed-point":
        problem = u.config["problem"]
        w_star, _ = solve_fixed_point(problem)
        return float(w_star[problem.component])
    if u.kind == "eigenvalue":
        problem = u.config["problem"]
        theta = (problem.parameter_vector().data if z is None
                 else np.asarray(z, dtype=np.float64))
        return float(_eigen_value_batch(problem, theta[None, :])[0])
    raise StructuralError(f"unknown quantity kind {u.kind!r}")


# ---------------------------------------------------------------------------
# explicit kinds: tape gradients
# ---------------------------------------------------------------------------

def _record_mlp_step(model: Model, theta, h):
    """One mlp step on the tape with variable inputs (for rollouts)."""
    widths = model.hyper["widths"]
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


def _record_qoi(u: QuantityOfInterest, tape: Tape, theta, z) -> Var:
    model = u.model
    if u.kind == "power":
        x = _as_input_matrix(model, z)[0]
        out = record_predict(model, tape, theta, x)[0]
        return out ** u.config["exponent"]
    if u.kind == "set-product":
        xs = _as_input_matrix(model, z)
        prod = None
        for x in xs:
            out = record_predict(model, tape, theta, x)[0]
            prod = out if prod is None else prod * out
        return prod
    if u.kind == "rollout":
        x = _as_input_matrix(model, z)[0]
        cfg = u.config
        h = [tape.const(float(v)) for v in x]
        trajectory = []
        for _ in range(cfg["horizon"]):
            h = _record_mlp_step(model, theta, h)
            trajectory.append(h)
        if cfg["functional"] == "power":
            return trajectory[-1][cfg["component"]] ** cfg["exponent"]
        if cfg["functional"] == "mean":
            acc = trajectory[-1][0]
            for v in trajectory[-1][1:]:
                acc = acc + v
            return acc * (1.0 / model.d_in)
        t0 = cfg["horizon"] - cfg["window"]
        best = trajectory[t0][cfg["component"]]
        for step in trajectory[t0 + 1:]:
            best = ad.maximum(best, step[cfg["component"]])
        return best
    raise StructuralError(f"{u.kind} quantities have no explicit tape form")


def qoi_value_and_delta(u: QuantityOfInterest, z=None):
    """Value and parameter gradient at the model's trained parameters.

    Explicit kinds run either a vectorized reverse pass (rollouts) or a tape
    recording; implicit kinds use their dedicated formulas. Returns the value
    and a GradientDelta labeled with the quantity id.
    """
    if u.kind == "rollout":
        zb = _as_input_matrix(u.model, z)
        values, deltas = _rollout_values_and_deltas(u, zb)
        return float(values[0]), GradientDelta(deltas[0], source=u.qoi_id,
                                               input_id=_input_label(z))
    if u.kind in ("power", "set-product"):
        tape = Tape()
        theta = tape.inputs(u.model.params.data)
        root = _record_qoi(u, tape, theta, z)
        grad = tape.grad(root, theta)
        return root.value, GradientDelta(grad, source=u.qoi_id,
                                         input_id=_input_label(z))
    if u.kind == "fixed-point":
        problem = u.config["problem"]
        w_star, _ = solve_fixed_point(problem)
        delta = implicit_delta(problem, w_star=w_star)
        return float(w_star[problem.component]), delta
    if u.kind == "eigenvalue":
        problem = u.config["problem"]
        theta = z if z is not None else None
        return eigenvalue_delta(problem, theta)
    raise StructuralError(f"unknown quantity kind {u.kind!r}")


def _input_label(z) -> str:
    if z is None:
        return ""
    arr = np.asarray(z, dtype=np.float64).ravel()
    if arr.size == 1:
        return repr(float(arr[0]))
    return ",".join(repr(float(v)) for v in arr[:4])


def qoi_tape_delta(u: QuantityOfInterest, z=None) -> np.ndarray:
    """Gradient of an explicit quantity via the scalar tape (reference path)."""
    tape = Tape()
    theta = tape.inputs(u.model.params.data)
    root = _record_qoi(u, tape, theta, z)
    return tape.grad(root, theta)


def values_and_deltas(u: QuantityOfInterest, zs):
    """Batched values and gradients, one row per input.

    Rollouts run a single vectorized forward/backward over the whole batch;
    other kinds fall back to a per-input loop.
    """
    if u.kind == "rollout":
        zb = _as_input_matrix(u.model, np.atleast_2d(np.asarray(zs)))
        return _rollout_values_and_deltas(u, zb)
    values = []
    deltas = []
    for z in zs:
        value, delta = qoi_value_and_delta(u, z)
        values.append(value)
        deltas.append(delta.vector)
    return np.asarray(values), np.asarray(deltas)


def value_batch_params(u: QuantityOfInterest, thetas: np.ndarray,
                       z=None) -> np.ndarray:
    """Quantity values at many parameter points (posterior sampling support).

    Vectorized for the closed-form model kinds and for eigenvalue chains;
    anything else re-binds the model per draw.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if u.kind == "eigenvalue":
        return _eigen_value_batch(u.config["problem"], thetas)
    if u.kind == "fixed-point":
        problem = u.config["problem"]
        values = np.empty(thetas.shape[0])
        for i, theta in enumerate(thetas):
            if theta.size != problem.params.dim:
                raise StructuralError("parameter rows do not match the "
                                      "fixed-point problem")
            rebound = dataclasses.replace(
                problem, params=ParameterVector(theta, problem.params.blocks))
            values[i] = qoi_value(
                QuantityOfInterest(u.kind, None, {"problem": rebound}), z)
        return values
    if u.kind in ("power", "set-product") and u.model.kind in (
            "bernoulli-rate", "linear-regression"):
        return _closed_form_value_batch(u, thetas, z)
    values = np.empty(thetas.shape[0])
    for i, theta in enumerate(thetas):
        bound = QuantityOfInterest(
            u.kind, None if u.model is None else u.model.with_params(theta),
            u.config)
        values[i] = qoi_value(bound, z)
    return values


def _closed_form_value_batch(u: QuantityOfInterest, thetas: np.ndarray,
                             z) -> np.ndarray:
    """Vectorized power / set-product values for the linear model kinds."""
    model = u.model
    if model.kind == "bernoulli-rate":
        outs = np.broadcast_to(thetas[:, 0][:, None],
                               (thetas.shape[0], _as_input_matrix(model, z).shape[0]))
    else:
        xs = _as_input_matrix(model, z)
        outs = thetas @ xs.T  # (draws, inputs)
    if u.kind == "power":
        return outs[:, 0] ** u.config["exponent"]
    return np.prod(outs, axis=1)


# ---------------------------------------------------------------------------
# fixed points through the implicit function theorem
# ---------------------------------------------------------------------------

def solve_fixed_point(problem: FixedPointProblem):
    """Iterate the map to convergence; returns (w_star, iterations)."""
    theta = problem.params.data
    w = problem.w0.copy()
    for iteration in range(problem.max_iters):
        w_next = np.atleast_1d(np.asarray(problem.step(theta, w),
                                          dtype=np.float64))
        if w_next.shape != w.shape:
            raise StructuralError("step changed the state dimension")
        if not np.all(np.isfinite(w_next)):
            raise NumericalError("fixed-point iteration diverged")
        residual = float(np.max(np.abs(w_next - w)))
        w = w_next
        if residual <= problem.tol:
            return w, iteration + 1
    raise ConvergenceError(
        f"no fixed point within {problem.max_iters} iterations "
        f"(last residual {residual:.3e})")


def _step_jacobians(problem: FixedPointProblem, w_star: np.ndarray):
    """J_w and J_theta of the step map at (theta, w_star), via the tape."""
    theta_data = problem.params.data
    dim_w = w_star.size
    dim_t = theta_data.size
    tape = Tape()
    both = tape.inputs(np.concatenate([theta_data, w_star]))
    theta_vars = both[:dim_t]
    w_vars = both[dim_t:]
    out = problem.step(theta_vars, w_vars)
    out = list(np.atleast_1d(out))
    if len(out) != dim_w:
        raise StructuralError("step changed the state dimension")
    j_w = np.empty((dim_w, dim_w))
    j_t = np.empty((dim_w, dim_t))
    for row, component in enumerate(out):
        if isinstance(component, Var):
            g = tape.grad(component, both)
        else:  # a constant component has no dependence at all
            g = np.zeros(dim_t + dim_w)
        j_t[row] = g[:dim_t]
        j_w[row] = g[dim_t:]
    return j_w, j_t


def implicit_delta(problem: FixedPointProblem, w_star: np.ndarray | None = None,
                   ) -> GradientDelta:
    """d w*[component] / d theta by differentiating w* = step(theta, w*)."""
    if w_star is None:
        w_star, _ = solve_fixed_point(problem)
    j_w, j_t = _step_jacobians(problem, w_star)
    lhs = np.eye(w_star.size) - j_w
    try:
        sensitivity = np.linalg.solve(lhs, j_t)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "I - J_w is singular at the fixed point; the sensitivity is "
            "not defined there") from exc
    return GradientDelta(sensitivity[problem.component],
                         source="fixed-point",
                         input_id=f"component={problem.component}")


# ---------------------------------------------------------------------------
# eigenvalues of the mass chain
# ---------------------------------------------------------------------------

def chain_system(masses: np.ndarray, stiffnesses: np.ndarray):
    """M, K and A = M^-1 K for the wall-to-wall spring chain."""
    n = masses.size
    k = np.zeros((n, n))
    for j in range(n + 1):
        s = np.zeros(n)
        if j > 0:
            s[j - 1] = -1.0
        if j < n:
            s[j] = 1.0
        k += stiffnesses[j] * np.outer(s, s)
    m = np.diag(masses)
    a = k / masses[:, None]
    return m, k, a


def chain_parameter_jacobians(masses: np.ndarray, stiffnesses: np.ndarray):
    """dA/d(theta_j) for theta = (masses, stiffnesses), as a list."""
    n = masses.size
    _, k, _ = chain_system(masses, stiffnesses)
    jacobians = []
    for j in range(n):
        da = np.zeros((n, n))
        da[j, :] = -k[j, :] / masses[j] ** 2
        jacobians.append(da)
    for j in range(n + 1):
        s = np.zeros(n)
        if j > 0:
            s[j - 1] = -1.0
        if j < n:
            s[j] = 1.0
        jacobians.append(np.outer(s, s) / masses[:, None])
    return jacobians


def eigen_gradient(a: np.ndarray, das, index: int,
                   gap_tol: float = EIGEN_GAP_TOL):
    """Eigenvalue and its gradient for a parameterized matrix A(theta).

    `das` is a sequence of dA/d(theta_j). Uses left and right eigenvectors,
    so A need not be symmetric. Eigenvalues are sorted ascending by real
    part; complex pairs and near-degenerate values are refused because the
    derivative formula breaks down there.
    """
    values, left, right = scipy.linalg.eig(a, left=True, right=True)
    order = np.argsort(values.real, kind="stable")
    values = values[order]
    left = left[:, order]
    right = right[:, order]
    if np.max(np.abs(values.imag)) > gap_tol * max(1.0, np.max(np.abs(values.real))):
        raise DegenerateEigenvalueError(
            "complex eigenvalues; the chain matrix should be similar to a "
            "symmetric one, check the inputs")
    lam = values.real
    gaps = []
    if index > 0:
        gaps.append(lam[index] - lam[index - 1])
    if index < lam.size - 1:
        gaps.append(lam[index + 1] - lam[index])
    gap = min(gaps) if gaps else np.inf
    if gap < gap_tol:
        raise DegenerateEigenvalueError(
            f"eigenvalue {index} is within {gap:.3e} of its neighbor; "
            "sensitivities are undefined at a crossing")
    l_vec = left[:, index]
    r_vec = right[:, index]
    denom = l_vec.conj() @ r_vec
    if abs(denom) < 1e-14:
        raise DegenerateEigenvalueError(
            "left and right eigenvectors are numerically orthogonal")
    grad = np.array(
        [ (l_vec.conj() @ (da @ r_vec)) / denom for da in das ]).real
    return float(lam[index]), grad


def eigenvalue_delta(problem: EigenProblem, theta: np.ndarray | None = None):
    """Selected chain eigenvalue and its gradient in (masses, stiffnesses)."""
    if theta is None:
        masses, stiffnesses = problem.masses, problem.stiffnesses
    else:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != 2 * problem.n + 1:
            raise StructuralError(
                "parameter vector must hold n masses then n+1 stiffnesses")
        masses, stiffnesses = theta[:problem.n], theta[problem.n:]
        if np.any(masses <= 0.0) or np.any(stiffnesses <= 0.0):
            raise StructuralError("masses and stiffnesses must be positive")
    _, _, a = chain_system(masses, stiffnesses)
    das = chain_parameter_jacobians(masses, stiffnesses)
    lam, grad = eigen_gradient(a, das, problem.index)
    delta = GradientDelta(grad, source="eigenvalue",
                          input_id=f"index={problem.index}")
    return lam, delta


def _eigen_value_batch(problem: EigenProblem, thetas: np.ndarray) -> np.ndarray:
    """Selected eigenvalue at many (masses, stiffnesses) points, vectorized."""
    n = problem.n
    if thetas.shape[1] != 2 * n + 1:
        raise StructuralError(
            "parameter vectors must hold n masses then n+1 stiffnesses")
    masses = thetas[:, :n]
    stiff = thetas[:, n:]
    draws = thetas.shape[0]
    k = np.zeros((draws, n, n))
    idx = np.arange(n)
    k[:, idx, idx] = stiff[:, :-1] + stiff[:, 1:]
    if n > 1:
        k[:, idx[:-1], idx[1:]] = -stiff[:, 1:-1]
        k[:, idx[1:], idx[:-1]] = -stiff[:, 1:-1]
    a = k / masses[:, :, None]
    values = np.linalg.eigvals(a)
    values = np.sort(values.real, axis=1)
    return values[:, problem.index]
