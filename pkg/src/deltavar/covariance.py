"""Parameter-covariance surrogates: Fisher variants, Hessians, and the sandwich.

Scaling convention, fixed once and used everywhere: the empirical Fisher F is
the per-datum mean of log-likelihood gradient outer products, the Hessian H is
taken of the total (summed) negative log-likelihood, the canonical covariance
is inv(F)/N, the curvature (Laplace) covariance is inv(H), and the sandwich is
N * inv(H) F inv(H).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .autodiff import HESSIAN_DIM_CAP, Tape
from .exceptions import NumericalError, ResourceError, StructuralError
from .models import Dataset, Model, loglik_grad_batch, record_nll
from .util import stable_json_dumps

KINDS = ("fisher-full", "fisher-diag", "fisher-ema-diag", "hessian",
         "sandwich", "learned")

# Examples are accumulated in fixed-size chunks so the floating-point
# reduction order never depends on thread settings or dataset size.
_CHUNK = 256


@dataclass(frozen=True)
class CovarianceEstimate:
    """A curvature or covariance matrix over model parameters.

    `values` is either a dense (d, d) array or a length-d diagonal. `inverted`
    distinguishes covariance-like estimates (True: the stored values multiply
    directly in a quadratic form) from precision-like ones such as a raw
    Fisher or Hessian (False). `reg` records any ridge term that was added
    before an inversion. Block layout is carried along so per-block operations
    and serialization stay aligned with the model's ParameterVector.
    """

    kind: str
    values: np.ndarray
    n_points: int
    reg: float = 0.0
    inverted: bool = False
    blocks: tuple = ()
    block_scales: dict | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructuralError(f"unknown covariance kind {self.kind!r}")
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim == 2 and vals.shape[0] != vals.shape[1]:
            raise StructuralError("full covariance values must be square")
        if vals.ndim not in (1, 2):
            raise StructuralError("covariance values must be a matrix or a diagonal")
        if not np.all(np.isfinite(vals)):
            raise NumericalError("covariance values contain non-finite entries")
        if self.n_points < 1:
            raise StructuralError("n_points must be a positive count")
        if self.reg < 0.0:
            raise StructuralError("regularizer must be nonnegative")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "blocks", tuple(tuple(b) for b in self.blocks))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return self.values.ndim == 1

    def matrix(self) -> np.ndarray:
        """Dense d x d view of the estimate."""
        return np.diag(self.values) if self.is_diagonal else self.values


def _grad_chunks(model: Model, data: Dataset) -> Iterable[np.ndarray]:
    for start in range(0, data.n, _CHUNK):
        stop = min(start + _CHUNK, data.n)
        yield loglik_grad_batch(model, data.inputs[start:stop],
                                data.targets[start:stop])


def empirical_fisher(model: Model, data: Dataset,
                     mode: str = "full") -> CovarianceEstimate:
    """Mean outer product of per-example log-likelihood gradients.

    The diagonal mode accumulates the same products in the same order as the
    full mode, so diag(full) and the diagonal estimate agree bit for bit.
    """
    if mode not in ("full", "diag"):
        raise StructuralError(f"fisher mode must be 'full' or 'diag', got {mode!r}")
    d = model.params.dim
    if mode == "full" and d > HESSIAN_DIM_CAP:
        raise ResourceError(
            f"dense covariance of dimension {d} exceeds the cap of "
            f"{HESSIAN_DIM_CAP}; use a diagonal mode")
    if mode == "full":
        acc = np.zeros((d, d))
        for g in _grad_chunks(model, data):
            acc += np.einsum("ni,nj->ij", g, g)
    else:
        acc = np.zeros(d)
        for g in _grad_chunks(model, data):
            acc += np.einsum("ni,ni->i", g, g)
    return CovarianceEstimate(kind=f"fisher-{mode}", values=acc / data.n,
                              n_points=data.n, blocks=model.params.blocks)


def ema_diag_fisher(model: Model, batches, decay: float = 1e-3,
                    batch_size: int = 32) -> CovarianceEstimate:
    """Exponential moving average of per-batch mean squared gradients.

    `batches` is either a Dataset, split into consecutive batches of
    `batch_size`, or an iterable of Datasets streamed as given. The average
    is seeded with the first batch, so a constant gradient stream is a fixed
    point from the start.
    """
    if not 0.0 < decay < 1.0:
        raise StructuralError(f"decay must lie in (0, 1), got {decay}")
    if isinstance(batches, Dataset):
        data = batches
        if batch_size < 1:
            raise StructuralError("batch_size must be positive")
        batches = (data.subset(range(s, min(s + batch_size, data.n)))
                   for s in range(0, data.n, batch_size))
    v = None
    seen = 0
    for batch in batches:
        g = loglik_grad_batch(model, batch.inputs, batch.targets)
        moment = np.einsum("ni,ni->i", g, g) / batch.n
        v = moment if v is None else (1.0 - decay) * v + decay * moment
        seen += batch.n
    if v is None:
        raise StructuralError("the batch stream is empty")
    return CovarianceEstimate(kind="fisher-ema-diag", values=v, n_points=seen,
                              blocks=model.params.blocks)


def loss_hessian(model: Model, data: Dataset) -> CovarianceEstimate:
    """Hessian of the total (summed) negative log-likelihood at the parameters.

    Recorded on a scalar tape one example at a time and differentiated twice,
    so it works for every model kind; the result is symmetrized to remove
    round-off asymmetry from the two passes.
    """
    tape = Tape()
    theta = tape.inputs(model.params.data)
    total = None
    for i in range(data.n):
        term = record_nll(model, tape, theta, data.inputs[i], data.targets[i])
        total = term if total is None else total + term
    h = tape.hessian(total, theta)
    h = (h + h.T) / 2.0
    return CovarianceEstimate(kind="hessian", values=h, n_points=data.n,
                              blocks=model.params.blocks)


def _solve_spd(matrix: np.ndarray, reg: float, what: str) -> np.ndarray:
    ridged = matrix + reg * np.eye(matrix.shape[0])
    try:
        chol = np.linalg.cholesky(ridged)
    except np.linalg.LinAlgError:
        raise NumericalError(
            f"{what} is not positive definite at reg={reg!r}; "
            "retry with a larger regularizer") from None
    eye = np.eye(matrix.shape[0])
    inv = np.linalg.solve(chol.T, np.linalg.solve(chol, eye))
    return (inv + inv.T) / 2.0


def invert(sigma: CovarianceEstimate, reg: float = 0.0) -> CovarianceEstimate:
    """(M + reg*I)^-1 via Cholesky for full matrices, reciprocal for diagonals.

    The returned estimate flips `inverted` and records the regularizer.
    """
    if reg < 0.0:
        raise StructuralError("regularizer must be nonnegative")
    if sigma.is_diagonal:
        ridged = sigma.values + reg
        if np.any(ridged <= 0.0):
            raise NumericalError(
                f"diagonal has non-positive entries at reg={reg!r}; "
                "retry with a larger regularizer")
        inv = 1.0 / ridged
    else:
        inv = _solve_spd(sigma.values, reg, f"{sigma.kind} matrix")
    return replace(sigma, values=inv, reg=reg, inverted=not sigma.inverted)


def sandwich(model: Model, data: Dataset, reg: float = 0.0) -> CovarianceEstimate:
    """The misspecification-robust covariance N * inv(H) F inv(H).

    H is the total-loss Hessian and F the per-datum-mean empirical Fisher;
    `reg` ridges H before the inversions.
    """
    h = loss_hessian(model, data)
    f = empirical_fisher(model, data, mode="full")
    h_inv = _solve_spd(h.values, reg, "loss hessian")
    values = data.n * (h_inv @ f.values @ h_inv)
    values = (values + values.T) / 2.0
    return CovarianceEstimate(kind="sandwich", values=values, n_points=data.n,
                              reg=reg, inverted=True, blocks=model.params.blocks)


def canonical_sigma(model: Model, data: Dataset, mode: str = "full",
                    reg: float = 0.0) -> CovarianceEstimate:
    """The default posterior surrogate inv(F + reg*I) / N."""
    fisher = empirical_fisher(model, data, mode=mode)
    inv = invert(fisher, reg=reg)
    return replace(inv, values=inv.values / data.n)


def laplace_sigma(model: Model, data: Dataset, reg: float = 0.0) -> CovarianceEstimate:
    """The curvature covariance inv(H + reg*I) of the total loss."""
    return invert(loss_hessian(model, data), reg=reg)


def apply_block_scales(sigma: CovarianceEstimate,
                       scales: dict) -> CovarianceEstimate:
    """Bake positive per-block factors into a covariance.

    Diagonal estimates multiply each block's entries by its factor. Full
    matrices are rescaled symmetrically (sqrt factors on rows and columns),
    which reduces to plain per-block multiplication on block-diagonal input.
    Only covariance-like estimates (inverted=True, or a learned one) accept
    scales; scaling a raw Fisher or Hessian would invert the intended effect.
    """
    if not sigma.inverted and sigma.kind != "learned":
        raise StructuralError(
            "block scales apply to a covariance; invert the estimate first")
    if not sigma.blocks:
        raise StructuralError("the estimate carries no block layout")
    names = [b[0] for b in sigma.blocks]
    unknown = set(scales) - set(names)
    if unknown:
        raise StructuralError(f"scales name unknown blocks: {sorted(unknown)}")
    factors = np.ones(sigma.dim)
    for name, start, length in sigma.blocks:
        c = float(scales.get(name, 1.0))
        if not (np.isfinite(c) and c > 0.0):
            raise StructuralError(f"scale for block {name!r} must be positive")
        factors[start:start + length] = c
    if sigma.is_diagonal:
        values = sigma.values * factors
    else:
        root = np.sqrt(factors)
        values = sigma.values * np.outer(root, root)
    stored = {name: float(scales.get(name, 1.0)) for name in names}
    return replace(sigma, kind="learned", values=values, inverted=True,
                   block_scales=stored)


def save_covariance(path, sigma: CovarianceEstimate) -> None:
    """Write a single-line JSON header, a newline, then float64 payload bytes."""
    header = {
        "kind": sigma.kind,
        "layout": "diag" if sigma.is_diagonal else "full",
        "dim": sigma.dim,
        "n_points": sigma.n_points,
        "reg": sigma.reg,
        "inverted": sigma.inverted,
        "blocks": [[name, start, length] for name, start, length in sigma.blocks],
        "block_scales": sigma.block_scales,
    }
    payload = np.ascontiguousarray(sigma.values, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(stable_json_dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_covariance(path) -> CovarianceEstimate:
    """Inverse of save_covariance; validates the payload length."""
    with open(path, "rb") as fh:
        raw = fh.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise StructuralError("covariance file has no header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StructuralError(f"covariance header is not valid JSON: {exc}") from exc
    dim = int(header["dim"])
    shape = (dim,) if header["layout"] == "diag" else (dim, dim)
    expected = int(np.prod(shape)) * 8
    payload = raw[newline + 1:]
    if len(payload) != expected:
        raise StructuralError(
            f"covariance payload holds {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return CovarianceEstimate(
        kind=header["kind"], values=values, n_points=int(header["n_points"]),
        reg=float(header["reg"]), inverted=bool(header["inverted"]),
        blocks=tuple((str(n), int(s), int(l)) for n, s, l in header["blocks"]),
        block_scales=header.get("block_scales"))
