"""Convex models with per-sample losses, gradients and Hessian-vector products.

Two model families are provided:

* ``quad1d`` -- scalar quadratic fit, loss ``0.5 * weight * (theta - z)**2``
  where ``z`` is the sample's single feature. Labels are ignored. Everything
  about it (optimum, Hessian, influence) has a closed form, which makes it
  the reference model for exact oracles.
* ``logistic`` -- multinomial logistic regression with cross-entropy loss
  and an L2 term attributed per sample: each sample contributes
  ``weight * (cross_entropy + l2_strength/2 * ||theta||^2)`` so that sums
  over sample sets equal the regularized empirical risk of the set. With
  ``l2_strength > 0`` the set Hessian is strictly positive definite.

Parameters for ``logistic`` are flattened class-major: ``theta.reshape(
num_classes, dim)`` has one row per class. Per-sample operations are exact
analytic formulas; batch helpers (``grad_matrix``, ``set_hvp``, ...) are
vectorized equivalents that agree with per-sample summation to float64
roundoff and exist because the leave-one-out oracles need thousands of
refits.

Everything here is a pure function of read-only inputs, so per-sample
calls may fan out across threads; combine partial results with
``deterministic_sum`` to keep reductions order-fixed.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numkit import as_vector

MODEL_KINDS = ("quad1d", "logistic")
FIT_METHODS = ("closed_form", "newton", "sgd")


class FitError(RuntimeError):
    """Optimizer failed to reach the requested gradient tolerance."""

    def __init__(self, message: str, grad_norm: float):
        super().__init__(message)
        self.grad_norm = grad_norm


@dataclass(frozen=True, eq=False)
class Sample:
    """One training point: features, class label, task of origin, weight."""

    id: int
    task_id: int
    label: int
    features: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "features", as_vector(self.features))
        if self.weight <= 0:
            raise ValueError(f"sample {self.id}: weight must be positive")
        if self.task_id < 0:
            raise ValueError(f"sample {self.id}: task_id must be nonnegative")
        if self.label < 0:
            raise ValueError(f"sample {self.id}: label must be nonnegative")


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    dim: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("dataset contains duplicate sample ids")
        for s in self.samples:
            if s.features.shape[0] != self.dim:
                raise ValueError(f"sample {s.id}: feature dim {s.features.shape[0]} != {self.dim}")
            if not 0 <= s.label < self.num_classes:
                raise ValueError(f"sample {s.id}: label {s.label} outside [0, {self.num_classes})")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    dim: int = 1
    num_classes: int = 2
    l2_strength: float = 0.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.kind == "quad1d" and self.dim != 1:
            raise ValueError("quad1d requires dim=1")
        if self.dim < 1 or self.num_classes < 1:
            raise ValueError("dim and num_classes must be positive")
        if self.l2_strength < 0:
            raise ValueError("l2_strength must be nonnegative")

    @property
    def param_dim(self) -> int:
        return 1 if self.kind == "quad1d" else self.num_classes * self.dim


@dataclass(frozen=True)
class Params:
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", as_vector(self.theta))


@dataclass(frozen=True)
class FitConfig:
    method: str = "newton"
    grad_tolerance: float = 1e-10
    max_steps: int = 100
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.method not in FIT_METHODS:
            raise ValueError(f"unknown fit method {self.method!r}; expected one of {FIT_METHODS}")
        if self.grad_tolerance <= 0:
            raise ValueError("grad_tolerance must be positive")
        if self.method == "sgd" and self.learning_rate <= 0:
            raise ValueError("sgd requires a positive learning_rate")


def _check_sample(spec: ModelSpec, sample: Sample):
    if sample.features.shape[0] != spec.dim:
        raise ValueError(f"sample {sample.id}: feature dim {sample.features.shape[0]} != {spec.dim}")
    if spec.kind == "logistic" and not 0 <= sample.label < spec.num_classes:
        raise ValueError(f"sample {sample.id}: label {sample.label} outside [0, {spec.num_classes})")


def stack_samples(spec: ModelSpec, samples: Sequence[Sample]):
    """Stack a sample list into (features, labels, weights) arrays."""
    for s in samples:
        _check_sample(spec, s)
    X = np.stack([s.features for s in samples]) if samples else np.zeros((0, spec.dim))
    y = np.array([s.label for s in samples], dtype=np.int64)
    w = np.array([s.weight for s in samples], dtype=np.float64)
    return X, y, w


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _theta_matrix(spec: ModelSpec, params: Params) -> np.ndarray:
    theta = as_vector(params.theta, dim=spec.param_dim)
    return theta.reshape(spec.num_classes, spec.dim)


# ---------------------------------------------------------------------------
# per-sample operations (the contract surface)
# ---------------------------------------------------------------------------

def loss(spec: ModelSpec, params: Params, sample: Sample) -> float:
    _check_sample(spec, sample)
    if spec.kind == "quad1d":
        t = params.theta[0]
        return 0.5 * sample.weight * (t - sample.features[0]) ** 2
    theta = _theta_matrix(spec, params)
    logits = (theta @ sample.features)[None, :]
    ce = -_log_softmax(logits)[0, sample.label]
    l2 = 0.5 * spec.l2_strength * float(params.theta @ params.theta)
    return sample.weight * (ce + l2)


def grad(spec: ModelSpec, params: Params, sample: Sample) -> np.ndarray:
    _check_sample(spec, sample)
    if spec.kind == "quad1d":
        return np.array([sample.weight * (params.theta[0] - sample.features[0])])
    theta = _theta_matrix(spec, params)
    p = _softmax((theta @ sample.features)[None, :])[0]
    resid = p.copy()
    resid[sample.label] -= 1.0
    g = np.outer(resid, sample.features) + spec.l2_strength * theta
    return sample.weight * g.ravel()


def sample_hvp(spec: ModelSpec, params: Params, sample: Sample, v) -> np.ndarray:
    """Action of one sample's loss Hessian on ``v`` (exact, analytic)."""
    _check_sample(spec, sample)
    v = as_vector(v, dim=spec.param_dim)
    if spec.kind == "quad1d":
        return sample.weight * v
    theta = _theta_matrix(spec, params)
    p = _softmax((theta @ sample.features)[None, :])[0]
    V = v.reshape(spec.num_classes, spec.dim)
    a = V @ sample.features
    row = p * (a - float(p @ a))
    out = np.outer(row, sample.features) + spec.l2_strength * V
    return sample.weight * out.ravel()


def set_hvp(spec: ModelSpec, params: Params, samples: Sequence[Sample], v) -> np.ndarray:
    """Action of the summed Hessian over ``samples`` on ``v``.

    Matches the per-sample sum to float64 roundoff; computed vectorized so
    it can serve as the operator inside conjugate-gradient solves.
    """
    if not samples:
        raise ValueError("set Hessian is undefined for an empty sample list")
    v = as_vector(v, dim=spec.param_dim)
    if spec.kind == "quad1d":
        total_weight = sum(s.weight for s in samples)
        for s in samples:
            _check_sample(spec, s)
        return total_weight * v
    X, _, w = stack_samples(spec, samples)
    theta = _theta_matrix(spec, params)
    P = _softmax(X @ theta.T)
    V = v.reshape(spec.num_classes, spec.dim)
    a = X @ V.T                                  # (n, C)
    m = np.einsum("nc,nc->n", P, a)
    rows = P * (a - m[:, None])                  # (n, C)
    out = (w[:, None] * rows).T @ X              # (C, d)
    out += spec.l2_strength * w.sum() * V
    return out.ravel()


# ---------------------------------------------------------------------------
# vectorized batch helpers
# ---------------------------------------------------------------------------

def loss_sum(spec: ModelSpec, params: Params, samples: Sequence[Sample]) -> float:
    X, y, w = stack_samples(spec, samples)
    if len(samples) == 0:
        return 0.0
    if spec.kind == "quad1d":
        return float(0.5 * (w * (params.theta[0] - X[:, 0]) ** 2).sum())
    theta = _theta_matrix(spec, params)
    logp = _log_softmax(X @ theta.T)
    ce = -logp[np.arange(len(samples)), y]
    l2 = 0.5 * spec.l2_strength * float(params.theta @ params.theta)
    return float((w * (ce + l2)).sum())


def grad_matrix(spec: ModelSpec, params: Params, samples: Sequence[Sample]) -> np.ndarray:
    """Per-sample gradients stacked as rows of an (n, param_dim) array."""
    X, y, w = stack_samples(spec, samples)
    n = len(samples)
    if spec.kind == "quad1d":
        return (w * (params.theta[0] - X[:, 0]))[:, None]
    theta = _theta_matrix(spec, params)
    P = _softmax(X @ theta.T)
    resid = P.copy()
    resid[np.arange(n), y] -= 1.0
    G = resid[:, :, None] * X[:, None, :] + spec.l2_strength * theta[None, :, :]
    return (w[:, None, None] * G).reshape(n, spec.param_dim)


def grad_sum(spec: ModelSpec, params: Params, samples: Sequence[Sample]) -> np.ndarray:
    if not samples:
        return np.zeros(spec.param_dim)
    return grad_matrix(spec, params, samples).sum(axis=0)


def hvp_matrix(spec: ModelSpec, params: Params, samples: Sequence[Sample], v) -> np.ndarray:
    """Rows ``H_i v`` of each sample's Hessian applied to a fixed vector."""
    v = as_vector(v, dim=spec.param_dim)
    X, _, w = stack_samples(spec, samples)
    n = len(samples)
    if spec.kind == "quad1d":
        return w[:, None] * v[None, :]
    theta = _theta_matrix(spec, params)
    P = _softmax(X @ theta.T)
    V = v.reshape(spec.num_classes, spec.dim)
    a = X @ V.T
    m = np.einsum("nc,nc->n", P, a)
    rows = P * (a - m[:, None])
    out = rows[:, :, None] * X[:, None, :] + spec.l2_strength * V[None, :, :]
    return (w[:, None, None] * out).reshape(n, spec.param_dim)


def dense_hessian(spec: ModelSpec, params: Params, samples: Sequence[Sample]) -> np.ndarray:
    """Materialized summed Hessian; used by Newton steps and dense oracles."""
    if not samples:
        raise ValueError("set Hessian is undefined for an empty sample list")
    X, _, w = stack_samples(spec, samples)
    if spec.kind == "quad1d":
        return np.array([[w.sum()]])
    theta = _theta_matrix(spec, params)
    P = _softmax(X @ theta.T)
    K = -P[:, :, None] * P[:, None, :]
    idx = np.arange(spec.num_classes)
    K[:, idx, idx] += P
    H = np.einsum("n,ncd,nj,nk->cjdk", w, K, X, X).reshape(spec.param_dim, spec.param_dim)
    H += spec.l2_strength * w.sum() * np.eye(spec.param_dim)
    return H


# ---------------------------------------------------------------------------
# fitting and evaluation
# ---------------------------------------------------------------------------

def fit(spec: ModelSpec, samples: Sequence[Sample], cfg: FitConfig,
        init: Optional[Params] = None) -> Params:
    """Fit parameters on ``samples``.

    ``closed_form`` (quad1d only) and ``newton`` drive the summed gradient
    below ``grad_tolerance``; ``sgd`` just runs the scheduled passes and
    offers no optimality guarantee.
    """
    if not samples:
        raise ValueError("cannot fit on an empty sample list")
    if cfg.method == "closed_form":
        if spec.kind != "quad1d":
            raise ValueError("closed_form fitting is only defined for quad1d")
        _, _, w = stack_samples(spec, samples)
        z = np.array([s.features[0] for s in samples])
        return Params(np.array([float((w * z).sum() / w.sum())]))
    if cfg.method == "newton":
        return _fit_newton(spec, samples, cfg, init)
    return _fit_sgd(spec, samples, cfg, init)


def _fit_newton(spec: ModelSpec, samples, cfg: FitConfig, init) -> Params:
    theta = init.theta.copy() if init is not None else np.zeros(spec.param_dim)
    g_norm = np.inf
    for _ in range(cfg.max_steps):
        params = Params(theta)
        g = grad_sum(spec, params, samples)
        g_norm = float(np.linalg.norm(g))
        if g_norm <= cfg.grad_tolerance:
            return params
        H = dense_hessian(spec, params, samples)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise FitError(f"singular Hessian during Newton fit: {exc}", g_norm) from exc
        # backtracking keeps the iteration safe far from the optimum; the
        # slack admits the full Newton step once the decrease is below
        # float roundoff of the loss value
        base = loss_sum(spec, params, samples)
        slack = 1e-12 * (1.0 + abs(base))
        t = 1.0
        while t > 1e-8:
            candidate = Params(theta - t * step)
            if loss_sum(spec, candidate, samples) <= base - 1e-4 * t * float(g @ step) + slack:
                break
            t *= 0.5
        theta = theta - t * step
    params = Params(theta)
    g_norm = float(np.linalg.norm(grad_sum(spec, params, samples)))
    if g_norm <= cfg.grad_tolerance:
        return params
    raise FitError(
        f"Newton did not converge in {cfg.max_steps} steps (|grad| = {g_norm:.3e})",
        g_norm,
    )


def _fit_sgd(spec: ModelSpec, samples, cfg: FitConfig, init) -> Params:
    rng = np.random.default_rng(cfg.seed)
    theta = init.theta.copy() if init is not None else np.zeros(spec.param_dim)
    samples = list(samples)
    n = len(samples)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            g = grad_sum(spec, Params(theta), batch)
            theta = theta - cfg.learning_rate * g
    return Params(theta)


def accuracy(spec: ModelSpec, params: Params, samples: Sequence[Sample]) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    if spec.kind != "logistic":
        raise ValueError("accuracy is only defined for classification models")
    if not samples:
        raise ValueError("accuracy over an empty sample list is undefined")
    X, y, _ = stack_samples(spec, samples)
    theta = _theta_matrix(spec, params)
    pred = np.argmax(X @ theta.T, axis=1)
    return float((pred == y).mean())
