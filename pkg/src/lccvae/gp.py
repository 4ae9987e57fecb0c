"""Zero-mean GP regression with a squared-exponential kernel.

Two fitting modes share one prediction interface:

* ``exact`` - maximize the log marginal likelihood over log hyperparameters.
* ``sparse_variational`` - maximize the collapsed variational bound

      log N(t | 0, Q_nn + s I) - tr(K_nn - Q_nn) / (2 s),
      Q_nn = K_nm K_mm^-1 K_mn

  over log hyperparameters and the inducing inputs.

Gradients are analytic and both objectives are climbed with Adam.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .autodiff import AdamState, adam_step

LOG_2PI = math.log(2.0 * math.pi)
JITTER_START, JITTER_MAX = 1e-10, 1e-4

__all__ = [
    "GpNumericalError",
    "KernelParams",
    "GpSlice",
    "rbf_kernel",
    "rbf_matrix",
    "init_kernel_params",
    "jittered_cholesky",
    "log_marginal_likelihood",
    "sparse_elbo",
    "gp_fit_exact",
    "gp_fit_sparse",
    "gp_predict",
]


class GpNumericalError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KernelParams:
    lengthscale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 0.01

    def __post_init__(self):
        if min(self.lengthscale, self.signal_variance, self.noise_variance) <= 0:
            raise ValueError(f"kernel parameters must be positive: {self}")

    @property
    def log_params(self) -> np.ndarray:
        return np.log([self.lengthscale, self.signal_variance, self.noise_variance])

    @classmethod
    def from_log(cls, theta) -> "KernelParams":
        ls, sv, nv = np.exp(np.asarray(theta, dtype=np.float64))
        return cls(float(ls), float(sv), float(nv))


def rbf_kernel(a, b, p: KernelParams) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"rbf_kernel: dimension mismatch {a.shape} vs {b.shape}")
    d2 = float(np.sum((a - b) ** 2))
    return p.signal_variance * math.exp(-d2 / (2.0 * p.lengthscale ** 2))


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d2 = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def rbf_matrix(A, B, lengthscale: float, signal_variance: float) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"rbf_matrix: feature dimensions differ ({A.shape[1]} vs {B.shape[1]})")
    return signal_variance * np.exp(-_sqdist(A, B) / (2.0 * lengthscale ** 2))


def init_kernel_params(X, t, max_rows: int = 500) -> KernelParams:
    """Median pairwise input distance, target variance, 1% of it as noise."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    if len(X) > max_rows:
        X = X[np.linspace(0, len(X) - 1, max_rows).astype(int)]
    d = np.sqrt(_sqdist(X, X)[np.triu_indices(len(X), 1)])
    d = d[d > 0]
    ls = float(np.median(d)) if d.size else 1.0
    var = float(np.var(t)) if t.size > 1 else 0.0
    if not var > 0:
        var = 1.0
    return KernelParams(ls, var, 0.01 * var)


def jittered_cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky of K, adding diagonal jitter 1e-10, 1e-9, ... 1e-4 on failure."""
    jitter = 0.0
    eye = np.eye(len(K))
    while True:
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                break
    try:
        cond = float(np.linalg.cond(K))
    except np.linalg.LinAlgError:
        cond = float("inf")
    diag = np.diag(K)
    raise GpNumericalError(
        f"Cholesky failed with jitter up to {JITTER_MAX:g}: n={len(K)}, cond={cond:.3g}, "
        f"diag range [{diag.min():.3g}, {diag.max():.3g}]")


def log_marginal_likelihood(X, t, theta) -> tuple[float, np.ndarray]:
    """Exact log evidence and its gradient w.r.t. (log l, log sv, log noise)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    ls, sv, s = np.exp(theta)
    n = len(t)
    D2 = _sqdist(X, X)
    Kf = sv * np.exp(-D2 / (2 * ls * ls))
    L, _ = jittered_cholesky(Kf + s * np.eye(n))
    alpha = cho_solve((L, True), t)
    value = -0.5 * t @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI
    Kinv = cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv
    grad = 0.5 * np.array([
        np.sum(W * Kf * D2) / (ls * ls),
        np.sum(W * Kf),
        s * np.trace(W),
    ])
    return float(value), grad


def _sparse_terms(X, t, Z, theta, want_grad=True):
    ls, sv, s = np.exp(theta)
    n, m = len(X), len(Z)
    Dmm = _sqdist(Z, Z)
    Dmn = _sqdist(Z, X)
    Kmm = sv * np.exp(-Dmm / (2 * ls * ls))
    P = sv * np.exp(-Dmn / (2 * ls * ls))
    Lm, jitter = jittered_cholesky(Kmm)
    A = solve_triangular(Lm, P, lower=True) / math.sqrt(s)
    B = np.eye(m) + A @ A.T
    LB, _ = jittered_cholesky(B)
    c = solve_triangular(LB, A @ t, lower=True) / math.sqrt(s)
    trQ_s = float(np.sum(A * A))
    value = (-0.5 * n * LOG_2PI - np.sum(np.log(np.diag(LB))) - 0.5 * n * math.log(s)
             - 0.5 * (t @ t) / s + 0.5 * (c @ c) - 0.5 * n * sv / s + 0.5 * trQ_s)
    trace_term = n * sv - s * trQ_s
    out = {"value": float(value), "trace": float(trace_term), "Lm": Lm, "LB": LB, "jitter": jitter,
           "Kmm": Kmm, "P": P, "s": s, "sv": sv, "ls": ls}
    if not want_grad:
        return out
    # Sigma = Kmm + P P^T / s = Lm B Lm^T
    Lm_inv = solve_triangular(Lm, np.eye(m), lower=True)
    Kinv = Lm_inv.T @ Lm_inv
    Binv = cho_solve((LB, True), np.eye(m))
    Sinv = Lm_inv.T @ Binv @ Lm_inv
    b = P @ t
    v = Sinv @ b
    PPt = P @ P.T
    vP = v @ P
    GP = (np.outer(v, t) - np.outer(v, vP) / s) / s ** 2 - Sinv @ P / s + Kinv @ P / s
    GK = -np.outer(v, v) / (2 * s ** 2) - 0.5 * (Sinv - Kinv) - Kinv @ PPt @ Kinv / (2 * s)
    gs = (0.5 * (t @ t) / s ** 2 - (b @ v) / s ** 3 + 0.5 * (vP @ vP) / s ** 4
          + 0.5 * np.sum(Sinv * PPt) / s ** 2 - n / (2 * s)
          + (n * sv - np.sum(Kinv * PPt)) / (2 * s ** 2))
    GPK = GP * P
    GKK = GK * Kmm
    g_ls = (np.sum(GPK * Dmn) + np.sum(GKK * Dmm)) / (ls * ls)
    g_sv = np.sum(GPK) + np.sum(GKK) - n * sv / (2 * s)
    g_s = s * gs
    G2 = GKK + GKK.T
    gZ = (GPK @ X - GPK.sum(1)[:, None] * Z + G2 @ Z - G2.sum(1)[:, None] * Z) / (ls * ls)
    out.update(grad_theta=np.array([g_ls, g_sv, g_s]), grad_Z=gZ, Sinv=Sinv, Kinv=Kinv, v=v)
    return out


def sparse_elbo(X, t, Z, theta, with_grad: bool = True):
    """Collapsed bound; returns (value, trace term, grad_theta, grad_Z)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    out = _sparse_terms(X, t, Z, np.asarray(theta, dtype=np.float64), with_grad)
    if not with_grad:
        return out["value"], out["trace"], None, None
    return out["value"], out["trace"], out["grad_theta"], out["grad_Z"]


@dataclass(frozen=True)
class GpSlice:
    """A fitted GP for one latent coordinate.

    Exact mode keeps the Cholesky factor of K + s I and alpha = (K + s I)^-1 t.
    Sparse mode keeps the inducing inputs, mean weights and the matrix
    K_mm^-1 - Sigma^-1 used for predictive variances.
    """

    params: KernelParams
    X: np.ndarray
    t: np.ndarray
    mode: str
    chol: np.ndarray
    alpha: np.ndarray
    inducing: np.ndarray | None = None
    var_matrix: np.ndarray | None = None
    trace: list[float] | None = None


def _adam_ascent(objective, x0: list[np.ndarray], steps: int, lr: float):
    params = [np.array(p, dtype=np.float64) for p in x0]
    state = AdamState.zeros_like(params)
    trace = []
    for _ in range(steps):
        value, grads = objective(params)
        trace.append(value)
        # Adam minimizes, so feed the negated gradient
        params, state = adam_step(params, [-g for g in grads], state, lr=lr)
    return params, trace


def gp_fit_exact(X, t, init: KernelParams | None = None, steps: int = 200, lr: float = 0.05,
                 optimize: bool = True) -> GpSlice:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    if len(t) < 1 or len(X) != len(t):
        raise ValueError(f"need n >= 1 matching inputs/targets, got {len(X)} and {len(t)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(t))):
        raise ValueError("non-finite GP training data")
    init = init or init_kernel_params(X, t)
    trace = []
    theta = init.log_params
    if optimize and steps > 0:
        (theta,), trace = _adam_ascent(
            lambda p: (lambda v, g: (v, [g]))(*log_marginal_likelihood(X, t, p[0])), [theta], steps, lr)
    return _finish_exact(X, t, KernelParams.from_log(theta), trace)


def _finish_exact(X, t, p: KernelParams, trace=None) -> GpSlice:
    K = rbf_matrix(X, X, p.lengthscale, p.signal_variance) + p.noise_variance * np.eye(len(X))
    L, _ = jittered_cholesky(K)
    return GpSlice(p, X, t, "exact", L, cho_solve((L, True), t), trace=trace)


def gp_fit_sparse(X, t, m: int, init: KernelParams | None = None, seed: int = 0, steps: int = 200,
                  lr: float = 0.05, inducing: np.ndarray | None = None, optimize: bool = True,
                  optimize_inducing: bool = True) -> GpSlice:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    n = len(t)
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    if inducing is None:
        rng = np.random.Generator(np.random.PCG64(seed))
        inducing = X[np.sort(rng.choice(n, size=m, replace=False))]
    Z = np.array(inducing, dtype=np.float64)
    init = init or init_kernel_params(X, t)
    theta = init.log_params
    trace = []
    if optimize and steps > 0:
        def objective(p):
            out = _sparse_terms(X, t, p[1], p[0])
            gz = out["grad_Z"] if optimize_inducing else np.zeros_like(p[1])
            return out["value"], [out["grad_theta"], gz]

        (theta, Z), trace = _adam_ascent(objective, [theta, Z], steps, lr)
    return _finish_sparse(X, t, Z, KernelParams.from_log(theta), trace)


def _finish_sparse(X, t, Z, p: KernelParams, trace=None) -> GpSlice:
    out = _sparse_terms(X, t, Z, p.log_params)
    return GpSlice(p, X, t, "sparse_variational", out["Lm"], out["v"] / out["s"], Z,
                   out["Kinv"] - out["Sinv"], trace)


def refit_with_targets(gp: GpSlice, t) -> GpSlice:
    """Same hyperparameters (and inducing inputs), new targets."""
    t = np.asarray(t, dtype=np.float64)
    if gp.mode == "exact":
        return replace(gp, t=t, alpha=cho_solve((gp.chol, True), t))
    return _finish_sparse(gp.X, t, gp.inducing, gp.params, gp.trace)


def gp_predict(gp: GpSlice, Xs, return_clamps: bool = False):
    """Posterior mean and latent-function variance at query rows ``Xs``."""
    Xs = np.atleast_2d(np.asarray(Xs, dtype=np.float64))
    if Xs.shape[1] != gp.X.shape[1]:
        raise ValueError(f"query dimension {Xs.shape[1]} does not match training dimension {gp.X.shape[1]}")
    p = gp.params
    kss = np.full(len(Xs), p.signal_variance)
    if gp.mode == "exact":
        Ks = rbf_matrix(gp.X, Xs, p.lengthscale, p.signal_variance)
        mean = Ks.T @ gp.alpha
        V = solve_triangular(gp.chol, Ks, lower=True)
        var = kss - np.sum(V * V, axis=0)
    else:
        Ks = rbf_matrix(gp.inducing, Xs, p.lengthscale, p.signal_variance)
        mean = Ks.T @ gp.alpha
        var = kss - np.sum(Ks * (gp.var_matrix @ Ks), axis=0)
    neg = var < 0
    var = np.where(neg, 0.0, var)
    if return_clamps:
        return mean, var, int(neg.sum())
    return mean, var
