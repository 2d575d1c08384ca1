"""Exact GP regression with an SE-ARD kernel, one independent model per output.

Hyperparameters live in log space: ``log_lengthscales`` (one per input
column), ``log_signal`` (alpha) and ``log_noise`` (sigma_n). A fitted model
gets a :class:`PredictiveCache` once; after that predictions cost one kernel
row per test point.
"""
from __future__ import annotations

import logging
import time
from functools import cached_property
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from . import autodiff as ad
from .data import Normalizer, TrainingPairs
from .optim import AdamState, adam_step
from .rng import substream

log = logging.getLogger(__name__)

NOISE_FLOOR = 1e-4
JITTER_LADDER = (1e-8, 1e-6, 1e-4)
VAR_FLOOR = 1e-12
ROOT_TOL = 1e-3  # relative predictive-std error allowed for an automatically sized root
ROW_BLOCK = 16  # rollout rows are padded to a multiple of this before BLAS calls


class GpError(RuntimeError):
    pass


class NotFittedError(GpError):
    pass


@dataclass(frozen=True, eq=False)
class Hyperparams:
    log_lengthscales: np.ndarray
    log_signal: float = 0.0
    log_noise: float = float(np.log(0.1))

    @classmethod
    def default(cls, d: int) -> "Hyperparams":
        return cls(np.zeros(d))

    @property
    def d(self) -> int:
        return self.log_lengthscales.shape[0]

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def signal(self) -> float:
        return float(np.exp(self.log_signal))

    @property
    def noise(self) -> float:
        return float(np.exp(self.log_noise))

    def floored(self, floor: float = NOISE_FLOOR) -> "Hyperparams":
        return replace(self, log_noise=max(self.log_noise, float(np.log(floor))))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.log_lengthscales, [self.log_signal, self.log_noise]])

    @classmethod
    def from_vector(cls, v) -> "Hyperparams":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:-2].copy(), float(v[-2]), float(v[-1]))


@dataclass(eq=False)
class GpModel:
    X: np.ndarray
    y: np.ndarray
    hyperparams: Hyperparams
    fitted: bool = False

    def __post_init__(self):
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError(f"X {self.X.shape} and y {self.y.shape} do not match")


@dataclass(frozen=True, eq=False)
class PredictiveCache:
    """``alpha = Khat^-1 y``, the Cholesky factor of Khat and an optional root R.

    With the root present, ``Khat^-1 ~= R R^T`` and variances cost O(n r) per point.
    """

    alpha: np.ndarray
    L: np.ndarray
    jitter: float = 0.0
    root: np.ndarray | None = None

    def __post_init__(self):
        # one memory layout for L whether it came from LAPACK or from a file, so
        # triangular solves take the same BLAS path and results match bit for bit
        object.__setattr__(self, "L", np.asfortranarray(self.L))

    @cached_property
    def alpha_root(self) -> np.ndarray:
        """[alpha | R] side by side, so mean and root projection share one product."""
        return np.ascontiguousarray(np.column_stack([self.alpha, self.root]))

    @cached_property
    def alpha_root_t(self) -> np.ndarray:
        return np.ascontiguousarray(self.alpha_root.T)


@dataclass(frozen=True)
class FitReport:
    initial_lml: float
    final_lml: float
    steps: int
    seconds: float
    converged: str


@dataclass(frozen=True)
class FitConfig:
    max_steps: int = 500
    lr: float = 0.05
    grad_tol: float = 1e-4
    rel_tol: float = 1e-9
    window: int = 10
    max_halvings: int = 5
    max_points: int = 400
    noise_floor: float = NOISE_FLOOR
    seed: int = 0


@dataclass(eq=False)
class GpEnsemble:
    """One GP per state output over shared inputs.

    ``target_scale`` converts a model's standardized prediction back to a raw
    state difference; ``normalizer`` maps raw (state, action) rows to GP inputs.
    """

    X: np.ndarray
    models: list[GpModel]
    target_scale: np.ndarray
    normalizer: Normalizer
    caches: list[PredictiveCache] = field(default_factory=list)
    reports: list[FitReport] = field(default_factory=list)
    state_low: np.ndarray | None = None
    state_high: np.ndarray | None = None
    dt: float | None = None

    @property
    def p(self) -> int:
        return len(self.models)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.d - self.p

    def __post_init__(self):
        for m in self.models:
            if m.X is not self.X and not np.array_equal(m.X, self.X):
                raise ValueError("ensemble members must share training inputs")


# kernel ------------------------------------------------------------------------

def _check_dims(A, B, hp: Hyperparams):
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1] or A.shape[1] != hp.d:
        raise ValueError(f"kernel inputs {A.shape} and {B.shape} do not match {hp.d} lengthscales")


def kernel_matrix(A, B, hp: Hyperparams) -> np.ndarray:
    """SE-ARD kernel, entry (i, j) = alpha^2 exp(-1/2 sum_c (A_ic - B_jc)^2 / l_c^2).

    Computed from explicit differences so each row depends only on its own inputs.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _check_dims(A, B, hp)
    ls = hp.lengthscales
    sq = np.zeros((A.shape[0], B.shape[0]))
    for c in range(A.shape[1]):
        diff = (A[:, c, None] - B[None, :, c]) / ls[c]
        sq += diff * diff
    return np.exp(2.0 * hp.log_signal - 0.5 * sq)


def squared_differences(A, B) -> np.ndarray:
    """(m*n, d) stack of per-column squared differences between rows of A and B."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    return ((A[:, None, :] - B[None, :, :]) ** 2).reshape(-1, A.shape[1])


def kernel_node(A, B, log_ls, log_signal, sqdiff: np.ndarray | None = None) -> ad.Node:
    """Tape version of :func:`kernel_matrix`, differentiable in the log hyperparameters.

    ``sqdiff`` (from :func:`squared_differences`) can be passed in when the inputs
    stay fixed across many evaluations.
    """
    if sqdiff is None:
        sqdiff = squared_differences(A, B)
    shape = (np.shape(A)[0], np.shape(B)[0])
    sq = ad.reshape(sqdiff @ ad.exp(-2.0 * log_ls), shape)
    return ad.exp(2.0 * log_signal - 0.5 * sq)


# likelihood ----------------------------------------------------------------------

def _try_chol(M: np.ndarray):
    c, info = lapack.dpotrf(M, lower=1, clean=1)
    return c if info == 0 else None


def jittered_cholesky(Khat: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky of Khat, escalating diagonal jitter through JITTER_LADDER x mean(diag)."""
    L = _try_chol(Khat)
    if L is not None:
        return L, 0.0
    scale = float(np.mean(np.diag(Khat)))
    eye = np.eye(Khat.shape[0])
    for j in JITTER_LADDER:
        L = _try_chol(Khat + j * scale * eye)
        if L is not None:
            log.debug("cholesky needed jitter %g", j * scale)
            return L, j * scale
    cond = np.linalg.cond(Khat)
    raise GpError(f"cholesky failed after {len(JITTER_LADDER)} jitter escalations "
                  f"(condition estimate {cond:.3g})")


def lml_node(X, y, log_ls, log_signal, log_noise, sqdiff=None) -> ad.Node:
    """Log marginal likelihood recorded on the active tape."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    K = kernel_node(X, X, log_ls, log_signal, sqdiff)
    Khat = K + ad.exp(2.0 * log_noise) * np.eye(n)
    try:
        L = ad.cholesky(Khat)
    except ad.CholeskyError:
        _, jitter = jittered_cholesky(Khat.value)
        L = ad.cholesky(Khat + jitter * np.eye(n))
    a = ad.solve_triangular(L, y)
    quad = ad.sum(ad.square(a))
    logdet = 2.0 * ad.sum(ad.log(ad.diagonal(L)))
    return -0.5 * quad - 0.5 * logdet - 0.5 * n * np.log(2.0 * np.pi)


def _lml_and_grad(X, y, theta: np.ndarray, sqdiff=None) -> tuple[float, np.ndarray]:
    with ad.Tape() as tape:
        t = tape.param("theta", theta)
        out = lml_node(X, y, t[:-2], t[-2], t[-1], sqdiff)
    return float(out.value), tape.backward(out)["theta"]


def log_marginal_likelihood(X, y, hp: Hyperparams) -> float:
    """-1/2 y^T Khat^-1 y - 1/2 log|Khat| - n/2 log(2 pi), via Cholesky."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_dims(X, X, hp)
    n = X.shape[0]
    Khat = kernel_matrix(X, X, hp) + hp.noise**2 * np.eye(n)
    L, jitter = jittered_cholesky(Khat)
    a = sla.solve_triangular(L, y, lower=True)
    return float(-0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2.0 * np.pi))


def analytic_likelihood_gradient(X, y, hp: Hyperparams) -> np.ndarray:
    """Trace-form gradient 1/2 tr((a a^T - Khat^-1) dKhat/dtheta) in log-parameter order.

    Order matches :meth:`Hyperparams.to_vector`: lengthscales, signal, noise.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_dims(X, X, hp)
    n, d = X.shape
    K = kernel_matrix(X, X, hp)
    Khat = K + hp.noise**2 * np.eye(n)
    L, jitter = jittered_cholesky(Khat)
    Kinv = sla.cho_solve((L, True), np.eye(n))
    a = sla.cho_solve((L, True), y)
    W = np.outer(a, a) - Kinv
    grad = np.empty(d + 2)
    ls = hp.lengthscales
    for c in range(d):
        diff = X[:, c, None] - X[None, :, c]
        grad[c] = 0.5 * np.sum(W * K * diff * diff) / ls[c] ** 2
    grad[d] = np.sum(W * K)  # dK/dlog(alpha) = 2K
    grad[d + 1] = np.trace(W) * hp.noise**2  # dKhat/dlog(sigma_n) = 2 sigma_n^2 I
    return grad


# fitting -------------------------------------------------------------------------

def fit_single(X, y, config: FitConfig = FitConfig(), init: Hyperparams | None = None
               ) -> tuple[Hyperparams, FitReport]:
    """Maximize the marginal likelihood of one output with Adam on log-parameters.

    Returns the best hyperparameters seen, so the result never scores below the start.
    """
    t0 = time.perf_counter()
    theta = (init or Hyperparams.default(X.shape[1])).floored(config.noise_floor).to_vector()
    floor = np.log(config.noise_floor)
    D = squared_differences(X, X)
    lml, grad = _lml_and_grad(X, y, theta, D)
    if not np.isfinite(lml) or not np.all(np.isfinite(grad)):
        raise GpError("marginal likelihood is not finite at the initial hyperparameters")
    initial = best_lml = lml
    best = theta.copy()
    history = [lml]
    state = AdamState()
    lr = config.lr
    reason = "max_steps"
    steps = 0
    for steps in range(1, config.max_steps + 1):
        if np.max(np.abs(grad)) < config.grad_tol:
            reason = "grad_tol"
            steps -= 1
            break
        halvings = 0
        while True:
            trial_state = AdamState(step=state.step, m=dict(state.m), v=dict(state.v))
            cand = adam_step(trial_state, {"t": theta}, {"t": -grad}, lr)["t"]
            cand[-1] = max(cand[-1], floor)
            try:
                c_lml, c_grad = _lml_and_grad(X, y, cand, D)
                ok = np.isfinite(c_lml) and np.all(np.isfinite(c_grad))
            except (GpError, ad.CholeskyError):
                ok = False
            if ok:
                break
            halvings += 1
            lr *= 0.5
            if halvings > config.max_halvings:
                raise GpError(f"likelihood not finite after {config.max_halvings} step halvings")
        state = trial_state
        theta, lml, grad = cand, c_lml, c_grad
        history.append(lml)
        if lml > best_lml:
            best_lml, best = lml, theta.copy()
        if len(history) > config.window:
            old = history[-1 - config.window]
            if abs(lml - old) <= config.rel_tol * abs(old):
                reason = "rel_tol"
                break
    report = FitReport(initial, best_lml, steps, time.perf_counter() - t0, reason)
    return Hyperparams.from_vector(best), report


def fit_hyperparams(pairs: TrainingPairs, config: FitConfig = FitConfig(), *,
                    rank: int | str | None = None, dt: float | None = None,
                    state_bounds=None) -> GpEnsemble:
    """Fit one GP per target column and build its predictive cache.

    Hyperparameters are fitted on at most ``config.max_points`` rows (seeded
    subsample); the cache always uses every row.
    """
    n = pairs.n
    if n < 2:
        raise ValueError("need at least 2 training pairs")
    if n > config.max_points:
        idx = np.sort(substream(config.seed, "fit-subset").choice(n, config.max_points, replace=False))
    else:
        idx = np.arange(n)
    X = np.ascontiguousarray(pairs.inputs)
    models, reports = [], []
    for m in range(pairs.targets.shape[1]):
        y = np.ascontiguousarray(pairs.targets[:, m])
        hp, rep = fit_single(X[idx], y[idx], config)
        log.info("output %d: lml %.3f -> %.3f in %d steps (%s, %.1fs)", m, rep.initial_lml,
                 rep.final_lml, rep.steps, rep.converged, rep.seconds)
        models.append(GpModel(X, y, hp, fitted=True))
        reports.append(rep)
    low, high = (None, None) if state_bounds is None else state_bounds
    ens = GpEnsemble(X, models, pairs.target_scale, pairs.normalizer, reports=reports,
                     state_low=low, state_high=high, dt=dt)
    ens.caches = [build_cache(mdl, rank=rank) for mdl in models]
    return ens


# caching and prediction ----------------------------------------------------------

def lanczos_root(Khat: np.ndarray, rank: int, start: np.ndarray | None = None) -> np.ndarray:
    """R (n x r) with R R^T = Q T^-1 Q^T ~= Khat^-1, from r Lanczos steps with full reorthogonalization.

    Exact (to roundoff) when r = n. Invariant-subspace breakdowns restart from a
    fresh deterministic vector orthogonal to the basis so far.
    """
    n = Khat.shape[0]
    r = min(int(rank), n)
    if r < 1:
        raise ValueError("rank must be at least 1")
    Q = np.zeros((n, r))
    alphas = np.zeros(r)
    betas = np.zeros(r)
    q = np.ones(n) if start is None else np.asarray(start, dtype=np.float64).copy()
    q /= np.linalg.norm(q)
    restart = substream(0, "lanczos-restart")
    beta = 0.0
    prev = np.zeros(n)
    for j in range(r):
        Q[:, j] = q
        w = Khat @ q - beta * prev
        a = q @ w
        w -= a * q
        for _ in range(2):
            w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        alphas[j] = a
        beta = np.linalg.norm(w)
        prev = q
        if j + 1 == r:
            break
        if beta < 1e-10 * max(1.0, abs(a)):
            # invariant subspace: continue from a new orthogonal direction, T stays block diagonal
            w = restart.standard_normal(n)
            for _ in range(2):
                w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
            beta_next = 0.0
            q = w / np.linalg.norm(w)
            betas[j] = beta_next
            beta = 0.0
            continue
        betas[j] = beta
        q = w / beta
    T = np.diag(alphas) + np.diag(betas[: r - 1], 1) + np.diag(betas[: r - 1], -1)
    LT, _ = jittered_cholesky(T)
    # R = Q L_T^-T  so that R R^T = Q T^-1 Q^T
    return sla.solve_triangular(LT, Q.T, lower=True).T


def root_error(model: GpModel, cache: PredictiveCache, n_probe: int = 64) -> float:
    """Max |std_root - std_exact| / mean(std_exact) at perturbed training inputs."""
    rng = substream(0, "root-probe")
    X = model.X
    pick = rng.choice(X.shape[0], min(n_probe, X.shape[0]), replace=False)
    probe = X[pick] + 0.1 * rng.standard_normal((len(pick), X.shape[1]))
    _, v_exact = predict(cache, model, probe)
    _, v_root = predict(cache, model, probe, use_root=True)
    s = np.sqrt(v_exact)
    return float(np.max(np.abs(np.sqrt(v_root) - s)) / np.mean(s))


def build_cache(model: GpModel, rank: int | str | None = None, tol: float = ROOT_TOL
                ) -> PredictiveCache:
    """Precompute alpha and the Cholesky factor; add a variance root if ``rank`` is given.

    ``rank="auto"`` doubles the rank from 32 until :func:`root_error` drops below ``tol``.
    """
    if not model.fitted:
        raise NotFittedError("fit the model before building its cache")
    hp = model.hyperparams
    n = model.X.shape[0]
    Khat = kernel_matrix(model.X, model.X, hp) + hp.noise**2 * np.eye(n)
    L, jitter = jittered_cholesky(Khat)
    alpha = sla.cho_solve((L, True), model.y)
    cache = PredictiveCache(alpha, L, jitter)
    if rank is None:
        return cache
    if jitter:
        Khat = Khat + jitter * np.eye(n)
    if rank == "auto":
        r = min(32, n)
        while True:
            out = replace(cache, root=lanczos_root(Khat, r))
            err = root_error(model, out)
            if err < tol or r >= n:
                log.info("variance root rank %d (probe error %.2e)", r, err)
                return out
            r = min(2 * r, n)
    return replace(cache, root=lanczos_root(Khat, int(rank)))


def predict(cache: PredictiveCache, model: GpModel, Xstar, use_root: bool = False
            ) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and variances at each row of ``Xstar`` (zero prior mean).

    The exact path treats every row independently, so a batch call returns
    bit-for-bit what row-by-row calls return. The root path shares the rollout
    op's arithmetic, so single-trajectory references reproduce batched rollouts.
    """
    if not model.fitted or cache is None:
        raise NotFittedError("model has no fitted cache")
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=np.float64))
    hp = model.hyperparams
    if use_root:
        if cache.root is None:
            raise GpError("cache was built without a variance root")
        # the rollout op's own arithmetic, so single-trajectory references match it exactly
        kernel = _RowKernel(model)
        means, var, _ = _moments(kernel, cache, Xstar * kernel.inv_ls, True)
        return means, np.maximum(var, VAR_FLOOR)
    Ks = kernel_matrix(Xstar, model.X, hp)
    means = (Ks * cache.alpha).sum(axis=1)
    prior = hp.signal**2
    var = np.empty(Xstar.shape[0])
    for i in range(Xstar.shape[0]):
        v = sla.solve_triangular(cache.L, Ks[i], lower=True, check_finite=False)
        var[i] = prior - (v * v).sum()
    return means, np.maximum(var, VAR_FLOOR)


class _RowKernel:
    """SE kernel rows k(z, X) on lengthscale-scaled inputs, assembled in place."""

    def __init__(self, model: GpModel):
        hp = model.hyperparams
        self.inv_ls = np.exp(-hp.log_lengthscales)
        self.Xs = model.X * self.inv_ls
        self.prior = hp.signal**2
        self.log_prior = 2.0 * hp.log_signal
        self.col = self.log_prior - 0.5 * (self.Xs * self.Xs).sum(axis=1)

    def __call__(self, z, rows: int | None = None):
        # log k = log_prior - |z - x|^2 / 2, capped at log_prior; with ``rows`` set, only
        # the first rows get the exp and the rest are zeroed (padding for BLAS)
        E = z @ self.Xs.T
        live = E if rows is None else E[:rows]
        live += self.col
        live -= 0.5 * (z[:rows] * z[:rows]).sum(axis=1)[:, None]
        np.minimum(live, self.log_prior, out=live)
        np.exp(live, out=live)
        if rows is not None:
            E[rows:] = 0.0
        return E


def _moments(kernel: _RowKernel, cache: PredictiveCache, Z, use_root: bool):
    """Mean, unfloored variance and the variance factor W for scaled inputs ``Z``."""
    b = Z.shape[0]
    # BLAS picks kernels by matrix shape, so a row computed in a batch of 100 and alone
    # can differ in the last bits, and rollouts amplify that over the horizon. Padding
    # to a fixed block keeps rows on one kernel path; OpenBLAS gives no hard promise,
    # but in practice this makes rows bit-identical or leaves a stray last-bit change
    m = max(-(-b // ROW_BLOCK), 1) * ROW_BLOCK
    K = kernel(np.concatenate([Z, np.zeros((m - b, Z.shape[1]))]), rows=b) if m > b else kernel(Z)
    if use_root:
        AW = (K @ cache.alpha_root)[:b]
        mean, W = AW[:, 0], AW[:, 1:]
    else:
        mean = (K @ cache.alpha[:, None])[:b, 0]
        W = sla.solve_triangular(cache.L, K.T, lower=True, check_finite=False).T[:b]
    return mean, kernel.prior - (W * W).sum(axis=1), W


def gp_moments(xs, model: GpModel, cache: PredictiveCache, use_root: bool = True) -> ad.Node:
    """Fused tape op: (b x d) test inputs -> (b x 2) [mean, variance].

    Gradients flow to the test inputs only (hyperparameters are fixed here). The
    kernel block is recomputed in the backward pass instead of being stored, so
    the tape holds O(b r) per call rather than O(b n).
    """
    xs = ad._as_node(xs)
    hp = model.hyperparams
    if xs.ndim != 2 or xs.shape[1] != hp.d:
        raise ad.ShapeError("gp_moments", xs.shape, (xs.shape[0] if xs.ndim else 0, hp.d))
    if use_root and cache.root is None:
        raise GpError("cache was built without a variance root")
    kernel = _RowKernel(model)
    inv_ls, Xs = kernel.inv_ls, kernel.Xs
    Z = xs.value * inv_ls
    mean, raw_var, W = _moments(kernel, cache, Z, use_root)
    active = raw_var > VAR_FLOOR
    var = np.where(active, raw_var, VAR_FLOOR)

    def vjp(g):
        gm, gv = g[:, 0], g[:, 1] * active
        # M = (gm alpha^T - 2 gv Khat^-1 k) * K
        if use_root:
            M = np.column_stack([gm, -2.0 * gv[:, None] * W]) @ cache.alpha_root_t
        else:
            M = sla.solve_triangular(cache.L, W.T, lower=True, trans="T", check_finite=False).T
            M *= -2.0 * gv[:, None]
            M += np.outer(gm, cache.alpha)
        M *= kernel(Z)
        Zbar = M @ Xs
        Zbar -= M.sum(axis=1)[:, None] * Z
        return (Zbar * inv_ls,)

    out = ad.record("gp_moments", np.stack([mean, var], axis=1), (xs,), vjp)
    if out.requires_grad:
        ad.active_tape().account(W.nbytes + Z.nbytes)
    return out


def sample_next_delta(ensemble: GpEnsemble, S, U, eps, use_root: bool = True) -> ad.Node:
    """Reparameterized one-step draw of raw state differences (b x p).

    ``S`` holds normalized states, ``U`` raw actions, ``eps`` standard-normal draws
    supplied by the caller. Row i, output m: (mean + sqrt(var) * eps) * target_scale[m].
    """
    S, U = ad._as_node(S), ad._as_node(U)
    eps = np.asarray(eps, dtype=np.float64)
    nz = ensemble.normalizer
    if S.ndim != 2 or S.shape[1] != ensemble.p or U.ndim != 2 or U.shape != (S.shape[0], ensemble.q):
        raise ad.ShapeError("sample_next_delta", S.shape, U.shape)
    if eps.shape != (S.shape[0], ensemble.p):
        raise ad.ShapeError("sample_next_delta", eps.shape, (S.shape[0], ensemble.p))
    xs = ad.concat([S, (U - nz.action_mean) / nz.action_std], axis=1)
    cols = []
    for m, (model, cache) in enumerate(zip(ensemble.models, ensemble.caches)):
        mv = gp_moments(xs, model, cache, use_root=use_root)
        draw = mv[:, 0] + ad.sqrt(mv[:, 1]) * eps[:, m]
        cols.append(ad.reshape(draw * ensemble.target_scale[m], (S.shape[0], 1)))
    return cols[0] if len(cols) == 1 else ad.concat(cols, axis=1)


def with_data(ensemble: GpEnsemble, pairs: TrainingPairs, rank: int | str | None = None) -> GpEnsemble:
    """Same hyperparameters, conditioned on ``pairs`` instead (caches rebuilt)."""
    X = np.ascontiguousarray(pairs.inputs)
    models = [GpModel(X, np.ascontiguousarray(pairs.targets[:, m]), mdl.hyperparams, fitted=True)
              for m, mdl in enumerate(ensemble.models)]
    out = GpEnsemble(X, models, pairs.target_scale, pairs.normalizer, reports=ensemble.reports,
                     state_low=ensemble.state_low, state_high=ensemble.state_high, dt=ensemble.dt)
    out.caches = [build_cache(mdl, rank=rank) for mdl in models]
    return out


def prediction_rmse(ensemble: GpEnsemble, pairs: TrainingPairs) -> np.ndarray:
    """Per-output RMSE of the posterior mean against ``pairs``, in raw state-difference units."""
    err = np.empty(pairs.targets.shape)
    for m, (model, cache) in enumerate(zip(ensemble.models, ensemble.caches)):
        mu, _ = predict(cache, model, pairs.inputs)
        err[:, m] = (mu - pairs.targets[:, m]) * ensemble.target_scale[m]
    return np.sqrt(np.mean(err**2, axis=0))


def holdout_split(n: int, fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, test) index split with ``round(fraction * n)`` test rows."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must lie in (0, 1)")
    perm = substream(seed, "holdout").permutation(n)
    k = int(round(fraction * n))
    return np.sort(perm[k:]), np.sort(perm[:k])
