"""Mixtures of multiple-scale t-distributions (MMST) fit by online EM.

One component rotates the centred vector into its own basis,
``y = D^T (z - mu)``, and models every coordinate as a Gaussian scale
mixture: ``y_m | W_m ~ N(0, A_m / W_m)`` and ``W_m ~ Gamma(alpha_m, beta_m)``.
Integrating each ``W_m`` out gives a product of generalized Student-t
densities. Fitting keeps ``beta_m = alpha_m`` so ``E[W_m] = 1`` a priori.

The normality score of a vector is the largest posterior scale mean
``max_m E[W_m | z]``; it shrinks as ``z`` moves away from the model in
every direction.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from . import container
from ._jit import USE_NUMBA, kernel
from ._special import digamma, digamma_scalar, lgamma, trigamma, trigamma_scalar

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
SHAPE_BOUNDS = (0.05, 100.0)
A_FLOOR = 1e-8
A_FLOOR_INIT = 1e-6


@dataclass(frozen=True, eq=False)
class MstParams:
    mu: np.ndarray  # (M,)
    D: np.ndarray  # (M, M), columns are directions
    A: np.ndarray  # (M,)
    alpha: np.ndarray  # (M,)
    beta: np.ndarray = None  # (M,), defaults to alpha

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        m = mu.size
        D = np.asarray(self.D, dtype=np.float64).reshape(m, m)
        A = np.asarray(self.A, dtype=np.float64).reshape(m)
        alpha = np.asarray(self.alpha, dtype=np.float64).reshape(m)
        beta = alpha.copy() if self.beta is None else np.asarray(self.beta, dtype=np.float64).reshape(m)
        if np.abs(D.T @ D - np.eye(m)).max() > 1e-8:
            raise ValueError("D must be orthogonal")
        if np.any(A <= 0) or np.any(alpha <= 0) or np.any(beta <= 0):
            raise ValueError("A, alpha and beta must be strictly positive")
        for k, v in dict(mu=mu, D=D, A=A, alpha=alpha, beta=beta).items():
            object.__setattr__(self, k, v)


@dataclass(frozen=True, eq=False)
class MmstParams:
    """Stacked component parameters: ``mu``, ``A``, ``alpha``, ``beta`` are (K, M); ``D`` is (K, M, M)."""

    pi: np.ndarray
    mu: np.ndarray
    D: np.ndarray
    A: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray = None

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64).reshape(-1)
        k = pi.size
        mu = np.asarray(self.mu, dtype=np.float64).reshape(k, -1)
        m = mu.shape[1]
        D = np.asarray(self.D, dtype=np.float64).reshape(k, m, m)
        A = np.asarray(self.A, dtype=np.float64).reshape(k, m)
        alpha = np.asarray(self.alpha, dtype=np.float64).reshape(k, m)
        beta = alpha.copy() if self.beta is None else np.asarray(self.beta, dtype=np.float64).reshape(k, m)
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the simplex")
        if np.any(A <= 0) or np.any(alpha <= 0) or np.any(beta <= 0):
            raise ValueError("A, alpha and beta must be strictly positive")
        for name, v in dict(pi=pi, mu=mu, D=D, A=A, alpha=alpha, beta=beta).items():
            object.__setattr__(self, name, v)

    @property
    def K(self):
        return self.pi.size

    @property
    def M(self):
        return self.mu.shape[1]

    @property
    def components(self):
        return [MstParams(self.mu[k], self.D[k], self.A[k], self.alpha[k], self.beta[k]) for k in range(self.K)]

    @classmethod
    def from_components(cls, pi, comps):
        return cls(pi, [c.mu for c in comps], [c.D for c in comps], [c.A for c in comps], [c.alpha for c in comps], [c.beta for c in comps])


# --------------------------------------------------------------------------
# densities and posterior scale expectations
# --------------------------------------------------------------------------


def _as_batch(z, m):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != m:
        raise ValueError(f"expected vectors of length {m}, got {z.shape[1]}")
    if not np.all(np.isfinite(z)):
        raise ValueError("input contains non-finite values")
    return z, single


def _component_terms(P: MmstParams, z):
    """Per-sample, per-component quantities: y (N,K,M), q = beta + y^2/(2A) (N,K,M), log MST (N,K)."""
    y = np.einsum("kjm,nkj->nkm", P.D, z[:, None, :] - P.mu[None])
    q = P.beta + y * y / (2.0 * P.A)
    a = P.alpha
    const = gammaln(a + 0.5) - gammaln(a) - 0.5 * (LOG_2PI + np.log(P.A)) + a * np.log(P.beta)
    logp = np.sum(const - (a + 0.5) * np.log(q), axis=2)
    return y, q, logp


def mst_logpdf(p: MstParams, z):
    """Log density of one component; ``z`` is (M,) or (N, M)."""
    P = MmstParams([1.0], p.mu[None], p.D[None], p.A[None], p.alpha[None], p.beta[None])
    zb, single = _as_batch(z, P.M)
    out = _component_terms(P, zb)[2][:, 0]
    return float(out[0]) if single else out


def mmst_logpdf(P: MmstParams, z):
    zb, single = _as_batch(z, P.M)
    with np.errstate(divide="ignore"):
        logpi = np.log(P.pi)
    out = logsumexp(logpi + _component_terms(P, zb)[2], axis=1)
    return float(out[0]) if single else out


def _responsibilities(logpi, logp):
    lr = logpi + logp
    lr -= lr.max(axis=1, keepdims=True)
    r = np.exp(lr)
    return r / r.sum(axis=1, keepdims=True)


def responsibilities(P: MmstParams, z):
    zb, single = _as_batch(z, P.M)
    with np.errstate(divide="ignore"):
        logpi = np.log(P.pi)
    r = _responsibilities(logpi, _component_terms(P, zb)[2])
    return r[0] if single else r


def scale_expectation(P: MmstParams, z):
    """Posterior mean of every scale variable, mixed over components by responsibility."""
    zb, single = _as_batch(z, P.M)
    with np.errstate(divide="ignore"):
        logpi = np.log(P.pi)
    _, q, logp = _component_terms(P, zb)
    r = _responsibilities(logpi, logp)
    w = np.einsum("nk,nkm->nm", r, (P.alpha + 0.5) / q)
    return w[0] if single else w


def proximity(P: MmstParams, z, chunk=20000):
    zb, single = _as_batch(z, P.M)
    out = np.concatenate([scale_expectation(P, zb[s:s + chunk]).max(axis=1) for s in range(0, len(zb), chunk)])
    return float(out[0]) if single else out


def anomaly_score(P: MmstParams, z):
    """Higher means more anomalous: the negated proximity."""
    out = proximity(P, z)
    return -out


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------


def _kmeanspp(z, k, rng):
    centers = [z[rng.integers(len(z))]]
    d2 = np.sum((z - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        c = z[rng.choice(len(z), p=d2 / total)]
        centers.append(c)
        d2 = np.minimum(d2, np.sum((z - c) ** 2, axis=1))
    return np.array(centers)


def _assign(z, centers):
    d2 = np.sum(z * z, axis=1)[:, None] - 2 * z @ centers.T + np.sum(centers * centers, axis=1)[None]
    return np.argmin(d2, axis=1)


def init_params(samples, K, seed=0, subsample=5000, lloyd_iters=10) -> MmstParams:
    """k-means++ seeding (plus a few Lloyd refinements) and per-cluster scatter eigensystems."""
    z = np.asarray(samples, dtype=np.float64)
    if z.ndim != 2 or len(z) < K:
        raise ValueError(f"need at least K={K} samples")
    if len(np.unique(z, axis=0)) < K:
        raise ValueError(f"fewer than K={K} distinct samples")
    rng = np.random.default_rng(seed)
    sub = z if len(z) <= subsample else z[rng.choice(len(z), subsample, replace=False)]
    centers = _kmeanspp(sub, K, rng)
    if len(centers) < K:
        raise ValueError(f"fewer than K={K} distinct samples")
    for _ in range(lloyd_iters):
        lab = _assign(sub, centers)
        new = np.array([sub[lab == k].mean(axis=0) if np.any(lab == k) else centers[k] for k in range(K)])
        if np.allclose(new, centers):
            break
        centers = new
    lab = _assign(sub, centers)
    M = z.shape[1]
    mu = np.empty((K, M))
    D = np.empty((K, M, M))
    A = np.empty((K, M))
    counts = np.array([np.sum(lab == k) for k in range(K)])
    for k in range(K):
        pts = sub[lab == k]
        mu[k] = pts.mean(axis=0) if len(pts) else centers[k]
        S = (pts - mu[k]).T @ (pts - mu[k]) / max(len(pts), 1)
        ev, vec = np.linalg.eigh(S)
        order = np.argsort(ev)[::-1]
        D[k] = vec[:, order]
        A[k] = np.maximum(ev[order], A_FLOOR_INIT)
    return MmstParams(np.full(K, 1.0 / K), mu, D, A, np.ones((K, M)), np.ones((K, M)))


# --------------------------------------------------------------------------
# online EM
# --------------------------------------------------------------------------


@dataclass
class SuffStats:
    """Running averages of the complete-data statistics, per component.

    ``s1``/``s2`` hold weighted first/second moments of ``u = D^T z`` in the
    current component basis; ``sz``/``szz`` are basis-free moments used to
    refresh ``D``.
    """

    s0: np.ndarray  # (K,)
    s1: np.ndarray  # (K, M)
    s2: np.ndarray
    s3: np.ndarray
    s4: np.ndarray
    sz: np.ndarray  # (K, M)
    szz: np.ndarray  # (K, M, M)

    def copy(self):
        return SuffStats(*(np.array(getattr(self, f)) for f in ("s0", "s1", "s2", "s3", "s4", "sz", "szz")))


def expected_stats(P: MmstParams, z) -> SuffStats:
    """Average of the per-sample statistics over ``z`` (N, M) under ``P``."""
    zb, _ = _as_batch(z, P.M)
    with np.errstate(divide="ignore"):
        logpi = np.log(P.pi)
    y, q, logp = _component_terms(P, zb)
    r = _responsibilities(logpi, logp)
    w = (P.alpha + 0.5) / q
    lw = digamma(P.alpha + 0.5) - np.log(q)
    u = np.einsum("kjm,nj->nkm", P.D, zb)
    rw = r[:, :, None] * w
    n = len(zb)
    return SuffStats(
        s0=r.sum(0) / n,
        s1=(rw * u).sum(0) / n,
        s2=(rw * u * u).sum(0) / n,
        s3=rw.sum(0) / n,
        s4=(r[:, :, None] * lw).sum(0) / n,
        sz=np.einsum("nk,nj->kj", r, zb) / n,
        szz=np.einsum("nk,ni,nj->kij", r, zb, zb) / n,
    )


def _minka_shape(b):
    """Closed-form approximation to the root of ``log(a) - digamma(a) = b`` (b > 0)."""
    return (3.0 - b + np.sqrt((b - 3.0) ** 2 + 24.0 * b)) / (12.0 * b)


def _solve_shape_np(b, lo, hi, iters=12):
    """Solve ``log(a) - digamma(a) = b`` elementwise for ``a`` in [lo, hi].

    Newton in log(a) from the closed-form seed; a step that leaves the
    bracket is replaced by bisection.
    """
    b = np.asarray(b, dtype=np.float64)
    xl = np.full(b.shape, np.log(lo))
    xh = np.full(b.shape, np.log(hi))
    pos = np.maximum(b, 1e-300)
    x = np.clip(np.log(_minka_shape(pos)), xl, xh)
    for _ in range(iters):
        a = np.exp(x)
        h = np.log(a) - digamma(a) - b
        xl = np.where(h > 0.0, x, xl)
        xh = np.where(h > 0.0, xh, x)
        xn = x - h / np.minimum(1.0 - a * trigamma(a), -1e-300)
        x = np.where((xn <= xl) | (xn >= xh) | ~np.isfinite(xn), 0.5 * (xl + xh), xn)
    return np.where(b <= 0, hi, np.clip(np.exp(x), lo, hi))


@kernel
def _solve_shape_scalar(b, lo, hi):
    if b <= 0.0:
        return hi
    xl = math.log(lo)
    xh = math.log(hi)
    x = math.log((3.0 - b + math.sqrt((b - 3.0) ** 2 + 24.0 * b)) / (12.0 * b))
    x = min(max(x, xl), xh)
    for _ in range(50):
        a = math.exp(x)
        h = x - digamma_scalar(a) - b
        if h > 0.0:
            xl = x
        else:
            xh = x
        dh = 1.0 - a * trigamma_scalar(a)
        xn = x - h / min(dh, -1e-300)
        if not (xl < xn < xh):
            xn = 0.5 * (xl + xh)
        if abs(xn - x) < 1e-14:
            x = xn
            break
        x = xn
    return min(max(math.exp(x), lo), hi)


def _em_chunk_np(Z, t_first, kappa, t0, t_min, logpi, mu, D, A, alpha, s0, s1, s2, s3, s4, sz, szz, a_lo, a_hi, a_floor):
    """Vectorized-over-(K, M) recursion over the rows of ``Z``; state arrays are updated in place.

    Returns the number of rejected (non-finite) steps.
    """
    K, M = A.shape
    rejected = 0
    for n in range(Z.shape[0]):
        t = t_first + n
        z = Z[n]
        g = (t + t0) ** (-kappa)

        # E-step
        y = np.einsum("kjm,kj->km", D, z[None] - mu)
        u = np.einsum("kjm,j->km", D, z)
        q = alpha + y * y / (2.0 * A)
        lp = (lgamma(alpha + 0.5) - lgamma(alpha) - 0.5 * (LOG_2PI + np.log(A)) + alpha * np.log(alpha) - (alpha + 0.5) * np.log(q)).sum(axis=1)
        lr = logpi + lp
        r = np.exp(lr - lr.max())
        r /= r.sum()
        w = (alpha + 0.5) / q
        lw = digamma(alpha + 0.5) - np.log(q)
        rk = r[:, None]

        n0 = (1.0 - g) * s0 + g * r
        n1 = (1.0 - g) * s1 + g * rk * w * u
        n2 = (1.0 - g) * s2 + g * rk * w * u * u
        n3 = (1.0 - g) * s3 + g * rk * w
        n4 = (1.0 - g) * s4 + g * rk * lw
        nz = (1.0 - g) * sz + g * rk * z[None]
        nzz = (1.0 - g) * szz + g * r[:, None, None] * np.outer(z, z)[None]
        ok = all(np.isfinite(v).all() for v in (n0, n1, n2, n3, n4, nz, nzz))

        # M-step
        mstep = t >= t_min
        if ok and mstep:
            live = n0 > 1e-12
            pi = n0 / n0.sum()
            safe0 = np.maximum(n0, 1e-300)[:, None]
            mu_u = n1 / np.maximum(n3, 1e-300)
            a_new = np.maximum((n2 - n1 * mu_u) / safe0, a_floor)
            shape = _solve_shape_np((n3 - n4) / safe0 - 1.0, a_lo, a_hi)
            mu_new = np.einsum("kjm,km->kj", D, mu_u)
            ok = np.isfinite(pi).all() and all(np.isfinite(v[live]).all() for v in (a_new, shape, mu_new))
        if not ok:
            rejected += 1
            continue
        s0[:], s1[:], s2[:], s3[:], s4[:], sz[:], szz[:] = n0, n1, n2, n3, n4, nz, nzz
        if mstep:
            logpi[:] = np.log(np.maximum(pi, 1e-300))
            mu[live], A[live], alpha[live] = mu_new[live], a_new[live], shape[live]
    return rejected


@kernel
def _em_chunk_nb(Z, t_first, kappa, t0, t_min, logpi, mu, D, A, alpha, s0, s1, s2, s3, s4, sz, szz, a_lo, a_hi, a_floor):
    """Scalar-loop twin of ``_em_chunk_np`` for numba."""
    K, M = A.shape
    log2pi = math.log(2.0 * math.pi)
    const = np.empty((K, M))
    dg = np.empty((K, M))
    for k in range(K):
        for m in range(M):
            a = alpha[k, m]
            const[k, m] = math.lgamma(a + 0.5) - math.lgamma(a) - 0.5 * (log2pi + math.log(A[k, m])) + a * math.log(a)
            dg[k, m] = digamma_scalar(a + 0.5)
    q = np.empty((K, M))
    u = np.empty((K, M))
    lp = np.empty(K)
    r = np.empty(K)
    n0 = np.empty(K)
    n1 = np.empty((K, M))
    n2 = np.empty((K, M))
    n3 = np.empty((K, M))
    n4 = np.empty((K, M))
    nz = np.empty((K, M))
    nzz = np.empty((K, M, M))
    pi = np.empty(K)
    mu_new = np.empty((K, M))
    a_new = np.empty((K, M))
    shape = np.empty((K, M))
    rejected = 0
    for n in range(Z.shape[0]):
        t = t_first + n
        z = Z[n]
        g = (t + t0) ** (-kappa)
        h = 1.0 - g

        # E-step
        for k in range(K):
            acc = logpi[k]
            for m in range(M):
                y = 0.0
                uu = 0.0
                for j in range(M):
                    y += D[k, j, m] * (z[j] - mu[k, j])
                    uu += D[k, j, m] * z[j]
                qq = alpha[k, m] + y * y / (2.0 * A[k, m])
                q[k, m] = qq
                u[k, m] = uu
                acc += const[k, m] - (alpha[k, m] + 0.5) * math.log(qq)
            lp[k] = acc
        top = lp.max()
        tot = 0.0
        for k in range(K):
            r[k] = math.exp(lp[k] - top)
            tot += r[k]
        check = 0.0
        for k in range(K):
            rk = r[k] / tot
            n0[k] = h * s0[k] + g * rk
            for m in range(M):
                w = (alpha[k, m] + 0.5) / q[k, m]
                lw = dg[k, m] - math.log(q[k, m])
                n1[k, m] = h * s1[k, m] + g * rk * w * u[k, m]
                n2[k, m] = h * s2[k, m] + g * rk * w * u[k, m] * u[k, m]
                n3[k, m] = h * s3[k, m] + g * rk * w
                n4[k, m] = h * s4[k, m] + g * rk * lw
                nz[k, m] = h * sz[k, m] + g * rk * z[m]
                check += n1[k, m] + n2[k, m] + n3[k, m] + n4[k, m] + nz[k, m]
                for j in range(M):
                    nzz[k, m, j] = h * szz[k, m, j] + g * rk * z[m] * z[j]
                    check += nzz[k, m, j]
            check += n0[k]
        ok = math.isfinite(check)

        # M-step
        mstep = t >= t_min
        if ok and mstep:
            tot0 = n0.sum()
            for k in range(K):
                pi[k] = n0[k] / tot0
                check += pi[k]
                if n0[k] <= 1e-12:
                    continue
                for m in range(M):
                    mu_u = n1[k, m] / max(n3[k, m], 1e-300)
                    a_new[k, m] = max((n2[k, m] - n1[k, m] * mu_u) / n0[k], a_floor)
                    shape[k, m] = _solve_shape_scalar((n3[k, m] - n4[k, m]) / n0[k] - 1.0, a_lo, a_hi)
                    u[k, m] = mu_u
                    check += a_new[k, m] + shape[k, m]
                for j in range(M):
                    acc = 0.0
                    for m in range(M):
                        acc += D[k, j, m] * u[k, m]
                    mu_new[k, j] = acc
                    check += acc
            ok = math.isfinite(check)
        if not ok:
            rejected += 1
            continue
        s0[:] = n0
        s1[:] = n1
        s2[:] = n2
        s3[:] = n3
        s4[:] = n4
        sz[:] = nz
        szz[:] = nzz
        if mstep:
            for k in range(K):
                logpi[k] = math.log(max(pi[k], 1e-300))
                if n0[k] <= 1e-12:
                    continue
                for m in range(M):
                    mu[k, m] = mu_new[k, m]
                    A[k, m] = a_new[k, m]
                    alpha[k, m] = shape[k, m]
                    a = alpha[k, m]
                    const[k, m] = math.lgamma(a + 0.5) - math.lgamma(a) - 0.5 * (log2pi + math.log(A[k, m])) + a * math.log(a)
                    dg[k, m] = digamma_scalar(a + 0.5)
    return rejected


@dataclass
class EmState:
    """Mutable online-EM state: parameters, statistics, step counter and rejection count."""

    logpi: np.ndarray
    mu: np.ndarray
    D: np.ndarray
    A: np.ndarray
    alpha: np.ndarray
    stats: SuffStats
    t: int = 0
    rejected: int = 0

    @classmethod
    def start(cls, P: MmstParams, stats: SuffStats):
        with np.errstate(divide="ignore"):
            logpi = np.log(P.pi)
        return cls(logpi, P.mu.copy(), P.D.copy(), P.A.copy(), P.alpha.copy(), stats.copy())

    def params(self) -> MmstParams:
        pi = np.exp(self.logpi)
        return MmstParams(pi / pi.sum(), self.mu, self.D, self.A, self.alpha, self.alpha)


@dataclass
class MmstConfig:
    K: int = 9
    kappa: float = 0.6
    t0: float = 100.0
    t_min: int = 500
    refresh_every: int = 1000
    n_passes: int = 1
    warmup: int = 2000
    heldout: int = 2000
    eval_every: int = 5000
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.5 < self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in (0.5, 1], got {self.kappa}")
        if self.t0 < 0 or self.t_min < 0 or self.refresh_every < 1 or self.n_passes < 1:
            raise ValueError("t0, t_min must be >= 0; refresh_every, n_passes >= 1")


def run_chunk(state: EmState, Z, kappa, t0, t_min, use_numba=USE_NUMBA):
    s = state.stats
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    fn = _em_chunk_nb if use_numba else _em_chunk_np
    state.rejected += int(
        fn(Z, state.t + 1, float(kappa), float(t0), int(t_min), state.logpi, state.mu, state.D, state.A, state.alpha,
                  s.s0, s.s1, s.s2, s.s3, s.s4, s.sz, s.szz, SHAPE_BOUNDS[0], SHAPE_BOUNDS[1], A_FLOOR)
    )
    state.t += len(Z)


def online_em_step(P: MmstParams, stats: SuffStats, z_t, t, kappa=0.6, t0=100.0, t_min=0):
    """One step of the recursion at time ``t`` (1-based). Returns ``(params, stats, accepted)``."""
    if t < 1:
        raise ValueError("t must be >= 1")
    if not 0.5 < kappa <= 1.0:
        raise ValueError("kappa must lie in (0.5, 1]")
    state = EmState.start(P, stats)
    state.t = t - 1
    run_chunk(state, np.asarray(z_t, dtype=np.float64).reshape(1, -1), kappa, t0, t_min)
    return state.params(), state.stats, state.rejected == 0


def refresh_directions(state: EmState):
    """Re-align each component basis with the eigenvectors of its scatter.

    Direction-wise statistics are carried into the new basis by mixing with
    the squared rotation coefficients, which keeps ``mu`` fixed and ``A``,
    ``alpha`` equal to the diagonal of their rotated counterparts.
    """
    s = state.stats
    K, M = state.A.shape
    for k in range(K):
        if s.s0[k] <= 1e-12:
            continue
        mean = s.sz[k] / s.s0[k]
        S = s.szz[k] / s.s0[k] - np.outer(mean, mean)
        ev, vec = np.linalg.eigh(0.5 * (S + S.T))
        vec = vec[:, np.argsort(ev)[::-1]]
        # sign convention: each new direction points like its best-matching old one
        R = vec.T @ state.D[k]
        vec = vec * np.sign(R[np.arange(M), np.argmax(np.abs(R), axis=1)] + 1e-300)
        R = vec.T @ state.D[k]
        R2 = R * R
        s3 = R2 @ s.s3[k]
        s4 = R2 @ s.s4[k]
        A = np.maximum(R2 @ state.A[k], A_FLOOR)
        mu_u = vec.T @ state.mu[k]
        s.s3[k] = s3
        s.s4[k] = s4
        s.s1[k] = s3 * mu_u
        s.s2[k] = s3 * mu_u * mu_u + s.s0[k] * A
        state.A[k] = A
        state.alpha[k] = np.clip(R2 @ state.alpha[k], *SHAPE_BOUNDS)
        state.D[k] = vec


@dataclass
class FitResult:
    params: MmstParams
    trace: list = field(default_factory=list)  # (step, heldout_loglik, rejected_steps)
    pass_loglik: list = field(default_factory=list)
    rejected: int = 0


def fit_mmst(latents, cfg: MmstConfig | None = None, heldout=None) -> FitResult:
    """Initialize on a warm-up buffer, then stream the latents through online EM."""
    cfg = cfg or MmstConfig()
    z = np.asarray(latents, dtype=np.float64)
    rng = np.random.default_rng([cfg.seed, 7])
    if cfg.shuffle:
        z = z[rng.permutation(len(z))]
    if heldout is None:
        n_h = min(cfg.heldout, len(z) // 10)
        heldout, z = z[:n_h], z[n_h:]
    if len(z) < cfg.t_min:
        raise ValueError(f"stream of {len(z)} samples is shorter than the burn-in ({cfg.t_min})")
    warm = z[: max(cfg.warmup, cfg.K)]
    P0 = init_params(warm, cfg.K, seed=cfg.seed)
    state = EmState.start(P0, expected_stats(P0, warm))
    res = FitResult(P0)

    def record():
        ll = float(np.mean(mmst_logpdf(state.params(), heldout))) if len(heldout) else float("nan")
        res.trace.append((state.t, ll, state.rejected))
        return ll

    block = cfg.refresh_every
    for p in range(cfg.n_passes):
        order = np.arange(len(z)) if p == 0 else rng.permutation(len(z))
        next_eval = state.t + cfg.eval_every
        for s in range(0, len(z), block):
            run_chunk(state, z[order[s:s + block]], cfg.kappa, cfg.t0, cfg.t_min)
            if state.t >= cfg.t_min:
                refresh_directions(state)
            if state.t >= next_eval:
                record()
                next_eval += cfg.eval_every
        res.pass_loglik.append(record())
        log.info("pass %d: heldout loglik %.6g, rejected %d", p + 1, res.pass_loglik[-1], state.rejected)
    res.params = state.params()
    res.rejected = state.rejected
    return res


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "heldout_loglik", "rejected_steps"])
        for row in trace:
            w.writerow([row[0], repr(row[1]), row[2]])


def params_to_bytes(P: MmstParams) -> bytes:
    return container.dumps("mmst", {"K": P.K, "M": P.M}, {"pi": P.pi, "mu": P.mu, "D": P.D, "A": P.A, "alpha": P.alpha, "beta": P.beta})


def params_from_bytes(buf: bytes) -> MmstParams:
    _, _, a = container.loads(buf, "mmst")
    return MmstParams(a["pi"], a["mu"], a["D"], a["A"], a["alpha"], a["beta"])
