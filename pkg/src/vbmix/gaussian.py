"""Gauss-Wishart machinery: partitioned Gaussians, variational expectations,
KL divergences and multivariate digamma/trigamma functions.

Parameterization: a Gauss-Wishart ``NW(mu, Lambda | m, b, V, nu)`` has
``Lambda ~ W(V, nu)`` (so ``E[Lambda] = nu V``) and
``mu | Lambda ~ N(m, (b Lambda)^-1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, multigammaln, polygamma

from .errors import NumericalError, SingularityError, ValidationError
from .volume import MissingPattern

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)

RCOND_MIN = 1e-12
JITTER_SCALE = 1e-8


def spd_cholesky(A: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    A matrix whose reciprocal condition number falls below ``RCOND_MIN``
    gets ``JITTER_SCALE * trace / n`` added to its diagonal once; a second
    failure raises :class:`SingularityError`.
    """
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    for attempt in range(2):
        try:
            eig = np.linalg.eigvalsh(A)
        except np.linalg.LinAlgError:
            eig = np.array([0.0, 1.0])
        ok = np.all(np.isfinite(eig)) and eig[0] > 0 and eig[0] >= RCOND_MIN * eig[-1]
        if ok:
            try:
                return np.linalg.cholesky(A)
            except np.linalg.LinAlgError:
                pass
        if attempt == 0:
            jitter = JITTER_SCALE * abs(np.trace(A)) / n
            if not np.isfinite(jitter) or jitter == 0.0:
                break
            A = A + jitter * np.eye(n)
    raise SingularityError(f"{what} is singular or not positive definite")


def logdet_from_chol(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def spd_inverse(A: np.ndarray, what: str = "matrix") -> np.ndarray:
    L = spd_cholesky(A, what)
    Linv = np.linalg.solve(L, np.eye(A.shape[0]))
    inv = Linv.T @ Linv
    return 0.5 * (inv + inv.T)


def spd_logdet(A: np.ndarray, what: str = "matrix") -> float:
    return logdet_from_chol(spd_cholesky(A, what))


@dataclass(frozen=True, eq=False)
class GaussWishartParams:
    """One class's Gauss-Wishart parameters, used as prior or posterior."""

    mu: np.ndarray
    b: float
    V: np.ndarray
    nu: float

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        M = mu.shape[0]
        V = np.asarray(self.V, dtype=float).reshape(M, M)
        b, nu = float(self.b), float(self.nu)
        if not b > 0 or not np.isfinite(b):
            raise ValidationError(f"b must be positive and finite, got {b}")
        if not nu > M - 1 or not np.isfinite(nu):
            raise ValidationError(f"nu must exceed M-1={M - 1}, got {nu}")
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(V)):
            raise ValidationError("mu and V must be finite")
        scale = np.abs(V).max()
        if np.abs(V - V.T).max() > 1e-12 * scale:
            raise ValidationError("V is not symmetric")
        V = 0.5 * (V + V.T)
        try:
            np.linalg.cholesky(V)
        except np.linalg.LinAlgError:
            raise ValidationError("V is not positive definite") from None
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "nu", nu)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def expected_precision(self) -> np.ndarray:
        return self.nu * self.V

    @property
    def expected_logdet_precision(self) -> float:
        """``E[ln|Lambda|] = psi_M(nu/2) + M ln 2 + ln|V|``."""
        return (
            multivariate_digamma(0.5 * self.nu, self.dim)
            + self.dim * LOG_2
            + spd_logdet(self.V, "Wishart scale V")
        )

    def to_dict(self) -> dict:
        return {"mu0": self.mu.tolist(), "b0": self.b, "nu0": self.nu, "V0": self.V.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussWishartParams":
        return cls(doc["mu0"], doc["b0"], doc["V0"], doc["nu0"])

    def allclose(self, other: "GaussWishartParams", rtol=1e-12, atol=0.0) -> bool:
        return (
            np.allclose(self.mu, other.mu, rtol=rtol, atol=atol)
            and np.isclose(self.b, other.b, rtol=rtol, atol=atol)
            and np.allclose(self.V, other.V, rtol=rtol, atol=atol)
            and np.isclose(self.nu, other.nu, rtol=rtol, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class ConditionalGaussian:
    """Gaussian over missing channels: mean ``h_mean`` (``(Mm,)`` or
    ``(n, Mm)`` for a batch of voxels) and shared covariance ``S``."""

    h_mean: np.ndarray
    S: np.ndarray


def multivariate_digamma(x, M: int):
    """``psi_M(x) = sum_{i=1..M} psi(x + (1 - i)/2)``, defined for x > (M-1)/2."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.5 * (M - 1)):
        raise ValidationError(f"multivariate digamma requires x > {(M - 1) / 2}")
    out = sum(digamma(x + 0.5 * (1 - i)) for i in range(1, M + 1))
    return float(out) if out.ndim == 0 else out


def multivariate_trigamma(x, M: int):
    """``psi'_M(x) = sum_{i=1..M} psi'(x + (1 - i)/2)``."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.5 * (M - 1)):
        raise ValidationError(f"multivariate trigamma requires x > {(M - 1) / 2}")
    out = sum(polygamma(1, x + 0.5 * (1 - i)) for i in range(1, M + 1))
    return float(out) if out.ndim == 0 else out


def _check_pattern(pattern: MissingPattern, M: int):
    if pattern.channels != M:
        raise ValidationError(f"pattern covers {pattern.channels} channels, expected {M}")


def marginal_observed(mu, Sigma, pattern: MissingPattern):
    """Mean and covariance of the observed channels."""
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    _check_pattern(pattern, mu.shape[0])
    o = pattern.o
    if o.size == 0:
        raise ValidationError("marginal of an empty observed set")
    return mu[o], Sigma[np.ix_(o, o)]


def conditional_gain(Lambda, pattern: MissingPattern):
    """Pieces of the missing-given-observed conditional of a precision matrix.

    Returns ``(gain, S, logdet_mm)`` with ``gain = Lambda_mm^-1 Lambda_mo``,
    ``S = Lambda_mm^-1`` and ``logdet_mm = ln|Lambda_mm|``.
    """
    m, o = pattern.m, pattern.o
    if m.size == 0:
        raise ValidationError("conditional requested with nothing missing")
    L = spd_cholesky(Lambda[np.ix_(m, m)], f"precision block for missing channels {m.tolist()}")
    Linv = np.linalg.solve(L, np.eye(m.size))
    S = Linv.T @ Linv
    S = 0.5 * (S + S.T)
    gain = S @ Lambda[np.ix_(m, o)]
    return gain, S, logdet_from_chol(L)


def conditional_missing(mu, Lambda, pattern: MissingPattern, g) -> ConditionalGaussian:
    """Conditional of missing channels given observed values ``g``.

    ``h_mean = mu_m - Lambda_mm^-1 Lambda_mo (g - mu_o)``, ``S = Lambda_mm^-1``.
    ``g`` may be a single ``(Mo,)`` vector or a ``(n, Mo)`` batch.
    """
    mu = np.asarray(mu, dtype=float)
    Lambda = np.asarray(Lambda, dtype=float)
    _check_pattern(pattern, mu.shape[0])
    g = np.asarray(g, dtype=float)
    if g.shape[-1:] != (pattern.o.size,) and not (pattern.o.size == 0 and g.size == 0):
        raise ValidationError(f"g must have {pattern.o.size} observed entries")
    if not np.all(np.isfinite(g)):
        raise ValidationError("observed values must be finite")
    gain, S, _ = conditional_gain(Lambda, pattern)
    if pattern.o.size == 0:
        h = mu[pattern.m].copy()
        if g.ndim == 2:
            h = np.broadcast_to(h, (g.shape[0], h.size)).copy()
        return ConditionalGaussian(h, S)
    h = mu[pattern.m] - (g - mu[pattern.o]) @ gain.T
    return ConditionalGaussian(h, S)


def marginal_log_terms(q: GaussWishartParams, pattern: MissingPattern):
    """Per-(pattern, class) pieces of :func:`expected_log_marginal_density`.

    Returns ``(const, schur, mu_o)`` such that the density at ``g`` equals
    ``const - 0.5 (g - mu_o)^T schur (g - mu_o)``.
    """
    _check_pattern(pattern, q.dim)
    o, m = pattern.o, pattern.m
    if o.size == 0:
        raise ValidationError("expected log-density of an empty observed set")
    Lam = q.expected_precision
    const = 0.5 * q.expected_logdet_precision - 0.5 * o.size * LOG_2PI - 0.5 * q.dim / q.b
    if m.size == 0:
        schur = Lam
    else:
        gain, _, logdet_mm = conditional_gain(Lam, pattern)
        schur = Lam[np.ix_(o, o)] - Lam[np.ix_(o, m)] @ gain
        schur = 0.5 * (schur + schur.T)
        const -= 0.5 * logdet_mm
    return const, schur, q.mu[o]


def expected_log_marginal_density(q: GaussWishartParams, g, pattern: MissingPattern):
    """Variational log-density of observed channels under ``q``.

    The value is ``ln ∫ exp(E_q[ln N(x | mu, Lambda^-1)]) dh`` where ``x``
    stacks observed ``g`` and missing ``h``:

        0.5 E[ln|Lambda|] - 0.5 ln|Lam_mm| - Mo/2 ln 2pi - M/(2b)
            - 0.5 (g - m_o)^T (Lam_oo - Lam_om Lam_mm^-1 Lam_mo) (g - m_o)

    with ``Lam = nu V``. It reduces to the usual variational GMM term when
    nothing is missing, and makes the responsibility update an exact
    coordinate-ascent step when missing values carry a Gaussian ``q(h|z)``.
    """
    g = np.asarray(g, dtype=float)
    const, schur, mu_o = marginal_log_terms(q, pattern)
    r = g - mu_o
    return const - 0.5 * np.einsum("...i,ij,...j->...", r, schur, r)


def expected_log_marginal_exact(q: GaussWishartParams, g, pattern: MissingPattern):
    """``E_q[ln N(g | mu_o, Sigma_oo)]`` in closed form.

    Uses that ``Sigma_oo^-1 ~ W(V_oo - V_om V_mm^-1 V_mo, nu - Mm)``. Always
    at least :func:`expected_log_marginal_density` (Jensen).
    """
    _check_pattern(pattern, q.dim)
    o, m = pattern.o, pattern.m
    if o.size == 0:
        raise ValidationError("expected log-density of an empty observed set")
    V = q.V
    if m.size:
        schur_V = V[np.ix_(o, o)] - V[np.ix_(o, m)] @ np.linalg.solve(V[np.ix_(m, m)], V[np.ix_(m, o)])
    else:
        schur_V = V
    dof = q.nu - m.size
    Mo = o.size
    e_logdet = multivariate_digamma(0.5 * dof, Mo) + Mo * LOG_2 + spd_logdet(schur_V)
    r = np.asarray(g, dtype=float) - q.mu[o]
    quad = dof * np.einsum("...i,ij,...j->...", r, schur_V, r) + Mo / q.b
    return 0.5 * e_logdet - 0.5 * Mo * LOG_2PI - 0.5 * quad


def kl_wishart(Vq, nuq, Vp, nup) -> float:
    """``KL(W(Vq, nuq) || W(Vp, nup))``."""
    M = Vq.shape[0]
    Lp = spd_cholesky(Vp, "prior Wishart scale")
    logdet_p = logdet_from_chol(Lp)
    logdet_q = spd_logdet(Vq, "posterior Wishart scale")
    Vp_inv_Vq = np.linalg.solve(Lp.T, np.linalg.solve(Lp, Vq))
    return (
        0.5 * nup * (logdet_p - logdet_q)
        + 0.5 * nuq * (np.trace(Vp_inv_Vq) - M)
        + multigammaln(0.5 * nup, M)
        - multigammaln(0.5 * nuq, M)
        + 0.5 * (nuq - nup) * multivariate_digamma(0.5 * nuq, M)
    )


def kl_gauss_wishart(q: GaussWishartParams, p: GaussWishartParams) -> float:
    """``KL(NW(q) || NW(p))``: Wishart KL plus the expected KL of the mean."""
    if q.dim != p.dim:
        raise ValidationError(f"dimension mismatch: {q.dim} vs {p.dim}")
    M = q.dim
    diff = q.mu - p.mu
    mean_kl = 0.5 * (
        M * math.log(q.b / p.b)
        - M
        + M * p.b / q.b
        + p.b * q.nu * float(diff @ q.V @ diff)
    )
    return float(mean_kl + kl_wishart(q.V, q.nu, p.V, p.nu))


def kl_categorical(q, p, tol: float = 1e-9):
    """``sum_k q_k ln(q_k / p_k)`` with ``0 ln 0 = 0``.

    Works row-wise on ``(n, K)`` arrays. Returns ``inf`` where ``p_k = 0``
    while ``q_k > 0``.
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if q.shape != p.shape:
        raise ValidationError("q and p must have the same shape")
    for name, arr in (("q", q), ("p", p)):
        if (arr < -tol).any() or np.abs(arr.sum(axis=-1) - 1.0).max() > tol:
            raise ValidationError(f"{name} is not on the simplex")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * (np.log(q) - np.log(p)), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def check_finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite {what}")
    return value


__all__ = [
    "ConditionalGaussian",
    "GaussWishartParams",
    "conditional_gain",
    "conditional_missing",
    "expected_log_marginal_density",
    "expected_log_marginal_exact",
    "kl_categorical",
    "kl_gauss_wishart",
    "kl_wishart",
    "marginal_observed",
    "multivariate_digamma",
    "multivariate_trigamma",
    "spd_cholesky",
    "spd_inverse",
    "spd_logdet",
]
