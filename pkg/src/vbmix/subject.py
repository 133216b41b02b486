"""Subject-level variational EM for a Gaussian mixture with missing channels.

Each iteration updates, in order, the responsibilities, the imputation
moments of the missing channels together with the Gauss-Wishart
posteriors, and optionally the global log-proportions. The evidence lower
bound is tracked in two algebraically equal forms: one on the observed
channels only, one on the completed data with an entropy correction for
the imputed values.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ValidationError
from .gaussian import (
    LOG_2PI,
    GaussWishartParams,
    check_finite,
    conditional_gain,
    kl_gauss_wishart,
    marginal_log_terms,
    spd_inverse,
)
from .volume import MultiChannelVolume

log = logging.getLogger(__name__)

EQ16_VARIANTS = ("standard", "as-written")
OMEGA_FLOOR = math.log(1e-6)


@dataclass(frozen=True, eq=False)
class TemplatePrior:
    """Class-probability logits plus global log-proportions.

    ``logits`` is ``(1, K)`` for a stationary prior or ``(D, K)`` for a
    pre-aligned spatial template. ``pi_dk = softmax_k(omega_k + a_dk)``.
    """

    logits: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        logits = np.atleast_2d(np.asarray(self.logits, dtype=float))
        omega = np.asarray(self.omega, dtype=float).reshape(-1)
        if logits.shape[1] != omega.shape[0]:
            raise ValidationError("logits and omega disagree on K")
        if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(omega))):
            raise ValidationError("template logits and omega must be finite")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "omega", omega)

    @classmethod
    def stationary(cls, K: int, omega=None) -> "TemplatePrior":
        return cls(np.zeros((1, K)), np.zeros(K) if omega is None else omega)

    @property
    def n_classes(self) -> int:
        return self.omega.shape[0]

    @property
    def is_stationary(self) -> bool:
        return self.logits.shape[0] == 1

    def with_omega(self, omega) -> "TemplatePrior":
        return replace(self, omega=np.asarray(omega, dtype=float))

    def log_pi(self) -> np.ndarray:
        """``(rows, K)`` log class probabilities, rows = 1 or D."""
        z = self.logits + self.omega
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def log_pi_for(self, n_voxels: int) -> np.ndarray:
        lp = self.log_pi()
        if lp.shape[0] == 1:
            return np.broadcast_to(lp, (n_voxels, lp.shape[1]))
        if lp.shape[0] != n_voxels:
            raise ValidationError(
                f"template has {lp.shape[0]} voxels but the volume has {n_voxels}"
            )
        return lp


@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 30
    elbo_rel_tol: float = 1e-6
    eq16_variant: str = "standard"
    update_omega: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not self.elbo_rel_tol > 0:
            raise ValidationError("elbo_rel_tol must be positive")
        if self.eq16_variant not in EQ16_VARIANTS:
            raise ValidationError(f"eq16_variant must be one of {EQ16_VARIANTS}")


@dataclass(frozen=True)
class SufficientStats:
    """Per-class expected counts, first and second moments."""

    n: np.ndarray  # (K,)
    s1: np.ndarray  # (K, M)
    s2: np.ndarray  # (K, M, M)


@dataclass(frozen=True)
class ElboTerms:
    """One ELBO evaluation.

    ``loglik_observed`` is the expected log-likelihood of the observed
    channels; ``loglik_full`` that of the completed data. ``kl_h`` is the
    expected relative entropy of ``q(h|z)`` to the flat reference measure
    (its negative differential entropy), zero when nothing is missing.
    """

    loglik_observed: float
    loglik_full: float
    kl_z: float
    kl_h: float
    kl_gw: float

    @property
    def eq10(self) -> float:
        return self.loglik_observed - self.kl_z - self.kl_gw

    @property
    def eq11(self) -> float:
        return self.loglik_full - self.kl_h - self.kl_z - self.kl_gw

    @property
    def value(self) -> float:
        return self.eq10


@dataclass
class ElboTrace:
    entries: list[ElboTerms] = field(default_factory=list)

    def append(self, terms: ElboTerms) -> None:
        self.entries.append(terms)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i) -> ElboTerms:
        return self.entries[i]

    @property
    def values(self) -> np.ndarray:
        return np.array([e.eq10 for e in self.entries])

    @property
    def values_eq11(self) -> np.ndarray:
        return np.array([e.eq11 for e in self.entries])


@dataclass(frozen=True, eq=False)
class SubjectPosterior:
    """Responsibilities ``(D, K)`` and per-class Gauss-Wishart posteriors.

    Voxels with every channel missing carry ``resp = pi_d`` and take no part
    in the fit. Imputation moments are derived from ``gw`` on demand.
    """

    resp: np.ndarray
    gw: tuple[GaussWishartParams, ...]
    omega: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return len(self.gw)

    def imputation(self, vol: MultiChannelVolume):
        """Yield ``(group, [(h_mean (n, Mm), S (Mm, Mm)) per class])`` for
        every missingness pattern with at least one missing channel."""
        for group in vol.pattern_groups:
            pat = group.pattern
            if pat.all_observed:
                continue
            X = vol.data[group.index].astype(float)
            per_class = []
            for q in self.gw:
                gain, S, _ = conditional_gain(q.expected_precision, pat)
                h = q.mu[pat.m] - (X[:, pat.o] - q.mu[pat.o]) @ gain.T
                per_class.append((h, S))
            yield group, per_class


def _check_gw(vol: MultiChannelVolume, gw: Sequence[GaussWishartParams]):
    for k, q in enumerate(gw):
        if q.dim != vol.channels:
            raise ValidationError(
                f"class {k} has dimension {q.dim} but the volume has {vol.channels} channels"
            )


def included_voxels(vol: MultiChannelVolume) -> np.ndarray:
    """Mask of voxels with at least one observed channel."""
    return vol.pattern_codes != 0


def expected_log_likelihoods(vol: MultiChannelVolume, gw) -> np.ndarray:
    """``(D, K)`` matrix of observed-channel expected log-densities.

    Rows of voxels with no observed channel are zero.
    """
    _check_gw(vol, gw)
    out = np.zeros((vol.n_voxels, len(gw)))
    for group in vol.pattern_groups:
        pat = group.pattern
        if pat.all_missing:
            continue
        G = np.ascontiguousarray(vol.data[group.index][:, pat.o], dtype=float)
        for k, q in enumerate(gw):
            const, schur, mu_o = marginal_log_terms(q, pat)
            R = np.ascontiguousarray(G - mu_o)
            out[group.index, k] = const - 0.5 * kernels.quad_form(R, schur)
    return out


def _responsibilities_from_loglik(vol, log_pi, loglik):
    inc = included_voxels(vol)
    resp = np.exp(np.asarray(log_pi, dtype=float))
    if inc.any():
        logp = np.ascontiguousarray(loglik[inc] + log_pi[inc])
        resp[inc], _ = kernels.normalize_log_rows(logp)
    return resp


def update_responsibilities(vol: MultiChannelVolume, template: TemplatePrior, gw) -> np.ndarray:
    """``z_dk ∝ pi_dk exp(E[ln N(g_d | mu_k, Sigma_k)])``, log-sum-exp normalized.

    Voxels with nothing observed get ``z_d = pi_d``.
    """
    if template.n_classes != len(gw):
        raise ValidationError("template and posteriors disagree on K")
    log_pi = template.log_pi_for(vol.n_voxels)
    return _responsibilities_from_loglik(vol, log_pi, expected_log_likelihoods(vol, gw))


def impute_moments(vol: MultiChannelVolume, gw, resp, include_empty: bool = False) -> SufficientStats:
    """Accumulate expected sufficient statistics with missing channels imputed.

    Observed blocks use the data, missing blocks the conditional mean
    ``h_dk`` and second moment ``h h^T + S_k``; cross blocks ``g h^T``.
    Gains and conditional covariances are computed once per
    (pattern, class). Voxels with nothing observed are skipped unless
    ``include_empty`` is set.
    """
    _check_gw(vol, gw)
    K, M = len(gw), vol.channels
    resp = np.asarray(resp, dtype=float)
    n = np.zeros(K)
    s1 = np.zeros((K, M))
    s2 = np.zeros((K, M, M))
    for group in vol.pattern_groups:
        pat = group.pattern
        if pat.all_missing and not include_empty:
            continue
        X = vol.data[group.index].astype(float)
        W = resp[group.index]
        for k, q in enumerate(gw):
            w = np.ascontiguousarray(W[:, k])
            if pat.all_observed:
                Xk = X
                S = None
            else:
                gain, S, _ = conditional_gain(q.expected_precision, pat)
                Xk = X.copy()
                Xk[:, pat.m] = q.mu[pat.m] - (X[:, pat.o] - q.mu[pat.o]) @ gain.T
            a0, a1, a2 = kernels.weighted_moments(np.ascontiguousarray(Xk), w)
            if S is not None:
                a2 = a2.copy()
                a2[np.ix_(pat.m, pat.m)] += a0 * S
            n[k] += a0
            s1[k] += a1
            s2[k] += a2
    return SufficientStats(n, s1, s2)


def update_gauss_wishart(stats: SufficientStats, hyper, eq16_variant: str = "standard"):
    """Conjugate Gauss-Wishart posterior update from sufficient statistics.

    ``eq16_variant="as-written"`` scales the prior scale-matrix term by
    ``nu0`` (``nu0 V0^-1 + ...``) instead of the conjugate ``V0^-1 + ...``.
    """
    if eq16_variant not in EQ16_VARIANTS:
        raise ValidationError(f"eq16_variant must be one of {EQ16_VARIANTS}")
    out = []
    for k, p in enumerate(hyper):
        nk = float(stats.n[k])
        b = p.b + nk
        mu = (p.b * p.mu + stats.s1[k]) / b
        nu = p.nu + nk
        first = spd_inverse(p.V, f"prior scale of class {k}")
        if eq16_variant == "as-written":
            first = p.nu * first
        # s2 + b0 mu0 mu0^T - b mu mu^T, rewritten about mu0 to avoid cancellation
        c1 = np.outer(p.mu, stats.s1[k])
        d = stats.s1[k] - nk * p.mu
        scatter = stats.s2[k] - c1 - c1.T + nk * np.outer(p.mu, p.mu) - np.outer(d, d) / b
        Vinv = first + scatter
        V = spd_inverse(0.5 * (Vinv + Vinv.T), f"posterior inverse scale of class {k}")
        out.append(GaussWishartParams(mu, b, V, nu))
    return tuple(out)


def _categorical_term(resp_rows, log_pi_rows) -> float:
    return float(np.sum(resp_rows * log_pi_rows))


def _normalize_omega(omega: np.ndarray) -> np.ndarray:
    omega = omega - omega.max()
    return np.maximum(omega, OMEGA_FLOOR)


def omega_step(resp_rows, logits_rows, omega) -> np.ndarray:
    """Point-estimate update of log-proportions from stacked responsibilities.

    ``logits_rows`` is ``(1, K)`` (stationary) or aligned with ``resp_rows``.
    """
    resp_rows = np.asarray(resp_rows, dtype=float)
    logits_rows = np.atleast_2d(np.asarray(logits_rows, dtype=float))
    omega = np.asarray(omega, dtype=float)
    counts = resp_rows.sum(axis=0)
    with np.errstate(divide="ignore"):
        log_mean = np.log(counts / counts.sum())
    if logits_rows.shape[0] == 1:
        return _normalize_omega(log_mean - logits_rows[0])

    def cat_term(om):
        z = logits_rows + om
        z = z - z.max(axis=1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return _categorical_term(resp_rows, lp), np.exp(lp).sum(axis=0)

    current, pi_counts = cat_term(omega)
    with np.errstate(divide="ignore"):
        step = np.log(counts) - np.log(pi_counts)
    step = np.where(np.isfinite(step), step, OMEGA_FLOOR - omega)
    for _ in range(8):
        cand = _normalize_omega(omega + step)
        if cat_term(cand)[0] >= current:
            return cand
        step = 0.5 * step
    return np.asarray(omega, dtype=float)


def update_omega(resp, template: TemplatePrior, omega=None, mask=None) -> np.ndarray:
    """Update global log-proportions from one subject's responsibilities.

    With a stationary template this is the closed-form maximizer
    ``softmax(omega + a) = mean_d z_d``. With a spatial template one
    fixed-point step is taken and kept only if it does not decrease
    ``sum_dk z_dk ln pi_dk``. Result is shifted so ``max omega = 0`` and
    floored at ``ln 1e-6``.
    """
    resp = np.asarray(resp, dtype=float)
    omega = template.omega if omega is None else np.asarray(omega, dtype=float)
    logits = template.logits
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        resp = resp[mask]
        if logits.shape[0] != 1:
            logits = logits[mask]
    return omega_step(resp, logits, omega)


def elbo(vol: MultiChannelVolume, template: TemplatePrior, posterior: SubjectPosterior, hyper) -> ElboTerms:
    """Evaluate both ELBO forms at the current state.

    Imputation moments are the ones implied by ``posterior.gw``, so the two
    forms coincide up to rounding.
    """
    gw = posterior.gw
    _check_gw(vol, gw)
    resp = posterior.resp
    inc = included_voxels(vol)
    log_pi = template.log_pi_for(vol.n_voxels)
    loglik = expected_log_likelihoods(vol, gw)
    return _elbo_terms(vol, gw, hyper, resp, log_pi, inc, loglik)


def _elbo_terms(vol, gw, hyper, resp, log_pi, inc, loglik) -> ElboTerms:
    M = vol.channels
    loglik_obs = float(np.sum(resp[inc] * loglik[inc]))
    z = resp[inc]
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_rows = np.where(z > 0, z * (np.log(z) - log_pi[inc]), 0.0)
    kl_z = float(kl_rows.sum())
    kl_gw = float(sum(kl_gauss_wishart(q, p) for q, p in zip(gw, hyper)))

    e_logdet = [q.expected_logdet_precision for q in gw]
    loglik_full = 0.0
    neg_entropy = 0.0
    for group in vol.pattern_groups:
        pat = group.pattern
        if pat.all_missing:
            continue
        X = vol.data[group.index].astype(float)
        W = resp[group.index]
        for k, q in enumerate(gw):
            Lam = q.expected_precision
            if pat.all_observed:
                Xk, trace_term, ent = X, 0.0, 0.0
            else:
                gain, S, logdet_mm = conditional_gain(Lam, pat)
                Xk = X.copy()
                Xk[:, pat.m] = q.mu[pat.m] - (X[:, pat.o] - q.mu[pat.o]) @ gain.T
                trace_term = float(np.sum(Lam[np.ix_(pat.m, pat.m)] * S))
                ent = 0.5 * (pat.m.size * (1.0 + LOG_2PI) - logdet_mm)
            R = np.ascontiguousarray(Xk - q.mu)
            quad = kernels.quad_form(R, Lam)
            a = 0.5 * e_logdet[k] - 0.5 * M * LOG_2PI - 0.5 * (M / q.b + quad + trace_term)
            w = W[:, k]
            loglik_full += float(w @ a)
            neg_entropy -= ent * float(w.sum())
    return ElboTerms(loglik_obs, loglik_full, kl_z, neg_entropy, kl_gw)


def init_posterior(vol: MultiChannelVolume, model) -> SubjectPosterior:
    """Responsibilities from the template alone, posteriors at the hyperprior."""
    resp = np.exp(model.template.log_pi_for(vol.n_voxels))
    return SubjectPosterior(np.array(resp), tuple(model.hyper), model.template.omega.copy())


def fit_subject(
    vol: MultiChannelVolume,
    model,
    options: FitOptions | None = None,
    init: SubjectPosterior | None = None,
    callback: Callable[[int, SubjectPosterior, ElboTerms], None] | None = None,
) -> tuple[SubjectPosterior, ElboTrace]:
    """Variational EM for one subject under fixed population parameters.

    ``model`` needs ``hyper`` (K Gauss-Wishart priors) and ``template``.
    ``init`` warm-starts from an earlier posterior; by default the
    posteriors start at the hyperprior. Stops when the relative ELBO gain
    drops below ``options.elbo_rel_tol`` or after ``options.max_iters``.
    """
    options = options or FitOptions()
    hyper = tuple(model.hyper)
    template = model.template
    if hyper[0].dim != vol.channels:
        raise ValidationError(
            f"model has M={hyper[0].dim} channels but the volume has {vol.channels}"
        )
    if template.n_classes != len(hyper):
        raise ValidationError("template and hyperprior disagree on K")
    log_pi = np.asarray(template.log_pi_for(vol.n_voxels))
    if init is not None and init.omega is not None and options.update_omega:
        template = template.with_omega(init.omega)
        log_pi = np.asarray(template.log_pi_for(vol.n_voxels))
    inc = included_voxels(vol)
    gw = tuple(init.gw) if init is not None else hyper
    loglik = expected_log_likelihoods(vol, gw)
    trace = ElboTrace()
    posterior = None
    for it in range(options.max_iters):
        resp = _responsibilities_from_loglik(vol, log_pi, loglik)
        stats = impute_moments(vol, gw, resp)
        gw = update_gauss_wishart(stats, hyper, options.eq16_variant)
        if options.update_omega:
            template = template.with_omega(update_omega(resp, template, mask=inc))
            log_pi = np.asarray(template.log_pi_for(vol.n_voxels))
        loglik = expected_log_likelihoods(vol, gw)
        terms = _elbo_terms(vol, gw, hyper, resp, log_pi, inc, loglik)
        check_finite([terms.eq10, terms.eq11], f"ELBO at iteration {it}")
        posterior = SubjectPosterior(resp, gw, template.omega.copy())
        trace.append(terms)
        if callback is not None:
            callback(it, posterior, terms)
        log.debug("iter=%d elbo=%.10g", it, terms.eq10)
        if it > 0:
            prev = trace[-2].eq10
            if terms.eq10 - prev < options.elbo_rel_tol * abs(prev):
                break
    return posterior, trace
