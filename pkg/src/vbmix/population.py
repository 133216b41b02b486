"""Population training of Gauss-Wishart hyperpriors by empirical Bayes.

Subject posteriors and population parameters are optimized in turn; every
step is a coordinate-ascent move on the combined ELBO (the sum of subject
ELBOs).
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import multigammaln

from .errors import NumericalError, ValidationError
from .gaussian import (
    LOG_2,
    GaussWishartParams,
    multivariate_digamma,
    multivariate_trigamma,
    spd_cholesky,
    spd_logdet,
)
from .subject import (
    FitOptions,
    SubjectPosterior,
    TemplatePrior,
    elbo,
    fit_subject,
    included_voxels,
    omega_step,
)
from .volume import MultiChannelVolume, atomic_write_bytes, read_volume

log = logging.getLogger(__name__)

MODEL_VERSION = 1
B0_MIN, B0_MAX = 1e-6, 1e8
B0_VARIANTS = ("exact", "as-written")
MAX_THETA_STEP = 2.0

HyperPrior = GaussWishartParams


@dataclass(frozen=True)
class TrainOptions:
    outer_iters: int = 10
    fit: FitOptions = field(default_factory=FitOptions)
    nu0_newton_iters: int = 20
    nu0_tol: float = 1e-9
    b0_variant: str = "exact"
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.outer_iters < 1 or self.nu0_newton_iters < 1 or self.jobs < 1:
            raise ValidationError("iteration counts and jobs must be positive")
        if self.b0_variant not in B0_VARIANTS:
            raise ValidationError(f"b0_variant must be one of {B0_VARIANTS}")


@dataclass(eq=False)
class TrainedModel:
    hyper: tuple[GaussWishartParams, ...]
    template: TemplatePrior
    template_path: str | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.hyper)

    @property
    def channels(self) -> int:
        return self.hyper[0].dim

    @property
    def omega(self) -> np.ndarray:
        return self.template.omega


def update_mu0(posteriors: Sequence[Sequence[GaussWishartParams]]) -> list[np.ndarray]:
    """Precision-weighted mean of subject posterior means, per class.

    ``posteriors[n][k]`` is subject ``n``'s posterior for class ``k``.
    """
    if len(posteriors) == 0:
        raise ValidationError("need at least one subject")
    K = len(posteriors[0])
    out = []
    for k in range(K):
        qs = [post[k] for post in posteriors]
        P = sum(q.expected_precision for q in qs)
        Pm = sum(q.expected_precision @ q.mu for q in qs)
        L = spd_cholesky(P, f"accumulated precision of class {k}")
        out.append(np.linalg.solve(L.T, np.linalg.solve(L, Pm)))
    return out


def b0_inverse(posteriors, mu0, variant: str = "exact") -> np.ndarray:
    """Unclamped ``1/b0`` per class.

    ``"as-written"`` averages ``nu (mu0 - mu)^T V (mu0 - mu)`` over subjects
    and channels. ``"exact"`` adds the posterior mean uncertainty ``M / b``,
    which makes the result the maximizer of the combined ELBO.
    """
    if variant not in B0_VARIANTS:
        raise ValidationError(f"b0 variant must be one of {B0_VARIANTS}")
    N = len(posteriors)
    K = len(posteriors[0])
    out = np.empty(K)
    for k in range(K):
        total = 0.0
        for post in posteriors:
            q = post[k]
            d = mu0[k] - q.mu
            total += q.nu * float(d @ q.V @ d)
            if variant == "exact":
                total += q.dim / q.b
        out[k] = total / (N * posteriors[0][k].dim)
    return out


def update_b0(posteriors, mu0, variant: str = "exact") -> np.ndarray:
    """Mean-precision scaling per class, clamped to ``[1e-6, 1e8]``."""
    inv = b0_inverse(posteriors, mu0, variant)
    with np.errstate(divide="ignore"):
        b0 = np.where(inv > 0, 1.0 / inv, np.inf)
    return np.clip(b0, B0_MIN, B0_MAX)


def update_V0(posteriors, nu0) -> list[np.ndarray]:
    """``V0 = sum_n nu_n V_n / (N nu0)``, symmetrized."""
    N = len(posteriors)
    K = len(posteriors[0])
    nu0 = np.broadcast_to(np.asarray(nu0, dtype=float), (K,))
    out = []
    for k in range(K):
        S = sum(post[k].expected_precision for post in posteriors)
        V = S / (N * nu0[k])
        out.append(0.5 * (V + V.T))
    return out


def _sum_expected_logdet(qs) -> float:
    M = qs[0].dim
    return sum(multivariate_digamma(0.5 * q.nu, M) + M * LOG_2 + spd_logdet(q.V) for q in qs)


def nu0_objective(qs: Sequence[GaussWishartParams], V0, nu0: float) -> float:
    """ELBO terms depending on ``nu0`` for one class with ``V0`` held fixed."""
    N, M = len(qs), qs[0].dim
    return (
        0.5 * nu0 * _sum_expected_logdet(qs)
        - 0.5 * N * nu0 * spd_logdet(V0)
        - 0.5 * N * nu0 * M * LOG_2
        - N * multigammaln(0.5 * nu0, M)
    )


def nu0_gradient(qs: Sequence[GaussWishartParams], V0, nu0: float) -> float:
    """``dL/dnu0 = -1/2 (N (ln|V0| + psi_M(nu0/2)) - sum_n (ln|V_n| + psi_M(nu_n/2)))``."""
    N, M = len(qs), qs[0].dim
    subj = sum(spd_logdet(q.V) + multivariate_digamma(0.5 * q.nu, M) for q in qs)
    return -0.5 * (N * (spd_logdet(V0) + multivariate_digamma(0.5 * nu0, M)) - subj)


def nu0_hessian(qs: Sequence[GaussWishartParams], nu0: float) -> float:
    """``d2L/dnu0^2 = -(N/4) psi'_M(nu0/2)``."""
    return -0.25 * len(qs) * multivariate_trigamma(0.5 * nu0, qs[0].dim)


def _nu0_newton(qs, V0, nu0_init, max_iters, tol):
    M, N = qs[0].dim, len(qs)
    logdet_V0 = spd_logdet(V0)
    subj = sum(spd_logdet(q.V) + multivariate_digamma(0.5 * q.nu, M) for q in qs)

    def grad(nu):
        return -0.5 * (N * (logdet_V0 + multivariate_digamma(0.5 * nu, M)) - subj)

    # The objective is concave in nu0, so the sign of the gradient brackets
    # the maximizer; Newton steps leaving the bracket fall back to bisection.
    lo, hi = -math.inf, math.inf
    theta = math.log(nu0_init - (M - 1))
    for _ in range(max_iters):
        e = math.exp(theta)
        g = grad((M - 1) + e)
        if not math.isfinite(g):
            raise NumericalError("non-finite nu0 gradient")
        if abs(g) < tol:
            break
        if g > 0:
            lo = theta
        else:
            hi = theta
        d2 = nu0_hessian(qs, (M - 1) + e) * e * e + g * e
        cand = theta - g * e / d2 if d2 < 0 else math.nan
        cand = min(max(cand, theta - MAX_THETA_STEP), theta + MAX_THETA_STEP)
        if not lo < cand < hi:
            if math.isfinite(lo) and math.isfinite(hi):
                cand = 0.5 * (lo + hi)
            else:
                cand = theta + (MAX_THETA_STEP if g > 0 else -MAX_THETA_STEP)
        theta = min(cand, 700.0)
    return (M - 1) + math.exp(theta)


def update_nu0(posteriors, V0, nu0_init, max_iters: int = 20, tol: float = 1e-9) -> np.ndarray:
    """Maximize the combined ELBO over ``nu0`` per class with ``V0`` fixed.

    Newton iterations run on ``theta = ln(nu0 - (M - 1))`` so the constraint
    ``nu0 > M - 1`` always holds.
    """
    K = len(posteriors[0])
    nu0_init = np.broadcast_to(np.asarray(nu0_init, dtype=float), (K,))
    out = np.empty(K)
    for k in range(K):
        qs = [post[k] for post in posteriors]
        M = qs[0].dim
        if not nu0_init[k] > M - 1:
            raise ValidationError(f"initial nu0 must exceed {M - 1}")
        out[k] = _nu0_newton(qs, V0[k], float(nu0_init[k]), max_iters, tol)
    return out


def update_hyper(posteriors, hyper, options: TrainOptions | None = None):
    """One round of population updates: mu0, b0, then (nu0, V0) twice."""
    options = options or TrainOptions()
    mu0 = update_mu0(posteriors)
    b0 = update_b0(posteriors, mu0, options.b0_variant)
    V0 = [p.V for p in hyper]
    nu0 = np.array([p.nu for p in hyper])
    for _ in range(2):
        nu0 = update_nu0(posteriors, V0, nu0, options.nu0_newton_iters, options.nu0_tol)
        V0 = update_V0(posteriors, nu0)
    return tuple(GaussWishartParams(mu0[k], b0[k], V0[k], nu0[k]) for k in range(len(hyper)))


def init_hyper(vol: MultiChannelVolume, K: int, seed: int = 0) -> tuple[GaussWishartParams, ...]:
    """Deterministic k-means seeded hyperpriors from one subject's intensities.

    ``b0 = 1``, ``nu0 = M + 1`` and ``V0`` is the inverse within-cluster
    variance (diagonal) divided by ``nu0``.
    """
    M = vol.channels
    X = vol.data.astype(float)
    full = np.all(np.isfinite(X), axis=1)
    if full.sum() >= K:
        X = X[full]
    else:
        col_mean = np.nanmean(X, axis=0)
        X = np.where(np.isfinite(X), X, col_mean)
    rng = np.random.Generator(np.random.Philox(seed))
    centroids, labels = kmeans2(X, K, minit="++", seed=rng)
    order = np.lexsort(centroids.T[::-1])
    pooled_var = np.maximum(X.var(axis=0), 1e-12)
    nu0 = M + 1.0
    hyper = []
    for k in order:
        members = X[labels == k]
        var = members.var(axis=0) if len(members) > 1 else pooled_var / K
        var = np.maximum(var, 1e-3 * pooled_var / K)
        mu = centroids[k] if len(members) else X.mean(axis=0)
        hyper.append(GaussWishartParams(mu, 1.0, np.diag(1.0 / var) / nu0, nu0))
    return tuple(hyper)


def _fit_one(args):
    vol, model, options, init = args
    return fit_subject(vol, model, options, init=init)


def parallel_map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("VBMIX_JOBS", "1")))
    except ValueError:
        return 1


def combined_elbo(volumes, model: TrainedModel, posteriors) -> float:
    return float(
        sum(elbo(v, model.template, p, model.hyper).eq10 for v, p in zip(volumes, posteriors))
    )


def train_population(
    volumes: Sequence[MultiChannelVolume],
    template: TemplatePrior | None,
    K: int,
    options: TrainOptions | None = None,
    init: Sequence[GaussWishartParams] | None = None,
) -> tuple[TrainedModel, list[float]]:
    """Variational EM over subjects and population parameters.

    Each outer iteration refits every subject (warm-started from its
    previous posterior), pools responsibilities into the shared
    log-proportions, updates the hyperpriors and records the combined ELBO.
    Returns the model and the per-iteration combined ELBO trace.
    """
    options = options or TrainOptions()
    if not volumes:
        raise ValidationError("need at least one training volume")
    M = volumes[0].channels
    for i, v in enumerate(volumes):
        if v.channels != M:
            raise ValidationError(f"volume {i} has {v.channels} channels, expected {M}")
    if template is None:
        template = TemplatePrior.stationary(K)
    if template.n_classes != K:
        raise ValidationError(f"template has {template.n_classes} classes, expected K={K}")
    for v in volumes:
        template.log_pi_for(v.n_voxels)
    hyper = tuple(init) if init is not None else init_hyper(volumes[0], K, options.seed)
    model = TrainedModel(hyper, template)
    fit_opts = FitOptions(
        max_iters=options.fit.max_iters,
        elbo_rel_tol=options.fit.elbo_rel_tol,
        eq16_variant=options.fit.eq16_variant,
        update_omega=False,
        seed=options.fit.seed,
    )
    posteriors: list[SubjectPosterior | None] = [None] * len(volumes)
    trace: list[float] = []
    for it in range(options.outer_iters):
        results = parallel_map(
            _fit_one,
            [(v, model, fit_opts, p) for v, p in zip(volumes, posteriors)],
            options.jobs,
        )
        posteriors = [r[0] for r in results]

        resp_rows = np.concatenate(
            [p.resp[included_voxels(v)] for v, p in zip(volumes, posteriors)]
        )
        if template.is_stationary:
            logit_rows = template.logits
        else:
            logit_rows = np.concatenate(
                [template.logits[included_voxels(v)] for v in volumes]
            )
        template = template.with_omega(omega_step(resp_rows, logit_rows, template.omega))
        hyper = update_hyper([p.gw for p in posteriors], hyper, options)
        model = TrainedModel(hyper, template)
        trace.append(combined_elbo(volumes, model, posteriors))
        log.info("outer=%d combined_elbo=%.10g", it, trace[-1])
    model.metadata = {
        "outer_iters": options.outer_iters,
        "subjects": len(volumes),
        "final_elbo": trace[-1],
        "eq16_variant": fit_opts.eq16_variant,
        "b0_variant": options.b0_variant,
    }
    return model, trace


# -- serialization -----------------------------------------------------------


def _dump(obj, indent=0) -> str:
    """JSON text with every float written at 17 significant digits."""
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            f'{pad}  {_dump(str(k))}: {_dump(v, indent + 1)}' for k, v in obj.items()
        ]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if all(not isinstance(x, (dict, list, tuple)) for x in obj):
            return "[" + ", ".join(_dump(x) for x in obj) + "]"
        items = [pad + "  " + _dump(x, indent + 1) for x in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValidationError("cannot serialize a non-finite number")
        return format(x, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def model_to_dict(model: TrainedModel) -> dict:
    if model.template.is_stationary:
        template = {"type": "stationary", "logits": model.template.logits[0].tolist()}
    else:
        if model.template_path is None:
            raise ValidationError("a spatial template needs template_path to be serialized")
        template = {"type": "map", "path": model.template_path}
    return {
        "version": MODEL_VERSION,
        "K": model.n_classes,
        "M": model.channels,
        "omega": model.template.omega.tolist(),
        "hyper": [p.to_dict() for p in model.hyper],
        "template": template,
        "metadata": model.metadata,
    }


def save_model(model: TrainedModel, path) -> None:
    text = _dump(model_to_dict(model)) + "\n"
    atomic_write_bytes(Path(path), text.encode("utf-8"))


def load_model(path) -> TrainedModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"model file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed model JSON ({exc})") from None
    try:
        if doc["version"] != MODEL_VERSION:
            raise ValidationError(f"unsupported model version {doc['version']!r}")
        K, M = int(doc["K"]), int(doc["M"])
        hyper = tuple(GaussWishartParams.from_dict(h) for h in doc["hyper"])
        omega = np.asarray(doc["omega"], dtype=float)
        tmpl = doc["template"]
        template_path = None
        if tmpl["type"] == "stationary":
            logits = np.asarray(tmpl.get("logits", np.zeros(K)), dtype=float)[None, :]
        elif tmpl["type"] == "map":
            template_path = tmpl["path"]
            tpath = Path(template_path)
            if not tpath.is_absolute():
                tpath = path.parent / tpath
            logits = read_volume(tpath).data.astype(float)
        else:
            raise ValidationError(f"unknown template type {tmpl['type']!r}")
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: incomplete model JSON ({exc})") from None
    if len(hyper) != K or omega.shape != (K,) or any(h.dim != M for h in hyper):
        raise ValidationError(f"{path}: K/M inconsistent with hyper entries")
    return TrainedModel(hyper, TemplatePrior(logits, omega), template_path, doc.get("metadata", {}))
