"""Prediction of missing channels and PSNR-based evaluation harness."""
from __future__ import annotations

import io
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .population import parallel_map
from .subject import FitOptions, SubjectPosterior, fit_subject
from .volume import MultiChannelVolume, apply_fov_mask, atomic_write_bytes, drop_channels

CSV_HEADER = "experiment,subject,channel,fraction_or_set,psnr_db,mse,maxval,seconds"


@dataclass(frozen=True, eq=False)
class PredictionResult:
    """Completed volume, per-entry posterior variance and optional PSNR.

    ``variance`` is zero at observed entries.
    """

    completed: MultiChannelVolume
    variance: np.ndarray
    psnr: dict[int, float] | None = None

    def uncertainty_volume(self) -> MultiChannelVolume:
        return MultiChannelVolume(self.completed.dims, self.variance)


def predict_missing(
    vol: MultiChannelVolume,
    posterior: SubjectPosterior,
    reference: MultiChannelVolume | None = None,
) -> PredictionResult:
    """Replace each missing entry by its responsibility-weighted conditional mean."""
    if posterior.resp.shape[0] != vol.n_voxels or posterior.gw[0].dim != vol.channels:
        raise ValidationError("posterior does not match the volume")
    data = np.array(vol.data)
    var = np.zeros(vol.data.shape)
    for group, per_class in posterior.imputation(vol):
        m = group.pattern.m
        W = posterior.resp[group.index]
        mean = np.zeros((group.index.size, m.size))
        second = np.zeros_like(mean)
        for k, (h, S) in enumerate(per_class):
            w = W[:, k:k + 1]
            mean += w * h
            second += w * (h * h + np.diag(S))
        data[np.ix_(group.index, m)] = mean
        var[np.ix_(group.index, m)] = np.maximum(second - mean * mean, 0.0)
    completed = vol.with_data(data)
    scores = None
    if reference is not None:
        scores = {c: psnr(reference, completed, c) for c in range(vol.channels)}
    return PredictionResult(completed, var, scores)


def psnr_parts(reference: MultiChannelVolume, predicted: MultiChannelVolume, channel: int):
    """``(psnr_db, mse, maxval)`` for one channel over all voxels."""
    if reference.dims != predicted.dims or reference.channels != predicted.channels:
        raise ValidationError("reference and prediction differ in shape")
    if not 0 <= channel < reference.channels:
        raise ValidationError(f"channel {channel} out of range")
    ref = reference.data[:, channel].astype(float)
    pred = predicted.data[:, channel].astype(float)
    if not np.isfinite(ref).any():
        raise ValidationError(f"reference channel {channel} is entirely missing")
    if not np.isfinite(ref).all():
        raise ValidationError(f"reference channel {channel} has missing entries")
    if not np.isfinite(pred).all():
        raise ValidationError(f"predicted channel {channel} has missing entries")
    maxval = float(ref.max())
    mse = float(np.mean((ref - pred) ** 2))
    if mse == 0.0:
        return math.inf, mse, maxval
    return 10.0 * math.log10(maxval * maxval / mse), mse, maxval


def psnr(reference: MultiChannelVolume, predicted: MultiChannelVolume, channel: int) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` flags an exact match."""
    return psnr_parts(reference, predicted, channel)[0]


@dataclass(frozen=True)
class ReportRow:
    experiment: str
    subject: str
    channel: int
    condition: str
    psnr_db: float
    mse: float
    maxval: float
    seconds: float


@dataclass
class EvalReport:
    experiment: str
    descriptor: dict
    rows: list[ReportRow] = field(default_factory=list)
    runtime: float = 0.0

    def summary(self) -> list[tuple[str, int, float, float, int]]:
        """``(condition, channel, mean_psnr, std_psnr, n_subjects)`` in row order."""
        groups: dict[tuple[str, int], list[float]] = {}
        for r in self.rows:
            groups.setdefault((r.condition, r.channel), []).append(r.psnr_db)
        out = []
        for (cond, ch), vals in groups.items():
            arr = np.array(vals)
            if np.all(np.isinf(arr)):
                mean, std = math.inf, 0.0
            else:
                mean, std = float(arr.mean()), float(arr.std())
            out.append((cond, ch, mean, std, len(vals)))
        return out

    def mean_psnr(self, condition: str, channel: int) -> float:
        for cond, ch, mean, _, _ in self.summary():
            if cond == condition and ch == channel:
                return mean
        raise KeyError((condition, channel))

    def to_csv(self, timings: bool = False) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.rows:
            secs = repr(round(r.seconds, 6)) if timings else ""
            buf.write(
                f"{r.experiment},{r.subject},{r.channel},{r.condition},"
                f"{format_number(r.psnr_db)},{format_number(r.mse)},{format_number(r.maxval)},{secs}\n"
            )
        return buf.getvalue()

    def summary_csv(self) -> str:
        lines = ["experiment,fraction_or_set,channel,psnr_mean,psnr_std,n"]
        for cond, ch, mean, std, n in self.summary():
            lines.append(f"{self.experiment},{cond},{ch},{format_number(mean)},{format_number(std)},{n}")
        return "\n".join(lines) + "\n"

    def write(self, path, timings: bool = False) -> None:
        atomic_write_bytes(path, self.to_csv(timings).encode("utf-8"))


def format_number(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def _fit_predict(vol, model, options):
    post, _ = fit_subject(vol, model, options)
    return predict_missing(vol, post)


def _fov_subject(args):
    name, vol, model, channels, fractions, scheme, options, seed = args
    rows = []
    for fraction in fractions:
        t0 = time.perf_counter()
        masked = vol
        for c in channels:
            masked = apply_fov_mask(masked, c, fraction, scheme, seed)
        result = _fit_predict(masked, model, options)
        secs = time.perf_counter() - t0
        for c in channels:
            p, mse, maxval = psnr_parts(vol, result.completed, c)
            rows.append(ReportRow("fov", name, c, repr(float(fraction)), p, mse, maxval, secs))
    return rows


def run_fov_experiment(
    model,
    volumes: Sequence[MultiChannelVolume],
    channels: Sequence[int],
    fractions: Sequence[float] = (0.25, 0.5, 0.75, 1.0),
    scheme: str = "slab-inferior",
    options: FitOptions | None = None,
    names: Sequence[str] | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> EvalReport:
    """Mask part of the listed channels, refill them, score against the originals.

    For each fraction every listed channel loses that fraction of its field
    of view; all other channels stay intact.
    """
    if not volumes:
        raise ValidationError("no held-out volumes")
    options = options or FitOptions()
    names = list(names) if names is not None else [f"subject_{i:03d}" for i in range(len(volumes))]
    t0 = time.perf_counter()
    jobs_args = [
        (names[i], v, model, list(channels), list(fractions), scheme, options, seed + i)
        for i, v in enumerate(volumes)
    ]
    rows = [r for sub in parallel_map(_fov_subject, jobs_args, jobs) for r in sub]
    descriptor = {"scheme": scheme, "fractions": list(fractions), "channels": list(channels)}
    return EvalReport("fov", descriptor, rows, time.perf_counter() - t0)


def all_observed_sets(M: int) -> list[tuple[int, ...]]:
    """Every nonempty proper subset of channels, smallest first."""
    return [s for r in range(1, M) for s in itertools.combinations(range(M), r)]


def set_label(observed) -> str:
    return "obs=" + "+".join(str(c) for c in observed)


def _dropout_subject(args):
    name, vol, model, observed_sets, options = args
    rows = []
    for obs in observed_sets:
        missing = [c for c in range(vol.channels) if c not in obs]
        if not missing:
            continue
        t0 = time.perf_counter()
        result = _fit_predict(drop_channels(vol, missing), model, options)
        secs = time.perf_counter() - t0
        for c in missing:
            p, mse, maxval = psnr_parts(vol, result.completed, c)
            rows.append(ReportRow("dropout", name, c, set_label(obs), p, mse, maxval, secs))
    return rows


def run_dropout_experiment(
    model,
    volumes: Sequence[MultiChannelVolume],
    observed_sets: Sequence[Sequence[int]] | None = None,
    options: FitOptions | None = None,
    names: Sequence[str] | None = None,
    jobs: int = 1,
) -> EvalReport:
    """Drop whole channels, predict them from the rest, score each one.

    By default every nonempty proper subset of channels is tried as the
    observed set. A single set ``{0..M-2}`` is the MR-to-CT style case
    where the last channel is never observed.
    """
    if not volumes:
        raise ValidationError("no held-out volumes")
    M = volumes[0].channels
    options = options or FitOptions()
    sets = all_observed_sets(M) if observed_sets is None else [tuple(sorted(s)) for s in observed_sets]
    for s in sets:
        if any(not 0 <= c < M for c in s) or not s:
            raise ValidationError(f"invalid observed set {s}")
    names = list(names) if names is not None else [f"subject_{i:03d}" for i in range(len(volumes))]
    t0 = time.perf_counter()
    args = [(names[i], v, model, sets, options) for i, v in enumerate(volumes)]
    rows = [r for sub in parallel_map(_dropout_subject, args, jobs) for r in sub]
    descriptor = {"observed_sets": [list(s) for s in sets]}
    return EvalReport("dropout", descriptor, rows, time.perf_counter() - t0)
