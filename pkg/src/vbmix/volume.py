"""Multi-channel volumes with per-voxel missingness, on-disk format, masking
and synthetic phantoms.

A volume holds ``D = d1*d2*d3`` voxels and ``M`` channels as a ``(D, M)``
float32 array. Missing entries are NaN. Voxels are ordered row-major over
``(d1, d2, d3)``, so the third axis varies fastest.

On disk a volume is a pair of files::

    <name>.json   {"dims": [d1, d2, d3], "channels": M, "dtype": "f32le",
                   "order": "channel-major", "version": 1}
    <name>.raw    D*M little-endian float32, all of channel 0, then channel 1, ...
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ValidationError, VolumeFormatError

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")
_HEADER_KEYS = {"dims", "channels", "dtype", "order", "version"}

SCHEMES = ("slab-inferior", "slab-superior", "random")


@dataclass(frozen=True)
class MissingPattern:
    """Which channels are observed in a voxel (``True`` = observed)."""

    observed: tuple[bool, ...]

    @classmethod
    def from_code(cls, code: int, channels: int) -> "MissingPattern":
        return cls(tuple(bool((code >> c) & 1) for c in range(channels)))

    @classmethod
    def from_observed(cls, observed, channels: int) -> "MissingPattern":
        obs = set(int(c) for c in observed)
        return cls(tuple(c in obs for c in range(channels)))

    @property
    def code(self) -> int:
        return sum(1 << c for c, flag in enumerate(self.observed) if flag)

    @property
    def channels(self) -> int:
        return len(self.observed)

    @cached_property
    def o(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.observed, dtype=bool))

    @cached_property
    def m(self) -> np.ndarray:
        return np.flatnonzero(~np.asarray(self.observed, dtype=bool))

    @property
    def all_observed(self) -> bool:
        return all(self.observed)

    @property
    def all_missing(self) -> bool:
        return not any(self.observed)


@dataclass(frozen=True)
class PatternGroup:
    pattern: MissingPattern
    index: np.ndarray  # voxel indices sharing the pattern, ascending


@dataclass(frozen=True, eq=False)
class MultiChannelVolume:
    """Immutable ``(D, M)`` intensity array on a 3-D voxel grid."""

    dims: tuple[int, int, int]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValidationError(f"dims must be 3 positive integers, got {self.dims!r}")
        data = np.asarray(self.data)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[1] < 1:
            raise ValidationError("data must be a (D, M) array with M >= 1")
        n_vox = math.prod(dims)
        if data.shape[0] != n_vox:
            raise ValidationError(
                f"data has {data.shape[0]} voxels but dims {list(dims)} imply {n_vox}"
            )
        data = np.array(data, dtype=np.float32, order="C")
        if np.isinf(data).any():
            raise ValidationError("volume contains infinite intensities")
        if not np.isfinite(data).any():
            raise ValidationError("volume has no finite entries")
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)

    @property
    def n_voxels(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @cached_property
    def observed(self) -> np.ndarray:
        """Boolean ``(D, M)`` mask of finite entries."""
        obs = np.isfinite(self.data)
        obs.setflags(write=False)
        return obs

    @cached_property
    def pattern_codes(self) -> np.ndarray:
        weights = 1 << np.arange(self.channels, dtype=np.int64)
        return self.observed.astype(np.int64) @ weights

    @cached_property
    def pattern_groups(self) -> tuple[PatternGroup, ...]:
        """Voxels grouped by missingness pattern, ordered by pattern code."""
        codes = self.pattern_codes
        order = np.argsort(codes, kind="stable")
        uniq, starts = np.unique(codes[order], return_index=True)
        bounds = list(starts[1:]) + [len(codes)]
        return tuple(
            PatternGroup(MissingPattern.from_code(int(c), self.channels), order[s:e])
            for c, s, e in zip(uniq, starts, bounds)
        )

    @property
    def n_missing(self) -> int:
        return int(self.data.size - self.observed.sum())

    def with_data(self, data: np.ndarray) -> "MultiChannelVolume":
        return MultiChannelVolume(self.dims, data)

    def channel_grid(self, channel: int) -> np.ndarray:
        """One channel reshaped to the ``(d1, d2, d3)`` grid."""
        return self.data[:, channel].reshape(self.dims)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultiChannelVolume):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(
            self.data.view(np.uint32), other.data.view(np.uint32)
        )

    __hash__ = None


def _split_path(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_volume(path) -> MultiChannelVolume:
    """Read a volume given either file of the pair or the common stem."""
    header_path, raw_path = _split_path(path)
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise VolumeFormatError(f"missing header file {header_path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise VolumeFormatError(f"{header_path}: malformed header ({exc})") from None
    if not isinstance(header, dict) or not _HEADER_KEYS <= header.keys():
        raise VolumeFormatError(f"{header_path}: header must contain {sorted(_HEADER_KEYS)}")
    dims, channels = header["dims"], header["channels"]
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and d >= 1 for d in dims)
    ):
        raise VolumeFormatError(f"{header_path}: dims must be 3 positive integers")
    if not isinstance(channels, int) or channels < 1:
        raise VolumeFormatError(f"{header_path}: channels must be a positive integer")
    if header["dtype"] != "f32le" or header["order"] != "channel-major":
        raise VolumeFormatError(f"{header_path}: unsupported dtype/order")
    if header["version"] != FORMAT_VERSION:
        raise VolumeFormatError(f"{header_path}: unsupported version {header['version']!r}")
    try:
        payload = raw_path.read_bytes()
    except FileNotFoundError:
        raise VolumeFormatError(f"missing data file {raw_path}") from None
    n_vox = math.prod(dims)
    expected = n_vox * channels * _DTYPE.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: size mismatch, expected {expected} bytes, found {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype=_DTYPE)
    data = flat.reshape(channels, n_vox).T
    try:
        return MultiChannelVolume(tuple(dims), data)
    except ValidationError as exc:
        raise VolumeFormatError(f"{raw_path}: {exc}") from None


def write_volume(vol: MultiChannelVolume, path) -> None:
    header_path, raw_path = _split_path(path)
    header = {
        "dims": list(vol.dims),
        "channels": vol.channels,
        "dtype": "f32le",
        "order": "channel-major",
        "version": FORMAT_VERSION,
    }
    payload = np.ascontiguousarray(vol.data.T, dtype=_DTYPE)
    # canonical quiet NaN for every missing entry
    payload = np.where(np.isnan(payload), np.float32(np.nan), payload).astype(_DTYPE)
    try:
        atomic_write_bytes(raw_path, payload.tobytes())
        atomic_write_bytes(header_path, (json.dumps(header) + "\n").encode("utf-8"))
    except OSError as exc:
        raise OSError(f"cannot write volume to {header_path.parent}: {exc}") from exc


def apply_fov_mask(
    vol: MultiChannelVolume,
    channel: int,
    fraction: float,
    scheme: str = "slab-inferior",
    seed: int = 0,
) -> MultiChannelVolume:
    """Return a copy with part of one channel set missing.

    Slab schemes remove ``ceil(fraction * d3)`` contiguous slices along the
    third axis, starting from the low (inferior) or high (superior) end. The
    random scheme removes ``ceil(fraction * D)`` voxels sampled without
    replacement.
    """
    if not 0 <= channel < vol.channels:
        raise ValidationError(f"channel {channel} out of range for M={vol.channels}")
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError(f"fraction must lie in [0, 1], got {fraction}")
    if scheme not in SCHEMES:
        raise ValidationError(f"unknown masking scheme {scheme!r}")
    data = np.array(vol.data)
    if scheme == "random":
        n = math.ceil(fraction * vol.n_voxels)
        rng = np.random.Generator(np.random.Philox(seed))
        idx = rng.choice(vol.n_voxels, size=n, replace=False)
        data[idx, channel] = np.nan
    else:
        n_slices = vol.dims[2]
        n = math.ceil(fraction * n_slices)
        grid = data[:, channel].reshape(vol.dims)
        if scheme == "slab-inferior":
            grid[:, :, :n] = np.nan
        else:
            grid[:, :, n_slices - n:] = np.nan
        data[:, channel] = grid.reshape(-1)
    return vol.with_data(data)


def drop_channels(vol: MultiChannelVolume, channels) -> MultiChannelVolume:
    """Set whole channels missing at every voxel."""
    data = np.array(vol.data)
    data[:, list(channels)] = np.nan
    return vol.with_data(data)


@dataclass(frozen=True, eq=False)
class PhantomSpec:
    """Generative parameters of a synthetic multi-channel phantom.

    ``probabilities`` is either a length-K vector of stationary class
    proportions or a ``(D, K)`` per-voxel probability map.
    """

    dims: tuple[int, int, int]
    means: np.ndarray
    covariances: np.ndarray
    probabilities: np.ndarray
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValidationError(f"dims must be 3 positive integers, got {self.dims!r}")
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        K, M = means.shape
        cov = np.asarray(self.covariances, dtype=float).reshape(K, M, M)
        for k in range(K):
            if not np.allclose(cov[k], cov[k].T, rtol=1e-12, atol=0):
                raise ValidationError(f"covariance of class {k} is not symmetric")
            if np.linalg.eigvalsh(cov[k])[0] <= 0:
                raise ValidationError(f"covariance of class {k} is not positive definite")
        probs = np.asarray(self.probabilities, dtype=float)
        if probs.ndim == 1:
            probs = probs[None, :]
        D = math.prod(dims)
        if probs.shape[1] != K or probs.shape[0] not in (1, D):
            raise ValidationError(f"probabilities must have shape (K,) or (D, K) with K={K}")
        if (probs < 0).any() or np.abs(probs.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValidationError("class probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "probabilities", probs)

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def channels(self) -> int:
        return self.means.shape[1]

    def with_seed(self, seed: int) -> "PhantomSpec":
        return PhantomSpec(self.dims, self.means, self.covariances, self.probabilities, seed)


def generate_phantom(spec: PhantomSpec) -> tuple[MultiChannelVolume, np.ndarray]:
    """Draw a phantom volume and its 0-based class labels from ``spec``."""
    rng = np.random.Generator(np.random.Philox(spec.seed))
    D = math.prod(spec.dims)
    K, M = spec.means.shape
    probs = spec.probabilities
    u = rng.random(D)
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = np.inf
    if probs.shape[0] == 1:
        labels = np.searchsorted(cdf[0], u, side="right")
    else:
        labels = (u[:, None] >= cdf).sum(axis=1)
    noise = rng.standard_normal((D, M))
    data = np.empty((D, M))
    for k in range(K):
        sel = labels == k
        chol = np.linalg.cholesky(spec.covariances[k])
        data[sel] = spec.means[k] + noise[sel] @ chol.T
    return MultiChannelVolume(spec.dims, data), labels.astype(np.int64)


def concentric_probabilities(dims, n_classes: int, softness: float = 1.0) -> np.ndarray:
    """Per-voxel class probabilities arranged as soft concentric shells.

    Class 0 sits at the centre, class ``K-1`` on the outside, mimicking the
    nested layout of tissue classes in a head image.
    """
    grids = np.meshgrid(*[np.linspace(-1.0, 1.0, d) for d in dims], indexing="ij")
    radius = np.sqrt(sum(g**2 for g in grids)).reshape(-1) / math.sqrt(3.0)
    centres = (np.arange(n_classes) + 0.5) / n_classes
    logits = -((radius[:, None] - centres[None, :]) ** 2) * (n_classes**2) / (
        2.0 * softness**2 * 0.25
    )
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


def phantom_spec_from_dict(doc: dict, base_dir=None) -> PhantomSpec:
    """Build a :class:`PhantomSpec` from its JSON description.

    Keys: ``dims``, ``means`` (K x M), ``covariances`` (K x M x M), one of
    ``proportions`` (K), ``layout`` (``"concentric"``, with optional
    ``softness``) or ``probabilities_path`` (a K-channel volume), and
    optional ``seed``.
    """
    missing = [k for k in ("dims", "means", "covariances") if k not in doc]
    if missing:
        raise ValidationError(f"phantom spec is missing keys {missing}")
    dims = doc["dims"]
    K = len(doc["means"])
    if "proportions" in doc:
        probs = np.asarray(doc["proportions"], dtype=float)
    elif doc.get("layout") == "concentric":
        probs = concentric_probabilities(dims, K, float(doc.get("softness", 1.0)))
    elif "probabilities_path" in doc:
        path = Path(doc["probabilities_path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        probs = read_volume(path).data.astype(float)
    else:
        raise ValidationError(
            "phantom spec needs 'proportions', 'layout' or 'probabilities_path'"
        )
    return PhantomSpec(tuple(dims), doc["means"], doc["covariances"], probs, int(doc.get("seed", 0)))
