"""Hyperspectral scenes: file I/O, preprocessing, sampling and augmentation.

Cube files use the little-endian HSC1 layout::

    bytes 0-3   b"HSC1"
    bytes 4-15  uint32 rows, cols, bands
    bytes 16-   float32[rows * cols * bands], pixel-major, band fastest

Label files are plain text: a ``rows cols`` header line followed by one
line of ``cols`` space-separated integers per row (0 = unlabeled).
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"HSC1"
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Malformed cube or label file."""


class ParameterError(ValueError):
    """Out-of-range argument."""


@dataclass
class HsiCube:
    values: np.ndarray  # (rows, cols, bands)

    def __post_init__(self):
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ParameterError(f"cube must be rows x cols x bands, got {self.values.shape}")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass
class ReducedCube:
    values: np.ndarray  # (rows, cols, p) scores
    loadings: np.ndarray  # (bands, p), orthonormal columns
    means: np.ndarray  # (bands,)
    eigenvalues: np.ndarray  # all eigenvalues, descending

    @property
    def p(self) -> int:
        return self.values.shape[2]

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        total = self.eigenvalues.sum()
        if total <= 0:
            return np.zeros(self.p)
        return self.eigenvalues[: self.p] / total


@dataclass
class Sample:
    row: int
    col: int
    spectral: np.ndarray
    patch: np.ndarray
    label: Optional[int] = None


@dataclass
class SplitSpec:
    labeled: dict[int, np.ndarray]  # class id -> flat pixel indices
    test: np.ndarray
    seed: int
    warnings: list[str] = field(default_factory=list)

    @property
    def labeled_indices(self) -> np.ndarray:
        if not self.labeled:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self.labeled[c] for c in sorted(self.labeled)])


# --------------------------------------------------------------------------
# File I/O
# --------------------------------------------------------------------------


def save_cube(cube: HsiCube, path) -> None:
    values = np.ascontiguousarray(cube.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, cube.rows, cube.cols, cube.bands))
        fh.write(values.tobytes())


def load_cube(path) -> HsiCube:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at byte offset {len(data)}")
    magic, rows, cols, bands = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if rows < 1 or cols < 1 or bands < 1:
        raise FormatError(f"{path}: zero dimension in header at byte offset 4")
    expected = rows * cols * bands * 4
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        kind = "truncated payload" if len(payload) < expected else "trailing bytes"
        raise FormatError(
            f"{path}: {kind}: header {rows}x{cols}x{bands} needs {expected} payload bytes, "
            f"found {len(payload)} (file ends at byte offset {len(data)})"
        )
    values = np.frombuffer(payload, dtype="<f4")
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError(
            f"{path}: non-finite value at byte offset {_HEADER.size + 4 * int(bad[0])}"
        )
    return HsiCube(values.reshape(rows, cols, bands).astype(np.float32))


def save_labels(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    lines = [f"{labels.shape[0]} {labels.shape[1]}"]
    lines += [" ".join(str(int(v)) for v in row) for row in labels]
    Path(path).write_text("\n".join(lines) + "\n")


def load_labels(path) -> np.ndarray:
    lines = Path(path).read_text().split("\n")
    try:
        rows, cols = (int(t) for t in lines[0].split())
    except ValueError:
        raise FormatError(f"{path}: first line must be 'rows cols'") from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != rows:
        raise FormatError(f"{path}: header says {rows} rows, found {len(body)}")
    out = np.empty((rows, cols), dtype=np.int64)
    for r, ln in enumerate(body):
        try:
            vals = [int(t) for t in ln.split()]
        except ValueError:
            raise FormatError(f"{path}: non-integer label on line {r + 2}") from None
        if len(vals) != cols or min(vals) < 0:
            raise FormatError(f"{path}: line {r + 2} must hold {cols} non-negative integers")
        out[r] = vals
    return out


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------


def band_ranges(cube: HsiCube) -> tuple[np.ndarray, np.ndarray]:
    v = cube.values.astype(np.float64)
    return v.min(axis=(0, 1)), v.max(axis=(0, 1))


def normalize(cube: HsiCube, lo=None, hi=None) -> HsiCube:
    """Per-band min-max scaling to [0, 1]; constant bands become zeros.

    ``lo``/``hi`` override the band ranges (used to replay a stored transform).
    """
    v = cube.values.astype(np.float64)
    if lo is None or hi is None:
        lo, hi = v.min(axis=(0, 1)), v.max(axis=(0, 1))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (v - lo) / safe, 0.0)
    return HsiCube(out)


def pca_reduce(cube: HsiCube, p: int) -> ReducedCube:
    """Project pixels onto the top-``p`` principal axes of the band covariance."""
    n = cube.bands
    if not 1 <= p <= n:
        raise ParameterError(f"p must lie in [1, {n}], got {p}")
    X = cube.values.reshape(-1, n).astype(np.float64)
    if X.shape[0] < p + 1:
        raise ParameterError(f"need at least {p + 1} pixels for {p} components")
    means = X.mean(axis=0)
    Xc = X - means
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    # sign rule: largest-magnitude entry of each loading is positive
    pivot = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[pivot, np.arange(n)])
    evecs = evecs * np.where(signs == 0, 1.0, signs)
    loadings = evecs[:, :p]
    scores = (Xc @ loadings).reshape(cube.rows, cube.cols, p)
    return ReducedCube(scores, loadings, means, evals)


def pca_apply(cube: HsiCube, loadings: np.ndarray, means: np.ndarray) -> np.ndarray:
    X = cube.values.reshape(-1, cube.bands).astype(np.float64)
    return ((X - means) @ loadings).reshape(cube.rows, cube.cols, loadings.shape[1])


# --------------------------------------------------------------------------
# Samples
# --------------------------------------------------------------------------


def mirror_index(i, n: int):
    """Reflect integer positions into [0, n) across the border pixels.

    Position -1 maps to 1 and n maps to n - 2 (the border pixel is the mirror
    axis and is not repeated). Works for arbitrarily distant positions.
    """
    i = np.asarray(i)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    j = np.mod(i, period)
    return np.where(j < n, j, period - j)


def window_offsets(w: int) -> np.ndarray:
    """Offsets of a w-wide window whose centre sits at index w // 2."""
    return np.arange(w) - w // 2


def extract_sample(cube: HsiCube, reduced: ReducedCube, r: int, c: int, w: int,
                   label: Optional[int] = None) -> Sample:
    """Spectral vector from ``cube`` and mirrored w x w patch from ``reduced``."""
    if not (0 <= r < cube.rows and 0 <= c < cube.cols):
        raise IndexError(f"pixel ({r}, {c}) outside {cube.rows}x{cube.cols} image")
    off = window_offsets(w)
    rows = mirror_index(r + off, cube.rows)
    cols = mirror_index(c + off, cube.cols)
    patch = reduced.values[np.ix_(rows, cols)].astype(np.float64)
    spectral = cube.values[r, c].astype(np.float64)
    return Sample(r, c, spectral, patch, label)


class SceneFeatures:
    """Normalized spectra and padded PCA scores of one scene, for batch lookup."""

    def __init__(self, spectral_cube: HsiCube, reduced: ReducedCube, w: int):
        self.rows, self.cols = spectral_cube.rows, spectral_cube.cols
        self.w = w
        self.spectra = spectral_cube.values.reshape(-1, spectral_cube.bands).astype(np.float64)
        off = window_offsets(w)
        r_idx = mirror_index(np.arange(off[0], self.rows + off[-1]), self.rows)
        c_idx = mirror_index(np.arange(off[0], self.cols + off[-1]), self.cols)
        self.padded = np.ascontiguousarray(reduced.values[np.ix_(r_idx, c_idx)], dtype=np.float64)

    @property
    def bands(self) -> int:
        return self.spectra.shape[1]

    @property
    def p(self) -> int:
        return self.padded.shape[2]

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """(spectral (B, n), patches (B, w, w, p)) for flat pixel indices."""
        indices = np.asarray(indices, dtype=np.int64)
        r, c = np.divmod(indices, self.cols)
        ar = np.arange(self.w)
        patches = self.padded[(r[:, None] + ar)[:, :, None], (c[:, None] + ar)[:, None, :]]
        return self.spectra[indices], patches


def prepare_scene(cube: HsiCube, p: int, w: int) -> tuple[SceneFeatures, dict]:
    """Normalize, reduce and index a scene. Returns features and the transform."""
    lo, hi = band_ranges(cube)
    norm = normalize(cube, lo, hi)
    reduced = pca_reduce(norm, p)
    transform = {"lo": lo, "hi": hi, "loadings": reduced.loadings, "means": reduced.means}
    return SceneFeatures(norm, reduced, w), transform


def apply_transform(cube: HsiCube, transform: dict, w: int) -> SceneFeatures:
    """Rebuild scene features with a stored normalization + PCA transform."""
    norm = normalize(cube, transform["lo"], transform["hi"])
    scores = pca_apply(norm, transform["loadings"], transform["means"])
    reduced = ReducedCube(scores, transform["loadings"], transform["means"],
                          np.zeros(transform["loadings"].shape[0]))
    return SceneFeatures(norm, reduced, w)


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


def split_dataset(labelmap: np.ndarray, n_per_class: int, seed: int) -> SplitSpec:
    """Draw ``n_per_class`` labeled pixels per class; the rest of the reference is test."""
    flat = np.asarray(labelmap).reshape(-1)
    rng = np.random.default_rng(seed)
    classes = [int(c) for c in np.unique(flat) if c > 0]
    labeled, notes = {}, []
    for c in classes:
        idx = np.flatnonzero(flat == c)
        if idx.size < n_per_class:
            msg = f"class {c} has only {idx.size} pixels (< {n_per_class}); all used for training"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
            take = idx.copy()
        else:
            take = np.sort(rng.choice(idx, size=n_per_class, replace=False))
        labeled[c] = take
    train = np.concatenate(list(labeled.values())) if labeled else np.zeros(0, dtype=np.int64)
    reference = np.flatnonzero(flat > 0)
    test = np.setdiff1d(reference, train)
    return SplitSpec(labeled, test, seed, notes)


def sample_unlabeled(labelmap: np.ndarray, n_u: int, seed: int) -> np.ndarray:
    """``n_u`` distinct reference pixel indices, labels discarded."""
    reference = np.flatnonzero(np.asarray(labelmap).reshape(-1) > 0)
    if n_u > reference.size:
        warnings.warn(f"requested {n_u} unlabeled samples, only {reference.size} available",
                      stacklevel=2)
        n_u = reference.size
    rng = np.random.default_rng([seed, 1])
    return rng.choice(reference, size=n_u, replace=False)


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------


def augment(sample: Sample, rng, std: float = 0.5) -> Sample:
    """Copy of ``sample`` with i.i.d. N(0, std^2) noise on spectra and patch."""
    spectral = sample.spectral + std * rng.standard_normal(sample.spectral.shape)
    patch = sample.patch + std * rng.standard_normal(sample.patch.shape)
    return Sample(sample.row, sample.col, spectral, patch, sample.label)


def augment_batch(spectral, patches, rng, std: float = 0.5):
    if std == 0:
        return spectral.copy(), patches.copy()
    return (spectral + std * rng.standard_normal(spectral.shape),
            patches + std * rng.standard_normal(patches.shape))


# --------------------------------------------------------------------------
# Synthetic scenes
# --------------------------------------------------------------------------


# closest-pair distance between class signatures in synthetic scenes
DEFAULT_SEPARATION = 0.36


def class_signatures(bands: int, k: int, rng, separation: float = DEFAULT_SEPARATION) -> np.ndarray:
    """k smooth random curves over the band axis.

    Each curve is a shared smooth background plus a class-specific smooth
    deviation (low-order cosine series). Deviations are scaled so that the
    closest pair of signatures is exactly ``separation`` apart (Euclidean).
    """
    t = np.linspace(0.0, 1.0, bands)
    basis = np.stack([np.cos(np.pi * f * t) for f in range(4)])  # (4, bands)
    decay = 1.0 + np.arange(4)
    background = 0.5 + 0.2 * (rng.normal(size=4) / decay) @ basis
    dev = (rng.normal(size=(k, 4)) / decay) @ basis
    gaps = np.sqrt(((dev[:, None, :] - dev[None, :, :]) ** 2).sum(-1))
    closest = gaps[np.triu_indices(k, 1)].min()
    if closest > 0:
        dev *= separation / closest
    return background + dev


def generate_synthetic(rows: int, cols: int, bands: int, k: int, seed: int,
                       noise_std: float = 0.1, separation: float = DEFAULT_SEPARATION,
                       return_signatures: bool = False):
    """Random scene with k contiguous regions (nearest-seed-point partition)."""
    if k < 2:
        raise ParameterError(f"need k >= 2 classes, got {k}")
    if rows < 1 or cols < 1 or bands < 1:
        raise ParameterError("rows, cols and bands must be positive")
    if rows * cols < 50 * k:
        raise ParameterError(f"{rows}x{cols} grid too small for {k} classes (needs {50 * k} pixels)")
    if noise_std < 0 or separation <= 0:
        raise ParameterError("noise_std must be >= 0 and separation > 0")
    rng = np.random.default_rng(seed)
    seeds = rng.choice(rows * cols, size=k, replace=False)
    sr, sc = np.divmod(seeds, cols)
    rr, cc = np.mgrid[0:rows, 0:cols]
    d2 = (rr[..., None] - sr) ** 2 + (cc[..., None] - sc) ** 2
    labels = (np.argmin(d2, axis=-1) + 1).astype(np.int64)
    sig = class_signatures(bands, k, rng, separation)
    values = sig[labels - 1] + noise_std * rng.standard_normal((rows, cols, bands))
    cube = HsiCube(values.astype(np.float32))
    if return_signatures:
        return cube, labels, sig
    return cube, labels
