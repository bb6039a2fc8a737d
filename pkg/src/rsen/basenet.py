"""BaseNet: a spectral fully-connected branch and a three-conv spatial branch.

Parameters live in a plain ``dict`` keyed by :data:`PARAM_NAMES` (that order
is also the checkpoint order). Shapes for spectral length ``n``, ``p`` PCA
channels, patch side ``w`` and ``k`` classes::

    spe_W    (64, n)          spe_b    (64,)
    conv1_K  (1, 1, p, 64)    conv1_b  (64,)
    conv2_K  (3, 3, 64, 64)   conv2_b  (64,)
    conv3_K  (3, 3, 64, 64)   conv3_b  (64,)
    fc1_W    (128, 64 + (w/4)^2 * 64)            fc1_b (128,)
    cls_W    (k, 128)         cls_b    (k,)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import GradientTape, ShapeError, Var, softmax

SPECTRAL_WIDTH = 64
CHANNELS = 64
HIDDEN = 128

PARAM_NAMES = (
    "spe_W", "spe_b",
    "conv1_K", "conv1_b",
    "conv2_K", "conv2_b",
    "conv3_K", "conv3_b",
    "fc1_W", "fc1_b",
    "cls_W", "cls_b",
)


@dataclass(frozen=True)
class Dims:
    n: int  # spectral bands
    p: int  # PCA channels
    w: int  # patch side
    k: int  # classes

    def __post_init__(self):
        if min(self.n, self.p, self.k) < 1:
            raise ValueError(f"n, p, k must be >= 1, got {self}")
        if self.w < 4 or self.w % 4:
            # two 2x2 pools need w divisible by 4
            raise ValueError(f"w must be a multiple of 4 and >= 4, got {self.w}")

    @property
    def spatial_features(self) -> int:
        return (self.w // 4) ** 2 * CHANNELS

    @property
    def fusion_features(self) -> int:
        return SPECTRAL_WIDTH + self.spatial_features


def param_shapes(dims: Dims) -> dict[str, tuple[int, ...]]:
    return {
        "spe_W": (SPECTRAL_WIDTH, dims.n), "spe_b": (SPECTRAL_WIDTH,),
        "conv1_K": (1, 1, dims.p, CHANNELS), "conv1_b": (CHANNELS,),
        "conv2_K": (3, 3, CHANNELS, CHANNELS), "conv2_b": (CHANNELS,),
        "conv3_K": (3, 3, CHANNELS, CHANNELS), "conv3_b": (CHANNELS,),
        "fc1_W": (HIDDEN, dims.fusion_features), "fc1_b": (HIDDEN,),
        "cls_W": (dims.k, HIDDEN), "cls_b": (dims.k,),
    }


def init_params(seed: int, n: int, p: int, w: int, k: int) -> dict[str, np.ndarray]:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    try:
        dims = Dims(n, p, w, k)
    except ValueError as exc:
        raise ValueError(f"invalid BaseNet dimensions: {exc}") from None
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(dims).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1])) if name.endswith("_K") else shape[1]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


def dims_of(params) -> Dims:
    n = params["spe_W"].shape[1]
    p = params["conv1_K"].shape[2]
    k = params["cls_W"].shape[0]
    side = int(round(np.sqrt((params["fc1_W"].shape[1] - SPECTRAL_WIDTH) / CHANNELS)))
    return Dims(n, p, 4 * side, k)


def copy_params(params):
    return {name: params[name].copy() for name in PARAM_NAMES}


def zeros_like(params):
    return {name: np.zeros_like(params[name]) for name in PARAM_NAMES}


@dataclass
class ForwardTrace:
    h_spe: np.ndarray
    conv1: np.ndarray
    conv2: np.ndarray
    pool1: np.ndarray
    conv3: np.ndarray
    pool2: np.ndarray
    h_spa: np.ndarray
    fusion: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    tape: Optional[GradientTape]
    logits_var: Optional[Var]
    single: bool


def _as_batch(spectral, patch, dims: Dims):
    spectral = np.asarray(spectral, dtype=np.float64)
    patch = np.asarray(patch, dtype=np.float64)
    single = spectral.ndim == 1
    if single:
        spectral, patch = spectral[None], patch[None]
    if spectral.shape[1] != dims.n:
        raise ShapeError(f"spectral length {spectral.shape[1]} != n = {dims.n}")
    if patch.shape[1:] != (dims.w, dims.w, dims.p):
        raise ShapeError(f"patch shape {patch.shape[1:]} != ({dims.w}, {dims.w}, {dims.p})")
    if patch.shape[0] != spectral.shape[0]:
        raise ShapeError("spectral and patch batch sizes differ")
    return spectral, patch, single


def forward(params, spectral, patch, record: bool = True) -> ForwardTrace:
    """Run BaseNet on one sample or a batch.

    With ``record`` the computation is taped so :func:`param_gradients` can
    be called on the returned trace; without it nothing is kept for backprop.
    """
    dims = dims_of(params)
    spectral, patch, single = _as_batch(spectral, patch, dims)
    tape = GradientTape()
    if not record:
        return _forward_plain(params, spectral, patch, single)
    P = {name: tape.watch(name, params[name]) for name in PARAM_NAMES}
    x_spe = tape.watch("x_spectral", spectral)
    x_spa = tape.watch("x_patch", patch)

    h_spe = tape.apply("relu", tape.apply("fc", x_spe, P["spe_W"], P["spe_b"]))
    c1 = tape.apply("conv2d_same", x_spa, P["conv1_K"], P["conv1_b"])
    c2 = tape.apply("conv2d_same", c1, P["conv2_K"], P["conv2_b"])
    pool1 = tape.apply("avgpool2x2", tape.apply("relu", tape.apply("add", c1, c2)))
    c3 = tape.apply("conv2d_same", pool1, P["conv3_K"], P["conv3_b"])
    pool2 = tape.apply("avgpool2x2", tape.apply("relu", tape.apply("add", pool1, c3)))
    h_spa = tape.apply("flatten", pool2)
    fusion = tape.apply("concat", h_spe, h_spa)
    hidden = tape.apply("relu", tape.apply("fc", fusion, P["fc1_W"], P["fc1_b"]))
    logits = tape.apply("fc", hidden, P["cls_W"], P["cls_b"])
    probs = softmax(logits.value)
    return ForwardTrace(
        h_spe.value, c1.value, c2.value, pool1.value, c3.value, pool2.value,
        h_spa.value, fusion.value, hidden.value, logits.value, probs,
        tape, logits, single,
    )


def _forward_plain(params, spectral, patch, single) -> ForwardTrace:
    from .tensor import avgpool2x2, conv2d_same, fc_forward, relu

    h_spe = relu(fc_forward(spectral, params["spe_W"], params["spe_b"]))
    c1 = conv2d_same(patch, params["conv1_K"], params["conv1_b"])
    c2 = conv2d_same(c1, params["conv2_K"], params["conv2_b"])
    pool1 = avgpool2x2(relu(c1 + c2))
    c3 = conv2d_same(pool1, params["conv3_K"], params["conv3_b"])
    pool2 = avgpool2x2(relu(pool1 + c3))
    h_spa = pool2.reshape(pool2.shape[0], -1)
    fusion = np.concatenate([h_spe, h_spa], axis=1)
    hidden = relu(fc_forward(fusion, params["fc1_W"], params["fc1_b"]))
    logits = fc_forward(hidden, params["cls_W"], params["cls_b"])
    return ForwardTrace(h_spe, c1, c2, pool1, c3, pool2, h_spa, fusion, hidden,
                        logits, softmax(logits), None, None, single)


def predict_proba(params, spectral, patch, chunk: int = 512) -> np.ndarray:
    """Class probabilities for a batch, evaluated in chunks without taping."""
    spectral = np.asarray(spectral, dtype=np.float64)
    if spectral.shape[0] == 0:
        return np.zeros((0, params["cls_W"].shape[0]))
    out = [forward(params, spectral[i:i + chunk], patch[i:i + chunk], record=False).probs
           for i in range(0, spectral.shape[0], chunk)]
    return np.concatenate(out)


def param_gradients(trace: ForwardTrace, seed) -> dict[str, np.ndarray]:
    """Backpropagate ``seed`` (dL/dlogits, shaped like the logits) to every parameter."""
    if trace.tape is None:
        raise ValueError("trace was computed with record=False")
    seed = np.asarray(seed, dtype=np.float64)
    if trace.single and seed.ndim == 1:
        seed = seed[None]
    grads = trace.tape.backward(trace.logits_var, seed)
    return {name: grads[name] for name in PARAM_NAMES}


def supervised_loss(probs, label: int) -> float:
    """Cross-entropy of one prediction; ``label`` is a 1-based class id."""
    return float(-np.log(max(float(probs[label - 1]), 1e-30)))


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits.

    ``labels`` are 1-based. The gradient uses the fused softmax/CE form
    ``(probs - onehot) / B``.
    """
    B = probs.shape[0]
    rows = np.arange(B)
    idx = np.asarray(labels) - 1
    loss = float(-np.log(np.maximum(probs[rows, idx], 1e-30)).mean())
    grad = probs.copy()
    grad[rows, idx] -= 1.0
    return loss, grad / B


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RSEN"
CHECKPOINT_VERSION = 1
_TRANSFORM_KEYS = ("lo", "hi", "means", "loadings")


class CheckpointError(ValueError):
    pass


def _write_tensor(fh, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_tensor(buf, pos):
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    end = pos + 8 * count
    if end > len(buf):
        raise CheckpointError(f"checkpoint truncated at byte offset {len(buf)}")
    arr = np.frombuffer(buf[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
    return arr, end


def save_checkpoint(path, student, teacher, transform: Optional[dict] = None) -> None:
    """Write both parameter sets (student first) and an optional preprocessing transform.

    Layout: ``b"RSEN"``, uint32 version, uint32 n, p, w, k, then every tensor
    of the student and then the teacher in :data:`PARAM_NAMES` order, each
    as uint32 ndim, uint32 dims, float64 values (all little-endian). A
    trailing uint32 flag announces the transform tensors lo, hi, means,
    loadings.
    """
    dims = dims_of(student)
    if dims_of(teacher) != dims:
        raise ShapeError("student and teacher shapes differ")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<5I", CHECKPOINT_VERSION, dims.n, dims.p, dims.w, dims.k))
        for params in (student, teacher):
            for name in PARAM_NAMES:
                _write_tensor(fh, params[name])
        fh.write(struct.pack("<I", 1 if transform is not None else 0))
        if transform is not None:
            for key in _TRANSFORM_KEYS:
                _write_tensor(fh, transform[key])


def load_checkpoint(path):
    """Returns ``(dims, student, teacher, transform_or_None)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an RSEN checkpoint")
    if len(buf) < 24:
        raise CheckpointError(f"{path}: truncated header")
    version, n, p, w, k = struct.unpack_from("<5I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    dims = Dims(n, p, w, k)
    shapes = param_shapes(dims)
    pos = 24
    sets = []
    for _ in range(2):
        params = {}
        for name in PARAM_NAMES:
            arr, pos = _read_tensor(buf, pos)
            if arr.shape != shapes[name]:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {shapes[name]}")
            params[name] = arr
        sets.append(params)
    transform = None
    (flag,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if flag:
        transform = {}
        for key in _TRANSFORM_KEYS:
            transform[key], pos = _read_tensor(buf, pos)
    return dims, sets[0], sets[1], transform
