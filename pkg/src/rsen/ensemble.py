"""Student/teacher self-ensembling with a consistency filter.

The student (base network) is trained by Adam on cross-entropy over noisy
labeled samples plus a consistency loss that pulls its predictions on noisy
unlabeled samples towards the teacher's mean prediction over ``m`` noisy
copies. Only the ``q`` unlabeled samples on which the teacher is most
self-consistent enter that loss; ``q`` ramps up over training. The teacher
(ensemble network) is an exponential moving average of the student.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import basenet
from .data import SceneFeatures, augment_batch

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# rng stream purposes
_SHUFFLE, _AUG_LABELED, _AUG_TEACHER, _AUG_STUDENT = range(4)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    labeled_batch: int = 128
    unlabeled_batch: int = 128
    epochs: int = 20
    alpha: float = 0.95
    m: int = 5
    noise_std: float = 0.5
    w: int = 16
    p: int = 5
    n_per_class: int = 30
    n_unlabeled: int = 10000
    fixed_q: Optional[int] = None
    use_filter: bool = True
    # None: ceil(n_unlabeled / unlabeled_batch), or ceil(n_labeled / labeled_batch) without unlabeled data
    iters_per_epoch: Optional[int] = None
    # "q": divide the filtered consistency sum by the number of kept samples; "sum": plain sum
    consistency_norm: str = "q"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 0 or self.n_unlabeled < 0 or self.n_per_class < 1:
            raise ValueError("epochs and n_unlabeled must be >= 0, n_per_class >= 1")
        if self.fixed_q is not None and self.fixed_q < 1:
            raise ValueError("fixed_q must be >= 1")
        if self.iters_per_epoch is not None and self.iters_per_epoch < 1:
            raise ValueError("iters_per_epoch must be >= 1")
        if self.consistency_norm not in ("q", "sum"):
            raise ValueError("consistency_norm must be 'q' or 'sum'")
        if self.noise_std < 0 or self.learning_rate <= 0:
            raise ValueError("noise_std must be >= 0 and learning_rate > 0")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(basenet.zeros_like(params), basenet.zeros_like(params), 0)


@dataclass
class EnsembleState:
    student: dict
    teacher: dict
    adam: AdamState
    iteration: int = 0


@dataclass
class FilterMask:
    mask: np.ndarray  # (b,) of 0/1
    order: np.ndarray  # batch indices sorted by descending cons
    q: int


@dataclass
class TrainHistory:
    loss_cls: list = field(default_factory=list)
    loss_con: list = field(default_factory=list)
    q: list = field(default_factory=list)
    # (epoch, last iteration of that epoch, student OA, teacher OA)
    epoch_eval: list = field(default_factory=list)

    def to_csv(self) -> str:
        evals = {it: (ep, s, t) for ep, it, s, t in self.epoch_eval}
        has_eval = bool(evals)
        header = "iteration,L_cls,L_con,q"
        if has_eval:
            header += ",epoch,OA_student,OA_teacher"
        lines = [header]
        for i, (lc, ln, q) in enumerate(zip(self.loss_cls, self.loss_con, self.q)):
            row = f"{i},{lc!r},{ln!r},{q}"
            if has_eval:
                if i in evals:
                    ep, s, t = evals[i]
                    row += f",{ep},{s!r},{t!r}"
                else:
                    row += ",,,"
            lines.append(row)
        return "\n".join(lines) + "\n"


class DivergenceError(RuntimeError):
    """Non-finite loss during training; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


def stream(seed: int, purpose: int, counter: int) -> np.random.Generator:
    """Independent generator keyed by (seed, purpose, counter)."""
    return np.random.default_rng([seed, purpose, counter])


# --------------------------------------------------------------------------
# Filtering pieces
# --------------------------------------------------------------------------


def ensemble_mean_prediction(teacher, spectral, patch, m: int, rng, noise_std: float = 0.5):
    """Teacher probabilities on ``m`` noisy copies and their mean.

    Works on a single sample (1-D ``spectral``) or a batch. Returns
    ``(mean, copies)`` with ``copies`` stacked on a leading axis of size m.
    """
    spectral = np.asarray(spectral, dtype=np.float64)
    patch = np.asarray(patch, dtype=np.float64)
    single = spectral.ndim == 1
    if single:
        spectral, patch = spectral[None], patch[None]
    copies = []
    for _ in range(m):
        s, x = augment_batch(spectral, patch, rng, noise_std)
        copies.append(basenet.predict_proba(teacher, s, x, chunk=256))
    copies = np.stack(copies)
    mean = copies.mean(axis=0)
    if single:
        return mean[0], copies[:, 0]
    return mean, copies


def consistency_value(copies) -> np.ndarray | float:
    """Negative sum over classes of the population std across the m copies.

    ``copies`` is ``(m, k)`` for one sample or ``(m, b, k)`` for a batch.
    """
    copies = np.asarray(copies, dtype=np.float64)
    if copies.shape[0] < 2:
        out = np.zeros(copies.shape[1:-1])
    else:
        out = -np.sqrt(copies.var(axis=0)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def rampup_q(iteration: int, iter_max: int, b: int) -> int:
    """round(b * exp(-(1 - iteration/iter_max)^2)), clamped to [1, b]."""
    if iter_max <= 0:
        return b
    x = b * math.exp(-((1.0 - iteration / iter_max) ** 2))
    q = int(math.floor(x + 0.5))  # half away from zero for x >= 0
    return min(max(q, 1), b)


def build_filter(cons_values, q: int) -> FilterMask:
    """Keep the ``q`` largest cons values; ties go to the smaller batch index."""
    cons_values = np.asarray(cons_values, dtype=np.float64)
    b = cons_values.shape[0]
    q = min(max(int(q), 1), b) if b else 0
    order = np.argsort(-cons_values, kind="stable")
    mask = np.zeros(b)
    mask[order[:q]] = 1.0
    return FilterMask(mask, order, q)


def consistency_loss(student_probs, teacher_probs, mask, norm: str = "q"):
    """Filtered squared error between student and (constant) teacher probabilities.

    Returns ``(loss, dloss/dstudent_probs)``. With ``norm="q"`` the masked
    sum is divided by the number of kept samples.
    """
    if isinstance(mask, FilterMask):
        mask = mask.mask
    mask = np.asarray(mask, dtype=np.float64)
    diff = np.asarray(student_probs, dtype=np.float64) - np.asarray(teacher_probs, dtype=np.float64)
    if diff.shape[:1] != mask.shape:
        raise ValueError(f"mask {mask.shape} vs probabilities {diff.shape}")
    kept = mask.sum()
    if kept == 0:
        return 0.0, np.zeros_like(diff)
    scale = 1.0 / kept if norm == "q" else 1.0
    per_sample = (diff * diff).sum(axis=1)
    loss = float((mask * per_sample).sum() * scale)
    grad = 2.0 * scale * mask[:, None] * diff
    return loss, grad


def mse_consistency(student_probs, teacher_probs, norm: str = "q") -> float:
    """Unfiltered squared-error consistency, averaged over the batch for ``norm="q"``."""
    diff = np.asarray(student_probs, dtype=np.float64) - np.asarray(teacher_probs, dtype=np.float64)
    total = ((diff * diff).sum(axis=1)).sum()
    return float(total / diff.shape[0]) if norm == "q" else float(total)


def student_objective(student, spectral, patch, labels, teacher_mean=None, mask=None,
                      norm: str = "q", check_finite: bool = False):
    """Supervised plus filtered consistency loss and its parameter gradients.

    The first ``len(labels)`` rows of the batch are labeled; any remaining
    rows are unlabeled and are matched against ``teacher_mean`` under ``mask``.
    Returns ``(loss_cls, loss_con, grads)``; with ``check_finite`` a
    non-finite loss returns ``grads=None`` instead of backpropagating.
    """
    trace = basenet.forward(student, spectral, patch)
    nl = len(labels)
    l_cls, g_cls = basenet.cross_entropy(trace.probs[:nl], labels)
    seed_grad = np.zeros_like(trace.logits)
    seed_grad[:nl] = g_cls
    l_con = 0.0
    if trace.probs.shape[0] > nl:
        p_s = trace.probs[nl:]
        l_con, g_probs = consistency_loss(p_s, teacher_mean, mask, norm)
        seed_grad[nl:] = p_s * (g_probs - (g_probs * p_s).sum(axis=1, keepdims=True))
    if check_finite and not (math.isfinite(l_cls) and math.isfinite(l_con)):
        return l_cls, l_con, None
    return l_cls, l_con, basenet.param_gradients(trace, seed_grad)


# --------------------------------------------------------------------------
# Parameter updates
# --------------------------------------------------------------------------


def ema_update(teacher, student, alpha: float):
    """alpha * teacher + (1 - alpha) * student, per tensor."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    out = {}
    for name, te in teacher.items():
        st = student[name]
        if te.shape != st.shape:
            raise ValueError(f"{name}: teacher {te.shape} vs student {st.shape}")
        out[name] = alpha * te + (1.0 - alpha) * st
    return out


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam step. Inputs are not modified."""
    t = state.t + 1
    new_m, new_v, new_p = {}, {}, {}
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient {g.shape} vs parameter {theta.shape}")
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        new_p[name] = theta - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def iterations_per_epoch(config: TrainConfig, n_labeled: int, n_unlabeled: int) -> int:
    if config.iters_per_epoch is not None:
        return config.iters_per_epoch
    if n_unlabeled > 0:
        return math.ceil(n_unlabeled / config.unlabeled_batch)
    return max(1, math.ceil(n_labeled / config.labeled_batch))


def init_state(config: TrainConfig, dims: basenet.Dims) -> EnsembleState:
    student = basenet.init_params(config.seed, dims.n, dims.p, dims.w, dims.k)
    return EnsembleState(student, basenet.copy_params(student), AdamState.zeros(student), 0)


def _cycle(order: np.ndarray, start: int, size: int) -> np.ndarray:
    pos = (start + np.arange(size)) % order.size
    return order[pos]


def train(
    config: TrainConfig,
    features: SceneFeatures,
    labeled_idx,
    labeled_y,
    unlabeled_idx=(),
    k: Optional[int] = None,
    eval_hook: Optional[Callable[[EnsembleState], tuple[float, float]]] = None,
    eval_every: int = 1,
    state: Optional[EnsembleState] = None,
    inspect: Optional[Callable[[str, dict], None]] = None,
) -> tuple[EnsembleState, TrainHistory]:
    """Run the full self-ensembling optimisation.

    ``labeled_y`` holds 1-based class ids. ``eval_hook(state)`` returns
    ``(student_oa, teacher_oa)`` and is called every ``eval_every`` epochs
    and after the last one. ``inspect(stage, info)`` is a test hook that
    sees per-iteration internals.
    """
    labeled_idx = np.asarray(labeled_idx, dtype=np.int64)
    labeled_y = np.asarray(labeled_y, dtype=np.int64)
    unlabeled_idx = np.asarray(unlabeled_idx, dtype=np.int64)
    if labeled_idx.size == 0:
        raise ValueError("labeled set is empty")
    if k is None:
        k = int(labeled_y.max())
    dims = basenet.Dims(features.bands, features.p, features.w, k)
    if state is None:
        state = init_state(config, dims)
    history = TrainHistory()

    n_l, n_u = labeled_idx.size, unlabeled_idx.size
    per_epoch = iterations_per_epoch(config, n_l, n_u)
    iter_max = config.epochs * per_epoch
    seed = config.seed

    for epoch in range(config.epochs):
        shuffle = stream(seed, _SHUFFLE, epoch)
        lab_order = shuffle.permutation(n_l)
        unl_order = shuffle.permutation(n_u) if n_u else np.zeros(0, dtype=np.int64)
        for step in range(per_epoch):
            it = state.iteration
            lab_pos = _cycle(lab_order, step * config.labeled_batch, config.labeled_batch)
            lab_batch = labeled_idx[lab_pos]
            y = labeled_y[lab_pos]
            if n_u:
                bu = min(config.unlabeled_batch, n_u)
                unl_batch = unlabeled_idx[_cycle(unl_order, step * bu, bu)]
            else:
                unl_batch = np.zeros(0, dtype=np.int64)
            b = unl_batch.size

            spec_l, patch_l = features.batch(lab_batch)
            spec_l, patch_l = augment_batch(spec_l, patch_l, stream(seed, _AUG_LABELED, it),
                                            config.noise_std)
            if b:
                spec_u, patch_u = features.batch(unl_batch)
                mean_t, copies = ensemble_mean_prediction(
                    state.teacher, spec_u, patch_u, config.m,
                    stream(seed, _AUG_TEACHER, it), config.noise_std)
                cons = consistency_value(copies)
                if not config.use_filter:
                    q = b
                elif config.fixed_q is not None:
                    q = min(config.fixed_q, b)
                else:
                    q = rampup_q(it, iter_max, b)
                fmask = build_filter(cons, q)
                spec_s, patch_s = augment_batch(spec_u, patch_u, stream(seed, _AUG_STUDENT, it),
                                                config.noise_std)
                spec_all = np.concatenate([spec_l, spec_s])
                patch_all = np.concatenate([patch_l, patch_s])
            else:
                q, fmask, cons, mean_t = 0, None, None, None
                spec_all, patch_all = spec_l, patch_l

            l_cls, l_con, grads = student_objective(
                state.student, spec_all, patch_all, y, mean_t, fmask, config.consistency_norm,
                check_finite=True)
            if grads is None:
                snapshot = {
                    "iteration": it, "epoch": epoch, "loss_cls": l_cls, "loss_con": l_con,
                    "labeled_batch": lab_batch.tolist(), "unlabeled_batch": unl_batch.tolist(),
                }
                raise DivergenceError(f"non-finite loss at iteration {it}", snapshot)
            if inspect is not None:
                inspect("step", {"iteration": it, "cons": cons, "mask": fmask, "q": q,
                                 "teacher_before": state.teacher, "grads": grads})
            student, adam = adam_step(state.student, grads, state.adam, config.learning_rate)
            if inspect is not None:
                inspect("after_adam", {"iteration": it, "teacher": state.teacher, "student": student})
            teacher = ema_update(state.teacher, student, config.alpha)
            state = EnsembleState(student, teacher, adam, it + 1)

            history.loss_cls.append(l_cls)
            history.loss_con.append(l_con)
            history.q.append(int(q))

        last = epoch == config.epochs - 1
        if eval_hook is not None and ((epoch + 1) % eval_every == 0 or last):
            s_oa, t_oa = eval_hook(state)
            history.epoch_eval.append((epoch, state.iteration - 1, float(s_oa), float(t_oa)))
        logger.debug("epoch %d: L_cls %.4f L_con %.4f", epoch,
                     float(np.mean(history.loss_cls[-per_epoch:])),
                     float(np.mean(history.loss_con[-per_epoch:])))
    return state, history


def predict(params, features: SceneFeatures, indices) -> np.ndarray:
    """1-based class labels from one plain forward pass; ties go to the smaller id."""
    spec, patch = _batched_lookup(features, indices)
    if spec.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    probs = basenet.predict_proba(params, spec, patch)
    return np.argmax(probs, axis=1) + 1


def predict_all(params, features: SceneFeatures, indices, chunk: int = 2048) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = [predict(params, features, indices[i:i + chunk]) for i in range(0, indices.size, chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _batched_lookup(features, indices):
    return features.batch(np.asarray(indices, dtype=np.int64))
