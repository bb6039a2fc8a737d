"""Finite-difference check of the full BaseNet training gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import basenet
from .ensemble import build_filter, student_objective


@dataclass
class GradcheckReport:
    seed: int
    per_param: dict  # name -> worst relative error over the probed coordinates
    probes: int

    @property
    def max_error(self) -> float:
        return max(self.per_param.values())

    def format(self) -> str:
        lines = [f"seed {self.seed}: {self.probes} coordinates probed"]
        for name in basenet.PARAM_NAMES:
            lines.append(f"  {name:8s} worst rel. error {self.per_param[name]:.3e}")
        lines.append(f"  max rel. error {self.max_error:.3e}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(seed: int = 0, n: int = 8, p: int = 2, w: int = 8, k: int = 3,
              probes_per_param: int = 12, h: float = 1e-5, corrupt: bool = False) -> GradcheckReport:
    """Compare backprop with central differences on a small random problem.

    The loss is the training objective: cross-entropy on two labeled samples
    plus the filtered consistency loss on three unlabeled samples against a
    fixed random target. ``probes_per_param`` random coordinates of every
    tensor are differenced (all of them for smaller tensors). ``corrupt``
    perturbs the analytic gradient as a negative control.
    """
    rng = np.random.default_rng(seed)
    params = basenet.init_params(seed, n, p, w, k)
    for name in basenet.PARAM_NAMES:
        if name.endswith("_b"):
            params[name] = 0.1 * rng.standard_normal(params[name].shape)
    spectral = rng.uniform(0, 1, size=(5, n))
    patch = rng.normal(size=(5, w, w, p))
    labels = rng.integers(1, k + 1, size=2)
    target = rng.dirichlet(np.ones(k), size=3)
    mask = build_filter(rng.normal(size=3), 2)

    def loss(theta):
        l_cls, l_con, _ = _objective(theta, spectral, patch, labels, target, mask, grads=False)
        return l_cls + l_con

    _, _, grads = _objective(params, spectral, patch, labels, target, mask, grads=True)
    if corrupt:
        grads = {name: g * 1.01 + 1e-3 for name, g in grads.items()}

    worst, probes = {}, 0
    for name in basenet.PARAM_NAMES:
        arr = params[name]
        flat = arr.reshape(-1)
        if flat.size <= probes_per_param:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=probes_per_param, replace=False)
        err = 0.0
        for c in coords:
            old = flat[c]
            flat[c] = old + h
            fp = loss(params)
            flat[c] = old - h
            fm = loss(params)
            flat[c] = old
            numeric = (fp - fm) / (2 * h)
            err = max(err, relative_error(grads[name].reshape(-1)[c], numeric))
            probes += 1
        worst[name] = err
    return GradcheckReport(seed, worst, probes)


def _objective(params, spectral, patch, labels, target, mask, grads):
    if grads:
        return student_objective(params, spectral, patch, labels, target, mask)
    trace = basenet.forward(params, spectral, patch, record=False)
    nl = len(labels)
    l_cls, _ = basenet.cross_entropy(trace.probs[:nl], labels)
    diff = trace.probs[nl:] - target
    l_con = float((mask.mask * (diff * diff).sum(axis=1)).sum() / mask.mask.sum())
    return l_cls, l_con, None
