"""Geometric regularizers and the fitting photometric objective.

All point-wise sums are implemented as means so the default weights stay
batch-size independent.  Gradient wiring lives with the fitter; these are
the scalar definitions plus the weighted-total report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

MINSURF_SHARPNESS = 100.0


@dataclass(frozen=True)
class LossWeights:
    """Term weights; kappa (m^2) sets the decay width of the prior weight."""
    eikonal: float = 1e-3
    minsurf: float = 0.05
    deform: float = 10.0
    prior: float = 1.0
    photo: float = 1.0
    kappa: float = 2e-3
    prior_norm: str = "l1"  # 'l1' or 'l2' on the scalar SDF difference

    def __post_init__(self):
        for name in ("eikonal", "minsurf", "deform", "prior", "photo"):
            if getattr(self, name) < 0:
                raise ParameterError(f"loss weight {name} must be >= 0")
        if self.kappa <= 0:
            raise ParameterError("kappa must be positive")
        if self.prior_norm not in ("l1", "l2"):
            raise ParameterError("prior_norm must be 'l1' or 'l2'")


@dataclass
class LossReport:
    """Per-term values and their weighted total (total = sum of w * term)."""
    terms: dict
    total: float
    counts: dict = field(default_factory=dict)


def prior_weight(d_body: np.ndarray, kappa: float) -> np.ndarray:
    """exp(-d_body^2 / kappa): 1 on the body surface, decaying away from it."""
    return np.exp(-np.square(np.asarray(d_body, dtype=np.float64)) / kappa)


def prior_loss(d: np.ndarray, d_body: np.ndarray, kappa: float,
               norm: str = "l1", total_count: int | None = None) -> float:
    """Mean decayed deviation between the field SDF and the body SDF.

    total_count lets a caller average over a full sample population of
    which only the near-body subset is passed in (the rest contributes 0).
    """
    if kappa <= 0:
        raise ParameterError("kappa must be positive")
    d = np.asarray(d, dtype=np.float64)
    d_body = np.asarray(d_body, dtype=np.float64)
    diff = d - d_body
    dev = np.abs(diff) if norm == "l1" else np.square(diff)
    n = total_count if total_count is not None else d.size
    if n == 0:
        return 0.0
    return float(np.sum(prior_weight(d_body, kappa) * dev) / n)


def eikonal_loss(gradients: np.ndarray) -> float:
    """Mean squared deviation of the gradient norm from 1."""
    g = np.asarray(gradients, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(g)):
        raise ParameterError("gradients must be finite")
    if g.size == 0:
        return 0.0
    return float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))


def minsurf_loss(d: np.ndarray, total_count: int | None = None) -> float:
    """Mean exp(-100 |d|): penalizes signed distances hovering near zero."""
    d = np.asarray(d, dtype=np.float64)
    n = total_count if total_count is not None else d.size
    if n == 0:
        return 0.0
    return float(np.sum(np.exp(-MINSURF_SHARPNESS * np.abs(d))) / n)


def deform_reg_loss(residuals: np.ndarray) -> float:
    """Mean Euclidean norm of the residual deformation."""
    r = np.asarray(residuals, dtype=np.float64).reshape(-1, 3)
    if r.size == 0:
        return 0.0
    return float(np.mean(np.linalg.norm(r, axis=1)))


def photometric_loss(rendered_rgb, rendered_alpha, target_rgb, target_alpha,
                     mask=None) -> float:
    """MSE over the selected pixels' rgb and alpha channels.

    mask picks the pixels that participate (e.g. the ray subset actually
    rendered this step); an empty selection is a degenerate objective.
    """
    rr = np.asarray(rendered_rgb, dtype=np.float64).reshape(-1, 3)
    ra = np.asarray(rendered_alpha, dtype=np.float64).reshape(-1)
    tr = np.asarray(target_rgb, dtype=np.float64).reshape(-1, 3)
    ta = np.asarray(target_alpha, dtype=np.float64).reshape(-1)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        rr, ra, tr, ta = rr[mask], ra[mask], tr[mask], ta[mask]
    if len(rr) == 0:
        raise ParameterError("photometric loss over an empty pixel selection")
    sq = np.concatenate([np.square(rr - tr).ravel(), np.square(ra - ta)])
    return float(sq.mean())


def total_loss(terms: dict, weights: LossWeights, counts: dict | None = None) -> LossReport:
    """Weighted sum of the reported terms.

    Term keys map onto weights by name ('photo', 'eikonal', 'minsurf',
    'deform', 'prior'); unknown keys are rejected so typos cannot silently
    drop a term.
    """
    total = 0.0
    for name, value in terms.items():
        if not hasattr(weights, name):
            raise ParameterError(f"unknown loss term {name!r}")
        total += float(getattr(weights, name)) * float(value)
    return LossReport(terms=dict(terms), total=total, counts=dict(counts or {}))
