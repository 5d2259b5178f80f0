"""Agreement metrics for valence/arousal regression and the CCC training loss.

All moments are population moments (divide by N). Denominators carry
``EPS = 1e-8`` so degenerate inputs (zero variance) give 0 instead of NaN.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ShapeError, Tensor

EPS = 1e-8

# (name, valence interval, arousal interval); intervals are [lo, hi) unless hi is the range end
REGIONS = (
    ("V[0,1] A[0,0.5)", (0.0, 1.0), (0.0, 0.5)),
    ("V[0,1] A[0.5,1]", (0.0, 1.0), (0.5, 1.0)),
    ("V[-1,0) A[0,0.5)", (-1.0, 0.0), (0.0, 0.5)),
    ("V[-1,0) A[0.5,1]", (-1.0, 0.0), (0.5, 1.0)),
    ("V[-1,1] A[0,1]", (-1.0, 1.0), (0.0, 1.0)),
)


def _pair(labels, predictions) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(labels, dtype=np.float64).reshape(-1)
    y = np.asarray(predictions, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} labels vs {y.size} predictions")
    if x.size < 2:
        raise ValueError(f"need at least 2 samples, got {x.size}")
    return x, y


@dataclass
class MomentSet:
    mean_labels: float
    mean_predictions: float
    var_labels: float
    var_predictions: float
    covariance: float

    @classmethod
    def of(cls, labels, predictions) -> "MomentSet":
        x, y = _pair(labels, predictions)
        # shifting by the first sample leaves the moments unchanged and makes constant inputs exactly zero-variance
        sx, sy = x - x[0], y - y[0]
        cx, cy = sx.mean(), sy.mean()
        dx, dy = sx - cx, sy - cy
        return cls(float(x[0] + cx), float(y[0] + cy), float(np.mean(dx * dx)), float(np.mean(dy * dy)),
                   float(np.mean(dx * dy)))


def ccc(labels, predictions) -> float:
    """Concordance correlation coefficient."""
    m = MomentSet.of(labels, predictions)
    denom = m.var_labels + m.var_predictions + (m.mean_labels - m.mean_predictions) ** 2 + EPS
    return 2.0 * m.covariance / denom


def pcc(labels, predictions) -> float:
    m = MomentSet.of(labels, predictions)
    return m.covariance / (np.sqrt(m.var_labels * m.var_predictions) + EPS)


def mse(labels, predictions) -> float:
    x = np.asarray(labels, dtype=np.float64).reshape(-1)
    y = np.asarray(predictions, dtype=np.float64).reshape(-1)
    if x.shape != y.shape or x.size == 0:
        raise ValueError(f"length mismatch or empty input: {x.size} labels vs {y.size} predictions")
    return float(np.mean((x - y) ** 2))


def ccc_loss(labels, predictions: Tensor) -> Tensor:
    """``1 - (ccc_valence + ccc_arousal) / 2`` over a ``[N, 2]`` batch of frames.

    Gradients with respect to ``predictions`` are computed in closed form.
    """
    x = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=predictions.dtype)
    y = predictions.data
    if y.ndim != 2 or y.shape[1] != 2 or x.shape != y.shape:
        raise ShapeError(f"ccc_loss expects matching [N,2] arrays, got {x.shape} and {y.shape}")
    n = y.shape[0]
    if n < 2:
        raise ValueError(f"ccc_loss needs at least 2 frames, got {n}")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    dx, dy = x - mx, y - my
    sxy = (dx * dy).mean(axis=0)
    denom = (dx * dx).mean(axis=0) + (dy * dy).mean(axis=0) + (mx - my) ** 2 + EPS
    rho = 2.0 * sxy / denom
    loss = np.asarray(1.0 - rho.mean(), dtype=y.dtype)

    def bw(g):
        # d rho / d y_j = 2/N * [dx_j * D - 2 sxy * (dy_j - (mx - my))] / D^2
        drho = (2.0 / n) * (dx * denom - 2.0 * sxy * (dy - (mx - my))) / denom ** 2
        predictions._accumulate(-0.5 * g * drho)
    return Tensor._make(loss, (predictions,), bw)


@dataclass
class DimensionScores:
    ccc_v: float
    ccc_a: float
    pcc_v: float
    pcc_a: float
    mse_v: float
    mse_a: float
    regional: list[dict] = field(default_factory=list)

    @property
    def mean_ccc(self) -> float:
        return 0.5 * (self.ccc_v + self.ccc_a)

    def to_dict(self) -> dict:
        return asdict(self)


def regional_mse(labels, predictions, regions=REGIONS) -> list[dict]:
    """Per-region MSE with samples assigned by their label pair; empty regions give ``None``."""
    lab = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    if lab.shape != pred.shape:
        raise ValueError(f"shape mismatch: {lab.shape} vs {pred.shape}")
    rows = []
    for name, (v_lo, v_hi), (a_lo, a_hi) in regions:
        v, a = lab[:, 0], lab[:, 1]
        in_v = (v >= v_lo) & ((v < v_hi) | (v_hi == 1.0) & (v <= v_hi))
        in_a = (a >= a_lo) & ((a < a_hi) | (a_hi == 1.0) & (a <= a_hi))
        sel = in_v & in_a
        count = int(sel.sum())
        if count == 0:
            rows.append({"region": name, "count": 0, "mse_v": None, "mse_a": None})
            continue
        err = (lab[sel] - pred[sel]) ** 2
        rows.append({"region": name, "count": count,
                     "mse_v": float(err[:, 0].mean()), "mse_a": float(err[:, 1].mean())})
    return rows


def score(labels, predictions, with_regions: bool = True) -> DimensionScores:
    lab = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    return DimensionScores(
        ccc_v=ccc(lab[:, 0], pred[:, 0]), ccc_a=ccc(lab[:, 1], pred[:, 1]),
        pcc_v=float(pcc(lab[:, 0], pred[:, 0])), pcc_a=float(pcc(lab[:, 1], pred[:, 1])),
        mse_v=mse(lab[:, 0], pred[:, 0]), mse_a=mse(lab[:, 1], pred[:, 1]),
        regional=regional_mse(lab, pred) if with_regions else [],
    )


def write_report(path: str | Path, scores: DimensionScores, **extra) -> None:
    """Write the JSON metrics report (ccc/pcc/mse per dimension plus the regional table)."""
    payload = {"ccc_v": scores.ccc_v, "ccc_a": scores.ccc_a, "pcc_v": scores.pcc_v,
               "pcc_a": scores.pcc_a, "mse_v": scores.mse_v, "mse_a": scores.mse_a,
               "regional": scores.regional, **extra}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
