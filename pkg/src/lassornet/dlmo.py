"""DLMO-time estimates built on top of per-sample ICT predictions.

A person's DLMO time is the offset between ICT and ZT, so every sample gives a
noisy reading ``predicted ICT - recorded ZT``. The single-sample rule reads it off
one anchor sample. The weighted rule combines three consecutive samples with
weights fitted on the validation people.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .circular import PERIOD, circ_error, wrap12, wrap24
from .circular import auc as _auc
from .circular import mae as _mae
from .errors import EmptyValidation, LengthMismatch, MissingSamples, SingularDesign, TooFewPeople

ZT_BIN = 0.25
N_WEIGHTED = 3
_TIE = 1e-12


@dataclass
class PersonPredictions:
    """One person's recorded ZTs, predicted ICTs and (when known) true ICTs and DLMO."""

    person_id: str
    zt: np.ndarray
    pred_ict: np.ndarray
    ict: Optional[np.ndarray] = None
    dlmo: Optional[float] = None

    def __post_init__(self):
        self.zt = np.asarray(self.zt, dtype=float)
        self.pred_ict = np.asarray(self.pred_ict, dtype=float)
        if self.ict is not None:
            self.ict = np.asarray(self.ict, dtype=float)
        if self.zt.shape != self.pred_ict.shape:
            raise LengthMismatch(f"{self.person_id}: {len(self.zt)} ZTs but {len(self.pred_ict)} predictions")

    @property
    def n_samples(self) -> int:
        return len(self.zt)

    def offsets(self) -> np.ndarray:
        """``(predicted ICT - ZT) mod 24`` per sample."""
        return wrap24(self.pred_ict - self.zt)


@dataclass(frozen=True)
class AnchorIndex:
    person_id: str
    index: int  # 0-based sample index
    best_zt: float


@dataclass
class DlmoWeights:
    alpha: np.ndarray
    intercept: float = 0.0
    fit_intercept: bool = False
    best_zt: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "alpha": [float(a) for a in self.alpha],
            "intercept": float(self.intercept),
            "fit_intercept": self.fit_intercept,
            "best_zt": self.best_zt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DlmoWeights":
        return cls(np.asarray(d["alpha"], float), d.get("intercept", 0.0), d.get("fit_intercept", False), d.get("best_zt"))


def zt_bin(zt) -> np.ndarray:
    """Nearest multiple of 0.25 h, wrapped to [0, 24)."""
    return wrap24(np.round(np.asarray(zt, dtype=float) / ZT_BIN) * ZT_BIN)


def best_zt(predictions: Sequence[PersonPredictions]) -> float:
    """ZT bin with the lowest mean circular ICT error pooled over all validation people.

    Ties (within 1e-12) go to the earliest bin.
    """
    zts, errs = [], []
    for p in predictions:
        if p.ict is None:
            raise EmptyValidation(f"person {p.person_id!r} has no ICT labels")
        if p.n_samples == 0:
            raise EmptyValidation(f"person {p.person_id!r} has no predictions")
        zts.append(zt_bin(p.zt))
        errs.append(circ_error(p.ict, p.pred_ict))
    if not zts:
        raise EmptyValidation("no validation predictions")
    zts, errs = np.concatenate(zts), np.concatenate(errs)
    bins = np.unique(zts)
    means = np.array([errs[zts == b].mean() for b in bins])
    return float(bins[np.flatnonzero(means <= means.min() + _TIE)[0]])


def anchor(p: PersonPredictions, target_zt: float, window: int = 1) -> AnchorIndex:
    """Sample whose recorded ZT is circularly closest to ``target_zt``.

    With ``window > 1`` only samples that start a run of ``window`` consecutive
    samples are eligible. Ties go to the earlier sample.
    """
    last = p.n_samples - window
    if last < 0:
        raise MissingSamples(f"person {p.person_id!r} has {p.n_samples} samples, needs {window}")
    d = circ_error(p.zt[: last + 1], target_zt)
    j = int(np.flatnonzero(d <= d.min() + _TIE)[0])
    return AnchorIndex(p.person_id, j, float(target_zt))


def anchors(predictions: Sequence[PersonPredictions], target_zt: float, window: int = 1) -> list:
    return [anchor(p, target_zt, window) for p in predictions]


def predict_dlmo_single(p: PersonPredictions, a: AnchorIndex) -> float:
    j = a.index
    if not 0 <= j < p.n_samples:
        raise MissingSamples(f"anchor {j} outside person {p.person_id!r} with {p.n_samples} samples")
    return float(wrap24(p.pred_ict[j] - p.zt[j]))


def offset_vector(p: PersonPredictions, a: AnchorIndex) -> np.ndarray:
    """The three offsets from the anchor on, unwrapped around the first one.

    The first offset is mapped into (-12, 12] and each later one is placed within
    12 h of it, so a person whose readings straddle midnight gets a consistent
    vector.
    """
    j = a.index
    if j < 0 or j + N_WEIGHTED > p.n_samples:
        raise MissingSamples(
            f"person {p.person_id!r}: anchor {j} needs samples up to {j + N_WEIGHTED - 1}, has {p.n_samples}"
        )
    raw = p.pred_ict[j : j + N_WEIGHTED] - p.zt[j : j + N_WEIGHTED]
    first = wrap12(raw[0])
    return first + wrap12(raw - first)


def _unwrap_target(z: float, ref: float) -> float:
    return float(ref + wrap12(z - ref))


def fit_dlmo_weights(
    predictions: Sequence[PersonPredictions],
    anchors_: Sequence[AnchorIndex],
    fit_intercept: bool = False,
) -> DlmoWeights:
    """Least-squares weights of the three offsets, fitted on validation people.

    Each true DLMO is unwrapped to within 12 h of the person's first offset before
    the regression. The minimum-norm solution is returned when the design is rank
    deficient.
    """
    if len(predictions) != len(anchors_):
        raise LengthMismatch("one anchor per person is required")
    people = [(p, a) for p, a in zip(predictions, anchors_) if p.dlmo is not None]
    if len(people) < N_WEIGHTED:
        raise TooFewPeople(f"need at least {N_WEIGHTED} validation people with DLMO, got {len(people)}")
    A = np.array([offset_vector(p, a) for p, a in people])
    z = np.array([_unwrap_target(p.dlmo, row[0]) for (p, _), row in zip(people, A)])
    if fit_intercept:
        A = np.hstack([A, np.ones((len(A), 1))])
    if not np.all(np.isfinite(A)) or not np.any(A):
        raise SingularDesign("offset design matrix is zero or non-finite")
    coef, *_ = np.linalg.lstsq(A, z, rcond=None)
    if not np.all(np.isfinite(coef)):
        raise SingularDesign("least-squares weights are not finite")
    best = anchors_[0].best_zt if anchors_ else None
    if fit_intercept:
        return DlmoWeights(coef[:N_WEIGHTED], float(coef[N_WEIGHTED]), True, best)
    return DlmoWeights(coef, 0.0, False, best)


def predict_dlmo_weighted(p: PersonPredictions, a: AnchorIndex, weights: DlmoWeights) -> float:
    return float(wrap24(offset_vector(p, a) @ weights.alpha + weights.intercept))


def dlmo_metrics(truth, predictions) -> tuple:
    """``(MAE, AUC)`` of circular DLMO errors."""
    truth = np.asarray(truth, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    if truth.shape != predictions.shape:
        raise LengthMismatch(f"{truth.size} truths but {predictions.size} predictions")
    e = circ_error(truth, predictions)
    return _mae(e), _auc(e)


def estimate_dlmo(
    validation: Sequence[PersonPredictions],
    test: Sequence[PersonPredictions],
    rule: str = "single",
    fit_intercept: bool = False,
):
    """Fit the anchor (and weights) on ``validation``; predict DLMO for ``test``.

    Returns ``(predicted DLMO per test person, fitted state)`` where the state is a
    dict holding ``best_zt`` and, for the weighted rule, the weights. Test people
    only ever pass through the prediction functions.
    """
    target = best_zt(validation)
    if rule == "single":
        preds = [predict_dlmo_single(p, anchor(p, target)) for p in test]
        return np.array(preds), {"rule": rule, "best_zt": target}
    if rule == "weighted":
        w = fit_dlmo_weights(validation, anchors(validation, target, N_WEIGHTED), fit_intercept)
        preds = [predict_dlmo_weighted(p, anchor(p, target, N_WEIGHTED), w) for p in test]
        return np.array(preds), {"rule": rule, "best_zt": target, "weights": w.to_dict()}
    raise ValueError(f"unknown DLMO rule {rule!r}")


def apply_dlmo_state(people: Sequence[PersonPredictions], state: dict) -> np.ndarray:
    """Predict DLMO for ``people`` from a stored ``estimate_dlmo`` state."""
    target = state["best_zt"]
    if state["rule"] == "single":
        return np.array([predict_dlmo_single(p, anchor(p, target)) for p in people])
    w = DlmoWeights.from_dict(state["weights"])
    return np.array([predict_dlmo_weighted(p, anchor(p, target, N_WEIGHTED), w) for p in people])


__all__ = [
    "PERIOD",
    "ZT_BIN",
    "PersonPredictions",
    "AnchorIndex",
    "DlmoWeights",
    "zt_bin",
    "best_zt",
    "anchor",
    "anchors",
    "predict_dlmo_single",
    "offset_vector",
    "fit_dlmo_weights",
    "predict_dlmo_weighted",
    "dlmo_metrics",
    "estimate_dlmo",
    "apply_dlmo_state",
]
