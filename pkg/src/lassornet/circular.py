"""Times on the 24-hour circle.

A clock time ``t`` (hours) is represented for regression by the pair
``(sin(pi t / 12), cos(pi t / 12))``; predictions are mapped back with ``atan2``.
All functions accept scalars or arrays and broadcast like numpy ufuncs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, OutOfRange, ZeroVector

PERIOD = 24.0
HALF_PERIOD = 12.0


def wrap24(t):
    """Reduce hours into [0, 24)."""
    r = np.mod(np.asarray(t, dtype=float), PERIOD)
    # np.mod can return exactly 24.0 for tiny negative inputs
    r = np.where(r >= PERIOD, r - PERIOD, r)
    return float(r) if np.ndim(r) == 0 else r


def wrap12(t):
    """Reduce hours into the signed window (-12, 12]."""
    r = np.asarray(wrap24(t))
    r = np.where(r > HALF_PERIOD, r - PERIOD, r)
    return float(r) if np.ndim(r) == 0 else r


@dataclass(frozen=True)
class CircTime:
    hours: float

    def __post_init__(self):
        object.__setattr__(self, "hours", wrap24(float(self.hours)))

    def __float__(self):
        return self.hours


@dataclass(frozen=True)
class CircPair:
    t1: float
    t2: float


def encode(t):
    """Map hours to ``[..., 2]`` sine/cosine pairs."""
    angle = np.pi * np.asarray(t, dtype=float) / HALF_PERIOD
    return np.stack([np.sin(angle), np.cos(angle)], axis=-1)


def decode(pair, *, strict: bool = True):
    """Map ``[..., 2]`` pairs back to hours in [0, 24).

    Pairs that are exactly (0, 0) raise :class:`ZeroVector` when ``strict``;
    otherwise they decode to NaN so callers can flag them.
    """
    p = np.asarray(pair, dtype=float)
    t1, t2 = p[..., 0], p[..., 1]
    zero = (t1 == 0.0) & (t2 == 0.0)
    if strict and np.any(zero):
        raise ZeroVector("cannot decode the (0, 0) pair: phase is undefined")
    angle = np.mod(np.arctan2(t1, t2), 2.0 * np.pi)
    hours = np.asarray(wrap24(angle * HALF_PERIOD / np.pi), dtype=float)
    hours = np.where(zero, np.nan, hours)
    return float(hours) if hours.ndim == 0 else hours


def circ_error(truth, pred):
    """Absolute distance on the 24-hour circle, in [0, 12]."""
    d = np.abs(np.mod(np.asarray(truth, dtype=float) - np.asarray(pred, dtype=float), PERIOD))
    err = np.minimum(d, PERIOD - d)
    return float(err) if np.ndim(err) == 0 else err


def _as_errors(errors) -> np.ndarray:
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise EmptyInput("need at least one error value")
    return e


def mae(errors) -> float:
    """Median absolute (circular) error; even counts average the two middle values."""
    return float(np.median(_as_errors(errors)))


def auc(errors) -> float:
    """Area above the error survival curve on [0, 12], normalised to [0, 1].

    The integral of the survival function of a non-negative variable bounded by 12
    equals its mean, so this is ``1 - mean(errors) / 12``.
    """
    e = _as_errors(errors)
    if np.any(~np.isfinite(e)) or np.any(e < 0.0) or np.any(e > HALF_PERIOD):
        raise OutOfRange("circular errors must lie in [0, 12]")
    return float(1.0 - e.mean() / HALF_PERIOD)
