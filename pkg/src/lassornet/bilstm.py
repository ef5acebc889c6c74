"""Bidirectional LSTM regressor with a linear residual connection.

For person ``i`` and sample ``j`` the prediction of the encoded ICT pair is::

    o_ij  = h_fwd_ij W_fo + h_bwd_ij W_bo + b_o
    pred  = o_ij theta + x_ij beta + beta0

where ``x_ij`` is the input row (genes, optionally followed by the encoded ZT pair).
Each direction is an LSTM cell with gates ``e`` (input), ``p`` (forget), ``a``
(candidate) and ``o`` (output), in that order along the leading axis of every gate
array::

    gate_m = act_m(x W_in[m] + b_in[m] + h_prev W_rec[m] + b_rec[m])
    c = p * c_prev + e * a
    h = o * tanh(c)

Hidden and cell states start at zero. The backward cell reads each person's
samples from last to first.

Parameters are kept in a flat ``dict`` of arrays so gradients, optimiser steps and
serialisation share one layout:

==============  ==============
key             shape
==============  ==============
fwd.W_in        (4, D, H)
fwd.W_rec       (4, H, H)
fwd.b_in        (4, H)
fwd.b_rec       (4, H)
bwd.*           as fwd.*
W_fo, W_bo      (H, P)
b_o             (P,)
theta           (P, 2)
beta            (D, 2)
beta0           (2,)
==============  ==============
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch

DIRECTIONS = ("fwd", "bwd")
CELL_KEYS = ("W_in", "W_rec", "b_in", "b_rec")
HEAD_KEYS = ("W_fo", "W_bo", "b_o", "theta", "beta", "beta0")
PARAM_KEYS = tuple(f"{d}.{k}" for d in DIRECTIONS for k in CELL_KEYS) + HEAD_KEYS


def param_shapes(D: int, H: int, P: int) -> dict:
    shapes = {}
    for d in DIRECTIONS:
        shapes[f"{d}.W_in"] = (4, D, H)
        shapes[f"{d}.W_rec"] = (4, H, H)
        shapes[f"{d}.b_in"] = (4, H)
        shapes[f"{d}.b_rec"] = (4, H)
    shapes.update(W_fo=(H, P), W_bo=(H, P), b_o=(P,), theta=(P, 2), beta=(D, 2), beta0=(2,))
    return shapes


@dataclass
class BiLstmModel:
    params: dict
    feature_names: list = field(default_factory=list)

    @property
    def D(self) -> int:
        return self.params["beta"].shape[0]

    @property
    def H(self) -> int:
        return self.params["W_fo"].shape[0]

    @property
    def P(self) -> int:
        return self.params["W_fo"].shape[1]

    def copy(self) -> "BiLstmModel":
        return BiLstmModel({k: v.copy() for k, v in self.params.items()}, list(self.feature_names))

    def input_weight_rows(self) -> np.ndarray:
        """All gate input weights of each input row, ``(D, 8 H)``: bwd gates 1-4 then fwd gates 1-4."""
        blocks = [self.params[f"{d}.W_in"] for d in ("bwd", "fwd")]
        return np.concatenate([w.transpose(1, 0, 2).reshape(self.D, -1) for w in blocks], axis=1)

    def set_input_weight_rows(self, rows: np.ndarray) -> None:
        H, D = self.H, self.D
        half = 4 * H
        for n, d in enumerate(("bwd", "fwd")):
            part = rows[:, n * half : (n + 1) * half]
            self.params[f"{d}.W_in"] = part.reshape(D, 4, H).transpose(1, 0, 2).copy()

    def constraint_violation(self, tau: float) -> float:
        """``max_k (max |input weights of row k| - tau ||beta_k||)``."""
        peak = np.abs(self.input_weight_rows()).max(axis=1)
        return float(np.max(peak - tau * np.linalg.norm(self.params["beta"], axis=1)))

    def to_dict(self) -> dict:
        return {
            "dims": {"D": self.D, "H": self.H, "P": self.P},
            "feature_names": list(self.feature_names),
            "params": {
                k: {"shape": list(v.shape), "data": v.ravel(order="C").tolist()}
                for k, v in self.params.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BiLstmModel":
        dims = d["dims"]
        shapes = param_shapes(dims["D"], dims["H"], dims["P"])
        params = {}
        for k, shape in shapes.items():
            entry = d["params"][k]
            if tuple(entry["shape"]) != shape:
                raise DimensionMismatch(f"parameter {k} has shape {entry['shape']}, expected {shape}")
            params[k] = np.asarray(entry["data"], dtype=float).reshape(shape)
        return cls(params, list(d.get("feature_names", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def init_model(D: int, H: int, P: int, seed, feature_names: Optional[Sequence[str]] = None) -> BiLstmModel:
    """Seeded initial weights.

    Recurrent weights, gate biases and the output layer are uniform on
    ``(-1/sqrt(H), 1/sqrt(H))``. Gate input weights, ``theta``, ``beta`` and
    ``beta0`` start at zero, which satisfies the hierarchy constraint
    ``|W_in[., k, .]| <= tau ||beta_k||`` from the first step.
    """
    if H < 1 or P < 1 or D < 1:
        raise ValueError("D, H and P must all be >= 1")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(H)
    params = {}
    for k, shape in param_shapes(D, H, P).items():
        if k.endswith("W_in") or k in ("theta", "beta", "beta0"):
            params[k] = np.zeros(shape)
        else:
            params[k] = rng.uniform(-bound, bound, size=shape)
    return BiLstmModel(params, list(feature_names or []))


@dataclass
class SequenceBatch:
    """Variable-length sequences padded to a common length.

    ``X`` is ``(B, T, D)``, ``Y`` is ``(B, T, 2)`` and ``mask`` marks real samples.
    """

    X: np.ndarray
    Y: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_sequences(cls, xs: Sequence[np.ndarray], ys: Optional[Sequence[np.ndarray]] = None):
        if len(xs) == 0:
            raise ValueError("empty batch")
        lengths = np.array([len(x) for x in xs], dtype=int)
        if np.any(lengths < 1):
            raise ValueError("every sequence needs at least one sample")
        D = xs[0].shape[1]
        B, T = len(xs), int(lengths.max())
        X = np.zeros((B, T, D))
        Y = np.zeros((B, T, 2))
        mask = np.zeros((B, T), dtype=bool)
        for i, x in enumerate(xs):
            if x.shape[1] != D:
                raise DimensionMismatch("all sequences must have the same input width")
            X[i, : len(x)] = x
            mask[i, : len(x)] = True
            if ys is not None:
                Y[i, : len(x)] = ys[i]
        return cls(X, Y, mask, lengths)

    @property
    def n_samples(self) -> int:
        return int(self.mask.sum())

    def unpad(self, arr: np.ndarray) -> list:
        return [arr[i, :n] for i, n in enumerate(self.lengths)]


def _reverse_each(arr: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Reverse the valid prefix of every sequence, keeping padding at the end."""
    out = np.zeros_like(arr)
    for i, n in enumerate(lengths):
        out[i, :n] = arr[i, n - 1 :: -1] if n > 0 else arr[i, :0]
    return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _cell_forward(params: dict, prefix: str, X: np.ndarray):
    B, T, D = X.shape
    W_in = params[f"{prefix}.W_in"]
    H = W_in.shape[2]
    Wx = W_in.transpose(1, 0, 2).reshape(D, 4 * H)
    Wh = params[f"{prefix}.W_rec"].transpose(1, 0, 2).reshape(H, 4 * H)
    bias = (params[f"{prefix}.b_in"] + params[f"{prefix}.b_rec"]).reshape(4 * H)

    xz = (X.reshape(B * T, D) @ Wx).reshape(B, T, 4 * H) + bias
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.zeros((B, T, H))
    cache = {"gates": np.zeros((B, T, 4, H)), "c": np.zeros((B, T, H)), "tc": np.zeros((B, T, H))}
    for t in range(T):
        z = (xz[:, t] + h @ Wh).reshape(B, 4, H)
        e = _sigmoid(z[:, 0])
        p = _sigmoid(z[:, 1])
        a = np.tanh(z[:, 2])
        o = _sigmoid(z[:, 3])
        c = p * c + e * a
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        g = cache["gates"][:, t]
        g[:, 0], g[:, 1], g[:, 2], g[:, 3] = e, p, a, o
        cache["c"][:, t] = c
        cache["tc"][:, t] = tc
    cache["h"] = hs
    cache["X"] = X
    return hs, cache


def _cell_backward(params: dict, prefix: str, cache: dict, dh_ext: np.ndarray) -> dict:
    X = cache["X"]
    B, T, D = X.shape
    H = dh_ext.shape[2]
    W_rec = params[f"{prefix}.W_rec"]
    Wh = W_rec.transpose(1, 0, 2).reshape(H, 4 * H)
    gates, cs, tcs, hs = cache["gates"], cache["c"], cache["tc"], cache["h"]

    dz_all = np.zeros((B, T, 4, H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        e, p, a, o = gates[:, t, 0], gates[:, t, 1], gates[:, t, 2], gates[:, t, 3]
        c_prev = cs[:, t - 1] if t > 0 else np.zeros((B, H))
        dh = dh_ext[:, t] + dh_next
        tc = tcs[:, t]
        dc = dh * o * (1.0 - tc**2) + dc_next
        dz = dz_all[:, t]
        dz[:, 0] = dc * a * e * (1.0 - e)
        dz[:, 1] = dc * c_prev * p * (1.0 - p)
        dz[:, 2] = dc * e * (1.0 - a**2)
        dz[:, 3] = dh * tc * o * (1.0 - o)
        dc_next = dc * p
        dh_next = dz.reshape(B, 4 * H) @ Wh.T

    h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1)
    dz_flat = dz_all.reshape(B * T, 4 * H)
    dWx = (X.reshape(B * T, D).T @ dz_flat).reshape(D, 4, H).transpose(1, 0, 2)
    dWh = (h_prev.reshape(B * T, H).T @ dz_flat).reshape(H, 4, H).transpose(1, 0, 2)
    db = dz_flat.sum(axis=0).reshape(4, H)
    return {
        f"{prefix}.W_in": dWx,
        f"{prefix}.W_rec": dWh,
        f"{prefix}.b_in": db,
        f"{prefix}.b_rec": db.copy(),
    }


def _check_dims(model: BiLstmModel, batch: SequenceBatch) -> None:
    if batch.X.shape[2] != model.D:
        raise DimensionMismatch(f"model expects {model.D} inputs, batch has {batch.X.shape[2]}")


def _forward_full(model: BiLstmModel, batch: SequenceBatch):
    _check_dims(model, batch)
    prm = model.params
    hf, cache_f = _cell_forward(prm, "fwd", batch.X)
    hb_rev, cache_b = _cell_forward(prm, "bwd", _reverse_each(batch.X, batch.lengths))
    hb = _reverse_each(hb_rev, batch.lengths)
    o = hf @ prm["W_fo"] + hb @ prm["W_bo"] + prm["b_o"]
    pred = o @ prm["theta"] + batch.X @ prm["beta"] + prm["beta0"]
    return pred, (hf, hb, o, cache_f, cache_b)


def forward(model: BiLstmModel, batch: SequenceBatch) -> np.ndarray:
    """Predicted encoded pairs, ``(B, T, 2)``; padded positions are meaningless."""
    return _forward_full(model, batch)[0]


def predict_sequences(model: BiLstmModel, xs: Sequence[np.ndarray]) -> list:
    batch = SequenceBatch.from_sequences(xs)
    return batch.unpad(forward(model, batch))


def loss(model: BiLstmModel, batch: SequenceBatch) -> float:
    """``1 / (2 n) * sum ||target - pred||^2`` over the real samples."""
    pred = forward(model, batch)
    r = (batch.Y - pred)[batch.mask]
    return float(0.5 * np.sum(r**2) / batch.n_samples)


def loss_and_gradients(model: BiLstmModel, batch: SequenceBatch):
    """Loss and the exact gradient of every parameter (back-propagation through time)."""
    prm = model.params
    pred, (hf, hb, o, cache_f, cache_b) = _forward_full(model, batch)
    n = batch.n_samples
    m = batch.mask[..., None]
    resid = np.where(m, pred - batch.Y, 0.0)
    value = float(0.5 * np.sum(resid**2) / n)

    dpred = resid / n
    B, T, _ = dpred.shape
    flat = dpred.reshape(B * T, 2)
    grads = {
        "beta0": flat.sum(axis=0),
        "beta": batch.X.reshape(B * T, -1).T @ flat,
        "theta": o.reshape(B * T, -1).T @ flat,
    }
    do = dpred @ prm["theta"].T
    do_flat = do.reshape(B * T, -1)
    grads["W_fo"] = hf.reshape(B * T, -1).T @ do_flat
    grads["W_bo"] = hb.reshape(B * T, -1).T @ do_flat
    grads["b_o"] = do_flat.sum(axis=0)
    dhf = do @ prm["W_fo"].T
    dhb = _reverse_each(do @ prm["W_bo"].T, batch.lengths)
    grads.update(_cell_backward(prm, "fwd", cache_f, dhf))
    grads.update(_cell_backward(prm, "bwd", cache_b, dhb))
    return value, grads


def gradients(model: BiLstmModel, batch: SequenceBatch) -> dict:
    return loss_and_gradients(model, batch)[1]
