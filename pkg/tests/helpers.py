"""Shared builders for the test-suite."""
import numpy as np

from lassornet import bilstm
from lassornet.bilstm import BiLstmModel, SequenceBatch


def random_model(D, H, P, seed, scale=0.5):
    """Every weight drawn at random (unlike init_model, which zeroes the input path)."""
    r = np.random.default_rng(seed)
    params = {k: r.uniform(-scale, scale, size=s) for k, s in bilstm.param_shapes(D, H, P).items()}
    return BiLstmModel(params)


def random_batch(D, lengths, seed):
    r = np.random.default_rng(seed)
    xs = [r.normal(size=(n, D)) for n in lengths]
    angles = [r.uniform(0, 2 * np.pi, size=n) for n in lengths]
    ys = [np.column_stack([np.sin(a), np.cos(a)]) for a in angles]
    return SequenceBatch.from_sequences(xs, ys), xs, ys


def flat_view(model):
    """(key, index) pairs for every scalar parameter."""
    return [(k, idx) for k, v in model.params.items() for idx in np.ndindex(v.shape)]


def central_difference(model, batch, key, idx, h=1e-5):
    m = model.copy()
    orig = m.params[key][idx]
    m.params[key][idx] = orig + h
    up = bilstm.loss(m, batch)
    m.params[key][idx] = orig - h
    down = bilstm.loss(m, batch)
    return (up - down) / (2 * h)


def gradient_check(model, batch, coords, h=1e-5):
    """Analytic and finite-difference gradients at ``coords``."""
    grads = bilstm.gradients(model, batch)
    analytic = np.array([grads[k][idx] for k, idx in coords])
    numeric = np.array([central_difference(model, batch, k, idx, h) for k, idx in coords])
    return analytic, numeric


def relative_errors(a, b):
    denom = np.maximum(np.abs(a), np.abs(b))
    out = np.zeros_like(a)
    nz = denom > 0
    out[nz] = np.abs(a - b)[nz] / denom[nz]
    return out
