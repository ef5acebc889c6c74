"""Proximal-gradient training of the sparse BiLSTM and random hyperparameter search.

One epoch is a full-batch gradient step on the smooth loss for every weight,
followed by the hierarchical proximal step on each input row ``k``: the pair
``beta_k`` together with the eight gate-input rows of ``k`` (four gates, two
directions). If the penalised objective goes up the step is retried with half the
step size.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import bilstm
from .bilstm import BiLstmModel, SequenceBatch
from .circular import decode, encode
from .data import Cohort, SplitCohort, feature_names, person_inputs
from .errors import BadSpec, Diverged
from .hierprox import prox_rows
from .parallel import pmap

logger = logging.getLogger(__name__)

DESCENT_SLACK = 1e-8
LAMBDA_MAX_GUARD = 1e-9


@dataclass
class TrainConfig:
    lam: float = 1e-2
    tau: float = 1.0
    lam_bar: float = 0.0
    step_size: float = 1e-2
    max_epochs: int = 1000
    patience: int = 100
    hidden_size: int = 8
    output_size: int = 4
    seed: int = 0
    zt_augmented: bool = True
    freeze_theta: bool = False
    max_halvings: int = 20

    def validate(self) -> None:
        if min(self.lam, self.tau, self.lam_bar) < 0:
            raise BadSpec("lam, tau and lam_bar must be >= 0")
        if not self.step_size > 0:
            raise BadSpec("step_size must be > 0")
        if self.max_epochs < 1 or self.patience < 1:
            raise BadSpec("max_epochs and patience must be >= 1")
        if self.patience > self.max_epochs:
            raise BadSpec("patience must not exceed max_epochs")
        if self.hidden_size < 1 or self.output_size < 1:
            raise BadSpec("hidden_size and output_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BadSpec(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SearchSpace:
    lam_range: tuple = (1e-4, 1.0)
    tau_range: tuple = (1e-2, 1e2)
    step_range: tuple = (1e-4, 1e-1)
    hidden_sizes: tuple = (8, 16, 32)
    output_sizes: tuple = (4, 8, 16)
    n_trials: int = 50
    max_epochs: int = 1000
    patience: int = 100
    lam_bar: float = 0.0
    zt_augmented: bool = True

    def validate(self) -> None:
        for name in ("lam_range", "tau_range", "step_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise BadSpec(f"{name} must satisfy 0 < low <= high")
        if not self.hidden_sizes or not self.output_sizes:
            raise BadSpec("hidden_sizes and output_sizes must be non-empty")
        if self.n_trials < 1:
            raise BadSpec("n_trials must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BadSpec(f"unknown SearchSpace field(s): {sorted(unknown)}")
        kw = dict(d)
        for key in ("lam_range", "tau_range", "step_range", "hidden_sizes", "output_sizes"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def sample(self, seed) -> list:
        """Draw ``n_trials`` configurations (log-uniform for lam, tau and step)."""
        self.validate()
        rng = np.random.default_rng(seed)

        def loguniform(lo, hi):
            return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

        out = []
        for _ in range(self.n_trials):
            out.append(
                TrainConfig(
                    lam=loguniform(*self.lam_range),
                    tau=loguniform(*self.tau_range),
                    lam_bar=self.lam_bar,
                    step_size=loguniform(*self.step_range),
                    max_epochs=self.max_epochs,
                    patience=min(self.patience, self.max_epochs),
                    hidden_size=int(rng.choice(self.hidden_sizes)),
                    output_size=int(rng.choice(self.output_sizes)),
                    seed=int(rng.integers(2**31 - 1)),
                    zt_augmented=self.zt_augmented,
                )
            )
        return out


@dataclass
class TrainedModel:
    model: BiLstmModel
    config: TrainConfig
    selected_features: list
    history: list = field(default_factory=list)
    best_epoch: int = 0
    val_loss: float = math.nan
    step_size: float = math.nan
    halvings: int = 0

    @property
    def n_selected(self) -> int:
        return len(self.selected_features)

    def predict_pairs(self, cohort: Cohort) -> list:
        xs = [person_inputs(p, self.config.zt_augmented) for p in cohort.people]
        return bilstm.predict_sequences(self.model, xs) if xs else []

    def predict_hours(self, cohort: Cohort) -> list:
        return [decode(pair, strict=False) for pair in self.predict_pairs(cohort)]


def labelled(cohort: Cohort) -> list:
    return [p for p in cohort.people if p.dlmo is not None]


def make_batch(cohort: Cohort, augmented: bool) -> SequenceBatch:
    people = labelled(cohort)
    if not people:
        raise BadSpec("cohort part has no people with known DLMO")
    xs = [person_inputs(p, augmented) for p in people]
    ys = [encode(p.ict) for p in people]
    return SequenceBatch.from_sequences(xs, ys)


def penalty(model: BiLstmModel, lam: float, lam_bar: float) -> float:
    norms = np.linalg.norm(model.params["beta"], axis=1)
    value = lam * norms.sum() if norms.any() else 0.0
    if lam_bar:
        l1 = np.abs(model.input_weight_rows()).sum()
        value += lam_bar * l1 if l1 else 0.0
    return float(value)


def proximal_step(model: BiLstmModel, grads: dict, step: float, config: TrainConfig) -> BiLstmModel:
    new = model.copy()
    for k, g in grads.items():
        if config.freeze_theta and k == "theta":
            continue
        new.params[k] = new.params[k] - step * g
    lam = step * config.lam if math.isfinite(config.lam) else math.inf
    b, W = prox_rows(new.params["beta"], new.input_weight_rows(), lam, config.tau, step * config.lam_bar)
    new.params["beta"] = b
    new.set_input_weight_rows(W)
    return new


def deselection_bound(model: BiLstmModel, grads: dict, tau: float, lam_bar: float = 0.0) -> np.ndarray:
    """Per-row penalty level above which a zero row stays zero after a proximal step.

    At ``beta_k = 0`` with zero input weights the step keeps the row at zero iff
    ``||grad beta_k|| + tau * sum_j (|grad W_kj| - lam_bar)_+ <= lam``.
    """
    tmp = BiLstmModel({k: grads[k] for k in model.params}, [])
    gw = np.abs(tmp.input_weight_rows())
    return np.linalg.norm(grads["beta"], axis=1) + tau * np.maximum(gw - lam_bar, 0.0).sum(axis=1)


def train(
    config: TrainConfig,
    split: SplitCohort,
    *,
    record_bound: bool = False,
    callback=None,
) -> TrainedModel:
    """Fit the sparse BiLSTM on ``split.train`` with early stopping on ``split.validation``.

    Returns the snapshot with the lowest validation loss. Raises :class:`Diverged`
    once the step size has been halved more than ``config.max_halvings`` times.
    """
    config.validate()
    tb = make_batch(split.train, config.zt_augmented)
    vb = make_batch(split.validation, config.zt_augmented)
    names = feature_names(split.train.gene_ids, config.zt_augmented)
    model = bilstm.init_model(tb.X.shape[2], config.hidden_size, config.output_size, config.seed, names)

    step = config.step_size
    halvings = 0
    f, grads = bilstm.loss_and_gradients(model, tb)
    obj = f + penalty(model, config.lam, config.lam_bar)
    best_val = bilstm.loss(model, vb)
    best, best_epoch, since = model.copy(), 0, 0
    history = []
    bound = 0.0
    if record_bound:
        bound = float(deselection_bound(model, grads, config.tau, config.lam_bar).max())

    for epoch in range(1, config.max_epochs + 1):
        while True:
            cand = proximal_step(model, grads, step, config)
            f_new, g_new = bilstm.loss_and_gradients(cand, tb)
            obj_new = f_new + penalty(cand, config.lam, config.lam_bar)
            if math.isfinite(obj_new) and obj_new <= obj + DESCENT_SLACK:
                break
            halvings += 1
            step *= 0.5
            if halvings > config.max_halvings:
                raise Diverged(
                    f"objective did not decrease after {config.max_halvings} step halvings "
                    f"(epoch {epoch}, step {step:.3g})"
                )
        model, grads, obj = cand, g_new, obj_new
        if record_bound:
            bound = max(bound, float(deselection_bound(model, grads, config.tau, config.lam_bar).max()))
        val = bilstm.loss(model, vb)
        entry = {
            "epoch": epoch,
            "train_loss": f_new,
            "objective": obj_new,
            "val_loss": val,
            "step": step,
            "violation": model.constraint_violation(config.tau),
            "n_selected": int(np.count_nonzero(np.linalg.norm(model.params["beta"], axis=1))),
        }
        history.append(entry)
        if callback is not None:
            callback(entry, model)
        if val < best_val:
            best_val, best, best_epoch, since = val, model.copy(), epoch, 0
        else:
            since += 1
            if since >= config.patience:
                break

    norms = np.linalg.norm(best.params["beta"], axis=1)
    result = TrainedModel(
        model=best,
        config=config,
        selected_features=np.flatnonzero(norms > 0).tolist(),
        history=history,
        best_epoch=best_epoch,
        val_loss=best_val,
        step_size=step,
        halvings=halvings,
    )
    if record_bound:
        result.deselection_bound = bound
    return result


def lambda_max(config: TrainConfig, split: SplitCohort) -> float:
    """Smallest penalty that keeps every input deselected for the whole run.

    Trains the input-free model (all rows forced to zero) and records, along its
    whole trajectory, the largest per-row :func:`deselection_bound`. For any
    ``lam`` at or above the returned value the real run follows exactly the same
    trajectory, so no input is ever selected. At the starting point ``theta = 0``
    and the bound reduces to ``max_k ||grad beta_k||``. The value is nudged up by
    a relative ``1e-9`` to absorb rounding.
    """
    null = TrainConfig(**{**config.to_dict(), "lam": math.inf})
    fit = train(null, split, record_bound=True)
    return fit.deselection_bound * (1.0 + LAMBDA_MAX_GUARD)


def validation_mse(fit: TrainedModel, cohort: Cohort) -> float:
    """Mean over samples of the squared error of the encoded-pair prediction."""
    batch = make_batch(cohort, fit.config.zt_augmented)
    return 2.0 * bilstm.loss(fit.model, batch)


def _run_trial(args):
    index, config, split = args
    t0 = time.perf_counter()
    report = {"trial": index, "config": config.to_dict()}
    try:
        fit = train(config, split)
    except Diverged as exc:
        report.update(val_mse=math.inf, error=str(exc))
        return report, None
    report.update(
        val_mse=validation_mse(fit, split.validation),
        n_selected=fit.n_selected,
        best_epoch=fit.best_epoch,
        epochs=len(fit.history),
        final_step=fit.step_size,
        error=None,
    )
    report["_seconds"] = time.perf_counter() - t0
    return report, fit


def random_search(space: SearchSpace, split: SplitCohort, seed, threads: int = 1):
    """Train every sampled configuration and keep the lowest validation MSE.

    Returns ``(best TrainedModel, trial reports)``; ties go to the earlier trial.
    """
    configs = space.sample(seed)
    results = pmap(_run_trial, [(i, c, split) for i, c in enumerate(configs)], threads)
    reports = [r for r, _ in results]
    best_i = None
    for i, (r, fit) in enumerate(results):
        if fit is None:
            continue
        if best_i is None or r["val_mse"] < reports[best_i]["val_mse"]:
            best_i = i
    for r in reports:
        r.pop("_seconds", None)
    if best_i is None:
        raise Diverged("every random-search trial diverged")
    return results[best_i][1], reports
