"""End-to-end protocol: split, select hyperparameters on validation, score on test.

Every method is fitted on the training people, tuned on the validation people and
scored on the test people. DLMO estimators (anchor ZT and, for LassoRNet, the
three-sample weights) are also fitted on validation people only.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .baselines import (
    ElasticNetModel,
    PlsrModel,
    en_lambda_max,
    hyper_search_en,
    hyper_search_plsr,
    intercept_model,
    labelled_part,
    panel_columns,
)
from .bilstm import BiLstmModel
from .circular import auc, circ_error, decode, mae
from .data import Cohort, GeneStats, SplitCohort, design, prepare_split, targets
from .dlmo import PersonPredictions, dlmo_metrics, estimate_dlmo
from .errors import BadSpec, LassoRNetError
from .trainer import SearchSpace, TrainConfig, TrainedModel, lambda_max, random_search, train

logger = logging.getLogger(__name__)

METHODS = ("lassornet", "timesignature", "timemachine", "plsr", "intercept")
DEFAULT_VARIANT = {"lassornet": "augmented"}
DEFAULT_DLMO_RULE = {"lassornet": "weighted"}
MODEL_FORMAT = "lassornet-model/1"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_digest(config) -> str:
    """SHA-256 of the canonical JSON form of a configuration."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class MethodSpec:
    name: str
    augmented: bool

    @property
    def variant(self) -> str:
        return "augmented" if self.augmented else "plain"

    @property
    def tag(self) -> str:
        return f"{self.name}/{self.variant}"

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        """``"name"`` or ``"name/plain"`` or ``"name/augmented"``."""
        name, _, variant = text.strip().lower().partition("/")
        if name not in METHODS:
            raise BadSpec(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
        variant = variant or DEFAULT_VARIANT.get(name, "plain")
        if variant not in ("plain", "augmented"):
            raise BadSpec(f"unknown variant {variant!r} for {name}")
        if name == "intercept" and variant == "augmented":
            raise BadSpec("the intercept-only model has no augmented variant")
        return cls(name, variant == "augmented")


@dataclass
class ProtocolOptions:
    """Knobs of the protocol; every field enters the config digest."""

    search: SearchSpace = field(default_factory=SearchSpace)
    en_alphas: Optional[list] = None
    en_n_lambda: int = 50
    en_decades: float = 4.0
    ridge: str = "printed"
    plsr_latents: Optional[list] = None
    plsr_ks: Optional[list] = None
    panel: Optional[list] = None
    normalization: str = "train"
    dlmo_intercept: bool = False
    deselect: bool = False  # force lambda to its computed lambda_max (sparsity endpoint)
    timing: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolOptions":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise BadSpec(f"unknown protocol option(s): {sorted(unknown)}")
        if "search" in d:
            d["search"] = SearchSpace.from_dict(d["search"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["search"] = self.search.to_dict()
        return d


@dataclass
class FitReport:
    method: str
    variant: str
    seed: int
    hyperparameters: dict = field(default_factory=dict)
    mae_ict: dict = field(default_factory=dict)  # split -> value
    auc_ict: dict = field(default_factory=dict)
    mae_dlmo: Optional[float] = None
    auc_dlmo: Optional[float] = None
    test_errors: list = field(default_factory=list)
    dlmo_errors: list = field(default_factory=list)
    n_flagged: int = 0
    n_selected: Optional[int] = None
    deselected_all: bool = False
    dlmo_rule: Optional[str] = None
    config_digest: str = ""
    version: str = __version__
    wall_time: Optional[float] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        return cls(**d)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


# ---------------------------------------------------------------------------
# fitted methods behind one interface


@dataclass
class FittedMethod:
    spec: MethodSpec
    model: object  # ElasticNetModel, PlsrModel or TrainedModel
    hyperparameters: dict
    n_selected: int

    def predict_people(self, cohort: Cohort) -> list:
        """Predicted ICT hours for each person (NaN where the pair is (0, 0))."""
        if isinstance(self.model, TrainedModel):
            return [np.atleast_1d(h) for h in self.model.predict_hours(cohort)]
        X = design(cohort, self.spec.augmented)
        hours = np.atleast_1d(decode(self.model.predict_pairs(X), strict=False))
        cuts = np.cumsum([p.n_samples for p in cohort.people])[:-1]
        return np.split(hours, cuts)

    def parameters(self) -> dict:
        if isinstance(self.model, TrainedModel):
            return {k: v.copy() for k, v in self.model.model.params.items()}
        if isinstance(self.model, ElasticNetModel):
            return {"beta0": self.model.beta0.copy(), "beta": self.model.beta.copy()}
        return {"coef": self.model.coef.copy(), "x_mean": self.model.x_mean.copy(), "y_mean": self.model.y_mean.copy()}


def _en_grid(split: SplitCohort, spec: MethodSpec, opts: ProtocolOptions, panel):
    from .baselines import default_en_grid

    train_part = labelled_part(split.train)
    X, Y = design(train_part, spec.augmented), targets(train_part)
    cols = None if panel is None else panel_columns(train_part.gene_ids, panel, spec.augmented)
    if opts.deselect:
        Xs = X if cols is None else X[:, cols]
        return [(en_lambda_max(Xs, Y, 1.0) * (1.0 + 1e-9), 1.0)]
    return default_en_grid(X, Y, opts.en_alphas, opts.en_n_lambda, opts.en_decades, columns=cols)


def fit_method(spec: MethodSpec, split: SplitCohort, opts: ProtocolOptions, seed: int, threads: int = 1) -> FittedMethod:
    """Hyperparameter selection on validation for one method; the winner is used as trained."""
    if spec.name == "intercept":
        m = intercept_model(split)
        return FittedMethod(spec, m, {}, 0)

    if spec.name in ("timesignature", "timemachine"):
        panel = None
        if spec.name == "timemachine":
            if not opts.panel:
                raise BadSpec("timemachine needs a gene panel (option 'panel')")
            panel = opts.panel
        grid = _en_grid(split, spec, opts, panel)
        m, records = hyper_search_en(split, grid, panel, spec.augmented, opts.ridge)
        hp = {"lam": m.lam, "alpha": m.alpha, "ridge": m.ridge, "grid_size": len(records)}
        if panel is not None:
            hp["panel_size"] = len(panel)
        return FittedMethod(spec, m, hp, m.n_selected)

    if spec.name == "plsr":
        if opts.deselect:
            raise BadSpec("PLSR has no sparsity penalty, so it has no lambda_max endpoint")
        train_part = labelled_part(split.train)
        d = train_part.n_genes + (2 if spec.augmented else 0)
        n = train_part.n_samples
        latents = opts.plsr_latents or list(range(5, 45, 5))
        ks = opts.plsr_ks or [100, 250, 500, 1000, 2500, 5000]
        grid = sorted({(min(a, d, n), min(k, d)) for a in latents for k in ks})
        m, records = hyper_search_plsr(split, grid, spec.augmented)
        return FittedMethod(spec, m, {"n_latent": m.n_latent, "K": m.K, "grid_size": len(records)}, m.n_selected)

    if spec.name == "lassornet":
        space = SearchSpace.from_dict({**opts.search.to_dict(), "zt_augmented": spec.augmented})
        if opts.deselect:
            config = space.sample(seed)[0]
            config.lam = lambda_max(config, split)
            fit = train(config, split)
            hp = {**config.to_dict(), "trials": 1}
        else:
            fit, reports = random_search(space, split, seed, threads)
            hp = {**fit.config.to_dict(), "trials": len(reports)}
        return FittedMethod(spec, fit, hp, fit.n_selected)

    raise BadSpec(f"unknown method {spec.name!r}")


def person_predictions(cohort: Cohort, hours: Sequence[np.ndarray]) -> list:
    out = []
    for p, h in zip(cohort.people, hours):
        ict = p.ict if p.dlmo is not None else None
        out.append(PersonPredictions(p.person_id, p.zt, h, ict, p.dlmo))
    return out


def _ict_errors(preds: Sequence[PersonPredictions]):
    e = np.concatenate([circ_error(p.ict, p.pred_ict) for p in preds if p.ict is not None] or [np.empty(0)])
    flagged = np.isnan(e)
    return e[~flagged], int(flagged.sum())


def score(fitted: FittedMethod, split: SplitCohort, opts: ProtocolOptions, report: FitReport) -> dict:
    """Fill the ICT and DLMO metrics of ``report``; returns the fitted DLMO state."""
    per_split = {}
    for name, part in split.parts().items():
        preds = person_predictions(part, fitted.predict_people(part))
        per_split[name] = preds
        e, flagged = _ict_errors(preds)
        if e.size:
            report.mae_ict[name] = mae(e)
            report.auc_ict[name] = auc(e)
        if name == "test":
            report.test_errors = e.tolist()
            report.n_flagged = flagged

    rule = DEFAULT_DLMO_RULE.get(fitted.spec.name, "single")
    report.dlmo_rule = rule
    val = [p for p in per_split["validation"] if p.dlmo is not None and not np.isnan(p.pred_ict).any()]
    test = [p for p in per_split["test"] if p.dlmo is not None and not np.isnan(p.pred_ict).any()]
    dl_pred, state = estimate_dlmo(val, test, rule, opts.dlmo_intercept)
    truth = np.array([p.dlmo for p in test])
    report.dlmo_errors = circ_error(truth, dl_pred).tolist() if len(test) else []
    if len(test):
        report.mae_dlmo, report.auc_dlmo = dlmo_metrics(truth, dl_pred)
    return state


def run_method(spec: MethodSpec, split: SplitCohort, opts: ProtocolOptions, seed: int, digest: str, threads: int = 1):
    """Fit and score one method; module errors end up in ``report.error``.

    Returns ``(report, fitted method or None, DLMO state or None)``.
    """
    t0 = time.perf_counter()
    report = FitReport(method=spec.name, variant=spec.variant, seed=seed, config_digest=digest)
    fitted, state = None, None
    try:
        fitted = fit_method(spec, split, opts, seed, threads)
        report.hyperparameters = fitted.hyperparameters
        report.n_selected = fitted.n_selected
        report.deselected_all = fitted.n_selected == 0
        state = score(fitted, split, opts, report)
    except LassoRNetError as exc:
        logger.warning("%s failed: %s", spec.tag, exc)
        report.error = f"{type(exc).__name__}: {exc}"
    if opts.timing:
        report.wall_time = time.perf_counter() - t0
    return report, fitted, state


def run_protocol(
    cohort: Cohort,
    methods: Sequence,
    seed: int,
    options: Optional[ProtocolOptions] = None,
    threads: int = 1,
    *,
    return_models: bool = False,
):
    """One person-level split, then every method in order.

    ``methods`` holds :class:`MethodSpec` objects or strings accepted by
    :meth:`MethodSpec.parse`. Returns the list of reports (and, with
    ``return_models``, the fitted methods and DLMO states alongside).
    """
    opts = options or ProtocolOptions()
    specs = [m if isinstance(m, MethodSpec) else MethodSpec.parse(m) for m in methods]
    digest = config_digest({"methods": [s.tag for s in specs], "options": opts.to_dict()})
    split = prepare_split(cohort, seed, opts.normalization)
    results = [run_method(s, split, opts, seed, digest, threads) for s in specs]
    reports = [r for r, _, _ in results]
    if return_models:
        return reports, split, [(f, st) for _, f, st in results]
    return reports


# ---------------------------------------------------------------------------
# report files


def write_reports(reports: Sequence[FitReport], stream) -> None:
    for r in reports:
        stream.write(r.to_json() + "\n")


def read_reports(stream) -> list:
    out = []
    for line in stream:
        line = line.strip()
        if line:
            d = json.loads(line)
            if "method" in d and "variant" in d:
                out.append(FitReport.from_dict(d))
    return out


def _fmt(values, digits=2) -> str:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return "n/a"
    if len(vals) == 1:
        return f"{vals[0]:.{digits}f}"
    return f"{np.mean(vals):.{digits}f} ± {np.std(vals, ddof=1):.{digits}f}"


def render_table(reports: Sequence[FitReport]) -> str:
    """Text table of test metrics; several seeds per method collapse to mean ± sd.

    A ``‡`` marks rows where no input variable was selected.
    """
    groups: dict = {}
    for r in reports:
        groups.setdefault((r.method, r.variant), []).append(r)
    header = ("Method", "Variant", "Seeds", "MAE_ICT (h)", "AUC_ICT", "MAE_DLMO (h)", "AUC_DLMO", "Selected")
    rows = [header]
    for (method, variant), rs in groups.items():
        ok = [r for r in rs if r.error is None]
        name = method + (" ‡" if ok and all(r.deselected_all for r in ok) else "")
        if not ok:
            rows.append((name, variant, str(len(rs)), "error", "", "", "", ""))
            continue
        rows.append(
            (
                name,
                variant,
                str(len(ok)),
                _fmt([r.mae_ict.get("test") for r in ok]),
                _fmt([r.auc_ict.get("test") for r in ok], 3),
                _fmt([r.mae_dlmo for r in ok]),
                _fmt([r.auc_dlmo for r in ok], 3),
                _fmt([r.n_selected for r in ok], 1),
            )
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    if any(r.error for r in reports):
        lines.append("")
        for r in reports:
            if r.error:
                lines.append(f"{r.method}/{r.variant} seed {r.seed}: {r.error}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# model files


def model_document(
    fitted: FittedMethod,
    gene_ids: Sequence[str],
    stats: Optional[GeneStats],
    dlmo_state: Optional[dict],
    seed: int,
    digest: str,
) -> dict:
    """JSON-ready description of a fitted method, sufficient for ``predict``."""
    m = fitted.model
    if isinstance(m, TrainedModel):
        body = m.model.to_dict()
    else:
        body = m.to_dict()
    return {
        "format": MODEL_FORMAT,
        "method": fitted.spec.name,
        "variant": fitted.spec.variant,
        "gene_ids": list(gene_ids),
        "normalization": None if stats is None else stats.to_dict(),
        "hyperparameters": fitted.hyperparameters,
        "n_selected": fitted.n_selected,
        "model": body,
        "dlmo": dlmo_state,
        "seed": seed,
        "config_digest": digest,
        "version": __version__,
    }


def load_model_document(doc: dict) -> FittedMethod:
    if doc.get("format") != MODEL_FORMAT:
        raise BadSpec(f"not a model file (format {doc.get('format')!r})")
    spec = MethodSpec.parse(f"{doc['method']}/{doc['variant']}")
    body = doc["model"]
    if spec.name == "lassornet":
        config = TrainConfig.from_dict(
            {k: v for k, v in doc["hyperparameters"].items() if k in TrainConfig.__dataclass_fields__}
        )
        net = BiLstmModel.from_dict(body)
        norms = np.linalg.norm(net.params["beta"], axis=1)
        model = TrainedModel(net, config, np.flatnonzero(norms > 0).tolist())
    elif spec.name == "plsr":
        model = PlsrModel.from_dict(body)
    else:
        model = ElasticNetModel.from_dict(body)
    return FittedMethod(spec, model, doc.get("hyperparameters", {}), doc.get("n_selected", 0))
