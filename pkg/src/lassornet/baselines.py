"""Linear comparison methods: group elastic net (all genes or a gene panel) and PLSR.

Both predict the encoded ICT pair from one sample at a time, optionally with the
encoded ZT pair appended to the inputs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .circular import decode
from .data import Cohort, SplitCohort, design, feature_names, targets
from .errors import DimensionMismatch, NonConvergence, RankDeficient

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# gene panels


def read_panel(path) -> list:
    """Newline-separated gene identifiers; blank lines and ``#`` comments are ignored."""
    genes = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            genes.append(line)
    return genes


def panel_columns(gene_ids: Sequence[str], panel: Sequence[str], augmented: bool) -> np.ndarray:
    """Design-matrix columns kept by a panel (the ZT columns always stay)."""
    index = {g: k for k, g in enumerate(gene_ids)}
    present = [g for g in panel if g in index]
    if len(present) < len(panel):
        logger.info("panel: %d of %d genes survive filtering", len(present), len(panel))
    if not present:
        raise DimensionMismatch("none of the panel genes are present in the cohort")
    cols = sorted(index[g] for g in present)
    if augmented:
        cols += [len(gene_ids), len(gene_ids) + 1]
    return np.asarray(cols, dtype=int)


# ---------------------------------------------------------------------------
# group elastic net


@dataclass
class ElasticNetModel:
    beta0: np.ndarray
    beta: np.ndarray
    lam: float
    alpha: float
    augmented: bool = False
    ridge: str = "printed"
    feature_names: list = field(default_factory=list)
    kkt_residual: float = 0.0
    n_iter: int = 0

    method = "elastic_net"

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(np.linalg.norm(self.beta, axis=1) > 0)

    @property
    def n_selected(self) -> int:
        return len(self.selected)

    def predict_pairs(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[1] != self.beta.shape[0]:
            raise DimensionMismatch(f"model expects {self.beta.shape[0]} inputs, got {X.shape[1]}")
        return self.beta0 + X @ self.beta

    def to_dict(self) -> dict:
        return {
            "beta0": self.beta0.tolist(),
            "beta": self.beta.tolist(),
            "lam": self.lam,
            "alpha": self.alpha,
            "augmented": self.augmented,
            "ridge": self.ridge,
            "feature_names": list(self.feature_names),
            "kkt_residual": self.kkt_residual,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ElasticNetModel":
        return cls(
            beta0=np.asarray(d["beta0"], float),
            beta=np.asarray(d["beta"], float).reshape(-1, 2),
            lam=d["lam"],
            alpha=d["alpha"],
            augmented=d["augmented"],
            ridge=d.get("ridge", "printed"),
            feature_names=list(d.get("feature_names", [])),
            kkt_residual=d.get("kkt_residual", 0.0),
            n_iter=d.get("n_iter", 0),
        )


def _ridge_grad(beta: np.ndarray, ridge: str) -> np.ndarray:
    # printed form: 1/2 sum_k (||beta_k||^2)^2  -> 2 ||beta_k||^2 beta_k
    # conventional: 1/2 sum_k ||beta_k||^2      -> beta_k
    if ridge == "printed":
        return 2.0 * np.sum(beta**2, axis=1, keepdims=True) * beta
    if ridge == "conventional":
        return beta
    raise ValueError(f"unknown ridge form {ridge!r}")


def _ridge_value(beta: np.ndarray, ridge: str) -> float:
    sq = np.sum(beta**2, axis=1)
    return float(0.5 * np.sum(sq**2) if ridge == "printed" else 0.5 * np.sum(sq))


def en_objective(X, Y, beta0, beta, lam, alpha, ridge="printed") -> float:
    r = Y - beta0 - X @ beta
    return float(
        0.5 * np.sum(r**2) / len(Y)
        + lam * (1 - alpha) * _ridge_value(beta, ridge)
        + lam * alpha * np.linalg.norm(beta, axis=1).sum()
    )


def smooth_gradient(X, Y, beta0, beta, lam, alpha, ridge="printed") -> np.ndarray:
    """Gradient in ``beta`` of the squared loss plus the ridge-type term."""
    r = Y - beta0 - X @ beta
    return -(X.T @ r) / len(Y) + lam * (1 - alpha) * _ridge_grad(beta, ridge)


def kkt_residual(X, Y, beta0, beta, lam, alpha, ridge="printed") -> float:
    """Largest violation of the group optimality conditions (intercept at its optimum)."""
    g = smooth_gradient(X, Y, beta0, beta, lam, alpha, ridge)
    norms = np.linalg.norm(beta, axis=1)
    active = norms > 0
    res = np.zeros(len(beta))
    if active.any():
        unit = beta[active] / norms[active, None]
        res[active] = np.linalg.norm(g[active] + lam * alpha * unit, axis=1)
    res[~active] = np.maximum(np.linalg.norm(g[~active], axis=1) - lam * alpha, 0.0)
    r = Y - beta0 - X @ beta
    return float(max(res.max(initial=0.0), np.abs(r.mean(axis=0)).max()))


def en_lambda_max(X, Y, alpha: float) -> float:
    """Smallest penalty at which ``beta = 0`` is optimal (``alpha > 0``)."""
    Yc = Y - Y.mean(axis=0)
    g = X.T @ Yc / len(Y)
    return float(np.linalg.norm(g, axis=1).max() / alpha) if alpha > 0 else math.inf


def solve_group_elastic_net(
    X: np.ndarray,
    Y: np.ndarray,
    lam: float,
    alpha: float,
    *,
    ridge: str = "printed",
    beta_init: Optional[np.ndarray] = None,
    tol: float = 1e-8,
    max_iter: int = 200_000,
):
    """Accelerated proximal gradient with backtracking and adaptive restart.

    The intercept is profiled out by centring. Returns ``(beta0, beta, kkt, n_iter)``;
    raises :class:`NonConvergence` if the KKT residual is still above ``tol``.
    """
    if lam < 0 or not 0 <= alpha <= 1:
        raise ValueError("need lam >= 0 and alpha in [0, 1]")
    n, d = X.shape
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    zero = np.zeros(2)

    beta = np.zeros((d, 2)) if beta_init is None else np.array(beta_init, dtype=float)
    if d == 0:
        return ym.copy(), beta, 0.0, 0
    lip = max(np.linalg.norm(Xc, 2) ** 2 / n, 1e-12)
    if ridge == "conventional":
        lip += lam * (1 - alpha)
    shrink = lam * alpha

    def f_smooth(b):
        r = Yc - Xc @ b
        return 0.5 * np.sum(r**2) / n + lam * (1 - alpha) * _ridge_value(b, ridge)

    def grad(b):
        return smooth_gradient(Xc, Yc, zero, b, lam, alpha, ridge)

    def prox(z, step):
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(norms > 0, np.maximum(1.0 - step * shrink / norms, 0.0), 0.0)
        return scale * z

    y, t = beta.copy(), 1.0
    kkt = math.inf
    for it in range(1, max_iter + 1):
        gy = grad(y)
        fy = f_smooth(y)
        while True:
            step = 1.0 / lip
            new = prox(y - step * gy, step)
            diff = new - y
            if f_smooth(new) <= fy + np.sum(gy * diff) + 0.5 * lip * np.sum(diff**2) + 1e-15 * abs(fy):
                break
            lip *= 2.0
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        # gradient-based restart keeps the iteration monotone in practice
        if np.sum((y - new) * (new - beta)) > 0:
            t_new, y = 1.0, new.copy()
        else:
            y = new + ((t - 1.0) / t_new) * (new - beta)
        beta, t = new, t_new
        if it % 10 == 0 or it == 1:
            kkt = kkt_residual(Xc, Yc, zero, beta, lam, alpha, ridge)
            if kkt <= tol:
                break
    else:
        raise NonConvergence(
            f"group elastic net did not converge in {max_iter} iterations (KKT residual {kkt:.3g})",
            kkt_residual=kkt,
        )
    beta0 = ym - xm @ beta
    return beta0, beta, kkt, it


def fit_elastic_net_xy(
    X, Y, lam, alpha, *, columns=None, ridge="printed", names=None, augmented=False, beta_init=None
) -> ElasticNetModel:
    """Fit on explicit arrays; rows outside ``columns`` are held at zero."""
    d = X.shape[1]
    cols = np.arange(d) if columns is None else np.asarray(columns, dtype=int)
    init = None if beta_init is None else beta_init[cols]
    beta0, sub, kkt, it = solve_group_elastic_net(X[:, cols], Y, lam, alpha, ridge=ridge, beta_init=init)
    beta = np.zeros((d, 2))
    beta[cols] = sub
    return ElasticNetModel(beta0, beta, lam, alpha, augmented, ridge, list(names or []), kkt, it)


def fit_elastic_net(
    split: SplitCohort,
    lam: float,
    alpha: float,
    panel: Optional[Sequence[str]] = None,
    augmented: bool = False,
    ridge: str = "printed",
) -> ElasticNetModel:
    """TimeSignature (``panel=None``) or TimeMachine (``panel`` given) fit on ``split.train``."""
    train = labelled_part(split.train)
    X, Y = design(train, augmented), targets(train)
    cols = None if panel is None else panel_columns(train.gene_ids, panel, augmented)
    names = feature_names(train.gene_ids, augmented)
    return fit_elastic_net_xy(X, Y, lam, alpha, columns=cols, ridge=ridge, names=names, augmented=augmented)


def intercept_model(split: SplitCohort, augmented: bool = False) -> ElasticNetModel:
    """Mean encoded target and no inputs: the reference every method should beat."""
    train = labelled_part(split.train)
    d = train.n_genes + (2 if augmented else 0)
    return ElasticNetModel(
        targets(train).mean(axis=0), np.zeros((d, 2)), math.inf, 1.0, augmented,
        feature_names=feature_names(train.gene_ids, augmented),
    )


def default_en_grid(X, Y, alphas=None, n_lambda: int = 50, decades: float = 4.0, columns=None) -> list:
    """``(lam, alpha)`` pairs: per alpha, 50 log-spaced values from its lambda_max down 4 decades."""
    alphas = [round(0.1 * i, 1) for i in range(1, 11)] if alphas is None else list(alphas)
    Xs = X if columns is None else X[:, columns]
    grid = []
    for a in alphas:
        top = en_lambda_max(Xs, Y, a)
        if not math.isfinite(top) or top <= 0:
            top = 1.0
        for lam in np.logspace(np.log10(top), np.log10(top) - decades, n_lambda):
            grid.append((float(lam), float(a)))
    return grid


def encoded_mse(pred: np.ndarray, Y: np.ndarray) -> float:
    return float(np.mean(np.sum((Y - pred) ** 2, axis=1)))


def hyper_search_en(
    split: SplitCohort,
    grid: Optional[Sequence] = None,
    panel: Optional[Sequence[str]] = None,
    augmented: bool = False,
    ridge: str = "printed",
):
    """Pick ``(lam, alpha)`` by validation MSE of the encoded pairs.

    Grid points sharing an alpha are fitted in decreasing-lambda order with warm
    starts. Returns ``(best model, per-point records)``; ties go to the earlier point.
    """
    train, val = labelled_part(split.train), labelled_part(split.validation)
    X, Y = design(train, augmented), targets(train)
    Xv, Yv = design(val, augmented), targets(val)
    cols = None if panel is None else panel_columns(train.gene_ids, panel, augmented)
    names = feature_names(train.gene_ids, augmented)
    if grid is None:
        grid = default_en_grid(X, Y, columns=cols)
    grid = list(grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")

    order = sorted(range(len(grid)), key=lambda i: (grid[i][1], -grid[i][0]))
    fits = [None] * len(grid)
    warm, warm_alpha = None, None
    for i in order:
        lam, alpha = grid[i]
        init = warm if warm_alpha == alpha else None
        try:
            fits[i] = fit_elastic_net_xy(
                X, Y, lam, alpha, columns=cols, ridge=ridge, names=names, augmented=augmented, beta_init=init
            )
            warm, warm_alpha = fits[i].beta, alpha
        except NonConvergence as exc:
            logger.warning("grid point lam=%g alpha=%g skipped: %s", lam, alpha, exc)
    records, best = [], None
    for i, (lam, alpha) in enumerate(grid):
        m = fits[i]
        mse = encoded_mse(m.predict_pairs(Xv), Yv) if m is not None else math.inf
        records.append({"lam": lam, "alpha": alpha, "val_mse": mse, "n_selected": None if m is None else m.n_selected})
        if m is not None and (best is None or mse < records[best]["val_mse"]):
            best = i
    if best is None:
        raise NonConvergence("no grid point converged")
    return fits[best], records


# ---------------------------------------------------------------------------
# PLSR


@dataclass
class PlsrModel:
    n_latent: int
    K: int
    selected: np.ndarray  # input columns used by the final model
    x_mean: np.ndarray
    y_mean: np.ndarray
    weights: np.ndarray  # (K, A) W
    loadings: np.ndarray  # (K, A) P
    y_loadings: np.ndarray  # (2, A) Q
    coef: np.ndarray  # (n_inputs_total, 2) regression coefficients on the full input vector
    augmented: bool = False
    feature_names: list = field(default_factory=list)

    method = "plsr"

    @property
    def n_selected(self) -> int:
        return len(self.selected)

    def predict_pairs(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[1] != self.coef.shape[0]:
            raise DimensionMismatch(f"model expects {self.coef.shape[0]} inputs, got {X.shape[1]}")
        return self.y_mean + (X - self.x_mean) @ self.coef

    def to_dict(self) -> dict:
        return {
            "n_latent": self.n_latent,
            "K": self.K,
            "selected": self.selected.tolist(),
            "x_mean": self.x_mean.tolist(),
            "y_mean": self.y_mean.tolist(),
            "weights": self.weights.tolist(),
            "loadings": self.loadings.tolist(),
            "y_loadings": self.y_loadings.tolist(),
            "coef": self.coef.tolist(),
            "augmented": self.augmented,
            "feature_names": list(self.feature_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlsrModel":
        a = d["n_latent"]
        return cls(
            n_latent=a,
            K=d["K"],
            selected=np.asarray(d["selected"], int),
            x_mean=np.asarray(d["x_mean"], float),
            y_mean=np.asarray(d["y_mean"], float),
            weights=np.asarray(d["weights"], float).reshape(-1, a),
            loadings=np.asarray(d["loadings"], float).reshape(-1, a),
            y_loadings=np.asarray(d["y_loadings"], float).reshape(-1, a),
            coef=np.asarray(d["coef"], float).reshape(-1, 2),
            augmented=d["augmented"],
            feature_names=list(d.get("feature_names", [])),
        )


def nipals(X: np.ndarray, Y: np.ndarray, n_latent: int, tol: float = 1e-14, max_iter: int = 10_000):
    """Two-block NIPALS on centred ``X`` (n, d) and ``Y`` (n, q) with deflation.

    Returns ``(W, P, Q, T)``: weights, X loadings, Y loadings and X scores.
    """
    X = np.array(X, dtype=float)
    Y = np.array(Y, dtype=float)
    n, d = X.shape
    W = np.zeros((d, n_latent))
    P = np.zeros((d, n_latent))
    Q = np.zeros((Y.shape[1], n_latent))
    T = np.zeros((n, n_latent))
    scale = max(np.abs(X).max(initial=0.0), 1e-300)
    for a in range(n_latent):
        u = Y[:, np.argmax(np.sum(Y**2, axis=0))].copy()
        t_old = None
        for _ in range(max_iter):
            w = X.T @ u
            nw = np.linalg.norm(w)
            if nw <= 1e-12 * scale:
                raise RankDeficient(f"component {a + 1}: X and Y have no remaining covariance")
            w /= nw
            t = X @ w
            tt = t @ t
            q = Y.T @ t / tt
            qq = q @ q
            if qq == 0.0:
                raise RankDeficient(f"component {a + 1}: Y has no remaining variance")
            u = Y @ q / qq
            if t_old is not None and np.linalg.norm(t - t_old) <= tol * max(np.linalg.norm(t), 1.0):
                break
            t_old = t
        if tt <= (1e-12 * scale) ** 2 * n:
            raise RankDeficient(f"component {a + 1} has a zero-variance score")
        p = X.T @ t / tt
        X -= np.outer(t, p)
        Y -= np.outer(t, q)
        W[:, a], P[:, a], Q[:, a], T[:, a] = w, p, q, t
    return W, P, Q, T


def _pls_fit(X, Y, n_latent):
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    W, P, Q, T = nipals(X - xm, Y - ym, n_latent)
    coef = W @ np.linalg.solve(P.T @ W, Q.T)
    return xm, ym, W, P, Q, coef


def fit_plsr_xy(X, Y, n_latent: int, K: int, *, names=None, augmented=False) -> PlsrModel:
    """PLSR on all inputs, then refit on the ``K`` inputs with the largest weight-row norms."""
    n, d = X.shape
    if not 1 <= n_latent <= min(d, n):
        raise ValueError(f"n_latent must lie in [1, min(D={d}, n={n})]")
    if not 1 <= K <= d:
        raise ValueError(f"K must lie in [1, {d}]")
    _, _, W, _, _, _ = _pls_fit(X, Y, n_latent)
    if K < d:
        score = np.linalg.norm(W, axis=1)
        keep = np.sort(np.argsort(-score, kind="stable")[:K])
    else:
        keep = np.arange(d)
    a = min(n_latent, len(keep))
    xm, ym, W, P, Q, sub_coef = _pls_fit(X[:, keep], Y, a)
    coef = np.zeros((d, 2))
    coef[keep] = sub_coef
    x_mean = np.zeros(d)
    x_mean[keep] = xm
    return PlsrModel(a, K, keep, x_mean, ym, W, P, Q, coef, augmented, list(names or []))


def fit_plsr(split: SplitCohort, n_latent: int, K: int, augmented: bool = False) -> PlsrModel:
    train = labelled_part(split.train)
    X, Y = design(train, augmented), targets(train)
    return fit_plsr_xy(X, Y, n_latent, K, names=feature_names(train.gene_ids, augmented), augmented=augmented)


def default_plsr_grid(d: int, n: int) -> list:
    """Latent sizes 5..40 step 5 and K from 100 to 5000, clipped to what the data allows."""
    latents = sorted({min(a, d, n) for a in range(5, 45, 5)})
    ks = sorted({min(k, d) for k in (100, 250, 500, 1000, 2500, 5000)})
    return [(a, k) for a in latents for k in ks]


def hyper_search_plsr(split: SplitCohort, grid=None, augmented: bool = False):
    train, val = labelled_part(split.train), labelled_part(split.validation)
    X, Y = design(train, augmented), targets(train)
    Xv, Yv = design(val, augmented), targets(val)
    names = feature_names(train.gene_ids, augmented)
    grid = default_plsr_grid(X.shape[1], X.shape[0]) if grid is None else list(grid)
    records, best, best_mse = [], None, math.inf
    for a, k in grid:
        try:
            m = fit_plsr_xy(X, Y, a, k, names=names, augmented=augmented)
        except (RankDeficient, ValueError) as exc:
            records.append({"n_latent": a, "K": k, "val_mse": math.inf, "error": str(exc)})
            continue
        mse = encoded_mse(m.predict_pairs(Xv), Yv)
        records.append({"n_latent": a, "K": k, "val_mse": mse})
        if mse < best_mse:
            best, best_mse = m, mse
    if best is None:
        raise RankDeficient("no PLSR grid point could be fitted")
    return best, records


# ---------------------------------------------------------------------------
# prediction


def predict(model, samples) -> tuple:
    """Predicted ICT in hours for each row of ``samples``, plus a mask of flagged rows.

    ``samples`` is either a design matrix or a :class:`Cohort` (built with the
    model's augmentation setting). Rows whose predicted pair is exactly (0, 0) get
    NaN and are flagged.
    """
    X = design(samples, model.augmented) if isinstance(samples, Cohort) else samples
    pairs = model.predict_pairs(X)
    hours = decode(pairs, strict=False)
    hours = np.atleast_1d(hours)
    return hours, np.isnan(hours)


def labelled_part(cohort: Cohort) -> Cohort:
    people = [p for p in cohort.people if p.dlmo is not None]
    if len(people) == len(cohort.people):
        return cohort
    return cohort.subset([i for i, p in enumerate(cohort.people) if p.dlmo is not None])
