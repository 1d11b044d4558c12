"""Orthogonal-score estimation with full-sample or cross-fitted nuisances."""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from . import bregman as br
from .functional import TargetFunctional, m_apply, make_functional
from .outcome import (
    OutcomeFit,
    fit_outcome_ls,
    iterative_fit,
    residual_weights,
    tmle_fluctuate,
)
from .riesz import (
    RieszFit,
    RieszModel,
    balance_residual,
    check_pair,
    fit_riesz_bregman,
    fit_riesz_ls_closed_form,
    weight_diagnostics,
)
from .types import Dataset, DatasetError, parse_basis

Z95 = 1.959964


@dataclass(frozen=True)
class EstimatorConfig:
    """Everything needed to turn a dataset into an estimate.

    Basis tokens follow :func:`directdml.types.parse_basis`; ``None`` picks a
    default suited to the functional and model.
    """

    functional: str = "ate"
    riesz_model: str = "linear"
    loss: str = "ls"
    riesz_basis: Optional[str] = None
    ratio_link: str = "softplus"
    gamma_basis: Optional[str] = None
    weighted: bool = False
    tmle: bool = False
    iterations: int = 2
    crossfit: int = 5
    seed: int = 0
    ridge: float = 0.0
    tol: float = 1e-10
    max_iter: Optional[int] = None

    def __post_init__(self) -> None:
        if self.functional not in ("ate", "att", "ame", "covshift"):
            raise ValueError(f"unknown functional {self.functional!r}")
        gen = br.parse_generator(self.loss)
        # basis tokens do not depend on q; parse with q = 1 to validate early
        model = RieszModel(self.riesz_model, parse_basis(self.riesz_basis_token(), 1), self.ratio_link)
        parse_basis(self.gamma_basis_token(), 1)
        check_pair(model, gen, TargetFunctional(self.functional, 0.5 if self.functional == "att" else None))
        if self.weighted and self.functional == "covshift":
            raise ValueError("weighted representer fits need outcomes on every row; not available for covshift")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.crossfit < 0 or self.crossfit == 1:
            raise ValueError("crossfit must be 0 (full sample) or at least 2")
        if self.ridge < 0.0 or not self.tol > 0.0:
            raise ValueError("ridge must be non-negative and tol positive")

    @property
    def generator(self) -> br.ConvexGenerator:
        return br.parse_generator(self.loss)

    def riesz_basis_token(self) -> str:
        if self.riesz_basis:
            return self.riesz_basis
        if self.riesz_model in ("logit-inv", "ratio") or self.functional == "covshift":
            return "raw"
        if self.functional == "ame":
            return "poly:2:d"
        return "split:raw"

    def gamma_basis_token(self) -> str:
        if self.gamma_basis:
            return self.gamma_basis
        if self.functional == "ame":
            return "poly:2:d"
        if self.functional == "covshift":
            return "raw"
        return "split:raw"

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Estimate:
    theta_hat: float
    se: float
    ci95: tuple[float, float]
    scores: NDArray = field(repr=False)
    method: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    theta_plugin: float = float("nan")
    theta_tmle: Optional[float] = None
    theta_pre_tmle: Optional[float] = None

    def as_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat,
            "se": self.se,
            "ci95": list(self.ci95),
            "theta_plugin": self.theta_plugin,
            "theta_tmle": self.theta_tmle,
            "theta_pre_tmle": self.theta_pre_tmle,
            "method": self.method,
            "diagnostics": self.diagnostics,
        }


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------


def _score_parts(functional: TargetFunctional, gamma, alpha_rows: NDArray, dataset: Dataset):
    """Per-row ``m``-part and residual-part such that ``psi = m_part + r_part - c * theta``."""
    n = dataset.n
    alpha_rows = np.asarray(alpha_rows, dtype=float)
    if functional.kind == "covshift":
        tgt = dataset.target_mask
        src = dataset.source_mask
        nt, ns = int(tgt.sum()), int(src.sum())
        m_part = np.zeros(n)
        m_part[tgt] = (n / nt) * m_apply(functional, dataset, gamma)
        r_part = np.zeros(n)
        resid = dataset.y[src] - gamma.predict(dataset.d[src], dataset.z[src])
        r_part[src] = (n / ns) * alpha_rows[src] * resid
        c = np.where(tgt, n / nt, 0.0)
        return m_part, r_part, c
    m_part = m_apply(functional, dataset, gamma)
    r_part = alpha_rows * (dataset.y - gamma.predict(dataset.d, dataset.z))
    return m_part, r_part, np.ones(n)


def orthogonal_score(
    functional: TargetFunctional, gamma_hat, alpha_rows: NDArray, dataset: Dataset, theta: float
) -> NDArray:
    """``psi_i = m(W_i, gamma) + alpha(X_i) (Y_i - gamma(X_i)) - theta``.

    For covariate shift Target rows carry ``(n / n_T) (gamma(Z_i) - theta)`` and
    Source rows carry ``(n / n_S) alpha(Z_i) (Y_i - gamma(Z_i))``, so the mean
    of ``psi`` equals the two-sample estimating equation.
    """
    m_part, r_part, c = _score_parts(functional, gamma_hat, alpha_rows, dataset)
    return m_part + r_part - c * theta


def solve_score(functional: TargetFunctional, gamma_hat, alpha_rows: NDArray, dataset: Dataset) -> float:
    m_part, r_part, c = _score_parts(functional, gamma_hat, alpha_rows, dataset)
    return float(np.sum(m_part + r_part) / np.sum(c))


def standard_error(scores: NDArray, theta_hat: float = 0.0, n: Optional[int] = None) -> float:
    """``std(psi, ddof=1) / sqrt(n)``; the score is shift-invariant in ``theta_hat``."""
    scores = np.asarray(scores, dtype=float)
    n = scores.shape[0] if n is None else n
    if n < 2:
        raise ValueError("standard error needs at least two scores")
    return float(np.std(scores + theta_hat, ddof=1) / np.sqrt(n))


# ---------------------------------------------------------------------------
# Nuisance fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NuisanceFit:
    gamma: OutcomeFit
    riesz: RieszFit


def fit_nuisances(train: Dataset, config: EstimatorConfig, functional: TargetFunctional) -> NuisanceFit:
    """Fit ``(gamma_hat, alpha_hat)`` on ``train`` according to ``config``."""
    q = train.q
    gbasis = parse_basis(config.gamma_basis_token(), q)
    rbasis = parse_basis(config.riesz_basis_token(), q)
    gen = config.generator
    model = RieszModel(config.riesz_model, rbasis, config.ratio_link)
    solver = {"tol": config.tol, "max_iter": config.max_iter}
    if config.weighted and model.form == "logit-inv":
        gamma, riesz = iterative_fit(
            train, gbasis, model, gen, config.iterations, functional, config.ridge, **solver
        )
        return NuisanceFit(gamma, riesz)
    gamma = fit_outcome_ls(train, gbasis, config.ridge)
    if config.weighted:
        w = residual_weights(gamma, train)
        if w is None:
            warnings.warn("outcome residuals vanish; fitting the representer without weights",
                          RuntimeWarning, stacklevel=2)
        riesz = fit_riesz_bregman(train, functional, model, gen, w, config.ridge, **solver)
    elif model.form == "linear":
        riesz = fit_riesz_ls_closed_form(train, functional, rbasis, config.ridge)
    else:
        riesz = fit_riesz_bregman(train, functional, model, gen, None, config.ridge, **solver)
    return NuisanceFit(gamma, riesz)


def _fit_summary(nf: NuisanceFit, train: Dataset, functional: TargetFunctional) -> dict:
    rf = nf.riesz
    res = balance_residual(rf, train, functional, rf.model.basis)
    rep = rf.report
    return {
        "balance_residual_inf": float(np.max(np.abs(res))),
        "weights": weight_diagnostics(rf).as_dict(),
        "converged": True if rep is None else bool(rep.converged),
        "grad_norm": 0.0 if rep is None else rep.grad_norm,
        "iterations": 0 if rep is None else rep.iterations,
        "tmle_epsilon": nf.gamma.epsilon,
        "rounds": list(nf.gamma.log),
    }


def _method(config: EstimatorConfig, functional: TargetFunctional, folds: int) -> dict:
    m = {
        "functional": functional.kind,
        "riesz_model": config.riesz_model,
        "loss": config.generator.name,
        "riesz_basis": config.riesz_basis_token(),
        "gamma_basis": config.gamma_basis_token(),
        "weighted": config.weighted,
        "tmle": config.tmle,
        "folds": folds,
    }
    if config.riesz_model == "ratio":
        m["ratio_link"] = config.ratio_link
    if functional.kind == "att":
        m["p_treated"] = functional.p_treated
    if functional.kind == "covshift":
        m["score_fusion"] = "target rows scaled by n/n_T, source residual rows by n/n_S"
    return m


def _assemble(
    functional: TargetFunctional,
    dataset: Dataset,
    pieces: list[tuple[NDArray, OutcomeFit, OutcomeFit, NDArray]],
    method: dict,
    diagnostics: dict,
    tmle: bool,
) -> Estimate:
    """Pool per-fold score parts; each piece is (rows, gamma_pre, gamma_final, alpha_rows)."""
    n = dataset.n
    m_pre, r_pre = np.zeros(n), np.zeros(n)
    m_fin, r_fin = np.zeros(n), np.zeros(n)
    c_all = np.zeros(n)
    for rows, g_pre, g_fin, alpha in pieces:
        sub = dataset.subset(rows) if rows is not None else dataset
        idx = np.arange(n) if rows is None else rows
        mp, rp, c = _score_parts(functional, g_pre, alpha, sub)
        mf, rfin, _ = _score_parts(functional, g_fin, alpha, sub)
        # Fold-local parts are scaled by fold sizes; rescale to the pooled sample.
        scale = _pool_scale(functional, dataset, sub)
        m_pre[idx] += mp * scale[0]
        r_pre[idx] += rp * scale[1]
        m_fin[idx] += mf * scale[0]
        r_fin[idx] += rfin * scale[1]
        c_all[idx] += c * scale[0]
    denom = float(np.sum(c_all))
    theta = float(np.sum(m_fin + r_fin) / denom)
    theta_pre = float(np.sum(m_pre + r_pre) / denom)
    theta_plugin = float(np.sum(m_pre) / denom)
    theta_tmle = float(np.sum(m_fin) / denom) if tmle else None
    scores = m_fin + r_fin - c_all * theta
    se = standard_error(scores, 0.0, n)
    return Estimate(
        theta_hat=theta,
        se=se,
        ci95=(theta - Z95 * se, theta + Z95 * se),
        scores=scores,
        method=method,
        diagnostics=diagnostics,
        theta_plugin=theta_plugin,
        theta_tmle=theta_tmle,
        theta_pre_tmle=theta_pre if tmle else None,
    )


def _pool_scale(functional: TargetFunctional, full: Dataset, sub: Dataset) -> tuple[float, float]:
    """Convert fold-level ``n_fold / n_T,fold`` factors into pooled ``n / n_T`` factors."""
    if functional.kind != "covshift":
        return 1.0, 1.0
    n, nt, ns = full.n, int(full.target_mask.sum()), int(full.source_mask.sum())
    fn, ft, fs = sub.n, int(sub.target_mask.sum()), int(sub.source_mask.sum())
    sm = (n / nt) / (fn / ft) if ft else 0.0
    sr = (n / ns) / (fn / fs) if fs else 0.0
    return sm, sr


def _finalize_gamma(nf: NuisanceFit, evalset: Dataset, tmle: bool) -> tuple[OutcomeFit, NDArray]:
    alpha = nf.riesz.evaluate(evalset.d, evalset.z)
    if not tmle:
        return nf.gamma, alpha
    return tmle_fluctuate(nf.gamma, nf.riesz, evalset), alpha


def estimate_full_sample(dataset: Dataset, config: EstimatorConfig) -> Estimate:
    """Fit both nuisances on all rows and solve the orthogonal estimating equation."""
    functional = make_functional(config.functional, dataset)
    functional.validate(dataset)
    nf = fit_nuisances(dataset, config, functional)
    g_fin, alpha = _finalize_gamma(nf, dataset, config.tmle)
    diag = {"fits": [_fit_summary(nf, dataset, functional)]}
    if config.tmle:
        diag["fits"][0]["tmle_epsilon"] = g_fin.epsilon
    return _assemble(functional, dataset, [(None, nf.gamma, g_fin, alpha)], _method(config, functional, 1), diag, config.tmle)


# ---------------------------------------------------------------------------
# Cross-fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossFitPlan:
    """Fold index per row, ``0 .. K-1``."""

    K: int
    folds: NDArray
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        folds = np.asarray(self.folds, dtype=int).ravel()
        if self.K < 2:
            raise ValueError("cross-fitting needs K >= 2")
        if folds.size and (folds.min() < 0 or folds.max() >= self.K):
            raise ValueError("fold labels must lie in 0..K-1")
        counts = np.bincount(folds, minlength=self.K)
        if np.any(counts == 0):
            raise ValueError(f"fold {int(np.flatnonzero(counts == 0)[0])} is empty")
        folds.setflags(write=False)
        object.__setattr__(self, "folds", folds)

    def test_rows(self, k: int) -> NDArray:
        return np.flatnonzero(self.folds == k)

    def train_rows(self, k: int) -> NDArray:
        return np.flatnonzero(self.folds != k)


def make_plan(dataset: Dataset, K: int, seed: int) -> CrossFitPlan:
    """Stratified folds: rows are shuffled within each treatment arm (or role)
    and dealt round-robin so that every fold gets a share of each stratum."""
    if K < 2 or K > dataset.n:
        raise ValueError(f"K must be between 2 and n={dataset.n}, got {K}")
    rng = np.random.default_rng(seed)
    if dataset.has_roles:
        strata = dataset.target_mask.astype(int)
    elif dataset.is_binary:
        strata = dataset.d.astype(int)
    else:
        strata = np.zeros(dataset.n, dtype=int)
    order = np.concatenate([rng.permutation(np.flatnonzero(strata == s)) for s in np.unique(strata)])
    folds = np.empty(dataset.n, dtype=int)
    folds[order] = np.arange(dataset.n) % K
    return CrossFitPlan(K, folds, seed)


def _check_train(train: Dataset, functional: TargetFunctional, k: int) -> None:
    if functional.needs_binary and not train.is_binary:
        raise DatasetError(
            f"training complement of fold {k} lacks a treatment arm; use stratified folds or a smaller K"
        )
    if functional.kind == "covshift" and not (train.target_mask.any() and train.source_mask.any()):
        raise DatasetError(f"training complement of fold {k} lacks Source or Target rows")


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("DIRECTDML_JOBS", "1")))
    except ValueError:
        return 1


def estimate_crossfit(
    dataset: Dataset,
    config: EstimatorConfig,
    plan: Optional[CrossFitPlan] = None,
    jobs: int = 1,
) -> Estimate:
    """Fit nuisances on each fold's complement and pool the held-out scores.

    With TMLE on, each fold's outcome fit is fluctuated on that fold's
    held-out rows using the fold's own representer.
    """
    functional = make_functional(config.functional, dataset)
    functional.validate(dataset)
    if plan is None:
        plan = make_plan(dataset, config.crossfit or 5, config.seed)
    if plan.folds.shape[0] != dataset.n:
        raise ValueError("cross-fit plan does not match the dataset size")

    def fold(k: int):
        train = dataset.subset(plan.train_rows(k))
        test_idx = plan.test_rows(k)
        test = dataset.subset(test_idx)
        nf = fit_nuisances(train, config, functional)
        g_fin, alpha = _finalize_gamma(nf, test, config.tmle)
        summary = _fit_summary(nf, train, functional)
        if config.tmle:
            summary["tmle_epsilon"] = g_fin.epsilon
        return (test_idx, nf.gamma, g_fin, alpha), summary

    for k in range(plan.K):
        _check_train(dataset.subset(plan.train_rows(k)), functional, k)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(fold, range(plan.K)))
    else:
        results = [fold(k) for k in range(plan.K)]
    pieces = [r[0] for r in results]
    diag = {"fits": [r[1] for r in results]}
    return _assemble(functional, dataset, pieces, _method(config, functional, plan.K), diag, config.tmle)


def estimate(dataset: Dataset, config: EstimatorConfig, jobs: int = 1) -> Estimate:
    if config.crossfit >= 2:
        return estimate_crossfit(dataset, config, jobs=jobs)
    return estimate_full_sample(dataset, config)
