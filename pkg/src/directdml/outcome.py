"""Outcome regression: least squares, propensity-weighted LS, TMLE fluctuation
and the alternating weighted algorithm."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from numpy.typing import NDArray

from . import bregman as br
from .bregman import ConvexGenerator
from .functional import TargetFunctional, m_apply
from .optimize import solve_normal
from .riesz import RieszFit, RieszModel, fit_riesz_bregman
from .types import BasisSpec, Dataset, FittedFunction, design

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-12
PROPENSITY_GUARD = 1e-12


@dataclass(frozen=True, eq=False)
class OutcomeFit:
    """Linear-in-basis regression ``gamma_hat`` with optional fluctuations.

    ``predict`` returns ``base(d, z) + sum_k eps_k * alpha_k(d, z)`` where the
    ``alpha_k`` are the Riesz fits used by successive TMLE updates.
    """

    base: FittedFunction
    dataset: Dataset = field(repr=False)
    weights: Optional[NDArray] = None
    fluctuations: tuple[tuple[float, RieszFit], ...] = ()
    log: tuple[dict, ...] = ()

    @property
    def gamma_hat(self) -> "OutcomeFit":
        return self

    @property
    def basis(self) -> BasisSpec:
        return self.base.basis

    @property
    def beta(self) -> NDArray:
        return self.base.beta

    @property
    def epsilon(self) -> Optional[float]:
        return self.fluctuations[-1][0] if self.fluctuations else None

    def predict(self, d, Z) -> NDArray:
        out = self.base.predict(d, Z)
        for eps, rf in self.fluctuations:
            out = out + eps * rf.evaluate(d, Z)
        return out

    def predict_dderiv(self, d, Z) -> NDArray:
        out = self.base.predict_dderiv(d, Z)
        for eps, rf in self.fluctuations:
            out = out + eps * rf.predict_dderiv(d, Z)
        return out

    def residuals(self, dataset: Optional[Dataset] = None) -> NDArray:
        ds = self.dataset if dataset is None else dataset
        return ds.y - self.predict(ds.d, ds.z)


def _fit_rows(dataset: Dataset) -> NDArray:
    """Rows with an observed outcome."""
    return dataset.labeled_mask


def _weighted_ls(Phi: NDArray, y: NDArray, w: NDArray, ridge: float = 0.0) -> NDArray:
    Pw = Phi * w[:, None]
    n = Phi.shape[0]
    return solve_normal(Pw.T @ Phi / n, Pw.T @ y / n, ridge)


def fit_outcome_ls(dataset: Dataset, basis: BasisSpec, ridge: float = 0.0) -> OutcomeFit:
    """Ordinary least squares over rows with observed outcomes."""
    rows = _fit_rows(dataset)
    Phi = design(basis, dataset.d[rows], dataset.z[rows])
    beta = _weighted_ls(Phi, dataset.y[rows], np.ones(Phi.shape[0]), ridge)
    return OutcomeFit(FittedFunction(beta, basis), dataset)


def propensity_weights(d: NDArray, pi: NDArray) -> NDArray:
    """``(1 - pi) / pi^2`` on treated rows and ``pi / (1 - pi)^2`` on control rows."""
    d = np.asarray(d, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if np.any(~np.isfinite(pi)) or np.any(pi <= PROPENSITY_GUARD) or np.any(pi >= 1.0 - PROPENSITY_GUARD):
        raise ValueError("propensity within 1e-12 of 0 or 1 gives an infinite regression weight")
    return np.where(d == 1.0, (1.0 - pi) / pi**2, pi / (1.0 - pi) ** 2)


def _propensity_rows(dataset: Dataset, pi_hat) -> NDArray:
    if isinstance(pi_hat, (RieszFit, FittedFunction)):
        return pi_hat.propensity(dataset.z)
    if callable(pi_hat):
        return np.asarray(pi_hat(dataset.z), dtype=float)
    pi = np.broadcast_to(np.asarray(pi_hat, dtype=float), (dataset.n,))
    return pi


def fit_outcome_weighted(
    dataset: Dataset,
    basis: BasisSpec,
    pi_hat: Union[RieszFit, FittedFunction, NDArray, float],
    ridge: float = 0.0,
) -> OutcomeFit:
    """Weighted least squares with the variance-targeting propensity weights.

    ``pi_hat`` may be a fitted logit-inv representer, a fitted function with
    the inverse-propensity link, a callable of ``Z`` or per-row values.
    """
    if not dataset.is_binary:
        raise ValueError("propensity-weighted regression needs a binary treatment")
    pi = _propensity_rows(dataset, pi_hat)
    w = propensity_weights(dataset.d, pi)
    Phi = design(basis, dataset.d, dataset.z)
    beta = _weighted_ls(Phi, dataset.y, w, ridge)
    return OutcomeFit(FittedFunction(beta, basis), dataset, w)


def fit_outcome_weighted_rows(
    dataset: Dataset, basis: BasisSpec, weights: NDArray, ridge: float = 0.0
) -> OutcomeFit:
    """Least squares with explicit non-negative per-row weights."""
    rows = _fit_rows(dataset)
    w = np.asarray(weights, dtype=float)
    Phi = design(basis, dataset.d[rows], dataset.z[rows])
    beta = _weighted_ls(Phi, dataset.y[rows], w[rows], ridge)
    return OutcomeFit(FittedFunction(beta, basis), dataset, w)


def _score_rows(fit: OutcomeFit, riesz: RieszFit, dataset: Dataset) -> NDArray:
    rows = dataset.labeled_mask
    if riesz.functional.kind == "covshift":
        rows = rows & dataset.source_mask
    return rows


def tmle_fluctuate(fit0: OutcomeFit, riesz: RieszFit, dataset: Optional[Dataset] = None) -> OutcomeFit:
    """One-step update ``gamma + eps * alpha_hat`` solving the weighted score equation.

    ``eps = sum alpha (Y - gamma) / sum alpha^2`` over labeled rows of
    ``dataset`` (Source rows for covariate shift).

    Raises
    ------
    ValueError
        If ``alpha_hat`` vanishes on every scored row.
    """
    ds = fit0.dataset if dataset is None else dataset
    rows = _score_rows(fit0, riesz, ds)
    alpha = riesz.evaluate(ds.d[rows], ds.z[rows])
    resid = ds.y[rows] - fit0.predict(ds.d[rows], ds.z[rows])
    denom = float(alpha @ alpha)
    if not denom > 0.0:
        raise ValueError("fitted representer is identically zero: fluctuation direction is degenerate")
    eps = float(alpha @ resid) / denom
    return OutcomeFit(fit0.base, ds, fit0.weights, fit0.fluctuations + ((eps, riesz),), fit0.log)


def tmle_score_residual(fit: OutcomeFit, riesz: RieszFit, dataset: Optional[Dataset] = None) -> tuple[float, float]:
    """``sum alpha (Y - gamma)`` and the matching absolute scale ``sum |alpha (Y - gamma)|``."""
    ds = fit.dataset if dataset is None else dataset
    rows = _score_rows(fit, riesz, ds)
    alpha = riesz.evaluate(ds.d[rows], ds.z[rows])
    resid = ds.y[rows] - fit.predict(ds.d[rows], ds.z[rows])
    return float(alpha @ resid), float(np.abs(alpha * resid).sum())


# ---------------------------------------------------------------------------
# Alternating weighted algorithm
# ---------------------------------------------------------------------------


def residual_weights(fit: OutcomeFit, dataset: Dataset) -> Optional[NDArray]:
    """Squared residuals floored at 1e-12, or None when every residual is negligible."""
    r2 = fit.residuals(dataset) ** 2
    r2 = np.where(np.isnan(r2), 0.0, r2)
    if not np.max(r2, initial=0.0) > WEIGHT_FLOOR:
        return None
    return np.maximum(r2, WEIGHT_FLOOR)


def _weighted_riesz(
    dataset: Dataset,
    functional: TargetFunctional,
    model: RieszModel,
    gen: ConvexGenerator,
    gamma: OutcomeFit,
    **solver,
) -> RieszFit:
    w = residual_weights(gamma, dataset)
    if w is None:
        warnings.warn(
            "outcome residuals vanish; fitting the representer without weights",
            RuntimeWarning,
            stacklevel=3,
        )
    return fit_riesz_bregman(dataset, functional, model, gen, weights=w, **solver)


def _score_variance(functional: TargetFunctional, dataset: Dataset, gamma: OutcomeFit, riesz: RieszFit) -> float:
    h = m_apply(functional, dataset, gamma) + riesz.alpha_on(dataset) * gamma.residuals(dataset)
    return float(np.var(h, ddof=1))


def two_step_fit(
    dataset: Dataset,
    basis_gamma: BasisSpec,
    model: RieszModel,
    gen: ConvexGenerator = br.LS,
    functional: Optional[TargetFunctional] = None,
    ridge: float = 0.0,
    **solver,
) -> tuple[OutcomeFit, RieszFit]:
    """LS outcome fit followed by a representer fit weighted by its squared residuals."""
    functional = functional or TargetFunctional("ate")
    gamma0 = fit_outcome_ls(dataset, basis_gamma, ridge)
    riesz = _weighted_riesz(dataset, functional, model, gen, gamma0, ridge=ridge, **solver)
    return gamma0, riesz


def iterative_fit(
    dataset: Dataset,
    basis_gamma: BasisSpec,
    model: RieszModel,
    gen: ConvexGenerator = br.LS,
    T: int = 2,
    functional: Optional[TargetFunctional] = None,
    ridge: float = 0.0,
    **solver,
) -> tuple[OutcomeFit, RieszFit]:
    """Alternate residual-weighted propensity fits and propensity-weighted outcome fits.

    Round ``t`` fits the representer with weights ``(Y - gamma^(t-1))^2`` and
    then refits ``gamma^(t)`` with the weights of :func:`propensity_weights`.
    Per-round risk values and score variances are stored in ``OutcomeFit.log``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if model.form != "logit-inv":
        raise ValueError("the alternating algorithm needs the logit-inv representer model")
    functional = functional or TargetFunctional("ate")
    gamma = fit_outcome_ls(dataset, basis_gamma, ridge)
    riesz: Optional[RieszFit] = None
    rounds: list[dict] = []
    for t in range(1, T + 1):
        riesz = _weighted_riesz(dataset, functional, model, gen, gamma, ridge=ridge, **solver)
        gamma = fit_outcome_weighted(dataset, basis_gamma, riesz, ridge)
        var = _score_variance(functional, dataset, gamma, riesz)
        entry = {
            "round": t,
            "riesz_objective": riesz.report.value if riesz.report else float("nan"),
            "gamma_objective": float(np.mean(gamma.weights * gamma.residuals(dataset) ** 2)),
            "score_variance": var,
        }
        rounds.append(entry)
        log.info("round %d: riesz %.6g, gamma %.6g, score variance %.6g", t,
                 entry["riesz_objective"], entry["gamma_objective"], var)
    gamma = OutcomeFit(gamma.base, gamma.dataset, gamma.weights, (), tuple(rounds))
    return gamma, riesz
