"""Target functionals ``m(W, gamma)`` and their representers.

Each functional is linear in ``gamma`` and is described by a small set of
evaluation terms: weighted point evaluations ``c * h(d_k, Z)`` and, for the
marginal effect, a weighted treatment derivative ``c * dh/dd (D, Z)``. Both
the plug-in map and every Bregman risk are assembled from these terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np
from numpy.typing import NDArray

from .types import BasisError, BasisSpec, Dataset, DatasetError, design, design_dderiv

KINDS = ("ate", "att", "ame", "covshift")


class Evaluable(Protocol):
    def predict(self, d, Z) -> NDArray: ...

    def predict_dderiv(self, d, Z) -> NDArray: ...


@dataclass(frozen=True)
class PointTerm:
    coef: NDArray
    d: NDArray
    z: NDArray


@dataclass(frozen=True)
class EvaluationTerms:
    """``m(W_i, h) = sum_k coef_k[i] h(d_k[i], z[i]) + deriv_coef[i] h_d(D_i, z[i])``.

    ``rows`` indexes the dataset rows that carry an m-term.
    """

    rows: NDArray
    points: tuple[PointTerm, ...]
    deriv: Optional[PointTerm] = None

    @property
    def count(self) -> int:
        return self.rows.shape[0]


@dataclass(frozen=True)
class TargetFunctional:
    """A linear functional of the regression function.

    ``p_treated`` is the treated fraction used by ATT; :func:`make_functional`
    computes it from the full sample so that it stays fixed across folds.
    """

    kind: str
    p_treated: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown functional {self.kind!r}; expected one of {KINDS}")
        if self.kind == "att":
            if self.p_treated is None or not (0.0 < self.p_treated < 1.0):
                raise ValueError(f"ATT needs a treated fraction in (0, 1), got {self.p_treated}")

    @property
    def needs_binary(self) -> bool:
        return self.kind in ("ate", "att")

    def validate(self, dataset: Dataset) -> None:
        if self.needs_binary and not np.all((dataset.d == 0.0) | (dataset.d == 1.0)):
            raise DatasetError(f"{self.kind.upper()} needs a binary treatment")
        if self.kind == "ame" and dataset.is_binary:
            raise DatasetError("AME needs a continuous treatment")
        if self.kind == "covshift":
            if not dataset.has_roles:
                raise DatasetError("covariate shift needs source/target role tags")
            if not dataset.target_mask.any() or not dataset.source_mask.any():
                raise DatasetError("covariate shift needs both Source and Target rows")
        elif dataset.has_roles:
            raise DatasetError(f"{self.kind.upper()} does not use role tags")

    def terms(self, dataset: Dataset) -> EvaluationTerms:
        n = dataset.n
        Z = dataset.z
        if self.kind == "ate":
            rows = np.arange(n)
            return EvaluationTerms(
                rows,
                (PointTerm(np.ones(n), np.ones(n), Z), PointTerm(-np.ones(n), np.zeros(n), Z)),
            )
        if self.kind == "att":
            rows = np.arange(n)
            c = dataset.d / self.p_treated
            return EvaluationTerms(rows, (PointTerm(c, np.ones(n), Z), PointTerm(-c, np.zeros(n), Z)))
        if self.kind == "ame":
            rows = np.arange(n)
            return EvaluationTerms(rows, (), PointTerm(np.ones(n), dataset.d, Z))
        rows = np.flatnonzero(dataset.target_mask)
        return EvaluationTerms(
            rows, (PointTerm(np.ones(rows.shape[0]), dataset.d[rows], Z[rows]),)
        )

    def token(self) -> str:
        return self.kind


def make_functional(kind: str, dataset: Optional[Dataset] = None) -> TargetFunctional:
    """Build a functional, freezing the ATT treated fraction from ``dataset``."""
    kind = kind.strip().lower()
    if kind == "att":
        if dataset is None:
            raise ValueError("ATT needs the dataset to compute the treated fraction")
        return TargetFunctional("att", dataset.treated_fraction())
    return TargetFunctional(kind)


def m_apply(f: TargetFunctional, dataset: Dataset, gamma: Evaluable) -> NDArray:
    """Per-row ``m(W_i, gamma)`` over the scored rows."""
    f.validate(dataset)
    t = f.terms(dataset)
    out = np.zeros(t.count)
    for pt in t.points:
        out += pt.coef * gamma.predict(pt.d, pt.z)
    if t.deriv is not None:
        out += t.deriv.coef * gamma.predict_dderiv(t.deriv.d, t.deriv.z)
    return out


def m_rows_basis(f: TargetFunctional, dataset: Dataset, basis: BasisSpec) -> NDArray:
    """Matrix with entries ``m(W_i, Phi_j)`` for scored rows ``i``."""
    f.validate(dataset)
    if f.kind == "ame" and not basis.d_differentiable:
        raise BasisError(f"AME needs a basis differentiable in the treatment, got {basis.token()!r}")
    t = f.terms(dataset)
    out = np.zeros((t.count, basis.p))
    for pt in t.points:
        out += pt.coef[:, None] * design(basis, pt.d, pt.z)
    if t.deriv is not None:
        out += t.deriv.coef[:, None] * design_dderiv(basis, t.deriv.d, t.deriv.z)
    return out


def m_apply_basis(
    f: TargetFunctional, dataset: Dataset, basis: BasisSpec, weights: Optional[NDArray] = None
) -> NDArray:
    """Mean of ``m(W_i, Phi_j)`` over scored rows, one entry per basis coordinate.

    ``weights``, if given, has one entry per dataset row and multiplies each
    row's contribution (the mean still divides by the scored-row count).
    """
    M = m_rows_basis(f, dataset, basis)
    rows = f.terms(dataset).rows
    if weights is not None:
        M = M * np.asarray(weights, dtype=float)[rows, None]
    return M.sum(axis=0) / rows.shape[0]


# ---------------------------------------------------------------------------
# Oracle representers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleTruth:
    """True DGP components used to evaluate the representer in closed form.

    Callables take a covariate matrix ``Z`` (and ``d`` for ``d_score``) and
    return one value per row.
    """

    propensity: Optional[Callable[[NDArray], NDArray]] = None
    p_treated: Optional[float] = None
    d_score: Optional[Callable[[NDArray, NDArray], NDArray]] = None
    density_ratio: Optional[Callable[[NDArray], NDArray]] = None


def oracle_alpha(f: TargetFunctional, truth: OracleTruth, d: NDArray, Z: NDArray) -> NDArray:
    """True representer at arbitrary points ``(d_i, Z_i)``."""
    d = np.asarray(d, dtype=float)
    if f.kind in ("ate", "att"):
        if truth.propensity is None:
            raise ValueError("oracle needs the true propensity")
        pi = np.asarray(truth.propensity(Z), dtype=float)
        if np.any(~(pi > 0.0) | ~(pi < 1.0)):
            raise ValueError("true propensity leaves (0, 1): overlap is violated")
        if f.kind == "ate":
            return d / pi - (1.0 - d) / (1.0 - pi)
        p = truth.p_treated if truth.p_treated is not None else f.p_treated
        return d / p - (1.0 - d) / p * pi / (1.0 - pi)
    if f.kind == "ame":
        if truth.d_score is None:
            raise ValueError("oracle needs the treatment score -d/dd log f")
        return np.asarray(truth.d_score(d, Z), dtype=float)
    if truth.density_ratio is None:
        raise ValueError("oracle needs the true density ratio")
    return np.asarray(truth.density_ratio(Z), dtype=float)


def oracle_representer(f: TargetFunctional, truth: OracleTruth, dataset: Dataset) -> NDArray:
    """True representer at every dataset row."""
    return oracle_alpha(f, truth, dataset.d, dataset.z)


def sign_pattern(f: TargetFunctional, d: NDArray) -> Optional[NDArray]:
    """Sign of the true representer where it is known a priori."""
    if f.kind in ("ate", "att"):
        return 2.0 * np.asarray(d) - 1.0
    if f.kind == "covshift":
        return np.ones_like(np.asarray(d, dtype=float))
    return None
