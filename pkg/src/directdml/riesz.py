"""Riesz representer estimation by Bregman risk minimization.

The empirical feasible risk is

    R(beta) = sum_i a_i selfterm(alpha(X_i)) - sum_i b_i m(W_i, g' o alpha)

with ``a_i = w_i / n`` and ``b_i = w_i / n`` for functionals scored on every
row. For covariate shift the self term averages over Source rows and the
m-term over Target rows.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from . import bregman as br
from .bregman import ConvexGenerator
from .functional import EvaluationTerms, TargetFunctional, m_apply_basis, sign_pattern
from .optimize import Objective, SolveReport, minimize, solve_normal
from .types import (
    LOGIT_CAP,
    SOFTPLUS_FLOOR,
    BasisError,
    BasisSpec,
    Dataset,
    FittedFunction,
    design,
    design_dderiv,
    sigmoid,
    softplus,
)

FORMS = ("linear", "logit-inv", "ratio")
RATIO_LINKS = ("softplus", "exp")

# (form, generator kind) -> functionals for which the pair is supported.
SUPPORTED = {
    ("linear", "ls"): ("ate", "att", "ame", "covshift"),
    ("logit-inv", "kl"): ("ate",),
    ("logit-inv", "entropy"): ("ate",),
    ("logit-inv", "ls"): ("ate",),
    ("ratio", "ls"): ("covshift",),
    ("ratio", "kl"): ("covshift",),
    ("ratio", "power"): ("covshift",),
}


def supported_pairs() -> str:
    return ", ".join(f"{f}x{g} ({'/'.join(fs)})" for (f, g), fs in SUPPORTED.items())


class UnsupportedPairError(ValueError):
    """Model form, generator and functional do not form a supported combination."""


@dataclass(frozen=True)
class RieszModel:
    """Parameterized representer.

    ``linear``: ``alpha = Phi(X)' beta``.
    ``logit-inv``: ``alpha = 1[D=1] / pi - 1[D=0] / (1 - pi)`` with
    ``pi = logistic(Phi(Z)' beta)``; the basis must not depend on ``d``.
    ``ratio``: ``alpha = link(Phi(X)' beta) > 0`` with ``link`` either
    ``softplus`` (plus a 1e-12 floor) or ``exp``.
    """

    form: str
    basis: BasisSpec
    link: str = "softplus"

    def __post_init__(self) -> None:
        if self.form not in FORMS:
            raise ValueError(f"unknown Riesz model {self.form!r}; expected one of {FORMS}")
        if self.form == "logit-inv" and self.basis.depends_on_treatment:
            raise BasisError("logit-inv model needs a basis over z only")
        if self.form == "ratio" and self.link not in RATIO_LINKS:
            raise ValueError(f"ratio link must be one of {RATIO_LINKS}, got {self.link!r}")

    @property
    def dim(self) -> int:
        return self.basis.p

    def token(self) -> str:
        return f"{self.form}:{self.link}" if self.form == "ratio" else self.form

    def fitted_link(self) -> str:
        if self.form == "linear":
            return "identity"
        if self.form == "logit-inv":
            return "inv_propensity_logistic"
        return "exp" if self.link == "exp" else "softplus_positive"

    def index_map(self, s: NDArray, d: NDArray) -> tuple[NDArray, NDArray, NDArray]:
        """``alpha`` and its first two derivatives in the linear index ``s``."""
        if self.form == "linear":
            return s, np.ones_like(s), np.zeros_like(s)
        if self.form == "ratio":
            if self.link == "exp":
                a = np.exp(s)
                return a, a, a
            sig = sigmoid(s)
            return softplus(s) + SOFTPLUS_FLOOR, sig, sig * (1.0 - sig)
        inside = np.abs(s) < LOGIT_CAP
        sc = np.clip(s, -LOGIT_CAP, LOGIT_CAP)
        treated = d == 1.0
        e = np.where(treated, np.exp(-sc), np.exp(sc))
        a = np.where(treated, 1.0 + e, -(1.0 + e))
        a1 = np.where(inside, -e, 0.0)
        a2 = np.where(inside, np.where(treated, e, -e), 0.0)
        return a, a1, a2

    def evaluate(self, beta: NDArray, d, Z) -> NDArray:
        Phi = design(self.basis, d, Z)
        dd = np.broadcast_to(np.asarray(d, dtype=float), (Phi.shape[0],))
        return self.index_map(Phi @ beta, dd)[0]


def check_pair(model: RieszModel, gen: ConvexGenerator, functional: TargetFunctional) -> None:
    allowed = SUPPORTED.get((model.form, gen.kind))
    if allowed is None or functional.kind not in allowed:
        raise UnsupportedPairError(
            f"unsupported combination {model.form} x {gen.name} for {functional.kind}; "
            f"supported: {supported_pairs()}"
        )
    if functional.kind == "ame" and not model.basis.d_differentiable:
        raise BasisError("AME needs a Riesz basis differentiable in the treatment")


# ---------------------------------------------------------------------------
# Risk assembly
# ---------------------------------------------------------------------------


@dataclass
class _Block:
    """One evaluation block: ``sum_i coef_i h(alpha(d_i, Z_i))`` with a given ``h``."""

    Phi: NDArray
    d: NDArray
    coef: NDArray
    role: str  # "self" or "link"


@dataclass
class _DerivBlock:
    Phi: NDArray
    Phi_d: NDArray
    coef: NDArray


class RieszRisk:
    """Empirical (optionally weighted) feasible Bregman risk of a model.

    ``weights`` has one non-negative entry per dataset row. The logit-inv
    model uses per-row closed forms that are algebraically identical to the
    generic composition but avoid cancellation in ``log(r - 1)``.
    """

    def __init__(
        self,
        dataset: Dataset,
        functional: TargetFunctional,
        model: RieszModel,
        gen: ConvexGenerator,
        weights: Optional[NDArray] = None,
        specialized: bool = True,
    ) -> None:
        functional.validate(dataset)
        check_pair(model, gen, functional)
        self.dataset = dataset
        self.functional = functional
        self.model = model
        self.gen = gen
        n = dataset.n
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).ravel()
        if w.shape[0] != n:
            raise ValueError(f"weights have length {w.shape[0]}, dataset has {n} rows")
        if np.any(~np.isfinite(w)) or np.any(w < 0.0):
            raise ValueError("weights must be finite and non-negative")
        self.weights = w
        self.specialized = specialized and model.form == "logit-inv"
        terms = functional.terms(dataset)
        self._build(terms)

    def _build(self, terms: EvaluationTerms) -> None:
        ds, basis, w = self.dataset, self.model.basis, self.weights
        if self.functional.kind == "covshift":
            src = np.flatnonzero(ds.source_mask)
            a = np.zeros(ds.n)
            a[src] = w[src] / src.shape[0]
        else:
            a = w / ds.n
        b = w[terms.rows] / terms.count
        self._Phi = design(basis, ds.d, ds.z)
        self._a = a
        self.blocks: list[_Block] = [_Block(self._Phi, ds.d, a, "self")]
        for pt in terms.points:
            self.blocks.append(_Block(design(basis, pt.d, pt.z), pt.d, -b * pt.coef, "link"))
        self.deriv: Optional[_DerivBlock] = None
        if terms.deriv is not None:
            t = terms.deriv
            self.deriv = _DerivBlock(design(basis, t.d, t.z), design_dderiv(basis, t.d, t.z), -b * t.coef)

    @property
    def dim(self) -> int:
        return self.model.dim

    # -- logit-inv closed forms ------------------------------------------------

    def _logit_rows(self, beta: NDArray, order: int):
        s = self._Phi @ beta
        inside = np.abs(s) < LOGIT_CAP
        s = np.clip(s, -LOGIT_CAP, LOGIT_CAP)
        D = self.dataset.d
        em, ep = np.exp(-s), np.exp(s)
        r1, r0 = 1.0 + em, 1.0 + ep
        kind = self.gen.kind
        if kind == "kl":
            val = D * r1 + (1.0 - D) * r0 - softplus(-s) - softplus(s)
        elif kind == "entropy":
            val = D * (em - s) + (1.0 - D) * (ep + s) + 1.0
        else:
            rD = np.where(D == 1.0, r1, r0)
            val = rD**2 - 1.0 - 2.0 * (r1 + r0)
        if order == 0:
            return val, None, None
        pi = sigmoid(s)
        if kind == "kl":
            d1 = -D * em + (1.0 - D) * ep + 1.0 - 2.0 * pi
            d2 = D * em + (1.0 - D) * ep - 2.0 * pi * (1.0 - pi)
        elif kind == "entropy":
            d1 = -D * r1 + (1.0 - D) * r0
            d2 = D * em + (1.0 - D) * ep
        else:
            d1 = D * (-2.0 * r1 * em) + (1.0 - D) * (2.0 * r0 * ep) + 2.0 * em - 2.0 * ep
            d2 = D * 2.0 * em * (2.0 * r1 - 1.0) + (1.0 - D) * 2.0 * ep * (2.0 * r0 - 1.0) - 2.0 * (em + ep)
        d1 = np.where(inside, d1, 0.0)
        d2 = np.where(inside, d2, 0.0)
        return val, d1, d2

    # -- generic composition ---------------------------------------------------

    def _h(self, role: str, alpha: NDArray, order: int):
        g = self.gen
        if role == "self":
            fs = (br.selfterm, br.selfterm_deriv, br.selfterm_second)
        else:
            fs = (br.g_deriv, br.g_second, br.g_third)
        return [np.asarray(fs[k](g, alpha), dtype=float) for k in range(order + 1)]

    def _generic(self, beta: NDArray, order: int):
        value = 0.0
        grad = np.zeros(self.dim)
        hess = np.zeros((self.dim, self.dim)) if order >= 2 else None
        for blk in self.blocks:
            keep = blk.coef != 0.0
            if not np.any(keep):
                continue
            Phi, c = blk.Phi[keep], blk.coef[keep]
            a, a1, a2 = self.model.index_map(Phi @ beta, blk.d[keep])
            hs = self._h(blk.role, a, order)
            value += float(c @ hs[0])
            if order >= 1:
                grad += Phi.T @ (c * hs[1] * a1)
            if order >= 2:
                hess += (Phi.T * (c * (hs[2] * a1**2 + hs[1] * a2))) @ Phi
        if self.deriv is not None:
            # Only the linear LS model reaches here: g' o alpha = 2(alpha - 1).
            db = self.deriv
            a_d = db.Phi_d @ beta
            value += float(db.coef @ (2.0 * a_d))
            if order >= 1:
                grad += db.Phi_d.T @ (2.0 * db.coef)
        return value, grad, hess

    # -- public ----------------------------------------------------------------

    def value(self, beta: NDArray) -> float:
        beta = np.asarray(beta, dtype=float)
        if self.specialized:
            val = self._logit_rows(beta, 0)[0]
            return float(self._a @ val)
        return self._generic(beta, 0)[0]

    def value_grad(self, beta: NDArray) -> tuple[float, NDArray]:
        beta = np.asarray(beta, dtype=float)
        if self.specialized:
            val, d1, _ = self._logit_rows(beta, 1)
            return float(self._a @ val), self._Phi.T @ (self._a * d1)
        v, g, _ = self._generic(beta, 1)
        return v, g

    def hessian(self, beta: NDArray) -> NDArray:
        beta = np.asarray(beta, dtype=float)
        if self.specialized:
            _, _, d2 = self._logit_rows(beta, 2)
            return (self._Phi.T * (self._a * d2)) @ self._Phi
        return self._generic(beta, 2)[2]

    def objective(self, ridge: float = 0.0) -> Objective:
        return Objective(self.dim, self.value_grad, self.hessian, ridge)


# ---------------------------------------------------------------------------
# Fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RieszFit:
    """A fitted representer together with the data it was fit on."""

    model: RieszModel
    generator: ConvexGenerator
    functional: TargetFunctional
    beta_hat: NDArray
    report: Optional[SolveReport]
    alpha_rows: NDArray
    weights: NDArray
    saturated: int = 0
    method: str = "bregman"
    data: Optional[Dataset] = field(default=None, repr=False)

    @property
    def function(self) -> FittedFunction:
        return FittedFunction(self.beta_hat, self.model.basis, self.model.fitted_link())

    def evaluate(self, d, Z) -> NDArray:
        return self.model.evaluate(self.beta_hat, d, Z)

    def predict(self, d, Z) -> NDArray:
        return self.evaluate(d, Z)

    def predict_dderiv(self, d, Z) -> NDArray:
        if self.model.form != "linear":
            raise BasisError("treatment derivative is only available for the linear model")
        return design_dderiv(self.model.basis, d, Z) @ self.beta_hat

    def alpha_on(self, dataset: Dataset) -> NDArray:
        return self.evaluate(dataset.d, dataset.z)

    def propensity(self, Z) -> NDArray:
        return self.function.propensity(Z)


def _saturation(model: RieszModel, beta: NDArray, dataset: Dataset) -> int:
    if model.form != "logit-inv":
        return 0
    s = design(model.basis, dataset.d, dataset.z) @ beta
    return int(np.sum(np.abs(s) >= LOGIT_CAP))


def fit_riesz_ls_closed_form(
    dataset: Dataset,
    functional: TargetFunctional,
    basis: BasisSpec,
    ridge: float = 0.0,
) -> RieszFit:
    """Linear-in-basis LS fit: solve ``(G + ridge I) beta = mbar``.

    ``G`` is the Gram matrix of the basis over the rows carrying the self
    term and ``mbar`` is :func:`m_apply_basis`.
    """
    model = RieszModel("linear", basis)
    check_pair(model, br.LS, functional)
    functional.validate(dataset)
    rows = dataset.source_mask if functional.kind == "covshift" else np.ones(dataset.n, dtype=bool)
    Phi = design(basis, dataset.d[rows], dataset.z[rows])
    G = Phi.T @ Phi / Phi.shape[0]
    mbar = m_apply_basis(functional, dataset, basis)
    beta = solve_normal(G, mbar, ridge)
    return RieszFit(
        model, br.LS, functional, beta, None, model.evaluate(beta, dataset.d, dataset.z),
        np.ones(dataset.n), 0, "closed-form", dataset,
    )


def fit_riesz_bregman(
    dataset: Dataset,
    functional: TargetFunctional,
    model: RieszModel,
    gen: ConvexGenerator,
    weights: Optional[NDArray] = None,
    ridge: float = 0.0,
    tol: float = 1e-10,
    max_iter: Optional[int] = None,
    beta0: Optional[NDArray] = None,
) -> RieszFit:
    """Minimize the (weighted) feasible Bregman risk plus ``ridge * ||beta||^2``.

    Raises
    ------
    UnsupportedPairError
        For combinations outside :data:`SUPPORTED`.
    """
    risk = RieszRisk(dataset, functional, model, gen, weights)
    start = np.zeros(model.dim) if beta0 is None else np.asarray(beta0, dtype=float)
    if not np.any(risk.weights > 0.0):
        warnings.warn("all Riesz weights are zero; returning the starting point", RuntimeWarning, stacklevel=2)
        report = SolveReport(start, 0.0, 0, False, 0.0, (), "degenerate weights")
        beta = start
    else:
        report = minimize(risk.objective(ridge), start, tol=tol, max_iter=max_iter)
        beta = report.beta_hat
        if not report.converged:
            warnings.warn(
                f"Riesz fit did not converge: gradient norm {report.grad_norm:.3g} ({report.message})",
                RuntimeWarning,
                stacklevel=2,
            )
    return RieszFit(
        model, gen, functional, beta, report, model.evaluate(beta, dataset.d, dataset.z),
        risk.weights, _saturation(model, beta, dataset), "bregman", dataset,
    )


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def balance_residual(
    fit: RieszFit, dataset: Dataset, functional: TargetFunctional, basis: BasisSpec
) -> NDArray:
    """``mean_i alpha_hat(X_i) Phi(X_i) - m_apply_basis(functional, basis)``.

    The first mean runs over all rows, or over Source rows for covariate
    shift. For a z-only basis and ATE the second term vanishes and the
    residual is the treated-minus-control weighted moment difference.
    """
    rows = dataset.source_mask if functional.kind == "covshift" else np.ones(dataset.n, dtype=bool)
    Phi = design(basis, dataset.d[rows], dataset.z[rows])
    alpha = fit.evaluate(dataset.d[rows], dataset.z[rows])
    return Phi.T @ alpha / Phi.shape[0] - m_apply_basis(functional, dataset, basis)


@dataclass(frozen=True)
class WeightSummary:
    arms: dict
    sign_violations: int
    degenerate: bool
    saturated: int

    def as_dict(self) -> dict:
        return {
            "arms": self.arms,
            "sign_violations": self.sign_violations,
            "degenerate": self.degenerate,
            "saturated": self.saturated,
        }


def weight_diagnostics(fit: RieszFit, dataset: Optional[Dataset] = None) -> WeightSummary:
    """Range of the fitted weights per arm and sign agreement with the true representer."""
    if dataset is None:
        dataset = fit.data
    alpha = fit.alpha_rows if dataset is None or dataset is fit.data else fit.alpha_on(dataset)
    d = None if dataset is None else dataset.d
    arms: dict = {}

    def stats(v: NDArray) -> dict:
        if v.size == 0:
            return {"count": 0}
        return {"count": int(v.size), "min": float(v.min()), "max": float(v.max()), "mean": float(v.mean())}

    kind = fit.functional.kind
    if d is not None and kind in ("ate", "att"):
        arms["treated"] = stats(alpha[d == 1.0])
        arms["control"] = stats(alpha[d == 0.0])
    elif d is not None and kind == "covshift":
        arms["source"] = stats(alpha[dataset.source_mask])
    else:
        arms["all"] = stats(alpha)
    violations = 0
    if d is not None:
        pattern = sign_pattern(fit.functional, d)
        if pattern is not None:
            mask = dataset.source_mask if kind == "covshift" else np.ones(alpha.shape[0], dtype=bool)
            violations = int(np.sum((np.sign(alpha) != pattern) & mask))
    return WeightSummary(arms, violations, bool(np.all(alpha == 0.0)), fit.saturated)
