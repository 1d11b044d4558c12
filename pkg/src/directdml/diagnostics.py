"""Self-check suite: gradients, Bregman properties, balancing and the
variance-targeting propensity equivalence on an enumerated law."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import bregman as br
from .functional import TargetFunctional
from .optimize import Objective, gradient_check
from .riesz import RieszModel, RieszRisk, balance_residual, fit_riesz_bregman, fit_riesz_ls_closed_form
from .simulate import DgpSpec, enumerate_binary, feasible_propensity_objective, oracle_mse, sample
from .types import polynomial_basis, raw_basis, sigmoid, treatment_split


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def as_dict(self) -> dict:
        return asdict(self)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name}: {self.value:.3e} (threshold {self.threshold:.1e}) {self.detail}".rstrip()


def _row(name: str, value: float, threshold: float, detail: str = "", below: bool = True) -> CheckResult:
    ok = bool(value <= threshold) if below else bool(value > threshold)
    return CheckResult(name, ok, float(value), threshold, detail)


def _risk_cases(seed: int) -> list[tuple[str, RieszRisk]]:
    """Every supported (model, generator, functional) combination on small data."""
    rng = np.random.default_rng(seed)
    ate = sample(DgpSpec("ate_logistic", {"q": 2}), 60, seed)
    ame = sample(DgpSpec("ame_gaussian"), 60, seed)
    cs = sample(DgpSpec("covshift_gaussian"), 40, seed)
    w = rng.uniform(0.1, 2.0, ate.n)
    zb = raw_basis(2)
    split = treatment_split(raw_basis(2))
    cases = [
        ("linear x ls / ate", RieszRisk(ate, TargetFunctional("ate"), RieszModel("linear", split), br.LS)),
        ("linear x ls / att", RieszRisk(ate, TargetFunctional("att", ate.treated_fraction()),
                                        RieszModel("linear", split), br.LS)),
        ("linear x ls / ame", RieszRisk(ame, TargetFunctional("ame"),
                                        RieszModel("linear", polynomial_basis(2, 2, True)), br.LS)),
        ("linear x ls / covshift", RieszRisk(cs, TargetFunctional("covshift"), RieszModel("linear", zb), br.LS)),
        ("linear x ls / ate weighted", RieszRisk(ate, TargetFunctional("ate"), RieszModel("linear", split),
                                                 br.LS, w)),
    ]
    for g in (br.KL, br.ENTROPY, br.LS):
        cases.append((f"logit-inv x {g.name} / ate", RieszRisk(ate, TargetFunctional("ate"),
                                                              RieszModel("logit-inv", zb), g)))
        cases.append((f"logit-inv x {g.name} / ate weighted", RieszRisk(ate, TargetFunctional("ate"),
                                                                       RieszModel("logit-inv", zb), g, w)))
    for link in ("softplus", "exp"):
        for g in (br.LS, br.KL, br.power_divergence(0.5)):
            cases.append((f"ratio[{link}] x {g.name} / covshift",
                          RieszRisk(cs, TargetFunctional("covshift"), RieszModel("ratio", zb, link), g)))
    return cases


def gradient_checks(seed: int = 0, points: int = 20, threshold: float = 1e-6) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 1)
    out = []
    for name, risk in _risk_cases(seed):
        obj = risk.objective()
        worst = max(gradient_check(obj, 0.5 * rng.standard_normal(risk.dim)) for _ in range(points))
        out.append(_row(f"gradient {name}", worst, threshold))
    return out


def broken_gradient_fixture() -> Objective:
    """Quadratic whose reported gradient is off by a factor of two."""
    def fun(b):
        return float(b @ b), 4.0 * b

    return Objective(3, fun)


def bregman_checks(seed: int = 0, count: int = 10_000) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for gen in (br.LS, br.KL, br.ENTROPY, br.power_divergence(0.5), br.power_divergence(1.0)):
        if gen.kind == "ls":
            a0, a = rng.normal(0, 3, count), rng.normal(0, 3, count)
        elif gen.kind == "kl":
            sgn = rng.choice([-1.0, 1.0], count)
            a0, a = sgn * rng.uniform(0.05, 5, count), sgn * rng.uniform(0.05, 5, count)
        elif gen.kind == "entropy":
            sgn = rng.choice([-1.0, 1.0], count)
            a0, a = sgn * rng.uniform(1.05, 6, count), sgn * rng.uniform(1.05, 6, count)
        else:
            a0, a = rng.uniform(0.05, 5, count), rng.uniform(0.05, 5, count)
        d = br.bregman_pointwise(gen, a0, a)
        out.append(_row(f"bregman nonnegative {gen.name}", max(0.0, -float(d.min())), 1e-12))
        out.append(_row(f"bregman identity {gen.name}", float(np.abs(br.bregman_pointwise(gen, a, a)).max()), 1e-14))
        h = 1e-6 * np.maximum(1.0, np.abs(a))
        fd = (br.g_eval(gen, a + h) - br.g_eval(gen, a - h)) / (2 * h)
        gd = br.g_deriv(gen, a)
        out.append(_row(f"derivative consistency {gen.name}", float(np.max(np.abs(gd - fd) / (1 + np.abs(gd)))), 1e-7))
        s, l = br.feasible_integrand(gen, a)
        gap = d - br.g_eval(gen, a0) - (s - l * a0)
        out.append(_row(f"feasibility identity {gen.name}",
                        float(np.max(np.abs(gap) / (1 + np.abs(br.g_eval(gen, a0))))), 1e-10))
    return out


def balancing_checks(seed: int = 0) -> list[CheckResult]:
    data = sample(DgpSpec("ate_logistic"), 2000, seed)
    f = TargetFunctional("ate")
    split = treatment_split(raw_basis(5))
    lin = fit_riesz_ls_closed_form(data, f, split)
    out = [_row("balance linear x ls (own basis)", float(np.abs(balance_residual(lin, data, f, split)).max()), 1e-8)]
    zb = raw_basis(5)
    ent = fit_riesz_bregman(data, f, RieszModel("logit-inv", zb), br.ENTROPY)
    out.append(_row("balance logit-inv x entropy (treated vs control)",
                    float(np.abs(balance_residual(ent, data, f, zb)).max()), 1e-6))
    kl = fit_riesz_bregman(data, f, RieszModel("logit-inv", zb), br.KL)
    res = float(np.abs(balance_residual(kl, data, f, zb)).max())
    out.append(CheckResult("balance logit-inv x kl (reported, not required)", True, res, float("nan"),
                           "exact" if res <= 1e-6 else "does not balance exactly"))
    return out


def propensity_objective_checks(grid_size: int = 201) -> list[CheckResult]:
    spec = DgpSpec("discrete")
    enum = enumerate_binary(spec)
    c0, b0 = spec["pi_intercept"], spec["pi_slope"]
    grid = np.linspace(b0 - 1.0, b0 + 1.0, grid_size)
    oracle, feasible = [], []
    for b in grid:
        prop = lambda Z, b=b: sigmoid(c0 + b * np.asarray(Z)[:, 0])
        oracle.append(oracle_mse(enum, enum.gamma0, prop))
        feasible.append(feasible_propensity_objective(enum, enum.gamma0, prop))
    diff = np.array(oracle) - np.array(feasible)
    dev = float(diff.max() - diff.min())
    same = int(np.argmin(oracle)) == int(np.argmin(feasible))
    return [
        _row("propensity objective offset constancy", dev, 1e-10, f"max deviation {dev:.3e}"),
        CheckResult("propensity objective argmin agreement", same, float(np.argmin(feasible)), float(np.argmin(oracle)),
                    f"indices {int(np.argmin(oracle))} vs {int(np.argmin(feasible))}"),
    ]


def run_suite(seed: int = 0, broken_fixture: bool = False) -> list[CheckResult]:
    rows = gradient_checks(seed) + bregman_checks(seed) + balancing_checks(seed) + propensity_objective_checks()
    if broken_fixture:
        err = gradient_check(broken_gradient_fixture(), np.array([0.3, -0.2, 0.5]))
        rows.append(_row("gradient planted-bug fixture", err, 1e-6))
    return rows
