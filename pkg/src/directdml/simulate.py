"""Synthetic data-generating processes and exact enumeration oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

from .functional import OracleTruth, TargetFunctional, oracle_alpha
from .types import Dataset, sigmoid

DGP_KINDS = ("ate_logistic", "att_logistic", "ame_gaussian", "covshift_gaussian", "discrete")

DEFAULTS: dict[str, dict] = {
    "ate_logistic": {"q": 5, "tau": 1.0, "pi_coef": (0.8, -0.5), "gamma_coef": (1.0, 1.0),
                     "sigma": 1.0, "nonlinear": 0.0},
    "att_logistic": {"q": 5, "tau": 1.0, "pi_coef": (0.8, -0.5), "gamma_coef": (1.0, 1.0),
                     "sigma": 1.0, "nonlinear": 0.0},
    "ame_gaussian": {"q": 2, "tau": 1.0, "quad": 0.5, "zcoef": 1.0, "d_mean": 0.5,
                     "d_slope": 0.5, "d_sd": 1.0, "sigma": 1.0, "nonlinear": 0.0},
    "covshift_gaussian": {"q": 2, "shift": 0.5, "intercept": 1.0, "gamma_coef": (1.0, -0.5),
                          "sigma": 1.0, "target_ratio": 1.0, "nonlinear": 0.0},
    "discrete": {"support": (-1.0, 0.0, 1.0, 2.0), "probs": (0.2, 0.3, 0.3, 0.2),
                 "pi_intercept": 0.2, "pi_slope": 0.6, "tau": 1.0, "slope": 0.5,
                 "interaction": 0.4, "noise": (0.5, 0.25)},
}


def _pad(coef, q: int) -> NDArray:
    c = np.zeros(q)
    c[: len(coef)] = coef
    return c


@dataclass(frozen=True, eq=False)
class DgpSpec:
    """A data-generating process with known truth.

    ``params`` overrides entries of :data:`DEFAULTS` for the kind. Defaults:

    ``ate_logistic`` / ``att_logistic``: ``Z ~ U[-1, 1]^5``,
    ``pi0 = logistic(0.8 z1 - 0.5 z2)``, ``gamma0 = tau d + z1 + z2``,
    Gaussian noise with ``sigma = 1``.

    ``ame_gaussian``: ``Z ~ N(0, I_2)``, ``D = 0.5 z1 + d_mean + N(0, d_sd^2)``,
    ``gamma0 = tau d + quad d^2 + zcoef z1``.

    ``covshift_gaussian``: Source ``Z ~ N(0, I)``, Target ``Z ~ N(mu, I)`` with
    ``mu = (shift, 0, ...)``, ``gamma0 = intercept + b'z``; Target outcomes
    are unobserved.

    ``discrete``: scalar ``Z`` on a finite support, logistic propensity,
    ``gamma0 = tau d + slope z + interaction d z`` and two-point noise
    ``+-(noise[0] + noise[1] z^2)``.

    ``nonlinear`` adds ``nonlinear * z1^2`` to ``gamma0``, a fixed
    misspecification for linear outcome bases that leaves the truth unchanged.
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in DGP_KINDS:
            raise ValueError(f"unknown DGP {self.kind!r}; expected one of {DGP_KINDS}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged = dict(DEFAULTS[self.kind])
        merged.update(self.params)
        object.__setattr__(self, "params", merged)
        if self.kind == "discrete":
            p = np.asarray(merged["probs"], dtype=float)
            if len(p) != len(merged["support"]) or abs(math.fsum(p) - 1.0) > 1e-14 or np.any(p <= 0):
                raise ValueError("discrete support probabilities must be positive and sum to 1")

    def __getitem__(self, key: str):
        return self.params[key]

    def with_seed(self, seed: int) -> "DgpSpec":
        return DgpSpec(self.kind, {k: v for k, v in self.params.items()}, seed)

    # -- components --------------------------------------------------------

    @property
    def q(self) -> int:
        return 1 if self.kind == "discrete" else int(self.params["q"])

    def propensity(self, Z: NDArray) -> NDArray:
        Z = np.asarray(Z, dtype=float).reshape(-1, self.q)
        p = self.params
        if self.kind == "discrete":
            return sigmoid(p["pi_intercept"] + p["pi_slope"] * Z[:, 0])
        if self.kind not in ("ate_logistic", "att_logistic"):
            raise ValueError(f"{self.kind} has no propensity")
        return sigmoid(Z @ _pad(p["pi_coef"], self.q))

    def gamma0(self, d, Z: NDArray) -> NDArray:
        Z = np.asarray(Z, dtype=float).reshape(-1, self.q)
        d = np.broadcast_to(np.asarray(d, dtype=float), (Z.shape[0],))
        p = self.params
        if self.kind == "discrete":
            z = Z[:, 0]
            return p["tau"] * d + p["slope"] * z + p["interaction"] * d * z
        extra = p["nonlinear"] * Z[:, 0] ** 2
        if self.kind in ("ate_logistic", "att_logistic"):
            return p["tau"] * d + Z @ _pad(p["gamma_coef"], self.q) + extra
        if self.kind == "ame_gaussian":
            return p["tau"] * d + p["quad"] * d**2 + p["zcoef"] * Z[:, 0] + extra
        return p["intercept"] + Z @ _pad(p["gamma_coef"], self.q) + extra

    def gamma0_dderiv(self, d, Z: NDArray) -> NDArray:
        if self.kind != "ame_gaussian":
            raise ValueError("treatment derivative is defined for the AME design only")
        Z = np.asarray(Z, dtype=float).reshape(-1, self.q)
        d = np.broadcast_to(np.asarray(d, dtype=float), (Z.shape[0],))
        return self.params["tau"] + 2.0 * self.params["quad"] * d

    def shift_vector(self) -> NDArray:
        mu = np.zeros(self.q)
        mu[0] = self.params["shift"]
        return mu

    def density_ratio(self, Z: NDArray) -> NDArray:
        Z = np.asarray(Z, dtype=float).reshape(-1, self.q)
        mu = self.shift_vector()
        return np.exp(Z @ mu - 0.5 * float(mu @ mu))

    def d_score(self, d, Z: NDArray) -> NDArray:
        Z = np.asarray(Z, dtype=float).reshape(-1, self.q)
        p = self.params
        return (np.asarray(d, dtype=float) - p["d_slope"] * Z[:, 0] - p["d_mean"]) / p["d_sd"] ** 2

    def truth(self) -> OracleTruth:
        if self.kind in ("ate_logistic", "att_logistic", "discrete"):
            return OracleTruth(propensity=self.propensity, p_treated=self.treated_probability())
        if self.kind == "ame_gaussian":
            return OracleTruth(d_score=self.d_score)
        return OracleTruth(density_ratio=self.density_ratio)

    def treated_probability(self) -> float:
        if self.kind == "discrete":
            p = self.params
            z = np.asarray(p["support"], dtype=float)
            return math.fsum(np.asarray(p["probs"]) * self.propensity(z))
        if self.kind in ("ate_logistic", "att_logistic"):
            # Covariates symmetric about 0 and an index without intercept give Pr(D = 1) = 1/2.
            return 0.5
        raise ValueError(f"{self.kind} has no binary treatment")


def mean_y_sd(spec: DgpSpec, z: NDArray) -> NDArray:
    a, b = spec.params["noise"]
    return a + b * np.asarray(z, dtype=float) ** 2


def sample(spec: DgpSpec, n: int, seed: Optional[int] = None) -> Dataset:
    """Draw ``n`` observations (``n`` Source and ``target_ratio * n`` Target rows
    for covariate shift). Binary designs are redrawn until both arms appear."""
    if n < 1:
        raise ValueError("n must be positive")
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    p = spec.params
    q = spec.q
    kind = spec.kind
    if kind == "covshift_gaussian":
        nt = max(1, int(round(p["target_ratio"] * n)))
        Zs = rng.standard_normal((n, q))
        Zt = rng.standard_normal((nt, q)) + spec.shift_vector()
        ys = spec.gamma0(0.0, Zs) + p["sigma"] * rng.standard_normal(n)
        y = np.concatenate([ys, np.full(nt, np.nan)])
        Z = np.vstack([Zs, Zt])
        target = np.concatenate([np.zeros(n, dtype=bool), np.ones(nt, dtype=bool)])
        return Dataset(y, np.zeros(n + nt), Z, target)
    if kind == "ame_gaussian":
        Z = rng.standard_normal((n, q))
        d = p["d_slope"] * Z[:, 0] + p["d_mean"] + p["d_sd"] * rng.standard_normal(n)
        y = spec.gamma0(d, Z) + p["sigma"] * rng.standard_normal(n)
        return Dataset(y, d, Z, treatment="continuous")
    for _ in range(1000):
        if kind == "discrete":
            support = np.asarray(p["support"], dtype=float)
            Z = rng.choice(support, size=n, p=np.asarray(p["probs"], dtype=float)).reshape(-1, 1)
        else:
            Z = rng.uniform(-1.0, 1.0, (n, q))
        d = (rng.uniform(size=n) < spec.propensity(Z)).astype(float)
        if n >= 2 and 0 < d.sum() < n:
            break
    else:
        raise ValueError("could not draw both treatment arms; increase n")
    mu = spec.gamma0(d, Z)
    if kind == "discrete":
        sign = np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0)
        y = mu + sign * mean_y_sd(spec, Z[:, 0])
    else:
        y = mu + p["sigma"] * rng.standard_normal(n)
    return Dataset(y, d, Z)


def true_theta(spec: DgpSpec, functional: str = "") -> float:
    """Population value of the parameter the DGP targets.

    ``functional`` selects ``ate`` or ``att`` for the discrete design.
    """
    p = spec.params
    kind = spec.kind
    if kind in ("ate_logistic", "att_logistic"):
        return float(p["tau"])
    if kind == "ame_gaussian":
        return float(p["tau"] + 2.0 * p["quad"] * p["d_mean"])
    if kind == "covshift_gaussian":
        mu = spec.shift_vector()
        extra = p["nonlinear"] * (1.0 + mu[0] ** 2)
        return float(p["intercept"] + _pad(p["gamma_coef"], spec.q) @ mu + extra)
    f = functional or "ate"
    enum = enumerate_binary(spec)
    return enum.theta(f)


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnumeratedDistribution:
    """A finitely supported law of ``W`` held as atoms with probabilities.

    ``prob`` sums to one within each role (Source and Target separately for
    covariate shift; over all atoms otherwise). ``gamma0`` and ``truth`` give
    the true regression and representer components.
    """

    d: NDArray
    z: NDArray
    y: NDArray
    prob: NDArray
    gamma0: Callable = field(repr=False)
    truth: OracleTruth = field(repr=False)
    target: Optional[NDArray] = None
    gamma0_dderiv: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        for role in self._roles():
            s = math.fsum(self.prob[role])
            if abs(s - 1.0) > 1e-14:
                raise ValueError(f"enumerated probabilities sum to {s!r}")

    def _roles(self) -> list[NDArray]:
        if self.target is None:
            return [np.ones(self.prob.shape[0], dtype=bool)]
        return [~self.target, self.target]

    @property
    def size(self) -> int:
        return self.prob.shape[0]

    def dataset(self) -> Dataset:
        treat = "auto" if self.target is not None else (
            "binary" if np.all((self.d == 0) | (self.d == 1)) else "continuous")
        return Dataset(self.y, self.d, self.z, self.target, treat)

    def row_weights(self) -> NDArray:
        """Per-atom weights that turn an empirical mean over atoms into an expectation.

        A per-row average over ``k`` rows of a role uses ``k * prob``.
        """
        w = np.empty(self.size)
        for role in self._roles():
            w[role] = role.sum() * self.prob[role]
        return w

    def expect(self, values: NDArray, role: Optional[str] = None) -> float:
        """Exact expectation of per-atom ``values`` under the law of ``role``."""
        values = np.broadcast_to(np.asarray(values, dtype=float), (self.size,))
        mask = self._mask(role)
        return math.fsum(self.prob[mask] * values[mask])

    def _mask(self, role: Optional[str]) -> NDArray:
        if role is None:
            if self.target is not None:
                raise ValueError("specify role='source' or 'target' for a two-sample law")
            return np.ones(self.size, dtype=bool)
        if self.target is None:
            raise ValueError("this law has no roles")
        return self.target if role == "target" else ~self.target

    def mean_rows(self, values: NDArray) -> float:
        """Exact counterpart of ``values.mean()`` for per-row production quantities."""
        v = np.asarray(values, dtype=float)
        return math.fsum(self.row_weights() * v) / self.size

    def alpha0(self, functional: TargetFunctional) -> NDArray:
        return oracle_alpha(functional, self.truth, self.d, self.z)

    def theta(self, functional: str) -> float:
        if functional == "covshift":
            return self.expect(self.gamma0(self.d, self.z), "target")
        if functional == "ame":
            return self.expect(self.gamma0_dderiv(self.d, self.z))
        diff = self.gamma0(1.0, self.z) - self.gamma0(0.0, self.z)
        if functional == "ate":
            return self.expect(diff)
        p = self.expect(self.d)
        return self.expect(self.d * diff) / p


def population_risk(enum: EnumeratedDistribution, integrand, role: Optional[str] = None) -> float:
    """Exact expectation of ``integrand`` (per-atom values or a callable of the law)."""
    values = integrand(enum) if callable(integrand) else integrand
    if enum.target is not None and role is None:
        role = "source"
    return enum.expect(values, role)


def enumerate_binary(spec: DgpSpec) -> EnumeratedDistribution:
    """Atoms ``(d, z, y = gamma0 +- sd(z))`` of the discrete design."""
    if spec.kind != "discrete":
        raise ValueError("exact enumeration needs the discrete design")
    p = spec.params
    support = np.asarray(p["support"], dtype=float)
    pz = np.asarray(p["probs"], dtype=float)
    pi = spec.propensity(support)
    D, Zs, Ys, P = [], [], [], []
    for z, w, pr in zip(support, pz, pi):
        sd = float(mean_y_sd(spec, z))
        for d, pd in ((1.0, pr), (0.0, 1.0 - pr)):
            mu = float(spec.gamma0(d, np.array([[z]]))[0])
            for sgn in (1.0, -1.0):
                D.append(d)
                Zs.append(z)
                Ys.append(mu + sgn * sd)
                P.append(w * pd * 0.5)
    prob = np.array(P)
    prob = prob / math.fsum(prob)
    truth = OracleTruth(propensity=spec.propensity, p_treated=math.fsum(pz * pi))
    return EnumeratedDistribution(
        np.array(D), np.array(Zs).reshape(-1, 1), np.array(Ys), prob, spec.gamma0, truth
    )


def enumerate_ame(
    support=(-1.0, 0.0, 1.0, 2.0),
    probs=(0.2, 0.3, 0.3, 0.2),
    d_slope: float = 0.5,
    d_mean: float = 0.5,
    d_sd: float = 1.0,
    tau: float = 1.0,
    quad: float = 0.5,
    zcoef: float = 1.0,
    sigma: float = 1.0,
    nodes: int = 12,
) -> EnumeratedDistribution:
    """Discrete ``Z`` with ``D | Z`` Gaussian, integrated by Gauss-Hermite quadrature.

    The quadrature is exact for polynomial integrands of degree below
    ``2 * nodes``, which covers every polynomial-basis identity used here.
    """
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / math.fsum(w)
    D, Zs, Ys, P = [], [], [], []

    def g0(d, Z):
        Z = np.asarray(Z, dtype=float).reshape(-1, 1)
        d = np.broadcast_to(np.asarray(d, dtype=float), (Z.shape[0],))
        return tau * d + quad * d**2 + zcoef * Z[:, 0]

    def g0d(d, Z):
        Z = np.asarray(Z, dtype=float).reshape(-1, 1)
        return tau + 2.0 * quad * np.broadcast_to(np.asarray(d, dtype=float), (Z.shape[0],))

    def score(d, Z):
        Z = np.asarray(Z, dtype=float).reshape(-1, 1)
        return (np.asarray(d, dtype=float) - d_slope * Z[:, 0] - d_mean) / d_sd**2

    for z, pz in zip(support, probs):
        for xi, wi in zip(x, w):
            d = d_slope * z + d_mean + d_sd * xi
            mu = float(g0(d, [[z]])[0])
            for sgn in (1.0, -1.0):
                D.append(d)
                Zs.append(z)
                Ys.append(mu + sgn * sigma)
                P.append(pz * wi * 0.5)
    prob = np.array(P)
    prob = prob / math.fsum(prob)
    return EnumeratedDistribution(
        np.array(D), np.array(Zs).reshape(-1, 1), np.array(Ys), prob, g0,
        OracleTruth(d_score=score), gamma0_dderiv=g0d,
    )


def enumerate_covshift(
    support=(-1.0, 0.0, 1.0, 2.0),
    source_probs=(0.3, 0.3, 0.25, 0.15),
    target_probs=(0.1, 0.2, 0.3, 0.4),
    intercept: float = 1.0,
    slope: float = 0.5,
    sigma: float = 0.5,
) -> EnumeratedDistribution:
    """Two-sample law on a shared support; Source atoms carry ``y = gamma0 +- sigma``.

    Target atoms have no outcome (NaN). The density ratio is ``p_T / p_S``.
    """
    support = np.asarray(support, dtype=float)
    ps = np.asarray(source_probs, dtype=float)
    pt = np.asarray(target_probs, dtype=float)
    ratio = dict(zip(support.tolist(), (pt / ps).tolist()))

    def g0(d, Z):
        Z = np.asarray(Z, dtype=float).reshape(-1, 1)
        return intercept + slope * Z[:, 0]

    def r0(Z):
        Z = np.asarray(Z, dtype=float).reshape(-1, 1)
        return np.array([ratio[float(v)] for v in Z[:, 0]])

    Zs, Ys, P, T = [], [], [], []
    for z, w in zip(support, ps):
        for sgn in (1.0, -1.0):
            Zs.append(z)
            Ys.append(intercept + slope * z + sgn * sigma)
            P.append(0.5 * w)
            T.append(False)
    for z, w in zip(support, pt):
        Zs.append(z)
        Ys.append(np.nan)
        P.append(w)
        T.append(True)
    k = len(Zs)
    return EnumeratedDistribution(
        np.zeros(k), np.array(Zs).reshape(-1, 1), np.array(Ys), np.array(P), g0,
        OracleTruth(density_ratio=r0), target=np.array(T),
    )


# ---------------------------------------------------------------------------
# Variance-targeting oracle objectives for the binary design
# ---------------------------------------------------------------------------


def _alpha_pi(d: NDArray, pi: NDArray) -> NDArray:
    return d / pi - (1.0 - d) / (1.0 - pi)


def aipw_values(enum: EnumeratedDistribution, gamma: Callable, pi: NDArray) -> NDArray:
    """``h(W; gamma, pi) = alpha_pi (Y - gamma(X)) + gamma(1, Z) - gamma(0, Z)`` per atom."""
    d, z, y = enum.d, enum.z, enum.y
    return _alpha_pi(d, pi) * (y - gamma(d, z)) + gamma(1.0, z) - gamma(0.0, z)


def oracle_mse(enum: EnumeratedDistribution, gamma: Callable, propensity: Callable) -> float:
    """``E[(h(W; eta0) - h(W; (gamma, pi)))^2]`` computed exactly."""
    pi0 = enum.truth.propensity(enum.z)
    h0 = aipw_values(enum, enum.gamma0, pi0)
    h = aipw_values(enum, gamma, propensity(enum.z))
    return enum.expect((h0 - h) ** 2)


def feasible_propensity_objective(
    enum: EnumeratedDistribution, gamma: Callable, propensity: Callable, include_gamma_term: bool = True
) -> float:
    """Propensity objective free of the true propensity.

    ``E[(-2 (1/pi + 1/(1-pi)) + alpha_pi^2) (Y - gamma0)^2]`` plus, when
    ``include_gamma_term``, the squared regression-error term that vanishes
    at ``gamma = gamma0``.
    """
    d, z, y = enum.d, enum.z, enum.y
    pi = propensity(z)
    a = _alpha_pi(d, pi)
    first = (-2.0 * (1.0 / pi + 1.0 / (1.0 - pi)) + a**2) * (y - enum.gamma0(d, z)) ** 2
    total = enum.expect(first)
    if include_gamma_term:
        e1 = enum.gamma0(1.0, z) - gamma(1.0, z)
        e0 = enum.gamma0(0.0, z) - gamma(0.0, z)
        second = ((1.0 - d / pi) * e1 - (1.0 - (1.0 - d) / (1.0 - pi)) * e0) ** 2
        total += enum.expect(second)
    return total
