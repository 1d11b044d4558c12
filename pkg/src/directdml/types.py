"""Core data model: datasets, basis expansions and fitted-function handles."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

# Logistic resolution limit in double precision.
LOGIT_CAP = 36.0
SOFTPLUS_FLOOR = 1e-12


class DatasetError(ValueError):
    """Malformed or inconsistent observations."""


class BasisError(ValueError):
    """Basis evaluation requested on incompatible input."""


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations ``W_i = (y_i, d_i, z_i)`` with an optional source/target tag.

    ``target`` is a boolean mask (True for Target rows) used by covariate
    shift problems; outcomes of Target rows may be NaN.
    """

    y: NDArray
    d: NDArray
    z: NDArray
    target: Optional[NDArray] = None
    treatment: str = "auto"

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float).ravel()
        d = np.asarray(self.d, dtype=float).ravel()
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, 1)
        n = y.shape[0]
        if d.shape[0] != n or z.shape[0] != n:
            raise DatasetError(
                f"column lengths differ: y={n}, d={d.shape[0]}, z={z.shape[0]}"
            )
        target = None
        if self.target is not None:
            target = np.asarray(self.target, dtype=bool).ravel()
            if target.shape[0] != n:
                raise DatasetError(f"role mask has {target.shape[0]} rows, expected {n}")
            target.setflags(write=False)

        kind = self.treatment
        if kind == "auto":
            if target is not None:
                kind = "continuous"
            elif np.all((d == 0.0) | (d == 1.0)):
                kind = "binary"
            else:
                kind = "continuous"
        if kind not in ("binary", "continuous"):
            raise DatasetError(f"unknown treatment kind {kind!r}")
        if kind == "binary":
            if not np.all((d == 0.0) | (d == 1.0)):
                raise DatasetError("binary treatment must take values in {0, 1}")
            if not (np.any(d == 1.0) and np.any(d == 0.0)):
                raise DatasetError("binary treatment needs at least one treated and one control row")

        missing = np.isnan(y)
        if np.any(missing):
            allowed = target if target is not None else np.zeros(n, dtype=bool)
            if np.any(missing & ~allowed):
                bad = int(np.flatnonzero(missing & ~allowed)[0])
                raise DatasetError(f"outcome missing on row {bad}, which is not a Target row")
        if not np.all(np.isfinite(d)) or not np.all(np.isfinite(z)):
            raise DatasetError("treatment and covariates must be finite")

        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "d", _frozen(d))
        object.__setattr__(self, "z", _frozen(z))
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "treatment", kind)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return self.z.shape[1]

    @property
    def is_binary(self) -> bool:
        return self.treatment == "binary"

    @property
    def has_roles(self) -> bool:
        return self.target is not None

    @property
    def target_mask(self) -> NDArray:
        if self.target is None:
            return np.zeros(self.n, dtype=bool)
        return self.target

    @property
    def source_mask(self) -> NDArray:
        return ~self.target_mask

    @property
    def labeled_mask(self) -> NDArray:
        return ~np.isnan(self.y)

    def treated_fraction(self) -> float:
        return float(np.mean(self.d == 1.0))

    def subset(self, idx: NDArray) -> "Dataset":
        idx = np.asarray(idx)
        target = None if self.target is None else self.target[idx]
        kind = self.treatment
        return Dataset(self.y[idx], self.d[idx], self.z[idx], target, _subset_kind(kind, self.d[idx]))

    def concat(self, other: "Dataset") -> "Dataset":
        if self.has_roles != other.has_roles:
            raise DatasetError("cannot concatenate role-tagged and untagged datasets")
        target = None
        if self.has_roles:
            target = np.concatenate([self.target_mask, other.target_mask])
        return Dataset(
            np.concatenate([self.y, other.y]),
            np.concatenate([self.d, other.d]),
            np.vstack([self.z, other.z]),
            target,
            self.treatment,
        )


def _subset_kind(kind: str, d: NDArray) -> str:
    # A binary subset lacking an arm is still binary-valued; let callers decide.
    if kind == "binary" and not (np.any(d == 1.0) and np.any(d == 0.0)):
        return "continuous"
    return kind


# ---------------------------------------------------------------------------
# Bases
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _monomials(nvars: int, degree: int, intercept: bool) -> tuple[tuple[int, ...], ...]:
    """Exponent vectors ordered by total degree; within a degree, mixed terms precede pure powers."""
    out: list[tuple[int, ...]] = []
    if intercept:
        out.append((0,) * nvars)
    for k in range(1, degree + 1):
        combos = list(itertools.combinations_with_replacement(range(nvars), k))
        mixed = [c for c in combos if len(set(c)) > 1]
        pure = [c for c in combos if len(set(c)) == 1]
        for c in mixed + pure:
            e = [0] * nvars
            for v in c:
                e[v] += 1
            out.append(tuple(e))
    return tuple(out)


@dataclass(frozen=True)
class BasisSpec:
    """Feature map specification.

    kind is one of ``"raw"`` (intercept plus raw covariates), ``"poly"``
    (all monomials up to ``degree``, optionally in ``(d, z)``) or ``"split"``
    (``(1[d=1] phi(z), 1[d=0] phi(z))`` over an ``inner`` z-basis).
    """

    kind: str
    q: int
    degree: int = 1
    includes_treatment: bool = False
    intercept: bool = True
    inner: Optional["BasisSpec"] = None

    def __post_init__(self) -> None:
        if self.kind not in ("raw", "poly", "split"):
            raise BasisError(f"unknown basis kind {self.kind!r}")
        if self.q < 0:
            raise BasisError("q must be non-negative")
        if self.kind == "split":
            if self.inner is None or self.inner.includes_treatment:
                raise BasisError("split basis needs an inner basis over z only")
            if self.inner.q != self.q:
                raise BasisError("inner basis covariate count differs")
        if self.kind == "poly" and self.degree < 0:
            raise BasisError("degree must be non-negative")
        if self.p < 1:
            raise BasisError("basis must have at least one coordinate")

    @property
    def p(self) -> int:
        if self.kind == "raw":
            return self.q + int(self.intercept)
        if self.kind == "split":
            return 2 * self.inner.p
        return len(self._exponents)

    @property
    def depends_on_treatment(self) -> bool:
        return self.kind == "split" or self.includes_treatment

    @property
    def d_differentiable(self) -> bool:
        return self.kind == "poly" and self.includes_treatment

    @property
    def _exponents(self) -> tuple[tuple[int, ...], ...]:
        nvars = self.q + int(self.includes_treatment)
        return _monomials(nvars, self.degree, self.intercept)

    def token(self) -> str:
        if self.kind == "raw":
            return "raw" if self.intercept else "raw:noint"
        if self.kind == "split":
            return "split:" + self.inner.token()
        tok = f"poly:{self.degree}"
        if self.includes_treatment:
            tok += ":d"
        if not self.intercept:
            tok += ":noint"
        return tok


def raw_basis(q: int, intercept: bool = True) -> BasisSpec:
    return BasisSpec("raw", q, intercept=intercept)


def polynomial_basis(q: int, degree: int, includes_treatment: bool = False, intercept: bool = True) -> BasisSpec:
    return BasisSpec("poly", q, degree=degree, includes_treatment=includes_treatment, intercept=intercept)


def intercept_basis(q: int) -> BasisSpec:
    return polynomial_basis(q, 0)


def treatment_split(inner: BasisSpec) -> BasisSpec:
    return BasisSpec("split", inner.q, inner=inner)


def parse_basis(token: str, q: int) -> BasisSpec:
    """Parse tokens such as ``raw``, ``poly:2:d``, ``split:raw`` or ``split:poly:0``."""
    parts = token.strip().split(":")
    head = parts[0]
    if head == "split":
        return treatment_split(parse_basis(":".join(parts[1:]), q))
    flags = set(parts[2:]) if head == "poly" else set(parts[1:])
    unknown = flags - {"d", "noint"}
    if unknown:
        raise BasisError(f"bad basis token {token!r}")
    if head == "raw":
        if "d" in flags:
            raise BasisError("raw basis does not take the treatment flag")
        return raw_basis(q, intercept="noint" not in flags)
    if head == "poly":
        try:
            degree = int(parts[1])
        except (IndexError, ValueError):
            raise BasisError(f"bad basis token {token!r}") from None
        return polynomial_basis(q, degree, includes_treatment="d" in flags, intercept="noint" not in flags)
    raise BasisError(f"bad basis token {token!r}")


def _as_rows(basis: BasisSpec, d, Z) -> tuple[NDArray, NDArray]:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z.reshape(1, -1) if basis.q > 1 or Z.shape[0] == basis.q else Z.reshape(-1, 1)
    if Z.shape[1] != basis.q:
        raise BasisError(f"basis expects {basis.q} covariates, got {Z.shape[1]}")
    d = np.broadcast_to(np.asarray(d, dtype=float), (Z.shape[0],))
    return d, Z


def design(basis: BasisSpec, d, Z) -> NDArray:
    """Feature matrix with one row per point ``(d_i, Z_i)``."""
    d, Z = _as_rows(basis, d, Z)
    n = Z.shape[0]
    if basis.kind == "raw":
        cols = [np.ones((n, 1))] if basis.intercept else []
        return np.hstack(cols + [Z]) if cols or basis.q else np.empty((n, 0))
    if basis.kind == "split":
        inner = design(basis.inner, 0.0, Z)
        one = (d == 1.0)[:, None]
        zero = (d == 0.0)[:, None]
        return np.hstack([one * inner, zero * inner])
    V = np.column_stack([d, Z]) if basis.includes_treatment else Z
    E = basis._exponents
    out = np.empty((n, len(E)))
    for j, e in enumerate(E):
        col = np.ones(n)
        for v, k in enumerate(e):
            if k:
                col = col * V[:, v] ** k
        out[:, j] = col
    return out


def design_dderiv(basis: BasisSpec, d, Z) -> NDArray:
    """Coordinate-wise derivative of :func:`design` with respect to ``d``."""
    if not basis.d_differentiable:
        raise BasisError(
            f"basis {basis.token()!r} is not analytically differentiable in the treatment"
        )
    d, Z = _as_rows(basis, d, Z)
    n = Z.shape[0]
    V = np.column_stack([d, Z])
    E = basis._exponents
    out = np.zeros((n, len(E)))
    for j, e in enumerate(E):
        if e[0] == 0:
            continue
        col = np.full(n, float(e[0]))
        for v, k in enumerate(e):
            kk = k - 1 if v == 0 else k
            if kk:
                col = col * V[:, v] ** kk
        out[:, j] = col
    return out


def evaluate_basis(basis: BasisSpec, d: float, z: Sequence[float]) -> NDArray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.ndim != 1 or z.shape[0] != basis.q:
        raise BasisError(f"basis expects {basis.q} covariates, got shape {z.shape}")
    return design(basis, np.array([d]), z.reshape(1, -1))[0]


def evaluate_basis_dderiv(basis: BasisSpec, d: float, z: Sequence[float]) -> NDArray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.ndim != 1 or z.shape[0] != basis.q:
        raise BasisError(f"basis expects {basis.q} covariates, got shape {z.shape}")
    return design_dderiv(basis, np.array([d]), z.reshape(1, -1))[0]


# ---------------------------------------------------------------------------
# Fitted functions
# ---------------------------------------------------------------------------

LINKS = ("identity", "inv_propensity_logistic", "softplus_plus_one", "softplus_positive", "exp")


def softplus(s: NDArray) -> NDArray:
    return np.logaddexp(0.0, s)


def sigmoid(s: NDArray) -> NDArray:
    out = np.empty_like(s, dtype=float)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True, eq=False)
class FittedFunction:
    """A coefficient vector paired with a basis and a link.

    ``inv_propensity_logistic`` returns the per-arm inverse propensity:
    ``1/pi(z)`` at ``d = 1`` and ``1/(1 - pi(z))`` at ``d = 0`` with
    ``pi(z) = logistic(Phi(z)'beta)``.
    """

    beta: NDArray
    basis: BasisSpec
    link: str = "identity"

    def __post_init__(self) -> None:
        beta = _frozen(np.asarray(self.beta, dtype=float).ravel())
        if beta.shape[0] != self.basis.p:
            raise BasisError(f"beta has length {beta.shape[0]}, basis has {self.basis.p}")
        if self.link not in LINKS:
            raise BasisError(f"unknown link {self.link!r}")
        if self.link == "inv_propensity_logistic" and self.basis.depends_on_treatment:
            raise BasisError("inverse-propensity link needs a z-only basis")
        object.__setattr__(self, "beta", beta)

    def index(self, d, Z) -> NDArray:
        return design(self.basis, d, Z) @ self.beta

    def predict(self, d, Z) -> NDArray:
        s = self.index(d, Z)
        if self.link == "identity":
            return s
        if self.link == "inv_propensity_logistic":
            d, _ = _as_rows(self.basis, d, Z)
            s = np.clip(s, -LOGIT_CAP, LOGIT_CAP)
            return np.where(d == 1.0, 1.0 + np.exp(-s), 1.0 + np.exp(s))
        if self.link == "softplus_plus_one":
            return 1.0 + softplus(s)
        if self.link == "softplus_positive":
            return softplus(s) + SOFTPLUS_FLOOR
        return np.exp(s)

    def predict_dderiv(self, d, Z) -> NDArray:
        if self.link != "identity":
            raise BasisError("treatment derivative is only available for the identity link")
        return design_dderiv(self.basis, d, Z) @ self.beta

    def propensity(self, Z) -> NDArray:
        if self.link != "inv_propensity_logistic":
            raise BasisError("propensity is defined only for the inverse-propensity link")
        s = np.clip(self.index(0.0, Z), -LOGIT_CAP, LOGIT_CAP)
        return sigmoid(s)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def read_csv(path: str | Path) -> Dataset:
    """Read ``y, d, z1..zq[, role]`` columns; empty or ``nan`` outcomes become NaN."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file, header row required") from None
        rows = list(reader)
    for col in ("y", "d"):
        if col not in header:
            raise DatasetError(f"{path}: missing required column '{col}'")
    zcols = sorted(
        (h for h in header if h.startswith("z") and h[1:].isdigit()), key=lambda h: int(h[1:])
    )
    expected = [f"z{j}" for j in range(1, len(zcols) + 1)]
    if zcols != expected:
        missing = sorted(set(expected) - set(zcols))
        raise DatasetError(f"{path}: covariate columns must be z1..zq, missing {missing}")
    pos = {h: i for i, h in enumerate(header)}
    has_role = "role" in pos

    def num(text: str, line: int, col: str) -> float:
        text = text.strip()
        if text == "" or text.lower() == "nan":
            return math.nan
        try:
            return float(text)
        except ValueError:
            raise DatasetError(f"{path}:{line}: column '{col}' has non-numeric value {text!r}") from None

    y, d, role = [], [], []
    Z = np.empty((len(rows), len(zcols)))
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise DatasetError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        y.append(num(row[pos["y"]], line, "y"))
        d.append(num(row[pos["d"]], line, "d"))
        for j, c in enumerate(zcols):
            Z[i, j] = num(row[pos[c]], line, c)
        if has_role:
            r = row[pos["role"]].strip().lower()
            if r not in ("source", "target"):
                raise DatasetError(f"{path}:{line}: role must be 'source' or 'target', got {r!r}")
            role.append(r == "target")
    target = np.array(role, dtype=bool) if has_role else None
    return Dataset(np.array(y), np.array(d), Z, target)


def write_csv(data: Dataset, path: str | Path) -> None:
    header = ["y", "d"] + [f"z{j}" for j in range(1, data.q + 1)]
    if data.has_roles:
        header.append("role")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(data.n):
            y = "" if np.isnan(data.y[i]) else repr(float(data.y[i]))
            row = [y, repr(float(data.d[i]))] + [repr(float(v)) for v in data.z[i]]
            if data.has_roles:
                row.append("target" if data.target[i] else "source")
            w.writerow(row)
