import numpy as np
import numpy.testing as npt
import pytest

from directdml.functional import (
    OracleTruth,
    TargetFunctional,
    m_apply,
    m_apply_basis,
    m_rows_basis,
    make_functional,
    oracle_representer,
)
from directdml.simulate import DgpSpec, enumerate_ame, enumerate_binary, enumerate_covshift, sample
from directdml.types import (
    BasisError,
    Dataset,
    DatasetError,
    FittedFunction,
    design,
    intercept_basis,
    polynomial_basis,
    raw_basis,
    treatment_split,
)

LIN = polynomial_basis(1, 1, includes_treatment=True)  # (1, d, z)


def _binary(n=6, seed=0):
    rng = np.random.default_rng(seed)
    d = np.array([1.0, 0.0] * (n // 2))
    return Dataset(rng.normal(size=n), d, rng.normal(size=(n, 1)))


class TestMApply:
    def test_ate_of_treatment(self):
        gamma = FittedFunction(np.array([0.0, 1.0, 0.0]), LIN)
        npt.assert_array_equal(m_apply(TargetFunctional("ate"), _binary(), gamma), np.ones(6))

    def test_att_rows(self):
        ds = _binary()
        gamma = FittedFunction(np.array([0.0, 1.0, 0.0]), LIN)
        out = m_apply(TargetFunctional("att", 0.5), ds, gamma)
        npt.assert_array_equal(out, np.where(ds.d == 1.0, 2.0, 0.0))

    def test_ame_linear(self):
        rng = np.random.default_rng(1)
        ds = Dataset(rng.normal(size=5), rng.normal(size=5), rng.normal(size=(5, 1)))
        gamma = FittedFunction(np.array([0.0, 3.0, 1.0]), LIN)
        npt.assert_allclose(m_apply(TargetFunctional("ame"), ds, gamma), np.full(5, 3.0))

    def test_ame_rejects_basis_without_treatment(self):
        rng = np.random.default_rng(1)
        ds = Dataset(rng.normal(size=5), rng.normal(size=5), rng.normal(size=(5, 1)))
        with pytest.raises(BasisError):
            m_apply(TargetFunctional("ame"), ds, FittedFunction(np.zeros(2), raw_basis(1)))
        with pytest.raises(BasisError):
            m_rows_basis(TargetFunctional("ame"), ds, raw_basis(1))

    def test_covshift_scores_target_rows(self):
        ds = Dataset(np.array([1.0, 2.0, np.nan, np.nan]), np.zeros(4), np.array([[0.0], [1.0], [2.0], [4.0]]),
                     np.array([False, False, True, True]))
        gamma = FittedFunction(np.array([0.0, 1.0]), raw_basis(1))
        npt.assert_array_equal(m_apply(TargetFunctional("covshift"), ds, gamma), [2.0, 4.0])

    def test_linearity(self):
        ds = sample(DgpSpec("ate_logistic", {"q": 2}), 50, 3)
        b = polynomial_basis(2, 2, True)
        rng = np.random.default_rng(4)
        b1, b2 = rng.normal(size=b.p), rng.normal(size=b.p)
        f = TargetFunctional("ate")
        lhs = m_apply(f, ds, FittedFunction(b1 + b2, b))
        rhs = m_apply(f, ds, FittedFunction(b1, b)) + m_apply(f, ds, FittedFunction(b2, b))
        assert np.max(np.abs(lhs - rhs)) <= 1e-12

    def test_basis_mean_matches_unit_functions(self):
        ds = sample(DgpSpec("ate_logistic", {"q": 2}), 40, 5)
        b = treatment_split(raw_basis(2))
        f = TargetFunctional("att", ds.treated_fraction())
        mbar = m_apply_basis(f, ds, b)
        for j in range(b.p):
            e = np.zeros(b.p)
            e[j] = 1.0
            assert mbar[j] == pytest.approx(m_apply(f, ds, FittedFunction(e, b)).mean(), abs=1e-15)


class TestMApplyBasis:
    def test_ate_split_intercept(self):
        npt.assert_allclose(m_apply_basis(TargetFunctional("ate"), _binary(), treatment_split(intercept_basis(1))),
                            [1.0, -1.0])

    def test_covshift_target_mean(self):
        ds = Dataset(np.array([1.0, 2.0, np.nan, np.nan]), np.zeros(4), np.array([[0.0], [1.0], [2.0], [4.0]]),
                     np.array([False, False, True, True]))
        npt.assert_allclose(m_apply_basis(TargetFunctional("covshift"), ds, raw_basis(1)), [1.0, 3.0])

    def test_ame_pure_z_coordinate(self):
        rng = np.random.default_rng(2)
        ds = Dataset(rng.normal(size=8), rng.normal(size=8), rng.normal(size=(8, 1)))
        b = polynomial_basis(1, 2, includes_treatment=True)  # 1, d, z, dz, d^2, z^2
        assert m_apply_basis(TargetFunctional("ame"), ds, b)[5] == 0.0


class TestOracle:
    def test_ate_constant_propensity(self):
        truth = OracleTruth(propensity=lambda Z: np.full(len(Z), 0.5))
        npt.assert_allclose(oracle_representer(TargetFunctional("ate"), truth, _binary()), [2, -2] * 3)

    def test_att_constant_propensity(self):
        truth = OracleTruth(propensity=lambda Z: np.full(len(Z), 0.5), p_treated=0.5)
        out = oracle_representer(TargetFunctional("att", 0.5), truth, _binary())
        npt.assert_allclose(out, [2, -2] * 3)

    def test_covshift_no_shift(self):
        ds = Dataset(np.array([1.0, np.nan]), np.zeros(2), np.zeros((2, 1)), np.array([False, True]))
        truth = OracleTruth(density_ratio=lambda Z: np.ones(len(Z)))
        npt.assert_array_equal(oracle_representer(TargetFunctional("covshift"), truth, ds), [1.0, 1.0])

    def test_rejects_overlap_violation(self):
        truth = OracleTruth(propensity=lambda Z: np.ones(len(Z)))
        with pytest.raises(ValueError, match="overlap"):
            oracle_representer(TargetFunctional("ate"), truth, _binary())

    def test_ate_sign(self):
        spec = DgpSpec("ate_logistic")
        ds = sample(spec, 200, 0)
        a = oracle_representer(TargetFunctional("ate"), spec.truth(), ds)
        npt.assert_array_equal(np.sign(a), 2 * ds.d - 1)


class TestRieszIdentity:
    """Exact population identity E[m(W, Phi_j)] = E[alpha0 Phi_j] on enumerated laws."""

    def _check(self, enum, f, basis, role=None):
        ds = enum.dataset()
        M = m_rows_basis(f, ds, basis)
        rows = f.terms(ds).rows
        Phi = design(basis, ds.d, ds.z)
        a0 = enum.alpha0(f)
        if role is None:
            lhs = np.array([enum.expect(M[:, j]) for j in range(basis.p)])
            rhs = np.array([enum.expect(a0 * Phi[:, j]) for j in range(basis.p)])
        else:
            full = np.zeros((ds.n, basis.p))
            full[rows] = M
            lhs = np.array([enum.expect(full[:, j], "target") for j in range(basis.p)])
            rhs = np.array([enum.expect(a0 * Phi[:, j], "source") for j in range(basis.p)])
        assert np.max(np.abs(lhs - rhs)) <= 1e-12

    def test_ate(self):
        enum = enumerate_binary(DgpSpec("discrete"))
        self._check(enum, TargetFunctional("ate"), polynomial_basis(1, 3, True))

    def test_att(self):
        enum = enumerate_binary(DgpSpec("discrete"))
        self._check(enum, TargetFunctional("att", enum.truth.p_treated), polynomial_basis(1, 3, True))

    def test_ame(self):
        self._check(enumerate_ame(), TargetFunctional("ame"), polynomial_basis(1, 3, True))

    def test_covshift(self):
        self._check(enumerate_covshift(), TargetFunctional("covshift"), polynomial_basis(1, 3), role="target")


class TestValidation:
    def test_att_needs_fraction(self):
        with pytest.raises(ValueError):
            TargetFunctional("att")
        with pytest.raises(ValueError):
            TargetFunctional("att", 1.0)

    def test_make_functional_freezes_fraction(self):
        ds = _binary()
        assert make_functional("att", ds).p_treated == 0.5

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            TargetFunctional("cate")

    def test_ame_needs_continuous(self):
        with pytest.raises(DatasetError):
            TargetFunctional("ame").validate(_binary())

    def test_covshift_needs_roles(self):
        with pytest.raises(DatasetError):
            TargetFunctional("covshift").validate(_binary())
