import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from directdml.types import (
    BasisError,
    Dataset,
    DatasetError,
    FittedFunction,
    design,
    evaluate_basis,
    evaluate_basis_dderiv,
    parse_basis,
    polynomial_basis,
    raw_basis,
    read_csv,
    treatment_split,
    write_csv,
)


class TestEvaluateBasis:
    def test_raw_intercept(self):
        npt.assert_array_equal(evaluate_basis(raw_basis(1), 0.0, [0.5]), [1.0, 0.5])

    def test_raw_ignores_treatment(self):
        b = raw_basis(1)
        npt.assert_array_equal(evaluate_basis(b, 1.0, [0.5]), evaluate_basis(b, 0.0, [0.5]))

    def test_split_zeroes_control_block(self):
        b = treatment_split(raw_basis(1))
        npt.assert_array_equal(evaluate_basis(b, 1.0, [2.0]), [1.0, 2.0, 0.0, 0.0])
        npt.assert_array_equal(evaluate_basis(b, 0.0, [2.0]), [0.0, 0.0, 1.0, 2.0])

    def test_polynomial_degree2_with_treatment(self):
        b = polynomial_basis(1, 2, includes_treatment=True)
        npt.assert_allclose(evaluate_basis(b, 0.5, [2.0]), [1.0, 0.5, 2.0, 1.0, 0.25, 4.0])

    def test_first_coordinate_is_intercept(self):
        rng = np.random.default_rng(0)
        for b in (raw_basis(3), polynomial_basis(3, 3), polynomial_basis(3, 2, True)):
            assert evaluate_basis(b, rng.normal(), rng.normal(size=3))[0] == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(BasisError):
            evaluate_basis(raw_basis(2), 0.0, [1.0])
        with pytest.raises(BasisError):
            design(raw_basis(2), 0.0, np.ones((4, 3)))

    def test_polynomial_dimension(self):
        # monomials of degree <= 3 in (d, z1, z2): C(3 + 3, 3) = 20
        assert polynomial_basis(2, 3, True).p == 20
        assert polynomial_basis(2, 0).p == 1

    def test_opt_out_of_intercept(self):
        npt.assert_array_equal(evaluate_basis(raw_basis(1, intercept=False), 0.0, [3.0]), [3.0])

    def test_deterministic(self):
        b = polynomial_basis(2, 3, True)
        a1 = evaluate_basis(b, 0.3, [0.1, -0.7])
        a2 = evaluate_basis(b, 0.3, [0.1, -0.7])
        assert a1.tobytes() == a2.tobytes()


class TestDderiv:
    def test_degree2_example(self):
        b = polynomial_basis(1, 2, includes_treatment=True)
        npt.assert_allclose(evaluate_basis_dderiv(b, 0.5, [2.0]), [0.0, 1.0, 0.0, 2.0, 1.0, 0.0])

    def test_linear_coordinate_is_one(self):
        b = polynomial_basis(2, 1, includes_treatment=True)
        for d in (-3.0, 0.0, 7.5):
            assert evaluate_basis_dderiv(b, d, [0.2, 0.4])[1] == 1.0

    def test_rejects_basis_without_treatment(self):
        for b in (raw_basis(1), polynomial_basis(1, 2), treatment_split(raw_basis(1))):
            with pytest.raises(BasisError):
                evaluate_basis_dderiv(b, 0.5, [1.0])

    def test_matches_central_differences(self):
        rng = np.random.default_rng(1)
        b = polynomial_basis(2, 3, includes_treatment=True)
        h = 1e-5
        for _ in range(100):
            d, z = rng.normal(), rng.normal(size=2)
            an = evaluate_basis_dderiv(b, d, z)
            fd = (evaluate_basis(b, d + h, z) - evaluate_basis(b, d - h, z)) / (2 * h)
            assert np.all(np.abs(an - fd) <= 1e-6 * (1 + np.abs(an)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=2))
def test_split_block_orthogonality(z):
    b = treatment_split(polynomial_basis(2, 2))
    assert float(evaluate_basis(b, 1.0, z) @ evaluate_basis(b, 0.0, z)) == 0.0


class TestParseBasis:
    @pytest.mark.parametrize("tok", ["raw", "raw:noint", "poly:2", "poly:3:d", "poly:0", "split:raw", "split:poly:2"])
    def test_round_trip(self, tok):
        assert parse_basis(tok, 2).token() == tok

    @pytest.mark.parametrize("tok", ["cubic", "poly", "poly:x", "raw:d", "split:poly:1:d"])
    def test_rejects(self, tok):
        with pytest.raises(BasisError):
            parse_basis(tok, 2)


class TestFittedFunction:
    def test_inverse_propensity_range(self):
        rng = np.random.default_rng(2)
        Z = rng.normal(size=(50, 2))
        f = FittedFunction(rng.normal(size=3) * 3, raw_basis(2), "inv_propensity_logistic")
        assert np.all(f.predict(1.0, Z) > 1.0) and np.all(f.predict(0.0, Z) > 1.0)
        pi = f.propensity(Z)
        npt.assert_allclose(f.predict(1.0, Z), 1 / pi)
        npt.assert_allclose(f.predict(0.0, Z), 1 / (1 - pi))

    def test_softplus_links_positive(self):
        Z = np.linspace(-50, 50, 11).reshape(-1, 1)
        f = FittedFunction(np.array([0.0, 1.0]), raw_basis(1), "softplus_positive")
        assert np.all(f.predict(0.0, Z) > 0.0)
        g = FittedFunction(np.array([0.0, 1.0]), raw_basis(1), "softplus_plus_one")
        assert np.all(g.predict(0.0, Z) >= 1.0)
        # strictly above one wherever exp(s) is representable next to 1
        inner = np.linspace(-30, 50, 9).reshape(-1, 1)
        assert np.all(g.predict(0.0, inner) > 1.0)

    def test_identity_dderiv(self):
        b = polynomial_basis(1, 1, True)
        f = FittedFunction(np.array([0.0, 3.0, 1.0]), b)  # 3 d + z
        npt.assert_allclose(f.predict_dderiv(np.array([0.1, 2.0]), np.array([[1.0], [5.0]])), [3.0, 3.0])

    def test_rejects_wrong_length(self):
        with pytest.raises(BasisError):
            FittedFunction(np.zeros(3), raw_basis(1))


class TestDataset:
    def test_lengths_must_agree(self):
        with pytest.raises(DatasetError):
            Dataset(np.zeros(3), np.zeros(2), np.zeros((3, 1)))

    def test_binary_needs_both_arms(self):
        with pytest.raises(DatasetError):
            Dataset(np.zeros(3), np.ones(3), np.zeros((3, 1)), treatment="binary")

    def test_binary_values(self):
        with pytest.raises(DatasetError):
            Dataset(np.zeros(3), np.array([0.0, 1.0, 2.0]), np.zeros((3, 1)), treatment="binary")

    def test_detects_kind(self):
        assert Dataset(np.zeros(2), [0.0, 1.0], np.zeros((2, 1))).is_binary
        assert not Dataset(np.zeros(2), [0.5, 1.0], np.zeros((2, 1))).is_binary

    def test_missing_outcome_only_on_target(self):
        y = np.array([1.0, np.nan])
        Dataset(y, np.zeros(2), np.zeros((2, 1)), np.array([False, True]))
        with pytest.raises(DatasetError):
            Dataset(y, np.zeros(2), np.zeros((2, 1)), np.array([True, False]))
        with pytest.raises(DatasetError):
            Dataset(y, np.array([0.0, 1.0]), np.zeros((2, 1)))

    def test_immutable(self):
        ds = Dataset(np.zeros(2), [0.0, 1.0], np.zeros((2, 1)))
        with pytest.raises(ValueError):
            ds.y[0] = 1.0


class TestCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        ds = Dataset(np.array([1.5, np.nan, -2.0]), np.zeros(3), rng.normal(size=(3, 2)),
                     np.array([False, True, False]))
        path = tmp_path / "d.csv"
        write_csv(ds, path)
        back = read_csv(path)
        npt.assert_array_equal(back.z, ds.z)
        npt.assert_array_equal(back.target_mask, ds.target_mask)
        assert np.isnan(back.y[1]) and back.y[0] == 1.5

    def test_missing_column_named(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("d,z1\n0,1\n1,2\n")
        with pytest.raises(DatasetError, match="'y'"):
            read_csv(path)

    def test_bad_number_names_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("y,d,z1\n1,0,1\n2,1,1,5\n")
        with pytest.raises(DatasetError, match=":3:"):
            read_csv(path)

    def test_bad_role(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("y,d,z1,role\n1,0,1,source\n2,0,1,train\n")
        with pytest.raises(DatasetError, match="role"):
            read_csv(path)
