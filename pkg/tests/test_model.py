import numpy as np
import pytest

from rsjd import (
    HybridState,
    ModelSpec,
    RateMatrixSpec,
    TruncationError,
    example51,
    example52,
    q_row_truncated,
    validate_model,
)
from rsjd.model import RowTruncator


def geometric_tail(ratio, start):
    # sum_{l >= start} ratio^l
    return ratio ** start / (1.0 - ratio)


def zero_rates():
    def rate(x, k, l):
        shape = np.broadcast(np.asarray(x)[..., 0], np.asarray(k), np.asarray(l)).shape
        return np.zeros(shape)

    return RateMatrixSpec(rate=rate, tail_bound=lambda k, L: 0.0)


def zero_model(d=1):
    return ModelSpec(
        d=d,
        drift=lambda x, k: np.zeros_like(np.asarray(x, dtype=float)),
        sigma=lambda x, k: np.zeros(np.asarray(x, dtype=float).shape + (d,)),
        rates=zero_rates(),
        name="zero",
    )


class TestHybridState:
    def test_basic(self):
        s = HybridState(np.array([1.0, 2.0]), 3)
        assert s.d == 2 and s.k == 3

    def test_regime_positive(self):
        with pytest.raises(ValueError):
            HybridState(np.array([0.0]), 0)

    def test_finite(self):
        with pytest.raises(ValueError):
            HybridState(np.array([np.inf]), 1)


class TestRowTruncation:
    def test_example51_row_sum_origin(self):
        # independent oracle: q_1l(0) = 3^-(1+l), so the row sum is
        # (1/3) * sum_{l>=2} 3^-l = (1/3) * (1/6) = 1/18
        expected = geometric_tail(1.0 / 3.0, 2) / 3.0
        partial, tail = q_row_truncated(example51().rates, np.array([0.0]), 1, 1e-12)
        total = sum(v for _, v in partial) + tail
        assert total == pytest.approx(expected, rel=1e-10)
        assert expected == pytest.approx(1.0 / 18.0)

    def test_example52_row_sum_origin(self):
        # (3/2) * sum_{l>=2} 3^-l = 1/4
        partial, tail = q_row_truncated(example52().rates, np.zeros(2), 1, 1e-12)
        assert sum(v for _, v in partial) + tail == pytest.approx(0.25, rel=1e-10)

    def test_zero_rates_empty(self):
        partial, tail = q_row_truncated(zero_rates(), np.array([0.0]), 1, 1e-10)
        assert partial == [] and tail == 0.0

    def test_certificate(self):
        partial, tail = q_row_truncated(example51().rates, np.array([2.0]), 3, 1e-8)
        s = sum(v for _, v in partial)
        assert tail <= 1e-8 * (s + tail)

    def test_partial_sums_monotone_and_bounded(self):
        rates = example51().rates
        x = np.array([1.5])
        partial, tail = q_row_truncated(rates, x, 2, 1e-12)
        csum = np.cumsum([v for _, v in partial])
        assert np.all(np.diff(csum) >= 0)
        total = csum[-1] + tail
        for cut in range(1, len(csum)):
            assert csum[cut] <= total + 1e-15

    def test_missing_tail_bound(self):
        bad = RateMatrixSpec(rate=lambda x, k, l: np.ones(np.shape(l)), tail_bound=None)
        with pytest.raises(TruncationError):
            q_row_truncated(bad, np.array([0.0]), 1, 1e-6)

    def test_batched_rows_match_pointwise(self):
        rates = example51().rates
        trunc = RowTruncator(rates, 1e-10)
        xs = np.array([[0.0], [1.0], [-2.0]])
        ks = np.array([1, 2, 5])
        rows, ls = trunc.rows(xs, ks)
        for i in range(3):
            partial, _ = q_row_truncated(rates, xs[i], int(ks[i]), 1e-10,
                                         l_start=len(ls))
            dense = np.zeros(len(ls))
            for l, v in partial:
                if l <= len(ls):
                    dense[l - 1] = v
            assert np.allclose(rows[i], dense, rtol=1e-12, atol=1e-300)


class TestValidateModel:
    def probes(self, spec, lo=-10.0, hi=10.0, n=9, kmax=8):
        xs = np.linspace(lo, hi, n)
        if spec.d == 1:
            return [HybridState(np.array([v]), k) for v in xs for k in range(1, kmax + 1)]
        return [HybridState(np.array([v, w]), k)
                for v in xs for w in xs[::2] for k in range(1, kmax + 1)]

    def test_example51_passes(self):
        spec = example51()
        rep = validate_model(spec, self.probes(spec), quad_crosscheck=2)
        assert rep.passed, rep.summary()

    def test_example51_ellipticity_at_least_one(self):
        # a(x,k) = (|x|^{2/3}+1)^2 >= 1 everywhere, floor declared as 1
        spec = example51()
        rep = validate_model(spec, self.probes(spec))
        check = {c.name: c for c in rep.checks}["ellipticity-floor"]
        assert check.margin <= 1e-10

    def test_example51_growth_kappa4(self):
        spec = example51()
        rep = validate_model(spec, self.probes(spec))
        check = {c.name: c for c in rep.checks}["growth-diffusion-jump"]
        assert check.passed and check.margin <= 0.0

    def test_zero_model_growth_trivial(self):
        spec = ModelSpec(
            d=1,
            drift=zero_model().drift,
            sigma=zero_model().sigma,
            rates=zero_rates(),
            growth_constant=1e-6,
        )
        rep = validate_model(spec, self.probes(spec, kmax=2))
        assert rep.passed

    def test_example52_passes(self):
        spec = example52(1.0)
        rep = validate_model(spec, self.probes(spec, lo=-5, hi=5, n=5, kmax=5),
                             quad_crosscheck=2)
        assert rep.passed, rep.summary()

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            validate_model(example51(), [HybridState(np.zeros(2), 1)])

    def test_nonfinite_coefficient_reported(self):
        spec = ModelSpec(
            d=1,
            drift=lambda x, k: np.where(np.asarray(x) > 5, np.inf, 0.0),
            sigma=zero_model().sigma,
            rates=zero_rates(),
        )
        rep = validate_model(spec, [HybridState(np.array([10.0]), 1)])
        assert not rep.passed

    def test_pure(self):
        spec = example51()
        probes = self.probes(spec, n=5, kmax=3)
        a = validate_model(spec, probes).to_dict()
        b = validate_model(spec, probes).to_dict()
        assert a == b

    def test_rate_uniform_bound_checked(self):
        spec = example51()
        rep = validate_model(spec, self.probes(spec, n=5, kmax=4))
        names = [c.name for c in rep.checks]
        assert "rate-uniform-bound" in names
        assert {c.name: c for c in rep.checks}["rate-uniform-bound"].passed


class TestModulusProbe:
    def test_example51_closed_forms(self):
        # c is linear in x, so the jump increment integral is exactly
        # |x - z|^2 / k^2; the rate-row increment obeys the 3/4 slope
        from rsjd.analysis import modulus_probe
        spec = example51()
        pairs = [(np.array([0.0]), np.array([0.5])), (np.array([1.0]), np.array([1.25]))]
        probe = modulus_probe(spec, 2, pairs)
        assert np.allclose(probe["jump_sq"], probe["separation"] ** 2 / 4.0, rtol=1e-8)
        assert np.all(probe["rate_row"] <= 0.75 * probe["separation"] + 1e-9)
        assert np.all(probe["drift_pairing"] <= 0.0)
