import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from packhealth.ecm import OperatingPoint
from packhealth.errors import ConfigError, ContractViolation
from packhealth.kernels import (
    Hyperparameters, gram, k_combined, k_se_ard, k_se_ard_diag, k_wv,
)

HP = Hyperparameters()
ops_arrays = hnp.arrays(np.float64, st.tuples(st.integers(1, 20), st.just(3)),
                        elements=st.floats(-200, 100))
time_arrays = hnp.arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 2000))
# one-second resolution keeps t**3 clear of floating-point underflow
day_arrays = hnp.arrays(np.float64, st.integers(1, 20),
                        elements=st.integers(0, 2000 * 86400).map(lambda s: s / 86400.0))


class TestHyperparameters:
    def test_defaults(self):
        assert HP.se_output_scale == pytest.approx(1e-6)
        assert HP.length_scales.tolist() == [50.0, 20.0, 10.0]
        assert HP.wv_output_scale == pytest.approx(1e-8)
        assert HP.noise_var == pytest.approx(2.5e-7)

    @pytest.mark.parametrize("field", ["se_output_scale", "len_current", "len_soc", "len_temp",
                                       "wv_output_scale"])
    def test_positive(self, field):
        with pytest.raises(ContractViolation):
            HP.replace(**{field: 0.0})

    def test_noise_may_be_zero(self):
        assert HP.replace(noise_var=0.0).noise_var == 0.0
        with pytest.raises(ContractViolation):
            HP.replace(noise_var=-1e-9)

    def test_log_round_trip(self):
        back = Hyperparameters.from_log_vector(HP.to_log_vector())
        for a, b in zip(back.to_dict().values(), HP.to_dict().values()):
            assert a == pytest.approx(b, rel=1e-14)

    def test_save_load(self, tmp_path):
        path = tmp_path / "hp.json"
        HP.replace(len_temp=7.5).save(path)
        assert json.loads(path.read_text())["units"]["len_temp"] == "degC"
        assert Hyperparameters.load(path) == HP.replace(len_temp=7.5)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            Hyperparameters.from_dict({"bogus": 1.0})


class TestSeArd:
    def test_identical(self):
        op = OperatingPoint(-50.0, 70.0, 25.0)
        assert k_se_ard(op, op, HP)[0, 0] == HP.se_output_scale

    def test_one_length_scale(self):
        a = np.array([-50.0, 70.0, 25.0])
        k = k_se_ard(a, a + [HP.len_current, 0, 0], HP)[0, 0]
        assert k == pytest.approx(HP.se_output_scale * math.exp(-0.5), rel=1e-14)

    def test_all_length_scales(self):
        a = np.array([-50.0, 70.0, 25.0])
        k = k_se_ard(a, a + HP.length_scales, HP)[0, 0]
        assert k == pytest.approx(HP.se_output_scale * math.exp(-1.5), rel=1e-14)

    def test_diag(self):
        assert k_se_ard_diag(np.zeros((4, 3)), HP).tolist() == [HP.se_output_scale] * 4

    def test_bad_shape(self):
        with pytest.raises(ContractViolation):
            k_se_ard(np.zeros((2, 2)), np.zeros((2, 2)), HP)

    @given(ops_arrays, ops_arrays)
    def test_bounded_and_symmetric(self, a, b):
        k = k_se_ard(a, b, HP)
        assert np.all(k >= 0) and np.all(k <= HP.se_output_scale)
        np.testing.assert_array_equal(k, k_se_ard(b, a, HP).T)
        same = np.all(a[:, None, :] == b[None, :, :], axis=-1)
        assert np.all(k[same] == HP.se_output_scale)

    def test_strictly_below_peak_when_distinct(self):
        a = np.array([[-50.0, 70.0, 25.0]])
        assert 0 < k_se_ard(a, a + [1.0, 0, 0], HP)[0, 0] < HP.se_output_scale


class TestWienerVelocity:
    hp1 = HP.replace(wv_output_scale=1.0)

    @pytest.mark.parametrize("tau", [0.5, 1.0, 7.0])
    def test_diagonal(self, tau):
        assert k_wv(tau, tau, self.hp1)[0, 0] == pytest.approx(tau**3 / 3, rel=1e-15)

    def test_one_two(self):
        assert k_wv(1.0, 2.0, self.hp1)[0, 0] == pytest.approx(5 / 6, rel=1e-15)

    def test_zero_at_origin(self):
        assert np.all(k_wv(0.0, np.array([0.0, 1.0, 100.0]), self.hp1) == 0.0)

    def test_negative_time(self):
        with pytest.raises(ContractViolation):
            k_wv(-1.0, 1.0, HP)

    @given(day_arrays)
    def test_diag_increasing(self, t):
        t = np.unique(t)
        d = np.diag(k_wv(t, t, self.hp1))
        assert np.all(np.diff(d) > 0) or t.size == 1


class TestCombined:
    def test_diag(self):
        op = np.array([-50.0, 70.0, 25.0])
        k = k_combined(3.0, op, 3.0, op, HP)[0, 0]
        assert k == pytest.approx(HP.wv_output_scale * 9.0 + HP.se_output_scale, rel=1e-14)

    def test_vanishes(self):
        k = k_combined(0.0, [-190.0, 41.0, 11.0], 0.0, [-6.0, 93.0, 99.0], HP)[0, 0]
        assert 0 <= k < 1e-12 * HP.se_output_scale

    def test_compositional(self, rng):
        t1, t2 = rng.uniform(0, 100, 6), rng.uniform(0, 100, 4)
        o1, o2 = rng.uniform(-100, 50, (6, 3)), rng.uniform(-100, 50, (4, 3))
        np.testing.assert_allclose(k_combined(t1, o1, t2, o2, HP),
                                   k_wv(t1, t2, HP) + k_se_ard(o1, o2, HP), rtol=1e-15)

    def test_gram_parts(self, rng):
        t, o = rng.uniform(0, 10, 5), rng.uniform(-100, 50, (5, 3))
        np.testing.assert_array_equal(gram(t, o, t, o, HP, "temporal"), k_wv(t, t, HP))
        np.testing.assert_array_equal(gram(t, o, t, o, HP, "spatial"), k_se_ard(o, o, HP))
        with pytest.raises(ContractViolation):
            gram(t, o, t, o, HP, "both")

    @given(time_arrays, st.data())
    def test_psd(self, t, data):
        ops = data.draw(hnp.arrays(np.float64, (t.size, 3), elements=st.floats(-200, 100)))
        for part in ("combined", "temporal", "spatial"):
            k = gram(t, ops, t, ops, HP, part)
            np.testing.assert_array_equal(k, k.T)
            tr = np.trace(k)
            assert np.linalg.eigvalsh(k).min() >= -1e-10 * max(tr, 1e-300)
