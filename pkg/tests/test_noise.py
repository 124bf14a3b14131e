import numpy as np
import pytest

from uavckm.noise import CEP_TO_SIGMA, CepModel, perturb


def test_zero_cep_is_identity():
    rng = np.random.default_rng(0)
    pos = np.array([10.0, 20.0, 30.0])
    out = perturb(pos, CepModel(0.0), rng)
    assert np.array_equal(out, pos)


def test_sigma_value():
    assert CepModel(5.0).sigma == pytest.approx(5.0 / 0.6745, rel=1e-12)
    assert CepModel(5.0).sigma == pytest.approx(7.4129, abs=1e-4)
    assert CEP_TO_SIGMA == pytest.approx(1.48258, abs=1e-5)


def test_negative_cep_rejected():
    with pytest.raises(ValueError):
        CepModel(-1.0)


def test_per_axis_median_is_cep():
    # the defining property: half of per-axis errors fall within the CEP
    rng = np.random.default_rng(7)
    model = CepModel(5.0)
    pos = np.zeros(3)
    draws = np.array([perturb(pos, model, rng) for _ in range(100_000)])
    for axis in range(3):
        frac = np.mean(np.abs(draws[:, axis]) <= 5.0)
        assert abs(frac - 0.5) <= 0.01


def test_axes_uncorrelated():
    rng = np.random.default_rng(8)
    model = CepModel(5.0)
    draws = np.array([perturb(np.zeros(3), model, rng) for _ in range(100_000)])
    corr = np.corrcoef(draws.T)
    for i in range(3):
        for j in range(3):
            if i != j:
                assert abs(corr[i, j]) < 0.02


def test_deterministic_under_seed():
    a = perturb(np.ones(3), CepModel(3.0), np.random.default_rng(42))
    b = perturb(np.ones(3), CepModel(3.0), np.random.default_rng(42))
    assert np.array_equal(a, b)
