import logging
import math
import sys
import textwrap

import numpy as np
import pytest

from iwmfdiff.core import rng_stream
from iwmfdiff.diffusion import (SIGMA_0, DiffusionConfig, ExternalDenoiser, GaussianPriorDenoiser,
                                IdentityDenoiser, Purifier, chain_sigmas, chain_start, corrupt,
                                ddrm_denoise, default_schedule, purify, reverse_step)
from iwmfdiff.filters import FilterConfig, iwmf


def test_defaults():
    cfg = DiffusionConfig()
    assert (cfg.sigma_y, cfg.eta, cfg.eta_b) == (0.15, 0.85, 1.0)
    assert cfg.sigma_0 == SIGMA_0 == 0.0001
    assert len(cfg.schedule) == 100 and cfg.schedule[0] == pytest.approx(0.30)


@pytest.mark.parametrize("kwargs", [
    {"schedule": (0.3, 0.3, 0.1)}, {"schedule": (0.1, 0.2)}, {"schedule": (0.2, -0.1)},
    {"eta": 0.0}, {"eta": 1.2}, {"eta_b": 0.0}, {"sigma_y": -0.1},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        DiffusionConfig(**kwargs)


def test_corrupt():
    x = np.full((3, 300, 300), 0.5)
    assert np.array_equal(corrupt(x, 0.0, 1), x)
    y = corrupt(x, 0.15, seed=4)
    assert abs(np.std(y - x) / 0.15 - 1) < 0.01
    assert np.array_equal(y, corrupt(x, 0.15, seed=4))
    # no clamp
    assert y.min() < 0 or y.max() > 1


def test_chain_start_on_schedule_entry():
    sched = (0.3, 0.2, 0.15, 0.1, 0.05, 0.0001)
    y = np.zeros((1, 2, 2))
    x_t, idx = chain_start(y, DiffusionConfig(sigma_y=0.15, schedule=sched))
    assert idx == 2 and np.array_equal(x_t, y)
    _, idx = chain_start(y, DiffusionConfig(sigma_y=0.3, schedule=sched))
    assert idx == 0
    assert chain_sigmas(DiffusionConfig(sigma_y=0.3, schedule=sched)) == list(sched[1:])


def test_chain_start_nearest_entry_is_logged(caplog):
    sched = tuple(np.round(np.arange(0.3, 0.0, -0.001), 6)) + (0.0001,)
    with caplog.at_level(logging.INFO, logger="iwmfdiff.diffusion"):
        _, idx = chain_start(np.zeros((1, 1, 1)), DiffusionConfig(sigma_y=0.1494, schedule=sched))
    assert sched[idx] == pytest.approx(0.149)
    assert "index" in caplog.text


@pytest.mark.parametrize("sy", [0.0, 0.5, 0.00001])
def test_chain_start_rejects_out_of_range(sy):
    with pytest.raises(ValueError):
        chain_start(np.zeros((1, 1, 1)), DiffusionConfig(sigma_y=sy))


def test_every_executed_step_is_below_sigma_y():
    for sy in (0.05, 0.15, 0.2999):
        sig = chain_sigmas(DiffusionConfig(sigma_y=sy))
        assert sig and max(sig) < sy and sig[-1] == SIGMA_0


def test_reverse_step_mean_example():
    cfg = DiffusionConfig(sigma_y=0.15, eta=0.85)
    n = 200_000
    out = reverse_step(np.zeros((1, 1, n)), np.ones((1, 1, n)), 0.1, cfg, rng=3)
    expected = math.sqrt(1 - 0.85 ** 2) * 0.1 / 0.15
    assert expected == pytest.approx(0.35118, abs=1e-5)
    assert abs(out.mean() - expected) < 4 * 0.085 / math.sqrt(n)


def test_reverse_step_eta_one_ignores_y():
    cfg = DiffusionConfig(sigma_y=0.15, eta=1.0)
    x = rng_stream(0).uniform(0, 1, (1, 4, 4))
    a = reverse_step(x, np.zeros_like(x), 0.05, cfg, rng=1)
    b = reverse_step(x, np.ones_like(x), 0.05, cfg, rng=1)
    assert np.array_equal(a, b)


def test_reverse_step_small_sigma_returns_estimate():
    cfg = DiffusionConfig(sigma_y=0.15)
    x = rng_stream(0).uniform(0, 1, (1, 4, 4))
    out = reverse_step(x, np.zeros_like(x), 1e-12, cfg, rng=1)
    np.testing.assert_allclose(out, x, atol=1e-10)


def test_reverse_step_errors():
    x = np.zeros((1, 2, 2))
    with pytest.raises(ValueError):
        reverse_step(x, x, 0.15, DiffusionConfig(sigma_y=0.15))
    with pytest.raises(ValueError):
        reverse_step(x, x, 0.01, DiffusionConfig(sigma_y=0.0))


def test_reverse_step_variance():
    cfg = DiffusionConfig(sigma_y=0.15, eta=0.85)
    x = np.zeros((1, 100, 100))
    out = reverse_step(x, np.ones_like(x), 0.1, cfg, rng=9)
    assert abs(out.var() / (0.85 * 0.1) ** 2 - 1) < 0.05


def test_denoiser_receives_previous_noise_level():
    seen = []

    class Spy:
        def predict(self, x, sigma):
            seen.append(sigma)
            return x

    cfg = DiffusionConfig(sigma_y=0.15)
    ddrm_denoise(np.full((1, 2, 2), 0.5), cfg, Spy(), rng=0)
    steps = chain_sigmas(cfg)
    assert seen == [0.15] + steps[:-1]


def test_identity_denoiser_matches_model_free_chain():
    x = rng_stream(0).uniform(0, 1, (3, 6, 6))
    cfg = DiffusionConfig(sigma_y=0.15, seed=5)
    assert np.array_equal(ddrm_denoise(x, cfg, IdentityDenoiser()), ddrm_denoise(x, cfg, None))


def test_sigma_y_zero_degenerate_mode():
    x = rng_stream(0).uniform(0.1, 0.9, (3, 64, 64))
    out = ddrm_denoise(x, DiffusionConfig(sigma_y=0.0), rng=2)
    assert np.mean(np.abs(out - x) <= 5 * SIGMA_0) >= 0.9999
    assert not np.array_equal(out, x)


def test_disabled_stage_rejected():
    with pytest.raises(ValueError):
        ddrm_denoise(np.zeros((1, 2, 2)), DiffusionConfig(sigma_y=None))


def test_constant_input_is_unbiased():
    x = np.full((3, 16, 16), 0.5)
    means = [ddrm_denoise(x, DiffusionConfig(sigma_y=0.15), rng=s).mean() for s in range(50)]
    assert abs(np.mean(means) - 0.5) < 0.01


def test_determinism():
    x = rng_stream(1).uniform(0, 1, (3, 8, 8))
    cfg = DiffusionConfig(seed=7)
    assert np.array_equal(ddrm_denoise(x, cfg), ddrm_denoise(x, cfg))


def test_oracle_denoiser_reduces_error():
    mean, var, sy = 0.5, 0.01, 0.15
    den = GaussianPriorDenoiser(mean, var)
    wins = 0
    for t in range(40):
        rng = rng_stream([3, t])
        clean = mean + math.sqrt(var) * rng.standard_normal((1, 16, 16))
        y = corrupt(clean, sy, rng)
        cfg = DiffusionConfig(sigma_y=sy)
        x0 = ddrm_denoise(y, cfg, den, rng, add_noise=False)
        wins += np.mean((x0 - clean) ** 2) < np.mean((y - clean) ** 2)
    assert wins >= 38


def test_purify_stage_combinations():
    x = rng_stream(2).uniform(0, 1, (3, 8, 8))
    assert np.array_equal(purify(x, None, None), x)
    assert np.array_equal(purify(x, FilterConfig(lam=0.0), DiffusionConfig(sigma_y=None)), x)
    fc = FilterConfig(lam=0.25, seed=3)
    assert np.array_equal(purify(x, fc, DiffusionConfig(sigma_y=None)), iwmf(x, fc))
    dc = DiffusionConfig(sigma_y=0.15, seed=4)
    assert np.array_equal(purify(x, None, dc), ddrm_denoise(x, dc))
    out = purify(x, fc, dc)
    assert np.array_equal(out, ddrm_denoise(iwmf(x, fc), dc))
    assert out.min() >= 0 and out.max() <= 1


def test_purifier_randomization():
    x = rng_stream(2).uniform(0, 1, (2, 3, 8, 8))
    fixed = Purifier(FilterConfig(lam=0.5, seed=1), DiffusionConfig(seed=1), randomized=False)
    assert np.array_equal(fixed(x), fixed(x))
    assert np.array_equal(fixed(x)[0], fixed(x[0]))
    rand = Purifier(FilterConfig(lam=0.5, seed=1), DiffusionConfig(seed=1), randomized=True)
    assert not np.array_equal(rand(x, 1), rand(x, 2))
    assert np.array_equal(rand(x, 5), rand(x, 5))
    assert Purifier(None, None).is_identity


_ECHO = textwrap.dedent("""
    import sys, numpy as np
    from iwmfdiff.core import read_raw, write_raw
    x = read_raw(sys.stdin.buffer); s = read_raw(sys.stdin.buffer)
    write_raw(x * 0 + s[0, 0, 0], sys.stdout.buffer)
""")


def test_external_denoiser_round_trip():
    den = ExternalDenoiser([sys.executable, "-c", _ECHO], timeout=60)
    x = np.zeros((2, 3, 4, 4))
    out = den.predict(x, 0.125)
    assert out.shape == x.shape and np.all(out == 0.125)


def test_external_denoiser_errors():
    with pytest.raises(RuntimeError, match="exited"):
        ExternalDenoiser([sys.executable, "-c", "import sys; sys.exit(3)"]).predict(np.zeros((1, 2, 2)), 0.1)
    with pytest.raises(RuntimeError, match="timed out"):
        ExternalDenoiser([sys.executable, "-c", "import time; time.sleep(5)"], timeout=0.5).predict(
            np.zeros((1, 2, 2)), 0.1)
    bad = "import sys; from iwmfdiff.core import write_raw; import numpy as np; " \
          "sys.stdin.buffer.read(); write_raw(np.zeros((1, 1, 1)), sys.stdout.buffer)"
    with pytest.raises(RuntimeError, match="shape"):
        ExternalDenoiser([sys.executable, "-c", bad]).predict(np.zeros((1, 2, 2)), 0.1)


def test_default_schedule_is_geometric():
    s = np.array(default_schedule())
    ratios = s[1:] / s[:-1]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)
