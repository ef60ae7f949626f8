import numpy as np
import pytest

from iwmfdiff.bench import (BLUR_PIPELINES, DIFFUSION_PIPELINES, PIPELINES, format_table, make_pipeline, run_bench,
                            time_call)
from iwmfdiff.core import rng_stream
from iwmfdiff.diffusion import DiffusionConfig, ddrm_denoise


def test_pipeline_groups():
    assert set(BLUR_PIPELINES) == {"gaussian", "iwmf"}
    assert len(DIFFUSION_PIPELINES) == 4
    assert set(BLUR_PIPELINES) | set(DIFFUSION_PIPELINES) == set(PIPELINES)


@pytest.mark.parametrize("name", list(PIPELINES))
def test_pipelines_keep_shape_and_replay(name):
    x = rng_stream(0).uniform(0, 1, (3, 3, 12, 12))
    fn = make_pipeline(name, seed=2)
    out = fn(x)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(out, fn(x))


def test_noiseless_diffusion_skips_corruption():
    x = np.full((1, 3, 8, 8), 0.5)
    out = make_pipeline("noiseless-diffusion")(x)
    ref = ddrm_denoise(x, DiffusionConfig(sigma_y=0.15, seed=0), rng=rng_stream(0), add_noise=False)
    np.testing.assert_array_equal(out, ref)


def test_unknown_pipeline():
    with pytest.raises(ValueError):
        make_pipeline("jpeg")


def test_time_call_statistics():
    mean, std = time_call(lambda: None, 4)
    assert mean >= 0 and std >= 0
    with pytest.raises(ValueError):
        time_call(lambda: None, 0)


def test_run_bench_rows_and_table():
    rows = run_bench(["gaussian", "iwmf"], size=8, batch=3, repeats=2, threads=2)
    assert [r.name for r in rows] == ["gaussian", "iwmf"]
    text = format_table(rows, 3)
    assert text.count("±") == 4
