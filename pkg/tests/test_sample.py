import numpy as np
import pytest

from ditmoe.model import init_params
from ditmoe.pnm import read_pnm
from ditmoe.sample import (
    Respaced,
    SampleRequest,
    ddpm_sample,
    ddpm_sample_batch,
    denoise_step,
    write_sample,
)
from ditmoe.schedule import build_linear_schedule, q_sample

from conftest import small_config


@pytest.fixture(scope="module")
def setup():
    cfg = small_config()
    params = init_params(cfg, 11, zero_init=False)
    params = {k: v * 5 for k, v in params.items()}
    return cfg, params, build_linear_schedule(1000)


def test_oracle_model_recovers_x0(rng):
    base = build_linear_schedule(1000)
    rs = Respaced.build(base, 1000)
    x0 = rng.uniform(-1, 1, (2, 1, 4, 4))
    eps = rng.standard_normal(x0.shape)
    for pos in (1, 250, 999):
        xt = q_sample(base, x0, pos, eps)
        _, x0_hat = denoise_step(lambda x, p: (eps, None), rs, xt, pos, rng.standard_normal(x0.shape), False,
                                 return_x0=True)
        assert np.max(np.abs(x0_hat - x0)) < 1e-5


def test_final_step_is_deterministic(rng):
    rs = Respaced.build(build_linear_schedule(1000), 50)
    xt = rng.standard_normal((1, 1, 4, 4))
    model = lambda x, p: (np.full_like(x, 0.1), None)
    a = denoise_step(model, rs, xt, 0, None, False)
    b = denoise_step(model, rs, xt, 0, rng.standard_normal(xt.shape), False)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        denoise_step(model, rs, xt, 3, None, False)


def test_nonfinite_prediction_raises(rng):
    rs = Respaced.build(build_linear_schedule(10), 5)
    with pytest.raises(FloatingPointError):
        denoise_step(lambda x, p: (np.full_like(x, np.nan), None), rs, np.zeros((1, 1, 2, 2)), 2,
                     np.zeros((1, 1, 2, 2)), False)


def test_same_seed_bitwise_identical(setup):
    cfg, params, sched = setup
    req = SampleRequest(class_label=1, num_steps=8, cfg_scale=1.5, seed=3)
    a, _ = ddpm_sample(params, cfg, sched, req)
    b, _ = ddpm_sample(params, cfg, sched, req)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (1, 4, 4) and np.all(np.isfinite(a))
    c, _ = ddpm_sample(params, cfg, sched, SampleRequest(class_label=1, num_steps=8, cfg_scale=1.5, seed=4))
    assert a.tobytes() != c.tobytes()


def test_single_step_is_deterministic_denoise(setup):
    cfg, params, sched = setup
    req = SampleRequest(class_label=0, num_steps=1, seed=2)
    img, _ = ddpm_sample(params, cfg, sched, req)
    assert Respaced.build(sched, 1).timesteps.tolist() == [999]
    np.testing.assert_array_equal(img, ddpm_sample(params, cfg, sched, req)[0])
    assert np.all(np.abs(img) <= 1.0)  # x0 clamp applies at the only step


@pytest.mark.parametrize("cfg_scale,both,factor", [(1.0, False, 1), (2.0, False, 1), (2.0, True, 2), (1.0, True, 1)])
def test_trace_event_count(setup, cfg_scale, both, factor):
    cfg, params, sched = setup
    steps = 6
    req = SampleRequest(class_label=2, num_steps=steps, cfg_scale=cfg_scale, seed=0, trace=True, trace_both=both)
    _, trace = ddpm_sample(params, cfg, sched, req)
    assert len(trace) == steps * len(cfg.moe_layers()) * cfg.num_tokens * factor
    cols = trace.columns()
    assert set(cols["timestep"].tolist()) == set(Respaced.build(sched, steps).timesteps.tolist())
    _, per_ts = np.unique(cols["timestep"], return_counts=True)
    assert len(set(per_ts.tolist())) == 1
    np.testing.assert_array_equal(np.unique(cols["step"]), np.arange(steps))


def test_batch_order_independent(setup):
    cfg, params, sched = setup
    reqs = [SampleRequest(class_label=c, num_steps=5, seed=7, index=i) for i, c in enumerate([0, 2, 1])]
    fwd = ddpm_sample_batch(params, cfg, sched, reqs)
    rev = ddpm_sample_batch(params, cfg, sched, reqs[::-1])[::-1]
    np.testing.assert_allclose(fwd, rev, atol=1e-5)
    alone = ddpm_sample_batch(params, cfg, sched, [reqs[1]])
    np.testing.assert_allclose(fwd[1], alone[0], atol=1e-5)


def test_zero_network_contracts(tiny):
    params = init_params(tiny, 0)  # zero-initialised output layer: eps_hat = 0
    sched = build_linear_schedule(1000)
    shape = (tiny.in_channels, tiny.input_size, tiny.input_size)
    init_norms, final_norms = [], []
    for seed in range(20):
        x_T = np.random.default_rng([seed, 0]).standard_normal(shape)
        img, _ = ddpm_sample(params, tiny, sched, SampleRequest(class_label=0, num_steps=10, seed=seed))
        init_norms.append(np.linalg.norm(x_T))
        final_norms.append(np.linalg.norm(img))
    assert np.mean(final_norms) < np.mean(init_norms)
    assert all(f < i for f, i in zip(final_norms, init_norms))


def test_request_validation(setup):
    cfg, params, sched = setup
    with pytest.raises(ValueError):
        SampleRequest(class_label=0, cfg_scale=-1)
    with pytest.raises(ValueError):
        ddpm_sample(params, cfg, sched, SampleRequest(class_label=3))
    with pytest.raises(ValueError):
        ddpm_sample(params, cfg, build_linear_schedule(10), SampleRequest(class_label=0, num_steps=11))


def test_write_sample(tmp_path, rng):
    req = SampleRequest(class_label=1, num_steps=9, cfg_scale=2.5, seed=4, index=2)
    path = write_sample(tmp_path, "s", rng.uniform(-1, 1, (1, 4, 4)), req)
    assert path.suffix == ".pgm" and read_pnm(path).shape == (4, 4)
    meta = (tmp_path / "s.txt").read_text()
    for frag in ("seed = 4", "class = 1", "steps = 9", "cfg_scale = 2.5"):
        assert frag in meta
    rgb = write_sample(tmp_path, "c", rng.uniform(-1, 1, (3, 4, 4)), req)
    assert rgb.suffix == ".ppm" and read_pnm(rgb).shape == (4, 4, 3)
