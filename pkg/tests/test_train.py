import math

import numpy as np
import pytest

from ditmoe import autograd as ag
from ditmoe import train as train_mod
from ditmoe.checkpoint import CheckpointError, dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from ditmoe.data import ImageSource, MixedSampler, hflip, toy_source
from ditmoe.model import ForwardOutput, init_params
from ditmoe.moe import MoeConfig
from ditmoe.schedule import build_linear_schedule
from ditmoe.train import (
    AdamState,
    TrainConfig,
    Trainer,
    adamw_step,
    clip_grad_norm,
    ema_update,
    imbalance,
    label_dropout,
    loss_terms,
)

from conftest import small_config
from reference import reference_forward


def small_trainer(seed=0, **kw):
    cfg = small_config()
    tcfg = TrainConfig(batch_size=3, seed=seed, lr=1e-3, ema_decay=0.9, **kw)
    real = toy_source(3, 4, size=4, channels=1, seed=[seed, 1])
    return Trainer(cfg, tcfg, real)


# -- objective ---------------------------------------------------------------


def test_oracle_prediction_gives_zero_mse(small, rng, monkeypatch):
    sched = build_linear_schedule(100)
    x0, eps = rng.uniform(-1, 1, (2, 1, 4, 4)), rng.standard_normal((2, 1, 4, 4))

    def oracle(params, cfg, x_t, t, c):
        return ForwardOutput(ag.Tensor(np.concatenate([eps, np.zeros_like(eps)], axis=1)), [])

    monkeypatch.setattr(train_mod, "forward", oracle)
    terms = loss_terms({}, small, sched, x0, np.array([3, 50]), eps, np.array([0, 1]))
    assert terms["mse"].item() == 0.0


def test_term_isolation(rng):
    cfg = small_config(moe=MoeConfig(n=4, K=2, n_s=1, alpha=0.0), learned_sigma=False)
    P = init_params(cfg, 0, dtype=np.float64, zero_init=False)
    sched = build_linear_schedule(1000)
    x0, eps = rng.uniform(-1, 1, (2, 1, 4, 4)), rng.standard_normal((2, 1, 4, 4))
    terms = loss_terms(P, cfg, sched, x0, np.array([7, 400]), eps, np.array([0, 2]))
    assert terms["vlb"].item() == 0.0 and terms["balance"].item() == 0.0
    assert terms["total"].item() == terms["mse"].item()


def _ref_cdf(x):
    return 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def reference_total(P, cfg, sched, x0, t, eps, c):
    """Total loss from the straight-line forward and scalar loops."""
    B, C = x0.shape[0], cfg.in_channels
    xt = np.stack([math.sqrt(sched.alpha_bars[t[b]]) * x0[b] + math.sqrt(1 - sched.alpha_bars[t[b]]) * eps[b]
                   for b in range(B)])
    routing = []
    out = reference_forward(P, cfg, xt, t, c, routing)
    eps_hat, v = out[:, :C], out[:, C:]
    mse = np.mean((eps_hat - eps) ** 2)
    vlb_items = []
    for b in range(B):
        tb = int(t[b])
        ab, ab_prev, beta = sched.alpha_bars[tb], sched.alpha_bars_prev[tb], sched.betas[tb]
        x0_hat = (xt[b] - math.sqrt(1 - ab) * eps_hat[b]) / math.sqrt(ab)
        c1 = beta * math.sqrt(ab_prev) / (1 - ab) if tb else 1.0
        c2 = (1 - ab_prev) * math.sqrt(1 - beta) / (1 - ab) if tb else 0.0
        m_model = c1 * x0_hat + c2 * xt[b]
        m_true = c1 * x0[b] + c2 * xt[b]
        post_var = sched.betas[1] * (1 - sched.alpha_bars[0]) / (1 - sched.alpha_bars[1]) if tb == 0 else \
            beta * (1 - ab_prev) / (1 - ab)
        frac = np.clip((v[b] + 1) / 2, 0, 1)
        lv = frac * math.log(beta) + (1 - frac) * math.log(post_var)
        vals = []
        for xm, mt, mm, l in zip(x0[b].ravel(), m_true.ravel(), m_model.ravel(), lv.ravel()):
            if tb == 0:
                inv = math.exp(-0.5 * l)
                cen = xm - mm
                hi, lo = _ref_cdf((cen + 1 / 255) * inv), _ref_cdf((cen - 1 / 255) * inv)
                if xm < -0.999:
                    ll = math.log(max(hi, 1e-12))
                elif xm > 0.999:
                    ll = math.log(max(1 - lo, 1e-12))
                else:
                    ll = math.log(max(hi - lo, 1e-12))
                vals.append(-ll)
            else:
                lt = math.log(post_var)
                vals.append(0.5 * (-1 + l - lt + math.exp(lt - l) + (mt - mm) ** 2 * math.exp(-l)))
        vlb_items.append(np.mean(vals))
    vlb = np.mean(vlb_items)
    n, K, T = cfg.moe.n, cfg.moe.K, cfg.num_tokens
    layer_terms = []
    for layer in range(cfg.depth):
        seq_terms = []
        for b in range(B):
            rows = [(p, s) for bb, ll, p, s in routing if bb == b and ll == layer]
            f = np.zeros(n)
            pbar = np.zeros(n)
            for p, s in rows:
                pbar += p / T
                for e in s:
                    f[e] += n / (K * T)
            seq_terms.append(cfg.moe.alpha * np.dot(f, pbar))
        layer_terms.append(np.mean(seq_terms))
    return mse + vlb + np.mean(layer_terms)


def test_total_matches_straight_line_recomputation(rng):
    cfg = small_config(moe=MoeConfig(n=4, K=2, n_s=1, alpha=0.05))
    P = init_params(cfg, 3, dtype=np.float64, zero_init=False)
    P = {k: v * (10 if "router" in k else 4) for k, v in P.items()}
    sched = build_linear_schedule(1000)
    x0 = rng.uniform(-1, 1, (3, 1, 4, 4))
    x0[0, 0, 0, 0], x0[0, 0, 1, 1] = -1.0, 1.0  # edge bins of the t=0 likelihood
    eps = rng.standard_normal((3, 1, 4, 4))
    t, c = np.array([0, 1, 640]), np.array([0, 3, 2])
    got = loss_terms(P, cfg, sched, x0, t, eps, c)["total"].item()
    want = reference_total(P, cfg, sched, x0, t, eps, c)
    assert abs(got - want) <= 1e-10


def test_rectified_flow_objective(small, rng):
    P = init_params(small, 0, dtype=np.float64, zero_init=False)
    sched = build_linear_schedule(1000)
    x0, eps = rng.uniform(-1, 1, (2, 1, 4, 4)), rng.standard_normal((2, 1, 4, 4))
    terms = loss_terms(P, small, sched, x0, np.array([0.2, 0.9]), eps, np.array([0, 1]), "rectified_flow")
    assert terms["vlb"].item() == 0.0
    assert np.isfinite(terms["total"].item())


# -- label dropout ------------------------------------------------------------


def test_label_dropout_zero_keeps_label(rng):
    assert all(label_dropout(5, 0.0, rng) == 5 for _ in range(1000))


def test_label_dropout_rate():
    r = np.random.default_rng(0)
    n, p = 100_000, 0.999
    drops = sum(label_dropout(1, p, r) is None for _ in range(n))
    assert abs(drops - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_label_dropout_reproducible():
    a = [label_dropout(2, 0.3, r) for r in [np.random.default_rng(9)] for _ in range(50)]
    b = [label_dropout(2, 0.3, r) for r in [np.random.default_rng(9)] for _ in range(50)]
    assert a == b
    with pytest.raises(ValueError):
        label_dropout(1, 1.0, np.random.default_rng())


# -- optimiser and EMA -----------------------------------------------------


def test_adam_zero_gradient():
    p = {"w": np.array([1.5, -2.0])}
    st = AdamState({"w": np.array([0.2, -0.1])}, {"w": np.array([0.04, 0.01])}, 3)
    new, st2 = adamw_step(st, p, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_allclose(st2.m["w"], 0.9 * st.m["w"])
    np.testing.assert_allclose(st2.v["w"], 0.999 * st.v["w"])
    # zero gradient with non-zero momentum still moves; a fresh state does not
    fresh, _ = adamw_step(AdamState(), p, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(fresh["w"], p["w"])


def test_adam_single_step_hand_value():
    p = {"w": np.array([0.5])}
    new, _ = adamw_step(AdamState(), p, {"w": np.array([1.0])}, lr=1e-3)
    # m_hat = 1, v_hat = 1 after bias correction
    assert new["w"][0] == pytest.approx(0.5 - 1e-3 * 1.0 / (1.0 + 1e-8), abs=1e-12)


def test_adam_constant_gradient_sign_limit():
    p, st = {"w": np.array([0.0])}, AdamState()
    lr = 1e-2
    for _ in range(2000):
        prev = p["w"][0]
        p, st = adamw_step(st, p, {"w": np.array([-3.7])}, lr=lr)
    assert p["w"][0] - prev == pytest.approx(lr, rel=1e-6)


def test_adam_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        adamw_step(AdamState(), {"w": np.zeros(1)}, {"w": np.array([np.nan])}, lr=1.0)


def test_ema_examples():
    e = ema_update({"a": np.array([4.0])}, {"a": np.array([2.0])}, 0.0)
    assert e["a"][0] == 2.0
    ema = {"a": np.zeros(1)}
    for _ in range(10):
        ema = ema_update(ema, {"a": np.array([3.0])}, 0.8)
    assert ema["a"][0] == pytest.approx(3.0 * (1 - 0.8**10), rel=1e-14)
    one = ema_update({"a": np.array([1.0])}, {"a": np.array([0.0])}, 0.9999)
    assert one["a"][0] == pytest.approx(0.9999, abs=1e-15)
    with pytest.raises(KeyError):
        ema_update({"a": np.zeros(1)}, {"b": np.zeros(1)}, 0.5)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_grad_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert math.hypot(clipped["a"][0], clipped["b"][0]) == pytest.approx(1.0, rel=1e-6)


def test_imbalance_statistic():
    assert imbalance(np.array([[5, 5, 5, 5]])) == 0.0
    assert imbalance(np.array([[10, 0, 0, 0], [5, 5, 5, 5]])) == pytest.approx(0.5)


# -- data -------------------------------------------------------------------


def test_mixed_sampler_all_real():
    real = toy_source(2, 3, size=4, seed=0)
    synth = toy_source(2, 3, size=4, seed=1, style="synthetic")
    _, _, from_real = MixedSampler(real, synth, (1, 0), np.random.default_rng(0)).draw(500)
    assert from_real.all()


def test_mixed_sampler_ratio():
    real = toy_source(2, 3, size=4, seed=0)
    synth = toy_source(2, 3, size=4, seed=1, style="synthetic")
    n = 60_000
    _, _, from_real = MixedSampler(real, synth, (1, 5), np.random.default_rng(4)).draw(n)
    p = 1 / 6
    assert abs(from_real.sum() - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_mixed_sampler_requires_sources():
    with pytest.raises(ValueError):
        MixedSampler(toy_source(1, 1, size=4), None, (1, 5))


def test_flip_involution(rng):
    x = rng.standard_normal((2, 1, 4, 4))
    np.testing.assert_array_equal(hflip(hflip(x)), x)


def test_sampler_items_are_source_items_or_flips():
    real = toy_source(2, 5, size=4, seed=0)
    imgs, labels, _ = MixedSampler(real, None, (1, 0), np.random.default_rng(1)).draw(50)
    pool = {(im.tobytes(), int(l)) for im, l in zip(real.images, real.labels)}
    for im, lab in zip(imgs, labels):
        assert (im.tobytes(), int(lab)) in pool or (hflip(im).tobytes(), int(lab)) in pool


# -- trainer -------------------------------------------------------------------


def test_training_is_deterministic():
    a = [r.total for r in small_trainer(3).run(4)]
    b = [r.total for r in small_trainer(3).run(4)]
    assert a == b
    c = [r.total for r in small_trainer(4).run(4)]
    assert a != c


def test_resume_replays_identically(tmp_path):
    straight = small_trainer(1)
    full = [r.total for r in straight.run(10)]
    first = small_trainer(1)
    head = [r.total for r in first.run(5)]
    save_checkpoint(tmp_path / "mid.dmck", first.to_checkpoint())
    resumed = small_trainer(1)
    resumed.restore(load_checkpoint(tmp_path / "mid.dmck"))
    tail = [r.total for r in resumed.run(5)]
    assert head + tail == full
    for k in straight.params:
        np.testing.assert_array_equal(resumed.params[k], straight.params[k])


def test_ema_within_envelope():
    tr = small_trainer(2)
    lo = {k: v.copy() for k, v in tr.params.items()}
    hi = {k: v.copy() for k, v in tr.params.items()}

    def track(t, rec):
        for k, v in t.params.items():
            np.minimum(lo[k], v, out=lo[k])
            np.maximum(hi[k], v, out=hi[k])

    tr.run(6, track)
    for k, e in tr.ema.items():
        tol = 1e-6 * (1 + np.abs(e))
        assert np.all(e >= lo[k] - tol) and np.all(e <= hi[k] + tol)


def test_step_records_are_finite():
    for rec in small_trainer(0).run(3):
        assert all(np.isfinite([rec.mse, rec.vlb, rec.balance, rec.total]))
        assert rec.expert_counts.shape == (2, 4) and rec.expert_counts.sum() == 2 * 3 * 4 * 2


def test_trainer_rejects_mismatched_data():
    cfg = small_config()
    with pytest.raises(ValueError):
        Trainer(cfg, TrainConfig(), toy_source(3, 2, size=8))
    with pytest.raises(ValueError):
        Trainer(cfg, TrainConfig(), ImageSource(np.zeros((1, 1, 4, 4)), [7]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.0)
    with pytest.raises(ValueError):
        TrainConfig(objective="score")


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    tr = small_trainer(0)
    tr.run(2)
    ck = tr.to_checkpoint()
    data = dumps_checkpoint(ck)
    back = loads_checkpoint(data)
    assert dumps_checkpoint(back) == data
    assert back.config == ck.config and back.step == 2 and back.rng_state == ck.rng_state
    for g in ("params", "ema", "adam_m", "adam_v"):
        for k, v in getattr(ck, g).items():
            np.testing.assert_array_equal(getattr(back, g)[k], v)
    save_checkpoint(tmp_path / "a.dmck", back)
    assert (tmp_path / "a.dmck").read_bytes() == data


def test_checkpoint_corruption_detected():
    tr = small_trainer(0)
    data = bytearray(dumps_checkpoint(tr.to_checkpoint()))
    bad = bytes(data[:-1]) + bytes([data[-1] ^ 1])
    with pytest.raises(CheckpointError, match="checksum"):
        loads_checkpoint(bad)
    with pytest.raises(CheckpointError):
        loads_checkpoint(bytes(data[:-40]))
    with pytest.raises(CheckpointError):
        loads_checkpoint(b"DMCK")


def test_checkpoint_version_checked():
    import hashlib
    import struct

    data = dumps_checkpoint(small_trainer(0).to_checkpoint())
    body = data[:4] + struct.pack("<I", 99) + data[8:-32]
    with pytest.raises(CheckpointError, match="version"):
        loads_checkpoint(body + hashlib.sha256(body).digest())
