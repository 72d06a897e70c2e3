import numpy as np
import pytest

from repainv import diffcore as dc
from repainv.data import make_images
from repainv.diffcore import Tape
from repainv.nets import (AEConfig, EncoderConfig, FeatureEncoder, HeadConfig, ProjectionHead,
                          VelocityConfig, VelocityModel, bind, decode_latent, encode_latent)
from repainv.schedule import LinearSchedule, corrupt, velocity_target
from repainv.train import (Adam, AETrainConfig, TrainConfig, flow_matching_loss, loss_and_grads,
                           repa_loss, target_features, train_autoencoder, train_flow)

VCFG = VelocityConfig(image_size=8, patch=2, dim=16, depth=2, tap=1, hidden=16, temb_dim=8)
HCFG = HeadConfig(in_dim=16, out_dim=8, hidden=12)
ENC8 = FeatureEncoder(EncoderConfig(image_size=8, patch=2, pool=1, dim=8))


class ExactField:
    """Returns a precomputed target as its velocity."""

    def __init__(self, target):
        self.target = target

    def forward(self, tape, x, t, params=None):
        return tape.const(self.target), None


def test_exact_model_has_zero_loss():
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((2, 4, 8, 8))
    t = rng.uniform(size=4)
    s = LinearSchedule()
    loss, _ = flow_matching_loss(Tape(), ExactField(velocity_target(s, x0, eps, t)), x0, t, eps, s)
    assert loss.value == 0.0


def test_zero_model_loss_is_direct_expectation():
    rng = np.random.default_rng(1)
    x0, eps = rng.standard_normal((2, 16, 8, 8))
    t = rng.uniform(size=16)
    m = VelocityModel.init(VCFG, 0)
    m.params["out_w"][:] = 0
    m.params["out_b"][:] = 0
    loss, _ = flow_matching_loss(Tape(), m, x0, t, eps, LinearSchedule())
    direct = np.mean(((eps - x0) ** 2).reshape(16, -1).sum(axis=1))
    assert float(loss.value) == pytest.approx(direct, rel=1e-12)
    assert float(loss.value) >= 0


def test_repa_loss_extremes_and_range():
    rng = np.random.default_rng(2)
    head = ProjectionHead.linear(np.eye(4))
    h = rng.standard_normal((3, 5, 4))
    f = h / np.linalg.norm(h, axis=-1, keepdims=True)
    tape = Tape()
    assert float(repa_loss(tape, head, tape.const(h), f).value) == pytest.approx(-1.0)
    orth = np.zeros((1, 2, 4))
    orth[..., 0] = 1
    hh = np.zeros((1, 2, 4))
    hh[..., 1] = 2
    assert float(repa_loss(tape, head, tape.const(hh), orth).value) == 0.0
    for _ in range(20):
        v = float(repa_loss(tape, head, tape.const(rng.standard_normal((2, 5, 4))),
                            rng.standard_normal((2, 5, 4))).value)
        assert -1 <= v <= 1
    with pytest.raises(ValueError):
        repa_loss(tape, head, tape.const(h), f[:, :2])


def test_training_gradients_match_fd():
    rng = np.random.default_rng(3)
    model = VelocityModel.init(VCFG, 0)
    head = ProjectionHead.init(HCFG, 0)
    x0, eps = rng.standard_normal((2, 3, 8, 8))
    t = rng.uniform(size=3)
    feats = rng.standard_normal((3, 16, 8))
    _, _, gm, gh = loss_and_grads(model, head, x0, feats, t, eps, LinearSchedule(), 0.5)
    names = ["embed_w", "b0_w1", "out_b"]

    def total(*vals):
        tape = vals[0].tape
        mp = bind(tape, model.params)
        mp.update(dict(zip(names, vals)))
        fm, h = flow_matching_loss(tape, model, x0, t, eps, LinearSchedule(), mp)
        return fm + repa_loss(tape, head, h, feats) * 0.5

    err = dc.finite_difference_check(total, [model.params[k] for k in names], n_coords=6, rng=rng)
    assert err < 1e-4
    tape = Tape()
    mp = {k: tape.var(v) for k, v in model.params.items()}
    fm, h = flow_matching_loss(tape, model, x0, t, eps, LinearSchedule(), mp)
    tot = fm + repa_loss(tape, head, h, feats) * 0.5
    ref = tape.gradient(tot, [mp[k] for k in names])
    for k, r in zip(names, ref):
        assert np.allclose(gm[k], r, rtol=1e-12, atol=1e-15)
    assert set(gh) == set(head.params)


def test_probe_head_does_not_touch_model_gradient():
    rng = np.random.default_rng(4)
    model = VelocityModel.init(VCFG, 0)
    head = ProjectionHead.init(HCFG, 0)
    x0, eps = rng.standard_normal((2, 3, 8, 8))
    t = rng.uniform(size=3)
    feats = rng.standard_normal((3, 16, 8))
    _, _, g0, gh0 = loss_and_grads(model, head, x0, feats, t, eps, LinearSchedule(), 0.0)
    tape = Tape()
    mp = bind(tape, model.params, requires_grad=True)
    fm, _ = flow_matching_loss(tape, model, x0, t, eps, LinearSchedule(), mp)
    names = list(mp)
    ref = dict(zip(names, tape.gradient(fm, [mp[k] for k in names], allow_unreachable=True)))
    for k in names:
        assert np.array_equal(g0[k], ref[k])
    assert any(np.any(g != 0) for g in gh0.values())


def test_adam_minimizes_quadratic():
    p = {"w": np.array([3.0, -2.0])}
    opt = Adam(p, lr=0.1)
    for _ in range(300):
        opt.step({"w": 2 * p["w"]})
    assert np.max(np.abs(p["w"])) < 1e-2


def tiny_data(n=128, seed=0):
    x = make_images(seed, n, size=8)
    return x, target_features(ENC8, x)


def test_train_flow_deterministic_and_improves():
    x, f = tiny_data()
    xv, fv = tiny_data(32, 1)
    cfg = TrainConfig(steps=60, batch=16, lr=3e-3, model=VCFG, head=HCFG, eval_every=30, eval_size=32,
                      space="pixel")
    a = train_flow(cfg, x, f, xv, fv)
    b = train_flow(cfg, x, f, xv, fv)
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])
    assert a.log == b.log
    assert a.log[-1]["heldout_fm"] < a.log[0]["heldout_fm"]


def test_w_repa_runs_share_first_step():
    x, f = tiny_data()
    kw = dict(steps=2, batch=16, model=VCFG, head=HCFG, eval_every=1, space="pixel")
    a = train_flow(TrainConfig(w_repa=0.5, **kw), x, f)
    b = train_flow(TrainConfig(w_repa=0.0, **kw), x, f)
    assert a.log[0]["fm"] == b.log[0]["fm"]          # same init, same batch
    assert a.log[1]["fm"] != b.log[1]["fm"]          # the updates differ


def test_train_config_validation():
    x, f = tiny_data(16)
    for bad in (dict(steps=0), dict(lr=0.0), dict(w_repa=-1.0), dict(space="voxel"),
                dict(head=HeadConfig(in_dim=3))):
        with pytest.raises(ValueError):
            train_flow(TrainConfig(model=VCFG, **{"head": HCFG, **bad}), x, f)
    with pytest.raises(ValueError):
        train_flow(TrainConfig(model=VCFG, head=HCFG, steps=1), np.zeros((4, 16, 16)), f[:4])


def test_autoencoder_training_small():
    x = make_images(0, 256, size=8)
    cfg = AETrainConfig(steps=150, batch=32, lr=3e-3, ae=AEConfig(image_size=8, latent=16, hidden=64))
    ae, rows = train_autoencoder(cfg, x)
    assert ae.trained
    assert rows[-1]["mse"] < rows[0]["mse"]
    z = encode_latent(ae, x)
    assert z.shape == (256, 4, 4)
    assert np.allclose(z.reshape(256, -1).mean(axis=0), 0, atol=1e-4)
    assert np.allclose(z.reshape(256, -1).std(axis=0), 1, atol=1e-3)
    ae2, _ = train_autoencoder(cfg, x)
    assert np.array_equal(decode_latent(ae, z[:3]), decode_latent(ae2, z[:3]))
