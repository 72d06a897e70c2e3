import json

import numpy as np
import pytest

from repainv import diffcore as dc
from repainv.data import make_images
from repainv.diffcore import Tape
from repainv.nets import (AEConfig, Autoencoder, EncoderConfig, FeatureEncoder, HeadConfig,
                          ProjectionHead, UntrainedModelError, VelocityConfig, VelocityModel,
                          bind, checkpoint_file, checkpoint_hash, encode_features, encode_latent,
                          load_checkpoint, load_head, load_velocity, save_head, save_velocity,
                          spectral_norm)
from repainv.theory import mean_patch_cosine

SMALL = VelocityConfig(image_size=8, patch=2, dim=16, depth=3, tap=2, hidden=24, temb_dim=8)


def test_shapes_and_repeatability():
    m = VelocityModel.init(SMALL, 0)
    x = np.random.default_rng(0).standard_normal((3, 8, 8))
    for t in (0.0, 0.5, 1.0):
        v, h = m.velocity_and_tap(x, t)
        assert v.shape == x.shape
        assert h.shape == (3, SMALL.n_tokens, SMALL.dim)
    v1, h1 = m.velocity_and_tap(x, 0.3)
    v2, h2 = m.velocity_and_tap(x, 0.3)
    assert np.array_equal(v1, v2) and np.array_equal(h1, h2)


def test_zero_output_layer_gives_zero_velocity():
    m = VelocityModel.init(SMALL, 1)
    m.params["out_w"][:] = 0
    m.params["out_b"][:] = 0
    x = np.random.default_rng(1).standard_normal((2, 8, 8))
    assert np.all(m(x, 0.7) == 0)


def test_patch_locality_before_mixing():
    m = VelocityModel.init(SMALL, 2)
    x = np.random.default_rng(2).standard_normal((1, 8, 8))
    x2 = x.copy()
    x2[0, 0, 0] += 1.0
    tape = Tape()
    p = bind(tape, m.params)
    tok = [dc.add_bias(dc.patchify(tape.const(a), 2) @ p["embed_w"], p["embed_b"]).value
           for a in (x, x2)]
    changed = np.any(tok[0] != tok[1], axis=-1)[0]
    assert changed.sum() == 1 and changed[0]
    # after the token mixer every token may change
    _, h1 = m.velocity_and_tap(x, 0.5)
    _, h2 = m.velocity_and_tap(x2, 0.5)
    assert np.any(h1 != h2, axis=-1).sum() > 1


def test_end_to_end_gradient_matches_fd():
    m = VelocityModel.init(SMALL, 3)
    head = ProjectionHead.init(HeadConfig(in_dim=16, out_dim=8, hidden=12), 0)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 8, 8))
    target = rng.standard_normal((2, SMALL.n_tokens, 8))

    def f(xv):
        v, h = m.forward(xv.tape, xv, 0.4)
        return dc.dsum(v * v) + dc.dsum(dc.cosine_rows(head.forward(xv.tape, h),
                                                        xv.tape.const(target)))

    err = dc.finite_difference_check(f, [x], n_coords=20, rng=rng)
    assert err < 1e-4


def test_head_linear_modes():
    h = np.random.default_rng(4).standard_normal((5, 6))
    assert np.allclose(ProjectionHead.linear(np.eye(6))(h), h)
    assert np.all(ProjectionHead.linear(np.zeros((3, 6)))(h) == 0)
    phi = np.random.default_rng(5).standard_normal((3, 6))
    assert np.allclose(ProjectionHead.linear(phi)(h), h @ phi.T, rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        ProjectionHead.init(HeadConfig(), 0).phi


def test_spectral_norm_vs_svd():
    for seed in range(5):
        a = np.random.default_rng(seed).standard_normal((8, 8))
        assert abs(spectral_norm(a) - np.linalg.svd(a, compute_uv=False)[0]) < 1e-8
    assert spectral_norm(np.zeros((3, 3))) == 0.0


def test_encoder_rows_unit_and_deterministic():
    enc = FeatureEncoder()
    x = make_images(5, 4)
    f1, f2 = encode_features(enc, x), encode_features(FeatureEncoder(), x)
    assert np.array_equal(f1.values, f2.values)
    assert f1.values.shape == (4, 16, 32)
    assert np.max(np.abs(np.linalg.norm(f1.values, axis=-1) - 1)) < 1e-9


def test_encoder_smooth_on_constant_image():
    enc = FeatureEncoder()
    c = np.full((1, 32, 32), 0.7)
    noisy = c + 1e-4 * np.random.default_rng(6).standard_normal(c.shape)
    cos = mean_patch_cosine(enc(c).values, enc(noisy).values)
    assert cos.mean() > 0.999


def test_encoder_degenerate_patch_uses_fallback():
    enc = FeatureEncoder()
    x = np.full((1, 32, 32), 0.5)  # exactly the centre value: raw features are 0
    f = enc(x)
    assert f.any_degenerate
    assert np.allclose(f.values[0], enc.fallback)


def test_encoder_invariance_ordering():
    # coarser downsampling loses more: similarity(x4) >= similarity(x8) >= similarity(x16)
    from repainv.degrade import superres
    enc = FeatureEncoder()
    x = make_images(1, 20)
    sims = []
    for f in (4, 8, 16):
        op = superres(f, 32, 0.0)
        sims.append(mean_patch_cosine(enc(x).values, enc(op.proxy_image(op.apply(x))).values).mean())
    assert sims[0] >= sims[1] >= sims[2]


def test_encoder_config_errors():
    with pytest.raises(ValueError):
        FeatureEncoder(EncoderConfig(image_size=30))
    with pytest.raises(ValueError):
        FeatureEncoder()(np.zeros((1, 16, 16)))


def test_checkpoint_round_trip(tmp_path):
    m = VelocityModel.init(SMALL, 7)
    head = ProjectionHead.init(HeadConfig(in_dim=16, out_dim=8, hidden=12), 1)
    path = tmp_path / "flow_w0.5"
    h1 = save_velocity(path, m, {"note": 1})
    save_head(tmp_path / "head_w0.5", head)
    # dotted names must not collide with a sibling
    save_velocity(tmp_path / "flow_w0.0", VelocityModel.init(SMALL, 8))
    assert checkpoint_file(path, ".json").exists()
    m2 = load_velocity(path)
    for k, v in m.params.items():
        assert np.array_equal(m2.params[k], v.astype(np.float32).astype(np.float64))
    assert checkpoint_hash(path) == h1
    x = np.random.default_rng(0).standard_normal((1, 8, 8))
    assert np.allclose(m2(x, 0.5), m(x, 0.5), atol=1e-4)
    assert load_head(tmp_path / "head_w0.5").cfg == head.cfg
    assert not np.array_equal(load_velocity(tmp_path / "flow_w0.0").params["embed_w"],
                              m2.params["embed_w"])


def test_checkpoint_errors(tmp_path):
    m = VelocityModel.init(SMALL, 0)
    path = tmp_path / "m"
    save_velocity(path, m)
    with pytest.raises(ValueError, match="expected a 'head'"):
        load_head(path)
    blob = bytearray(checkpoint_file(path, ".bin").read_bytes())
    blob[0] ^= 1
    checkpoint_file(path, ".bin").write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(path)
    save_velocity(path, m)
    man = json.loads(checkpoint_file(path, ".json").read_text())
    man["format_version"] = 99
    checkpoint_file(path, ".json").write_text(json.dumps(man))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)
    with pytest.raises(ValueError):
        VelocityModel(SMALL, {})


def test_untrained_autoencoder_refuses():
    ae = Autoencoder.init(AEConfig(), 0)
    with pytest.raises(UntrainedModelError):
        encode_latent(ae, np.zeros((1, 32, 32)))
    with pytest.raises(ValueError):
        AEConfig(latent=60).latent_side


def test_spectral_norm_with_nearly_tied_top_singular_values():
    rng = np.random.default_rng(3)
    u, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    v, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    a = u @ np.diag([2.0, 1.995, 1.0, 0.8, 0.5, 0.3, 0.2, 0.1]) @ v.T
    assert abs(spectral_norm(a) - 2.0) / 2.0 < 1e-10
