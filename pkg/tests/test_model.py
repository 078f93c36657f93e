import numpy as np
import pytest

from surs import autodiff as ad
from surs.errors import ValidationError
from surs.model import (EncoderConfig, MlpConfig, Model, desk_mlps, index_embedding,
                        load_checkpoint, save_checkpoint)
from surs.train import tiny_model

from oracles import bilinear_4tap


def desk(arch="full", n_i=64, seed=0, dtype=np.float64):
    enc = EncoderConfig(n_i=n_i, c_hi=16, c_lo=32, stacks=2, width=8)
    return Model(enc, *desk_mlps(enc, (32, 16), (2,)), arch=arch, seed=seed, dtype=dtype)


def test_encoder_shapes():
    emb = desk().encode(np.random.default_rng(0).random((1, 64, 64, 3)))
    assert emb.hi.shape == (1, 16, 128, 128)
    assert emb.lo.shape == (1, 32, 32, 32)


@pytest.mark.parametrize("n_i", [8, 16, 24, 40])
def test_encoder_shapes_any_multiple_of_8(n_i):
    m = tiny_model()
    enc = EncoderConfig(n_i=n_i, c_hi=4, c_lo=8, stacks=1, width=4)
    m = Model(enc, m.mr_cfg, m.sr_cfg)
    emb = m.encode(np.zeros((2, n_i, n_i, 3)))
    assert emb.hi.shape == (2, 4, 2 * n_i, 2 * n_i) and emb.lo.shape == (2, 8, n_i // 2, n_i // 2)


def test_full_scale_configs():
    enc = EncoderConfig.full_scale()
    assert (enc.n_i, enc.c_hi, enc.c_lo) == (256, 64, 256)
    assert MlpConfig.full_scale_mr().widths[0] == 64 + 256 + 1 == 321
    assert MlpConfig.full_scale_sr().widths[0] == 64 + 256 + 2 == 322
    assert MlpConfig.full_scale_mr().layer_inputs() == [321, 1024, 512 + 321, 256 + 321, 128 + 321]


def test_bad_configs():
    with pytest.raises(ValidationError):
        EncoderConfig(n_i=12)
    with pytest.raises(ValidationError):
        MlpConfig((5, 4, 2))
    with pytest.raises(ValidationError):
        MlpConfig((5, 4, 1), (1,))
    enc = EncoderConfig(n_i=16, c_hi=4, c_lo=8)
    with pytest.raises(ValidationError):
        Model(enc, MlpConfig((12, 4, 1)), MlpConfig((14, 4, 1)))


def test_wrong_image_shape():
    with pytest.raises(ValidationError):
        tiny_model().encode(np.zeros((1, 32, 32, 3)))


def test_zero_image_gives_zero_features():
    m = desk()
    emb = m.encode(np.zeros((1, 64, 64, 3)))
    assert not emb.hi.data.any() and not emb.lo.data.any()
    assert not m.decode_recon(emb).data.any()
    assert m.decode_recon(emb).shape == (1, 3, 128, 128)


def test_zero_weights_give_half():
    m = tiny_model()
    for n, p in m.params.items():
        if n.startswith(("mr.", "sr.")):
            p.data[...] = 0
    feat = ad.constant(np.random.default_rng(0).normal(size=(5, 12)))
    np.testing.assert_array_equal(m.mr_forward(feat, np.ones(5)).data, 0.5)
    np.testing.assert_array_equal(m.sr_forward(feat, np.ones(5), np.ones(5)).data, 0.5)


def test_width_mismatch_rejected():
    m = tiny_model()
    with pytest.raises(ValidationError):
        m.mr_forward(ad.constant(np.zeros((3, 11))), np.zeros(3))
    with pytest.raises(ValidationError):
        m.sr_forward(ad.constant(np.zeros((3, 12))), np.zeros(3))


def test_index_embedding_node_and_midpoint(rng):
    hi, lo = rng.normal(size=(8, 8, 3)), rng.normal(size=(2, 2, 5))
    # hi node (row 3, col 5) sits at p = (j + 0.5) / 2; the lo node (0, 1) at (j + 0.5) * 2
    vec, ok = index_embedding(hi, lo, (2.75, 1.75), n_i=4)
    assert ok
    np.testing.assert_array_equal(vec[:3], hi[3, 5])
    vec, _ = index_embedding(hi, lo, (2.0, 2.0), n_i=4)
    np.testing.assert_allclose(vec[3:], lo.mean(axis=(0, 1)), atol=1e-15)
    np.testing.assert_allclose(vec[:3], hi[3:5, 3:5].mean(axis=(0, 1)), atol=1e-15)


def test_index_embedding_oracle(rng):
    hi, lo = rng.normal(size=(16, 16, 3)), rng.normal(size=(4, 4, 2))
    for p in rng.uniform(0, 8, (100, 2)):
        vec, _ = index_embedding(hi, lo, p, n_i=8)
        ref = np.r_[bilinear_4tap(hi, 2 * p[0] - 0.5, 2 * p[1] - 0.5),
                    bilinear_4tap(lo, 0.5 * p[0] - 0.5, 0.5 * p[1] - 0.5)]
        np.testing.assert_allclose(vec, ref, atol=1e-6)


def test_index_embedding_out_of_view(rng):
    vec, ok = index_embedding(rng.normal(size=(8, 8, 3)), rng.normal(size=(2, 2, 2)), (4.0, 1), 4)
    assert not ok and not vec.any()


def test_features_match_index_embedding(rng):
    m = tiny_model()
    img = rng.random((1, 16, 16, 3))
    emb = m.encode(img)
    pix = rng.uniform(0, 16, (6, 2))
    feat, valid = m.features(emb, np.zeros(6, int), pix)
    hi = emb.hi.data[0].transpose(1, 2, 0)
    lo = emb.lo.data[0].transpose(1, 2, 0)
    for k in range(6):
        np.testing.assert_allclose(feat.data[k], index_embedding(hi, lo, pix[k], 16)[0], atol=1e-12)


def test_sr_gradient_through_s_mr(rng):
    m = tiny_model()
    feat = ad.constant(rng.normal(size=(4, 12)))
    s = ad.parameter(rng.uniform(0.2, 0.8, 4), "s_mr")
    out = ad.total(m.sr_forward(feat, np.zeros(4), s))
    ad.backward(out)
    g = s.grad.copy()
    assert np.all(g != 0)
    h = 1e-6
    for i in range(4):
        sp, sm = s.data.copy(), s.data.copy()
        sp[i] += h
        sm[i] -= h
        fd = (m.sr_forward(feat, np.zeros(4), ad.constant(sp)).data.sum()
              - m.sr_forward(feat, np.zeros(4), ad.constant(sm)).data.sum()) / (2 * h)
        assert abs(fd - g[i]) <= 1e-6 * max(1, abs(g[i]))


def test_outputs_in_unit_interval(rng):
    m = tiny_model()
    feat = ad.constant(rng.normal(size=(50, 12)) * 3)
    y = m.field(feat, rng.normal(size=50)).data
    assert np.all((y > 0) & (y < 1))


def test_only_sr_and_only_mr_heads():
    sr_only = tiny_model("only_sr")
    assert sr_only.sr_cfg.widths[0] == 13 and not sr_only.has_mr
    assert not tiny_model("only_mr").has_sr
    assert "recon.conv.w" not in tiny_model("no_unet").params


def test_init_statistics():
    m = desk(seed=3)
    w = m.params["mr.l1.w"].data
    assert abs(w.std() - np.sqrt(2 / w.shape[0])) < 0.1 * np.sqrt(2 / w.shape[0])
    assert all(not p.data.any() for n, p in m.params.items() if n.endswith(".b"))


def test_deterministic_construction_and_forward(rng):
    a, b = desk(seed=4, dtype=np.float32), desk(seed=4, dtype=np.float32)
    img = rng.random((1, 64, 64, 3))
    np.testing.assert_array_equal(a.encode(img).hi.data, b.encode(img).hi.data)


def test_checkpoint_round_trip(tmp_path):
    m = desk("no_ldiff", seed=2, dtype=np.float32)
    save_checkpoint(tmp_path / "m.bin", m, {"note": 1})
    assert (tmp_path / "m.bin").read_bytes()[:8] == b"SURSCKPT"
    back = load_checkpoint(tmp_path / "m.bin")
    assert back.arch == "no_ldiff" and back.config_dict() == m.config_dict()
    for n, p in m.params.items():
        np.testing.assert_array_equal(back.params[n].data, p.data)
