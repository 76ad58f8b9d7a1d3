import math

import numpy as np
import pytest

from avflow import ndgrad as nd
from avflow.avdit import (AUDIO_DIM, VARIANTS, AVDiT, ConditionBundle, ConfigMismatch, DitConfig,
                          FrameCountMismatch, fuse)
from avflow.layers import (Band, OddHeadDim, band_attention, dense_attention_reference, init_attention,
                           rotary_embed, window_mask)

SMALL = DitConfig(blocks=2, width=32, hidden=64, heads=4, face_dim=16)


def _inputs(rng, b=2, n=30, cfg=SMALL):
    return (rng.standard_normal((b, n, AUDIO_DIM)), rng.standard_normal((b, n, cfg.vision_dim)),
            rng.random(b), ConditionBundle(rng.standard_normal((b, n, 29)), rng.standard_normal((b, n, 56)),
                                           rng.standard_normal((b, n, 29))))


def test_output_shapes_full_face_width():
    cfg = DitConfig(blocks=1, width=32, hidden=64, face_dim=256)
    xa, xv, t, cond = _inputs(np.random.default_rng(0), b=1, n=12, cfg=cfg)
    va, vv = AVDiT(cfg)(xa, xv, t, cond)
    assert va.shape == (1, 12, 80) and vv.shape == (1, 12, 264)


def test_fuse_zero_is_identity():
    rng = np.random.default_rng(0)
    xa, xv = nd.tensor(rng.standard_normal((2, 5, 4))), nd.tensor(rng.standard_normal((2, 5, 4)))
    z = lambda *s: nd.tensor(np.zeros(s))
    ya, yv = fuse(xa, xv, z(8, 4), z(4), z(8, 4), z(4))
    assert ya.data.tobytes() == xa.data.tobytes() and yv.data.tobytes() == xv.data.tobytes()


def test_fuse_hand_example():
    ya, _ = fuse(nd.tensor([[1.0]]), nd.tensor([[2.0]]), nd.tensor([[1.0], [1.0]]), nd.tensor([0.0]),
                 nd.tensor(np.zeros((2, 1))), nd.tensor([0.0]))
    assert ya.data[0, 0] == 4.0


def test_fuse_dimension_mismatch():
    with pytest.raises(nd.ShapeMismatch):
        fuse(nd.tensor(np.ones((1, 3))), nd.tensor(np.ones((1, 4))), nd.tensor(np.zeros((7, 3))),
             nd.tensor(np.zeros(3)), nd.tensor(np.zeros((7, 3))), nd.tensor(np.zeros(3)))


def test_cross_modal_gradient_probe():
    rng = np.random.default_rng(0)
    xa = nd.tensor(rng.standard_normal((1, 3, 4)), requires_grad=True)
    xv = nd.tensor(rng.standard_normal((1, 3, 4)), requires_grad=True)
    U = np.zeros((8, 4))
    z = nd.tensor(np.zeros(4))
    ya, _ = fuse(xa, xv, nd.tensor(U), z, nd.tensor(np.zeros((8, 4))), z)
    assert not np.any(nd.backward(nd.sum(ya * ya), params=[xv])[xv])
    U[4:] = rng.standard_normal((4, 4))
    ya, _ = fuse(xa, xv, nd.tensor(U), z, nd.tensor(np.zeros((8, 4))), z)
    assert np.any(nd.backward(nd.sum(ya * ya), params=[xv])[xv])


def test_zero_fusion_matches_separate_bitwise():
    xa, xv, t, cond = _inputs(np.random.default_rng(1))
    a = AVDiT(SMALL, "avflow", seed=5)
    s = AVDiT(SMALL, "separate", seed=5)
    for x, y in zip(a(xa, xv, t, cond), s(xa, xv, t, cond)):
        assert x.data.tobytes() == y.data.tobytes()


def test_nonzero_fusion_couples_streams():
    rng = np.random.default_rng(2)
    xa, xv, t, cond = _inputs(rng)
    m = AVDiT(SMALL, "avflow", seed=0)
    for k, p in m.params.items():
        if k.startswith("fusion."):
            p.data = (rng.standard_normal(p.shape) * 0.1).astype(np.float32)
    base = m(xa, xv, t, cond)[0].data
    xv2 = xv + 1.0
    assert np.abs(m(xa, xv2, t, cond)[0].data - base).max() > 1e-4
    s = AVDiT(SMALL, "separate", seed=0)
    assert np.array_equal(s(xa, xv, t, cond)[0].data, s(xa, xv2, t, cond)[0].data)


@pytest.mark.parametrize("variant", VARIANTS)
def test_causality_probe(variant):
    rng = np.random.default_rng(3)
    n = 40
    xa, xv, t, cond = _inputs(rng, b=1, n=n)
    cond.audio_context = rng.standard_normal((1, n, AUDIO_DIM))
    m = AVDiT(SMALL, variant, guidance="audiovisual", seed=1)
    va, vv = (x.data for x in m(xa, xv, t, cond))
    for _ in range(6):
        i = int(rng.integers(0, n - 4))
        tok = cond.tokens.copy()
        tok[:, i + 3:] += rng.standard_normal(tok[:, i + 3:].shape)
        pert = ConditionBundle(tok, cond.participant_features, cond.participant_tokens, cond.audio_context)
        pa, pv = (x.data for x in m(xa, xv, t, pert))
        assert np.array_equal(pa[:, :i + 1], va[:, :i + 1])
        assert np.array_equal(pv[:, :i + 1], vv[:, :i + 1])


def test_lookahead_is_used():
    rng = np.random.default_rng(4)
    xa, xv, t, cond = _inputs(rng, b=1, n=30)
    m = AVDiT(SMALL, seed=0)
    va = m(xa, xv, t, cond)[0].data
    tok = cond.tokens.copy()
    tok[:, 12] += 1.0
    pa = m(xa, xv, t, ConditionBundle(tok, cond.participant_features, cond.participant_tokens))[0].data
    assert np.abs(pa[:, 10] - va[:, 10]).max() > 0
    assert np.array_equal(pa[:, :10], va[:, :10])


def test_unguided_ignores_participant_streams():
    rng = np.random.default_rng(5)
    xa, xv, t, cond = _inputs(rng)
    m = AVDiT(SMALL, guidance="none", seed=0)
    perm = ConditionBundle(cond.tokens, cond.participant_features[:, ::-1], cond.participant_tokens[:, ::-1])
    assert np.array_equal(m(xa, xv, t, cond)[1].data, m(xa, xv, t, perm)[1].data)
    g = AVDiT(SMALL, guidance="audiovisual", seed=0)
    assert not np.array_equal(g(xa, xv, t, cond)[1].data, g(xa, xv, t, perm)[1].data)


@pytest.mark.parametrize("variant", VARIANTS)
def test_param_count_formula(variant):
    for cfg in (SMALL, DitConfig(blocks=3, width=64, hidden=96, heads=2, face_dim=24)):
        assert AVDiT(cfg, variant).param_count() == AVDiT.param_count_formula(cfg, variant)


def test_shared_has_fewer_params():
    for cfg in (SMALL, DitConfig(), DitConfig.paper()):
        assert AVDiT.param_count_formula(cfg, "shared") < AVDiT.param_count_formula(cfg, "avflow")


def test_frame_and_config_errors():
    rng = np.random.default_rng(0)
    xa, xv, t, cond = _inputs(rng)
    m = AVDiT(SMALL)
    with pytest.raises(FrameCountMismatch):
        m(xa[:, :-1], xv, t, cond)
    with pytest.raises(ConfigMismatch):
        m(xa, xv[..., :-1], t, cond)
    with pytest.raises(ConfigMismatch):
        DitConfig(width=30, heads=4)
    with pytest.raises(ConfigMismatch):
        DitConfig(window=4, lookahead=4)
    with pytest.raises(ConfigMismatch):
        AVDiT(SMALL, "tiled")


# ---------------------------------------------------------------- masks, rotary, attention

def test_window_mask_rule():
    m = window_mask(40, 10, 2)
    assert list(np.flatnonzero(m[20])) == list(range(13, 23))
    c = window_mask(20, 10, 0)
    assert not np.any(np.triu(c, 1))
    small = window_mask(5, 10, 2)
    for i in range(5):
        assert list(np.flatnonzero(small[i])) == list(range(0, min(5, i + 3)))


def test_band_matches_dense_mask():
    for lookahead in (0, 2):
        band = Band.from_window(10, lookahead)
        dense = window_mask(25, 10, lookahead)
        valid = band.mask(25)
        for i in range(25):
            cols = (i + band.offsets)[valid[i]]
            assert list(cols) == list(np.flatnonzero(dense[i]))


def test_band_attention_matches_dense_reference():
    rng = np.random.default_rng(0)
    params = {}
    init_attention(params, "a", 16, rng)
    x = rng.standard_normal((2, 23, 16))
    with nd.precision(np.float64):
        for p in params.values():
            p.data = p.data.astype(np.float64)
        out = band_attention(params, "a", nd.constant(x), 4, Band.from_window(10, 2)).data
    ref = dense_attention_reference(params, "a", x, 4, window_mask(23, 10, 2))
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_rotary_properties():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 8))
    with nd.precision(np.float64):
        r = rotary_embed(nd.constant(x)).data
    np.testing.assert_allclose(r[0], x[0], atol=1e-15)
    pn = lambda z: np.hypot(z[:, 0::2], z[:, 1::2])
    np.testing.assert_allclose(pn(r), pn(x), rtol=1e-12)
    q, k = rng.standard_normal(8), rng.standard_normal(8)
    with nd.precision(np.float64):
        def dot(m, n):
            rq = rotary_embed(nd.constant(q[None]), positions=[m]).data[0]
            rk = rotary_embed(nd.constant(k[None]), positions=[n]).data[0]
            return rq @ rk
        assert math.isclose(dot(5, 2), dot(13, 10), rel_tol=1e-10)
        assert math.isclose(dot(0, 7), dot(4, 11), rel_tol=1e-10)
    with pytest.raises(OddHeadDim):
        rotary_embed(nd.constant(np.ones((3, 5))))
