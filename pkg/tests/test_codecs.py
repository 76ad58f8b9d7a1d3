import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avflow import codecs as cd
from avflow.ndgrad import constant


def test_token_sequence_shape():
    seq = cd.TokenSequence(np.zeros((5, 29)))
    assert len(seq) == 5 and seq.fps == 86
    with pytest.raises(cd.DimensionMismatch):
        cd.TokenSequence(np.zeros((5, 28)))


def test_quaternion_examples():
    np.testing.assert_allclose(cd.rotmat_to_quat(np.eye(3)), [1, 0, 0, 0])
    np.testing.assert_allclose(cd.rotmat_to_quat(np.diag([1.0, -1.0, -1.0])), [0, 1, 0, 0], atol=1e-12)
    rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    q = cd.rotmat_to_quat(rz)
    np.testing.assert_allclose(q, [np.sqrt(0.5), 0, 0, np.sqrt(0.5)], atol=1e-12)
    np.testing.assert_allclose(cd.quat_to_rotmat(q), rz, atol=1e-12)


def test_not_a_rotation():
    with pytest.raises(cd.NotARotation):
        cd.rotmat_to_quat(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(cd.NotARotation):
        cd.rotmat_to_quat(np.eye(3) * 1.1)
    with pytest.raises(cd.NotARotation):
        cd.rotmat_to_quat(np.eye(2))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_rotation_roundtrip(v):
    q = np.array(v) / np.linalg.norm(v)
    r = cd.quat_to_rotmat(q)
    q2 = cd.rotmat_to_quat(r)
    assert abs(np.linalg.norm(q2) - 1) < 1e-5 and q2[0] >= 0
    np.testing.assert_allclose(cd.quat_to_rotmat(q2), r, atol=1e-4)
    # q and -q are the same rotation; at w = 0 either sign is canonical
    assert min(np.abs(q2 - q).max(), np.abs(q2 + q).max()) < 1e-6


def test_pose_from_euler_is_canonical():
    n = 50
    rng = np.random.default_rng(0)
    pose = cd.pose_from_euler(rng.uniform(-3, 3, n), rng.uniform(-1.5, 1.5, n), rng.uniform(-3, 3, n),
                              rng.standard_normal((n, 3)))
    assert pose.shape == (n, 7)
    np.testing.assert_allclose(np.linalg.norm(pose[:, :4], axis=1), 1, atol=1e-12)
    assert np.all(pose[:, 0] >= 0)


# ---------------------------------------------------------------- head VAE

def _smooth_poses(seed, n=160):
    rng = np.random.default_rng(seed)
    t = np.arange(n)
    ph = rng.uniform(0, 6, 4)
    return cd.pose_from_euler(0.15 * np.sin(t / 17 + ph[0]), 0.2 * np.sin(t / 29 + ph[1]),
                              0.05 * np.sin(t / 23 + ph[2]),
                              0.02 * np.stack([np.sin(t / 31 + ph[3]), np.cos(t / 37), np.sin(t / 41)], 1))


@pytest.fixture(scope="module")
def vae():
    return cd.head_vae_train([_smooth_poses(s) for s in range(8)], cd.HeadVaeConfig(steps=400, seed=0))


def test_vae_heldout_roundtrip(vae):
    held = [_smooth_poses(s) for s in (100, 101)]
    assert vae.reconstruction_error(held) < 5e-2


def test_vae_train_roundtrip_within_train_error(vae):
    train = [_smooth_poses(s) for s in range(8)]
    assert vae.reconstruction_error(train) <= vae.train_error * 1.001 + 1e-9


def test_vae_constant_pose_overfits():
    pose = np.tile(cd.pose_from_euler(np.array([0.1]), np.array([-0.2]), np.array([0.05]),
                                      np.array([[0.01, 0.02, -0.01]])), (80, 1))
    v = cd.head_vae_train([pose], cd.HeadVaeConfig(steps=200))
    assert np.mean(np.abs(v.decode(v.encode(pose)) - pose)) < 1e-2


def test_vae_decode_unit_quaternions_and_determinism(vae):
    z = np.random.default_rng(0).standard_normal((40, 8))
    pose = vae.decode(z)
    np.testing.assert_allclose(np.linalg.norm(pose[:, :4], axis=1), 1, atol=1e-5)
    assert np.all(pose[:, 0] >= 0)
    x = _smooth_poses(5)
    assert vae.encode(x).tobytes() == vae.encode(x).tobytes()
    assert vae.encode(x).shape == (160, 8)


def test_vae_shift_consistency(vae):
    x = _smooth_poses(7, 200)
    s = 5
    full = vae.encode(x)
    shifted = vae.encode(x[s:])
    margin = vae.config.radius
    inner = slice(margin, len(shifted) - margin)
    assert np.mean(np.abs(shifted[inner] - full[s:][inner])) < 1e-1


def test_vae_kl_zero_at_prior():
    assert cd.kl_divergence(constant(np.zeros((3, 8))), constant(np.zeros((3, 8)))).item() == 0.0


def test_vae_errors(tmp_path, vae):
    with pytest.raises(cd.InsufficientData):
        cd.head_vae_train([np.zeros((10, 7))], cd.HeadVaeConfig(window=64))
    with pytest.raises(cd.ModelNotLoaded):
        cd.HeadVAE().encode(np.zeros((10, 7)))
    with pytest.raises(cd.ModelNotLoaded):
        cd.head_encode(None, np.zeros((10, 7)))
    vae.save(tmp_path / "vae.avfl")
    back = cd.HeadVAE.load(tmp_path / "vae.avfl")
    x = _smooth_poses(3)
    np.testing.assert_array_equal(back.encode(x), vae.encode(x))


# ---------------------------------------------------------------- lip decoder

def test_lip_decoder_construction():
    dec = cd.load_lip_decoder(16)
    code = np.zeros(16)
    assert cd.lip_distance(code, dec) == 0.0
    np.testing.assert_allclose(cd.lip_vertices(code, dec), dec.bias.reshape(-1, 3))
    code[0] = 1.0
    assert abs(cd.lip_distance(code, dec) - dec.gain) < 1e-6
    rng = np.random.default_rng(0)
    codes = rng.standard_normal((30, 16))
    np.testing.assert_allclose(cd.lip_distance(codes, dec), dec.gain * np.abs(codes[:, 0]), atol=1e-6)
    with pytest.raises(cd.DimensionMismatch):
        cd.lip_vertices(np.zeros((3, 15)), dec)


def test_shipped_decoder_matches_seed():
    for fd in (16, 256):
        shipped = cd.load_lip_decoder(fd)
        fresh = cd.make_lip_decoder(fd)
        np.testing.assert_allclose(shipped.weight, fresh.weight, atol=1e-7)
        assert cd._shipped_path(fd).exists()
