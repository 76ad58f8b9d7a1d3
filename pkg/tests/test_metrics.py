import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avflow import metrics as mt
from avflow.codecs import make_lip_decoder

DEC = make_lip_decoder(4)


def _codes(closed_frames, n=40):
    c = np.full((n, 4), 0.5)
    c[list(closed_frames), 0] = 0.0
    return c


def test_f1_identical_and_empty():
    gt = _codes([3, 10, 20])
    assert mt.f1_lip_closures(gt, gt, DEC) == 1.0
    assert mt.f1_lip_closures(_codes([]), gt, DEC) == 0.0
    with pytest.raises(mt.LengthMismatch):
        mt.f1_lip_closures(gt[:-1], gt, DEC)


def test_f1_hand_count():
    gt = _codes([5, 15, 25, 35])
    pred = _codes([6, 14, 25, 30])   # 3 matched within 1 frame, 30 spurious, 35 missed
    assert mt.f1_lip_closures(pred, gt, DEC) == 0.75


def test_fd_identical_and_closed_form():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((500, 3))
    assert abs(mt.frechet_expression_distance(a, a)) < 1e-6
    x = rng.normal(0, 1, (200_000, 1))
    assert abs(mt.frechet_expression_distance(x, rng.normal(1, 1, (200_000, 1))) - 1.0) < 0.05
    assert abs(mt.frechet_expression_distance(x, rng.normal(0, 2, (200_000, 1))) - 1.0) < 0.05


def test_fd_symmetric_multivariate():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((300, 5)) @ rng.standard_normal((5, 5))
    b = rng.standard_normal((300, 5)) + 0.3
    assert abs(mt.frechet_expression_distance(a, b) - mt.frechet_expression_distance(b, a)) < 1e-6


def test_fd_matches_scipy_sqrtm():
    from scipy.linalg import sqrtm
    rng = np.random.default_rng(2)
    a = rng.standard_normal((400, 4)) @ rng.standard_normal((4, 4))
    b = rng.standard_normal((400, 4))
    m1, m2 = a.mean(0), b.mean(0)
    c1, c2 = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    ref = np.sum((m1 - m2) ** 2) + np.trace(c1 + c2 - 2 * np.real(sqrtm(c1 @ c2)))
    assert abs(mt.frechet_expression_distance(a, b) - ref) < 1e-8


def test_fd_small_sample_regularized():
    rng = np.random.default_rng(3)
    assert np.isfinite(mt.frechet_expression_distance(rng.standard_normal((3, 8)), rng.standard_normal((4, 8))))
    with pytest.raises(mt.DegenerateCovariance):
        mt.frechet_expression_distance(np.zeros((1, 2)), np.zeros((5, 2)))


def test_diversity():
    s = np.ones((10, 3))
    assert mt.diversity([s, s]) == 0.0
    assert mt.diversity([np.zeros((5, 1)), np.full((5, 1), 2.0)]) == 1.0
    rng = np.random.default_rng(0)
    seqs = [rng.standard_normal((20, 4)) for _ in range(5)]
    assert math.isclose(mt.diversity([2 * x for x in seqs]), 2 * mt.diversity(seqs))
    assert math.isclose(mt.diversity(seqs[::-1]), mt.diversity(seqs))
    with pytest.raises(mt.TooFewSamples):
        mt.diversity([s])


def test_beat_align_formula():
    assert mt.beat_align_from_beats([10, 40], [10, 40]) == 1.0
    assert abs(mt.beat_align_from_beats([20], [23], sigma=3.0) - math.exp(-0.5)) < 1e-3
    with pytest.raises(mt.NoMotionBeats):
        mt.beat_align_from_beats([1], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 500), min_size=1, max_size=10),
       st.lists(st.integers(0, 500), min_size=1, max_size=10), st.integers(1, 5))
def test_beat_align_bounded_and_monotone(audio, motion, push):
    audio, motion = np.array(audio), np.array(motion)
    s = mt.beat_align_from_beats(audio, motion)
    assert 0 <= s <= 1
    d = np.min(np.abs(motion[:, None] - audio[None]), axis=1)
    if d.min() <= 30:  # farther than that the Gaussian underflows to 0.0
        assert s > 0
    # move each motion beat further from its nearest audio beat
    nearest = audio[np.argmin(np.abs(motion[:, None] - audio[None]), axis=1)]
    direction = np.where(motion >= nearest, 1, -1)
    farther = motion + direction * push
    farther_d = np.min(np.abs(farther[:, None] - audio[None]), axis=1)
    orig_d = np.min(np.abs(motion[:, None] - audio[None]), axis=1)
    if np.all(farther_d >= orig_d):
        assert mt.beat_align_from_beats(audio, farther) <= s + 1e-12


def test_onset_and_motion_beats_detect_constructed_events():
    n = 200
    mel = np.zeros((n, 80))
    for t0 in (30, 90, 150):
        mel[t0:t0 + 20] = np.exp(-np.arange(20) / 5)[:, None]
    assert list(mt.audio_beats(mel)) == [30, 90, 150]
    t = np.arange(n)
    motion = sum(np.exp(-0.5 * ((t - c) / 3.0) ** 2) for c in (30, 90, 150))[:, None]
    assert {30, 90, 150} <= set(mt.motion_beats(motion))
    assert mt.beat_align(mel, motion) > 0.5
    with pytest.raises(mt.LengthMismatch):
        mt.beat_align(mel[:-1], motion)


def test_mcd_cases():
    rng = np.random.default_rng(0)
    mel = rng.uniform(0.01, 1.0, (30, 80))
    assert mt.mcd(mel, mel) == 0.0
    stretched = np.repeat(mel, 2, axis=0)
    assert mt.mcd(stretched, mel) == 0.0
    cep = mt.mel_cepstrum(mel)
    shifted = cep.copy()
    shifted[:, 4] += 0.37
    assert abs(mt.mcd_cepstra(shifted, cep) - mt.MCD_CONST * 0.37) < 1e-4
    assert abs(mt.MCD_CONST - 10 / math.log(10) * math.sqrt(2)) < 1e-15
    with pytest.raises(mt.EmptyInput):
        mt.mcd(np.zeros((0, 80)), mel)


def test_mcd_float32_serialization_stable():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (20, 80)).astype(np.float32)
    b = rng.uniform(0, 1, (25, 80)).astype(np.float32)
    back = np.frombuffer(a.tobytes(), dtype=np.float32).reshape(a.shape)
    assert mt.mcd(a, b) == mt.mcd(back, b)


def test_dtw_matches_bruteforce_recursion():
    rng = np.random.default_rng(2)
    cost = rng.uniform(0, 1, (7, 9))
    acc = np.full((8, 10), np.inf)
    acc[0, 0] = 0
    for i in range(1, 8):
        for j in range(1, 10):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    path = mt.dtw_path(cost)
    assert path[0] == (0, 0) and path[-1] == (6, 8)
    assert abs(sum(cost[i, j] for i, j in path) - acc[7, 9]) < 1e-12


def test_event_f1_order_invariant():
    assert mt.event_f1([5, 1, 9], [9, 5, 2], 1) == mt.event_f1([1, 5, 9], [2, 5, 9], 1)


def test_report_json_roundtrip():
    rep = mt.EvalReport(f1_lips=0.9, fd_e=0.1, div_h=0.2, div_e=0.3, bc_h=0.4, bc_e=0.5, mcd=6.0,
                        frames=10, sequences=2)
    import json
    assert json.loads(rep.to_json())["bc_e"] == 0.5
    assert not rep.has_nan()
    assert mt.EvalReport().has_nan()
