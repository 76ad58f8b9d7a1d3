"""Evaluation battery: lip-closure F1, Frechet expression distance, diversity,
beat alignment and mel cepstral distortion."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.fft import dct
from scipy.signal import find_peaks

from .codecs import LipDecoder, lip_distance

CLOSURE_THRESHOLD = 1e-2
BEAT_SIGMA = 3.0
MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)
MEL_FLOOR = 1e-2   # added before the log; synthetic mels are exactly zero in silence


class LengthMismatch(ValueError):
    pass


class DegenerateCovariance(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


class NoMotionBeats(ValueError):
    pass


class EmptyInput(ValueError):
    pass


# ---------------------------------------------------------------- event matching

def match_events(pred, gt, slack: int) -> int:
    """Greedy one-to-one matching of sorted frame indices within ``slack``."""
    pred, gt = np.sort(np.asarray(pred)), np.sort(np.asarray(gt))
    used = np.zeros(len(gt), dtype=bool)
    hits = 0
    for p in pred:
        lo = np.searchsorted(gt, p - slack, side="left")
        hi = np.searchsorted(gt, p + slack, side="right")
        for j in range(lo, hi):
            if not used[j]:
                used[j] = True
                hits += 1
                break
    return hits


def event_f1(pred, gt, slack: int) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if len(pred) == 0 and len(gt) == 0:
        return 1.0
    if len(pred) == 0 or len(gt) == 0:
        return 0.0
    hits = match_events(pred, gt, slack)
    precision, recall = hits / len(pred), hits / len(gt)
    return 0.0 if hits == 0 else 2 * precision * recall / (precision + recall)


def closure_frames(codes: np.ndarray, decoder: LipDecoder, threshold: float = CLOSURE_THRESHOLD) -> np.ndarray:
    return np.flatnonzero(lip_distance(codes, decoder) < threshold)


def f1_lip_closures(pred: np.ndarray, gt: np.ndarray, decoder: LipDecoder,
                    threshold: float = CLOSURE_THRESHOLD, slack: int = 1) -> float:
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} vs {len(gt)} frames")
    return event_f1(closure_frames(pred, decoder, threshold), closure_frames(gt, decoder, threshold), slack)


# ---------------------------------------------------------------- distributions

def _pool(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.reshape(-1, x.shape[-1]).astype(np.float64)
    return np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1, np.shape(s)[-1]) for s in x])


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    a = (a + a.T) / 2
    w, v = np.linalg.eigh(a)
    w = np.where(w < 0, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    s1 = sqrtm_psd(cov1)
    cross = sqrtm_psd(s1 @ cov2 @ s1)   # symmetric form of (cov1 cov2)^1/2, same trace
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(cross))
    return max(d, 0.0)


def frechet_expression_distance(pred, gt, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussians fit to pooled per-frame codes."""
    a, b = _pool(pred), _pool(gt)
    d = a.shape[1]
    covs = []
    for x in (a, b):
        if len(x) < 2:
            raise DegenerateCovariance("need at least two frames per side")
        c = np.atleast_2d(np.cov(x, rowvar=False))
        if len(x) < d + 1:
            c = c + eps * np.eye(d)
        covs.append(c)
    val = frechet_distance(a.mean(0), covs[0], b.mean(0), covs[1])
    if not np.isfinite(val):
        raise DegenerateCovariance("non-finite distance")
    return val


def diversity(samples) -> float:
    """Mean over channels of the population std of per-sequence mean vectors."""
    samples = list(samples)
    if len(samples) < 2:
        raise TooFewSamples("diversity needs at least two sequences")
    means = np.stack([np.asarray(s, dtype=np.float64).reshape(-1, np.shape(s)[-1]).mean(0) for s in samples])
    return float(means.std(0).mean())


# ---------------------------------------------------------------- beats

def onset_strength(mel: np.ndarray) -> np.ndarray:
    """Half-wave rectified frame-to-frame flux summed over mel bins (frame 0 is 0)."""
    mel = np.asarray(mel, dtype=np.float64)
    flux = np.maximum(np.diff(mel, axis=0), 0.0).sum(1)
    return np.concatenate([[0.0], flux])


def audio_beats(mel: np.ndarray) -> np.ndarray:
    o = onset_strength(mel)
    if len(o) < 3:
        return np.zeros(0, dtype=int)
    peaks, _ = find_peaks(o, prominence=o.mean() + o.std())
    return peaks.astype(int)


def kinetic_velocity(motion: np.ndarray) -> np.ndarray:
    """``v[t] = |x[t] - x[t-1]|`` for ``t >= 1``; ``v[0]`` repeats ``v[1]``."""
    motion = np.asarray(motion, dtype=np.float64)
    v = np.linalg.norm(np.diff(motion, axis=0), axis=1)
    return np.concatenate([v[:1], v])


def motion_beats(motion: np.ndarray) -> np.ndarray:
    v = kinetic_velocity(motion)
    if len(v) < 3:
        return np.zeros(0, dtype=int)
    mid = v[1:-1]
    return np.flatnonzero((mid < v[:-2]) & (mid <= v[2:])) + 1


def beat_align_from_beats(audio_b, motion_b, sigma: float = BEAT_SIGMA) -> float:
    audio_b, motion_b = np.asarray(audio_b, dtype=np.float64), np.asarray(motion_b, dtype=np.float64)
    if len(motion_b) == 0:
        raise NoMotionBeats("motion has no kinetic-velocity minima")
    if len(audio_b) == 0:
        return 0.0
    d = np.min(np.abs(motion_b[:, None] - audio_b[None, :]), axis=1)
    return float(np.mean(np.exp(-d ** 2 / (2 * sigma ** 2))))


def beat_align(mel: np.ndarray, motion: np.ndarray, sigma: float = BEAT_SIGMA) -> float:
    if len(mel) != len(motion):
        raise LengthMismatch(f"{len(mel)} audio frames vs {len(motion)} motion frames")
    return beat_align_from_beats(audio_beats(mel), motion_beats(motion), sigma)


def shuffled_beat_align(mel, motion, rng: np.random.Generator, shuffles: int = 20,
                        sigma: float = BEAT_SIGMA) -> float:
    """Baseline: same motion against circularly time-shifted audio, averaged over shifts."""
    n = len(mel)
    mb = motion_beats(motion)
    ab = audio_beats(mel)
    scores = []
    for _ in range(shuffles):
        shift = int(rng.integers(n // 4, 3 * n // 4 + 1))
        scores.append(beat_align_from_beats((ab + shift) % n, mb, sigma))
    return float(np.mean(scores))


# ---------------------------------------------------------------- MCD

def mel_cepstrum(mel: np.ndarray, n_cep: int = 13, eps: float = MEL_FLOOR) -> np.ndarray:
    logm = np.log(np.maximum(np.asarray(mel, dtype=np.float64), 0.0) + eps)
    return dct(logm, type=2, axis=1, norm="ortho")[:, 1:n_cep + 1]


def dtw_path(cost: np.ndarray) -> list[tuple[int, int]]:
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    # anti-diagonal sweep keeps the recursion vectorized
    for s in range(2, n + m + 1):
        i = np.arange(max(1, s - m), min(n, s - 1) + 1)
        j = s - i
        best = np.minimum(np.minimum(acc[i - 1, j - 1], acc[i - 1, j]), acc[i, j - 1])
        acc[i, j] = cost[i - 1, j - 1] + best
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        steps = [(acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1)]
        _, i, j = min(steps, key=lambda s: s[0])
        path.append((i - 1, j - 1))
    return path[::-1]


def mcd(pred: np.ndarray, gt: np.ndarray, n_cep: int = 13, eps: float = MEL_FLOOR) -> float:
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyInput("mel spectrograms must be nonempty")
    return mcd_cepstra(mel_cepstrum(pred, n_cep, eps), mel_cepstrum(gt, n_cep, eps))


def mcd_cepstra(a: np.ndarray, b: np.ndarray) -> float:
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    path = dtw_path(cost)
    ii, jj = np.array(path).T
    return float(MCD_CONST * cost[ii, jj].mean())


# ---------------------------------------------------------------- report

@dataclass
class EvalReport:
    f1_lips: float = float("nan")
    fd_e: float = float("nan")
    div_h: float = float("nan")
    div_e: float = float("nan")
    bc_h: float = float("nan")
    bc_e: float = float("nan")
    mcd: float = float("nan")
    frames: int = 0
    sequences: int = 0
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    METRICS = ("f1_lips", "fd_e", "div_h", "div_e", "bc_h", "bc_e", "mcd")

    def has_nan(self) -> bool:
        return any(not np.isfinite(getattr(self, k)) for k in self.METRICS)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=float)

    def pretty(self) -> str:
        lines = [f"{k:>8}: {getattr(self, k):.4f}" for k in self.METRICS]
        lines.append(f"{'frames':>8}: {self.frames}")
        lines.append(f"{'seqs':>8}: {self.sequences}")
        for k, v in self.extra.items():
            lines.append(f"{k:>8}: {v:.4f}" if isinstance(v, float) else f"{k:>8}: {v}")
        return "\n".join(lines)


def evaluate(pred_records, gt_records, decoder: LipDecoder, head_latents=None, gt_head_latents=None,
             sigma: float = BEAT_SIGMA, mcd_frames: int | None = 400, config: dict | None = None) -> EvalReport:
    """Score generated records against ground truth.

    Each record needs ``mel`` and ``face``; head beats use ``head_latents`` if
    given (one ``(n, 8)`` array per record) else the raw pose.
    """
    pred_records, gt_records = list(pred_records), list(gt_records)
    if len(pred_records) != len(gt_records):
        raise LengthMismatch("prediction and ground-truth sets differ in size")
    f1s, bch, bce, mcds = [], [], [], []
    heads = head_latents or [r.head_pose for r in pred_records]
    for i, (p, g) in enumerate(zip(pred_records, gt_records)):
        f1s.append(f1_lip_closures(p.face, g.face, decoder))
        for store, motion in ((bch, heads[i]), (bce, p.face)):
            try:
                store.append(beat_align(p.mel, motion, sigma))
            except NoMotionBeats:
                store.append(0.0)
        k = mcd_frames or len(p.mel)
        mcds.append(mcd(p.mel[:k], g.mel[:k]))
    rep = EvalReport(
        f1_lips=float(np.mean(f1s)),
        fd_e=frechet_expression_distance([p.face for p in pred_records], [g.face for g in gt_records]),
        div_h=diversity(heads) if len(heads) > 1 else 0.0,
        div_e=diversity([p.face for p in pred_records]) if len(pred_records) > 1 else 0.0,
        bc_h=float(np.mean(bch)), bc_e=float(np.mean(bce)), mcd=float(np.mean(mcds)),
        frames=int(sum(len(p.mel) for p in pred_records)), sequences=len(pred_records),
        config=config or {})
    return rep
