"""Representations: character tokens, head-pose quaternions, the temporal
head-pose VAE and the toy lip-vertex decoder used by the lip metrics.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .layers import Band, block, init_block, init_linear, linear
from .ndgrad import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

FPS = 86
CHARSET = "-|'abcdefghijklmnopqrstuvwxyz"   # CTC blank, word separator, apostrophe, letters
TOKEN_DIM = len(CHARSET)
POSE_DIM = 7
LATENT_DIM = 8


class NotARotation(ValueError):
    pass


class InsufficientData(ValueError):
    pass


class ModelNotLoaded(RuntimeError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class TokenSequence:
    logits: np.ndarray
    fps: int = FPS

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float32)
        if self.logits.ndim != 2 or self.logits.shape[1] != TOKEN_DIM:
            raise DimensionMismatch(f"token logits must be (n, {TOKEN_DIM}), got {self.logits.shape}")
        if self.fps != FPS:
            raise ValueError(f"token streams run at {FPS} fps")

    def __len__(self):
        return len(self.logits)

    def argmax_chars(self) -> str:
        return "".join(CHARSET[i] for i in self.logits.argmax(1))


# ---------------------------------------------------------------- quaternions

def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices from unit quaternions ``(w, x, y, z)``; works on ``(..., 4)``."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return r.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R, atol: float = 1e-4) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for a rotation matrix (or a stack of them)."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise NotARotation(f"expected (..., 3, 3), got {R.shape}")
    eye = np.eye(3)
    if not np.allclose(np.swapaxes(R, -1, -2) @ R, eye, atol=atol) or \
            not np.allclose(np.linalg.det(R), 1.0, atol=atol):
        raise NotARotation("matrix is not orthonormal with determinant +1")
    flat = R.reshape(-1, 3, 3)
    out = np.empty((len(flat), 4))
    for i, m in enumerate(flat):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        out[i] = q
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    out = canonicalize_quat(out)
    return out.reshape(R.shape[:-2] + (4,))


def canonicalize_quat(q: np.ndarray) -> np.ndarray:
    """Flip sign so that ``w >= 0`` (removes the double cover)."""
    q = np.array(q, dtype=np.float64)
    flip = q[..., 0] < 0
    q[flip] *= -1
    return q


def euler_to_rotmat(pitch, yaw, roll) -> np.ndarray:
    """``R = Rz(roll) @ Ry(yaw) @ Rx(pitch)`` for arrays of angles in radians."""
    pitch, yaw, roll = (np.asarray(a, dtype=np.float64) for a in (pitch, yaw, roll))
    cx, sx = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cz, sz = np.cos(roll), np.sin(roll)
    one, zero = np.ones_like(cx), np.zeros_like(cx)
    rx = np.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(cx.shape + (3, 3))
    ry = np.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(cx.shape + (3, 3))
    rz = np.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(cx.shape + (3, 3))
    return rz @ ry @ rx


def pose_from_euler(pitch, yaw, roll, translation) -> np.ndarray:
    """Raw ``(n, 7)`` head pose: canonical quaternion followed by translation."""
    q = rotmat_to_quat(euler_to_rotmat(pitch, yaw, roll))
    return np.concatenate([q, np.asarray(translation, dtype=np.float64)], axis=-1)


def normalize_pose(pose: np.ndarray) -> np.ndarray:
    pose = np.array(pose, dtype=np.float64)
    q = pose[..., :4]
    q /= np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-12)
    pose[..., :4] = canonicalize_quat(q)
    return pose


# ---------------------------------------------------------------- head VAE

@dataclass
class HeadVaeConfig:
    width: int = 32
    heads: int = 2
    radius: int = 8
    hidden: int = 64
    kl_weight: float = 1e-3
    warmup_frac: float = 0.1
    window: int = 64
    batch: int = 16
    steps: int = 600
    lr: float = 3e-3
    seed: int = 0


class HeadVAE:
    """Temporal VAE over ``(n, 7)`` head poses with an 8-d per-frame latent.

    Encoder and decoder are each one banded transformer encoder layer between
    linear maps; inputs are z-normalized with training-set statistics.
    """

    def __init__(self, config: HeadVaeConfig | None = None):
        self.config = config or HeadVaeConfig()
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 11])
        self.params: dict = {}
        init_linear(self.params, "enc.in", POSE_DIM, cfg.width, rng)
        init_block(self.params, "enc.block0", cfg.width, cfg.hidden, rng)
        init_linear(self.params, "enc.mu", cfg.width, LATENT_DIM, rng)
        init_linear(self.params, "enc.logvar", cfg.width, LATENT_DIM, rng, scale=0.1)
        init_linear(self.params, "dec.in", LATENT_DIM, cfg.width, rng)
        init_block(self.params, "dec.block0", cfg.width, cfg.hidden, rng)
        init_linear(self.params, "dec.out", cfg.width, POSE_DIM, rng)
        self.mean = np.zeros(POSE_DIM)
        self.std = np.ones(POSE_DIM)
        self.trained = False
        self.train_error = float("nan")

    @property
    def band(self) -> Band:
        return Band.symmetric(self.config.radius)

    def _encode(self, xn: np.ndarray):
        p, cfg = self.params, self.config
        h = linear(p, "enc.in", nd.constant(xn))
        h = block(p, "enc.block0", h, cfg.heads, self.band)
        return linear(p, "enc.mu", h), linear(p, "enc.logvar", h)

    def _decode(self, z):
        p, cfg = self.params, self.config
        h = linear(p, "dec.in", z if isinstance(z, nd.Tensor) else nd.constant(z))
        h = block(p, "dec.block0", h, cfg.heads, self.band)
        return linear(p, "dec.out", h)

    def _check(self):
        if not self.trained:
            raise ModelNotLoaded("head VAE has not been trained or loaded")

    def encode(self, poses: np.ndarray) -> np.ndarray:
        """Posterior means, ``(n, 8)`` or ``(B, n, 8)``."""
        self._check()
        poses = np.asarray(poses, dtype=np.float64)
        single = poses.ndim == 2
        x = poses[None] if single else poses
        if x.shape[-1] != POSE_DIM:
            raise DimensionMismatch(f"poses must be {POSE_DIM} wide")
        with nd.no_grad():
            mu, _ = self._encode((x - self.mean) / self.std)
        out = mu.data.astype(np.float64)
        return out[0] if single else out

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """Raw poses with unit, sign-canonical quaternions."""
        self._check()
        z = np.asarray(latent, dtype=np.float64)
        single = z.ndim == 2
        z = z[None] if single else z
        if z.shape[-1] != LATENT_DIM:
            raise DimensionMismatch(f"latents must be {LATENT_DIM} wide")
        with nd.no_grad():
            xn = self._decode(z).data.astype(np.float64)
        out = normalize_pose(xn * self.std + self.mean)
        return out[0] if single else out

    def loss(self, xn: np.ndarray, rng, kl_weight: float):
        mu, logvar = self._encode(xn)
        eps = nd.constant(rng.standard_normal(mu.shape))
        z = mu + nd.exp(logvar * 0.5) * eps
        recon = nd.l1_loss(self._decode(z), nd.constant(xn))
        kl = kl_divergence(mu, logvar)
        return recon + kl * kl_weight, recon.item(), kl.item()

    def reconstruction_error(self, poses_list) -> float:
        """Mean absolute error in raw pose units of decode(encode(x))."""
        errs = [np.mean(np.abs(self.decode(self.encode(p)) - normalize_pose(p))) for p in poses_list]
        return float(np.mean(errs))

    # ------------------------------------------------------------ persistence

    def state_arrays(self, prefix: str = "headvae.") -> dict[str, np.ndarray]:
        out = {prefix + k: t.data for k, t in self.params.items()}
        out[prefix + "pose_mean"] = self.mean.astype(np.float32)
        out[prefix + "pose_std"] = self.std.astype(np.float32)
        cfg = self.config
        out[prefix + "config"] = np.array([cfg.width, cfg.heads, cfg.radius, cfg.hidden], dtype=np.float32)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "headvae.") -> "HeadVAE":
        if prefix + "config" not in arrays:
            raise ModelNotLoaded("no head VAE in checkpoint")
        w, h, r, hid = (int(v) for v in arrays[prefix + "config"])
        vae = cls(HeadVaeConfig(width=w, heads=h, radius=r, hidden=hid))
        for k, t in vae.params.items():
            t.data = np.asarray(arrays[prefix + k], dtype=np.float32)
        vae.mean = arrays[prefix + "pose_mean"].astype(np.float64)
        vae.std = arrays[prefix + "pose_std"].astype(np.float64)
        vae.trained = True
        return vae

    def save(self, path) -> None:
        save_checkpoint(path, self.state_arrays())

    @classmethod
    def load(cls, path) -> "HeadVAE":
        return cls.from_arrays(load_checkpoint(path))


def kl_divergence(mu, logvar):
    """Mean KL(N(mu, exp(logvar)) || N(0, 1)) per latent element."""
    return nd.mean(nd.exp(logvar) + mu * mu - logvar - 1.0) * 0.5


def head_vae_train(poses_list, config: HeadVaeConfig | None = None) -> HeadVAE:
    """Fit the head VAE on a list of ``(n, 7)`` pose sequences."""
    cfg = config or HeadVaeConfig()
    seqs = [normalize_pose(p) for p in poses_list if len(p) >= cfg.window]
    if not seqs:
        raise InsufficientData(f"need at least one sequence of length >= {cfg.window}")
    vae = HeadVAE(cfg)
    cat = np.concatenate(seqs)
    # rounded to float32 so a saved model reproduces exactly
    vae.mean = cat.mean(0).astype(np.float32).astype(np.float64)
    vae.std = np.maximum(cat.std(0), 1e-3).astype(np.float32).astype(np.float64)
    opt = nd.AdamW(vae.params, lr=cfg.lr, clip_norm=1.0)
    rng = np.random.default_rng([cfg.seed, 12])
    warm = max(1, int(cfg.warmup_frac * cfg.steps))
    for step in range(cfg.steps):
        idx = rng.integers(len(seqs), size=cfg.batch)
        crops = []
        for i in idx:
            start = rng.integers(0, len(seqs[i]) - cfg.window + 1)
            crops.append(seqs[i][start:start + cfg.window])
        xn = (np.stack(crops) - vae.mean) / vae.std
        beta = cfg.kl_weight * min(1.0, (step + 1) / warm)
        lr = cfg.lr * 0.5 * (1 + np.cos(np.pi * step / cfg.steps))
        loss, rec, kl = vae.loss(xn, rng, beta)
        grads = nd.backward(loss)
        opt.step({k: grads.get(t, np.zeros_like(t.data)) for k, t in vae.params.items()}, lr=lr)
        if step % 100 == 0:
            log.debug("headvae step %d recon %.4f kl %.4f", step, rec, kl)
    vae.trained = True
    vae.train_error = vae.reconstruction_error(seqs)
    return vae


def head_encode(vae: HeadVAE | None, poses) -> np.ndarray:
    if vae is None:
        raise ModelNotLoaded("head VAE not loaded")
    return vae.encode(poses)


def head_decode(vae: HeadVAE | None, latent) -> np.ndarray:
    if vae is None:
        raise ModelNotLoaded("head VAE not loaded")
    return vae.decode(latent)


# ---------------------------------------------------------------- toy lip decoder

UPPER_LIP, LOWER_LIP = 0, 1


@dataclass
class LipDecoder:
    """Fixed linear map from face codes to ``V`` toy mesh vertices.

    Vertices 0 and 1 are the inner upper and lower lip; their separation is
    ``gain * |code[0]|`` by construction.
    """

    weight: np.ndarray   # (D_f, 3V)
    bias: np.ndarray     # (3V,)
    gain: float = 1.0

    @property
    def face_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def vertices(self) -> int:
        return self.weight.shape[1] // 3

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"lipdec": np.vstack([self.weight, self.bias[None]]).astype(np.float32),
                "lipdec.gain": np.array([self.gain], dtype=np.float32)}

    @classmethod
    def from_arrays(cls, arrays) -> "LipDecoder":
        m = np.asarray(arrays["lipdec"], dtype=np.float64)
        gain = float(arrays["lipdec.gain"][0]) if "lipdec.gain" in arrays else 1.0
        return cls(m[:-1], m[-1], gain)


def make_lip_decoder(face_dim: int = 16, vertices: int = 8, gain: float = 1.0, seed: int = 1234) -> LipDecoder:
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((face_dim, 3 * vertices)) * 0.1
    b = rng.standard_normal(3 * vertices) * 0.05
    up, lo = slice(3 * UPPER_LIP, 3 * UPPER_LIP + 3), slice(3 * LOWER_LIP, 3 * LOWER_LIP + 3)
    w[:, lo] = w[:, up]
    w[0, lo] = w[0, up] + gain * np.array([0.0, -1.0, 0.0])
    b[lo] = b[up]
    return LipDecoder(w.astype(np.float32).astype(np.float64), b.astype(np.float32).astype(np.float64), gain)


def _shipped_path(face_dim: int) -> Path:
    return Path(str(resources.files("avflow") / "data" / f"lipdec_{face_dim}.avfl"))


def load_lip_decoder(face_dim: int = 16) -> LipDecoder:
    """The shipped decoder for ``face_dim`` (regenerated from its seed if absent)."""
    path = _shipped_path(face_dim)
    if path.exists():
        return LipDecoder.from_arrays(load_checkpoint(path))
    return make_lip_decoder(face_dim)


def lip_vertices(codes: np.ndarray, decoder: LipDecoder) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float64)
    if codes.shape[-1] != decoder.face_dim:
        raise DimensionMismatch(f"codes are {codes.shape[-1]} wide, decoder expects {decoder.face_dim}")
    flat = codes @ decoder.weight + decoder.bias
    return flat.reshape(codes.shape[:-1] + (decoder.vertices, 3))


def lip_distance(codes: np.ndarray, decoder: LipDecoder) -> np.ndarray:
    v = lip_vertices(codes, decoder)
    return np.linalg.norm(v[..., UPPER_LIP, :] - v[..., LOWER_LIP, :], axis=-1)


def write_shipped_decoders(face_dims=(16, 256)) -> None:
    for fd in face_dims:
        path = _shipped_path(fd)
        save_checkpoint(path, make_lip_decoder(fd).to_arrays())


def config_dict(cfg) -> dict:
    return asdict(cfg)
