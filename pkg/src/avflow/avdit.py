"""Two parallel diffusion transformers (audio and vision) with per-block
highway fusion, plus the ablation variants.

Conditioning is in-context: every frame's input is the concatenation of the
noisy stream, the 29-d actor tokens, the 85-d participant block (56-d face
features + 29-d participant tokens, zero when guidance is off) and sinusoidal
features of the flow time.  The first block of each stack attends
``lookahead`` frames ahead; later blocks are strictly causal bands of the same
window, so the whole stack never looks further than ``lookahead`` frames.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndgrad as nd
from .layers import (Band, block, block_param_count, init_block, init_linear, init_norm, linear,
                     norm, time_features)
from .ndgrad import Tensor

VARIANTS = ("avflow", "separate", "shared", "cascaded")
GUIDANCE = ("none", "audio", "visual", "audiovisual")

TOKEN_DIM = 29
PARTICIPANT_FEATURE_DIM = 56
PARTICIPANT_DIM = PARTICIPANT_FEATURE_DIM + TOKEN_DIM
AUDIO_DIM = 80
HEAD_DIM = 8


class FrameCountMismatch(ValueError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass
class DitConfig:
    blocks: int = 2
    width: int = 128
    hidden: int = 256
    heads: int = 4
    window: int = 10
    lookahead: int = 2
    face_dim: int = 16
    time_dim: int = 32

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigMismatch(f"width {self.width} not divisible by {self.heads} heads")
        if (self.width // self.heads) % 2:
            raise ConfigMismatch("per-head width must be even for rotary embeddings")
        if not 0 <= self.lookahead < self.window:
            raise ConfigMismatch("need 0 <= lookahead < window")
        if self.blocks < 1:
            raise ConfigMismatch("need at least one block")

    @classmethod
    def paper(cls) -> "DitConfig":
        return cls(blocks=8, width=512, hidden=1024, heads=4, window=10, lookahead=2, face_dim=256)

    @property
    def vision_dim(self) -> int:
        return HEAD_DIM + self.face_dim

    def bands(self) -> list[Band]:
        first = Band.from_window(self.window, self.lookahead)
        rest = Band.from_window(self.window, 0)
        return [first] + [rest] * (self.blocks - 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConditionBundle:
    """Per-frame conditioning for a batch; arrays are ``(B, n, C)``."""

    tokens: np.ndarray
    participant_features: np.ndarray | None = None
    participant_tokens: np.ndarray | None = None
    audio_context: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return self.tokens.shape[1]

    def validate(self) -> None:
        b, n = self.tokens.shape[:2]
        if self.tokens.shape[2] != TOKEN_DIM:
            raise ConfigMismatch(f"tokens must be {TOKEN_DIM} wide, got {self.tokens.shape[2]}")
        for name in ("participant_features", "participant_tokens", "audio_context"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[:2] != (b, n):
                raise FrameCountMismatch(f"{name} has shape {arr.shape[:2]}, tokens {(b, n)}")


def fuse(x_a: Tensor, x_v: Tensor, U: Tensor, b: Tensor, V: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """Highway fusion of one block's outputs.

    ``y_a = x_a + [x_a; x_v] U + b`` and ``y_v = x_v + [x_a; x_v] V + c`` with
    ``U, V`` of shape ``(2d, d)``.
    """
    d = x_a.shape[-1]
    if x_v.shape[-1] != d or U.shape != (2 * d, d) or V.shape != (2 * d, d) or b.shape != (d,) \
            or c.shape != (d,):
        raise nd.ShapeMismatch(f"fuse: widths x_a={x_a.shape}, x_v={x_v.shape}, U={U.shape}, V={V.shape}")
    z = nd.concat([x_a, x_v], axis=-1)
    return x_a + (z @ U) + b, x_v + (z @ V) + c


class AVDiT:
    """The dual-stream velocity network and its ablation variants.

    ``avflow``   two stacks with fusion after every block
    ``separate`` two stacks, no connections
    ``shared``   one stack over the concatenated audio+vision inputs/outputs
    ``cascaded`` audio stack, then a vision stack conditioned on the audio
    """

    def __init__(self, config: DitConfig, variant: str = "avflow", guidance: str = "none", seed: int = 0):
        if variant not in VARIANTS:
            raise ConfigMismatch(f"unknown variant {variant!r}")
        if guidance not in GUIDANCE:
            raise ConfigMismatch(f"unknown guidance {guidance!r}")
        self.config = config
        self.variant = variant
        self.guidance = guidance
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        cond = TOKEN_DIM + PARTICIPANT_DIM + config.time_dim
        self._streams: dict[str, tuple[int, int]] = {}
        if variant == "shared":
            self._streams["shared"] = (AUDIO_DIM + config.vision_dim + cond, AUDIO_DIM + config.vision_dim)
        else:
            vis_in = config.vision_dim + cond + (AUDIO_DIM if variant == "cascaded" else 0)
            self._streams["audio"] = (AUDIO_DIM + cond, AUDIO_DIM)
            self._streams["vision"] = (vis_in, config.vision_dim)
        stream_ids = {"audio": 0, "vision": 1, "shared": 2}
        for name, (cin, cout) in self._streams.items():
            self._init_stream(name, cin, cout, np.random.default_rng([seed, stream_ids[name]]))
        if variant == "avflow":
            d = config.width
            for l in range(config.blocks):
                for key, shape in (("U", (2 * d, d)), ("b", (d,)), ("V", (2 * d, d)), ("c", (d,))):
                    name = f"fusion.block{l}.{key}"
                    self.params[name] = nd.tensor(np.zeros(shape), requires_grad=True, name=name)

    def _init_stream(self, name, cin, cout, rng):
        cfg = self.config
        init_linear(self.params, f"{name}.in", cin, cfg.width, rng)
        for l in range(cfg.blocks):
            init_block(self.params, f"{name}.block{l}", cfg.width, cfg.hidden, rng)
        init_norm(self.params, f"{name}.out_ln", cfg.width)
        init_linear(self.params, f"{name}.out", cfg.width, cout, rng, scale=0.5)

    # ------------------------------------------------------------ bookkeeping

    @property
    def has_fusion(self) -> bool:
        return self.variant == "avflow"

    def param_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    @staticmethod
    def param_count_formula(config: DitConfig, variant: str) -> int:
        d, h = config.width, config.hidden
        cond = TOKEN_DIM + PARTICIPANT_DIM + config.time_dim

        def stream(cin, cout):
            return cin * d + d + config.blocks * block_param_count(d, h) + 2 * d + d * cout + cout

        if variant == "shared":
            io = AUDIO_DIM + config.vision_dim
            return stream(io + cond, io)
        vis_in = config.vision_dim + cond + (AUDIO_DIM if variant == "cascaded" else 0)
        total = stream(AUDIO_DIM + cond, AUDIO_DIM) + stream(vis_in, config.vision_dim)
        if variant == "avflow":
            total += config.blocks * 2 * (2 * d * d + d)
        return total

    def stream_params(self, stream: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(stream + ".")}

    # ------------------------------------------------------------ forward

    def _conditioning(self, t: np.ndarray, cond: ConditionBundle) -> np.ndarray:
        b, n = cond.tokens.shape[:2]
        part = np.zeros((b, n, PARTICIPANT_DIM))
        if self.guidance in ("visual", "audiovisual") and cond.participant_features is not None:
            part[..., :PARTICIPANT_FEATURE_DIM] = cond.participant_features
        if self.guidance in ("audio", "audiovisual") and cond.participant_tokens is not None:
            part[..., PARTICIPANT_FEATURE_DIM:] = cond.participant_tokens
        tf = np.broadcast_to(time_features(t, self.config.time_dim)[:, None, :], (b, n, self.config.time_dim))
        return np.concatenate([cond.tokens, part, tf], axis=-1)

    def forward(self, noisy_audio, noisy_vision, t, cond: ConditionBundle) -> tuple[Tensor, Tensor]:
        """Velocity fields for both streams.

        ``noisy_audio`` is ``(B, n, 80)``, ``noisy_vision`` is ``(B, n, 8 + D_f)``,
        ``t`` is a scalar or ``(B,)`` array of flow times.
        """
        cfg = self.config
        xa = noisy_audio if isinstance(noisy_audio, Tensor) else nd.constant(noisy_audio)
        xv = noisy_vision if isinstance(noisy_vision, Tensor) else nd.constant(noisy_vision)
        if xa.ndim == 2:
            raise ConfigMismatch("inputs must be batched as (B, n, C)")
        b, n = xa.shape[:2]
        if xv.shape[:2] != (b, n) or cond.tokens.shape[:2] != (b, n):
            raise FrameCountMismatch(
                f"frame counts differ: audio {xa.shape[:2]}, vision {xv.shape[:2]}, tokens {cond.tokens.shape[:2]}")
        if xa.shape[2] != AUDIO_DIM or xv.shape[2] != cfg.vision_dim:
            raise ConfigMismatch(f"stream widths {xa.shape[2]}/{xv.shape[2]} do not match the config")
        cond.validate()
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        if np.any(t < 0) or np.any(t > 1):
            raise ConfigMismatch("flow time must lie in [0, 1]")
        ctx = nd.constant(self._conditioning(t, cond))
        bands = cfg.bands()
        p = self.params

        if self.variant == "shared":
            x = linear(p, "shared.in", nd.concat([xa, xv, ctx], axis=-1))
            for l in range(cfg.blocks):
                x = block(p, f"shared.block{l}", x, cfg.heads, bands[l])
            out = linear(p, "shared.out", norm(p, "shared.out_ln", x))
            return nd.slice(out, 0, AUDIO_DIM), nd.slice(out, AUDIO_DIM, AUDIO_DIM + cfg.vision_dim)

        vis_parts = [xv, ctx]
        if self.variant == "cascaded":
            if cond.audio_context is None:
                raise ConfigMismatch("cascaded variant needs cond.audio_context")
            vis_parts.append(nd.constant(cond.audio_context))
        ha = linear(p, "audio.in", nd.concat([xa, ctx], axis=-1))
        hv = linear(p, "vision.in", nd.concat(vis_parts, axis=-1))
        for l in range(cfg.blocks):
            ha = block(p, f"audio.block{l}", ha, cfg.heads, bands[l])
            hv = block(p, f"vision.block{l}", hv, cfg.heads, bands[l])
            if self.has_fusion:
                ha, hv = fuse(ha, hv, p[f"fusion.block{l}.U"], p[f"fusion.block{l}.b"],
                              p[f"fusion.block{l}.V"], p[f"fusion.block{l}.c"])
        va = linear(p, "audio.out", norm(p, "audio.out_ln", ha))
        vv = linear(p, "vision.out", norm(p, "vision.out_ln", hv))
        return va, vv

    __call__ = forward

    # ------------------------------------------------------------ serialization

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in arrays:
                raise ConfigMismatch(f"checkpoint lacks {k!r}")
            if arrays[k].shape != t.shape:
                raise ConfigMismatch(f"{k!r}: checkpoint {arrays[k].shape}, model {t.shape}")
            t.data = np.asarray(arrays[k], dtype=t.data.dtype)

    def zero_fusion(self) -> None:
        for k, t in self.params.items():
            if k.startswith("fusion."):
                t.data = np.zeros_like(t.data)
