"""Text front end: symbol string -> durations -> 86 fps token logits.

Each character is embedded (192-d) and passed through three width-3
convolutions.  A duration head predicts how many frames each symbol lasts;
encoder features are repeated over those frames and a small banded
transformer, trained with conditional flow matching, produces the 29-d logits.
A space stands for silence.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import ndgrad as nd
from .codecs import CHARSET, FPS, TOKEN_DIM, TokenSequence
from .flowmatch import euler_solve, ot_path, target_velocity
from .layers import Band, block, init_block, init_linear, init_norm, linear, norm, time_features
from .ndgrad import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

EMBED_DIM = 192
CONV_LAYERS = 3
MAX_DURATION = 8 * FPS   # frames; guards against runaway predictions


class UnknownSymbol(ValueError):
    pass


class EmptyText(ValueError):
    pass


class InsufficientData(ValueError):
    pass


def symbol_ids(text: str) -> np.ndarray:
    if not text:
        raise EmptyText("text is empty")
    ids = []
    for ch in text:
        if ch == " ":
            ids.append(0)
        elif ch in CHARSET and ch not in "-|":
            ids.append(CHARSET.index(ch))
        else:
            raise UnknownSymbol(f"symbol {ch!r} is not in the alphabet")
    return np.array(ids, dtype=np.int64)


def round_durations(d) -> np.ndarray:
    """Round half up, never below one frame nor above ``MAX_DURATION``."""
    return np.clip(np.floor(np.asarray(d, dtype=np.float64) + 0.5), 1, MAX_DURATION).astype(np.int64)


@dataclass
class TextTokensConfig:
    width: int = 64
    hidden: int = 128
    heads: int = 4
    blocks: int = 3
    radius: int = 8
    time_dim: int = 32
    runs: int = 32          # symbols per training crop
    frames: int = 128       # frames per training crop
    batch: int = 8
    steps: int = 800
    lr: float = 2e-3
    duration_weight: float = 0.05
    sigma_min: float = 1e-6
    seed: int = 0


class TextTokens:
    """Parameters and inference for the text-to-tokens model."""

    def __init__(self, config: TextTokensConfig | None = None):
        self.config = cfg = config or TextTokensConfig()
        rng = np.random.default_rng([cfg.seed, 21])
        p = self.params = {}
        p["embed"] = nd.tensor(rng.standard_normal((TOKEN_DIM, EMBED_DIM)) * 0.3, requires_grad=True, name="embed")
        for l in range(CONV_LAYERS):
            for k in range(3):
                init_linear(p, f"conv{l}.k{k}", EMBED_DIM, EMBED_DIM, rng, scale=1 / math.sqrt(3))
            init_norm(p, f"conv{l}.ln", EMBED_DIM)
        init_linear(p, "dur", EMBED_DIM, 1, rng, scale=0.1)
        p["dur.b"].data[:] = math.log(10.0)
        init_linear(p, "proj.in", TOKEN_DIM + EMBED_DIM + 1 + cfg.time_dim, cfg.width, rng)
        for l in range(cfg.blocks):
            init_block(p, f"proj.block{l}", cfg.width, cfg.hidden, rng)
        init_norm(p, "proj.out_ln", cfg.width)
        init_linear(p, "proj.out", cfg.width, TOKEN_DIM, rng, scale=0.5)
        self.mean = np.zeros(TOKEN_DIM)
        self.std = np.ones(TOKEN_DIM)
        self.trained = False

    # ------------------------------------------------------------ pieces

    def encode(self, ids: np.ndarray) -> nd.Tensor:
        """``(B, T)`` symbol ids -> ``(B, T, 192)`` features."""
        p = self.params
        x = nd.embedding(p["embed"], ids)
        b, t, c = x.shape
        pad = nd.constant(np.zeros((b, 1, c)))
        for l in range(CONV_LAYERS):
            xp = nd.concat([pad, x, pad], axis=1)
            y = None
            for k in range(3):
                term = linear(p, f"conv{l}.k{k}", nd.slice(xp, k, k + t, axis=1))
                y = term if y is None else y + term
            x = norm(p, f"conv{l}.ln", x + nd.gelu(y))
        return x

    def durations(self, h: nd.Tensor) -> nd.Tensor:
        d = nd.exp(linear(self.params, "dur", h))
        return d.reshape(d.shape[:-1])

    def velocity(self, x: nd.Tensor, feats: nd.Tensor, rel: np.ndarray, t: np.ndarray) -> nd.Tensor:
        cfg, p = self.config, self.params
        b, n = x.shape[:2]
        tf = np.broadcast_to(time_features(t, cfg.time_dim)[:, None, :], (b, n, cfg.time_dim))
        h = linear(p, "proj.in", nd.concat([x, feats, nd.constant(rel[..., None]), nd.constant(tf)], axis=-1))
        band = Band.symmetric(cfg.radius)
        for l in range(cfg.blocks):
            h = block(p, f"proj.block{l}", h, cfg.heads, band)
        return linear(p, "proj.out", norm(p, "proj.out_ln", h))

    @staticmethod
    def expand_index(durs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Frame -> symbol index and relative position within the symbol."""
        idx = np.repeat(np.arange(len(durs)), durs)
        starts = np.repeat(np.cumsum(durs) - durs, durs)
        rel = (np.arange(len(idx)) - starts) / np.repeat(durs, durs)
        return idx, rel

    # ------------------------------------------------------------ inference

    def predict_durations(self, text: str) -> np.ndarray:
        ids = symbol_ids(text)
        with nd.no_grad():
            d = self.durations(self.encode(ids[None]))
        return round_durations(d.data[0])

    def __call__(self, text: str, seed: int = 0, steps: int = 8, durations=None) -> TokenSequence:
        if not self.trained:
            raise RuntimeError("text-to-tokens model is not trained")
        ids = symbol_ids(text)
        with nd.no_grad():
            h = self.encode(ids[None])
            durs = round_durations(self.durations(h).data[0]) if durations is None else round_durations(durations)
            idx, rel = self.expand_index(durs)
            feats = nd.take(h.reshape((h.shape[1], EMBED_DIM)), idx[None], axis=0)
            rng = np.random.default_rng(seed)
            x0 = rng.standard_normal((1, len(idx), TOKEN_DIM))
            x = euler_solve(lambda t, z: self.velocity(nd.constant(z), feats, rel[None], np.array([t])).data
                            .astype(np.float64), x0, steps)
        return TokenSequence(x[0] * self.std + self.mean, FPS)

    # ------------------------------------------------------------ persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"text.{k}": t.data for k, t in self.params.items()}
        out["text.norm.mean"] = self.mean.astype(np.float32)
        out["text.norm.std"] = self.std.astype(np.float32)
        c = self.config
        out["text.config"] = np.array([c.width, c.hidden, c.heads, c.blocks, c.radius, c.time_dim], np.float32)
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "TextTokens":
        w, hid, heads, blocks, radius, tdim = (int(v) for v in arrays["text.config"])
        m = cls(TextTokensConfig(width=w, hidden=hid, heads=heads, blocks=blocks, radius=radius, time_dim=tdim))
        for k, t in m.params.items():
            t.data = np.asarray(arrays[f"text.{k}"], dtype=np.float32)
        m.mean = arrays["text.norm.mean"].astype(np.float64)
        m.std = arrays["text.norm.std"].astype(np.float64)
        m.trained = True
        return m

    def save(self, path) -> None:
        save_checkpoint(path, self.state_arrays())

    @classmethod
    def load(cls, path) -> "TextTokens":
        return cls.from_arrays(load_checkpoint(path))


def text_to_tokens(text: str, params: TextTokens, seed: int = 0, steps: int = 8) -> TokenSequence:
    return params(text, seed=seed, steps=steps)


# ---------------------------------------------------------------- training

def _script(rec) -> tuple[np.ndarray, np.ndarray]:
    """Token-row ids and frame durations of the actor's symbol runs."""
    s = np.asarray(rec.symbols)
    cuts = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate([[0], cuts])
    durs = np.diff(np.concatenate([starts, [len(s)]]))
    rows = rec.tokens[starts].argmax(1)   # the peak row marks the symbol
    return rows.astype(np.int64), durs.astype(np.int64)


def script_text(ids: np.ndarray) -> str:
    return "".join(" " if i == 0 else CHARSET[i] for i in ids)


def _crops(scripts, rng, cfg: TextTokensConfig):
    ids_b, dur_b, tok_b, idx_b, rel_b = [], [], [], [], []
    for _ in range(cfg.batch):
        while True:
            k = int(rng.integers(len(scripts)))
            ids, durs, start_frames, tokens = scripts[k]
            if len(ids) <= cfg.runs:
                a = 0
            else:
                a = int(rng.integers(0, len(ids) - cfg.runs + 1))
            sub_ids, sub_d = ids[a:a + cfg.runs], durs[a:a + cfg.runs]
            if len(sub_ids) == cfg.runs and sub_d.sum() >= cfg.frames:
                break
        idx, rel = TextTokens.expand_index(sub_d)
        off = int(rng.integers(0, len(idx) - cfg.frames + 1))
        f0 = start_frames[a]
        ids_b.append(sub_ids)
        dur_b.append(sub_d)
        tok_b.append(tokens[f0 + off:f0 + off + cfg.frames])
        idx_b.append(idx[off:off + cfg.frames])
        rel_b.append(rel[off:off + cfg.frames])
    return np.stack(ids_b), np.stack(dur_b), np.stack(tok_b), np.stack(idx_b), np.stack(rel_b)


def train_text_to_tokens(records, config: TextTokensConfig | None = None, history: list | None = None) -> TextTokens:
    """Fit durations (L1) and the flow-matched logit projector on corpus scripts."""
    cfg = config or TextTokensConfig()
    scripts = []
    for r in records:
        ids, durs = _script(r)
        if len(ids) >= cfg.runs and durs.sum() >= cfg.frames:
            starts = np.cumsum(durs) - durs
            scripts.append((ids, durs, starts, r.tokens.astype(np.float64)))
    if not scripts:
        raise InsufficientData(f"need records with at least {cfg.runs} symbol runs")
    model = TextTokens(cfg)
    cat = np.concatenate([s[3] for s in scripts])
    model.mean = cat.mean(0).astype(np.float32).astype(np.float64)
    model.std = np.maximum(cat.std(0), 1e-3).astype(np.float32).astype(np.float64)
    opt = nd.AdamW(model.params, lr=cfg.lr, clip_norm=1.0)
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        ids, durs, toks, idx, rel = _crops(scripts, rng, cfg)
        b = len(ids)
        h = model.encode(ids)
        dur_loss = nd.l1_loss(model.durations(h), nd.constant(durs.astype(np.float64)))
        flat = h.reshape((b * cfg.runs, EMBED_DIM))
        feats = nd.take(flat, idx + (np.arange(b) * cfg.runs)[:, None], axis=0)
        x1 = (toks - model.mean) / model.std
        x0 = rng.standard_normal(x1.shape)
        t = rng.random(b)
        xt = ot_path(x0, x1, t, cfg.sigma_min)
        u = target_velocity(x0, x1, cfg.sigma_min)
        fm = nd.l1_loss(model.velocity(nd.constant(xt), feats, rel, t), nd.constant(u))
        loss = fm + dur_loss * cfg.duration_weight
        grads = nd.backward(loss)
        lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        opt.step({k: grads.get(t_, np.zeros_like(t_.data)) for k, t_ in model.params.items()}, lr=lr)
        if history is not None:
            history.append((loss.item(), fm.item(), dur_loss.item()))
        if step % 100 == 0:
            log.info("text step %d fm %.4f dur %.3f", step, fm.item(), dur_loss.item())
    model.trained = True
    return model


def frame_accuracy(model: TextTokens, records, seed: int = 0) -> float:
    """Argmax agreement of generated logits with the source symbol, using true durations."""
    hit = tot = 0
    for r in records:
        ids, durs = _script(r)
        seq = model(script_text(ids), seed=seed, durations=durs)
        truth = np.repeat(ids, durs)
        hit += int((seq.logits.argmax(1) == truth).sum())
        tot += len(truth)
    return hit / tot


def duration_error(model: TextTokens, records) -> float:
    """Mean absolute error (frames) of predicted symbol durations."""
    err, tot = 0.0, 0
    for r in records:
        ids, durs = _script(r)
        pred = model.predict_durations(script_text(ids))
        err += float(np.abs(pred - durs).sum())
        tot += len(durs)
    return err / tot


def config_dict(cfg: TextTokensConfig) -> dict:
    return asdict(cfg)
