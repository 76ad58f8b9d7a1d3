"""Training, evaluation and ablation orchestration.

A run lives in one directory::

    run/config.txt     echo of the RunConfig
    run/ckpt/          last.avfl plus periodic step_XXXXXX.avfl
    run/logs/          train.csv (per-step losses), train.log
    run/reports/       eval / ablation / dyadic reports (text + JSON + CSV)
    run/samples/       generated records
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .avdit import AUDIO_DIM, GUIDANCE, HEAD_DIM, VARIANTS, AVDiT, ConditionBundle, DitConfig
from .codecs import HeadVAE, HeadVaeConfig, head_vae_train, load_lip_decoder
from .flowmatch import Batch, FlowConfig, NormStats, cfm_loss, euler_solve, sample
from .metrics import (BEAT_SIGMA, EvalReport, beat_align, diversity, event_f1, evaluate,
                      frechet_expression_distance, shuffled_beat_align)
from .ndgrad import CheckpointError, load_checkpoint, save_checkpoint
from .synthcorpus import Corpus, CorpusRecord, CorpusWriter, iter_corpus, read_corpus, read_corpus_header

log = logging.getLogger(__name__)

SMILE_CHANNEL = 1
SMILE_LEVEL = 0.5
SMILE_SLACK = 5


class ConfigInvalid(ValueError):
    pass


class CorpusUnreadable(IOError):
    pass


class DivergedLoss(FloatingPointError):
    pass


class MissingVariant(ValueError):
    pass


class NoParticipantStreams(ValueError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    """Everything that determines a run.  Serialized as ``key = value`` lines."""

    corpus: str = ""
    out: str = "run"
    variant: str = "avflow"
    guidance: str = "none"
    seed: int = 0
    steps: int = 2000
    batch: int = 16
    segment_seconds: float = 2.0
    lr: float = 1e-3
    lr_min: float = 1e-4
    warmup: int = 50
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    blocks: int = 2
    width: int = 128
    hidden: int = 256
    heads: int = 4
    window: int = 10
    lookahead: int = 2
    sigma_min: float = 1e-6
    lambda_s: float = 3.0
    lambda_h: float = 0.2
    lambda_f: float = 1.0
    solver_steps: int = 8
    val_records: int = 10
    vae_steps: int = 600
    freeze_fusion: bool = False
    ckpt_every: int = 500
    log_every: int = 50
    resume: bool = False

    def validate(self, check_paths: bool = True) -> None:
        if self.variant not in VARIANTS:
            raise ConfigInvalid(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.guidance not in GUIDANCE:
            raise ConfigInvalid(f"guidance must be one of {GUIDANCE}, got {self.guidance!r}")
        for k in ("steps", "batch", "blocks", "width", "hidden", "heads", "window", "solver_steps"):
            if getattr(self, k) < 1:
                raise ConfigInvalid(f"{k} must be >= 1")
        if self.segment_seconds <= 0 or self.lr <= 0:
            raise ConfigInvalid("segment_seconds and lr must be positive")
        if self.val_records < 0:
            raise ConfigInvalid("val_records must be >= 0")
        try:
            self.dit(16)
            self.flow()
        except ValueError as e:
            raise ConfigInvalid(str(e)) from e
        if check_paths and not Path(self.corpus).is_file():
            raise ConfigInvalid(f"corpus {self.corpus!r} does not exist")

    def dit(self, face_dim: int) -> DitConfig:
        return DitConfig(blocks=self.blocks, width=self.width, hidden=self.hidden, heads=self.heads,
                         window=self.window, lookahead=self.lookahead, face_dim=face_dim)

    def flow(self) -> FlowConfig:
        return FlowConfig(sigma_min=self.sigma_min, lambda_s=self.lambda_s, lambda_h=self.lambda_h,
                          lambda_f=self.lambda_f, steps=self.solver_steps)

    @property
    def segment_frames(self) -> int:
        return int(round(self.segment_seconds * 86))

    def with_paper_dims(self) -> "RunConfig":
        p = DitConfig.paper()
        return replace(self, blocks=p.blocks, width=p.width, hidden=p.hidden, heads=p.heads,
                       window=p.window, lookahead=p.lookahead, segment_seconds=20.0, lr=1e-4, lr_min=1e-4)

    def to_text(self) -> str:
        lines = ["# avflow run config"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        kw = {}
        for no, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigInvalid(f"line {no}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigInvalid(f"line {no}: unknown key {key!r}")
            kind = type(getattr(defaults, key))
            try:
                if kind is bool:
                    if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(val)
                    kw[key] = val.lower() in ("true", "1", "yes")
                else:
                    kw[key] = kind(val)
            except ValueError:
                raise ConfigInvalid(f"line {no}: bad value {val!r} for {key}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as e:
            raise ConfigInvalid(f"cannot read config {path}: {e}") from e


def run_dirs(out) -> dict[str, Path]:
    root = Path(out)
    dirs = {k: root / k for k in ("ckpt", "logs", "reports", "samples")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


# ---------------------------------------------------------------- data

@dataclass
class Streams:
    """Model-space (normalized) arrays for one record."""

    tokens: np.ndarray
    S: np.ndarray
    H: np.ndarray
    F: np.ndarray
    pf: np.ndarray
    pt: np.ndarray
    audio_context: np.ndarray | None = None


def load_records(path) -> list[CorpusRecord]:
    try:
        return list(iter_corpus(path))
    except OSError as e:
        raise CorpusUnreadable(str(e)) from e


def split_records(records: list, val: int) -> tuple[list, list]:
    if val >= len(records):
        raise ConfigInvalid(f"val_records={val} leaves no training records out of {len(records)}")
    return (records[:len(records) - val], records[len(records) - val:]) if val else (records, [])


def prepare(records, vae: HeadVAE, norm: NormStats | None = None):
    heads = [vae.encode(r.head_pose) for r in records]
    if norm is None:
        norm = NormStats.fit({"audio": [r.mel for r in records], "head": heads,
                              "face": [r.face for r in records]})
    data = [Streams(r.tokens.astype(np.float64), norm.normalize("audio", r.mel), norm.normalize("head", h),
                    norm.normalize("face", r.face), r.participant_features.astype(np.float64),
                    r.participant_tokens.astype(np.float64))
            for r, h in zip(records, heads)]
    return data, norm


def make_batch(data: list[Streams], rng: np.random.Generator, batch: int, frames: int) -> Batch:
    idx = rng.integers(len(data), size=batch)
    parts = {k: [] for k in ("tokens", "S", "H", "F", "pf", "pt", "audio_context")}
    for i in idx:
        d = data[i]
        n = len(d.tokens)
        if n < frames:
            raise ConfigInvalid(f"record with {n} frames is shorter than a {frames}-frame segment")
        a = int(rng.integers(0, n - frames + 1))
        for k in parts:
            v = getattr(d, k)
            if v is not None:
                parts[k].append(v[a:a + frames])
    st = {k: (np.stack(v) if v else None) for k, v in parts.items()}
    return Batch(st["tokens"], st["S"], st["H"], st["F"], st["pf"], st["pt"], st["audio_context"])


# ---------------------------------------------------------------- checkpoint

@dataclass
class TrainState:
    step: int
    model: AVDiT
    opt: nd.AdamW
    norm: NormStats
    vae: HeadVAE
    history: list = field(default_factory=list)


def save_state(path, st: TrainState, cfg: RunConfig) -> None:
    arrays = {}
    arrays.update({f"model.{k}": v for k, v in st.model.state_arrays().items()})
    arrays.update(st.opt.state_arrays())
    arrays.update(st.norm.to_arrays())
    arrays.update(st.vae.state_arrays())
    arrays["train.step"] = np.array([st.step], dtype=np.float32)
    arrays["train.face_dim"] = np.array([st.model.config.face_dim], dtype=np.float32)
    save_checkpoint(path, arrays)
    Path(path).with_suffix(".txt").write_text(cfg.to_text())


@dataclass
class LoadedModel:
    model: AVDiT
    norm: NormStats
    vae: HeadVAE
    config: RunConfig
    step: int
    arrays: dict


def load_model(path, cfg: RunConfig | None = None) -> LoadedModel:
    path = Path(path)
    if path.is_dir():
        path = path / "ckpt" / "last.avfl"
    if not path.is_file():
        raise MissingCheckpoint(f"no checkpoint at {path}")
    try:
        arrays = load_checkpoint(path)
    except CheckpointError as e:
        raise MissingCheckpoint(f"unreadable checkpoint {path}: {e}") from e
    if cfg is None:
        side = path.with_suffix(".txt")
        cfg = RunConfig.load(side) if side.exists() else RunConfig()
    face_dim = int(arrays["train.face_dim"][0])
    model = AVDiT(cfg.dit(face_dim), cfg.variant, cfg.guidance, cfg.seed)
    model.load_state_arrays({k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
    return LoadedModel(model, NormStats.from_arrays(arrays), HeadVAE.from_arrays(arrays), cfg,
                       int(arrays["train.step"][0]), arrays)


# ---------------------------------------------------------------- training

def lr_at(cfg: RunConfig, step: int) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * min(frac, 1.0)))


def _trainable(model: AVDiT, cfg: RunConfig, stage: str | None) -> dict:
    params = dict(model.params)
    if cfg.freeze_fusion:
        params = {k: v for k, v in params.items() if not k.startswith("fusion.")}
    if stage == "audio":
        params = model.stream_params("audio")
    elif stage == "vision":
        params = model.stream_params("vision")
    return params


def _train_loop(st: TrainState, cfg: RunConfig, data, start: int, stop: int, dirs, stage=None,
                flowcfg: FlowConfig | None = None, on_step=None) -> None:
    flowcfg = flowcfg or cfg.flow()
    params = _trainable(st.model, cfg, stage)
    frames = cfg.segment_frames
    csv_path = dirs["logs"] / "train.csv"
    new = not csv_path.exists() or start == 0
    with open(csv_path, "w" if new else "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "total", "L_s", "L_h", "L_f", "grad_norm", "lr"])
        for step in range(start, stop):
            rng = np.random.default_rng([cfg.seed, step])
            batch = make_batch(data, rng, cfg.batch, frames)
            try:
                loss, parts = cfm_loss(st.model, batch, flowcfg, rng)
            except FloatingPointError as e:
                raise DivergedLoss(f"step {step}: {e}") from e
            grads = nd.backward(loss, params=list(params.values()))
            lr = lr_at(cfg, step)
            gnorm = st.opt.step({k: grads[t] for k, t in st.opt.params.items() if t in grads}, lr=lr)
            if not np.isfinite(gnorm):
                raise DivergedLoss(f"step {step}: gradient norm {gnorm}")
            st.step = step + 1
            row = [step, parts["total"], parts["L_s"], parts["L_h"], parts["L_f"], gnorm, lr]
            st.history.append(row)
            w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])
            if step % cfg.log_every == 0:
                log.info("step %d total %.4f L_s %.4f L_h %.4f L_f %.4f", step, *row[1:5])
            if on_step is not None:
                on_step(st)
            if cfg.ckpt_every and st.step % cfg.ckpt_every == 0:
                save_state(dirs["ckpt"] / f"step_{st.step:06d}.avfl", st, cfg)
                save_state(dirs["ckpt"] / "last.avfl", st, cfg)


def presample_audio(model: AVDiT, data: list[Streams], flowcfg: FlowConfig, seed: int, chunk: int = 16) -> None:
    """Fill ``audio_context`` with audio sampled from the (trained) audio stack."""
    for i0 in range(0, len(data), chunk):
        group = data[i0:i0 + chunk]
        n = min(len(d.tokens) for d in group)
        toks = np.stack([d.tokens[:n] for d in group])
        cond = ConditionBundle(toks, np.stack([d.pf[:n] for d in group]), np.stack([d.pt[:n] for d in group]),
                               np.zeros((len(group), n, AUDIO_DIM)))
        rng = np.random.default_rng([seed, 7919, i0])
        x0 = rng.standard_normal((len(group), n, AUDIO_DIM))
        dummy = np.zeros((len(group), n, model.config.vision_dim))
        with nd.no_grad():
            s = euler_solve(lambda t, x: model(x, dummy, t, cond)[0].data.astype(np.float64), x0, flowcfg.steps)
        for d, si in zip(group, s):
            full = np.zeros((len(d.tokens), AUDIO_DIM))
            full[:n] = si
            d.audio_context = full


@dataclass
class TrainResult:
    run_dir: Path
    model: AVDiT
    norm: NormStats
    vae: HeadVAE
    history: list
    train_records: list
    val_records: list
    seconds: float


def train(cfg: RunConfig, records: list[CorpusRecord] | None = None, vae: HeadVAE | None = None,
          on_step=None) -> TrainResult:
    """Train one model.  ``records`` overrides reading ``cfg.corpus``."""
    cfg.validate(check_paths=records is None)
    t0 = time.perf_counter()
    if records is None:
        records = load_records(cfg.corpus)
    train_recs, val_recs = split_records(records, cfg.val_records)
    dirs = run_dirs(cfg.out)
    Path(cfg.out, "config.txt").write_text(cfg.to_text())
    face_dim = train_recs[0].face.shape[1]

    last = dirs["ckpt"] / "last.avfl"
    resumed = cfg.resume and last.exists()
    if resumed:
        lm = load_model(last, cfg)
        vae, norm = lm.vae, lm.norm
    elif vae is None:
        vae = head_vae_train([r.head_pose for r in train_recs], HeadVaeConfig(steps=cfg.vae_steps, seed=cfg.seed))
    data, fitted = prepare(train_recs, vae, None if not resumed else lm.norm)
    norm = lm.norm if resumed else fitted

    model = AVDiT(cfg.dit(face_dim), cfg.variant, cfg.guidance, cfg.seed)
    opt = nd.AdamW(_trainable(model, cfg, None), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                   weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    st = TrainState(0, model, opt, norm, vae)
    if resumed:
        model.load_state_arrays({k[len("model."):]: v for k, v in lm.arrays.items() if k.startswith("model.")})
        opt.load_state_arrays(lm.arrays)
        st.step = lm.step
        log.info("resumed at step %d", st.step)

    if cfg.variant == "cascaded":
        half = cfg.steps // 2
        fa = replace(cfg.flow(), lambda_h=0.0, lambda_f=0.0)
        if st.step < half:
            st.opt = nd.AdamW(_trainable(model, cfg, "audio"), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                              eps=cfg.eps, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
            for d in data:
                d.audio_context = np.zeros_like(d.S)
            _train_loop(st, cfg, data, st.step, half, dirs, "audio", fa, on_step)
        presample_audio(model, data, cfg.flow(), cfg.seed)
        st.opt = nd.AdamW(_trainable(model, cfg, "vision"), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                          eps=cfg.eps, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
        fv = replace(cfg.flow(), lambda_s=0.0)
        _train_loop(st, cfg, data, max(st.step, half), cfg.steps, dirs, "vision", fv, on_step)
    else:
        _train_loop(st, cfg, data, st.step, cfg.steps, dirs, None, None, on_step)
    save_state(last, st, cfg)
    secs = time.perf_counter() - t0
    (dirs["logs"] / "train.log").write_text(
        f"steps {st.step}\nseconds {secs:.1f}\nparams {model.param_count()}\nvae_error {vae.train_error:.5f}\n")
    return TrainResult(Path(cfg.out), model, norm, vae, st.history, train_recs, val_recs, secs)


def smoothed(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    k = min(window, len(v))
    return np.convolve(v, np.ones(k) / k, mode="valid")


# ---------------------------------------------------------------- generation

@dataclass
class Generated:
    mel: np.ndarray
    head: np.ndarray        # latent H in data units
    face: np.ndarray
    head_pose: np.ndarray


def generate(model: AVDiT, norm: NormStats, vae: HeadVAE | None, records, seed: int = 0,
             steps: int = 8, chunk: int = 8, guided_inputs: bool = True) -> list[Generated]:
    """Sample S, H, F for each record's tokens (and participant streams)."""
    out = []
    records = list(records)
    flowcfg = FlowConfig(steps=steps)
    for i0 in range(0, len(records), chunk):
        group = records[i0:i0 + chunk]
        n = min(r.n for r in group)
        toks = np.stack([r.tokens[:n] for r in group]).astype(np.float64)
        pf = np.stack([r.participant_features[:n] for r in group]).astype(np.float64) if guided_inputs else None
        pt = np.stack([r.participant_tokens[:n] for r in group]).astype(np.float64) if guided_inputs else None
        rng = np.random.default_rng([seed, 104729, i0])
        s, h, f = sample(model, toks, flowcfg, rng, pf, pt, norm)
        for j in range(len(group)):
            pose = vae.decode(h[j]) if vae is not None else np.zeros((n, 7))
            out.append(Generated(s[j], h[j], f[j], pose))
    return out


def generated_record(g: Generated, tokens: np.ndarray, src: CorpusRecord | None = None) -> CorpusRecord:
    n = len(g.mel)
    z = np.zeros(0, np.int32)
    return CorpusRecord(
        tokens=np.asarray(tokens[:n], np.float32), mel=g.mel.astype(np.float32), face=g.face.astype(np.float32),
        head_pose=g.head_pose.astype(np.float32),
        participant_features=(src.participant_features[:n] if src is not None else np.zeros((n, 56), np.float32)),
        participant_tokens=(src.participant_tokens[:n] if src is not None else np.zeros((n, 29), np.float32)),
        symbols=np.zeros(n, np.int32), participant_symbols=np.zeros(n, np.int32), onsets=z, beats=z, closures=z,
        smiles=z, participant_smiles=z, reactions=np.zeros((0, 3), np.int32))


# ---------------------------------------------------------------- evaluation

@dataclass
class BeatComparison:
    true_h: list
    shuffled_h: list
    true_e: list
    shuffled_e: list

    def fraction_above(self) -> tuple[float, float]:
        h = np.mean(np.array(self.true_h) > np.array(self.shuffled_h))
        e = np.mean(np.array(self.true_e) > np.array(self.shuffled_e))
        return float(h), float(e)


def beat_comparison(gens: list[Generated], seed: int = 0, shuffles: int = 20) -> BeatComparison:
    rng = np.random.default_rng([seed, 31337])
    th, sh, te, se = [], [], [], []
    for g in gens:
        for tv, sv, motion in ((th, sh, g.head), (te, se, g.face)):
            try:
                tv.append(beat_align(g.mel, motion))
                sv.append(shuffled_beat_align(g.mel, motion, rng, shuffles))
            except ValueError:
                tv.append(0.0)
                sv.append(0.0)
    return BeatComparison(th, sh, te, se)


def evaluate_model(model, norm, vae, gt_records, seed: int = 0, steps: int = 8, config: dict | None = None,
                   gens: list[Generated] | None = None) -> tuple[EvalReport, list[Generated]]:
    gens = gens or generate(model, norm, vae, gt_records, seed, steps)
    preds = [generated_record(g, r.tokens, r) for g, r in zip(gens, gt_records)]
    gts = []
    for g, r in zip(gens, gt_records):
        n = len(g.mel)
        gts.append(replace(r, mel=r.mel[:n], face=r.face[:n]))
    decoder = load_lip_decoder(gt_records[0].face.shape[1])
    rep = evaluate(preds, gts, decoder, head_latents=[g.head for g in gens], config=config)
    return rep, gens


def reconstruction_error(gens: list[Generated], records, norm: NormStats, vae: HeadVAE) -> float:
    """Mean absolute error against ground truth in normalized space, averaged over S, H and F."""
    errs = []
    for g, r in zip(gens, records):
        n = len(g.mel)
        pairs = (("audio", g.mel, r.mel[:n]), ("head", g.head, vae.encode(r.head_pose[:n])),
                 ("face", g.face, r.face[:n]))
        errs.append(np.mean([np.abs(norm.normalize(k, a) - norm.normalize(k, b)).mean() for k, a, b in pairs]))
    return float(np.mean(errs))


def smile_events(face: np.ndarray, level: float = SMILE_LEVEL) -> np.ndarray:
    """Upward crossings of ``level`` on the smile channel."""
    s = np.asarray(face)[:, SMILE_CHANNEL]
    above = s > level
    return np.flatnonzero(above & ~np.concatenate([[False], above[:-1]]))


def oracle_smile_frames(rec: CorpusRecord) -> np.ndarray:
    """Expected actor smile crossings: each reaction start plus half the ramp."""
    return rec.reactions[:, 1] + 3 if len(rec.reactions) else np.zeros(0, int)


def smile_f1(gens: list[Generated], records, slack: int = SMILE_SLACK) -> float:
    hits = npred = ngt = 0
    from .metrics import match_events
    for g, r in zip(gens, records):
        n = len(g.face)
        pred = smile_events(g.face)
        gt = oracle_smile_frames(r)
        gt = gt[gt < n]
        hits += match_events(pred, gt, slack)
        npred += len(pred)
        ngt += len(gt)
    if npred == 0 or ngt == 0:
        return 0.0 if (npred or ngt) else 1.0
    p, rcl = hits / npred, hits / ngt
    return 0.0 if hits == 0 else 2 * p * rcl / (p + rcl)


def write_report(dirs, name: str, rep: EvalReport) -> None:
    (dirs["reports"] / f"{name}.txt").write_text(rep.pretty() + "\n")
    (dirs["reports"] / f"{name}.json").write_text(rep.to_json() + "\n")


# ---------------------------------------------------------------- ablation and dyadic experiments

@dataclass
class AblationResult:
    reports: dict
    table: str
    direction_ok: bool
    diagnostic: str


def ablation_table(reports: dict[str, EvalReport]) -> str:
    cols = EvalReport.METRICS
    lines = ["variant    " + " ".join(f"{c:>8}" for c in cols)]
    for v, r in reports.items():
        lines.append(f"{v:<10} " + " ".join(f"{getattr(r, c):8.4f}" for c in cols))
    return "\n".join(lines)


def run_ablation(base: RunConfig, variants=VARIANTS, records=None, vae: HeadVAE | None = None,
                 margin: float = 0.0, trained: dict | None = None) -> AblationResult:
    """Train every variant on the same corpus and seed, evaluate on the held-out split.

    ``trained`` maps variant names to existing ``TrainResult``/``LoadedModel``
    objects (trained with ``base``) that are evaluated instead of retrained.
    ``margin`` loosens the avflow >= separate check on BC_h and BC_e.
    """
    variants = tuple(variants)
    missing = [v for v in ("avflow", "separate") if v not in variants]
    if missing:
        raise MissingVariant(f"ablation needs {missing}")
    for v in variants:
        if v not in VARIANTS:
            raise MissingVariant(f"unknown variant {v!r}")
    records = records if records is not None else load_records(base.corpus)
    trained = dict(trained or {})
    _, val = split_records(records, base.val_records)
    reports = {}
    for v in variants:
        cfg = replace(base, variant=v, out=str(Path(base.out) / v))
        res = trained.get(v)
        if res is None:
            res = train(cfg, records, vae)
        vae = res.vae
        rep, _ = evaluate_model(res.model, res.norm, res.vae, val, base.seed, base.solver_steps,
                                config=asdict(cfg))
        rep.extra["params"] = res.model.param_count()
        reports[v] = rep
    ok = (reports["avflow"].bc_h + margin >= reports["separate"].bc_h and
          reports["avflow"].bc_e + margin >= reports["separate"].bc_e)
    diag = "" if ok else (
        f"avflow BC_h {reports['avflow'].bc_h:.4f} / BC_e {reports['avflow'].bc_e:.4f} below separate "
        f"{reports['separate'].bc_h:.4f} / {reports['separate'].bc_e:.4f} (margin {margin})")
    if diag:
        log.warning("ablation direction not reproduced: %s", diag)
    table = ablation_table(reports)
    dirs = run_dirs(base.out)
    (dirs["reports"] / "ablation.txt").write_text(table + ("\n" + diag if diag else "") + "\n")
    (dirs["reports"] / "ablation.json").write_text(
        json.dumps({v: json.loads(r.to_json()) for v, r in reports.items()}, indent=2) + "\n")
    return AblationResult(reports, table, ok, diag)


@dataclass
class DyadicReport:
    smile_f1_guided: float
    smile_f1_unguided: float
    fd_e_guided: float
    fd_e_unguided: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def expression_norm_trace(gens: list[Generated]) -> list[np.ndarray]:
    return [np.linalg.norm(g.face, axis=1) for g in gens]


def run_dyadic_eval(guided: LoadedModel | TrainResult, unguided: LoadedModel | TrainResult, records,
                    seed: int = 0, steps: int = 8, out=None) -> DyadicReport:
    records = list(records)
    if not records or not any(len(r.reactions) for r in records) or \
            not np.any([np.abs(r.participant_features).sum() for r in records]):
        raise NoParticipantStreams("records carry no participant streams or reaction links")
    results = {}
    for name, m in (("guided", guided), ("unguided", unguided)):
        gens = generate(m.model, m.norm, m.vae, records, seed, steps)
        fd = frechet_expression_distance([g.face for g in gens], [r.face[:len(g.face)] for g, r in zip(gens, records)])
        results[name] = (smile_f1(gens, records), fd, gens)
    rep = DyadicReport(results["guided"][0], results["unguided"][0], results["guided"][1], results["unguided"][1])
    if out is not None:
        dirs = run_dirs(out)
        (dirs["reports"] / "dyadic.json").write_text(rep.to_json() + "\n")
        with open(dirs["reports"] / "expression_norm.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sequence", "frame", "guided", "unguided", "ground_truth"])
            for i, r in enumerate(records[:4]):
                tg = np.linalg.norm(results["guided"][2][i].face, axis=1)
                tu = np.linalg.norm(results["unguided"][2][i].face, axis=1)
                tt = np.linalg.norm(r.face[:len(tg)], axis=1)
                for f in range(len(tg)):
                    w.writerow([i, f, f"{tg[f]:.6g}", f"{tu[f]:.6g}", f"{tt[f]:.6g}"])
    return rep


# ---------------------------------------------------------------- inference

@dataclass
class InferResult:
    record: CorpusRecord
    model_seconds: float


def infer(ckpt, tokens: np.ndarray, seed: int = 0, steps: int = 8, participant=None, out=None) -> InferResult:
    """Generate one record from ``(n, 29)`` tokens; timing covers the model only."""
    lm = load_model(ckpt)
    rng = np.random.default_rng(seed)
    pf, pt = participant if participant is not None else (None, None)
    t0 = time.perf_counter()
    s, h, f = sample(lm.model, np.asarray(tokens, dtype=np.float64), FlowConfig(steps=steps), rng, pf, pt, lm.norm)
    secs = time.perf_counter() - t0
    g = Generated(s, h, f, lm.vae.decode(h))
    rec = generated_record(g, tokens)
    if out is not None:
        header = {"format": "AVFC", "version": 1, "fps": 86, "face_dim": f.shape[1], "token_dim": 29,
                  "mel_dim": 80, "participant_dim": 56, "records": 1, "generated": True, "seed": seed,
                  "solver_steps": steps}
        with CorpusWriter(out, header) as w:
            w.write(rec)
    return InferResult(rec, secs)
