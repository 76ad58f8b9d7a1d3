"""Command line entry point: ``avflow <subcommand> ...``.

Every subcommand validates its arguments before creating or writing files.
Failures print one JSON object ``{"error": ..., "message": ...}`` to stderr
and exit with status 2.  ``AVFLOW_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import os

_threads = os.environ.get("AVFLOW_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import harness as hs  # noqa: E402
from . import synthcorpus as sc  # noqa: E402
from . import texttokens as tt  # noqa: E402

log = logging.getLogger("avflow")


class UsageError(ValueError):
    pass


def _fail(exc: BaseException) -> int:
    name = type(exc).__name__
    if isinstance(exc, UsageError):
        name = "ConfigInvalid"
    print(json.dumps({"error": name, "message": str(exc)}), file=sys.stderr)
    return 2


def _need_file(path, what: str) -> Path:
    if not path or not Path(path).is_file():
        raise UsageError(f"{what} {path!r} does not exist")
    return Path(path)


def _run_config(args) -> hs.RunConfig:
    cfg = hs.RunConfig.load(args.config) if args.config else hs.RunConfig()
    if getattr(args, "paper_dims", False):
        cfg = cfg.with_paper_dims()
    over = {}
    for key in ("corpus", "out", "seed", "steps", "variant", "guidance"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    if getattr(args, "resume", False):
        over["resume"] = True
    cfg = replace(cfg, **over)
    cfg.validate(check_paths=True)
    return cfg


# ---------------------------------------------------------------- subcommands

def cmd_gen_corpus(args) -> int:
    if args.records < 1 or args.seconds <= 0 or args.face_dim < 3:
        raise UsageError("need records >= 1, seconds > 0, face-dim >= 3")
    if not args.out:
        raise UsageError("--out is required")
    cfg = sc.CorpusConfig(records=args.records, seconds=args.seconds, face_dim=args.face_dim)
    lex = sc.default_lexicon(args.face_dim)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with sc.CorpusWriter(args.out, sc.make_header(args.seed, cfg, lex, cfg.records)) as w:
        for rec in sc.iter_generate(args.seed, cfg, lex):
            w.write(rec)
    print(f"wrote {cfg.records} records x {cfg.frames} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    res = hs.train(cfg)
    last = res.history[-1] if res.history else None
    print(f"trained {cfg.variant}/{cfg.guidance} for {cfg.steps} steps in {res.seconds:.1f}s"
          + (f", final loss {last[1]:.4f}" if last else ""))
    print(f"checkpoint: {Path(cfg.out) / 'ckpt' / 'last.avfl'}")
    return 0


def _tokens_from_args(args) -> tuple[np.ndarray, object]:
    if args.tokens:
        rec = next(sc.iter_corpus(_need_file(args.tokens, "tokens corpus")))
        part = None
        if np.abs(rec.participant_features).sum() > 0:
            part = (rec.participant_features.astype(np.float64), rec.participant_tokens.astype(np.float64))
        return rec.tokens, part
    model = tt.TextTokens.load(_need_file(args.text_ckpt, "text-tokens checkpoint"))
    return tt.text_to_tokens(args.text, model, seed=args.seed).logits, None


def cmd_infer(args) -> int:
    if bool(args.tokens) == bool(args.text):
        raise UsageError("give exactly one of --tokens or --text")
    if args.text and not args.text_ckpt:
        raise UsageError("--text needs --text-ckpt")
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    ckpt = _resolve_ckpt(args.ckpt)
    tokens, part = _tokens_from_args(args)
    out = Path(args.out) if args.out else None
    if out is not None and out.suffix != ".avfc":
        out = hs.run_dirs(out)["samples"] / "infer.avfc"
    res = hs.infer(ckpt, tokens, seed=args.seed, steps=args.steps, participant=part, out=out)
    print(f"generated {res.record.n} frames; model time {res.model_seconds:.3f}s ({args.steps} steps)")
    if out is not None:
        print(f"record: {out}")
    return 0


def _resolve_ckpt(path) -> Path:
    p = Path(path or "")
    if p.is_dir():
        p = p / "ckpt" / "last.avfl"
    if not p.is_file():
        raise hs.MissingCheckpoint(f"no checkpoint at {path!r}")
    return p


def cmd_eval(args) -> int:
    ckpt = _resolve_ckpt(args.ckpt)
    against = _need_file(args.against, "--against corpus")
    lm = hs.load_model(ckpt)
    records = hs.load_records(against)
    if args.records:
        records = records[-args.records:]
    rep, _ = hs.evaluate_model(lm.model, lm.norm, lm.vae, records, args.seed, args.steps,
                               config=asdict(lm.config) if lm.config is not None else None)
    print(rep.pretty())
    print(rep.to_json())
    if args.out:
        hs.write_report(hs.run_dirs(args.out), "eval", rep)
    return 1 if rep.has_nan() else 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    variants = tuple(args.variants.split(",")) if args.variants else hs.VARIANTS
    res = hs.run_ablation(cfg, variants)
    print(res.table)
    if res.diagnostic:
        print(res.diagnostic)
    return 0


def cmd_dyadic_eval(args) -> int:
    g, u = _resolve_ckpt(args.guided), _resolve_ckpt(args.unguided)
    against = _need_file(args.against, "--against corpus")
    records = hs.load_records(against)
    if args.records:
        records = records[-args.records:]
    rep = hs.run_dyadic_eval(hs.load_model(g), hs.load_model(u), records, args.seed, args.steps, args.out)
    print(rep.to_json())
    return 0


def cmd_tokens_from_text(args) -> int:
    if not args.text:
        raise tt.EmptyText("--text is empty")
    if not args.out:
        raise UsageError("--out is required")
    model = tt.TextTokens.load(_need_file(args.ckpt, "text-tokens checkpoint"))
    seq = tt.text_to_tokens(args.text, model, seed=args.seed)
    n = len(seq.logits)
    z = np.zeros(0, np.int32)
    rec = sc.CorpusRecord(
        tokens=seq.logits.astype(np.float32), mel=np.zeros((n, sc.MEL_DIM), np.float32),
        face=np.zeros((n, 16), np.float32),
        head_pose=np.tile(np.array([1, 0, 0, 0, 0, 0, 0], np.float32), (n, 1)),
        participant_features=np.zeros((n, sc.PARTICIPANT_DIM), np.float32),
        participant_tokens=np.zeros((n, 29), np.float32), symbols=np.zeros(n, np.int32),
        participant_symbols=np.zeros(n, np.int32), onsets=z, beats=z, closures=z, smiles=z,
        participant_smiles=z, reactions=np.zeros((0, 3), np.int32))
    header = {"format": "AVFC", "version": sc.VERSION, "fps": 86, "token_dim": 29, "records": 1,
              "tokens_only": True, "text": args.text, "seed": args.seed}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with sc.CorpusWriter(args.out, header) as w:
        w.write(rec)
    print(f"{len(args.text)} symbols -> {n} frames; wrote {args.out}")
    return 0


def cmd_train_text_tokens(args) -> int:
    corpus = _need_file(args.corpus, "corpus")
    if not args.out:
        raise UsageError("--out is required")
    if args.steps is not None and args.steps < 1:
        raise UsageError("--steps must be >= 1")
    cfg = tt.TextTokensConfig(seed=args.seed)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    records = hs.load_records(corpus)
    n_val = max(1, len(records) // 10)
    hist: list = []
    model = tt.train_text_to_tokens(records[:-n_val], cfg, hist)
    acc = tt.frame_accuracy(model, records[-n_val:], seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    print(f"held-out frame accuracy {acc:.3f}; wrote {args.out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avflow", description="Joint audio-visual flow matching at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value run config file")
        sp.add_argument("--seed", type=int, default=None if config else 0)
        sp.add_argument("--out", help="output path or run directory")

    g = sub.add_parser("gen-corpus", help="write a synthetic dyadic corpus")
    common(g, config=False)
    g.add_argument("--records", type=int, default=200)
    g.add_argument("--seconds", type=float, default=20.0)
    g.add_argument("--face-dim", type=int, default=16)
    g.set_defaults(func=cmd_gen_corpus)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("ablate", cmd_ablate, "train and compare architecture variants")):
        t = sub.add_parser(name, help=helptext)
        common(t)
        t.add_argument("--corpus")
        t.add_argument("--steps", type=int)
        t.add_argument("--variant")
        t.add_argument("--guidance")
        t.add_argument("--paper-dims", action="store_true", help="full-size model dimensions")
        if name == "train":
            t.add_argument("--resume", action="store_true")
        else:
            t.add_argument("--variants", help="comma separated subset")
        t.set_defaults(func=func)

    i = sub.add_parser("infer", help="generate speech, head and face streams from tokens or text")
    common(i, config=False)
    i.add_argument("--ckpt", required=True, help="checkpoint file or run directory")
    i.add_argument("--tokens", help="corpus file whose first record supplies tokens")
    i.add_argument("--text")
    i.add_argument("--text-ckpt")
    i.add_argument("--steps", type=int, default=8)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a checkpoint against a corpus")
    common(e, config=False)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--against", required=True)
    e.add_argument("--records", type=int, default=10, help="score the last N records (0 = all)")
    e.add_argument("--steps", type=int, default=8)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dyadic-eval", help="compare participant-guided and unguided checkpoints")
    common(d, config=False)
    d.add_argument("--guided", required=True)
    d.add_argument("--unguided", required=True)
    d.add_argument("--against", required=True)
    d.add_argument("--records", type=int, default=10)
    d.add_argument("--steps", type=int, default=8)
    d.set_defaults(func=cmd_dyadic_eval)

    x = sub.add_parser("tokens-from-text", help="text to a tokens-only corpus file")
    common(x, config=False)
    x.add_argument("--text", required=True)
    x.add_argument("--ckpt", required=True)
    x.set_defaults(func=cmd_tokens_from_text)

    y = sub.add_parser("train-text-tokens", help="fit the text-to-tokens front end on a corpus")
    common(y, config=False)
    y.add_argument("--corpus", required=True)
    y.add_argument("--steps", type=int)
    y.set_defaults(func=cmd_train_text_tokens)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, hs.DivergedLoss) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
