"""Acceptance criteria 1-10, one PASS/FAIL line each.

Criteria 7-10 train desk-scale models (about 20 minutes each on one CPU).
Trained runs are cached under pytest's cache directory, keyed by the run
config and the package sources, so reruns only re-evaluate. Delete
``.pytest_cache/d/avflow-acceptance`` to force retraining.
"""
import hashlib
import json
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import avflow
from avflow import flowmatch as fm
from avflow import harness as hs
from avflow import metrics as mt
from avflow import ndgrad as nd
from avflow import synthcorpus as sc
from avflow.avdit import VARIANTS, AVDiT, ConditionBundle, DitConfig, fuse
from avflow.codecs import FPS, make_lip_decoder

from _cases import GRAD_CASES, run_case
from test_avdit import SMALL, _inputs
from test_flowmatch import OracleModel, _batch

DESK_BUDGET_S = 30 * 60
BC_FRACTION = 0.95
ABLATION_MARGIN = float(os.environ.get("AVFLOW_ABLATION_MARGIN", "0.0"))


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1-6: unit oracles

def test_c01_flow_matching_math(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x0, x1 = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    end0 = np.abs(fm.ot_path(x0, x1, 0.0) - x0).max()
    end1 = np.abs(fm.ot_path(x0, x1, 1.0) - (1e-6 * x0 + x1)).max()
    u = fm.target_velocity(x0, x1)
    h = 1e-4
    fd_err = max(np.abs((fm.ot_path(x0, x1, t + h) - fm.ot_path(x0, x1, t - h)) / (2 * h) - u).max()
                 / np.abs(u).max() for t in (0.1, 0.5, 0.9))
    batch = _batch(rng)
    cfg = fm.FlowConfig()
    with nd.precision(np.float64):
        loss, _ = fm.cfm_loss(OracleModel(batch, cfg.sigma_min), batch, cfg, np.random.default_rng(1))
    dt = time.perf_counter() - t0
    ok = end0 <= 1e-6 and end1 <= 1e-6 and fd_err <= 1e-4 and loss.item() < 1e-9 and dt < 1.0
    report(capsys, 1, ok, f"endpoints {end0:.1e}/{end1:.1e}, d/dt rel {fd_err:.1e}, "
                          f"oracle loss {loss.item():.1e}, {dt:.2f}s")


def test_c02_autodiff_oracle(capsys):
    t0 = time.perf_counter()
    worst, name_worst = 0.0, ""
    for name, fn, shapes, sampler in GRAD_CASES:
        for seed in range(10):
            _, err = run_case(fn, shapes, sampler, seed)
            if err > worst:
                worst, name_worst = err, name
    dt = time.perf_counter() - t0
    report(capsys, 2, worst <= 1e-3 and dt < 30,
           f"{len(GRAD_CASES)} ops x 10 points, worst rel {worst:.1e} ({name_worst}), {dt:.1f}s")


def test_c03_euler_solver(capsys):
    c = np.array([0.25, -2.0])
    const_err = np.abs(fm.euler_solve(lambda t, x: c, np.ones(2), 8) - (1 + c)).max()
    steps = np.array([16, 32, 64, 128])
    err = [abs(fm.euler_solve(lambda t, x: -x, np.ones(1), n)[0] - math.exp(-1)) for n in steps]
    order = np.polyfit(np.log(1 / steps), np.log(err), 1)[0]
    x0 = np.array([1.0, -3.0])
    rec_err = np.abs(fm.euler_solve(lambda t, x: -x, x0, 8) - (1 - 1 / 8) ** 8 * x0).max()
    ok = const_err < 1e-12 and abs(order - 1.0) <= 0.1 and rec_err <= 1e-5
    report(capsys, 3, ok, f"constant field err {const_err:.1e}, order {order:.3f}, recursion err {rec_err:.1e}")


def test_c04_fusion_semantics(capsys):
    rng = np.random.default_rng(0)
    xa = nd.tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
    xv = nd.tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
    z = lambda *s: nd.tensor(np.zeros(s))
    ya, yv = fuse(xa, xv, z(8, 4), z(4), z(8, 4), z(4))
    identity = ya.data.tobytes() == xa.data.tobytes() and yv.data.tobytes() == xv.data.tobytes()

    U = np.zeros((8, 4))
    U[4:] = rng.standard_normal((4, 4))
    ya, _ = fuse(xa, xv, nd.tensor(U), z(4), z(8, 4), z(4))
    probe = float(np.abs(nd.backward(nd.sum(ya * ya), params=[xv])[xv]).max())

    xa_, xv_, t, cond = _inputs(np.random.default_rng(1))
    a = AVDiT(SMALL, "avflow", seed=5)(xa_, xv_, t, cond)
    s = AVDiT(SMALL, "separate", seed=5)(xa_, xv_, t, cond)
    bitwise = all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, s))
    report(capsys, 4, identity and probe > 0 and bitwise,
           f"zero fusion identity {identity}, cross-modal grad {probe:.2e}, avflow==separate {bitwise}")


def test_c05_causality_and_latency(capsys):
    rng = np.random.default_rng(3)
    n, probes, leaks = 40, 0, 0
    for variant in VARIANTS:
        xa, xv, t, cond = _inputs(rng, b=1, n=n)
        cond.audio_context = rng.standard_normal(xa.shape)
        m = AVDiT(SMALL, variant, guidance="audiovisual", seed=1)
        va, vv = (x.data for x in m(xa, xv, t, cond))
        for _ in range(6):
            i = int(rng.integers(0, n - SMALL.lookahead - 2))
            tok = cond.tokens.copy()
            tok[:, i + SMALL.lookahead + 1:] += rng.standard_normal(tok[:, i + SMALL.lookahead + 1:].shape)
            pert = ConditionBundle(tok, cond.participant_features, cond.participant_tokens, cond.audio_context)
            pa, pv = (x.data for x in m(xa, xv, t, pert))
            probes += 1
            leaks += not (np.array_equal(pa[:, :i + 1], va[:, :i + 1]) and np.array_equal(pv[:, :i + 1], vv[:, :i + 1]))
    cfg = DitConfig.paper()
    latency_ms = 1000 * cfg.window / FPS
    ok = leaks == 0 and cfg.lookahead == 2 and abs(latency_ms - 116) < 1 and latency_ms <= 120
    report(capsys, 5, ok, f"{probes} perturbation probes, {leaks} leaks; lookahead {cfg.lookahead}, "
                          f"window {cfg.window} frames = {latency_ms:.1f} ms")


def test_c06_metric_oracles(capsys):
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (200_000, 1))
    fd = mt.frechet_expression_distance(x, rng.normal(1, 1, (200_000, 1)))
    ba_same = mt.beat_align_from_beats([10, 40], [10, 40])
    ba_off = mt.beat_align_from_beats([20], [23], sigma=3.0)
    mel = rng.uniform(0.01, 1.0, (30, 80))
    cep = mt.mel_cepstrum(mel)
    shifted = cep.copy()
    shifted[:, 4] += 0.37
    mcd_err = abs(mt.mcd_cepstra(shifted, cep) - mt.MCD_CONST * 0.37)
    dec = make_lip_decoder(4)

    def codes(closed, n=40):
        c = np.full((n, 4), 0.5)
        c[list(closed), 0] = 0.0
        return c

    f1 = mt.f1_lip_closures(codes([6, 14, 25, 30]), codes([5, 15, 25, 35]), dec)
    ok = (abs(fd - 1.0) <= 0.05 and ba_same == 1.0 and abs(ba_off - math.exp(-0.5)) <= 1e-3
          and mcd_err <= 1e-4 and f1 == 0.75)
    report(capsys, 6, ok, f"FD {fd:.4f} (1.0), BC {ba_same} / {ba_off:.4f} (0.6065), "
                          f"MCD offset err {mcd_err:.1e}, F1 {f1}")


# ---------------------------------------------------------------- 7-10: trained models

def _source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(avflow.__file__).parent.glob("*/**/*.py")) + sorted(Path(avflow.__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def desk_records():
    return sc.generate(0, sc.CorpusConfig(records=200, seconds=20.0)).records


@pytest.fixture(scope="session")
def trained_runs(request, desk_records):
    root = request.config.cache.mkdir("avflow-acceptance")
    src = _source_hash()
    cache = {}

    def get(variant="avflow", guidance="none"):
        if (variant, guidance) in cache:
            return cache[variant, guidance]
        cfg = hs.RunConfig(seed=0, variant=variant, guidance=guidance, ckpt_every=0, log_every=500)
        key = hashlib.sha256((cfg.to_text() + src).encode()).hexdigest()[:12]
        cfg = replace(cfg, out=str(root / f"{variant}-{guidance}-{key}"))
        meta = Path(cfg.out) / "acceptance.json"
        if meta.is_file():
            run = hs.load_model(cfg.out)
            seconds = json.loads(meta.read_text())["seconds"]
            history = json.loads(meta.read_text())["history"]
        else:
            res = hs.train(cfg, desk_records)
            run, seconds, history = hs.load_model(res.run_dir), res.seconds, [r[1] for r in res.history]
            meta.write_text(json.dumps({"seconds": seconds, "history": history}))
        cache[variant, guidance] = (cfg, run, seconds, history)
        return cache[variant, guidance]

    return get


@pytest.fixture(scope="session")
def held_out(desk_records):
    return hs.split_records(desk_records, hs.RunConfig().val_records)[1]


@pytest.mark.slow
def test_c07_learning(capsys, trained_runs, desk_records, held_out, tmp_path):
    smoke = hs.train(hs.RunConfig(out=str(tmp_path), steps=300, val_records=0, ckpt_every=0), desk_records[:5])
    total = [r[1] for r in smoke.history]
    ratio = hs.smoothed(total, 20)[-1] / total[10]

    cfg, run, seconds, _ = trained_runs()
    rep, gens = hs.evaluate_model(run.model, run.norm, run.vae, held_out, cfg.seed, cfg.solver_steps)
    fh, fe = hs.beat_comparison(gens).fraction_above()
    ok = ratio <= 0.5 and seconds <= DESK_BUDGET_S and rep.f1_lips >= 0.8 and fh >= BC_FRACTION and fe >= BC_FRACTION
    report(capsys, 7, ok, f"smoke loss ratio {ratio:.3f} (<=0.5); desk training {seconds / 60:.1f} min; "
                          f"lip F1 {rep.f1_lips:.3f} (>=0.8); BC above shuffled in {fh:.0%} head / "
                          f"{fe:.0%} face of sequences (>=95%)")


@pytest.mark.slow
def test_c08_ablation_direction(capsys, trained_runs, desk_records, tmp_path):
    cfg, avf, _, _ = trained_runs("avflow")
    _, sep, _, _ = trained_runs("separate")
    res = hs.run_ablation(replace(cfg, out=str(tmp_path)), ("avflow", "separate"), desk_records,
                          margin=ABLATION_MARGIN, trained={"avflow": avf, "separate": sep})
    a, s = res.reports["avflow"], res.reports["separate"]
    detail = (f"avflow BC_h {a.bc_h:.4f} BC_e {a.bc_e:.4f} vs separate {s.bc_h:.4f} {s.bc_e:.4f} "
              f"(margin {ABLATION_MARGIN})")
    report(capsys, 8, res.direction_ok, detail + ("" if res.direction_ok else f"; {res.diagnostic}"))


@pytest.mark.slow
def test_c09_dyadic_guidance(capsys, trained_runs, held_out, tmp_path):
    _, unguided, _, _ = trained_runs("avflow", "none")
    _, guided, _, _ = trained_runs("avflow", "audiovisual")
    rep = hs.run_dyadic_eval(guided, unguided, held_out, out=tmp_path)
    report(capsys, 9, rep.smile_f1_guided > rep.smile_f1_unguided,
           f"smile F1 guided {rep.smile_f1_guided:.3f} vs unguided {rep.smile_f1_unguided:.3f}")


@pytest.mark.slow
def test_c10_sampling_steps(capsys, trained_runs, held_out):
    cfg, run, _, _ = trained_runs()
    err = {}
    for steps in (8, 32):
        gens = hs.generate(run.model, run.norm, run.vae, held_out, cfg.seed, steps)
        err[steps] = hs.reconstruction_error(gens, held_out, run.norm, run.vae)
    report(capsys, 10, err[8] <= 1.25 * err[32],
           f"normalized MAE 8 steps {err[8]:.4f} vs 32 steps {err[32]:.4f} (ratio {err[8] / err[32]:.3f}, <=1.25)")
