"""
Training a small audio-visual model and sampling from it
========================================================

Trains a reduced AVDiT for a few hundred steps on a handful of records,
samples speech, head motion and expressions for a held-out script and
scores them. Then drives the same pipeline through the command line.
Takes about two minutes on one core; pass a step count to change that.
"""
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from avflow import harness as hs
from avflow import synthcorpus as sc

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
work = Path(tempfile.mkdtemp(prefix="avflow-demo-"))
records = sc.generate(1, sc.CorpusConfig(records=12, seconds=6.0)).records

cfg = hs.RunConfig(out=str(work / "run"), steps=steps, width=64, hidden=128, val_records=2,
                   vae_steps=200, ckpt_every=0, log_every=50)
res = hs.train(cfg, records)
loss = hs.smoothed([row[1] for row in res.history], 20)
print(f"trained {steps} steps in {res.seconds:.0f}s, smoothed loss {loss[0]:.3f} -> {loss[-1]:.3f}")

# sample the held-out scripts with 8 Euler steps and score them
rep, gens = hs.evaluate_model(res.model, res.norm, res.vae, res.val_records)
print(rep.pretty())
g = gens[0]
print("sample shapes: mel", g.mel.shape, "head latent", g.head.shape, "face", g.face.shape,
      "head pose", g.head_pose.shape)
print("unit quaternions:", np.allclose(np.linalg.norm(g.head_pose[:, :4], axis=1), 1, atol=1e-5))

# 8 against 32 sampling steps
for n in (8, 32):
    err = hs.reconstruction_error(hs.generate(res.model, res.norm, res.vae, res.val_records, steps=n),
                                  res.val_records, res.norm, res.vae)
    print(f"{n:2d} steps: normalized MAE to ground truth {err:.4f}")

# the same pipeline through the command line
cli = [sys.executable, "-m", "avflow"]
corpus = work / "corpus.avfc"
subprocess.run(cli + ["gen-corpus", "--seed", "2", "--records", "4", "--seconds", "4", "--out", str(corpus)], check=True)
(work / "run.cfg").write_text(f"corpus = {corpus}\nout = {work / 'cli'}\nsteps = 20\nwidth = 32\nhidden = 64\n"
                              "val_records = 1\nvae_steps = 40\n")
subprocess.run(cli + ["train", "--config", str(work / "run.cfg")], check=True)
subprocess.run(cli + ["infer", "--ckpt", str(work / "cli"), "--tokens", str(corpus),
                      "--out", str(work / "sample.avfc")], check=True)
subprocess.run(cli + ["eval", "--ckpt", str(work / "cli"), "--against", str(corpus), "--records", "1"], check=False)
print("outputs in", work)
