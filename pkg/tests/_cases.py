"""Shared gradient-check cases: (name, fn, input shapes, input sampler)."""

import numpy as np

from avflow import ndgrad as nd
from avflow.layers import band_offsets, rotary_tables


def _weighted(out, seed=99):
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return nd.sum(out * nd.constant(w))


_OFF = band_offsets(4, 1)
_COS, _SIN = rotary_tables(5, 4)
_MASK = np.random.default_rng(3).random((3, 5)) > 0.3
_MASK[:, 0] = True
_IDS = np.array([[0, 2, 2], [1, 0, 3]])


def normal(shape, rng):
    return rng.standard_normal(shape)


def positive(shape, rng):
    return rng.uniform(0.5, 2.0, shape)


GRAD_CASES = [
    ("add", lambda a, b: _weighted(a + b), [(3, 4), (4,)], normal),
    ("sub", lambda a, b: _weighted(a - b), [(2, 3, 4), (3, 4)], normal),
    ("mul", lambda a, b: _weighted(a * b), [(3, 4), (3, 4)], normal),
    ("neg", lambda a: _weighted(-a), [(3, 4)], normal),
    ("exp", lambda a: _weighted(nd.exp(a)), [(3, 4)], normal),
    ("log", lambda a: _weighted(nd.log(a)), [(3, 4)], positive),
    ("sigmoid", lambda a: _weighted(nd.sigmoid(a)), [(3, 4)], normal),
    ("gelu", lambda a: _weighted(nd.gelu(a)), [(3, 4)], normal),
    ("matmul", lambda a, b: _weighted(a @ b), [(2, 3, 4), (4, 5)], normal),
    ("matmul_batched", lambda a, b: _weighted(a @ b), [(2, 3, 4), (2, 4, 2)], normal),
    ("concat", lambda a, b: _weighted(nd.concat([a, b], axis=-1)), [(3, 2), (3, 4)], normal),
    ("slice", lambda a: _weighted(nd.slice(a, 1, 4, axis=-1)), [(3, 5)], normal),
    ("reshape", lambda a: _weighted(a.reshape(4, 3)), [(3, 4)], normal),
    ("transpose", lambda a: _weighted(a.transpose(2, 0, 1)), [(2, 3, 4)], normal),
    ("take", lambda a: _weighted(nd.take(a, np.array([[0, 2], [2, 1]]), axis=0)), [(3, 4)], normal),
    ("embedding", lambda t: _weighted(nd.embedding(t, _IDS)), [(4, 3)], normal),
    ("sum", lambda a: _weighted(nd.sum(a, axis=1)), [(3, 4)], normal),
    ("mean", lambda a: _weighted(nd.mean(a, axis=0, keepdims=True)), [(3, 4)], normal),
    ("softmax", lambda a: _weighted(nd.softmax(a)), [(3, 5)], normal),
    ("softmax_masked", lambda a: _weighted(nd.softmax(a, mask=_MASK)), [(3, 5)], normal),
    ("layernorm", lambda a: _weighted(nd.layernorm(a)), [(3, 6)], normal),
    ("l1_loss", lambda a, b: nd.l1_loss(a, b), [(3, 4), (3, 4)], normal),
    ("l2_loss", lambda a, b: nd.l2_loss(a, b), [(3, 4), (3, 4)], normal),
    ("rotary", lambda a: _weighted(nd.rotary(a, _COS, _SIN)), [(2, 5, 4)], normal),
    ("band_scores", lambda q, k: _weighted(nd.band_scores(q, k, _OFF)), [(2, 5, 3), (2, 5, 3)], normal),
    ("band_mix", lambda p, v: _weighted(nd.band_mix(p, v, _OFF)), [(2, 5, 4), (2, 5, 3)], normal),
]


def run_case(fn, shapes, sampler, seed):
    rng = np.random.default_rng(seed)
    arrays = [sampler(s, rng) for s in shapes]
    return nd.gradcheck(fn, arrays, h=1e-3, rtol=1e-3)
