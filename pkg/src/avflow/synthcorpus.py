"""Procedural dyadic corpus with a known oracle.

An actor speaks scripted symbol sequences while a participant talks during
the actor's pauses and smiles now and then; the actor smiles back a few frames
later.  Each actor symbol is either plain or *stressed*.  Stress never shows
up in the tokens but produces a sharp spectral attack, a head nod and a face
gesture at the symbol onset, so audio/visual synchrony is something a model
has to generate jointly.  Stressed onsets are the annotated beat frames.

Records are stored in a framed binary file::

    b"AVFC" | u32 version | u32 header length | JSON header
    then per record: u32 payload length | payload | u32 CRC32(payload)

A payload is a list of named little-endian arrays.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .codecs import CHARSET, FPS, TOKEN_DIM, pose_from_euler

MAGIC = b"AVFC"
VERSION = 1
MEL_DIM = 80
PARTICIPANT_DIM = 56
CLOSURE_THRESHOLD = 1e-2
TOKEN_PEAK = 5.0
TOKEN_NOISE = 0.3
SMILE_RAMP = 6
NOD_SIGMA = 3.0
SILENCE = 0


class BadLexicon(ValueError):
    pass


class CorruptRecord(IOError):
    pass


class CorpusIoError(IOError):
    pass


# ---------------------------------------------------------------- lexicon

_APERTURE = {" ": 0.0, "a": 0.10, "e": 0.07, "i": 0.05, "o": 0.09, "u": 0.06,
             "m": 0.0, "b": 0.0, "p": 0.0, "s": 0.03, "t": 0.04, "l": 0.05}
_DURATION = {" ": (8, 24), "a": (8, 16), "e": (8, 16), "i": (8, 14), "o": (8, 16), "u": (8, 14),
             "m": (6, 12), "b": (6, 10), "p": (6, 10), "s": (6, 12), "t": (5, 9), "l": (5, 10)}
DEFAULT_CHARS = " aeioumbpstl"


@dataclass
class SymbolLexicon:
    chars: str
    mel: np.ndarray          # (K, 80)
    strokes: np.ndarray      # (K, D_f)
    aperture: np.ndarray     # (K,)
    durations: np.ndarray    # (K, 2) inclusive frame range
    seed: int = 7

    def __post_init__(self):
        k = len(self.chars)
        if k < 2 or self.chars[SILENCE] != " ":
            raise BadLexicon("symbol 0 must be silence ' ' and at least one other symbol is needed")
        if len(set(self.chars)) != k:
            raise BadLexicon("duplicate symbols")
        for c in self.chars:
            if c != " " and c not in CHARSET:
                raise BadLexicon(f"symbol {c!r} has no token row")
        if self.mel.shape != (k, MEL_DIM) or self.strokes.shape[0] != k or self.aperture.shape != (k,):
            raise BadLexicon("per-symbol tables do not match the symbol count")
        if np.any(self.mel[SILENCE] != 0) or self.aperture[SILENCE] != 0:
            raise BadLexicon("silence must have a zero template and closed lips")
        if np.any(self.durations[:, 0] < 1) or np.any(self.durations[:, 1] < self.durations[:, 0]):
            raise BadLexicon("duration ranges must satisfy 1 <= lo <= hi")
        if self.strokes.shape[1] < 3:
            raise BadLexicon("face codes need at least 3 channels (lips, smile, brow)")

    @property
    def size(self) -> int:
        return len(self.chars)

    @property
    def face_dim(self) -> int:
        return self.strokes.shape[1]

    def index(self, ch: str) -> int:
        return self.chars.index(ch)

    def token_row(self, sym: int) -> int:
        """Row of the 29-d token alphabet carrying this symbol (silence is the CTC blank)."""
        c = self.chars[sym]
        return 0 if c == " " else CHARSET.index(c)

    def hash(self) -> str:
        h = hashlib.sha256(self.chars.encode())
        for a in (self.mel, self.strokes, self.aperture, self.durations):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def default_lexicon(face_dim: int = 16, seed: int = 7, chars: str = DEFAULT_CHARS) -> SymbolLexicon:
    rng = np.random.default_rng(seed)
    k = len(chars)
    bins = np.arange(MEL_DIM)
    mel = np.zeros((k, MEL_DIM))
    for s, c in enumerate(chars):
        if c == " ":
            continue
        lo, hi = (40, 78) if c in "st" else (4, 60)
        for _ in range(3):
            centre, width = rng.uniform(lo, hi), rng.uniform(2, 8)
            mel[s] += rng.uniform(0.5, 1.0) * np.exp(-0.5 * ((bins - centre) / width) ** 2)
        mel[s] *= 16.0 / mel[s].sum()
    strokes = np.zeros((k, face_dim))
    strokes[1:, 2] = rng.uniform(0.4, 0.8, k - 1)
    strokes[1:, 3:] = rng.normal(0, 0.4, (k - 1, face_dim - 3))
    aperture = np.array([_APERTURE.get(c, 0.05) for c in chars])
    durations = np.array([_DURATION.get(c, (6, 12)) for c in chars])
    return SymbolLexicon(chars, mel, strokes, aperture, durations, seed)


# ---------------------------------------------------------------- scripts

@dataclass
class CorpusConfig:
    records: int = 200
    seconds: float = 20.0
    face_dim: int = 16
    stress_prob: float = 0.3
    reaction_rate: float = 3.0        # participant smiles per 10 s
    reaction_offset: tuple = (4, 8)   # actor smiles this many frames later
    lexicon_seed: int = 7

    @property
    def frames(self) -> int:
        return int(round(self.seconds * FPS))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reaction_offset"] = list(self.reaction_offset)
        return d


@dataclass
class DyadScript:
    n: int
    actor: list                 # (symbol, duration, stressed)
    participant: list           # (symbol, duration)
    participant_smiles: list = field(default_factory=list)   # (start, duration)
    reactions: list = field(default_factory=list)            # (participant frame, actor frame, offset, duration)


def _append(runs: list, sym: int, dur: int, *extra):
    if runs and runs[-1][0] == sym == SILENCE:
        runs[-1] = (SILENCE, runs[-1][1] + dur) + tuple(runs[-1][2:])
    else:
        runs.append((sym, dur) + extra)


def _words(rng, lex: SymbolLexicon, budget: int, stress_prob: float | None):
    """Runs of words separated by short pauses filling roughly ``budget`` frames."""
    runs, used = [], 0
    while used < budget:
        prev = SILENCE
        for _ in range(rng.integers(2, 6)):
            sym = prev
            while sym == prev:
                sym = int(rng.integers(1, lex.size))
            lo, hi = lex.durations[sym]
            dur = int(rng.integers(lo, hi + 1))
            extra = () if stress_prob is None else (bool(rng.random() < stress_prob),)
            runs.append((sym, dur) + extra)
            used += dur
            prev = sym
        gap = int(rng.integers(6, 17))
        runs.append((SILENCE, gap) + (() if stress_prob is None else (False,)))
        used += gap
    return runs, used


def _clip(runs: list, n: int) -> list:
    out, t = [], 0
    for r in runs:
        if t >= n:
            break
        d = min(r[1], n - t)
        _append(out, r[0], d, *r[2:])
        t += d
    if t < n:
        _append(out, SILENCE, n - t, *((False,) if out and len(out[0]) == 3 else ()))
    return out


def make_script(rng: np.random.Generator, n: int, lex: SymbolLexicon, cfg: CorpusConfig) -> DyadScript:
    actor, participant = [], []
    t = 0
    lead = int(rng.integers(0, 20))
    if lead:
        _append(actor, SILENCE, lead, False)
        _append(participant, SILENCE, lead)
        t = lead
    while t < n:
        speak = int(rng.integers(2 * FPS, 5 * FPS))
        runs, used = _words(rng, lex, speak, cfg.stress_prob)
        for r in runs:
            _append(actor, *r)
        _append(participant, SILENCE, used)
        t += used
        listen = int(rng.integers(1 * FPS, 3 * FPS))
        _append(actor, SILENCE, listen, False)
        pre = int(rng.integers(4, 12))
        _append(participant, SILENCE, pre)
        pruns, pused = _words(rng, lex, max(listen - pre - 20, 10), None)
        for r in pruns:
            _append(participant, *r)
        # participant may run over into the actor's next turn; pad actor to match
        if pre + pused > listen:
            _append(actor, SILENCE, pre + pused - listen, False)
        else:
            _append(participant, SILENCE, listen - pre - pused)
        t += max(listen, pre + pused)
        tot_p = sum(r[1] for r in participant)
        tot_a = sum(r[1] for r in actor)
        if tot_p < tot_a:
            _append(participant, SILENCE, tot_a - tot_p)
    actor, participant = _clip(actor, n), _clip(participant, n)

    smiles, reactions = [], []
    rate = cfg.reaction_rate / (10.0 * FPS)
    f = int(rng.exponential(1 / rate)) if rate > 0 else n
    while f < n - 2 * SMILE_RAMP:
        dur = int(rng.integers(20, 41))
        smiles.append((f, dur))
        off = int(rng.integers(cfg.reaction_offset[0], cfg.reaction_offset[1] + 1))
        if f + off < n:
            reactions.append((f, f + off, off, dur))
        f += dur + 20 + int(rng.exponential(1 / rate))
    return DyadScript(n, actor, participant, smiles, reactions)


def silence_script(n: int) -> DyadScript:
    return DyadScript(n, [(SILENCE, n, False)], [(SILENCE, n)])


def make_participant_reaction_oracle(script: DyadScript) -> list[tuple[int, str]]:
    """Expected actor reaction events as ``(frame, "smile")`` pairs."""
    return [(a, "smile") for (_, a, _, _) in script.reactions]


# ---------------------------------------------------------------- rendering

@dataclass
class CorpusRecord:
    tokens: np.ndarray
    mel: np.ndarray
    face: np.ndarray
    head_pose: np.ndarray
    participant_features: np.ndarray
    participant_tokens: np.ndarray
    symbols: np.ndarray
    participant_symbols: np.ndarray
    onsets: np.ndarray
    beats: np.ndarray
    closures: np.ndarray
    smiles: np.ndarray
    participant_smiles: np.ndarray
    reactions: np.ndarray      # (k, 3): participant frame, actor frame, offset

    INT_FIELDS = ("symbols", "participant_symbols", "onsets", "beats", "closures", "smiles",
                  "participant_smiles", "reactions")
    STREAMS = ("tokens", "mel", "face", "head_pose", "participant_features", "participant_tokens")

    @property
    def n(self) -> int:
        return len(self.tokens)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "CorpusRecord":
        names = [f.name for f in fields(cls)]
        missing = [k for k in names if k not in arrays]
        empty = {k: np.zeros(0, np.int32) for k in missing if k in cls.INT_FIELDS}
        if "reactions" in empty:
            empty["reactions"] = np.zeros((0, 3), np.int32)
        still = [k for k in missing if k not in empty]
        if still:
            raise CorruptRecord(f"record lacks streams {still}")
        return cls(**{k: arrays[k] if k in arrays else empty[k] for k in names})

    def validate(self, lip_gain: float = 1.0) -> None:
        n = self.n
        for k in self.STREAMS + ("symbols", "participant_symbols"):
            if len(getattr(self, k)) != n:
                raise CorruptRecord(f"stream {k} has {len(getattr(self, k))} frames, tokens {n}")
        closed = np.flatnonzero(lip_gain * np.abs(self.face[:, 0]) < CLOSURE_THRESHOLD)
        if not np.array_equal(closed, self.closures):
            raise CorruptRecord("closure annotations disagree with the lip channel")
        if not np.all(np.isin(self.beats, self.onsets)):
            raise CorruptRecord("beat frames must be symbol onsets")
        ons = np.flatnonzero(np.diff(self.symbols, prepend=SILENCE) != 0)
        ons = ons[self.symbols[ons] != SILENCE]
        if not np.array_equal(ons, self.onsets):
            raise CorruptRecord("onset annotations disagree with the symbol track")

    def __eq__(self, other) -> bool:
        if not isinstance(other, CorpusRecord):
            return NotImplemented
        a, b = self.arrays(), other.arrays()
        return all(a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and
                   a[k].tobytes() == b[k].tobytes() for k in a)


def _expand(runs, n: int) -> np.ndarray:
    out = np.concatenate([np.full(r[1], r[0], dtype=np.int32) for r in runs])
    assert len(out) == n
    return out


def _tokens(rng, lex: SymbolLexicon, symbols: np.ndarray) -> np.ndarray:
    tok = rng.normal(0.0, TOKEN_NOISE, (len(symbols), TOKEN_DIM))
    rows = np.array([lex.token_row(s) for s in range(lex.size)])[symbols]
    tok[np.arange(len(symbols)), rows] = TOKEN_PEAK
    return tok.astype(np.float32)


def _smile_track(events, n: int) -> np.ndarray:
    s = np.zeros(n)
    ramp = (1 - np.cos(np.pi * np.arange(1, SMILE_RAMP + 1) / SMILE_RAMP)) / 2
    for start, dur in events:
        env = np.ones(dur)
        env[:SMILE_RAMP] = ramp
        env[-SMILE_RAMP:] = np.minimum(env[-SMILE_RAMP:], ramp[::-1])
        stop = min(start + dur, n)
        s[start:stop] = np.maximum(s[start:stop], env[:stop - start])
    return s


def _random_walk(rng, n: int, amp: float, smooth: float = 25.0) -> np.ndarray:
    w = gaussian_filter1d(np.cumsum(rng.standard_normal(n + 200)), smooth, mode="nearest")[100:100 + n]
    w -= w.mean()
    return amp * w / max(w.std(), 1e-9)


def _participant_map(face_dim: int, k: int, seed: int = 99) -> np.ndarray:
    """Fixed ``(56, K+2)`` map from [symbol one-hot, aperture, smile] to the 50+3+3 layout."""
    rng = np.random.default_rng(seed)
    m = np.zeros((PARTICIPANT_DIM, k + 2))
    m[:50, :k] = rng.normal(0, 0.3, (50, k))
    m[:, SILENCE] = 0
    m[50:53, k] = [8.0, 2.0, 0.5]       # jaw follows aperture
    m[:5, k + 1] = 1.5                  # smile loads on the first expression dims
    m[10:15, k + 1] = -0.8
    return m


def render(script: DyadScript, lex: SymbolLexicon, rng: np.random.Generator) -> CorpusRecord:
    """Synthesize every stream of one record from its script."""
    n, df = script.n, lex.face_dim
    symbols = _expand(script.actor, n)
    psymbols = _expand(script.participant, n)
    idx = np.arange(n)

    mel = np.zeros((n, MEL_DIM))
    lip = np.zeros(n)
    gesture = np.zeros((n, df))
    pitch_nod = np.zeros(n)
    onsets, beats = [], []
    t, prev_ap = 0, 0.0
    for sym, dur, stressed in script.actor:
        k = np.arange(dur)
        ap = lex.aperture[sym]
        half = max(dur / 2.0, 1.0)
        u = np.clip(k / half, 0, 1)
        lip[t:t + dur] = prev_ap + (ap - prev_ap) * (3 * u ** 2 - 2 * u ** 3)
        prev_ap = ap
        if sym != SILENCE:
            onsets.append(t)
            if stressed:
                env = 2.0 * np.exp(-2.5 * k / dur)
                beats.append(t)
                bump = np.exp(-0.5 * ((idx - t) / NOD_SIGMA) ** 2)
                gesture += bump[:, None] * lex.strokes[sym][None, :]
                pitch_nod += 0.12 * bump
            else:
                attack = np.minimum((k + 1) / 6.0, 1.0)
                env = attack * np.exp(-2.5 * np.maximum(k - 5, 0) / dur)
            mel[t:t + dur] = env[:, None] * lex.mel[sym][None, :]
        t += dur

    actor_smile_events = [(a, d) for (_, a, _, d) in script.reactions]
    smile = _smile_track(actor_smile_events, n)
    psmile = _smile_track(script.participant_smiles, n)

    face = gesture
    face[:, 0] = lip
    face[:, 1] = smile
    face = face.astype(np.float32)

    pitch = pitch_nod + _random_walk(rng, n, 0.05)
    yaw = _random_walk(rng, n, 0.12)
    roll = _random_walk(rng, n, 0.04)
    trans = np.stack([_random_walk(rng, n, 0.01), _random_walk(rng, n, 0.01),
                      _random_walk(rng, n, 0.01) + 0.1 * pitch_nod], axis=1)
    head = pose_from_euler(pitch, yaw, roll, trans).astype(np.float32)

    k = lex.size
    pap = lex.aperture[psymbols]
    inp = np.concatenate([np.eye(k)[psymbols], pap[:, None], psmile[:, None]], axis=1)
    pfeat = inp @ _participant_map(df, k).T + rng.normal(0, 0.02, (n, PARTICIPANT_DIM))

    tokens = _tokens(rng, lex, symbols)
    ptokens = _tokens(rng, lex, psymbols)
    closures = np.flatnonzero(np.abs(face[:, 0]) < CLOSURE_THRESHOLD)
    reactions = np.array([(p, a, o) for (p, a, o, _) in script.reactions], dtype=np.int32).reshape(-1, 3)
    i32 = lambda v: np.asarray(v, dtype=np.int32)
    return CorpusRecord(
        tokens=tokens, mel=mel.astype(np.float32), face=face, head_pose=head,
        participant_features=pfeat.astype(np.float32), participant_tokens=ptokens,
        symbols=symbols, participant_symbols=psymbols, onsets=i32(onsets), beats=i32(beats),
        closures=i32(closures), smiles=i32([a for a, _ in actor_smile_events]),
        participant_smiles=i32([s for s, _ in script.participant_smiles]), reactions=reactions)


def script_from_record(rec: CorpusRecord) -> list[tuple[int, int]]:
    """Run-length ``(symbol, duration)`` pairs of the actor track."""
    s = rec.symbols
    cuts = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate([[0], cuts])
    stops = np.concatenate([cuts, [len(s)]])
    return [(int(s[a]), int(b - a)) for a, b in zip(starts, stops)]


# ---------------------------------------------------------------- corpus

@dataclass
class Corpus:
    header: dict
    records: list

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.header == other.header and len(self) == len(other) and \
            all(a == b for a, b in zip(self.records, other.records))

    @property
    def face_dim(self) -> int:
        return int(self.header["face_dim"])

    def lexicon(self) -> SymbolLexicon:
        lex = default_lexicon(self.face_dim, self.header.get("lexicon_seed", 7),
                              self.header.get("lexicon_chars", DEFAULT_CHARS))
        return lex


def record_rngs(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def make_header(seed: int, cfg: CorpusConfig, lex: SymbolLexicon, records: int) -> dict:
    return {"format": "AVFC", "version": VERSION, "fps": FPS, "token_dim": TOKEN_DIM, "mel_dim": MEL_DIM,
            "face_dim": lex.face_dim, "participant_dim": PARTICIPANT_DIM, "seed": seed, "records": records,
            "lexicon_chars": lex.chars, "lexicon_seed": lex.seed, "lexicon_hash": lex.hash(),
            "config": cfg.to_dict()}


def generate_record(rng, cfg: CorpusConfig, lex: SymbolLexicon) -> CorpusRecord:
    return render(make_script(rng, cfg.frames, lex, cfg), lex, rng)


def iter_generate(seed: int, cfg: CorpusConfig, lex: SymbolLexicon | None = None) -> Iterator[CorpusRecord]:
    lex = lex or default_lexicon(cfg.face_dim, cfg.lexicon_seed)
    for rng in record_rngs(seed, cfg.records):
        yield generate_record(rng, cfg, lex)


def generate(seed: int, cfg: CorpusConfig | None = None, lexicon: SymbolLexicon | None = None,
             workers: int = 1) -> Corpus:
    """Deterministic corpus for ``seed``; each record owns an independent RNG stream."""
    cfg = cfg or CorpusConfig()
    lex = lexicon or default_lexicon(cfg.face_dim, cfg.lexicon_seed)
    if lex.face_dim != cfg.face_dim:
        raise BadLexicon(f"lexicon strokes are {lex.face_dim} wide, config asks for {cfg.face_dim}")
    rngs = record_rngs(seed, cfg.records)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            records = list(ex.map(lambda r: generate_record(r, cfg, lex), rngs))
    else:
        records = [generate_record(r, cfg, lex) for r in rngs]
    return Corpus(make_header(seed, cfg, lex, cfg.records), records)


def corpus_statistics(records) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-channel mean and std of each continuous stream (64-bit accumulation)."""
    acc = {}
    for rec in records:
        for k in CorpusRecord.STREAMS:
            x = getattr(rec, k).astype(np.float64)
            s = acc.setdefault(k, [0, 0.0, 0.0])
            s[0] += len(x)
            s[1] = s[1] + x.sum(0)
            s[2] = s[2] + (x * x).sum(0)
    out = {}
    for k, (cnt, s1, s2) in acc.items():
        mean = s1 / cnt
        out[k] = (mean, np.sqrt(np.maximum(s2 / cnt - mean * mean, 0.0)))
    return out


# ---------------------------------------------------------------- file format

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_CODES = {np.dtype("float32"): 0, np.dtype("int32"): 1}


def encode_record(rec: CorpusRecord) -> bytes:
    parts = []
    arrays = rec.arrays()
    parts.append(struct.pack("<H", len(arrays)))
    for name, a in arrays.items():
        a = np.asarray(a)
        if a.dtype not in _CODES:
            a = a.astype(np.int32 if name in CorpusRecord.INT_FIELDS else np.float32)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _CODES[a.dtype], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=_DTYPES[_CODES[a.dtype]]).tobytes())
    return b"".join(parts)


def decode_record(payload: bytes) -> CorpusRecord:
    try:
        (count,), off = struct.unpack_from("<H", payload, 0), 2
        arrays = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off:off + ln].decode()
            off += ln
            code, rank = struct.unpack_from("<BB", payload, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}I", payload, off)
            off += 4 * rank
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + size > len(payload):
                raise CorruptRecord(f"array {name!r} runs past the payload")
            arrays[name] = np.frombuffer(payload, dtype=dt, count=size // dt.itemsize,
                                         offset=off).reshape(shape).astype(dt.newbyteorder("="))
            off += size
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CorruptRecord(f"malformed record payload: {e}") from e
    if off != len(payload):
        raise CorruptRecord("trailing bytes in record payload")
    return CorpusRecord.from_arrays(arrays)


class CorpusWriter:
    """Streaming writer; records are appended one at a time."""

    def __init__(self, path, header: dict):
        self.path = Path(path)
        self.header = dict(header)
        self._fh = None

    def __enter__(self):
        try:
            self._fh = open(self.path, "wb")
        except OSError as e:
            raise CorpusIoError(f"cannot write {self.path}: {e}") from e
        hb = json.dumps(self.header, sort_keys=True).encode()
        self._fh.write(MAGIC + struct.pack("<II", VERSION, len(hb)) + hb)
        return self

    def write(self, rec: CorpusRecord) -> None:
        payload = encode_record(rec)
        self._fh.write(struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload)))

    def __exit__(self, *exc):
        self._fh.close()
        return False


def write_corpus(corpus: Corpus, path) -> None:
    with CorpusWriter(path, corpus.header) as w:
        for rec in corpus.records:
            w.write(rec)


def _read_exact(fh, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise CorruptRecord(f"file truncated inside {what}")
    return data


def read_header(fh) -> dict:
    head = fh.read(12)
    if len(head) < 12 or head[:4] != MAGIC:
        raise CorruptRecord("not an AVFC corpus file")
    version, hlen = struct.unpack("<II", head[4:])
    if version != VERSION:
        raise CorruptRecord(f"unsupported corpus version {version}")
    try:
        return json.loads(_read_exact(fh, hlen, "header"))
    except json.JSONDecodeError as e:
        raise CorruptRecord(f"bad header: {e}") from e


def iter_corpus(path) -> Iterator[CorpusRecord]:
    """Yield records one at a time without holding the corpus in memory."""
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CorpusIoError(f"cannot read {path}: {e}") from e
    with fh:
        read_header(fh)
        i = 0
        while True:
            lb = fh.read(4)
            if not lb:
                return
            if len(lb) < 4:
                raise CorruptRecord(f"file truncated before record {i}")
            (ln,) = struct.unpack("<I", lb)
            payload = _read_exact(fh, ln, f"record {i}")
            (crc,) = struct.unpack("<I", _read_exact(fh, 4, f"checksum of record {i}"))
            if zlib.crc32(payload) != crc:
                raise CorruptRecord(f"checksum mismatch in record {i}")
            yield decode_record(payload)
            i += 1


def read_corpus_header(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return read_header(fh)
    except OSError as e:
        raise CorpusIoError(f"cannot read {path}: {e}") from e


def read_corpus(path) -> Corpus:
    header = read_corpus_header(path)
    return Corpus(header, list(iter_corpus(path)))
