"""Toy CTC recognizer: waveform -> (L, N) logit sequence, CTC loss, greedy decoding.

The frontend is a strided conv1d filterbank whose filters come in pairs; the
squared pair outputs are summed to a phase-free band energy, log-compressed,
then passed through two tanh dense layers and a linear projection to N = K+1
logits per frame (blank is class 0).  Inputs are normalised to unit RMS.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import AdamState, adam_step, zero_grads
from .signals import ALPHABET, DatasetSpec, sample_rir
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

BLANK = 0
NEG = -1e30


@dataclass(frozen=True)
class RecognizerConfig:
    k: int = 8
    window: int = 256
    hop: int = 128
    bands: int = 32
    hidden: int = 64
    seed: int = 1001
    fs: int = 8000
    steps: int = 1200
    batch: int = 16
    lr: float = 3e-3
    reverb_prob: float = 0.5  # share of training utterances passed through a random RIR

    @property
    def n_out(self) -> int:
        return self.k + 1


@dataclass
class LogitSequence:
    values: np.ndarray  # (L, N)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def n_frames(length: int, window: int = 256, hop: int = 128) -> int:
    return (length - window) // hop + 1


def _init_params(cfg: RecognizerConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    n = np.arange(cfg.window)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * (n + 0.5) / cfg.window)
    centres = np.geomspace(150.0, 3600.0, cfg.bands) * rng.uniform(0.97, 1.03, cfg.bands)
    ph = 2 * np.pi * centres[:, None] * n[None, :] / cfg.fs
    pairs = np.stack([hann * np.cos(ph), hann * np.sin(ph)], axis=1)  # (bands, 2, W)
    front = pairs.reshape(2 * cfg.bands, 1, cfg.window) / math.sqrt(cfg.window)
    front = front + rng.normal(0, 0.01 / math.sqrt(cfg.window), front.shape)

    def dense(fan_in, fan_out):
        lim = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-lim, lim, (fan_in, fan_out)), np.zeros(fan_out)

    p = {"front.w": front}
    p["l1.w"], p["l1.b"] = dense(cfg.bands, cfg.hidden)
    p["l2.w"], p["l2.b"] = dense(cfg.hidden, cfg.hidden)
    p["out.w"], p["out.b"] = dense(cfg.hidden, cfg.n_out)
    return p


class Recognizer:
    """Frame-level CTC acoustic model. Frozen recognizers never receive gradients."""

    def __init__(self, cfg: RecognizerConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        raw = params if params is not None else _init_params(cfg)
        self.params = {name: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for name, v in raw.items()}
        self.frozen = False

    def freeze(self) -> "Recognizer":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def logits(self, wave) -> Tensor:
        """(T,) -> (L, N) or (B, T) -> (B, L, N), on the active tape."""
        cfg = self.cfg
        x = T.as_tensor(wave)
        single = x.ndim == 1
        if single:
            x = T.reshape(x, (1, x.shape[0]))
        bsz, length = x.shape
        if length < cfg.window:
            raise ValueError(f"encode: input length {length} shorter than window {cfg.window}")
        ms = T.mean(T.square(x), axis=1)
        inv = T.power(T.add(ms, 1e-8), -0.5)
        x = T.mul(x, T.broadcast_to(T.reshape(inv, (bsz, 1)), (bsz, length)))
        p = self.params
        y = T.conv1d(T.reshape(x, (bsz, 1, length)), p["front.w"], stride=cfg.hop)  # (B, 2M, L)
        n_fr = y.shape[2]
        y = T.square(y)
        y = T.tsum(T.reshape(y, (bsz, cfg.bands, 2, n_fr)), axis=2)
        feats = T.log(T.add(T.transpose(y, (0, 2, 1)), 1e-3))  # (B, L, M)
        h = T.tanh(T.bias_add(T.matmul(feats, p["l1.w"]), p["l1.b"]))
        h = T.tanh(T.bias_add(T.matmul(h, p["l2.w"]), p["l2.b"]))
        out = T.bias_add(T.matmul(h, p["out.w"]), p["out.b"])
        return T.reshape(out, out.shape[1:]) if single else out

    def encode(self, wave) -> LogitSequence:
        data = wave.data if isinstance(wave, Tensor) else np.asarray(wave, dtype=np.float64)
        return LogitSequence(self.logits(Tensor(data)).data)

    def transcribe(self, wave) -> tuple[str, ...]:
        return greedy_decode(self.encode(wave))

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"kind": "recognizer", "config": asdict(self.cfg), "K": self.cfg.k, "N": self.cfg.n_out,
                "W": self.cfg.window, "hop": self.cfg.hop, "seed": self.cfg.seed}
        if extra:
            meta.update(extra)
        save_checkpoint(path, self.state(), meta)

    @classmethod
    def load(cls, path) -> "Recognizer":
        params, meta = load_checkpoint(path)
        if not meta or meta.get("kind") != "recognizer":
            raise ValueError(f"{path} is not a recognizer checkpoint")
        return cls(RecognizerConfig(**meta["config"]), params)


# --------------------------------------------------------------------- CTC


def _label_ids(target: Sequence[str]) -> list[int]:
    return [ALPHABET.index(s) + 1 for s in target]


def _check_feasible(labels: list[int], n_frames_: int) -> None:
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    if len(labels) + repeats > n_frames_:
        raise ValueError(f"ctc: target of length {len(labels)} (+{repeats} repeats) infeasible in {n_frames_} frames")


def _neg_const(shape) -> Tensor:
    return Tensor(np.full(shape, NEG))


def _shift(prev: Tensor, k: int) -> Tensor:
    bsz, s = prev.shape
    if s <= k:
        return _neg_const((bsz, s))
    return T.concat([_neg_const((bsz, k)), prev[:, : s - k]], axis=1)


def ctc_nll(logits: Tensor, targets: Sequence[Sequence[str]]) -> Tensor:
    """Per-item CTC negative log-likelihood, shape (B,), for logits (B, L, N)."""
    bsz, n_fr, _ = logits.shape
    if len(targets) != bsz:
        raise ValueError("ctc: one target per batch item required")
    labels = [_label_ids(t) for t in targets]
    for lab in labels:
        _check_feasible(lab, n_fr)
    s_len = [2 * len(lab) + 1 for lab in labels]
    s_max = max(s_len)
    ext = np.full((bsz, s_max), BLANK, dtype=np.intp)
    for b, lab in enumerate(labels):
        ext[b, 1 : 2 * len(lab) : 2] = lab
    skip = np.full((bsz, s_max), NEG)
    skip[:, 2:] = np.where((ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2]), 0.0, NEG)
    init = np.full((bsz, s_max), NEG)
    init[:, : min(2, s_max)] = 0.0

    logp = T.log_softmax(logits)
    emis = T.take(logp, np.broadcast_to(ext[:, None, :], (bsz, n_fr, s_max)))  # (B, L, S)
    emis = T.transpose(emis, (1, 0, 2))  # (L, B, S)
    alpha = T.add(emis[0], Tensor(init))
    skip_t = Tensor(skip)
    for t in range(1, n_fr):
        stay_or_step = T.logaddexp(alpha, _shift(alpha, 1))
        jump = T.add(_shift(alpha, 2), skip_t)
        alpha = T.add(T.logaddexp(stay_or_step, jump), emis[t])

    last = np.array([[n - 1, max(n - 2, 0)] for n in s_len], dtype=np.intp)
    last_mask = np.array([[0.0, NEG if n == 1 else 0.0] for n in s_len])
    ends = T.add(T.take(alpha, last), Tensor(last_mask))
    return T.neg(T.logsumexp(ends))


def ctc_loss(logits, target: Sequence[str]) -> Tensor:
    """CTC negative log-likelihood of one transcript under (L, N) logits."""
    if isinstance(logits, LogitSequence):
        logits = Tensor(logits.values)
    x = T.reshape(logits, (1,) + logits.shape)
    return T.reshape(ctc_nll(x, [tuple(target)]), ())


def greedy_decode(logits) -> tuple[str, ...]:
    values = logits.values if isinstance(logits, LogitSequence) else np.asarray(getattr(logits, "data", logits))
    best = np.argmax(values, axis=-1)  # first maximum wins ties
    out = []
    prev = -1
    for c in best:
        if c != prev and c != BLANK:
            out.append(ALPHABET[c - 1])
        prev = c
    return tuple(out)


# ---------------------------------------------------------------- training


def _batch(spec: DatasetSpec, step: int, batch: int, rng: np.random.Generator, reverb_prob: float = 0.0):
    n_sym = int(rng.integers(spec.min_symbols, spec.max_symbols + 1))
    utts = [spec.utterance(step * batch + j, 0, n_symbols=n_sym) for j in range(batch)]
    waves = []
    for u in utts:
        w = u.waveform
        if rng.random() < reverb_prob:
            w = sample_rir(rng, spec.reflections, fs=spec.fs).apply(w)
        waves.append(w)
    return np.stack(waves), [u.symbols for u in utts]


def train_recognizer(spec: DatasetSpec, cfg: RecognizerConfig, eval_spec: DatasetSpec | None = None) -> tuple[Recognizer, float]:
    """Adam-train a recognizer on single-voice noise-free utterances; returns it frozen with its held-out WER."""
    from .metrics import corpus_wer

    model = Recognizer(cfg)
    params = model.param_list()
    opt = AdamState.for_params(params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 7])
    for step in range(cfg.steps):
        waves, targets = _batch(spec, step, cfg.batch, rng, cfg.reverb_prob)
        with Tape() as tape:
            loss = T.mean(ctc_nll(model.logits(waves), targets))
        if not np.isfinite(loss.item()):
            raise RuntimeError(f"recognizer training diverged at step {step} (seed={cfg.seed}, config={asdict(cfg)})")
        zero_grads(params)
        T.backward(tape, loss)
        adam_step(params, [p.grad for p in params], opt)
        if step % 200 == 0:
            log.info("recognizer seed=%d step=%d ctc=%.4f", cfg.seed, step, loss.item())
    model.freeze()
    eval_spec = eval_spec or DatasetSpec(split="clean-test", n_items=100, seed=spec.seed, k=spec.k,
                                         d_sym=spec.d_sym, fs=spec.fs,
                                         min_symbols=spec.min_symbols, max_symbols=spec.max_symbols)
    utts = [eval_spec.utterance(i) for i in range(eval_spec.n_items)]
    clean_wer = corpus_wer([u.symbols for u in utts], [model.transcribe(u.waveform) for u in utts])
    log.info("recognizer seed=%d clean WER=%.4f", cfg.seed, clean_wer)
    return model, clean_wer
