"""Synthetic speech-like corpus: symbol tones, sparse RIRs, noisy mixtures, SI-SDR.

A "speaker" is a voice with its own symbol bank.  Voices live in one of two
frequency registers (low and high) and are slightly detuned within a
register, so a mixture of one low and one high voice is separable while the
recognizer still has to learn voice-independent symbol identity.
"""

from __future__ import annotations

import string
import wave
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np

ALPHABET = string.ascii_lowercase
SPLITS = {"train": 1, "valid": 2, "test": 3, "clean": 4, "clean-test": 5}

# (register, detune) per speaker id
VOICES: tuple[tuple[int, float], ...] = (
    (0, 1.00),
    (0, 0.97),
    (0, 1.03),
    (1, 1.00),
    (1, 0.97),
    (1, 1.03),
)
REGISTERS = ((300.0, 800.0), (1200.0, 2200.0))


@dataclass(frozen=True)
class SymbolBank:
    freqs: tuple[float, ...]
    d_sym: int = 800
    fs: int = 8000

    def __post_init__(self):
        if len(set(self.freqs)) != len(self.freqs):
            raise ValueError("symbol base frequencies must be pairwise distinct")

    @property
    def k(self) -> int:
        return len(self.freqs)

    @property
    def alphabet(self) -> str:
        return ALPHABET[: self.k]

    @cached_property
    def templates(self) -> np.ndarray:
        n = np.arange(self.d_sym)
        env = 0.5 - 0.5 * np.cos(2.0 * np.pi * (n + 0.5) / self.d_sym)
        f = np.asarray(self.freqs)[:, None]
        return env[None, :] * np.sin(2.0 * np.pi * f * n[None, :] / self.fs)

    def index(self, symbol: str) -> int:
        i = self.alphabet.find(symbol)
        if i < 0 or len(symbol) != 1:
            raise ValueError(f"unknown symbol {symbol!r} for alphabet {self.alphabet!r}")
        return i


@lru_cache(maxsize=None)
def speaker_bank(speaker_id: int, k: int = 8, d_sym: int = 800, fs: int = 8000) -> SymbolBank:
    register, detune = VOICES[speaker_id]
    lo, hi = REGISTERS[register]
    freqs = tuple(float(f) for f in np.linspace(lo, hi, k) * detune)
    return SymbolBank(freqs, d_sym, fs)


def speakers_in_register(register: int) -> list[int]:
    return [i for i, (r, _) in enumerate(VOICES) if r == register]


@dataclass
class Utterance:
    symbols: tuple[str, ...]
    waveform: np.ndarray
    speaker_id: int = 0


def synth_utterance(symbols: Sequence[str], bank: SymbolBank, speaker_id: int = 0) -> Utterance:
    symbols = tuple(symbols)
    if not symbols:
        raise ValueError("utterance needs at least one symbol")
    idx = [bank.index(s) for s in symbols]
    return Utterance(symbols, bank.templates[idx].reshape(-1).copy(), speaker_id)


@dataclass(frozen=True)
class Rir:
    taps: tuple[tuple[int, float], ...] = ((0, 1.0),)

    def apply(self, signal: np.ndarray) -> np.ndarray:
        """Causal sparse convolution truncated to the input length."""
        out = np.zeros_like(signal)
        n = len(signal)
        for delay, gain in self.taps:
            if delay < n:
                out[delay:] += gain * signal[: n - delay]
        return out


def sample_rir(
    rng: np.random.Generator,
    reflections: int = 3,
    delay_ms: tuple[float, float] = (5.0, 30.0),
    gain_range: tuple[float, float] = (0.1, 0.5),
    fs: int = 8000,
) -> Rir:
    if reflections < 0:
        raise ValueError("reflections must be >= 0")
    lo = max(1, int(round(delay_ms[0] * fs / 1000)))
    hi = int(round(delay_ms[1] * fs / 1000))
    if hi - lo + 1 < reflections:
        raise ValueError("delay range too narrow for the requested reflections")
    delays = np.sort(rng.choice(np.arange(lo, hi + 1), size=reflections, replace=False))
    gains = rng.uniform(gain_range[0], gain_range[1], size=reflections)
    return Rir(((0, 1.0),) + tuple((int(d), float(g)) for d, g in zip(delays, gains)))


@dataclass
class MixtureExample:
    x: np.ndarray
    refs: np.ndarray  # (C, L) gain-scaled anechoic sources
    rirs: list[Rir]
    noise: np.ndarray
    gains: np.ndarray
    mixing_snr: float
    noise_snr: float
    seed: tuple[int, ...] = ()
    transcripts: list[tuple[str, ...]] = field(default_factory=list)
    speakers: list[int] = field(default_factory=list)
    onsets: list[int] = field(default_factory=list)
    fs: int = 8000

    @property
    def n_src(self) -> int:
        return self.refs.shape[0]

    def __len__(self) -> int:
        return len(self.x)

    def reconstruction_error(self) -> float:
        recon = sum(h.apply(s) for h, s in zip(self.rirs, self.refs)) + self.noise
        return float(np.max(np.abs(recon - self.x)))


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def mix(
    utterances: Sequence[Utterance],
    rirs: Sequence[Rir],
    mixing_snr: float | Sequence[float],
    noise_snr: float,
    rng: np.random.Generator,
    fs: int = 8000,
    max_onset: int | None = None,
) -> MixtureExample:
    n_src = len(utterances)
    if n_src < 2 or len(rirs) != n_src:
        raise ValueError("mix needs >= 2 utterances and one RIR per utterance")
    snrs = np.broadcast_to(np.asarray(mixing_snr, dtype=float), (n_src - 1,))
    length = max(len(u.waveform) for u in utterances)
    cap = length if max_onset is None else max(0, max_onset)
    onsets = [int(rng.integers(0, min(length - len(u.waveform), cap) + 1)) for u in utterances]
    dry = np.zeros((n_src, length))
    for c, (u, o) in enumerate(zip(utterances, onsets)):
        dry[c, o : o + len(u.waveform)] = u.waveform
    pw = np.array([power(d) for d in dry])
    if np.any(pw <= 0):
        raise ValueError("zero-power source in mixture")
    gains = np.ones(n_src)
    gains[1:] = np.sqrt(pw[0] / pw[1:] * 10.0 ** (-snrs / 10.0))
    refs = gains[:, None] * dry
    loudest = max(power(r) for r in refs)
    raw = rng.standard_normal(length)
    noise = raw * np.sqrt(loudest * 10.0 ** (-noise_snr / 10.0) / power(raw))
    x = sum(h.apply(s) for h, s in zip(rirs, refs)) + noise
    return MixtureExample(
        x=x,
        refs=refs,
        rirs=list(rirs),
        noise=noise,
        gains=gains,
        mixing_snr=float(snrs[0]),
        noise_snr=float(noise_snr),
        transcripts=[u.symbols for u in utterances],
        speakers=[u.speaker_id for u in utterances],
        onsets=onsets,
        fs=fs,
    )


def sisdr(reference: np.ndarray, estimate: np.ndarray, eps: float = 1e-8) -> float:
    """Scale-invariant SDR in dB."""
    reference = np.asarray(reference, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if reference.shape != estimate.shape:
        raise ValueError(f"sisdr: shape mismatch {reference.shape} vs {estimate.shape}")
    s = reference - reference.mean()
    ss = float(s @ s)
    if ss == 0.0:
        raise ValueError("sisdr: zero reference")
    e_hat = estimate - estimate.mean()
    target = (float(e_hat @ s) / ss) * s
    err = e_hat - target
    return float(10.0 * np.log10(float(target @ target) / (float(err @ err) + eps)))


def truncate(example: MixtureExample, tsl_seconds: float) -> MixtureExample:
    if tsl_seconds <= 0:
        raise ValueError("tsl_seconds must be positive")
    n = min(len(example), int(round(tsl_seconds * example.fs)))
    if n == len(example):
        return example
    return replace(example, x=example.x[:n].copy(), refs=example.refs[:, :n].copy(), noise=example.noise[:n].copy())


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a split; items are regenerated on demand, never stored."""

    split: str = "train"
    n_items: int = 512
    n_src: int = 2
    min_symbols: int = 3
    max_symbols: int = 10
    mixing_snr: tuple[float, float] = (0.0, 5.0)
    noise_snr: tuple[float, float] = (-6.0, 3.0)
    tsl: float | None = None
    seed: int = 0
    k: int = 8
    d_sym: int = 800
    fs: int = 8000
    reflections: int = 3

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def dynamic(self) -> bool:
        return self.split in ("train", "clean")

    def rng(self, index: int, epoch: int = 0) -> np.random.Generator:
        e = epoch if self.dynamic else 0
        return np.random.default_rng(np.random.SeedSequence([self.seed, SPLITS[self.split], index, e]))

    def _symbols(self, rng: np.random.Generator) -> tuple[str, ...]:
        n = int(rng.integers(self.min_symbols, self.max_symbols + 1))
        return tuple(ALPHABET[i] for i in rng.integers(0, self.k, size=n))

    def utterance(self, index: int, epoch: int = 0, n_symbols: int | None = None) -> Utterance:
        """Single clean utterance from a random voice."""
        rng = self.rng(index, epoch)
        spk = int(rng.integers(0, len(VOICES)))
        if n_symbols is None:
            syms = self._symbols(rng)
        else:
            syms = tuple(ALPHABET[i] for i in rng.integers(0, self.k, size=n_symbols))
        return synth_utterance(syms, speaker_bank(spk, self.k, self.d_sym, self.fs), spk)

    def item(self, index: int, epoch: int = 0) -> MixtureExample:
        rng = self.rng(index, epoch)
        registers = rng.permutation([c % len(REGISTERS) for c in range(self.n_src)])
        speakers = []
        for r in registers:
            pool = [s for s in speakers_in_register(int(r)) if s not in speakers]
            speakers.append(int(rng.choice(pool)))
        utts = [
            synth_utterance(self._symbols(rng), speaker_bank(s, self.k, self.d_sym, self.fs), s) for s in speakers
        ]
        rirs = [sample_rir(rng, self.reflections, fs=self.fs) for _ in speakers]
        msnr = rng.uniform(*self.mixing_snr, size=self.n_src - 1)
        nsnr = float(rng.uniform(*self.noise_snr))
        # under a TSL limit every speaker must start early enough to keep a full symbol in the window
        cap = int(round(self.tsl * self.fs)) - self.d_sym if self.tsl else None
        ex = mix(utts, rirs, msnr, nsnr, rng, fs=self.fs, max_onset=cap)
        ex.seed = (self.seed, SPLITS[self.split], index, epoch if self.dynamic else 0)
        if self.tsl:
            ex = truncate(ex, self.tsl)
        return ex

    def items(self, epoch: int = 0):
        for i in range(self.n_items):
            yield self.item(i, epoch)


def write_wav(path, signal: np.ndarray, fs: int = 8000) -> None:
    """PCM16 mono export for listening; samples are clipped to [-1, 1]."""
    pcm = np.round(np.clip(signal, -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(fs)
        fh.writeframes(pcm.tobytes())
