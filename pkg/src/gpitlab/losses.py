"""Separation losses: SI-SDR, ASR-encoder (AE) logit MSE, PIT, guided PIT and the joint loss.

Pair losses compare one reference with one estimate.  Each carries a
reduction over speakers: SI-SDR averages (the usual training loss), AE sums
per-speaker MSEs.  Permutations are solved by exhaustive enumeration on
plain float values; gradients never flow through the choice.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .signals import sisdr
from .tensor import Tensor

SISDR_EPS = 1e-8
MAX_SOURCES = 6


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def sisdr_tensor(ref, est: Tensor, eps: float = SISDR_EPS) -> Tensor:
    """Differentiable SI-SDR (dB) of ``est`` against a constant reference."""
    s = _np(ref)
    est = T.as_tensor(est)
    if s.shape != est.shape:
        raise T.ShapeError(f"sisdr: shape mismatch {s.shape} vs {est.shape}")
    s = s - s.mean()
    ss = float(s @ s)
    if ss == 0.0:
        raise ValueError("sisdr: zero reference")
    s_t = Tensor(s)
    e = T.sub(est, T.mean(est))
    proj = T.scale(T.tsum(T.mul(e, s_t)), 1.0 / ss)
    target = T.mul(proj, s_t)
    err = T.sub(e, target)
    ratio = T.div(T.tsum(T.square(target)), T.add(T.tsum(T.square(err)), eps))
    return T.scale(T.log(ratio), 10.0 / math.log(10.0))


class PairLoss(Protocol):
    reduce: str

    def pair(self, ref, est: Tensor) -> Tensor: ...

    def pair_value(self, ref, est) -> float: ...


class SisdrLoss:
    """Negative SI-SDR, averaged over speakers."""

    name = "sisdr"
    reduce = "mean"

    def pair(self, ref, est: Tensor) -> Tensor:
        return T.neg(sisdr_tensor(ref, est))

    def pair_value(self, ref, est) -> float:
        return -sisdr(_np(ref), _np(est), SISDR_EPS)


def ae_distance(v_est: Tensor, v_ref) -> Tensor:
    """Mean squared difference of two (L, N) logit sequences."""
    v_ref = _np(v_ref)
    if v_est.shape != v_ref.shape:
        raise T.ShapeError(f"ae: shape mismatch {v_est.shape} vs {v_ref.shape}")
    return T.mean(T.square(T.sub(v_est, Tensor(v_ref))))


class AELoss:
    """MSE between frozen-recognizer outputs of estimate and reference, summed over speakers."""

    name = "ae"
    reduce = "sum"

    def __init__(self, recognizer, on: str = "logits"):
        if on not in ("logits", "log_probs"):
            raise ValueError(f"ae_on must be 'logits' or 'log_probs', got {on!r}")
        if not getattr(recognizer, "frozen", False):
            raise ValueError("AE loss needs a frozen recognizer")
        self.recognizer = recognizer
        self.on = on

    def embed(self, wave) -> Tensor:
        v = self.recognizer.logits(wave)
        return T.log_softmax(v) if self.on == "log_probs" else v

    def pair(self, ref, est: Tensor) -> Tensor:
        if _np(ref).shape != est.shape:
            raise T.ShapeError(f"ae: length mismatch {_np(ref).shape} vs {est.shape}")
        return ae_distance(self.embed(est), self.embed(Tensor(_np(ref))).data)

    def pair_value(self, ref, est) -> float:
        ref, est = _np(ref), _np(est)
        if ref.shape != est.shape:
            raise T.ShapeError(f"ae: length mismatch {ref.shape} vs {est.shape}")
        d = self.embed(Tensor(est)).data - self.embed(Tensor(ref)).data
        return float(np.mean(d * d))


def _reduce(terms: Sequence[Tensor], how: str) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms)) if how == "mean" else total


def _check_sets(refs, ests) -> None:
    if len(refs) != len(ests):
        raise ValueError(f"{len(refs)} references vs {len(ests)} estimates")
    if len(refs) > MAX_SOURCES:
        raise ValueError(f"permutation solving supports at most {MAX_SOURCES} sources, got {len(refs)}")


def loss_sisdr(refs, ests) -> Tensor:
    """Mean negative SI-SDR over speakers, pairing refs[c] with ests[c]."""
    _check_sets(refs, ests)
    lf = SisdrLoss()
    return _reduce([lf.pair(r, e) for r, e in zip(refs, ests)], "mean")


def loss_ae(refs, ests, recognizer, on: str = "logits") -> Tensor:
    """Sum over speakers of the per-speaker logit MSE, pairing refs[c] with ests[c]."""
    _check_sets(refs, ests)
    lf = AELoss(recognizer, on)
    return _reduce([lf.pair(r, e) for r, e in zip(refs, ests)], "sum")


@dataclass
class PermutationResult:
    perm: tuple[int, ...]  # perm[c] = index of the estimate paired with reference c
    total: float
    pair_losses: np.ndarray  # [c, j] = guide(refs[c], ests[j])
    n_perms: int

    def apply(self, ests):
        return [ests[j] for j in self.perm]


def solve_matrix(pair_losses: np.ndarray) -> PermutationResult:
    m = np.asarray(pair_losses, dtype=np.float64)
    c = m.shape[0]
    if m.shape != (c, c):
        raise ValueError(f"pair-loss matrix must be square, got {m.shape}")
    if c > MAX_SOURCES:
        raise ValueError(f"permutation solving supports at most {MAX_SOURCES} sources, got {c}")
    best, best_perm, count = math.inf, None, 0
    rows = range(c)
    for perm in itertools.permutations(rows):  # lexicographic; strict < keeps the first minimum
        count += 1
        total = 0.0
        for r in rows:
            total += m[r, perm[r]]
        if best_perm is None or total < best:
            best, best_perm = total, perm
    return PermutationResult(best_perm, best, m, count)


def solve_permutation(refs, ests, guide) -> PermutationResult:
    """Exhaustive argmin over all C! pairings of the summed guide loss."""
    _check_sets(refs, ests)
    value = guide.pair_value if hasattr(guide, "pair_value") else guide
    m = np.array([[float(_np(value(r, e))) for e in ests] for r in refs])
    return solve_matrix(m)


def gpit_loss(refs, ests, guide: PairLoss | None = None, applied: PairLoss | None = None,
              recognizer=None) -> Tensor:
    """Solve the permutation with ``guide`` (default SI-SDR), then apply ``applied`` (default AE)."""
    guide = guide or SisdrLoss()
    if applied is None:
        if recognizer is None:
            raise ValueError("gpit_loss: default AE applied loss needs a recognizer")
        applied = AELoss(recognizer)
    res = solve_permutation(refs, ests, guide)
    return _reduce([applied.pair(r, e) for r, e in zip(refs, res.apply(ests))], applied.reduce)


def pit_loss(refs, ests, loss: PairLoss) -> Tensor:
    """Standard PIT: min over pairings of the summed loss, scored on the tape."""
    _check_sets(refs, ests)
    pairs = [[loss.pair(r, e) for e in ests] for r in refs]
    res = solve_matrix(np.array([[p.item() for p in row] for row in pairs]))
    return _reduce([pairs[c][j] for c, j in enumerate(res.perm)], loss.reduce)


@dataclass(frozen=True)
class JointLossConfig:
    alpha: float = 0.0
    guide: str = "sisdr"
    ae_on: str = "logits"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.guide != "sisdr":
            raise ValueError("only the SI-SDR guide is supported")


def joint_loss(refs, ests, cfg: JointLossConfig, recognizer=None) -> Tensor:
    """(1 - alpha) * AE + alpha * SI-SDR, both scored at one SI-SDR-guided permutation."""
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {cfg.alpha}")
    sis = SisdrLoss()
    res = solve_permutation(refs, ests, sis)
    paired = res.apply(ests)
    if cfg.alpha == 1.0:
        return _reduce([sis.pair(r, e) for r, e in zip(refs, paired)], sis.reduce)
    ae = AELoss(recognizer, cfg.ae_on)
    ae_term = _reduce([ae.pair(r, e) for r, e in zip(refs, paired)], ae.reduce)
    if cfg.alpha == 0.0:
        return ae_term
    sis_term = _reduce([sis.pair(r, e) for r, e in zip(refs, paired)], sis.reduce)
    return T.add(T.scale(ae_term, 1.0 - cfg.alpha), T.scale(sis_term, cfg.alpha))
