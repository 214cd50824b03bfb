"""Word error rates for single- and multi-speaker transcripts.

Every symbol token counts as one word.  Multi-speaker variants enumerate
permutations / assignments exhaustively; at two to six channels that is
exact and cheap.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

MAX_CHANNELS = 6
MAX_UTTERANCES = 8


class EditCounts(NamedTuple):
    errors: int
    sub: int
    ins: int
    dels: int


def word_edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> EditCounts:
    """Unit-cost Levenshtein distance with a breakdown into S, I, D."""
    ref, hyp = list(ref), list(hyp)
    # each cell: (cost, S, I, D); ties prefer substitution, then deletion, then insertion
    prev = [(j, 0, j, 0) for j in range(len(hyp) + 1)]
    for i in range(1, len(ref) + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, len(hyp) + 1):
            d = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                best = d
            else:
                best = (d[0] + 1, d[1] + 1, d[2], d[3])
            up = prev[j]
            if up[0] + 1 < best[0]:
                best = (up[0] + 1, up[1], up[2], up[3] + 1)
            left = cur[j - 1]
            if left[0] + 1 < best[0]:
                best = (left[0] + 1, left[1], left[2] + 1, left[3])
            cur.append(best)
        prev = cur
    return EditCounts(*prev[-1])


def wer(ref: Sequence[str], hyp: Sequence[str]) -> float:
    if len(ref) == 0:
        raise ValueError("wer: empty reference")
    return word_edit_distance(ref, hyp).errors / len(ref)


def corpus_wer(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> float:
    """Total errors over total reference words."""
    words = sum(len(r) for r in refs)
    if words == 0:
        raise ValueError("corpus_wer: empty references")
    return sum(word_edit_distance(r, h).errors for r, h in zip(refs, hyps)) / words


@dataclass
class CpResult:
    errors: int
    words: int
    perm: tuple[int, ...]  # perm[c] = hypothesis channel scored against reference c

    @property
    def wer(self) -> float:
        return self.errors / self.words


def cp_wer_detail(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> CpResult:
    if len(refs) != len(hyps):
        raise ValueError(f"cp_wer: {len(refs)} references vs {len(hyps)} channels")
    if len(refs) > MAX_CHANNELS:
        raise ValueError(f"cp_wer: at most {MAX_CHANNELS} channels supported")
    words = sum(len(r) for r in refs)
    if words == 0:
        raise ValueError("cp_wer: all references are empty")
    cost = [[word_edit_distance(r, h).errors for h in hyps] for r in refs]
    best = None
    for perm in itertools.permutations(range(len(hyps))):
        e = sum(cost[c][perm[c]] for c in range(len(refs)))
        if best is None or e < best[0]:
            best = (e, perm)
    return CpResult(best[0], words, best[1])


def cp_wer(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> float:
    return cp_wer_detail(refs, hyps).wer


class RefUtterance(NamedTuple):
    speaker: int
    onset: int
    tokens: tuple[str, ...]


@dataclass
class OrcResult:
    errors: int
    words: int
    assignment: tuple[int, ...]  # channel of each reference utterance

    @property
    def wer(self) -> float:
        return self.errors / self.words


def orc_wer_detail(ref_utterances: Sequence, hyps: Sequence[Sequence[str]]) -> OrcResult:
    utts = [RefUtterance(int(s), int(o), tuple(t)) for s, o, t in ref_utterances]
    if not utts:
        raise ValueError("orc_wer: empty reference set")
    if len(hyps) > MAX_CHANNELS or len(utts) > MAX_UTTERANCES:
        raise ValueError("orc_wer: too many channels or utterances for exhaustive search")
    words = sum(len(u.tokens) for u in utts)
    if words == 0:
        raise ValueError("orc_wer: all references are empty")
    order = sorted(range(len(utts)), key=lambda i: (utts[i].onset, i))
    cache: dict[tuple, int] = {}
    best = None
    for assign in itertools.product(range(len(hyps)), repeat=len(utts)):
        e = 0
        for ch, hyp in enumerate(hyps):
            members = tuple(i for i in order if assign[i] == ch)
            key = (ch, members)
            if key not in cache:
                ref = [tok for i in members for tok in utts[i].tokens]
                cache[key] = word_edit_distance(ref, hyp).errors
            e += cache[key]
        if best is None or e < best[0]:
            best = (e, assign)
    return OrcResult(best[0], words, best[1])


def orc_wer(ref_utterances: Sequence, hyps: Sequence[Sequence[str]]) -> float:
    return orc_wer_detail(ref_utterances, hyps).wer


@dataclass
class EvalReport:
    """Corpus-level multi-speaker scores, accumulated item by item."""

    cp_errors: int = 0
    orc_errors: int = 0
    words: int = 0
    sisdr_sum: float = 0.0
    sisdr_mix_sum: float = 0.0
    items: list[dict] = field(default_factory=list)

    def add(self, cp: CpResult, orc: OrcResult, sisdr: float | None = None, sisdr_mix: float | None = None) -> None:
        self.cp_errors += cp.errors
        self.orc_errors += orc.errors
        self.words += cp.words
        if sisdr is not None:
            self.sisdr_sum += sisdr
        if sisdr_mix is not None:
            self.sisdr_mix_sum += sisdr_mix
        self.items.append({"cp_wer": cp.wer, "orc_wer": orc.wer, "perm": cp.perm, "assignment": orc.assignment,
                           "sisdr": sisdr})

    @property
    def n(self) -> int:
        return len(self.items)

    @property
    def cp_wer(self) -> float:
        return self.cp_errors / self.words

    @property
    def orc_wer(self) -> float:
        return self.orc_errors / self.words

    @property
    def mean_item_cp_wer(self) -> float:
        return sum(i["cp_wer"] for i in self.items) / self.n

    @property
    def sisdr(self) -> float:
        return self.sisdr_sum / self.n

    @property
    def sisdr_improvement(self) -> float:
        return (self.sisdr_sum - self.sisdr_mix_sum) / self.n
