import itertools
import math

import numpy as np
import pytest

from oracles import brute_force_ctc, ctc_feasible

from gpitlab import tensor as T
from gpitlab.recognizer import (
    BLANK,
    LogitSequence,
    Recognizer,
    RecognizerConfig,
    ctc_loss,
    greedy_decode,
    n_frames,
    train_recognizer,
)
from gpitlab.signals import ALPHABET, DatasetSpec, speaker_bank, synth_utterance
from gpitlab.tensor import Tape, Tensor, grad_check


def test_ctc_uniform_two_frames():
    loss = ctc_loss(Tensor(np.zeros((2, 2))), ("a",))
    assert loss.item() == pytest.approx(-math.log(0.75), abs=1e-12)
    assert loss.item() == pytest.approx(0.28768, abs=1e-5)


def test_ctc_matches_enumeration():
    rng = np.random.default_rng(0)
    checked = 0
    for n_cls in (2, 3, 4):
        letters = ALPHABET[: n_cls - 1]
        for n_fr in range(1, 7):
            for tlen in range(0, 4):
                for target in itertools.product(letters, repeat=tlen):
                    if not ctc_feasible(target, n_fr):
                        continue
                    logits = rng.normal(scale=2.0, size=(n_fr, n_cls))
                    got = ctc_loss(LogitSequence(logits), target).item()
                    assert got == pytest.approx(brute_force_ctc(logits, target), abs=1e-9)
                    assert got >= 0
                    checked += 1
    assert checked == 234


def test_ctc_empty_target_is_all_blank():
    logits = np.random.default_rng(1).normal(size=(5, 4))
    logp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    assert ctc_loss(Tensor(logits), ()).item() == pytest.approx(-logp[:, BLANK].sum(), abs=1e-12)


def test_ctc_infeasible_raises():
    with pytest.raises(ValueError):
        ctc_loss(Tensor(np.zeros((2, 3))), ("a", "a"))
    with pytest.raises(ValueError):
        ctc_loss(Tensor(np.zeros((2, 4))), ("a", "b", "c"))


def test_ctc_grad_check():
    rng = np.random.default_rng(2)
    for target in [("a",), ("a", "b"), ("b", "b"), ("c", "a", "c")]:
        x = rng.normal(size=(6, 4))
        assert grad_check(lambda v: ctc_loss(v, target), x, 1e-6) <= 1e-5


def _onehot(seq, n=4):
    out = np.zeros((len(seq), n))
    out[np.arange(len(seq)), seq] = 1.0
    return out


def test_greedy_decode_examples():
    a, b = 1, 2
    assert greedy_decode(_onehot([a, a, BLANK, b, b])) == ("a", "b")
    assert greedy_decode(_onehot([BLANK] * 4)) == ()
    assert greedy_decode(_onehot([a, BLANK, a])) == ("a", "a")
    # exact ties go to the lowest index (blank)
    assert greedy_decode(np.zeros((3, 4))) == ()


def test_frame_formula():
    rec = Recognizer(RecognizerConfig())
    assert n_frames(8000) == 61
    assert rec.encode(np.random.default_rng(0).normal(size=8000)).shape == (61, 9)
    assert rec.encode(np.ones(256)).shape == (1, 9)
    with pytest.raises(ValueError):
        rec.encode(np.ones(255))


def test_batched_logits_match_single():
    rec = Recognizer(RecognizerConfig(seed=3))
    waves = np.random.default_rng(4).normal(size=(3, 1000))
    batch = rec.logits(Tensor(waves)).data
    for b in range(3):
        np.testing.assert_allclose(batch[b], rec.logits(Tensor(waves[b])).data, atol=1e-12)


def test_frozen_recognizer_gets_no_gradient():
    rec = Recognizer(RecognizerConfig()).freeze()
    x = Tensor(np.random.default_rng(5).normal(size=600), requires_grad=True)
    with Tape() as tape:
        loss = T.mean(T.square(rec.logits(x)))
    T.backward(tape, loss)
    assert all(p.grad is None for p in rec.param_list())
    assert x.grad is not None and np.all(np.isfinite(x.grad))


def test_checkpoint_metadata(tmp_path):
    rec = Recognizer(RecognizerConfig(seed=9, hidden=32))
    rec.save(tmp_path / "r.ckpt")
    back = Recognizer.load(tmp_path / "r.ckpt")
    assert back.cfg == rec.cfg
    for k, v in rec.state().items():
        assert back.state()[k].tobytes() == v.tobytes()
    from gpitlab.checkpoint import load_checkpoint

    meta = load_checkpoint(tmp_path / "r.ckpt")[1]
    assert (meta["K"], meta["N"], meta["W"], meta["hop"], meta["seed"]) == (8, 9, 256, 128, 9)


def test_short_training_is_deterministic():
    spec = DatasetSpec(split="clean", seed=0)
    cfg = RecognizerConfig(steps=5, batch=4)
    small_eval = DatasetSpec(split="clean-test", n_items=5)
    a, wer_a = train_recognizer(spec, cfg, small_eval)
    b, wer_b = train_recognizer(spec, cfg, small_eval)
    assert wer_a == wer_b
    assert all(a.state()[k].tobytes() == b.state()[k].tobytes() for k in a.state())
    assert a.frozen


def test_untrained_recognizer_is_near_chance():
    rec = Recognizer(RecognizerConfig(seed=11))
    utts = [DatasetSpec(split="clean-test").utterance(i) for i in range(10)]
    from gpitlab.metrics import corpus_wer

    assert corpus_wer([u.symbols for u in utts], [rec.transcribe(u.waveform) for u in utts]) > 0.7


def test_encode_is_deterministic():
    rec = Recognizer(RecognizerConfig())
    wave = synth_utterance("abc", speaker_bank(2)).waveform
    assert rec.encode(wave).values.tobytes() == rec.encode(wave).values.tobytes()
