"""End-to-end acceptance checks; each prints a single PASS/FAIL line.

The experiment block trains two recognizers, pretrains and fine-tunes five
separator seeds, and runs both sweeps, so it takes about half an hour.
"""

import hashlib
import itertools
import math
import statistics
import time

import numpy as np
import pytest
from oracles import brute_force_ctc, cp_wer as oracle_cp, ctc_feasible, orc_wer as oracle_orc
from test_tensor import OP_CASES

from gpitlab import experiments as ex
from gpitlab.config import ExperimentConfig
from gpitlab.losses import AELoss, JointLossConfig, SisdrLoss, gpit_loss, joint_loss, pit_loss
from gpitlab.metrics import cp_wer, orc_wer
from gpitlab.recognizer import LogitSequence, Recognizer, RecognizerConfig, ctc_loss
from gpitlab.signals import ALPHABET, DatasetSpec, Rir, mix, power, speaker_bank, synth_utterance
from gpitlab.tensor import Tensor, grad_check

# Pretraining is shortened from the default 40 epochs so the whole block fits in ~30 min.
ACCEPT = """
seeds = 1, 2, 3, 4, 5
pretrain_epochs = 12
ates = 30
"""
TSL_ATES = 6
ALPHA_SEEDS = (1, 2, 3)


def report(capsys, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, detail


def _digest(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ------------------------------------------------------------ unit-scale


def test_every_op_kind_grad_checks(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for kind, (shape, f) in OP_CASES.items():
        rng = np.random.default_rng(sum(map(ord, kind)))
        for _ in range(10):
            worst = max(worst, grad_check(f, rng.normal(size=shape), 1e-6))
    secs = time.perf_counter() - t0
    report(capsys, "grad-check every op kind", worst <= 1e-5 and secs < 60,
           f"{len(OP_CASES)} kinds x 10, worst rel err {worst:.2e}, {secs:.1f} s")


def test_ctc_matches_exhaustive_enumeration(capsys):
    rng = np.random.default_rng(11)
    worst, n = 0.0, 0
    for n_cls in (2, 3, 4):
        for n_fr in range(1, 7):
            for tlen in range(4):
                for target in itertools.product(ALPHABET[: n_cls - 1], repeat=tlen):
                    if ctc_feasible(target, n_fr):
                        logits = rng.normal(scale=2.0, size=(n_fr, n_cls))
                        got = ctc_loss(LogitSequence(logits), target).item()
                        worst = max(worst, abs(got - brute_force_ctc(logits, target)))
                        n += 1
    uniform = ctc_loss(Tensor(np.zeros((2, 2))), ("a",)).item()
    worst = max(worst, abs(uniform + math.log(0.75)))
    report(capsys, "CTC vs enumeration", worst <= 1e-9, f"{n} instances + uniform case, worst abs err {worst:.1e}")


def test_wer_matches_brute_force(capsys):
    rng = np.random.default_rng(5)
    toks = list("abc")
    mismatches, orc_over_cp = 0, 0
    for _ in range(300):
        c, u = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        utts = [(int(rng.integers(c)), int(rng.integers(10)), tuple(rng.choice(toks, size=int(rng.integers(1, 4)))))
                for _ in range(u)]
        hyps = [tuple(rng.choice(toks, size=int(rng.integers(0, 5)))) for _ in range(c)]
        order = sorted(range(u), key=lambda k: (utts[k][1], k))
        refs = [tuple(t for k in order if utts[k][0] == s for t in utts[k][2]) for s in range(c)]
        mismatches += orc_wer(utts, hyps) != oracle_orc(utts, hyps)
        if all(refs):
            mismatches += cp_wer(refs, hyps) != oracle_cp(refs, hyps)
    for _ in range(1000):
        c = int(rng.integers(1, 4))
        utts = [(s, int(rng.integers(100)), tuple(rng.choice(toks, size=int(rng.integers(1, 4)))))
                for s in range(c) for _ in range(int(rng.integers(1, 3)))]
        hyps = [tuple(rng.choice(toks, size=int(rng.integers(0, 6)))) for _ in range(c)]
        order = sorted(range(len(utts)), key=lambda k: (utts[k][1], k))
        refs = [tuple(t for k in order if utts[k][0] == s for t in utts[k][2]) for s in range(c)]
        orc_over_cp += orc_wer(utts, hyps) > cp_wer(refs, hyps)
    worked = (cp_wer([["a"], ["b"]], [["a", "b"], []]), orc_wer([(0, 0, ("a",)), (1, 5, ("b",))], [("a", "b"), ()]))
    ok = mismatches == 0 and orc_over_cp == 0 and worked == (1.0, 0.0)
    report(capsys, "CP/ORC-WER vs brute force", ok,
           f"{mismatches} mismatches, {orc_over_cp}/1000 ORC>CP, worked example CP={worked[0]} ORC={worked[1]}")


def test_gpit_reduces_to_pit(capsys):
    rec = Recognizer(RecognizerConfig(seed=77, hidden=16, bands=8)).freeze()
    bad = 0
    for seed in range(100):
        rng = np.random.default_rng(300 + seed)
        c = 2 + seed % 2
        refs = list(rng.normal(size=(c, 640)))
        ests = [Tensor(e) for e in rng.uniform(size=(c, c)) @ np.array(refs) + 0.5 * rng.normal(size=(c, 640))]
        g = SisdrLoss() if seed % 4 else AELoss(rec)
        bad += gpit_loss(refs, ests, g, g).item() != pit_loss(refs, ests, g).item()
        if seed < 10:
            bad += joint_loss(refs, ests, JointLossConfig(alpha=1.0), rec).item() != pit_loss(refs, ests, SisdrLoss()).item()
            bad += joint_loss(refs, ests, JointLossConfig(alpha=0.0), rec).item() != \
                gpit_loss(refs, ests, SisdrLoss(), AELoss(rec)).item()
    report(capsys, "gpit(g,g) == pit(g) and joint endpoints", bad == 0, f"{bad} inexact of 120 comparisons")


def test_mixing_identities(capsys):
    worst = max(DatasetSpec(split=split, seed=seed).item(i, 0).reconstruction_error()
                for split in ("train", "test") for seed in range(5) for i in range(20))
    utts = [synth_utterance("abcde", speaker_bank(0), 0), synth_utterance("cab", speaker_bank(3), 1)]
    m = mix(utts, [Rir(), Rir()], 3.0, -6.0, np.random.default_rng(2))
    ratio = 10 * np.log10(power(m.refs[0]) / power(m.refs[1]))
    noise = power(m.noise) / max(power(r) for r in m.refs)
    ok = worst <= 1e-12 and abs(ratio - 3.0) <= 1e-9 and abs(noise - 3.981071705534973) <= 1e-9
    report(capsys, "reconstruction and SNR ratios", ok,
           f"max recon err {worst:.1e}, speaker ratio {ratio:.12f} dB, noise power {noise:.12f}")


# ------------------------------------------------------------ experiments


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    cfg = ExperimentConfig.from_text(ACCEPT).replace(out_dir=str(tmp_path_factory.mktemp("accept")))
    t0 = time.perf_counter()
    ex.cmd_train_recognizers(cfg)
    for seed in cfg.seeds:
        ex.cmd_pretrain(cfg, seed)
        for arm in ("sisdr", "ae"):
            ex.cmd_finetune(cfg.replace(arm=arm), seed)
    tables = {w: ex.cmd_evaluate(cfg, w) for w in ("A", "B")}
    return cfg, tables, time.perf_counter() - t0


def _medians(tables, rows=("mixture", "baseline", "sisdr+30ate", "ae+30ate")):
    return {r: statistics.median(t.rows[r][0] for t in tables.values()) for r in rows}


def test_ae_arm_beats_baselines(study, capsys):
    cfg, tables, secs = study
    m = _medians(tables["A"])
    ok = (m["ae+30ate"] < m["baseline"] and m["ae+30ate"] < m["sisdr+30ate"]
          and m["mixture"] - m["sisdr+30ate"] >= 0.20 and m["mixture"] - m["ae+30ate"] >= 0.20)
    report(capsys, "AE arm vs baseline, SI-SDR arm and mixture (recognizer A)", ok,
           "median CP-WER " + ", ".join(f"{k} {100 * v:.1f}%" for k, v in m.items()) + f"; {secs / 60:.1f} min")


def test_ae_arm_transfers_to_unseen_recognizer(study, capsys):
    m = _medians(study[1]["B"])
    report(capsys, "AE arm vs SI-SDR arm (unseen recognizer B)", m["ae+30ate"] < m["sisdr+30ate"],
           f"median CP-WER ae {100 * m['ae+30ate']:.1f}% vs sisdr {100 * m['sisdr+30ate']:.1f}%")


def test_alpha_zero_beats_alpha_one(study, capsys):
    cfg = study[0].replace(seeds=ALPHA_SEEDS, alphas=(0.0, 1.0))
    by_alpha = ex.cmd_sweep_alpha(cfg)
    m0, m1 = statistics.median(by_alpha[0.0]), statistics.median(by_alpha[1.0])
    report(capsys, "alpha=0 vs alpha=1", m0 < m1,
           f"median CP-WER over {len(ALPHA_SEEDS)} seeds: {100 * m0:.1f}% vs {100 * m1:.1f}%")


def test_tsl_limits_run_transcript_free(study, capsys, monkeypatch):
    sealed = []
    orig = ex._sealed
    monkeypatch.setattr(ex, "_sealed", lambda item: sealed.append(1) or orig(item))
    cfg = study[0].replace(seeds=(1,), ates=TSL_ATES)
    secs = ex.cmd_sweep_tsl(cfg)
    per = [secs[lim][0] for lim in sorted(cfg.tsl_limits)]
    ok = len(per) == len(cfg.tsl_limits) and len(sealed) > 0 and all(a < b for a, b in zip(per, per[1:]))
    report(capsys, "TSL limits transcript-free with monotone cost", ok,
           ", ".join(f"{lim} s: {s:.2f} s/ATE" for lim, s in zip(sorted(cfg.tsl_limits), per))
           + f"; {len(sealed)} sealed items")


def test_reruns_are_bit_identical(study, capsys, tmp_path):
    # a miniature full pipeline run twice, plus a rerun of the full-scale evaluation
    small = ExperimentConfig.from_text(
        "seeds = 7\nrec_steps = 20\npretrain_epochs = 2\npretrain_items = 8\nates = 2\nfinetune_items = 8\n"
        "n_valid = 4\nn_test = 8\ndump_items = 2\nalphas = 0.0, 1.0\ntsl_limits = 0.25, 0.5\n")
    snaps = []
    for run in ("r1", "r2"):
        cfg = small.replace(out_dir=str(tmp_path / "run"))
        ex.cmd_gen_data(cfg)
        ex.cmd_train_recognizers(cfg)
        ex.cmd_pretrain(cfg, 7)
        for arm in ("sisdr", "ae"):
            ex.cmd_finetune(cfg.replace(arm=arm), 7)
        ex.cmd_evaluate(cfg, "A")
        ex.cmd_evaluate(cfg, "B")
        ex.cmd_sweep_alpha(cfg)
        ex.cmd_sweep_tsl(cfg)
        ex.cmd_dump_logits(cfg, 7)
        root = tmp_path / "run"
        files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "timing_tsl.csv")
        snaps.append({str(p.relative_to(root)): _digest(p) for p in files})
        if run == "r1":
            for p in files:
                p.unlink()
    full = ex.paths(study[0]).root / "eval-A.csv"
    before = _digest(full)
    ex.cmd_evaluate(study[0], "A")
    ok = snaps[0] == snaps[1] and len(snaps[0]) > 0 and _digest(full) == before
    report(capsys, "reruns bit-identical", ok,
           f"{len(snaps[0])} files match across two runs; full-scale eval-A.csv rerun "
           + ("identical" if _digest(full) == before else "differs"))
