"""Experiment pipeline: data manifests, recognizers, separator pretraining, fine-tuning arms, evaluation, sweeps.

Every artifact lives under ``cfg.out_dir``::

    manifest.csv
    recognizers/{A,B}.ckpt, recognizers.csv
    seed{s}/pretrain.ckpt, pretrain.csv
    seed{s}/ft-{tag}/ate{nn}.ckpt, trace.csv
    seed{s}/eval-{A,B}.csv
    eval-{A,B}.csv, sweep_alpha.csv, sweep_tsl.csv   (all seeds plus medians)
    timing_tsl.csv                                   (wall-clock, not deterministic)
    logits/seed{s}/...

CSVs and checkpoints are pure functions of the config; wall-clock numbers go
only to ``timing_*.csv``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import params_hash
from .config import ExperimentConfig
from .losses import AELoss, JointLossConfig, SisdrLoss, gpit_loss, joint_loss, pit_loss, solve_permutation
from .metrics import EvalReport, cp_wer_detail, orc_wer_detail
from .optim import AdamState, adam_step, zero_grads
from .recognizer import Recognizer, train_recognizer
from .separator import Separator
from .signals import MixtureExample, sisdr, write_wav

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    pass


class TranscriptAccess(RuntimeError):
    """Raised when the fine-tuning path touches a transcript."""


class SealedTranscripts(Sequence):
    """Stand-in for transcripts on the training path; any read raises."""

    def __getitem__(self, i):
        raise TranscriptAccess("transcripts are not available on the fine-tuning path")

    def __len__(self):
        raise TranscriptAccess("transcripts are not available on the fine-tuning path")

    def __iter__(self):
        raise TranscriptAccess("transcripts are not available on the fine-tuning path")


# ---------------------------------------------------------------- layout


@dataclass(frozen=True)
class RunPaths:
    root: Path

    def recognizer(self, which: str) -> Path:
        return self.root / "recognizers" / f"{which}.ckpt"

    def seed_dir(self, seed: int) -> Path:
        return self.root / f"seed{seed}"

    def pretrain(self, seed: int) -> Path:
        return self.seed_dir(seed) / "pretrain.ckpt"

    def arm_dir(self, seed: int, tag: str) -> Path:
        return self.seed_dir(seed) / f"ft-{tag}"

    def ate(self, seed: int, tag: str, n: int) -> Path:
        return self.arm_dir(seed, tag) / f"ate{n:02d}.ckpt"


def paths(cfg: ExperimentConfig) -> RunPaths:
    return RunPaths(Path(cfg.out_dir))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


# ------------------------------------------------------------------- CSV


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # np.float64 subclasses float but reprs as np.float64(...)
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence], cfg: ExperimentConfig,
              seed: int | str) -> Path:
    """RFC-4180 CSV preceded by two ``#`` provenance lines (hash/seed, full config)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.hash()} seed={seed}\r\n")
        fh.write("# config=" + json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")) + "\r\n")
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    tmp.replace(path)
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _median(values: Sequence[float]) -> float:
    return float(statistics.median(values))


# -------------------------------------------------------------- gen-data


def item_digest(ex: MixtureExample) -> str:
    h = hashlib.sha256()
    h.update(ex.x.astype("<f8").tobytes())
    h.update(ex.refs.astype("<f8").tobytes())
    return h.hexdigest()[:16]


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    """Manifest of every split per seed; audio is regenerated on demand, never stored."""
    rows = []
    for seed in cfg.seeds:
        for split, n in (("train", cfg.pretrain_items), ("valid", cfg.n_valid), ("test", cfg.n_test)):
            spec = cfg.dataset(split, seed, n)
            rows.append([seed, split, n, "per-epoch" if spec.dynamic else "fixed", item_digest(spec.item(0, 0))])
    out = write_csv(paths(cfg).root / "manifest.csv", ["seed", "split", "n_items", "regeneration", "item0_digest"],
                    rows, cfg, ",".join(map(str, cfg.seeds)))
    if cfg.save_wav:
        wav_dir = paths(cfg).root / "wav"
        wav_dir.mkdir(parents=True, exist_ok=True)
        ex = cfg.dataset("test", cfg.seeds[0], 1).item(0)
        peak = max(np.max(np.abs(ex.x)), 1e-12)
        write_wav(wav_dir / "test0-mix.wav", ex.x / peak, cfg.fs)
        for c, r in enumerate(ex.refs):
            write_wav(wav_dir / f"test0-ref{c}.wav", r / peak, cfg.fs)
    return out


# ----------------------------------------------------- train-recognizers


def cmd_train_recognizers(cfg: ExperimentConfig) -> dict[str, float]:
    p = paths(cfg)
    clean = cfg.dataset("clean", cfg.rec_data_seed, 0)
    eval_spec = cfg.dataset("clean-test", cfg.rec_data_seed, 100)
    rows, wers = [], {}
    for which in ("A", "B"):
        rcfg = cfg.recognizer_config(which)
        model, wer = train_recognizer(clean, rcfg, eval_spec)
        if wer > 0.10:
            log.warning("recognizer %s clean WER %.3f exceeds 10%%", which, wer)
        model.save(_mkparent(p.recognizer(which)), {"config_hash": cfg.hash(), "clean_wer": wer})
        rows.append([which, rcfg.seed, rcfg.hidden, rcfg.bands, wer, params_hash(model.state())])
        wers[which] = wer
        log.info("recognizer %s: clean WER %.4f", which, wer)
    write_csv(p.root / "recognizers.csv", ["recognizer", "seed", "hidden", "bands", "clean_wer", "params_hash"],
              rows, cfg, f"{cfg.rec_a_seed},{cfg.rec_b_seed}")
    return wers


def load_recognizer(cfg: ExperimentConfig, which: str) -> Recognizer:
    return Recognizer.load(_require(paths(cfg).recognizer(which), f"recognizer {which}")).freeze()


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# -------------------------------------------------------------- training

LossFn = Callable[[list, list], T.Tensor]


def _run_epoch(sep: Separator, opt: AdamState, items: Callable[[int], MixtureExample], n_items: int, batch: int,
               loss_fn: LossFn, trace: list[float]) -> float:
    params = sep.param_list()
    total = 0.0
    for start in range(0, n_items, batch):
        stop = min(start + batch, n_items)
        zero_grads(params)
        for i in range(start, stop):
            ex = items(i)
            with T.Tape() as tape:
                raw = loss_fn(list(ex.refs), sep.separate(ex.x).estimates)
                loss = T.scale(raw, 1.0 / (stop - start))
            value = raw.item()
            if not math.isfinite(value):
                raise RuntimeError(f"training diverged (non-finite loss {value}) at item {i}")
            T.backward(tape, loss)
            trace.append(value)
            total += value
        adam_step(params, [p.grad for p in params], opt)
    return total / n_items


def separation_score(sep: Separator, ex: MixtureExample) -> float:
    """Mean SI-SDR of the estimates under the best pairing."""
    est = sep.separate(ex.x).numpy()
    res = solve_permutation(list(ex.refs), list(est), SisdrLoss())
    return -res.total / ex.n_src


def _validate(sep: Separator, cfg: ExperimentConfig, seed: int) -> tuple[float, float]:
    spec = cfg.dataset("valid", seed, cfg.n_valid)
    est, mix = [], []
    for ex in spec.items():
        est.append(separation_score(sep, ex))
        mix.append(float(np.mean([sisdr(r, ex.x) for r in ex.refs])))
    return float(np.mean(est)), float(np.mean(est) - np.mean(mix))


@dataclass
class PlateauHalving:
    """Halve the LR after ``patience`` epochs without a validation gain, once the warm period is over."""

    lr: float
    warm: int
    patience: int
    best: float = -math.inf
    stale: int = 0

    def step(self, epoch: int, score: float) -> float:
        if score > self.best:
            self.best, self.stale = score, 0
        else:
            self.stale += 1
        if epoch + 1 >= self.warm and self.stale >= self.patience:
            self.lr *= 0.5
            self.stale = 0
        return self.lr


def cmd_pretrain(cfg: ExperimentConfig, seed: int) -> Path:
    p = paths(cfg)
    sep = Separator(cfg.separator(), seed=seed)
    opt = AdamState.for_params(sep.param_list(), cfg.lr_pretrain)
    sched = PlateauHalving(cfg.lr_pretrain, cfg.warm_epochs, cfg.plateau_patience)
    spec = cfg.dataset("train", seed, cfg.pretrain_items)
    pit = lambda refs, ests: pit_loss(refs, ests, SisdrLoss())  # noqa: E731
    rows = []
    for epoch in range(cfg.pretrain_epochs):
        lr = opt.lr
        loss = _run_epoch(sep, opt, lambda i: spec.item(i, epoch), cfg.pretrain_items, cfg.batch, pit, [])
        val, val_imp = _validate(sep, cfg, seed)
        opt.lr = sched.step(epoch, val)
        rows.append([epoch, lr, loss, val, val_imp])
        log.info("seed %d pretrain epoch %d lr %.2e loss %.4f valid SI-SDR %.3f (+%.3f)", seed, epoch, lr, loss, val,
                 val_imp)
    out = _mkparent(p.pretrain(seed))
    sep.save(out, {"config_hash": cfg.hash(), "stage": "pretrain", "epochs": cfg.pretrain_epochs})
    write_csv(p.seed_dir(seed) / "pretrain.csv", ["epoch", "lr", "train_loss", "valid_sisdr", "valid_sisdr_improvement"],
              rows, cfg, seed)
    return out


# ------------------------------------------------------------- fine-tune


def arm_loss(cfg: ExperimentConfig, recognizer: Recognizer) -> LossFn:
    if cfg.arm == "sisdr":
        sis = SisdrLoss()
        return lambda refs, ests: pit_loss(refs, ests, sis)
    if cfg.arm == "ae":
        guide, applied = SisdrLoss(), AELoss(recognizer, cfg.ae_on)
        return lambda refs, ests: gpit_loss(refs, ests, guide, applied)
    jcfg = JointLossConfig(alpha=cfg.alpha, ae_on=cfg.ae_on)
    return lambda refs, ests: joint_loss(refs, ests, jcfg, recognizer)


def _sealed(ex: MixtureExample) -> MixtureExample:
    return replace(ex, transcripts=SealedTranscripts())


@dataclass
class FinetuneResult:
    tag: str
    checkpoints: list[Path]
    trace: list[float]
    seconds_per_ate: list[float] = field(default_factory=list)
    recognizer_hash: str = ""


def cmd_finetune(cfg: ExperimentConfig, seed: int) -> FinetuneResult:
    """Continue training the pretrained separator for ``cfg.ates`` epochs with the configured arm."""
    p = paths(cfg)
    sep, parent = Separator.load(_require(p.pretrain(seed), f"pretrained separator for seed {seed}"))
    rec_path = _require(p.recognizer("A"), "recognizer A")
    rec = load_recognizer(cfg, "A")
    rec_hash = params_hash(rec.state())
    file_hash = hashlib.sha256(rec_path.read_bytes()).hexdigest()
    loss_fn = arm_loss(cfg, rec)
    spec = cfg.dataset("train", seed, cfg.finetune_items, tsl=cfg.tsl)
    opt = AdamState.for_params(sep.param_list(), cfg.lr_finetune)
    tag = cfg.arm_tag()
    trace: list[float] = []
    rows, ckpts, timing = [], [], []
    for a in range(cfg.ates):
        epoch = cfg.pretrain_epochs + a
        start = len(trace)
        t0 = time.perf_counter()
        _run_epoch(sep, opt, lambda i: _sealed(spec.item(i, epoch)), cfg.finetune_items, cfg.batch, loss_fn, trace)
        timing.append(time.perf_counter() - t0)
        if params_hash(rec.state()) != rec_hash:
            raise RuntimeError("recognizer A parameters changed during fine-tuning")
        out = _mkparent(p.ate(seed, tag, a + 1))
        sep.save(out, {"config_hash": cfg.hash(), "stage": "finetune", "arm": tag, "ate": a + 1,
                       "parent_hash": parent.get("config_hash"), "recognizer_hash": rec_hash})
        ckpts.append(out)
        rows.extend([a + 1, k - start, trace[k]] for k in range(start, len(trace)))
        log.info("seed %d %s ATE %d/%d loss %.4f (%.1fs)", seed, tag, a + 1, cfg.ates,
                 float(np.mean(trace[start:])), timing[-1])
    if hashlib.sha256(rec_path.read_bytes()).hexdigest() != file_hash:
        raise RuntimeError("recognizer A checkpoint changed on disk during fine-tuning")
    write_csv(p.arm_dir(seed, tag) / "trace.csv", ["ate", "item", "loss"], rows, cfg, seed)
    return FinetuneResult(tag, ckpts, trace, timing, rec_hash)


def final_checkpoint(cfg: ExperimentConfig, seed: int, tag: str) -> Path:
    return _require(paths(cfg).ate(seed, tag, cfg.ates), f"fine-tuned separator {tag} (seed {seed})")


# -------------------------------------------------------------- evaluate

METRIC_COLUMNS = ["cp_wer", "d_cp_wer", "orc_wer", "d_orc_wer", "sisdr"]


@dataclass
class MetricsTable:
    """Rows of (CP-WER, ORC-WER, SI-SDR); Δ columns are derived against the mixture row."""

    rows: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    def add(self, name: str, report: EvalReport) -> None:
        self.rows[name] = (report.cp_wer, report.orc_wer, report.sisdr)

    def delta(self, name: str) -> tuple[float, float]:
        mix = self.rows["mixture"]
        row = self.rows[name]
        return mix[0] - row[0], mix[1] - row[1]

    def records(self) -> list[list]:
        out = []
        for name, (cp, orc, sd) in self.rows.items():
            d_cp, d_orc = self.delta(name)
            out.append([name, cp, d_cp, orc, d_orc, sd])
        return out


def _estimates(system, ex: MixtureExample) -> np.ndarray:
    if system == "oracle":
        return ex.refs
    if system == "mixture":
        return np.stack([ex.x] * ex.n_src)
    return system.separate(ex.x).numpy()


def evaluate_system(system, rec: Recognizer, examples: Sequence[MixtureExample]) -> EvalReport:
    rep = EvalReport()
    for ex in examples:
        est = _estimates(system, ex)
        hyps = [rec.transcribe(e) for e in est]
        cp = cp_wer_detail(ex.transcripts, hyps)
        orc = orc_wer_detail([(c, ex.onsets[c], t) for c, t in enumerate(ex.transcripts)], hyps)
        res = solve_permutation(list(ex.refs), list(est), SisdrLoss())
        mix = float(np.mean([sisdr(r, ex.x) for r in ex.refs]))
        rep.add(cp, orc, -res.total / ex.n_src, mix)
    return rep


def evaluate_seed(cfg: ExperimentConfig, seed: int, which: str | None = None,
                  arms: Sequence[str] = ("sisdr", "ae")) -> MetricsTable:
    which = which or cfg.recognizer
    rec = load_recognizer(cfg, which)
    examples = list(cfg.dataset("test", seed, cfg.n_test).items())
    table = MetricsTable()
    table.add("oracle", evaluate_system("oracle", rec, examples))
    table.add("mixture", evaluate_system("mixture", rec, examples))
    base, _ = Separator.load(_require(paths(cfg).pretrain(seed), f"pretrained separator for seed {seed}"))
    table.add("baseline", evaluate_system(base, rec, examples))
    for tag in arms:
        sep, _ = Separator.load(final_checkpoint(cfg, seed, tag))
        table.add(f"{tag}+{cfg.ates}ate", evaluate_system(sep, rec, examples))
    return table


def cmd_evaluate(cfg: ExperimentConfig, which: str | None = None, arms: Sequence[str] = ("sisdr", "ae")
                 ) -> dict[int, MetricsTable]:
    which = which or cfg.recognizer
    p = paths(cfg)
    tables, all_rows = {}, []
    header = ["system"] + METRIC_COLUMNS
    for seed in cfg.seeds:
        table = evaluate_seed(cfg, seed, which, arms)
        tables[seed] = table
        write_csv(p.seed_dir(seed) / f"eval-{which}.csv", header, table.records(), cfg, seed)
        all_rows.extend([seed] + r for r in table.records())
    names = list(next(iter(tables.values())).rows)
    med = MetricsTable({n: tuple(_median([t.rows[n][k] for t in tables.values()]) for k in range(3)) for n in names})
    all_rows.extend(["median"] + r for r in med.records())
    write_csv(p.root / f"eval-{which}.csv", ["seed"] + header, all_rows, cfg, ",".join(map(str, cfg.seeds)))
    return tables


# ---------------------------------------------------------------- sweeps


def _finetune_and_score(cfg: ExperimentConfig, seed: int) -> tuple[FinetuneResult, EvalReport]:
    result = cmd_finetune(cfg, seed)
    sep, _ = Separator.load(result.checkpoints[-1])
    rec = load_recognizer(cfg, cfg.recognizer)
    return result, evaluate_system(sep, rec, list(cfg.dataset("test", seed, cfg.n_test).items()))


def cmd_sweep_alpha(cfg: ExperimentConfig) -> dict[float, list[float]]:
    rows, by_alpha = [], {a: [] for a in cfg.alphas}
    for seed in cfg.seeds:
        for alpha in cfg.alphas:
            _, rep = _finetune_and_score(cfg.replace(arm="joint", alpha=alpha), seed)
            rows.append([seed, alpha, rep.cp_wer, rep.orc_wer, rep.sisdr])
            by_alpha[alpha].append(rep.cp_wer)
    for alpha in cfg.alphas:
        sel = [r for r in rows if r[1] == alpha]
        rows.append(["median", alpha] + [_median([r[k] for r in sel]) for k in (2, 3, 4)])
    write_csv(paths(cfg).root / "sweep_alpha.csv", ["seed", "alpha", "cp_wer", "orc_wer", "sisdr"], rows, cfg,
              ",".join(map(str, cfg.seeds)))
    return by_alpha


def cmd_sweep_tsl(cfg: ExperimentConfig) -> dict[float, list[float]]:
    """AE-arm fine-tuning per TSL limit; returns mean seconds per ATE for each limit."""
    rows, timing_rows, seconds = [], [], {lim: [] for lim in cfg.tsl_limits}
    for seed in cfg.seeds:
        for lim in cfg.tsl_limits:
            result, rep = _finetune_and_score(cfg.replace(arm="ae", tsl=lim), seed)
            rows.append([seed, lim, rep.cp_wer, rep.orc_wer, rep.sisdr])
            sec = float(np.mean(result.seconds_per_ate))
            seconds[lim].append(sec)
            timing_rows.append([seed, lim, sec])
    write_csv(paths(cfg).root / "sweep_tsl.csv", ["seed", "tsl", "cp_wer", "orc_wer", "sisdr"], rows, cfg,
              ",".join(map(str, cfg.seeds)))
    write_csv(paths(cfg).root / "timing_tsl.csv", ["seed", "tsl", "seconds_per_ate"], timing_rows, cfg,
              ",".join(map(str, cfg.seeds)))
    return seconds


# ----------------------------------------------------------- dump-logits


def _write_matrix(path: Path, values: np.ndarray, cfg: ExperimentConfig, seed: int) -> None:
    header = ["frame"] + ["blank"] + [chr(ord("a") + i) for i in range(values.shape[1] - 1)]
    write_csv(path, header, [[t] + list(map(float, row)) for t, row in enumerate(values)], cfg, seed)


def cmd_dump_logits(cfg: ExperimentConfig, seed: int, arms: Sequence[str] | None = None) -> dict[str, list[float]]:
    """Write V(reference) and V(estimate) matrices per item and arm; returns per-item AE distances."""
    arms = tuple(arms or cfg.dump_arms)
    rec = load_recognizer(cfg, cfg.recognizer)
    seps = {tag: Separator.load(final_checkpoint(cfg, seed, tag))[0] for tag in arms}
    out = paths(cfg).root / "logits" / f"seed{seed}"
    dist = {tag: [] for tag in arms}
    rows = []
    for i in range(cfg.dump_items):
        ex = cfg.dataset("test", seed, cfg.n_test).item(i)
        refs = [rec.encode(r).values for r in ex.refs]
        for c, v in enumerate(refs):
            _write_matrix(out / f"item{i:03d}-s{c}-ref.csv", v, cfg, seed)
        for tag, sep in seps.items():
            est = sep.separate(ex.x).numpy()
            perm = solve_permutation(list(ex.refs), list(est), SisdrLoss()).perm
            d = []
            for c in range(ex.n_src):
                v = rec.encode(est[perm[c]]).values
                _write_matrix(out / f"item{i:03d}-s{c}-{tag}.csv", v, cfg, seed)
                d.append(float(np.mean((v - refs[c]) ** 2)))
            dist[tag].append(float(np.mean(d)))
            rows.append([i, tag, dist[tag][-1]])
    write_csv(out / "distances.csv", ["item", "arm", "ae_distance"], rows, cfg, seed)
    return dist
