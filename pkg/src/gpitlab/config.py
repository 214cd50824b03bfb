"""Flat ``key = value`` experiment configuration with typed keys and a canonical hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import JointLossConfig
from .recognizer import RecognizerConfig
from .separator import SeparatorConfig
from .signals import DatasetSpec


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    # run layout
    out_dir: str = "runs/default"
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    # corpus
    k: int = 8
    d_sym: int = 800
    fs: int = 8000
    min_symbols: int = 3
    max_symbols: int = 10
    mixing_snr: tuple[float, ...] = (0.0, 5.0)
    noise_snr: tuple[float, ...] = (-6.0, 3.0)
    reflections: int = 3
    n_valid: int = 64
    n_test: int = 100
    # recognizers A (fine-tuning source) and B (unseen evaluator)
    rec_a_seed: int = 1001
    rec_a_hidden: int = 64
    rec_a_bands: int = 32
    rec_b_seed: int = 2002
    rec_b_hidden: int = 96
    rec_b_bands: int = 32
    rec_steps: int = 600
    rec_batch: int = 16
    rec_lr: float = 3e-3
    rec_reverb_prob: float = 0.5
    rec_data_seed: int = 0
    # separator
    sep_kernel: int = 16
    sep_stride: int = 8
    sep_channels: int = 64
    sep_hidden: int = 64
    sep_layers: int = 3
    # pretraining
    pretrain_epochs: int = 40
    pretrain_items: int = 512
    lr_pretrain: float = 1e-3
    warm_epochs: int = 5
    plateau_patience: int = 3
    batch: int = 4
    # fine-tuning
    ates: int = 30
    finetune_items: int = 256
    lr_finetune: float = 1e-4
    arm: str = "ae"
    alpha: float = 0.0
    ae_on: str = "logits"
    tsl: float | None = None
    # evaluation and sweeps
    recognizer: str = "A"
    alphas: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    tsl_limits: tuple[float, ...] = (0.25, 0.5, 1.0)
    dump_items: int = 20
    dump_arms: tuple[str, ...] = ("sisdr", "ae")
    save_wav: bool = False

    def __post_init__(self):
        if self.arm not in ("sisdr", "ae", "joint"):
            raise ConfigError(f"arm must be sisdr, ae or joint, got {self.arm!r}")
        if self.recognizer not in ("A", "B"):
            raise ConfigError(f"recognizer must be A or B, got {self.recognizer!r}")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if len(self.mixing_snr) != 2 or len(self.noise_snr) != 2:
            raise ConfigError("SNR ranges take two values: low, high")
        try:
            JointLossConfig(alpha=self.alpha, ae_on=self.ae_on)
            for a in self.alphas:
                JointLossConfig(alpha=a)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.ae_on not in ("logits", "log_probs"):
            raise ConfigError(f"ae_on must be logits or log_probs, got {self.ae_on!r}")

    # ------------------------------------------------------------ parsing
    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        updates = {}
        for key, text in pairs.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                updates[key] = _PARSERS[types[key]](text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
        return dataclasses.replace(base, **updates)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        pairs: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in pairs:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            pairs[key] = value
        return cls.from_pairs(pairs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def with_overrides(self, assignments: list[str]) -> "ExperimentConfig":
        pairs = {}
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, value = item.split("=", 1)
            pairs[key.strip()] = value.strip()
        return self.from_pairs(pairs, self)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    # ------------------------------------------------------- provenance
    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            elif v is None:
                v = "none"
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # ---------------------------------------------------- component views
    def dataset(self, split: str, seed: int, n_items: int, tsl: float | None = None) -> DatasetSpec:
        return DatasetSpec(split=split, n_items=n_items, min_symbols=self.min_symbols, max_symbols=self.max_symbols,
                           mixing_snr=tuple(self.mixing_snr), noise_snr=tuple(self.noise_snr), tsl=tsl, seed=seed,
                           k=self.k, d_sym=self.d_sym, fs=self.fs, reflections=self.reflections)

    def separator(self) -> SeparatorConfig:
        return SeparatorConfig(kernel=self.sep_kernel, stride=self.sep_stride, channels=self.sep_channels,
                               hidden=self.sep_hidden, layers=self.sep_layers)

    def recognizer_config(self, which: str) -> RecognizerConfig:
        seed, hidden, bands = {"A": (self.rec_a_seed, self.rec_a_hidden, self.rec_a_bands),
                               "B": (self.rec_b_seed, self.rec_b_hidden, self.rec_b_bands)}[which]
        return RecognizerConfig(k=self.k, seed=seed, hidden=hidden, bands=bands, fs=self.fs, steps=self.rec_steps,
                                batch=self.rec_batch, lr=self.rec_lr, reverb_prob=self.rec_reverb_prob)

    def arm_tag(self) -> str:
        if self.arm == "joint":
            tag = f"joint-a{self.alpha:g}"
        else:
            tag = self.arm
        if self.tsl:
            tag += f"-tsl{self.tsl:g}"
        return tag


_PARSERS = {
    "str": str,
    "int": int,
    "float": float,
    "bool": _bool,
    "float | None": _opt_float,
    "tuple[int, ...]": _ints,
    "tuple[float, ...]": _floats,
    "tuple[str, ...]": lambda t: tuple(v.strip() for v in t.split(",") if v.strip()),
}
