"""Mask-based time-domain separator: conv encoder, per-frame mask MLP, transposed-conv decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .tensor import Tensor


@dataclass(frozen=True)
class SeparatorConfig:
    kernel: int = 16
    stride: int = 8
    channels: int = 64
    hidden: int = 64
    layers: int = 3
    n_src: int = 2


@dataclass
class SeparationOutput:
    estimates: list[Tensor]

    def __len__(self) -> int:
        return len(self.estimates)

    def __getitem__(self, c: int) -> Tensor:
        return self.estimates[c]

    def numpy(self) -> np.ndarray:
        return np.stack([e.data for e in self.estimates])


def init_params(seed: int, cfg: SeparatorConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0x5E9])

    def uni(shape, fan_in):
        lim = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-lim, lim, shape)

    p = {"enc.w": uni((cfg.channels, 1, cfg.kernel), cfg.kernel)}
    width = cfg.channels
    for i in range(cfg.layers - 1):
        p[f"mask{i}.w"] = uni((width, cfg.hidden), width)
        p[f"mask{i}.b"] = np.zeros(cfg.hidden)
        width = cfg.hidden
    p["mask_out.w"] = uni((width, cfg.n_src * cfg.channels), width)
    p["mask_out.b"] = np.zeros(cfg.n_src * cfg.channels)
    p["dec.w"] = uni((cfg.channels, 1, cfg.kernel), cfg.channels)
    return p


class Separator:
    def __init__(self, cfg: SeparatorConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        raw = params if params is not None else init_params(seed, cfg)
        self.params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in raw.items()}

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def separate(self, x) -> SeparationOutput:
        """Split mixture ``x`` (length L_x) into ``n_src`` length-L_x estimates."""
        cfg = self.cfg
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        length = len(x)
        if length < cfg.kernel:
            raise ValueError(f"separate: input length {length} shorter than kernel {cfg.kernel}")
        padded = cfg.kernel + -(-(length - cfg.kernel) // cfg.stride) * cfg.stride
        rms = math.sqrt(float(np.mean(x * x))) or 1.0
        xin = np.zeros(padded)
        xin[:length] = x / rms
        p = self.params
        feat = T.relu(T.conv1d(Tensor(xin.reshape(1, 1, padded)), p["enc.w"], stride=cfg.stride))
        feat = T.transpose(feat, (0, 2, 1))  # (1, frames, channels)
        h = feat
        for i in range(cfg.layers - 1):
            h = T.relu(T.bias_add(T.matmul(h, p[f"mask{i}.w"]), p[f"mask{i}.b"]))
        masks = T.sigmoid(T.bias_add(T.matmul(h, p["mask_out.w"]), p["mask_out.b"]))
        outs = []
        b = cfg.channels
        for c in range(cfg.n_src):
            masked = T.mul(feat, masks[:, :, c * b : (c + 1) * b])
            y = T.conv_transpose1d(T.transpose(masked, (0, 2, 1)), p["dec.w"], stride=cfg.stride)
            outs.append(T.scale(T.reshape(y, (padded,))[:length], rms))
        return SeparationOutput(outs)

    def save(self, path, meta: dict | None = None) -> None:
        info = {"kind": "separator", "config": asdict(self.cfg), "seed": self.seed}
        if meta:
            info.update(meta)
        save_checkpoint(path, self.state(), info)

    @classmethod
    def load(cls, path) -> tuple["Separator", dict]:
        params, meta = load_checkpoint(path)
        if not meta or meta.get("kind") != "separator":
            raise ValueError(f"{path} is not a separator checkpoint")
        return cls(SeparatorConfig(**meta["config"]), params, seed=meta.get("seed", 0)), meta
