"""Training loop over latent weights, with deterministic epochs.

Binarized layers are trained in the usual straight-through fashion: the
forward pass sees packed sign weights, gradients flow back into the float
latents, and after every optimizer step the latents are clipped to the
pass-through window so they cannot drift into the region where their
gradient is zeroed forever. Scales, batchnorm, and PReLU parameters stay
full precision throughout. Weight decay, when enabled, touches only float
convolution weights; decaying binary latents would fight the sign
function for no return, and shrinking BN/PReLU parameters changes the
function class rather than regularizing it.

Determinism: batch order comes from one numpy Generator seeded by the
config, every kernel is sequential, and the optimizer state is plain
arrays, so a rerun with the same seed reproduces the history bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, TrainingError
from .metrics import SegMetrics, confusion, from_confusion
from .network import Model, predict_mask
from .nn import Tensor, no_grad, softmax_ce_loss
from .scenes import load_dataset

_OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    latent_clip: float = 1.0
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.optimizer not in _OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {_OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError(f"adam eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.latent_clip <= 0:
            raise ConfigError(f"latent clip bound must be > 0, got {self.latent_clip}")


@dataclass
class Dataset:
    """In-memory image/mask pairs ready for batching."""

    images: np.ndarray  # (N, 3, H, W) float32
    masks: np.ndarray  # (N, H, W) uint8, values {0, 1}

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DimensionError(f"images must be (N, 3, H, W), got {self.images.shape}")
        if self.masks.shape != (self.images.shape[0],) + self.images.shape[2:]:
            raise DimensionError(
                f"masks {self.masks.shape} do not match images {self.images.shape}"
            )
        if self.images.shape[0] == 0:
            raise DimensionError("dataset is empty")

    def __len__(self) -> int:
        return self.images.shape[0]

    @classmethod
    def from_dir(cls, path: str | os.PathLike) -> "Dataset":
        images, masks, _ = load_dataset(path)
        return cls(images=images, masks=masks)

    def split(self, eval_count: int) -> tuple["Dataset", "Dataset"]:
        """Last eval_count samples become the held-out split."""
        n = len(self)
        if not (0 < eval_count < n):
            raise ValueError(f"eval count must lie in 1..{n - 1}, got {eval_count}")
        cut = n - eval_count
        return (
            Dataset(self.images[:cut], self.masks[:cut]),
            Dataset(self.images[cut:], self.masks[cut:]),
        )


def clip_latent(w: np.ndarray, bound: float = 1.0) -> np.ndarray:
    """Clamp latent weights into [-bound, bound]."""
    return np.clip(w, -bound, bound)


def optimizer_step(params, state: dict, cfg: TrainConfig) -> None:
    """One in-place update over (name, tensor, group) triples.

    state carries the global step count under "t" and per-parameter slots
    under each name; pass the same dict across steps.
    """
    t = state.get("t", 0) + 1
    state["t"] = t
    for name, tensor, group in params:
        g = tensor.grad
        if g is None:
            continue
        g = g.astype(np.float32, copy=False)
        if cfg.weight_decay > 0.0 and group == "conv_float":
            g = g + np.float32(cfg.weight_decay) * tensor.data
        slot = state.setdefault(name, {})
        if cfg.optimizer == "sgd":
            v = slot.get("v")
            v = g if v is None else np.float32(cfg.momentum) * v + g
            slot["v"] = v
            tensor.data = tensor.data - np.float32(cfg.lr) * v
        else:
            m = slot.get("m", np.zeros_like(tensor.data))
            v = slot.get("v", np.zeros_like(tensor.data))
            m = np.float32(cfg.beta1) * m + np.float32(1.0 - cfg.beta1) * g
            v = np.float32(cfg.beta2) * v + np.float32(1.0 - cfg.beta2) * (g * g)
            slot["m"], slot["v"] = m, v
            m_hat = m / np.float32(1.0 - cfg.beta1**t)
            v_hat = v / np.float32(1.0 - cfg.beta2**t)
            tensor.data = tensor.data - np.float32(cfg.lr) * m_hat / (
                np.sqrt(v_hat) + np.float32(cfg.eps)
            )
        if group == "latent":
            tensor.data = clip_latent(tensor.data, cfg.latent_clip)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    road_iou: float

    def log_line(self) -> str:
        return f"{self.epoch},{self.loss:.6f},{self.road_iou:.6f}"


def evaluate(
    model: Model, ds: Dataset, *, batch_size: int = 16, engine: str = "gemm"
) -> SegMetrics:
    """Inference-mode metrics over a dataset, from one global confusion."""
    tp = fp = fn = tn = 0
    for lo in range(0, len(ds), batch_size):
        pred = model.predict(ds.images[lo : lo + batch_size], engine=engine)
        a, b, c, d = confusion(pred, ds.masks[lo : lo + batch_size])
        tp += a
        fp += b
        fn += c
        tn += d
    return from_confusion(tp, fp, fn, tn)


def train(
    model: Model,
    ds: Dataset,
    cfg: TrainConfig,
    *,
    eval_ds: Dataset | None = None,
    engine: str = "gemm",
    log: Callable[[str], None] | None = None,
) -> list[EpochStats]:
    """Run the full loop; per-epoch road IoU is scored on eval_ds.

    Without an explicit held-out split the IoU falls back to the training
    set, which is only meaningful for smoke runs.
    """
    held_out = eval_ds if eval_ds is not None else ds
    params = model.parameters()
    state: dict = {}
    order_rng = np.random.default_rng(cfg.seed)
    n = len(ds)
    history: list[EpochStats] = []
    targets_all = ds.masks.astype(np.int64)
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n) if cfg.shuffle else np.arange(n)
        loss_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            x = Tensor(ds.images[idx])
            try:
                logits = model.forward(x, training=True, engine=engine)
                loss = softmax_ce_loss(logits, targets_all[idx])
            except NumericError as exc:
                raise TrainingError(
                    f"diverged in epoch {epoch}: {exc}", epoch=epoch
                ) from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} in epoch {epoch}", epoch=epoch
                )
            for _, tensor, _ in params:
                tensor.grad = None
            loss.backward()
            optimizer_step(params, state, cfg)
            model.invalidate_filters()
            loss_sum += value * len(idx)
        stats = EpochStats(
            epoch=epoch,
            loss=loss_sum / n,
            road_iou=evaluate(model, held_out, engine=engine).iou_road,
        )
        history.append(stats)
        if log is not None:
            log(stats.log_line())
    return history
