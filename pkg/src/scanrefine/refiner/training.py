"""Adam training loop with per-epoch exponential learning-rate decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ..errors import EmptyInputError, InvalidConfigError, ShapeError
from .network import DEFAULT_HIDDEN, MlpModel, init_model, loss_and_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    lr_decay: float = 0.9
    epochs: int = 10
    points_per_frame: int = 75_000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ignore_classes: tuple[int, ...] = (0,)
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    dtype: str = "float32"

    def validate(self) -> "TrainConfig":
        if not self.base_lr > 0:
            raise InvalidConfigError("base_lr must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise InvalidConfigError("lr_decay must lie in (0, 1]")
        if self.points_per_frame < 1:
            raise InvalidConfigError("points_per_frame must be >= 1")
        if self.epochs < 0:
            raise InvalidConfigError("epochs must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise InvalidConfigError("Adam betas must lie in [0, 1) and eps > 0")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfigError("dtype must be float32 or float64")
        return self


def learning_rate(config: TrainConfig, epoch: int) -> float:
    return config.base_lr * config.lr_decay ** epoch


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


class Adam:
    def __init__(self, params: list[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = OptimizerState([np.zeros_like(p) for p in params],
                                    [np.zeros_like(p) for p in params])

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for p, g, m, v in zip(params, grads, st.m, st.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _subsample(n: int, limit: int, seed: int, epoch: int, frame: int) -> np.ndarray | None:
    if n <= limit:
        return None
    rng = np.random.default_rng([seed, epoch, frame])
    return np.sort(rng.choice(n, size=limit, replace=False))


def train(config: TrainConfig, dataset: Iterable, model: MlpModel | None = None):
    """Fit the refiner on ``(FusedFrame, labels)`` pairs.

    One frame (subsampled to ``points_per_frame``) is one batch. Frame order
    is shuffled each epoch and subsampling is reseeded per (epoch, frame), all
    from ``config.seed``. Returns ``(model, history)`` where ``history`` has
    one ``{"epoch", "lr", "loss", "points"}`` record per epoch.
    """
    config.validate()
    data = list(dataset)
    if not data:
        raise EmptyInputError("training dataset is empty")
    q, k = data[0][0].q, data[0][0].k
    for fused, labels in data:
        if (fused.q, fused.k) != (q, k):
            raise ShapeError("all training frames must share q and K")
        if len(getattr(labels, "labels", labels)) != len(fused):
            raise ShapeError(f"frame {fused.frame_id}: label count != feature rows")
    if model is None:
        model = init_model(q, k, config.seed, config.hidden, np.dtype(config.dtype))
    ignore = np.asarray(config.ignore_classes, dtype=np.int64)
    opt = Adam(model.parameters(), config.beta1, config.beta2, config.eps)
    history = []
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(data))
        total, points = 0.0, 0
        for j in order:
            fused, labels = data[j]
            x = fused.features
            y = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
            pick = _subsample(len(x), config.points_per_frame, config.seed, epoch, int(j))
            if pick is not None:
                x, y = x[pick], y[pick]
            valid = int((~np.isin(y, ignore)).sum())
            if valid == 0 or len(y) < 2:
                log.warning("skipping frame %d in epoch %d: no usable points", fused.frame_id, epoch)
                continue
            loss, grads = loss_and_grad(model, x, y, config.ignore_classes)
            opt.step(model.parameters(), grads, lr)
            total += loss * valid
            points += valid
        model.epochs_trained += 1
        rec = {"epoch": epoch, "lr": lr, "loss": total / points if points else float("nan"),
               "points": points}
        history.append(rec)
        log.info("epoch %d lr=%.6g loss=%.6f", epoch, lr, rec["loss"])
    return model, history


def format_history(history: list[dict]) -> str:
    return "".join(
        f"epoch={h['epoch']} lr={h['lr']!r} loss={h['loss']!r} points={h['points']}\n"
        for h in history
    )
