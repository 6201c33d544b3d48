"""Optimisation loops and checkpoints.

Checkpoint format: a numpy ``.npz`` archive with keys ``version`` (int),
``kind`` (``"mlp_field"`` or ``"toy_codec"``), ``arch`` (JSON text) and
``params`` (flat float64 vector in the order of ``param_shapes()``).
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from binderflow.denoiser.codec import ToyCodec
from binderflow.denoiser.field import FieldArch, MLPField
from binderflow.flowcore import DEFAULT_CD, cfm_loss, elbo_loss

CHECKPOINT_VERSION = 1
DIVERGENCE_LIMIT = 1e6


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss {loss:.3g})")
        self.step = step
        self.loss = loss


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: Optional[float] = None) -> None:
        """In-place update of ``params``."""
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        if lr:
            params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    steps: int = 2000
    batch: int = 64
    c_d: float = DEFAULT_CD
    seed: int = 0
    lr_final: Optional[float] = None

    def lr_at(self, step: int) -> float:
        if self.lr_final is None or self.steps <= 1:
            return self.lr
        frac = step / (self.steps - 1)
        return self.lr * (self.lr_final / self.lr) ** frac if self.lr > 0 else 0.0


@dataclass
class LossTrace:
    losses: list

    def tail_mean(self, frac: float = 0.1) -> float:
        k = max(1, int(round(len(self.losses) * frac)))
        return float(np.mean(self.losses[-k:]))


def train_field(field: MLPField, dataset, codec: Optional[ToyCodec] = None, config: TrainConfig = TrainConfig()):
    """Adam on the flow-matching loss; returns ``(trained copy, LossTrace)``.

    Each step draws a batch and then the loss's times and noise from one
    generator seeded by ``config.seed``, so runs differing only in ``c_d``
    consume identical random numbers.
    """
    if codec is not None:
        dataset = replace(dataset, latents=codec.encode(dataset.geom, dataset.labels)[0])
    field = field.copy()
    opt = Adam(field.params.size, config.lr)
    rng = np.random.default_rng(config.seed)
    losses = []
    for step in range(config.steps):
        batch = dataset.sample_batch(rng, config.batch)
        loss, grad = cfm_loss(field, batch, rng, c_d=config.c_d)
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise TrainingDivergedError(step, loss)
        losses.append(loss)
        opt.step(field.params, grad, config.lr_at(step))
    return field, LossTrace(losses)


def train_codec(codec: ToyCodec, dataset, config: TrainConfig = TrainConfig(), beta: float = 1e-3):
    """Adam on the negative beta-ELBO with reparameterised posterior samples."""
    codec = ToyCodec(codec.d_z, codec.params.copy(), codec.n_labels)
    opt = Adam(codec.params.size, config.lr)
    rng = np.random.default_rng(config.seed)
    losses = []
    for step in range(config.steps):
        idx = rng.integers(len(dataset), size=config.batch)
        batch = (dataset.coords[idx], dataset.geom[idx], dataset.labels[idx])
        loss, _, grad = elbo_loss(codec, batch, beta=beta, rng=rng, with_grad=True)
        if not np.isfinite(loss) or abs(loss) > DIVERGENCE_LIMIT:
            raise TrainingDivergedError(step, loss)
        losses.append(loss)
        opt.step(codec.params, grad, config.lr_at(step))
    return codec, LossTrace(losses)


def _atomic_savez(path, **arrays) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model) -> None:
    if isinstance(model, MLPField):
        kind, arch = "mlp_field", model.arch.to_dict()
    elif isinstance(model, ToyCodec):
        kind, arch = "toy_codec", {"d_z": model.d_z, "n_labels": model.n_labels}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    _atomic_savez(path, version=CHECKPOINT_VERSION, kind=kind, arch=json.dumps(arch, sort_keys=True), params=model.params)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as f:
        version = int(f["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        kind = str(f["kind"])
        arch = json.loads(str(f["arch"]))
        params = f["params"].copy()
    if kind == "mlp_field":
        return MLPField(FieldArch.from_dict(arch), params)
    if kind == "toy_codec":
        return ToyCodec(arch["d_z"], params, arch["n_labels"])
    raise ValueError(f"unknown checkpoint kind {kind!r}")
