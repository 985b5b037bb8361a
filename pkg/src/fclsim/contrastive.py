"""InfoNCE (NT-Xent) loss and the benign client's local SimCLR training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AugmentPolicy, Dataset, augment_batch
from .model import ModelArch, Tape
from .numcore import GradResult, ParamVector, RngStream, row_norms, sub_params
from .updates import BENIGN, ClientUpdate


class ContrastiveConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5
    batch_size: int = 32
    local_epochs: int = 1
    learning_rate: float = 0.1
    augment: AugmentPolicy = field(default_factory=AugmentPolicy.simclr)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContrastiveConfigError("temperature must be > 0")
        if self.batch_size < 2:
            raise ContrastiveConfigError("batch_size must be >= 2")
        if self.local_epochs < 1:
            raise ContrastiveConfigError("local_epochs must be >= 1")
        if self.learning_rate < 0:
            raise ContrastiveConfigError("learning_rate must be >= 0")


def info_nce(z: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/dz for 2M rows where rows k and k+M are positives."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n % 2:
        raise ValueError("info_nce needs an even number of rows (two views per sample)")
    m = n // 2
    norms = row_norms(z, "embedding")
    u = z / norms[:, None]
    s = (u @ u.T) / tau
    np.fill_diagonal(s, -np.inf)
    pos = np.concatenate([np.arange(m, n), np.arange(m)])
    rows = np.arange(n)
    smax = s.max(axis=1, keepdims=True)
    e = np.exp(s - smax)
    denom = e.sum(axis=1)
    lse = np.log(denom) + smax[:, 0]
    loss = float(np.mean(lse - s[rows, pos]))

    # dL/ds, with the diagonal excluded
    g = e / denom[:, None]
    g[rows, pos] -= 1.0
    g /= n
    gu = (g + g.T) @ u / tau
    gz = (gu - u * np.einsum("ij,ij->i", gu, u)[:, None]) / norms[:, None]
    return loss, gz


def info_nce_loss(z: np.ndarray, tau: float) -> GradResult:
    """InfoNCE over 2M views; the gradient is with respect to ``z``."""
    loss, gz = info_nce(z, tau)
    return GradResult(loss, ParamVector(gz, (("z", gz.shape),)))


def contrastive_step(params: ParamVector, arch: ModelArch, x: np.ndarray, cfg: ContrastiveConfig,
                     gen: np.random.Generator) -> GradResult:
    views = np.concatenate([augment_batch(x, gen, cfg.augment), augment_batch(x, gen, cfg.augment)])
    tape = Tape(params, arch)
    z = tape.project(tape.encode(views))
    loss, gz = info_nce(z, cfg.temperature)
    return GradResult(loss, tape.backward(grad_z=gz))


def minibatches(n: int, batch_size: int, gen: np.random.Generator):
    order = gen.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def benign_local_train(
    global_params: ParamVector,
    arch: ModelArch,
    shard: Dataset,
    cfg: ContrastiveConfig,
    rng: RngStream,
    client_id: int = 0,
    round: int = 0,
) -> ClientUpdate:
    """Run local SGD on InfoNCE from the global model and return the delta."""
    if len(shard) == 0:
        raise ValueError(f"client {client_id} has an empty shard")
    gen = rng.generator()
    local = global_params.values.copy()
    for _ in range(cfg.local_epochs):
        for idx in minibatches(len(shard), cfg.batch_size, gen):
            if idx.size < 2:
                continue
            res = contrastive_step(global_params.with_values(local), arch, shard.pixels[idx], cfg, gen)
            local -= cfg.learning_rate * res.grad.values
    delta = sub_params(global_params.with_values(local), global_params)
    return ClientUpdate(delta, client_id, round, BENIGN)
