"""Encoder backdoor injection: the three-part cosine loss, the malicious
client's local training, update boosting, and attacker target rosters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .contrastive import minibatches
from .data import Dataset, Trigger, embed_trigger_pixels
from .model import ModelArch, Tape, encode
from .numcore import DegenerateInputError, GradResult, ParamVector, RngStream, sub_params
from .updates import MALICIOUS, ClientUpdate


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TargetSpec:
    """A (downstream task, target class) pair with its trigger and reference images."""

    task_id: int
    target_class: int
    trigger: Trigger
    references: Dataset

    def __post_init__(self):
        refs = self.references
        if len(refs) < 1:
            raise AttackConfigError(f"target {self.task_id} needs at least one reference image")
        if refs.labels is None or np.any(refs.labels != self.target_class):
            raise AttackConfigError(f"references of target {self.task_id} must all carry label {self.target_class}")
        self.trigger.check_fits(refs.shape)

    @property
    def n_refs(self) -> int:
        return len(self.references)


@dataclass(frozen=True)
class Schedule:
    kind: str = "multi_shot"
    period: int = 1

    def __post_init__(self):
        if self.kind not in ("multi_shot", "one_shot"):
            raise AttackConfigError(f"unknown attack schedule {self.kind!r}")
        if self.period < 1:
            raise AttackConfigError("one-shot period must be >= 1")

    def is_attack_round(self, t: int) -> bool:
        """``t`` counts rounds since the attack phase began."""
        return self.kind == "multi_shot" or t % self.period == 0

    @property
    def scaled(self) -> bool:
        return self.kind == "one_shot"


@dataclass(frozen=True)
class AttackConfig:
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    malicious_local_epochs: int = 10
    learning_rate: float = 0.1
    gamma: float = 100.0
    schedule: Schedule = Schedule()
    batch_size: int = 32

    def __post_init__(self):
        if len(self.lambdas) != 3 or min(self.lambdas) < 0:
            raise AttackConfigError("lambdas must be three non-negative weights")
        if max(self.lambdas) <= 0:
            raise AttackConfigError("at least one lambda must be positive")
        if self.malicious_local_epochs < 1:
            raise AttackConfigError("malicious_local_epochs must be >= 1")
        if self.learning_rate < 0:
            raise AttackConfigError("learning_rate must be >= 0")
        if self.gamma < 1:
            raise AttackConfigError("scale factor gamma must be >= 1")
        if self.batch_size < 1:
            raise AttackConfigError("batch_size must be >= 1")


def _unit_rows(h: np.ndarray, describe) -> tuple[np.ndarray, np.ndarray]:
    n = np.sqrt(np.einsum("ij,ij->i", h, h))
    bad = np.flatnonzero(n == 0.0)
    if bad.size:
        raise DegenerateInputError(f"zero-norm feature for {describe(int(bad[0]))}")
    return h / n[:, None], n


def _unit_grad(gu: np.ndarray, u: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # back through x -> x / |x|
    return (gu - u * np.einsum("ij,ij->i", gu, u)[:, None]) / norms[:, None]


def _stack_inputs(x: np.ndarray, targets: Sequence[TargetSpec]):
    triggered = [embed_trigger_pixels(x, t.trigger) for t in targets]
    refs = [t.references.pixels for t in targets]
    return np.concatenate(triggered + refs + [x])


def _loss_from_features(h_local, g_refs, g_clean, n_x, targets, lambdas):
    """Loss and d(loss)/d(h_local) for features stacked as
    [triggered x per target..., references per target..., clean x]."""
    lam1, lam2, lam3 = lambdas
    n_t = len(targets)
    r = [t.n_refs for t in targets]
    r_total = sum(r)
    split_trig = n_t * n_x
    trig = h_local[:split_trig]
    refs = h_local[split_trig:split_trig + r_total]
    clean = h_local[split_trig + r_total:]

    def trig_name(k):
        return f"triggered input (target {targets[k // n_x].task_id}, example {k % n_x})"

    def ref_name(k):
        acc = 0
        for t, ri in zip(targets, r):
            if k < acc + ri:
                return f"reference {k - acc} of target {t.task_id}"
            acc += ri
        return f"reference {k}"

    ut, nt = _unit_rows(trig, trig_name)
    ur, nr = _unit_rows(refs, ref_name)
    uc, nc = _unit_rows(clean, lambda k: f"clean input {k}")
    ug, _ = _unit_rows(g_refs, lambda k: f"global-model feature of {ref_name(k)}")
    ugc, _ = _unit_rows(g_clean, lambda k: f"global-model feature of clean input {k}")

    g_ut = np.zeros_like(ut)
    g_ur = np.zeros_like(ur)
    l1 = 0.0
    c1 = 1.0 / (n_x * r_total)
    off = 0
    for i, ri in enumerate(r):
        ti = ut[i * n_x:(i + 1) * n_x]
        ri_rows = ur[off:off + ri]
        l1 -= c1 * float(np.sum(np.clip(ti @ ri_rows.T, -1.0, 1.0)))
        g_ut[i * n_x:(i + 1) * n_x] -= c1 * np.broadcast_to(ri_rows.sum(axis=0), ti.shape)
        g_ur[off:off + ri] -= c1 * np.broadcast_to(ti.sum(axis=0), ri_rows.shape)
        off += ri

    cos2 = np.einsum("ij,ij->i", ug, ur)
    l2 = -float(np.clip(cos2, -1.0, 1.0).sum()) / r_total
    g_ur2 = -ug / r_total

    cos3 = np.einsum("ij,ij->i", ugc, uc)
    l3 = -float(np.clip(cos3, -1.0, 1.0).sum()) / n_x
    g_uc = -ugc / n_x

    loss = lam1 * l1 + lam2 * l2 + lam3 * l3
    grad = np.concatenate([
        _unit_grad(lam1 * g_ut, ut, nt),
        _unit_grad(lam1 * g_ur + lam2 * g_ur2, ur, nr),
        _unit_grad(lam3 * g_uc, uc, nc),
    ])
    return loss, (l1, l2, l3), grad


def backdoor_loss(
    local: ParamVector,
    global_snapshot: ParamVector,
    arch: ModelArch,
    attacker_data: Dataset | np.ndarray,
    targets: Sequence[TargetSpec],
    lambdas=(1.0, 1.0, 1.0),
    *,
    parts: bool = False,
):
    """Weighted backdoor objective and its gradient w.r.t. ``local``.

    Features are encoder outputs. The global snapshot only supplies constant
    reference features. With ``parts=True`` also returns ``(L1, L2, L3)``.
    """
    x = np.asarray(getattr(attacker_data, "pixels", attacker_data), dtype=np.float64)
    if x.shape[0] == 0:
        raise AttackConfigError("attacker dataset is empty")
    if not targets:
        raise AttackConfigError("at least one target is required")
    refs = np.concatenate([t.references.pixels for t in targets])
    g_refs = encode(global_snapshot, arch, refs)
    g_clean = encode(global_snapshot, arch, x)
    tape = Tape(local, arch)
    h = tape.encode(_stack_inputs(x, targets))
    loss, pieces, gh = _loss_from_features(h, g_refs, g_clean, x.shape[0], targets, lambdas)
    res = GradResult(loss, tape.backward(grad_h=gh))
    return (res, pieces) if parts else res


def malicious_local_train(
    global_params: ParamVector,
    arch: ModelArch,
    attacker_data: Dataset,
    targets: Sequence[TargetSpec],
    cfg: AttackConfig,
    rng: RngStream,
    client_id: int = 0,
    round: int = 0,
) -> ClientUpdate:
    """SGD on the backdoor objective alone, starting from the global model."""
    x_all = attacker_data.pixels
    if len(x_all) == 0:
        raise AttackConfigError(f"attacker {client_id} has no local data")
    gen = rng.generator()
    refs = np.concatenate([t.references.pixels for t in targets])
    g_refs = encode(global_params, arch, refs)
    g_clean_all = encode(global_params, arch, x_all)
    local = global_params.values.copy()
    for _ in range(cfg.malicious_local_epochs):
        for idx in minibatches(len(x_all), cfg.batch_size, gen):
            x = x_all[idx]
            tape = Tape(global_params.with_values(local), arch)
            h = tape.encode(_stack_inputs(x, targets))
            _, _, gh = _loss_from_features(h, g_refs, g_clean_all[idx], x.shape[0], targets, cfg.lambdas)
            local -= cfg.learning_rate * tape.backward(grad_h=gh).values
    delta = sub_params(global_params.with_values(local), global_params)
    return ClientUpdate(delta, client_id, round, MALICIOUS)


def scale_update(update: ClientUpdate, gamma: float) -> ClientUpdate:
    """Boost an update by ``gamma`` so it survives averaging."""
    if gamma < 1:
        raise AttackConfigError("gamma must be >= 1")
    return update.scaled_by(gamma)


AttackerRoster = Mapping[int, list[TargetSpec]]


def build_attacker_roster(mode: str, n_attackers: int, targets: Sequence[TargetSpec]) -> dict[int, list[TargetSpec]]:
    """Map attacker ordinal -> its targets.

    Centralized attackers all chase every target; decentralized attackers
    each own exactly one.
    """
    if n_attackers < 0:
        raise AttackConfigError("n_attackers must be >= 0")
    if mode == "centralized":
        return {a: list(targets) for a in range(n_attackers)}
    if mode == "decentralized":
        if n_attackers != len(targets):
            raise AttackConfigError(
                f"decentralized mode needs one attacker per target: {n_attackers} attackers, {len(targets)} targets")
        return {a: [targets[a]] for a in range(n_attackers)}
    raise AttackConfigError(f"unknown attack mode {mode!r}")
