"""Server orchestration: client selection, round execution, delta
aggregation, and the pretrain-then-attack experiment loop."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .attack import AttackConfig, TargetSpec, malicious_local_train, scale_update
from .contrastive import ContrastiveConfig, benign_local_train
from .data import Dataset
from .defense import DefenseSpec, apply_defense
from .evaluation import EvalReport
from .model import ModelArch
from .numcore import ParamVector, RngStream
from .updates import ClientUpdate, SubmittedUpdate

log = logging.getLogger(__name__)

# stream purposes for RngStream.child
_SELECT, _TRAIN, _DEFENSE = 1, 2, 3


class FederationConfigError(ValueError):
    pass


class ClientTaskError(RuntimeError):
    def __init__(self, round: int, client_id: int, cause: BaseException):
        super().__init__(f"round {round}: client {client_id} failed: {cause}")
        self.round = round
        self.client_id = client_id


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 20
    k: int = 10
    server_lr: float = 1.0
    rounds: int = 40
    pretrain_rounds: int = 20
    n_attackers: int = 3
    seed: int = 0
    eval_every: int = 5
    threads: int = 1
    early_stop: bool = False

    def __post_init__(self):
        if not 1 <= self.k <= self.n_clients:
            raise FederationConfigError(f"need 1 <= k <= n_clients, got k={self.k}, n_clients={self.n_clients}")
        if not 0 <= self.n_attackers <= self.k:
            raise FederationConfigError(f"need 0 <= n_attackers <= k, got {self.n_attackers}")
        if self.n_clients - self.n_attackers < self.k:
            raise FederationConfigError(
                f"{self.n_clients - self.n_attackers} benign clients cannot fill a round of k={self.k}")
        if self.server_lr <= 0:
            raise FederationConfigError("server_lr must be > 0")
        if self.rounds < 0 or self.pretrain_rounds < 0:
            raise FederationConfigError("round counts must be >= 0")
        if self.eval_every < 1:
            raise FederationConfigError("eval_every must be >= 1")
        if self.threads < 1:
            raise FederationConfigError("threads must be >= 1")

    @property
    def attacker_ids(self) -> tuple[int, ...]:
        return tuple(range(self.n_attackers))


@dataclass
class RoundRecord:
    round: int
    phase: str
    attack_round: bool
    selected: list[int]
    weights: list[float]
    norms: list[float]
    knn_acc: float | None = None
    asr: dict[int, float] = field(default_factory=dict)
    main_acc: dict[int, float] = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "phase": self.phase,
            "attack_round": self.attack_round,
            "selected": self.selected,
            "weights": self.weights,
            "weight_sum": float(sum(self.weights)),
            "norms": self.norms,
            "knn_acc": self.knn_acc,
            "asr": {str(k): v for k, v in sorted(self.asr.items())},
            "main_acc": {str(k): v for k, v in sorted(self.main_acc.items())},
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RoundRecord":
        return cls(
            round=d["round"], phase=d["phase"], attack_round=d["attack_round"],
            selected=list(d["selected"]), weights=list(d["weights"]), norms=list(d["norms"]),
            knn_acc=d["knn_acc"],
            asr={int(k): v for k, v in d["asr"].items()},
            main_acc={int(k): v for k, v in d["main_acc"].items()},
            wall_time=d.get("wall_time", 0.0),
        )


@dataclass
class FederationState:
    params: ParamVector
    t: int = 0
    history: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)
    rng: RngStream = RngStream(0)

    def with_updates(self, params: ParamVector, updates: Sequence[ClientUpdate]) -> "FederationState":
        history = dict(self.history)
        counts = dict(self.counts)
        for u in updates:
            prev = history.get(u.client_id)
            history[u.client_id] = u.delta.values.copy() if prev is None else prev + u.delta.values
            counts[u.client_id] = counts.get(u.client_id, 0) + 1
        return FederationState(params, self.t + 1, history, counts, self.rng)


def select_clients(t: int, cfg: FederationConfig, attack_round: bool, rng: RngStream) -> list[int]:
    """All attackers (on attack rounds) plus uniformly drawn benign clients."""
    attackers = list(cfg.attacker_ids) if attack_round else []
    benign_pool = np.arange(cfg.n_attackers, cfg.n_clients)
    need = cfg.k - len(attackers)
    if need > benign_pool.size:
        raise FederationConfigError(f"round {t}: need {need} benign clients, only {benign_pool.size} exist")
    drawn = rng.child(_SELECT, t).generator().choice(benign_pool, size=need, replace=False)
    return attackers + sorted(int(c) for c in drawn)


def _order_key(item):
    u, _ = item
    return (u.client_id, u.round, u.delta.values.tobytes())


def aggregate(G: ParamVector, updates: Sequence, eta: float = 1.0, weights: Sequence[float] | None = None) -> ParamVector:
    """``G + eta/K * sum(w_i * delta_i)`` with K the number of updates.

    Updates are summed in a canonical order so the result does not depend on
    the order they arrive in.
    """
    updates = list(updates)
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    if weights is None:
        weights = np.ones(len(updates))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(updates),):
        raise ValueError(f"got {weights.size} weights for {len(updates)} updates")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("aggregation weights must be finite and >= 0")
    acc = np.zeros(len(G))
    for u, w in sorted(zip(updates, weights.tolist()), key=_order_key):
        G.check_layout(u.delta)
        acc += w * u.delta.values
    return G.with_values(G.values + (eta / len(updates)) * acc)


@dataclass
class Simulation:
    """Everything a run needs besides its mutable state."""

    arch: ModelArch
    fed: FederationConfig
    contrastive: ContrastiveConfig
    shards: Mapping[int, Dataset]
    attack: AttackConfig | None = None
    roster: Mapping[int, list[TargetSpec]] = field(default_factory=dict)
    attacker_data: Mapping[int, Dataset] = field(default_factory=dict)
    defense: DefenseSpec = DefenseSpec()
    evaluator: Callable[[ParamVector], EvalReport] | None = None
    aggregate_projector: bool = True

    def is_attack_round(self, attack_t: int | None) -> bool:
        return (
            attack_t is not None and self.attack is not None and self.fed.n_attackers > 0
            and self.attack.schedule.is_attack_round(attack_t)
        )


def drop_projector(delta: ParamVector) -> ParamVector:
    """Zero every projector coordinate, leaving only the encoder part."""
    v = delta.values.copy()
    for name, _ in delta.layout:
        if name.startswith("proj."):
            start, shape = delta._offsets[name]
            v[start:start + int(np.prod(shape))] = 0.0
    return delta.with_values(v)


def _train_client(sim: Simulation, state: FederationState, client: int, attack_round: bool) -> ClientUpdate:
    rng = state.rng.child(_TRAIN, state.t, client)
    G = state.params
    try:
        if attack_round and client in sim.roster:
            data = sim.attacker_data.get(client, sim.shards[client])
            update = malicious_local_train(G, sim.arch, data, sim.roster[client], sim.attack, rng, client, state.t)
            if sim.attack.schedule.scaled:
                update = scale_update(update, sim.attack.gamma)
            return update
        return benign_local_train(G, sim.arch, sim.shards[client], sim.contrastive, rng, client, state.t)
    except Exception as exc:
        raise ClientTaskError(state.t, client, exc) from exc


def run_round(state: FederationState, sim: Simulation, attack_t: int | None = None,
              pool: ThreadPoolExecutor | None = None) -> tuple[FederationState, RoundRecord]:
    """One round of selection, local training, defense and aggregation.

    ``attack_t`` is the round index within the attack phase, or None while
    pretraining (attackers are never selected then).
    """
    start = time.perf_counter()
    attack_round = sim.is_attack_round(attack_t)
    selected = select_clients(state.t, sim.fed, attack_round, state.rng)
    if pool is not None:
        updates = list(pool.map(lambda c: _train_client(sim, state, c, attack_round), selected))
    else:
        updates = [_train_client(sim, state, c, attack_round) for c in selected]
    if not sim.aggregate_projector:
        updates = [replace(u, delta=drop_projector(u.delta)) for u in updates]

    new_state = state.with_updates(state.params, updates)
    submitted: list[SubmittedUpdate] = [u.submit() for u in updates]
    transformed, weights = apply_defense(sim.defense, submitted, new_state.history,
                                         state.rng.child(_DEFENSE, state.t))
    new_state.params = aggregate(state.params, transformed, sim.fed.server_lr, weights)
    record = RoundRecord(
        round=state.t,
        phase="pretrain" if attack_t is None else "attack",
        attack_round=attack_round,
        selected=selected,
        weights=[float(w) for w in weights],
        norms=[u.l2 for u in updates],
        wall_time=time.perf_counter() - start,
    )
    return new_state, record


def initial_state(sim: Simulation) -> FederationState:
    root = RngStream(sim.fed.seed)
    return FederationState(sim.arch.init_params(root.child(0xA11CE)), rng=root)


def _plateaued(knn: list[float], window: int = 20, tol: float = 0.002) -> bool:
    return len(knn) >= window and max(knn[-window:]) - min(knn[-window:]) < tol


@dataclass
class History:
    records: list[RoundRecord]
    final_state: FederationState
    pretrained: FederationState


def pretrain(sim: Simulation, state: FederationState | None = None,
             pool: ThreadPoolExecutor | None = None, records: list | None = None) -> FederationState:
    """Benign-only rounds that initialize the global encoder."""
    state = state or initial_state(sim)
    knn_trace: list[float] = []
    for _ in range(sim.fed.pretrain_rounds):
        state, rec = run_round(state, sim, None, pool)
        if sim.evaluator is not None and (state.t % sim.fed.eval_every == 0 or sim.fed.early_stop):
            rep = sim.evaluator(state.params, probes=False)
            rec.knn_acc = rep.knn_acc
            if rep.knn_acc is not None:
                knn_trace.append(rep.knn_acc)
        if records is not None:
            records.append(rec)
        if sim.fed.early_stop and _plateaued(knn_trace):
            log.info("pretraining stopped at round %d: KNN accuracy plateaued", state.t)
            break
    return state


def run_experiment(sim: Simulation, pretrained: FederationState | None = None) -> History:
    """Pretraining followed by ``fed.rounds`` attack-phase rounds.

    Pass ``pretrained`` to reuse a pretraining result (its records are then
    not repeated in the returned history).
    """
    records: list[RoundRecord] = []
    pool = ThreadPoolExecutor(sim.fed.threads) if sim.fed.threads > 1 else None
    try:
        if pretrained is None:
            pretrained = pretrain(sim, pool=pool, records=records)
        state = pretrained
        for attack_t in range(sim.fed.rounds):
            state, rec = run_round(state, sim, attack_t, pool)
            last = attack_t == sim.fed.rounds - 1
            if sim.evaluator is not None and ((attack_t + 1) % sim.fed.eval_every == 0 or last):
                rep = sim.evaluator(state.params)
                rec.knn_acc, rec.asr, rec.main_acc = rep.knn_acc, rep.asr, rep.main_acc
            records.append(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return History(records, state, pretrained)
