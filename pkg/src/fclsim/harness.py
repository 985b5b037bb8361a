"""Turns an :class:`ExperimentConfig` into a simulation, runs it, and
persists manifest, per-round JSONL, CSV summaries and PNG figures."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, Schedule, TargetSpec, build_attacker_roster
from .config import ConfigError, ExperimentConfig
from .contrastive import ContrastiveConfig
from .data import AugmentPolicy, Dataset, PartitionMode, default_trigger, generate_synthetic, load_dataset, partition
from .defense import DefenseSpec
from .evaluation import DownstreamTask, Evaluator, ProbeConfig, cosine_similarities, empirical_cdf
from .federation import FederationConfig, FederationState, History, RoundRecord, Simulation, run_experiment
from .model import ModelArch
from .numcore import RngStream

log = logging.getLogger(__name__)

THREADS_ENV = "FCLSIM_THREADS"

# purposes for deriving data seeds from the root seed
_POOL, _PARTITION, _TASK, _MONITOR, _FOREIGN = 11, 12, 13, 14, 15

OUTPUT_FILES = ("manifest.json", "config.txt", "rounds.jsonl", "summary.csv", "timeseries.csv", "cdf.csv")
FIGURES = ("timeseries.png", "cdf.png")


class HarnessError(RuntimeError):
    pass


def _subseed(root: RngStream, *keys: int) -> int:
    return int(root.child(*keys).generator().integers(2 ** 63))


@dataclass
class Scenario:
    cfg: ExperimentConfig
    sim: Simulation
    tasks: list[DownstreamTask]
    targets: list[TargetSpec]


def effective_threads(requested: int) -> int:
    cap = os.environ.get(THREADS_ENV)
    if cap is None or cap == "":
        return requested
    try:
        n = int(cap)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {cap!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {cap!r}")
    return min(requested, n)


def _closest_to_mean(ds: Dataset, n: int) -> Dataset:
    flat = ds.pixels.reshape(len(ds), -1)
    dist = ((flat - flat.mean(axis=0)) ** 2).sum(axis=1)
    return ds.subset(np.argsort(dist, kind="stable")[:n])


def _load(path: str, what: str) -> Dataset:
    try:
        return load_dataset(path)
    except OSError as exc:
        raise HarnessError(f"cannot read {what} {path}: {exc}") from None


def _synthetic(cfg: ExperimentConfig, n_per_class: int, seed: int, world: int | None = None) -> Dataset:
    return generate_synthetic(
        cfg["data.n_classes"], n_per_class, tuple(cfg["data.shape"]), cfg["data.class_separation"],
        cfg["data.noise"], seed=seed, template_seed=cfg["data.world_seed"] if world is None else world)


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    """Generate or load all data and wire up a :class:`Simulation`."""
    root = RngStream(cfg["run.seed"])
    n_targets = cfg.n_targets

    if cfg["data.source"] == "file":
        pool = _load(cfg["data.path"], "client data")
    else:
        pool = _synthetic(cfg, cfg["data.n_per_class"], _subseed(root, _POOL))
    shape = pool.shape
    n_clients = cfg["federation.n_clients"]
    mode = PartitionMode(cfg["data.partition"], cfg["data.alpha"])
    if mode.kind == "dirichlet" and not pool.labeled:
        raise HarnessError("a dirichlet partition needs a labeled client dataset")
    parts = partition(pool, n_clients, mode, seed=_subseed(root, _PARTITION))
    shards = {c: pool.subset(ix).unlabeled() for c, ix in parts.items()}

    if cfg["data.task_paths"]:
        task_sets = [_load(p, "task data") for p in cfg["data.task_paths"]]
        if len(task_sets) < n_targets:
            raise HarnessError(f"{n_targets} targets but only {len(task_sets)} task datasets")
    else:
        task_sets = [_synthetic(cfg, cfg["data.task_n_per_class"], _subseed(root, _TASK, i)) for i in range(n_targets)]

    side = cfg["attack.trigger_side"] or None
    tasks, targets = [], []
    for i, target_class in enumerate(cfg["attack.target_classes"]):
        ds = task_sets[i]
        if not ds.labeled:
            raise HarnessError(f"task dataset {i} has no labels")
        train, test = ds.split(cfg["data.task_train_fraction"])
        trigger = default_trigger(ds.shape, i, cfg["attack.trigger_corners"][i], side=side)
        cls = train.of_class(target_class)
        if len(cls) == 0:
            raise HarnessError(f"task {i} has no training examples of target class {target_class}")
        targets.append(TargetSpec(i, target_class, trigger, _closest_to_mean(cls, cfg["attack.n_references"])))
        tasks.append(DownstreamTask(i, train, test, target_class, trigger))

    if cfg["data.source"] == "file" or cfg["data.task_paths"]:
        bank, queries = tasks[0].train, tasks[0].test
    else:
        mon = _synthetic(cfg, cfg["data.monitor_n_per_class"], _subseed(root, _MONITOR))
        bank, queries = mon.split(2 / 3)

    n_att = cfg["federation.n_attackers"]
    roster = build_attacker_roster(cfg["attack.mode"], n_att, targets) if n_att else {}
    attacker_data = {}
    if n_att and cfg["data.attacker_source"] == "foreign":
        for a in range(n_att):
            attacker_data[a] = _synthetic(cfg, cfg["data.foreign_n_per_class"], _subseed(root, _FOREIGN, a),
                                          world=cfg["data.foreign_world_seed"]).unlabeled()

    augment = AugmentPolicy()
    if cfg["contrastive.augment"]:
        augment = AugmentPolicy(
            crop_scale=(cfg["contrastive.crop_min_area"], 1.0) if cfg["contrastive.crop_min_area"] < 1 else None,
            flip=cfg["contrastive.flip"], noise_sigma=cfg["contrastive.pixel_noise"],
            brightness=cfg["contrastive.brightness"])
    contrastive = ContrastiveConfig(
        temperature=cfg["contrastive.temperature"], batch_size=cfg["contrastive.batch_size"],
        local_epochs=cfg["contrastive.local_epochs"], learning_rate=cfg["contrastive.learning_rate"],
        augment=augment)
    attack = AttackConfig(
        lambdas=(cfg["attack.lambda1"], cfg["attack.lambda2"], cfg["attack.lambda3"]),
        malicious_local_epochs=cfg["attack.local_epochs"], learning_rate=cfg["attack.learning_rate"],
        gamma=cfg["attack.gamma"], schedule=Schedule(cfg["attack.schedule"], cfg["attack.period"]),
        batch_size=cfg["attack.batch_size"])
    clip = cfg["defense.clip_threshold"]
    sigma = cfg["defense.noise_sigma"]
    defense = DefenseSpec(cfg["defense.kind"], None if clip == "median" else clip,
                          None if sigma == "auto" else sigma, cfg["defense.noise_rel"], cfg["defense.epsilon"])
    fed = FederationConfig(
        n_clients=n_clients, k=cfg["federation.k"], server_lr=cfg["federation.server_lr"],
        rounds=cfg["federation.rounds"], pretrain_rounds=cfg["federation.pretrain_rounds"],
        n_attackers=n_att, seed=cfg["run.seed"], eval_every=cfg["federation.eval_every"],
        threads=effective_threads(cfg["run.threads"]), early_stop=cfg["federation.early_stop"])
    probe = ProbeConfig(
        epochs=cfg["eval.probe_epochs"], learning_rate=cfg["eval.probe_lr"], l2=cfg["eval.probe_l2"],
        knn_k=cfg["eval.knn_k"], knn_tau=cfg["eval.knn_tau"], normalize=cfg["eval.normalize_features"],
        asr_include_target=cfg["eval.asr_include_target"])
    arch = ModelArch.default(shape)
    sim = Simulation(arch, fed, contrastive, shards, attack, roster, attacker_data, defense,
                     Evaluator(arch, tasks, bank, queries, probe), cfg["federation.aggregate_projector"])
    return Scenario(cfg, sim, tasks, targets)


# keys that can change without changing the benign pretraining phase
_ATTACK_ONLY = ("attack.", "defense.", "data.attacker_source", "data.foreign_", "federation.rounds",
                "eval.", "run.")


def pretrain_key(cfg: ExperimentConfig) -> str:
    """Identifies configs that share the same pretraining result.

    Attack settings are excluded except for the attacker count and the
    target list, which determine the benign pool and the data.
    """
    keep = {k: v for k, v in cfg.semantic_dict().items()
            if not k.startswith(_ATTACK_ONLY) or k in ("attack.target_classes", "attack.trigger_side",
                                                       "attack.trigger_corners", "run.seed")}
    return json.dumps({k: str(v) for k, v in keep.items()}, sort_keys=True)


# persistence -----------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    started: str
    finished: str
    seed: int
    files: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


@dataclass
class RunResult:
    manifest: RunManifest
    history: History
    summary: list[dict]
    cdf: list[dict]
    out_dir: Path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _final_eval(records: list[RoundRecord]) -> RoundRecord | None:
    evaluated = [r for r in records if r.asr or r.main_acc]
    return evaluated[-1] if evaluated else None


def summary_rows(scn: Scenario, history: History) -> list[dict]:
    last = _final_eval(history.records)
    rows = []
    for task in scn.tasks:
        rows.append({
            "task_id": task.task_id,
            "target_class": task.target_class,
            "main_acc": last.main_acc.get(task.task_id) if last else None,
            "asr": last.asr.get(task.task_id) if last else None,
            "knn_acc": last.knn_acc if last else None,
            "round": last.round if last else None,
        })
    return rows


def cdf_rows(scn: Scenario, params, probe_size: int) -> list[dict]:
    """Cosine similarity of triggered and clean test features to each target's first reference."""
    rows = []
    arch = scn.sim.arch
    for task, target in zip(scn.tasks, scn.targets):
        probe = task.test.pixels[:probe_size]
        ref = target.references.pixels[0]
        for kind, trig in (("triggered", target.trigger), ("clean", None)):
            for value, frac in empirical_cdf(cosine_similarities(params, arch, ref, probe, trig)):
                rows.append({"task_id": task.task_id, "kind": kind, "cosine": float(value), "cdf": float(frac)})
    return rows


def timeseries_rows(records: list[RoundRecord]) -> list[dict]:
    rows = []
    for r in records:
        if not (r.asr or r.main_acc):
            continue
        for tid in sorted(r.asr):
            rows.append({"round": r.round, "phase": r.phase, "attack_round": int(r.attack_round),
                         "task_id": tid, "asr": r.asr[tid], "main_acc": r.main_acc.get(tid), "knn_acc": r.knn_acc})
    return rows


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row[k] is None else row[k]) for k in columns})


def _num(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _num(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def read_rounds(path) -> list[RoundRecord]:
    with open(path) as fh:
        return [RoundRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def read_manifest(path) -> RunManifest:
    return RunManifest.from_json(Path(path).read_text())


def strip_timing(line: str) -> str:
    d = json.loads(line)
    d.pop("wall_time", None)
    return json.dumps(d, sort_keys=True)


def _plot(out: Path, ts: list[dict], cdf: list[dict]) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    fig, (ax_asr, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for tid in sorted({r["task_id"] for r in ts}):
        pts = [r for r in ts if r["task_id"] == tid]
        xs = [r["round"] for r in pts]
        ax_asr.plot(xs, [r["asr"] for r in pts], marker="o", ms=3, label=f"task {tid}")
        ax_acc.plot(xs, [r["main_acc"] for r in pts], marker="o", ms=3, label=f"task {tid}")
    for ax, name in ((ax_asr, "attack success rate"), (ax_acc, "main accuracy")):
        ax.set_xlabel("round")
        ax.set_ylabel(name)
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
        if ts:
            ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "timeseries.png", dpi=100)
    plt.close(fig)
    written.append("timeseries.png")

    fig, ax = plt.subplots(figsize=(5, 4))
    for (tid, kind) in sorted({(r["task_id"], r["kind"]) for r in cdf}):
        pts = [r for r in cdf if r["task_id"] == tid and r["kind"] == kind]
        ax.step([r["cosine"] for r in pts], [r["cdf"] for r in pts], where="post",
                linestyle="-" if kind == "triggered" else "--", label=f"task {tid} {kind}")
    ax.set_xlabel("cosine similarity to reference")
    ax.set_ylabel("CDF")
    ax.grid(alpha=0.3)
    if cdf:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "cdf.png", dpi=100)
    plt.close(fig)
    written.append("cdf.png")
    return written


def run(cfg: ExperimentConfig, out: str | Path | None = None, *,
        pretrained: FederationState | None = None, plots: bool = True) -> RunResult:
    """Run one experiment and write its artifacts into ``out`` (default ``run.out``)."""
    out_dir = Path(out or cfg["run.out"] or "runs/custom")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise HarnessError(f"cannot create output directory {out_dir}: {exc}") from None
    started = _now()
    scn = build_scenario(cfg)
    history = run_experiment(scn.sim, pretrained=pretrained)

    summary = summary_rows(scn, history)
    cdf = cdf_rows(scn, history.final_state.params, cfg["eval.cdf_probe_size"])
    ts = timeseries_rows(history.records)
    try:
        with open(out_dir / "rounds.jsonl", "w") as fh:
            for rec in history.records:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
        _write_csv(out_dir / "summary.csv", summary,
                   ["task_id", "target_class", "main_acc", "asr", "knn_acc", "round"])
        _write_csv(out_dir / "timeseries.csv", ts,
                   ["round", "phase", "attack_round", "task_id", "asr", "main_acc", "knn_acc"])
        _write_csv(out_dir / "cdf.csv", cdf, ["task_id", "kind", "cosine", "cdf"])
        files = list(OUTPUT_FILES)
        if plots:
            files += _plot(out_dir, ts, cdf)
        manifest = RunManifest(cfg.hash(), __version__, started, _now(), cfg["run.seed"], files,
                               {k: str(v) if isinstance(v, tuple) else v for k, v in cfg.values.items()})
        (out_dir / "manifest.json").write_text(manifest.to_json())
        (out_dir / "config.txt").write_text(cfg.to_text())
    except OSError as exc:
        raise HarnessError(f"failed writing results to {out_dir}: {exc}") from None
    return RunResult(manifest, history, summary, cdf, out_dir)
