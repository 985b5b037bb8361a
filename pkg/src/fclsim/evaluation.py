"""Frozen-encoder evaluation: weighted KNN, linear probe, attack success
rate and the triggered-vs-reference cosine-similarity CDF."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Example, Trigger, embed_trigger_pixels
from .model import ModelArch, encode
from .numcore import ParamVector, row_norms


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 500
    learning_rate: float = 0.5
    l2: float = 1e-4
    knn_k: int = 200
    knn_tau: float = 0.07
    batch_size: int = 512
    normalize: bool = True
    asr_include_target: bool = True

    def __post_init__(self):
        if self.knn_k < 1:
            raise EvalError("knn_k must be >= 1")
        if self.knn_tau <= 0:
            raise EvalError("knn_tau must be > 0")
        if self.epochs < 1 or self.learning_rate <= 0 or self.l2 < 0:
            raise EvalError("probe needs epochs >= 1, learning_rate > 0, l2 >= 0")


@dataclass
class EvalReport:
    main_acc: dict[int, float] = field(default_factory=dict)
    asr: dict[int, float] = field(default_factory=dict)
    knn_acc: float | None = None
    cdf: list[tuple[float, float]] = field(default_factory=list)


def features(params: ParamVector, arch: ModelArch, data, batch_size: int = 512) -> np.ndarray:
    x = getattr(data, "pixels", data)
    if len(x) == 0:
        return np.zeros((0, arch.d_h))
    return np.concatenate([encode(params, arch, x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def _unit(h: np.ndarray) -> np.ndarray:
    return h / row_norms(h, "feature")[:, None]


def knn_predict(bank_h, bank_labels, query_h, n_classes: int, k: int = 200, tau: float = 0.07) -> np.ndarray:
    """Weighted-vote KNN over cosine similarity.

    Neighbours are the k most similar bank rows (earlier rows win ties);
    each votes exp(sim / tau) for its label; class ties go to the lowest index.
    """
    if len(bank_h) == 0:
        raise EvalError("KNN bank is empty")
    k = min(k, len(bank_h))
    sims = _unit(query_h) @ _unit(bank_h).T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(sims, order, axis=1)
    votes = np.zeros((len(query_h), n_classes))
    rows = np.repeat(np.arange(len(query_h)), k)
    np.add.at(votes, (rows, bank_labels[order].ravel()), np.exp(top / tau).ravel())
    return np.argmax(votes, axis=1)


def knn_eval(params: ParamVector, arch: ModelArch, bank: Dataset, queries: Dataset,
             k: int = 200, tau: float = 0.07) -> float:
    if bank.labels is None or queries.labels is None:
        raise EvalError("KNN evaluation needs labeled bank and queries")
    if len(bank) == 0:
        raise EvalError("KNN bank is empty")
    n_classes = max(bank.n_classes or 0, queries.n_classes or 0)
    pred = knn_predict(features(params, arch, bank), bank.labels, features(params, arch, queries), n_classes, k, tau)
    return float(np.mean(pred == queries.labels))


@dataclass(frozen=True)
class LinearProbe:
    weights: np.ndarray
    bias: np.ndarray
    normalize: bool = True

    def logits(self, h: np.ndarray) -> np.ndarray:
        if self.normalize:
            h = _unit(h)
        return h @ self.weights + self.bias

    def predict(self, h: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(h), axis=1)


def fit_probe(h: np.ndarray, labels: np.ndarray, n_classes: int, cfg: ProbeConfig = ProbeConfig()) -> LinearProbe:
    """Multinomial logistic regression by full-batch gradient descent."""
    if len(np.unique(labels)) < 2:
        raise EvalError("linear probe needs at least two classes in its training data")
    x = _unit(h) if cfg.normalize else np.asarray(h, dtype=np.float64)
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[labels]
    for _ in range(cfg.epochs):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= cfg.learning_rate * (x.T @ g + cfg.l2 * w)
        b -= cfg.learning_rate * g.sum(axis=0)
    return LinearProbe(w, b, cfg.normalize)


def linear_probe(params: ParamVector, arch: ModelArch, train: Dataset, test: Dataset,
                 cfg: ProbeConfig = ProbeConfig()) -> tuple[float, LinearProbe]:
    """Train a probe on frozen features of ``train``; return (test accuracy, probe)."""
    if train.labels is None or test.labels is None:
        raise EvalError("linear probe needs labeled data")
    n_classes = max(train.n_classes or 0, test.n_classes or 0)
    probe = fit_probe(features(params, arch, train, cfg.batch_size), train.labels, n_classes, cfg)
    pred = probe.predict(features(params, arch, test, cfg.batch_size))
    return float(np.mean(pred == test.labels)), probe


def attack_success_rate(params: ParamVector, arch: ModelArch, probe: LinearProbe, test: Dataset,
                        trigger: Trigger, y_target: int, include_target: bool = True) -> float:
    """Fraction of trigger-stamped test images the probe assigns to ``y_target``."""
    x = test.pixels
    if not include_target and test.labels is not None:
        x = x[test.labels != y_target]
    if len(x) == 0:
        return 0.0
    pred = probe.predict(features(params, arch, embed_trigger_pixels(x, trigger)))
    return float(np.mean(pred == y_target))


def empirical_cdf(values) -> np.ndarray:
    """(value, cumulative fraction) rows, sorted ascending."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    return np.column_stack([v, np.arange(1, v.size + 1) / v.size])


def cosine_similarities(params: ParamVector, arch: ModelArch, reference: Example | np.ndarray,
                        probe_set, trigger: Trigger | None = None) -> np.ndarray:
    ref_px = getattr(reference, "pixels", reference)
    x = getattr(probe_set, "pixels", probe_set)
    if len(x) == 0:
        raise EvalError("probe set is empty")
    if trigger is not None:
        x = embed_trigger_pixels(x, trigger)
    ref = _unit(encode(params, arch, np.asarray(ref_px)[None]))[0]
    return np.clip(_unit(features(params, arch, x)) @ ref, -1.0, 1.0)


def cosine_cdf(params: ParamVector, arch: ModelArch, reference, probe_set,
               trigger: Trigger | None = None) -> np.ndarray:
    return empirical_cdf(cosine_similarities(params, arch, reference, probe_set, trigger))


@dataclass(frozen=True)
class DownstreamTask:
    """A labeled downstream dataset with the attacker's target on it."""

    task_id: int
    train: Dataset
    test: Dataset
    target_class: int
    trigger: Trigger


class Evaluator:
    """Evaluates a global model on the downstream tasks and a KNN monitor split."""

    def __init__(self, arch: ModelArch, tasks, monitor_bank: Dataset | None = None,
                 monitor_queries: Dataset | None = None, cfg: ProbeConfig = ProbeConfig()):
        self.arch = arch
        self.tasks = list(tasks)
        self.monitor_bank = monitor_bank
        self.monitor_queries = monitor_queries
        self.cfg = cfg

    def knn(self, params: ParamVector) -> float | None:
        if self.monitor_bank is None or self.monitor_queries is None:
            return None
        return knn_eval(params, self.arch, self.monitor_bank, self.monitor_queries, self.cfg.knn_k, self.cfg.knn_tau)

    def __call__(self, params: ParamVector, probes: bool = True) -> EvalReport:
        report = EvalReport(knn_acc=self.knn(params))
        if probes:
            for task in self.tasks:
                acc, probe = linear_probe(params, self.arch, task.train, task.test, self.cfg)
                report.main_acc[task.task_id] = acc
                report.asr[task.task_id] = attack_success_rate(
                    params, self.arch, probe, task.test, task.trigger, task.target_class,
                    self.cfg.asr_include_target)
        return report
