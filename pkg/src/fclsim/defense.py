"""Server-side defenses: FoolsGold reweighting and Clip & Noise.

Both operate on :class:`SubmittedUpdate` objects, which carry no ground
truth about whether a client is malicious.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .numcore import RngStream
from .updates import SubmittedUpdate

KINDS = ("none", "foolsgold", "clip_noise")


class DefenseConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DefenseSpec:
    """``clip_threshold=None`` clips at the median norm of the round;
    ``noise_sigma=None`` uses ``noise_rel`` times the threshold."""

    kind: str = "none"
    clip_threshold: float | None = None
    noise_sigma: float | None = None
    noise_rel: float = 1e-3
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DefenseConfigError(f"unknown defense {self.kind!r}; expected one of {KINDS}")
        if self.clip_threshold is not None and self.clip_threshold <= 0:
            raise DefenseConfigError("clip_threshold must be > 0")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise DefenseConfigError("noise_sigma must be >= 0")
        if self.noise_rel < 0:
            raise DefenseConfigError("noise_rel must be >= 0")
        if self.epsilon <= 0:
            raise DefenseConfigError("epsilon must be > 0")


def foolsgold_weights(histories: Sequence[np.ndarray] | np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
    """FoolsGold weights in [0, 1] from per-client cumulative update vectors.

    Clients whose history points the same way as some peer's are pushed to
    zero; mutually dissimilar clients keep weight 1. A zero history gets
    weight 1 and takes no part in the similarity computation.
    """
    hist = np.atleast_2d(np.asarray(histories, dtype=np.float64))
    n = hist.shape[0]
    weights = np.ones(n)
    norms = np.sqrt(np.einsum("ij,ij->i", hist, hist))
    live = np.flatnonzero(norms > 0)
    if live.size < 2:
        return weights

    unit = hist[live] / norms[live, None]
    cs = np.clip(unit @ unit.T, -1.0, 1.0) - np.eye(live.size)
    maxcs = cs.max(axis=1)
    # pardoning: soften similarity to a peer that is itself more suspicious
    for i in range(live.size):
        for j in range(live.size):
            if i != j and maxcs[i] < maxcs[j]:
                cs[i, j] *= maxcs[i] / maxcs[j]
    wv = np.clip(1.0 - cs.max(axis=1), 0.0, 1.0)
    top = wv.max()
    if top <= 0:
        weights[live] = 0.0
        return weights
    wv = wv / top
    wv[wv >= 1.0] = 0.99
    with np.errstate(divide="ignore"):
        wv = np.log(wv / (1.0 - wv) + epsilon) + 0.5
    wv = np.where(np.isfinite(wv), wv, 0.0)
    weights[live] = np.clip(wv, 0.0, 1.0)
    return weights


def clip_and_noise(
    updates: Sequence[SubmittedUpdate],
    threshold: float,
    sigma: float,
    rng: RngStream,
) -> list[SubmittedUpdate]:
    """Clip every update to L2 norm ``threshold`` then add N(0, sigma^2) noise."""
    if threshold <= 0:
        raise DefenseConfigError("threshold must be > 0")
    if sigma < 0:
        raise DefenseConfigError("sigma must be >= 0")
    gen = rng.generator()
    out = []
    for u in updates:
        v = u.delta.values
        # the slack keeps an already clipped update (norm off by an ulp) fixed
        if u.l2 > threshold * (1.0 + 1e-12):
            v = v * (threshold / u.l2)
        if sigma > 0:
            v = v + sigma * gen.standard_normal(v.shape)
        out.append(u.with_delta(u.delta.with_values(v)))
    return out


def apply_defense(
    spec: DefenseSpec,
    updates: Sequence[SubmittedUpdate],
    histories: Mapping[int, np.ndarray],
    rng: RngStream,
) -> tuple[list[SubmittedUpdate], np.ndarray]:
    """Transform a round's updates and pick aggregation weights.

    ``histories`` maps client id to its cumulative delta including this round.
    """
    updates = list(updates)
    if spec.kind == "none":
        return updates, np.ones(len(updates))
    if spec.kind == "foolsgold":
        hist = np.stack([histories[u.client_id] for u in updates])
        return updates, foolsgold_weights(hist, spec.epsilon)
    threshold = spec.clip_threshold
    if threshold is None:
        threshold = float(np.median([u.l2 for u in updates]))
        if threshold <= 0:
            return updates, np.ones(len(updates))
    sigma = spec.noise_sigma if spec.noise_sigma is not None else spec.noise_rel * threshold
    return clip_and_noise(updates, threshold, sigma, rng), np.ones(len(updates))
