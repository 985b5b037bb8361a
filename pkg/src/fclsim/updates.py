from __future__ import annotations

from dataclasses import dataclass, field, replace

from .numcore import ParamVector, l2_norm, scale_params

BENIGN = "benign"
MALICIOUS = "malicious"


@dataclass(frozen=True)
class ClientUpdate:
    """One client's model delta for one round.

    ``kind`` is ground truth kept for bookkeeping only; the server side sees
    :class:`SubmittedUpdate` objects, which do not carry it.
    """

    delta: ParamVector
    client_id: int
    round: int
    kind: str = BENIGN
    scaled: bool = False
    l2: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        if self.kind not in (BENIGN, MALICIOUS):
            raise ValueError(f"unknown update kind {self.kind!r}")
        object.__setattr__(self, "l2", l2_norm(self.delta))

    def scaled_by(self, gamma: float) -> "ClientUpdate":
        return replace(self, delta=scale_params(gamma, self.delta), scaled=True)

    def submit(self) -> "SubmittedUpdate":
        return SubmittedUpdate(self.delta, self.client_id, self.round)


@dataclass(frozen=True)
class SubmittedUpdate:
    """What the server receives: the delta and who sent it, nothing more."""

    delta: ParamVector
    client_id: int
    round: int
    l2: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "l2", l2_norm(self.delta))

    def with_delta(self, delta: ParamVector) -> "SubmittedUpdate":
        return SubmittedUpdate(delta, self.client_id, self.round)
