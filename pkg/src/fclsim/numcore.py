"""Flat parameter vectors, cosine similarity, finite-difference checking and
seeded random streams shared by the rest of the simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class LayoutError(ValueError):
    """Two parameter vectors (or a vector and a model) disagree on layout."""


class DegenerateInputError(ValueError):
    """A zero-norm vector reached an operation that needs a direction."""


class GradientCheckError(RuntimeError):
    pass


def _size(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape, dtype=np.int64)) if shape else 1


class ParamVector:
    """Immutable float64 vector plus the tensor layout it packs.

    The layout is an ordered tuple of ``(name, shape)`` pairs; tensors are
    stored back to back in that order.
    """

    __slots__ = ("values", "layout", "_offsets")

    def __init__(self, values, layout: Layout):
        arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in layout)
        total = sum(_size(s) for _, s in layout)
        if arr.size != total:
            raise LayoutError(f"vector has {arr.size} values but layout needs {total}")
        arr.flags.writeable = False
        self.values = arr
        self.layout = layout
        offsets = {}
        pos = 0
        for name, shape in layout:
            if name in offsets:
                raise LayoutError(f"duplicate tensor name {name!r} in layout")
            offsets[name] = (pos, shape)
            pos += _size(shape)
        self._offsets = offsets

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(sum(_size(s) for _, s in layout)), layout)

    @classmethod
    def _wrap(cls, arr: np.ndarray, like: "ParamVector") -> "ParamVector":
        # skips the copy and layout validation; arr must be fresh and sized
        obj = cls.__new__(cls)
        arr.flags.writeable = False
        obj.values = arr
        obj.layout = like.layout
        obj._offsets = like._offsets
        return obj

    def tensor(self, name: str) -> np.ndarray:
        """Read-only view of one named tensor."""
        start, shape = self._offsets[name]
        return self.values[start:start + _size(shape)].reshape(shape)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: self.tensor(name) for name, _ in self.layout}

    def with_values(self, values: np.ndarray) -> "ParamVector":
        arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if arr.size != self.values.size:
            raise LayoutError("replacement values do not match layout size")
        return ParamVector._wrap(arr, self)

    def check_layout(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise LayoutError("parameter layouts differ")

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        names = ", ".join(n for n, _ in self.layout)
        return f"ParamVector(n={self.values.size}, tensors=[{names}])"


@dataclass(frozen=True)
class GradResult:
    loss: float
    grad: ParamVector


def axpy_params(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``a * x + y``."""
    x.check_layout(y)
    return ParamVector._wrap(a * x.values + y.values, y)


def scale_params(a: float, x: ParamVector) -> ParamVector:
    return ParamVector._wrap(a * x.values, x)


def sub_params(x: ParamVector, y: ParamVector) -> ParamVector:
    x.check_layout(y)
    return ParamVector._wrap(x.values - y.values, x)


def l2_norm(x: ParamVector | np.ndarray) -> float:
    v = x.values if isinstance(x, ParamVector) else np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.dot(v.ravel(), v.ravel())))


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.size != v.size or u.size == 0:
        raise ValueError(f"cosine_sim needs equal non-empty lengths, got {u.size} and {v.size}")
    nu = math.sqrt(float(np.dot(u, u)))
    nv = math.sqrt(float(np.dot(v, v)))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    c = float(np.dot(u, v)) / (nu * nv)
    return min(1.0, max(-1.0, c))


def row_norms(m: np.ndarray, what: str = "row") -> np.ndarray:
    """Euclidean norms of the rows of ``m``; zero rows are an error."""
    n = np.sqrt(np.einsum("ij,ij->i", m, m))
    bad = np.flatnonzero(n == 0.0)
    if bad.size:
        raise DegenerateInputError(f"zero-norm {what} at index {int(bad[0])}")
    return n


def finite_diff_check(
    loss_fn: Callable[[ParamVector], float],
    params: ParamVector,
    analytic_grad: ParamVector,
    eps: float = 1e-6,
    n_probes: int = 20,
    rng: "RngStream | None" = None,
) -> float:
    """Compare ``analytic_grad`` against central differences on random coordinates.

    Returns the largest error relative to the numeric derivative; where that
    derivative is below 1e-8 in magnitude the absolute error is used instead.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    params.check_layout(analytic_grad)
    gen = (rng or RngStream(0, 0)).generator()
    n = len(params)
    coords = gen.choice(n, size=min(n_probes, n), replace=False) if n_probes < n else np.arange(n)
    worst = 0.0
    base = params.values
    for k in coords:
        k = int(k)
        plus = base.copy()
        plus[k] += eps
        minus = base.copy()
        minus[k] -= eps
        fp = loss_fn(params.with_values(plus))
        fm = loss_fn(params.with_values(minus))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise GradientCheckError(f"non-finite loss when probing coordinate {k}")
        numeric = (fp - fm) / (2.0 * eps)
        analytic = float(analytic_grad.values[k])
        err = abs(numeric - analytic)
        if abs(numeric) >= 1e-8:
            err /= abs(numeric)
        worst = max(worst, err)
    return worst


_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream identified by ``(seed, stream_id)``.

    Each call to :meth:`generator` restarts the stream from its beginning, so
    the stream object itself carries no mutable state.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & _MASK64, spawn_key=(self.stream_id & _MASK64,))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "RngStream":
        """Derive an independent stream for e.g. ``(purpose, round, client)``."""
        ss = np.random.SeedSequence(
            self.stream_id & _MASK64, spawn_key=tuple(int(k) & _MASK64 for k in keys)
        )
        sid = int(ss.generate_state(1, dtype=np.uint64)[0])
        return RngStream(self.seed, sid)


def as_matrix(rows: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.asarray(rows, dtype=np.float64))
