"""Tiny dense encoder + projector with hand-written backpropagation.

All weights live in one :class:`ParamVector`. Tensor names are
``enc.<i>.W`` / ``enc.<i>.b`` for the encoder and ``proj.<i>.*`` for the
projector, so aggregation and defenses can treat the model as a flat vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import LayoutError, ParamVector, RngStream

ACTIVATIONS = ("relu", "linear")


@dataclass(frozen=True)
class Dense:
    out: int
    activation: str = "relu"

    def __post_init__(self):
        if self.out < 1:
            raise ValueError("layer width must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ModelArch:
    input_shape: tuple[int, int, int]
    encoder: tuple[Dense, ...]
    projector: tuple[Dense, ...]

    def __post_init__(self):
        if not self.encoder or not self.projector:
            raise ValueError("encoder and projector need at least one layer each")
        if self.d_h < 2 or self.d_z < 2:
            raise ValueError("feature and projection dims must be >= 2")

    @classmethod
    def default(cls, input_shape=(3, 16, 16), hidden=128, d_h=64, proj_hidden=64, d_z=32) -> "ModelArch":
        return cls(
            tuple(input_shape),
            (Dense(hidden, "relu"), Dense(d_h, "linear")),
            (Dense(proj_hidden, "relu"), Dense(d_z, "linear")),
        )

    @property
    def d_in(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def d_h(self) -> int:
        return self.encoder[-1].out

    @property
    def d_z(self) -> int:
        return self.projector[-1].out

    def _stack(self, prefix: str):
        layers = self.encoder if prefix == "enc" else self.projector
        fan_in = self.d_in if prefix == "enc" else self.d_h
        for i, layer in enumerate(layers):
            yield f"{prefix}.{i}", fan_in, layer
            fan_in = layer.out

    def layout(self):
        out = []
        for prefix in ("enc", "proj"):
            for name, fan_in, layer in self._stack(prefix):
                out.append((f"{name}.W", (fan_in, layer.out)))
                out.append((f"{name}.b", (layer.out,)))
        return tuple(out)

    def init_params(self, rng: RngStream) -> ParamVector:
        """He-normal weights, zero biases."""
        gen = rng.generator()
        chunks = []
        for name, shape in self.layout():
            if name.endswith(".W"):
                chunks.append(gen.standard_normal(shape).ravel() * np.sqrt(2.0 / shape[0]))
            else:
                chunks.append(np.zeros(shape))
        return ParamVector(np.concatenate(chunks), self.layout())

    def check(self, params: ParamVector) -> None:
        if params.layout != self.layout():
            raise LayoutError("parameter layout does not match model architecture")


def _flatten(arch: ModelArch, batch) -> np.ndarray:
    x = getattr(batch, "pixels", batch)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] == tuple(arch.input_shape):
        return x.reshape(x.shape[0], -1)
    if x.ndim == 2 and x.shape[1] == arch.d_in:
        return x
    raise LayoutError(f"input of shape {x.shape} does not match model input {arch.input_shape}")


def _forward(params: ParamVector, arch: ModelArch, prefix: str, x: np.ndarray):
    cache = []
    for name, _, layer in arch._stack(prefix):
        pre = x @ params.tensor(f"{name}.W") + params.tensor(f"{name}.b")
        cache.append((x, pre))
        x = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return x, cache


def _backward(params, arch, prefix, cache, grad_out, grad: np.ndarray, offsets) -> np.ndarray:
    g = grad_out
    stack = list(arch._stack(prefix))
    for (name, _, layer), (x, pre) in zip(reversed(stack), reversed(cache)):
        if layer.activation == "relu":
            g = g * (pre > 0)
        w_start, w_shape = offsets[f"{name}.W"]
        b_start, b_shape = offsets[f"{name}.b"]
        grad[w_start:w_start + w_shape[0] * w_shape[1]] += (x.T @ g).ravel()
        grad[b_start:b_start + b_shape[0]] += g.sum(axis=0)
        g = g @ params.tensor(f"{name}.W").T
    return g


class Tape:
    """Forward results kept for one backward pass through the model."""

    def __init__(self, params: ParamVector, arch: ModelArch):
        arch.check(params)
        self.params = params
        self.arch = arch
        self._enc_cache = None
        self._proj_cache = None

    def encode(self, batch) -> np.ndarray:
        h, self._enc_cache = _forward(self.params, self.arch, "enc", _flatten(self.arch, batch))
        return h

    def project(self, h: np.ndarray) -> np.ndarray:
        z, self._proj_cache = _forward(self.params, self.arch, "proj", h)
        return z

    def backward(self, grad_h: np.ndarray | None = None, grad_z: np.ndarray | None = None) -> ParamVector:
        """Gradient w.r.t. all parameters given upstream grads on h and/or z."""
        grad = np.zeros(len(self.params))
        offsets = self.params._offsets
        total_h = None if grad_h is None else np.array(grad_h, dtype=np.float64)
        if grad_z is not None:
            gh = _backward(self.params, self.arch, "proj", self._proj_cache, grad_z, grad, offsets)
            total_h = gh if total_h is None else total_h + gh
        if total_h is not None:
            _backward(self.params, self.arch, "enc", self._enc_cache, total_h, grad, offsets)
        return self.params.with_values(grad)


def encode(params: ParamVector, arch: ModelArch, batch) -> np.ndarray:
    """Encoder features h, one row per input image."""
    arch.check(params)
    return _forward(params, arch, "enc", _flatten(arch, batch))[0]


def project(params: ParamVector, arch: ModelArch, h: np.ndarray) -> np.ndarray:
    arch.check(params)
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if h.shape[1] != arch.d_h:
        raise LayoutError(f"features of width {h.shape[1]} do not match d_h={arch.d_h}")
    return _forward(params, arch, "proj", h)[0]
