"""Data-independent weight initializers.

Every sampler is a pure function of ``(InitSpec, shape)``; the random stream
comes from ``numpy.random.default_rng(spec.seed)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from voxinit.autodiff import Tensor

SCHEMES = ("xavier_uniform", "xavier_normal", "kaiming_uniform", "kaiming_normal",
           "trunc_normal", "unetr_default")

# std of N(0, 1) truncated to [-2, 2]
TRUNC2_STD_FACTOR = 0.8796256610342398


class InitSpecError(ValueError):
    pass


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "unetr_default"
    gain: float = 1.0
    fan_in: int = 1
    fan_out: int = 1
    kernel_sizes: tuple[int, int, int] | None = None
    trunc_sigma: float = 0.02
    paper_literal_xavier: bool = False
    seed: int = 0

    def __post_init__(self):
        scheme = canonical_scheme(self.scheme)
        object.__setattr__(self, "scheme", scheme)
        if self.fan_in < 1 or self.fan_out < 1:
            raise InitSpecError(f"fan_in and fan_out must be >= 1, got {self.fan_in}, {self.fan_out}")
        if self.gain < 0:
            raise InitSpecError(f"gain must be non-negative, got {self.gain}")
        if self.trunc_sigma <= 0:
            raise InitSpecError(f"trunc_sigma must be positive, got {self.trunc_sigma}")
        if self.kernel_sizes is not None:
            ks = tuple(int(k) for k in self.kernel_sizes)
            if len(ks) != 3 or min(ks) < 1:
                raise InitSpecError(f"kernel_sizes must be 3 positive ints, got {self.kernel_sizes}")
            object.__setattr__(self, "kernel_sizes", ks)

    def with_layer(self, **kw) -> "InitSpec":
        return replace(self, **kw)


def canonical_scheme(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    if key not in SCHEMES:
        raise InitSpecError(f"unknown init scheme {name!r}; expected one of "
                            + ", ".join(s.replace("_", "-") for s in SCHEMES))
    return key


def _rng(spec: InitSpec) -> np.random.Generator:
    return np.random.default_rng(spec.seed)


def _uniform_open(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    w = rng.uniform(-bound, bound, size=shape)
    # uniform() is half-open; reject the single excluded endpoint
    edge = w == -bound
    while bound > 0 and edge.any():
        w[edge] = rng.uniform(-bound, bound, size=int(edge.sum()))
        edge = w == -bound
    return w


def xavier_uniform_bound(spec: InitSpec) -> float:
    total = spec.fan_in + spec.fan_out
    if spec.paper_literal_xavier:
        return 6.0 * math.sqrt(2.0 / total)
    return spec.gain * math.sqrt(6.0 / total)


def xavier_normal_std(spec: InitSpec) -> float:
    return spec.gain * math.sqrt(2.0 / (spec.fan_in + spec.fan_out))


def kaiming_uniform_bound(spec: InitSpec) -> float:
    return spec.gain * math.sqrt(3.0 / spec.fan_in)


def kaiming_normal_std(spec: InitSpec) -> float:
    return spec.gain / math.sqrt(spec.fan_in)


def unetr_default_bound(spec: InitSpec, layer_kind: str) -> float:
    """sqrt(sigma) with sigma = 1/(C * prod(ksize)) for conv, 1/C for linear."""
    if layer_kind == "conv":
        if spec.kernel_sizes is None:
            raise InitSpecError("unetr_default on a conv layer needs kernel_sizes")
        sigma = 1.0 / (spec.fan_in * math.prod(spec.kernel_sizes))
    elif layer_kind == "linear":
        sigma = 1.0 / spec.fan_in
    else:
        raise InitSpecError(f"layer_kind must be 'conv' or 'linear', got {layer_kind!r}")
    return math.sqrt(sigma)


def xavier_uniform(spec: InitSpec, shape: Sequence[int]) -> Tensor:
    return Tensor(_uniform_open(_rng(spec), xavier_uniform_bound(spec), tuple(shape)))


def xavier_normal(spec: InitSpec, shape: Sequence[int]) -> Tensor:
    return Tensor(_rng(spec).normal(0.0, xavier_normal_std(spec), size=tuple(shape)))


def kaiming_uniform(spec: InitSpec, shape: Sequence[int]) -> Tensor:
    return Tensor(_uniform_open(_rng(spec), kaiming_uniform_bound(spec), tuple(shape)))


def kaiming_normal(spec: InitSpec, shape: Sequence[int]) -> Tensor:
    return Tensor(_rng(spec).normal(0.0, kaiming_normal_std(spec), size=tuple(shape)))


def unetr_default(spec: InitSpec, shape: Sequence[int], layer_kind: str = "linear") -> Tensor:
    bound = unetr_default_bound(spec, layer_kind)
    return Tensor(_uniform_open(_rng(spec), bound, tuple(shape)))


def trunc_normal(spec: InitSpec, shape: Sequence[int]) -> Tensor:
    """N(0, trunc_sigma^2), out-of-range draws resampled until inside +-2 sigma."""
    rng = _rng(spec)
    sigma = spec.trunc_sigma
    limit = 2.0 * sigma
    w = rng.normal(0.0, sigma, size=tuple(shape))
    bad = np.abs(w) > limit
    while bad.any():
        w[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(w) > limit
    return Tensor(w)


def sample(spec: InitSpec, shape: Sequence[int], layer_kind: str = "linear") -> Tensor:
    """Dispatch on ``spec.scheme``."""
    if spec.scheme == "unetr_default":
        return unetr_default(spec, shape, layer_kind)
    return {
        "xavier_uniform": xavier_uniform,
        "xavier_normal": xavier_normal,
        "kaiming_uniform": kaiming_uniform,
        "kaiming_normal": kaiming_normal,
        "trunc_normal": trunc_normal,
    }[spec.scheme](spec, shape)


def layer_fans(shape: Sequence[int], layer_kind: str, transposed: bool = False) -> tuple[int, int, tuple | None]:
    """(fan_in, fan_out, kernel_sizes) for a weight tensor.

    Conv weights are [Cout, Cin, k0, k1, k2] ([Cin, Cout, ...] when
    ``transposed``); linear weights are [In, Out]. Receptive-field fans are
    channels times kernel volume.
    """
    if layer_kind == "linear":
        return int(shape[0]), int(shape[1]), None
    ks = tuple(int(k) for k in shape[2:])
    vol = math.prod(ks)
    c_in, c_out = (shape[0], shape[1]) if transposed else (shape[1], shape[0])
    return int(c_in) * vol, int(c_out) * vol, ks


def init_layer(spec: InitSpec, shape: Sequence[int], layer_kind: str, seed: int,
               transposed: bool = False) -> np.ndarray:
    """Sample one layer's weight with fans derived from its shape.

    ``unetr_default`` takes C as the plain input-channel count and multiplies
    in the kernel volume itself.
    """
    fan_in, fan_out, ks = layer_fans(shape, layer_kind, transposed)
    if spec.scheme == "unetr_default" and layer_kind == "conv":
        fan_in = int(shape[0] if transposed else shape[1])
    layer_spec = spec.with_layer(fan_in=fan_in, fan_out=fan_out, kernel_sizes=ks, seed=seed)
    return sample(layer_spec, shape, layer_kind).data
