"""Parameter containers for fully connected networks built on :mod:`ald.autodiff`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Anything that owns named parameter tensors."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ad.DimensionError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data[...] = value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` of shape (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, *,
                 weight_std: float | None = None, bias_std: float = 0.0, bias: bool = True):
        std = np.sqrt(2.0 / n_in) if weight_std is None else weight_std
        self.weight = Tensor(rng.standard_normal((n_in, n_out)) * std, requires_grad=True)
        self.bias = Tensor(rng.standard_normal(n_out) * bias_std, requires_grad=True) if bias else None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, width: int, gain: float = 1.0):
        self.gain = Tensor(np.full(width, float(gain)), requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


@dataclass
class MLPSpec:
    """Architecture of a fully connected network.

    ``layer_norm`` inserts a layer normalization before each hidden
    activation.  ``output_layer_norm`` normalizes the last hidden
    representation once more right before the output layer (used by the
    encoder feature extractor to keep its feature matrix well conditioned).
    """

    n_in: int
    hidden: Sequence[int]
    n_out: int
    activation: str = "relu"
    layer_norm: bool = False
    output_layer_norm: bool = False
    output_activation: bool = False
    weight_std: float | None = None
    bias_std: float = 0.0
    output_gain: float = 1.0
    extra: dict = field(default_factory=dict)


class MLP(Module):
    """Feed-forward network described by an :class:`MLPSpec`.

    With ``weight_std=None`` weights use He scaling ``N(0, 2/fan_in)``;
    otherwise every weight is drawn with that fixed standard deviation.
    """

    def __init__(self, spec: MLPSpec, rng: np.random.Generator):
        self.spec = spec
        widths = [spec.n_in, *spec.hidden, spec.n_out]
        self.layers = [
            Linear(a, b, rng, weight_std=spec.weight_std, bias_std=spec.bias_std)
            for a, b in zip(widths[:-1], widths[1:])
        ]
        self.norms = [LayerNorm(w) for w in spec.hidden] if spec.layer_norm else []
        self.out_norm = LayerNorm(widths[-2], spec.output_gain) if spec.output_layer_norm else None

    def __call__(self, x) -> Tensor:
        act = ad.ELEMENTWISE[self.spec.activation]
        h = x
        for i, layer in enumerate(self.layers[:-1]):
            h = layer(h)
            if self.norms:
                h = self.norms[i](h)
            h = act(h)
        if self.out_norm is not None:
            h = self.out_norm(h)
        h = self.layers[-1](h)
        return act(h) if self.spec.output_activation else h
