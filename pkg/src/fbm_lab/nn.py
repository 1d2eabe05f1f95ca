"""Small network building blocks over :mod:`fbm_lab.autodiff`."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter


class Module:
    """Anything holding named parameters and sub-modules."""

    def parameters(self) -> list[Parameter]:
        out = []
        seen = set()
        for p in self._walk():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def _walk(self):
        out = []
        for value in vars(self).values():
            if isinstance(value, Parameter):
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for v in value:
                    if isinstance(v, Module):
                        out.extend(v.parameters())
                    elif isinstance(v, Parameter):
                        out.append(v)
        return out

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.trainable = flag
            p.requires_grad = flag


class Linear(Module):
    def __init__(self, rng, n_in, n_out, name, bias=True, scale=None):
        # PyTorch-style uniform fan-in init
        bound = 1.0 / np.sqrt(n_in) if scale is None else scale
        self.W = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), f"{name}.W")
        self.b = Parameter(rng.uniform(-bound, bound, size=n_out), f"{name}.b") if bias else None

    def __call__(self, x):
        return ad.linear(x, self.W, self.b)


class InputNorm(Module):
    """First-layer normalisation: RMS norm with gain, or full LayerNorm."""

    def __init__(self, dim, name, kind="rms"):
        self.kind = kind
        self.gain = Parameter(np.ones(dim), f"{name}.gain")
        if kind == "layer":
            self.bias = Parameter(np.zeros(dim), f"{name}.bias")
        elif kind != "rms":
            raise ValueError(f"unknown norm kind {kind!r}")

    def __call__(self, x):
        if self.kind == "rms":
            return ad.rms_norm(x, self.gain)
        return ad.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """linear -> norm -> tanh, then ReLU hidden layers, then a linear head.

    ``dims`` are the hidden widths; the first hidden layer is the
    normalised one.  An empty ``dims`` gives a single linear map.
    """

    def __init__(self, rng, n_in, dims, n_out, name, norm="rms"):
        self.layers = []
        self.norm = None
        prev = n_in
        for i, h in enumerate(dims):
            self.layers.append(Linear(rng, prev, h, f"{name}.l{i}"))
            if i == 0:
                self.norm = InputNorm(h, f"{name}.norm", norm)
            prev = h
        self.head = Linear(rng, prev, n_out, f"{name}.out")

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            x = ad.tanh(self.norm(x)) if i == 0 else ad.relu(x)
        return self.head(x)


class Preprocessor(Module):
    """One-layer embedding: linear -> norm -> tanh."""

    def __init__(self, rng, n_in, n_out, name, norm="rms"):
        self.lin = Linear(rng, n_in, n_out, f"{name}.lin")
        self.norm = InputNorm(n_out, f"{name}.norm", norm)

    def __call__(self, x):
        return ad.tanh(self.norm(self.lin(x)))


def copy_params(dst: Module, src: Module):
    for d, s in zip(dst.parameters(), src.parameters()):
        d.data = s.data.copy()
