"""Dense Tanh MLP over a flat float64 parameter vector.

Parameters are stored layer by layer as ``W`` (in_dim x out_dim, row-major)
followed by ``b`` (out_dim). Hidden layers use tanh, the output layer is
affine. Besides the forward pass the module provides exact reverse-mode
parameter gradients (``grad_params``) and forward-mode directional
derivatives (``jvp``); together they are all the Fisher-vector product needs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an array does not fit the declared architecture."""


@dataclass(frozen=True)
class MlpArchitecture:
    layer_dims: tuple[int, ...]
    head_split: Optional[tuple[int, int]] = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError(f"need at least input and output dims, got {dims}")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer dims must be positive, got {dims}")
        if self.head_split is not None:
            p, q = (int(v) for v in self.head_split)
            object.__setattr__(self, "head_split", (p, q))
            if p + q != dims[-1]:
                raise ValueError(f"head split {p}+{q} != output width {dims[-1]}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    def slices(self) -> list[tuple[slice, slice, int, int]]:
        """(weight slice, bias slice, in_dim, out_dim) for every layer."""
        out = []
        pos = 0
        for i, o in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = slice(pos, pos + i * o)
            pos += i * o
            b = slice(pos, pos + o)
            pos += o
            out.append((w, b, i, o))
        return out


def _layers(arch: MlpArchitecture, params: np.ndarray):
    if params.ndim != 1 or params.shape[0] < arch.n_params:
        raise ShapeError(
            f"parameter vector of shape {params.shape} too short for {arch.n_params} params"
        )
    for ws, bs, i, o in arch.slices():
        yield params[ws].reshape(i, o), params[bs]


def _check_inputs(arch: MlpArchitecture, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != arch.in_dim:
        raise ShapeError(f"layer 0 expects input width {arch.in_dim}, got shape {x.shape}")
    return x


def init_params(arch: MlpArchitecture, rng: np.random.Generator, extra: int = 0,
                extra_value: float = 0.0) -> np.ndarray:
    """Glorot-uniform weights, zero biases, plus ``extra`` trailing scalars."""
    theta = np.zeros(arch.n_params + extra)
    for ws, _, i, o in arch.slices():
        limit = np.sqrt(6.0 / (i + o))
        theta[ws] = rng.uniform(-limit, limit, size=i * o)
    theta[arch.n_params:] = extra_value
    return theta


def forward_cached(arch: MlpArchitecture, params: np.ndarray, inputs: np.ndarray):
    """Forward pass returning the output and the per-layer inputs/activations."""
    x = _check_inputs(arch, inputs)
    acts = [x]
    h = x
    layers = list(_layers(arch, params))
    for n, (W, b) in enumerate(layers):
        z = h @ W + b
        h = np.tanh(z) if n < len(layers) - 1 else z
        acts.append(h)
    return h, acts


def forward(arch: MlpArchitecture, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    return forward_cached(arch, params, inputs)[0]


def backward(arch: MlpArchitecture, params: np.ndarray, acts: Sequence[np.ndarray],
             cotangents: np.ndarray) -> np.ndarray:
    """Reverse pass over activations produced by :func:`forward_cached`."""
    g = np.asarray(cotangents, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != acts[-1].shape:
        raise ShapeError(
            f"layer {arch.n_layers - 1} output cotangent shape {g.shape} != {acts[-1].shape}"
        )
    grad = np.zeros(arch.n_params)
    layers = list(_layers(arch, params))
    slices = arch.slices()
    for n in range(arch.n_layers - 1, -1, -1):
        W, _ = layers[n]
        ws, bs, _, _ = slices[n]
        if n < arch.n_layers - 1:
            g = g * (1.0 - acts[n + 1] ** 2)
        grad[ws] = (acts[n].T @ g).ravel()
        grad[bs] = g.sum(axis=0)
        if n > 0:
            g = g @ W.T
    return grad


def grad_params(arch: MlpArchitecture, params: np.ndarray, inputs: np.ndarray,
                output_cotangents: np.ndarray) -> np.ndarray:
    """Gradient of <cotangents, forward(inputs)> with respect to the MLP parameters."""
    _, acts = forward_cached(arch, params, inputs)
    return backward(arch, params, acts, output_cotangents)


def jvp_cached(arch: MlpArchitecture, params: np.ndarray, acts: Sequence[np.ndarray],
               tangent: np.ndarray) -> np.ndarray:
    """Forward-mode pass reusing activations from :func:`forward_cached`."""
    tangent = np.asarray(tangent, dtype=np.float64)
    if tangent.ndim != 1 or tangent.shape[0] < arch.n_params:
        raise ShapeError(f"tangent of shape {tangent.shape} too short for {arch.n_params} params")
    dh = np.zeros_like(acts[0])
    layers = list(_layers(arch, params))
    dlayers = list(_layers(arch, tangent))
    for n, ((W, _), (dW, db)) in enumerate(zip(layers, dlayers)):
        dz = dh @ W + acts[n] @ dW + db
        dh = (1.0 - acts[n + 1] ** 2) * dz if n < arch.n_layers - 1 else dz
    return dh


def jvp(arch: MlpArchitecture, params: np.ndarray, inputs: np.ndarray,
        tangent: np.ndarray) -> np.ndarray:
    """Directional derivative of forward(inputs) along ``tangent`` in parameter space."""
    _, acts = forward_cached(arch, params, inputs)
    return jvp_cached(arch, params, acts, tangent)
