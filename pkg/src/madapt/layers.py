"""Parameterized building blocks: linear maps, embeddings, GRU cell, attention, MLPs."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, gather_rows, matmul, sigmoid, tanh

ACTIVATIONS = ("identity", "tanh", "sigmoid")


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


class Module:
    """Minimal parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, arr in state.items():
            if own[name].shape != np.shape(arr):
                raise ShapeError(f"parameter {name}: expected {own[name].shape}, got {np.shape(arr)}")
        for name, arr in state.items():
            own[name].data = np.array(arr, dtype=np.float64)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(arr, dtype=np.float64), requires_grad=True)


class Linear(Module):
    """``y = x W^T + b`` with ``W`` of shape (out_dim, in_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = _param(xavier_uniform(rng, out_dim, in_dim))
        self.bias = _param(np.zeros(out_dim)) if bias else None

    def __call__(self, x) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: Linear, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"linear: input width {x.shape[-1]} != in_dim {layer.in_dim} (input shape {x.shape})")
    y = matmul(x, layer.weight.T)
    return y + layer.bias if layer.bias is not None else y


class Embedding(Module):
    """Token table; row 0 is padding, starts at zero and never receives gradient."""

    PAD = 0

    def __init__(self, vocab_size: int, embed_dim: int, rng: np.random.Generator):
        rows = rng.normal(0.0, 0.1, size=(vocab_size, embed_dim))
        rows[self.PAD] = 0.0
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.rows = _param(rows)

    def __call__(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.size and tokens.max() >= self.vocab_size:
            raise IndexError(f"token index {tokens.max()} >= vocab size {self.vocab_size}")
        return gather_rows(self.rows, tokens, padding_idx=self.PAD)


class GRUCell(Module):
    """Cho-style GRU.

    z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
    h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h), h' = (1 − z) ⊙ h + z ⊙ h̃.
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        for gate in ("z", "r", "h"):
            setattr(self, f"W_{gate}", _param(xavier_uniform(rng, hidden_dim, input_dim)))
            setattr(self, f"U_{gate}", _param(xavier_uniform(rng, hidden_dim, hidden_dim)))
            setattr(self, f"b_{gate}", _param(np.zeros(hidden_dim)))

    def project_inputs(self, x) -> tuple[Tensor, Tensor, Tensor]:
        """Input-side affine terms for all three gates (works on whole sequences)."""
        x = as_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"gru: input width {x.shape[-1]} != {self.input_dim}")
        return (
            matmul(x, self.W_z.T) + self.b_z,
            matmul(x, self.W_r.T) + self.b_r,
            matmul(x, self.W_h.T) + self.b_h,
        )

    def step_projected(self, xz: Tensor, xr: Tensor, xh: Tensor, h_prev: Tensor) -> Tensor:
        z = sigmoid(xz + matmul(h_prev, self.U_z.T))
        r = sigmoid(xr + matmul(h_prev, self.U_r.T))
        cand = tanh(xh + matmul(r * h_prev, self.U_h.T))
        return h_prev + z * (cand - h_prev)

    def __call__(self, x_t, h_prev) -> Tensor:
        return gru_step(self, x_t, h_prev)


def gru_step(cell: GRUCell, x_t, h_prev) -> Tensor:
    h_prev = as_tensor(h_prev)
    if h_prev.shape[-1] != cell.hidden_dim:
        raise ShapeError(f"gru: hidden width {h_prev.shape[-1]} != {cell.hidden_dim}")
    return cell.step_projected(*cell.project_inputs(x_t), h_prev)


class AttentionHead(Module):
    """Additive top-down attention: score_i = w · tanh(W_q q + W_k v_i)."""

    def __init__(self, query_dim: int, key_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.query = Linear(query_dim, hidden_dim, rng)
        self.key = Linear(key_dim, hidden_dim, rng, bias=False)
        self.score = _param(xavier_uniform(rng, 1, hidden_dim).reshape(hidden_dim))

    def scores(self, q: Tensor, regions: Tensor) -> Tensor:
        hq = self.query(q)  # (B, H)
        hk = self.key(regions)  # (B, K, H)
        B, H = hq.shape
        return matmul(tanh(hk + hq.reshape(B, 1, H)), self.score)  # (B, K)

    def __call__(self, q, regions):
        return attention_pool(self, q, regions)


def attention_pool(head: AttentionHead, q, regions) -> tuple[Tensor, Tensor]:
    """Softmax-weighted average of region features.

    Accepts a single query ``(d_q,)`` with regions ``(K, d_v)`` or a batch
    ``(B, d_q)`` with ``(B, K, d_v)``.  Returns ``(weights, pooled)``.
    """
    q, regions = as_tensor(q), as_tensor(regions)
    single = q.ndim == 1
    if single:
        q = q.reshape(1, q.shape[0])
        if regions.ndim != 2:
            raise ShapeError(f"attention: regions must be (K, d_v) for a single query, got {regions.shape}")
        regions = regions.reshape(1, *regions.shape)
    if regions.ndim != 3 or regions.shape[0] != q.shape[0]:
        raise ShapeError(f"attention: query {q.shape} incompatible with regions {regions.shape}")
    if regions.shape[1] < 1:
        raise ShapeError("attention needs at least one region")
    weights = head.scores(q, regions).softmax(axis=1)
    B, K = weights.shape
    pooled = (weights.reshape(B, K, 1) * regions).sum(axis=1)
    if single:
        return weights.reshape(K), pooled.reshape(regions.shape[2])
    return weights, pooled


class MLP(Module):
    def __init__(self, dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator):
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation tag per layer")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.layers = [Linear(i, o, rng) for i, o in zip(dims[:-1], dims[1:])]
        self.activations = list(activations)

    def __call__(self, x) -> Tensor:
        return mlp_forward(self.layers, self.activations, x)


def mlp_forward(layers: Sequence[Linear], activations: Sequence[str], x) -> Tensor:
    h = as_tensor(x)
    for layer, act in zip(layers, activations):
        h = layer(h)
        if act == "tanh":
            h = tanh(h)
        elif act == "sigmoid":
            h = sigmoid(h)
    return h


__all__ = [
    "Module",
    "Linear",
    "Embedding",
    "GRUCell",
    "AttentionHead",
    "MLP",
    "linear_forward",
    "gru_step",
    "attention_pool",
    "mlp_forward",
    "xavier_uniform",
]
