"""Dual-domain VQA network: shared encoders, Hadamard fusion, per-domain heads, discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, concat, grl, no_grad, tanh
from .layers import MLP, AttentionHead, Embedding, GRUCell, Linear, Module

DOMAINS = ("source", "target")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture sizes.  Field defaults are the full-scale values; see ``desk()``."""

    token_vocab: int = 20000
    embed_dim: int = 300
    d_q: int = 1024
    d_v: int = 2048
    n_regions: int = 100
    n_grid: int = 49
    d_region: int = 1024
    att_hidden: int = 512
    d_grid: int = 2048
    d_e: int = 4096
    cls_hidden: int = 1024
    disc_hidden: int = 1024
    n_answers_source: int = 3000
    n_answers_target: int = 3000
    max_question_len: int = 24

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive, got {getattr(self, f.name)}")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = cls(
            token_vocab=64,
            embed_dim=32,
            d_q=128,
            d_v=64,
            n_regions=8,
            n_grid=4,
            d_region=64,
            att_hidden=64,
            d_grid=64,
            d_e=128,
            cls_hidden=128,
            disc_hidden=64,
            n_answers_source=30,
            n_answers_target=30,
        )
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Encoded:
    q: Tensor
    v: Tensor
    e: Tensor


def question_lengths(tokens: np.ndarray) -> np.ndarray:
    """Index of the last non-padding token plus one, per row."""
    tokens = np.atleast_2d(tokens)
    nonpad = tokens != Embedding.PAD
    T = tokens.shape[1]
    last = T - np.argmax(nonpad[:, ::-1], axis=1)
    return np.where(nonpad.any(axis=1), last, 0)


class DualDomainModel(Module):
    """All parameter groups of the adaptation network.

    The question and visual encoders and the fusion projections are stored
    once and used for both domains.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        # feature mappings
        self.embedding = Embedding(c.token_vocab, c.embed_dim, rng)
        self.gru = GRUCell(c.embed_dim, c.d_q, rng)
        self.region_proj = Linear(c.d_v, c.d_region, rng)
        self.attention = AttentionHead(c.d_q, c.d_region, c.att_hidden, rng)
        self.grid_proj = Linear(c.d_v + c.d_q, c.d_grid, rng)
        self.fuse_q = Linear(c.d_q, c.d_e, rng)
        self.fuse_v = Linear(c.d_region + c.d_grid, c.d_e, rng)
        # label predictors
        self.cls_source = MLP([c.d_e, c.cls_hidden, c.n_answers_source], ["tanh", "identity"], rng)
        self.cls_target = MLP([c.d_e, c.cls_hidden, c.n_answers_target], ["tanh", "identity"], rng)
        # domain discriminator
        self.disc = MLP([c.d_e, c.disc_hidden, 1], ["tanh", "identity"], rng)

    # parameter groups -------------------------------------------------
    FEATURE_GROUPS = ("embedding", "gru", "region_proj", "attention", "grid_proj", "fuse_q", "fuse_v")
    CLASSIFIER_GROUPS = ("cls_source", "cls_target")
    DISCRIMINATOR_GROUPS = ("disc",)

    def group_parameters(self, groups: Sequence[str]) -> list[Tensor]:
        return [p for g in groups for p in getattr(self, g).parameters()]

    def feature_parameters(self) -> list[Tensor]:
        return self.group_parameters(self.FEATURE_GROUPS)

    def classifier_parameters(self) -> list[Tensor]:
        return self.group_parameters(self.CLASSIFIER_GROUPS)

    def discriminator_parameters(self) -> list[Tensor]:
        return self.group_parameters(self.DISCRIMINATOR_GROUPS)

    def clone(self) -> "DualDomainModel":
        other = DualDomainModel(self.config, seed=0)
        other.load_state_dict(self.state_dict())
        return other

    # forward pieces ---------------------------------------------------
    def encode_question(self, tokens) -> Tensor:
        """Run the GRU over padded token ids; returns the hidden state at each row's last real token."""
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        tokens = np.atleast_2d(tokens)
        if tokens.shape[1] > self.config.max_question_len:
            raise ShapeError(f"question length {tokens.shape[1]} exceeds {self.config.max_question_len}")
        lengths = question_lengths(tokens)
        if (lengths == 0).any():
            raise ValueError("empty question (all padding)")
        B = tokens.shape[0]
        h = Tensor(np.zeros((B, self.config.d_q)))
        for t in range(int(lengths.max())):
            h_new = self.gru(self.embedding(tokens[:, t]), h)
            active = lengths > t
            if active.all():
                h = h_new
            else:
                m = Tensor(active.astype(np.float64)[:, None])
                h = m * h_new + (1.0 - m) * h
        return h.reshape(self.config.d_q) if single else h

    def encode_visual(self, q, regions, grid) -> Tensor:
        """Attention-pooled projected regions concatenated with the (grid mean ⊕ q) projection."""
        q, regions, grid = as_tensor(q), as_tensor(regions), as_tensor(grid)
        single = q.ndim == 1
        if single:
            q = q.reshape(1, q.shape[0])
            regions = regions.reshape(1, *regions.shape)
            grid = grid.reshape(1, *grid.shape)
        c = self.config
        if regions.ndim != 3 or regions.shape[2] != c.d_v or grid.ndim != 3 or grid.shape[2] != c.d_v:
            raise ShapeError(f"visual features must be (B, K, {c.d_v}) and (B, G, {c.d_v}); got {regions.shape}, {grid.shape}")
        if regions.shape[1] < 1 or grid.shape[1] < 1:
            raise ShapeError("need at least one region and one grid cell")
        _, pooled = self.attention(q, tanh(self.region_proj(regions)))
        grid_mean = grid.mean(axis=1)
        grid_fused = tanh(self.grid_proj(concat([grid_mean, q], axis=1)))
        v = concat([pooled, grid_fused], axis=1)
        return v.reshape(v.shape[1]) if single else v

    def fuse(self, q, v) -> Tensor:
        return self.fuse_q(q) * self.fuse_v(v)

    def classify(self, e, domain: str) -> Tensor:
        if domain == "source":
            return self.cls_source(e)
        if domain == "target":
            return self.cls_target(e)
        raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")

    def predict_answer(self, e, domain: str) -> np.ndarray:
        with no_grad():
            logits = self.classify(e, domain).data
        return np.argmax(logits, axis=-1)

    def discriminate(self, e, lambda_adv: float | None) -> Tensor:
        """Probability that each embedding came from the source domain.

        A gradient reversal node with coefficient ``lambda_adv`` sits between
        ``e`` and the discriminator; ``None`` omits it.
        """
        e = as_tensor(e)
        if lambda_adv is not None:
            e = grl(e, lambda_adv)
        out = self.disc(e).sigmoid()
        return out.reshape(out.shape[:-1]) if out.ndim > 1 else out.reshape(())

    def encode(self, batch) -> Encoded:
        q = self.encode_question(batch.tokens)
        v = self.encode_visual(q, batch.regions, batch.grid)
        return Encoded(q, v, self.fuse(q, v))


def warm_start_target_head(model: DualDomainModel, source_answers: Sequence[str], target_answers: Sequence[str]) -> int:
    """Copy the source head into the target head for answers both vocabularies share.

    The hidden layer is copied whole; output rows (and biases) are copied for
    shared answers and left at their fresh initialization otherwise.
    Returns the number of shared answers.
    """
    src, tgt = model.cls_source.layers, model.cls_target.layers
    for s_layer, t_layer in zip(src[:-1], tgt[:-1]):
        t_layer.weight.data = s_layer.weight.data.copy()
        t_layer.bias.data = s_layer.bias.data.copy()
    src_index = {a: i for i, a in enumerate(source_answers)}
    w = tgt[-1].weight.data.copy()
    b = tgt[-1].bias.data.copy()
    shared = 0
    for j, ans in enumerate(target_answers):
        i = src_index.get(ans)
        if i is not None:
            w[j] = src[-1].weight.data[i]
            b[j] = src[-1].bias.data[i]
            shared += 1
    tgt[-1].weight.data = w
    tgt[-1].bias.data = b
    return shared
