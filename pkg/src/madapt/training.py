"""Optimization loops: source pretraining, adaptation, fine-tuning and target-only training."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import NonFiniteError, Tensor
from .data import MultiModalBatch, batch_stream, paired_stream, target_stream
from .losses import (
    KernelSpec,
    LossBreakdown,
    LossWeights,
    cross_entropy,
    loss_adversarial,
    loss_classification,
    loss_joint,
    loss_multimodal,
    total_objective,
)
from .model import DualDomainModel

log = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 128


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass(frozen=True)
class Schedule:
    """Linear warm-up followed by step decay."""

    warmup_start: float = 0.001
    warmup_end: float = 0.01
    warmup_iters: int = 2000
    decay_factor: float = 0.15
    decay_period: int = 4000

    def __post_init__(self):
        if not (self.warmup_start > 0 and self.warmup_end > 0 and self.decay_factor > 0):
            raise ValueError("learning rates and decay factor must be positive")
        if self.warmup_iters < 0 or self.decay_period < 1:
            raise ValueError("warmup_iters must be >= 0 and decay_period >= 1")


def lr_at(schedule: Schedule, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    s = schedule
    if iteration < s.warmup_iters:
        f = iteration / s.warmup_iters
        return s.warmup_start * (1.0 - f) + s.warmup_end * f
    k = (iteration - s.warmup_iters) // s.decay_period
    return s.warmup_end * s.decay_factor**k


# ----------------------------------------------------------------------
# optimizers


class Adamax:
    """Adaptive moments with an infinity-norm second moment."""

    def __init__(self, params: Iterable[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.u = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.step_count += 1
        corr = lr / (1.0 - self.beta1**self.step_count)
        for p, m, u in zip(self.params, self.m, self.u):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            np.maximum(self.beta2 * u, np.abs(g), out=u)
            p.data = p.data - corr * m / (u + self.eps)


class MomentumSGD:
    def __init__(self, params: Iterable[Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.step_count = 0
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.step_count += 1
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - lr * v


def make_optimizer(name: str, params):
    if name == "adamax":
        return Adamax(params)
    if name == "sgd":
        return MomentumSGD(params)
    raise ValueError(f"unknown optimizer {name!r}")


# ----------------------------------------------------------------------
# run records

RUN_COLUMNS = ("iter", "phase", "lr", "L_c", "L_j", "L_mm", "L_adv", "total")


@dataclass
class RunRecord:
    seed: int
    config_echo: str = ""
    rows: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    probes: list[dict] = field(default_factory=list)

    def log_step(self, phase: str, iteration: int, lr: float, parts: LossBreakdown) -> None:
        self.rows.append(
            {
                "iter": iteration,
                "phase": phase,
                "lr": lr,
                "L_c": parts.L_c,
                "L_j": parts.L_j,
                "L_mm": parts.L_mm,
                "L_adv": parts.L_adv,
                "total": parts.total,
            }
        )

    def column(self, name: str, phase: str | None = None) -> list[float]:
        return [r[name] for r in self.rows if phase is None or r["phase"] == phase]

    def extend(self, other: "RunRecord") -> None:
        self.rows.extend(other.rows)
        self.evals.extend(other.evals)
        self.probes.extend(other.probes)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in self.rows:
            w.writerow([r["iter"], r["phase"]] + [repr(float(r[c])) for c in RUN_COLUMNS[2:]])
        return buf.getvalue()


# ----------------------------------------------------------------------
# loops


@dataclass(frozen=True)
class AblationFlags:
    """Which adaptation terms are active (target cross entropy is always on)."""

    mmd_modal: bool = True
    mmd_joint: bool = True
    adversarial: bool = True
    source_ce: bool = True

    def any(self) -> bool:
        return self.mmd_modal or self.mmd_joint or self.adversarial or self.source_ce


FULL = AblationFlags()
MODAL_ONLY = AblationFlags(mmd_modal=True, mmd_joint=False, adversarial=False, source_ce=True)


def _check(value: float, iteration: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(iteration, f"loss is {value}")


def _supervised(
    model: DualDomainModel,
    data: MultiModalBatch,
    domain: str,
    stream,
    schedule: Schedule,
    iters: int,
    phase: str,
    seed: int,
    optimizer: str,
    record: RunRecord | None,
) -> RunRecord:
    if len(data) == 0:
        raise ValueError("training data is empty")
    record = record or RunRecord(seed)
    opt = make_optimizer(optimizer, model.parameters())
    weights = LossWeights()
    for it in range(iters):
        batch = next(stream)
        try:
            enc = model.encode(batch)
            loss = cross_entropy(model.classify(enc.e, domain), batch.labels)
        except NonFiniteError as exc:
            raise DivergenceError(it, str(exc)) from exc
        _, parts = total_objective(loss, weights)
        _check(parts.total, it)
        model.zero_grad()
        loss.backward()
        lr = lr_at(schedule, it)
        opt.step(lr)
        record.log_step(phase, it, lr, parts)
    return record


def pretrain_source(
    model: DualDomainModel,
    source: MultiModalBatch,
    schedule: Schedule = Schedule(),
    iters: int = 1000,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH_SIZE,
    optimizer: str = "adamax",
) -> tuple[DualDomainModel, RunRecord]:
    """Minimize source cross entropy only."""
    stream = batch_stream(source, batch_size, seed * 2 + 1)
    rec = _supervised(model, source, "source", stream, schedule, iters, "pretrain", seed, optimizer, None)
    return model, rec


def finetune(
    model: DualDomainModel,
    target: MultiModalBatch,
    schedule: Schedule = Schedule(),
    iters: int = 1000,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH_SIZE,
    optimizer: str = "adamax",
    phase: str = "finetune",
) -> tuple[DualDomainModel, RunRecord]:
    """Continue training all parameters on target labels only.

    The target batch order is the same one ``adapt`` draws for the same seed.
    """
    stream = target_stream(target, batch_size, seed)
    rec = _supervised(model, target, "target", stream, schedule, iters, phase, seed, optimizer, None)
    return model, rec


def train_target_only(
    model: DualDomainModel,
    target: MultiModalBatch,
    schedule: Schedule = Schedule(),
    iters: int = 1000,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH_SIZE,
    optimizer: str = "adamax",
) -> tuple[DualDomainModel, RunRecord]:
    """Same loop as ``finetune``, meant for a freshly initialized model."""
    return finetune(model, target, schedule, iters, seed, batch_size, optimizer, phase="target-only")


def adaptation_step_losses(
    model: DualDomainModel,
    batch_s: MultiModalBatch,
    batch_t: MultiModalBatch,
    weights: LossWeights,
    flags: AblationFlags = FULL,
    kernel: KernelSpec = KernelSpec(),
    adversarial_via_grl: bool = True,
) -> tuple[Tensor, LossBreakdown]:
    """Forward both domains and assemble the enabled terms of the objective."""
    enc_s = model.encode(batch_s)
    enc_t = model.encode(batch_t)
    logits_t = model.classify(enc_t.e, "target")
    if flags.source_ce:
        L_c = loss_classification(model.classify(enc_s.e, "source"), batch_s.labels, logits_t, batch_t.labels, weights.gamma_c)
    else:
        L_c = cross_entropy(logits_t, batch_t.labels)
    L_mm = (
        loss_multimodal(enc_s.q, enc_t.q, enc_s.v, enc_t.v, weights.gamma_a, weights.gamma_b, kernel)
        if flags.mmd_modal
        else None
    )
    L_j = loss_joint(enc_s.e, enc_t.e, kernel) if flags.mmd_joint else None
    L_adv = None
    if flags.adversarial:
        coeff = weights.lambda_adv if adversarial_via_grl else None
        L_adv = loss_adversarial(model.discriminate(enc_s.e, coeff), model.discriminate(enc_t.e, coeff))
    return total_objective(L_c, weights, L_j=L_j, L_mm=L_mm, L_adv=L_adv, adversarial_via_grl=adversarial_via_grl)


def adapt(
    model: DualDomainModel,
    source: MultiModalBatch,
    target: MultiModalBatch,
    weights: LossWeights = LossWeights(),
    schedule: Schedule = Schedule(),
    iters: int = 1000,
    seed: int = 0,
    flags: AblationFlags = FULL,
    kernel: KernelSpec = KernelSpec(),
    batch_size: int = DEFAULT_BATCH_SIZE,
    optimizer: str = "adamax",
) -> tuple[DualDomainModel, RunRecord]:
    """Joint training on paired source/target batches with the enabled alignment terms.

    Feature parameters descend on L_c + λ_j L_j + λ_mm L_mm − λ_adv L_adv
    while the discriminator descends on L_adv; the sign flip comes from the
    gradient reversal node inside ``model.discriminate``.
    """
    if not flags.any():
        raise ValueError("all adaptation loss flags are disabled; use finetune instead")
    if len(source) == 0 or len(target) == 0:
        raise ValueError("adaptation needs nonempty source and target data")
    record = RunRecord(seed)
    opt = make_optimizer(optimizer, model.parameters())
    pairs = paired_stream(source, target, batch_size, seed)
    for it in range(iters):
        batch_s, batch_t = next(pairs)
        try:
            objective, parts = adaptation_step_losses(model, batch_s, batch_t, weights, flags, kernel)
        except NonFiniteError as exc:
            raise DivergenceError(it, str(exc)) from exc
        _check(parts.total, it)
        model.zero_grad()
        objective.backward()
        lr = lr_at(schedule, it)
        opt.step(lr)
        record.log_step("adapt", it, lr, parts)
    return model, record
