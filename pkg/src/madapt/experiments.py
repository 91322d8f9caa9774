"""Benchmark construction and the multi-run protocols: ablation ladder, data fractions, probes."""

from __future__ import annotations

import csv
import io
import logging
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ExperimentConfig
from .data import (
    AnswerVocab,
    DataError,
    MultiModalBatch,
    Sample,
    build_vocab,
    collate,
    generate_domain_pair,
    load_feature_file,
    read_manifest,
    save_feature_file,
    split_fraction,
    write_manifest,
)
from .evaluation import EvalReport, ProbeResult, embeddings_for, ensemble_predict, evaluate, probe_domain_gap, score_predictions
from .model import DualDomainModel, warm_start_target_head
from .training import MODAL_ONLY, RunRecord, adapt, finetune, pretrain_source, train_target_only

log = logging.getLogger(__name__)

FRACTIONS = (1 / 8, 1 / 4, 1 / 2, 1.0)
FRACTION_LABELS = ("1/8", "1/4", "1/2", "1")
SPLIT_FILES = ("source_train", "source_test", "target_train", "target_test")
ENSEMBLE_SEED_STRIDE = 1000


@contextmanager
def determinism(enabled: bool):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


# ----------------------------------------------------------------------
# benchmark


@dataclass
class Benchmark:
    source_train: MultiModalBatch
    source_test: MultiModalBatch
    target_train: MultiModalBatch
    target_test: MultiModalBatch
    source_vocab: AnswerVocab
    target_vocab: AnswerVocab
    target_samples: list[Sample]  # target training samples, for fraction subsets

    def with_target_fraction(self, fraction: float, seed: int) -> "Benchmark":
        if fraction == 1.0:
            return self
        subset = split_fraction(self.target_samples, fraction, seed)
        return replace(self, target_train=collate(subset, self.target_vocab), target_samples=subset)


def _retag(samples: list[Sample], domain: str) -> list[Sample]:
    return [replace(s, domain=domain) for s in samples]


def generate_splits(cfg: ExperimentConfig) -> dict[str, list[Sample]]:
    """Draw the four splits of the synthetic benchmark.

    In the reverse direction the shifted distribution plays the source role
    (with the source-side sample counts) and vice versa.
    """
    n_src = cfg.n_source + cfg.n_source_test
    n_tgt = cfg.n_target + cfg.n_target_test
    shift, world = cfg.shift(), cfg.world()
    if cfg.direction == "a->b":
        src, tgt = generate_domain_pair(shift, (n_src, n_tgt), cfg.data_seed, world)
    else:
        a, b = generate_domain_pair(shift, (n_tgt, n_src), cfg.data_seed, world)
        src, tgt = _retag(b, "source"), _retag(a, "target")
    return {
        "source_train": src[: cfg.n_source],
        "source_test": src[cfg.n_source :],
        "target_train": tgt[: cfg.n_target],
        "target_test": tgt[cfg.n_target :],
    }


def write_splits(cfg: ExperimentConfig, out_dir, echo: str = "") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = generate_splits(cfg)
    paths = {}
    for name, samples in splits.items():
        paths[name] = out / f"{name}.mmda"
        save_feature_file(samples, paths[name], cfg.token_vocab)
    entries = {name: p.name for name, p in paths.items()}
    entries.update({"data_seed": cfg.data_seed, "direction": cfg.direction})
    write_manifest(out / "manifest.txt", entries)
    if echo:
        (out / "config.echo").write_text(echo, encoding="utf-8")
    return paths


def load_splits(data_dir) -> dict[str, list[Sample]]:
    root = Path(data_dir)
    manifest_path = root / "manifest.txt"
    manifest = read_manifest(manifest_path) if manifest_path.exists() else {}
    splits = {}
    for name in SPLIT_FILES:
        path = root / manifest.get(name, f"{name}.mmda")
        if not path.exists():
            raise DataError(f"missing data file {path}")
        splits[name], _ = load_feature_file(path)
    return splits


def build_benchmark(cfg: ExperimentConfig) -> Benchmark:
    """Load (``data_dir``) or generate the splits, build vocabularies and apply ``target_fraction``."""
    splits = load_splits(cfg.data_dir) if cfg.data_dir else generate_splits(cfg)
    for name, samples in splits.items():
        if not samples and name.endswith("train"):
            raise DataError(f"split {name} is empty")
    vs = build_vocab(splits["source_train"], cfg.answer_cap)
    vt = build_vocab(splits["target_train"], cfg.answer_cap)
    bench = Benchmark(
        collate(splits["source_train"], vs),
        collate(splits["source_test"], vs),
        collate(splits["target_train"], vt),
        collate(splits["target_test"], vt),
        vs,
        vt,
        splits["target_train"],
    )
    return bench.with_target_fraction(cfg.target_fraction, cfg.seed)


# ----------------------------------------------------------------------
# single regimes


def new_model(cfg: ExperimentConfig, bench: Benchmark, seed: int) -> DualDomainModel:
    return DualDomainModel(cfg.model_config(len(bench.source_vocab), len(bench.target_vocab)), seed=seed)


def pretrained(cfg: ExperimentConfig, bench: Benchmark, seed: int) -> tuple[DualDomainModel, RunRecord]:
    """Source-pretrained model, target head warm-started from the source head if configured."""
    model, rec = pretrain_source(
        new_model(cfg, bench, seed), bench.source_train, cfg.schedule(), cfg.pretrain_iters, seed, cfg.batch_size, cfg.optimizer
    )
    if cfg.warm_start_head:
        warm_start_target_head(model, bench.source_vocab.answers, bench.target_vocab.answers)
    return model, rec


def run_target_only(cfg, bench, seed):
    return train_target_only(
        new_model(cfg, bench, seed), bench.target_train, cfg.schedule(), cfg.iters, seed, cfg.batch_size, cfg.optimizer
    )


def run_finetune(cfg, bench, seed, source_model: DualDomainModel):
    return finetune(source_model.clone(), bench.target_train, cfg.schedule(), cfg.iters, seed, cfg.batch_size, cfg.optimizer)


def run_adapt(cfg, bench, seed, source_model: DualDomainModel, flags=None):
    return adapt(
        source_model.clone(),
        bench.source_train,
        bench.target_train,
        cfg.loss_weights(),
        cfg.schedule(),
        cfg.iters,
        seed,
        cfg.flags() if flags is None else flags,
        cfg.kernel(),
        cfg.batch_size,
        cfg.optimizer,
    )


def target_accuracy(model: DualDomainModel, bench: Benchmark) -> EvalReport:
    return evaluate(model, bench.target_test, "target", bench.target_vocab.answers)


# ----------------------------------------------------------------------
# ablation ladder

LADDER = (
    "target-only",
    "fine-tune",
    "+ per-modality MMD",
    "+ joint MMD and adversarial",
    "+ ensemble",
)


@dataclass
class TableResult:
    header: list[str]
    rows: list[list]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()


def ablation_seed(cfg: ExperimentConfig, bench: Benchmark, seed: int, ensemble: bool = True) -> dict[str, float]:
    """Accuracy of every ladder rung for one seed."""
    src, _ = pretrained(cfg, bench, seed)
    acc = {}
    to, _ = run_target_only(cfg, bench, seed)
    acc[LADDER[0]] = target_accuracy(to, bench).overall
    ft, _ = run_finetune(cfg, bench, seed, src)
    acc[LADDER[1]] = target_accuracy(ft, bench).overall
    modal, _ = run_adapt(cfg, bench, seed, src, MODAL_ONLY)
    acc[LADDER[2]] = target_accuracy(modal, bench).overall
    full, _ = run_adapt(cfg, bench, seed, src)
    acc[LADDER[3]] = target_accuracy(full, bench).overall
    if ensemble:
        members = [full]
        for k in range(1, cfg.ensemble_size):
            m, _ = run_adapt(cfg, bench, seed + ENSEMBLE_SEED_STRIDE * k, src)
            members.append(m)
        pred = ensemble_predict(members, bench.target_test, "target")
        acc[LADDER[4]] = score_predictions(pred, bench.target_vocab.answers, bench.target_test).overall
    return acc


def run_ablation(cfg: ExperimentConfig, bench: Benchmark | None = None) -> TableResult:
    """One row per ladder rung: mean target accuracy over seeds and the delta to the previous rung."""
    bench = bench or build_benchmark(cfg)
    seeds = [cfg.seed + i for i in range(cfg.n_seeds)]
    per_seed = []
    for s in seeds:
        log.info("ablation seed %d", s)
        per_seed.append(ablation_seed(cfg, bench, s))
    header = ["method", "accuracy", "delta"] + [f"seed_{s}" for s in seeds]
    rows, prev = [], None
    for rung in LADDER:
        vals = [r[rung] for r in per_seed]
        mean = float(np.mean(vals))
        rows.append([rung, mean, 0.0 if prev is None else mean - prev] + vals)
        prev = mean
    return TableResult(header, rows)


# ----------------------------------------------------------------------
# data fractions

FRACTION_METHODS = ("target-only", "fine-tune", "adapt")


def fraction_cell(cfg, bench: Benchmark, seed: int, fraction: float, method: str, source_model=None) -> float:
    sub = bench.with_target_fraction(fraction, seed)
    if method == "target-only":
        model, _ = run_target_only(cfg, sub, seed)
    elif method == "fine-tune":
        model, _ = run_finetune(cfg, sub, seed, source_model)
    elif method == "adapt":
        model, _ = run_adapt(cfg, sub, seed, source_model)
    else:
        raise ValueError(f"unknown method {method!r}")
    return target_accuracy(model, sub).overall


def run_fraction_study(cfg: ExperimentConfig, bench: Benchmark | None = None) -> TableResult:
    """4×3 grid: rows are target-data fractions, columns the three regimes (mean over seeds)."""
    bench = bench or build_benchmark(replace(cfg, target_fraction=1.0))
    seeds = [cfg.seed + i for i in range(cfg.n_seeds)]
    grid = np.zeros((len(FRACTIONS), len(FRACTION_METHODS)))
    for s in seeds:
        src, _ = pretrained(cfg, bench, s)
        for i, f in enumerate(FRACTIONS):
            for j, method in enumerate(FRACTION_METHODS):
                grid[i, j] += fraction_cell(cfg, bench, s, f, method, src) / len(seeds)
    rows = [
        [label, len(bench.with_target_fraction(f, cfg.seed).target_samples)] + [float(v) for v in grid[i]]
        for i, (label, f) in enumerate(zip(FRACTION_LABELS, FRACTIONS))
    ]
    return TableResult(["fraction", "n_target"] + list(FRACTION_METHODS), rows)


# ----------------------------------------------------------------------
# probes


def joint_probe(model: DualDomainModel, bench: Benchmark, cfg: ExperimentConfig, probe_seed: int = 0) -> ProbeResult:
    """Domain probe on joint embeddings of the two test splits."""
    es = embeddings_for(model, bench.source_test)["e"]
    et = embeddings_for(model, bench.target_test)["e"]
    return probe_domain_gap(es, et, cfg.kernel(), seed=probe_seed)
