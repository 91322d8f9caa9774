"""Leave-one-out VQA accuracy, per-category reports, ensembles and domain-gap probes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .data import CATEGORIES, N_ANNOTATORS, MultiModalBatch, normalize_answer
from .layers import MLP
from .losses import KernelSpec, cross_entropy, mmd_sq
from .model import DualDomainModel
from .training import Adamax

EVAL_CHUNK = 512

# report column -> sample category it averages over
REPORT_CATEGORIES = {"yes/no": "yes/no", "number": "number", "other": "other", "answerable": "unanswerable"}


def vqa_accuracy(predicted: str, annotator_answers: Sequence[str]) -> float:
    """Mean over the ten leave-one-out annotator subsets of min(#matches / 3, 1)."""
    if len(annotator_answers) != N_ANNOTATORS:
        raise ValueError(f"need exactly {N_ANNOTATORS} annotator answers, got {len(annotator_answers)}")
    pred = normalize_answer(predicted)
    hits = [int(normalize_answer(a) == pred) for a in annotator_answers]
    total = sum(hits)
    # integer numerator over 3 * 10 keeps the result correctly rounded
    return sum(min(total - h, 3) for h in hits) / (3 * N_ANNOTATORS)


@dataclass
class EvalReport:
    overall: float
    per_category: dict[str, float]  # report column -> accuracy (NaN when no samples)
    count: int
    counts: dict[str, int]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "accuracy", "count"])
        w.writerow(["overall", repr(self.overall), self.count])
        for name in REPORT_CATEGORIES:
            acc, n = self.per_category[name], self.counts[name]
            w.writerow([name, repr(acc), n])
        return buf.getvalue()


def report_from_scores(scores: Sequence[float], categories: Sequence[str]) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    per, counts = {}, {}
    cats = np.asarray(categories)
    for col, cat in REPORT_CATEGORIES.items():
        mask = cats == cat
        counts[col] = int(mask.sum())
        per[col] = float(scores[mask].mean()) if mask.any() else float("nan")
    return EvalReport(float(scores.mean()), per, len(scores), counts)


def logits_for(model: DualDomainModel, data: MultiModalBatch, domain: str) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(data), EVAL_CHUNK):
            chunk = data.take(np.arange(i, min(i + EVAL_CHUNK, len(data))))
            out.append(model.classify(model.encode(chunk).e, domain).data)
    return np.concatenate(out)


def embeddings_for(model: DualDomainModel, data: MultiModalBatch) -> dict[str, np.ndarray]:
    parts = {"q": [], "v": [], "e": []}
    with no_grad():
        for i in range(0, len(data), EVAL_CHUNK):
            enc = model.encode(data.take(np.arange(i, min(i + EVAL_CHUNK, len(data)))))
            parts["q"].append(enc.q.data)
            parts["v"].append(enc.v.data)
            parts["e"].append(enc.e.data)
    return {k: np.concatenate(v) for k, v in parts.items()}


def score_predictions(pred_idx: np.ndarray, answers: Sequence[str], data: MultiModalBatch) -> EvalReport:
    scores = [vqa_accuracy(answers[int(p)], ann) for p, ann in zip(pred_idx, data.answers)]
    return report_from_scores(scores, data.categories)


def evaluate(model: DualDomainModel, data: MultiModalBatch, domain: str, answers: Sequence[str]) -> EvalReport:
    """Mean VQA accuracy of argmax predictions, overall and per category."""
    pred = np.argmax(logits_for(model, data, domain), axis=1)
    return score_predictions(pred, answers, data)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def ensemble_predict(models: Sequence[DualDomainModel], data: MultiModalBatch, domain: str) -> np.ndarray:
    """Argmax of the mean softmax over models (first index wins ties)."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    probs = sum(_softmax(logits_for(m, data, domain)) for m in models) / len(models)
    return np.argmax(probs, axis=1)


# ----------------------------------------------------------------------
# domain probe


@dataclass
class ProbeResult:
    mmd_sq: float
    accuracy: float


def probe_domain_gap(
    features_s: np.ndarray,
    features_t: np.ndarray,
    kernel: KernelSpec = KernelSpec(),
    seed: int = 0,
    hidden: int = 32,
    iters: int = 300,
    lr: float = 0.01,
    mmd_cap: int = 500,
) -> ProbeResult:
    """Held-out accuracy of a one-hidden-layer domain classifier, plus MMD².

    Features are pooled with domain labels, split 70/30 by row position
    (seeded, shared across domains so duplicated rows never straddle the
    split) and standardized with training-split statistics.  MMD² is computed on at most
    ``mmd_cap`` rows per domain.
    """
    Xs = np.asarray(features_s, dtype=np.float64)
    Xt = np.asarray(features_t, dtype=np.float64)
    if Xs.ndim != 2 or Xt.ndim != 2 or Xs.shape[1] != Xt.shape[1]:
        raise ValueError(f"feature sets must be matrices of equal width, got {Xs.shape} and {Xt.shape}")
    rng = np.random.default_rng(seed)
    ns, nt = len(Xs), len(Xt)
    X = np.concatenate([Xs, Xt])
    y = np.concatenate([np.zeros(ns, dtype=np.int64), np.ones(nt, dtype=np.int64)])
    # split by row position so row i of both domains lands on the same side
    order = rng.permutation(max(ns, nt))
    cut = int(round(0.7 * len(order)))

    def rows(pos: np.ndarray) -> np.ndarray:
        return np.concatenate([pos[pos < ns], ns + pos[pos < nt]])

    tr, te = rows(order[:cut]), rows(order[cut:])
    if len(tr) == 0 or len(te) == 0:
        raise ValueError("probe needs at least two rows per domain")
    mu = X[tr].mean(axis=0)
    sd = X[tr].std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd

    net = MLP([X.shape[1], hidden, 2], ["tanh", "identity"], rng)
    opt = Adamax(net.parameters())
    batch = min(128, len(tr))
    for it in range(iters):
        idx = tr[rng.integers(0, len(tr), size=batch)]
        loss = cross_entropy(net(Tensor(Z[idx])), y[idx])
        net.zero_grad()
        loss.backward()
        opt.step(lr)
    with no_grad():
        pred = np.argmax(net(Tensor(Z[te])).data, axis=1)
    acc = float((pred == y[te]).mean())

    sub_s = Xs[: mmd_cap] if len(Xs) > mmd_cap else Xs
    sub_t = Xt[: mmd_cap] if len(Xt) > mmd_cap else Xt
    with no_grad():
        stat = mmd_sq(sub_s, sub_t, kernel).item()
    return ProbeResult(stat, acc)
