"""Gaussian-kernel MMD, alignment losses, dual-domain cross entropy and the adversarial term."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, clip, exp, sqdist, tensor_mean, tensor_sum

P_CLAMP = 1e-7


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel with either a fixed bandwidth or the per-batch median heuristic."""

    bandwidth: str = "median"
    sigma: float = 1.0

    def __post_init__(self):
        if self.bandwidth not in ("median", "fixed"):
            raise ValueError(f"bandwidth policy must be 'median' or 'fixed', got {self.bandwidth!r}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def fixed(cls, sigma: float) -> "KernelSpec":
        return cls("fixed", float(sigma))


@dataclass(frozen=True)
class LossWeights:
    lambda_j: float = 0.025
    lambda_mm: float = 0.008
    lambda_adv: float = 0.003
    gamma_v: float = 0.8
    gamma_q: float = 1.0
    gamma_c: float = 0.001

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"loss weight {f.name} must be a finite nonnegative number, got {v}")

    # modality a is visual, modality b is textual
    @property
    def gamma_a(self) -> float:
        return self.gamma_v

    @property
    def gamma_b(self) -> float:
        return self.gamma_q


@dataclass(frozen=True)
class LossBreakdown:
    L_c: float
    L_j: float
    L_mm: float
    L_adv: float
    total: float

    @classmethod
    def from_parts(cls, L_c: float, L_j: float, L_mm: float, L_adv: float, weights: LossWeights) -> "LossBreakdown":
        total = L_c + weights.lambda_j * L_j + weights.lambda_mm * L_mm - weights.lambda_adv * L_adv
        return cls(L_c, L_j, L_mm, L_adv, total)


# ----------------------------------------------------------------------
# kernels and MMD


def gaussian_kernel(x, y, sigma: float) -> float:
    """exp(-||x - y||^2 / (2 sigma^2)) for two vectors."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.exp(-float(d @ d) / (2.0 * sigma * sigma)))


def median_bandwidth(*sets) -> float:
    """Median pairwise Euclidean distance over the pooled rows (1.0 if degenerate)."""
    pooled = np.concatenate([np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64) for s in sets])
    sq = np.einsum("ij,ij->i", pooled, pooled)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T, 0.0)
    iu = np.triu_indices(len(pooled), k=1)
    if iu[0].size == 0:
        return 1.0
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


def resolve_sigma(kernel: KernelSpec, X, Y) -> float:
    return kernel.sigma if kernel.bandwidth == "fixed" else median_bandwidth(X, Y)


def _kernel_block_sum(A: Tensor, B: Tensor, sigma: float) -> Tensor:
    d2 = sqdist(A, B)
    return tensor_sum(exp(-(d2 / (2.0 * sigma * sigma))))


def mmd_sq(X, Y, kernel: KernelSpec = KernelSpec(), sigma: float | None = None) -> Tensor:
    """Biased squared-MMD estimate between row sets ``X`` (n×d) and ``Y`` (m×d).

    Equals the squared RKHS norm of the difference of empirical kernel mean
    embeddings, diagonal terms included.  The median-heuristic bandwidth is
    computed from the data and treated as a constant.
    """
    X, Y = as_tensor(X), as_tensor(Y)
    if X.ndim != 2 or Y.ndim != 2:
        raise ShapeError(f"mmd_sq expects row matrices, got {X.shape} and {Y.shape}")
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"mmd_sq: feature widths differ ({X.shape} vs {Y.shape})")
    n, m = X.shape[0], Y.shape[0]
    if sigma is None:
        sigma = resolve_sigma(kernel, X, Y)
    sxx = _kernel_block_sum(X, X, sigma)
    sxy = _kernel_block_sum(X, Y, sigma)
    syy = _kernel_block_sum(Y, Y, sigma)
    return sxx / float(n * n) - (2.0 * sxy) / float(n * m) + syy / float(m * m)


# ----------------------------------------------------------------------
# adaptation losses


def loss_joint(e_s, e_t, kernel: KernelSpec = KernelSpec()) -> Tensor:
    """Squared MMD between source and target joint embeddings."""
    return mmd_sq(e_s, e_t, kernel)


def loss_multimodal(q_s, q_t, v_s, v_t, gamma_a: float, gamma_b: float, kernel: KernelSpec = KernelSpec()) -> Tensor:
    """gamma_a * MMD²(visual) + gamma_b * MMD²(question)."""
    if gamma_a < 0 or gamma_b < 0:
        raise ValueError("modality weights must be nonnegative")
    return mmd_sq(v_s, v_t, kernel) * gamma_a + mmd_sq(q_s, q_t, kernel) * gamma_b


def cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over rows with a valid label (labels < 0 are skipped)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    C = logits.shape[1]
    if (labels >= C).any():
        raise ValueError(f"label {labels.max()} out of range for {C} classes")
    valid = labels >= 0
    count = int(valid.sum())
    if count == 0:
        # nothing to learn from; keep the graph connected with a zero loss
        return tensor_sum(logits * 0.0)
    onehot = np.zeros(logits.shape)
    onehot[np.nonzero(valid)[0], labels[valid]] = 1.0
    picked = tensor_sum(logits.log_softmax(axis=1) * Tensor(onehot))
    return -(picked / float(count))


def loss_classification(logits_s, labels_s, logits_t, labels_t, gamma_c: float) -> Tensor:
    """CE on the target batch plus gamma_c times CE on the source batch."""
    if gamma_c < 0:
        raise ValueError("gamma_c must be nonnegative")
    return cross_entropy(logits_t, labels_t) + cross_entropy(logits_s, labels_s) * gamma_c


def loss_adversarial(p_source, p_target) -> Tensor:
    """-mean log p_source - mean log(1 - p_target), probabilities clamped away from 0 and 1."""
    ps = clip(as_tensor(p_source), P_CLAMP, 1.0 - P_CLAMP)
    pt = clip(as_tensor(p_target), P_CLAMP, 1.0 - P_CLAMP)
    return -tensor_mean(ps.log()) - tensor_mean((1.0 - pt).log())


def total_objective(
    L_c: Tensor,
    weights: LossWeights,
    L_j: Tensor | None = None,
    L_mm: Tensor | None = None,
    L_adv: Tensor | None = None,
    adversarial_via_grl: bool = True,
) -> tuple[Tensor, LossBreakdown]:
    """Combine component losses into the tensor to differentiate, plus a report.

    With ``adversarial_via_grl`` the adversarial term must have been computed
    through a gradient reversal node carrying ``lambda_adv``; it is then
    added unscaled so the discriminator minimizes it while the feature
    parameters receive ``-lambda_adv`` times its gradient.  Otherwise the
    literal ``- lambda_adv * L_adv`` is used (no reversal node).
    The reported ``total`` always follows L_c + λ_j L_j + λ_mm L_mm - λ_adv L_adv.
    """
    obj = L_c
    if L_j is not None:
        obj = obj + L_j * weights.lambda_j
    if L_mm is not None:
        obj = obj + L_mm * weights.lambda_mm
    if L_adv is not None:
        obj = obj + L_adv if adversarial_via_grl else obj - L_adv * weights.lambda_adv

    def val(t):
        return 0.0 if t is None else t.item()

    report = LossBreakdown.from_parts(val(L_c), val(L_j), val(L_mm), val(L_adv), weights)
    return obj, report
