"""Alignment/uniformity contrastive losses over paired embedding views.

Three variants share the same pairwise-distance backbone:

- ``loss_nce``: unconditional alignment of same-exam pairs plus a log-sum
  uniformity over every cross pair (the diagonal included).
- ``loss_conditional``: kernel-weighted alignment over all pairs plus a
  complementary (1 - w) weighted uniformity; the alignment sum is
  normalized by N, the uniformity by N^2.
- ``loss_decoupled``: the batch splits into labeled exams A and unlabeled
  exams U; A gets the conditional terms (normalized by |A| and |A|^2), U
  gets same-exam alignment and a uniformity over distinct pairs only, and
  no cross A-U term exists.

All distances are smoothed Euclidean norms sqrt(|x1_i - x2_j|^2 + eps^2),
which keeps every loss differentiable when two rows coincide.  Analytic
gradients are assembled from per-pair coefficients d(total)/d(d_ij) and
checked against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .metadata import KernelMatrix, KernelVariant, MetadataSummary

__all__ = [
    "EPS_DIST",
    "ALIGN_LABELED",
    "UNIF_LABELED",
    "ALIGN_UNLABELED",
    "UNIF_UNLABELED",
    "LOSS_KINDS",
    "DegenerateUniformityError",
    "ViewPairBatch",
    "BatchPartition",
    "LossBreakdown",
    "GradientBatch",
    "pairwise_distances",
    "loss_nce",
    "loss_conditional",
    "partition_batch",
    "loss_decoupled",
    "evaluate_loss",
    "loss_gradient",
    "finite_diff_gradient",
    "central_difference",
    "max_relative_error",
]

# Smoothing floor inside the pairwise norm; keeps gradients finite at d = 0.
EPS_DIST = 1e-8

ALIGN_LABELED = "align_labeled"
UNIF_LABELED = "unif_labeled"
ALIGN_UNLABELED = "align_unlabeled"
UNIF_UNLABELED = "unif_unlabeled"

LOSS_KINDS = ("nce", "conditional", "decoupled")


class DegenerateUniformityError(ValueError):
    """Raised when a required uniformity sum is identically zero."""


@dataclass(frozen=True)
class ViewPairBatch:
    """Two aligned (N, D) embedding views; row i of each view is exam i."""

    x1: np.ndarray
    x2: np.ndarray

    def __post_init__(self) -> None:
        x1 = np.asarray(self.x1, dtype=np.float64)
        x2 = np.asarray(self.x2, dtype=np.float64)
        if x1.ndim != 2 or x1.shape != x2.shape:
            raise ValueError(f"views must share an (N, D) shape, got {x1.shape} and {x2.shape}")
        if x1.shape[0] < 1 or x1.shape[1] < 1:
            raise ValueError(f"batch needs N >= 1 and D >= 1, got shape {x1.shape}")
        if not (np.isfinite(x1).all() and np.isfinite(x2).all()):
            raise ValueError("embeddings must be finite")
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)

    @property
    def n(self) -> int:
        return self.x1.shape[0]

    @property
    def dim(self) -> int:
        return self.x1.shape[1]


@dataclass(frozen=True)
class BatchPartition:
    """Disjoint labeled/unlabeled row indices covering a batch.

    ``labeled_summaries`` is aligned with ``labeled`` and carries the
    metadata needed to build the kernel over the labeled block.
    """

    labeled: tuple[int, ...]
    unlabeled: tuple[int, ...]
    labeled_summaries: tuple[MetadataSummary, ...] = ()

    def __post_init__(self) -> None:
        if self.labeled_summaries and len(self.labeled_summaries) != len(self.labeled):
            raise ValueError("one summary per labeled index required")
        overlap = set(self.labeled) & set(self.unlabeled)
        if overlap:
            raise ValueError(f"indices in both groups: {sorted(overlap)}")

    @property
    def n(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    def validate_for(self, batch: ViewPairBatch) -> None:
        if set(self.labeled) | set(self.unlabeled) != set(range(batch.n)):
            raise ValueError("partition must cover every batch row exactly once")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values of one loss evaluation.

    Terms the variant does not have stay 0 and are absent from
    ``present``; terms the variant wants but whose weighted sum is empty
    or identically zero are skipped (0 contribution) and listed in
    ``skipped`` instead of feeding a log(0).  ``total`` is the sum of the
    present terms.
    """

    align_labeled: float = 0.0
    unif_labeled: float = 0.0
    align_unlabeled: float = 0.0
    unif_unlabeled: float = 0.0
    present: frozenset[str] = frozenset()
    skipped: frozenset[str] = frozenset()
    n_labeled: int = 0
    n_unlabeled: int = 0
    total: float = 0.0

    def term(self, name: str) -> float:
        return float(getattr(self, name))

    def as_dict(self) -> dict:
        return {
            "align_labeled": self.align_labeled,
            "unif_labeled": self.unif_labeled,
            "align_unlabeled": self.align_unlabeled,
            "unif_unlabeled": self.unif_unlabeled,
            "present": sorted(self.present),
            "skipped": sorted(self.skipped),
            "n_labeled": self.n_labeled,
            "n_unlabeled": self.n_unlabeled,
            "total": self.total,
        }


def _breakdown(terms: dict[str, float], skipped: set[str], n_labeled: int, n_unlabeled: int) -> LossBreakdown:
    return LossBreakdown(
        align_labeled=terms.get(ALIGN_LABELED, 0.0),
        unif_labeled=terms.get(UNIF_LABELED, 0.0),
        align_unlabeled=terms.get(ALIGN_UNLABELED, 0.0),
        unif_unlabeled=terms.get(UNIF_UNLABELED, 0.0),
        present=frozenset(terms),
        skipped=frozenset(skipped),
        n_labeled=n_labeled,
        n_unlabeled=n_unlabeled,
        total=float(sum(terms.values())),
    )


@dataclass(frozen=True)
class GradientBatch:
    """Gradients of a loss total with respect to both views."""

    g1: np.ndarray
    g2: np.ndarray


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def pairwise_distances(batch: ViewPairBatch) -> np.ndarray:
    """Smoothed L2 distance matrix d[i, j] = |x1_i - x2_j| of shape (N, N)."""
    diff = batch.x1[:, None, :] - batch.x2[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff) + EPS_DIST**2)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_nce(batch: ViewPairBatch) -> LossBreakdown:
    """Unconditional alignment plus log-mean-exp uniformity over all pairs.

    total = (1/N) sum_i d_ii + log((1/N^2) sum_{i,j} exp(-d_ij)); the
    uniformity sum runs over every (i, j) including i = j.
    """
    d = pairwise_distances(batch)
    n = batch.n
    align = float(np.trace(d) / n)
    unif = float(np.log(np.exp(-d).sum() / n**2))
    return _breakdown(
        {ALIGN_UNLABELED: align, UNIF_UNLABELED: unif}, set(), 0, n
    )


def _check_kernel(kernel: KernelMatrix, n: int, what: str) -> np.ndarray:
    w = kernel.weights
    if w.shape != (n, n):
        raise ValueError(f"{what}: kernel shape {w.shape} does not match n = {n}")
    if not np.all(np.diag(w) == 1.0):
        raise ValueError(f"{what}: kernel diagonal must be identically 1")
    if w.min() < 0.0 or w.max() > 1.0:
        raise ValueError(f"{what}: kernel weights must lie in [0, 1]")
    return w


def loss_conditional(batch: ViewPairBatch, kernel: KernelMatrix) -> LossBreakdown:
    """Kernel-weighted alignment with complementary uniformity.

    total = (1/N) sum_{i,j} w_ij d_ij
          + log((1/N^2) sum_{i,j} (1 - w_ij) exp(-d_ij)).

    The alignment normalization is 1/N even though the sum has N^2 terms.
    The unit kernel diagonal removes same-exam pairs from the uniformity
    sum; if every remaining weight is 1 the sum is identically zero and
    the loss is undefined (degenerate uniformity).
    """
    n = batch.n
    w = _check_kernel(kernel, n, "conditional loss")
    d = pairwise_distances(batch)
    align = float((w * d).sum() / n)
    s = float(((1.0 - w) * np.exp(-d)).sum())
    if s == 0.0:
        raise DegenerateUniformityError(
            "degenerate uniformity: every pair weight is 1, nothing repels"
        )
    unif = float(np.log(s / n**2))
    return _breakdown({ALIGN_LABELED: align, UNIF_LABELED: unif}, set(), n, 0)


def partition_batch(
    summaries: list[MetadataSummary],
    variant: KernelVariant = KernelVariant.PROPOSED,
) -> BatchPartition:
    """Split batch rows into labeled and unlabeled groups by summary state.

    Unlabeled summaries always go to the unlabeled group.  The
    high-confidence variant additionally routes labeled exams with
    confidence below 1 to the unlabeled group, so its kernel only ever
    sees unanimous exams.
    """
    labeled: list[int] = []
    unlabeled: list[int] = []
    kept: list[MetadataSummary] = []
    for idx, s in enumerate(summaries):
        keep = s.is_labeled
        if keep and variant is KernelVariant.HIGH_CONFIDENCE and s.confidence != 1.0:
            keep = False
        if keep:
            labeled.append(idx)
            kept.append(s)
        else:
            unlabeled.append(idx)
    return BatchPartition(tuple(labeled), tuple(unlabeled), tuple(kept))


def _labeled_uniformity_weights(w: np.ndarray, global_uniformity: bool) -> np.ndarray:
    if global_uniformity:
        # Uniform repulsion between distinct labeled exams; same-exam
        # pairs stay out of the uniformity sum.
        return 1.0 - np.eye(len(w))
    return 1.0 - w


def loss_decoupled(
    batch: ViewPairBatch,
    partition: BatchPartition,
    kernel: KernelMatrix | None = None,
    global_uniformity: bool = False,
) -> LossBreakdown:
    """Conditional terms on the labeled block, unconditional on the rest.

    Over A (labeled rows, kernel w):

        (1/|A|)   sum_{i,j in A} w_ij d_ij
      + log((1/|A|^2) sum_{i,j in A} (1 - w_ij) exp(-d_ij))

    over U (unlabeled rows):

        (1/|U|)   sum_{i in U} d_ii
      + log((1/|U|^2) sum_{i != j in U} exp(-d_ij))

    with no cross A-U pair anywhere.  With ``global_uniformity`` the
    labeled uniformity weight (1 - w_ij) is replaced by 1 for i != j and
    0 for i = j.  Empty groups drop their terms; a uniformity sum that is
    identically zero (every weight 1, or |U| = 1) is skipped and flagged
    rather than fed to log.
    """
    partition.validate_for(batch)
    d = pairwise_distances(batch)
    terms: dict[str, float] = {}
    skipped: set[str] = set()

    idx_a = np.asarray(partition.labeled, dtype=np.intp)
    idx_u = np.asarray(partition.unlabeled, dtype=np.intp)
    n_a, n_u = len(idx_a), len(idx_u)

    if n_a > 0:
        if kernel is None:
            raise ValueError("labeled rows present but no kernel given")
        w = _check_kernel(kernel, n_a, "decoupled loss")
        d_a = d[np.ix_(idx_a, idx_a)]
        terms[ALIGN_LABELED] = float((w * d_a).sum() / n_a)
        u_w = _labeled_uniformity_weights(w, global_uniformity)
        s_lab = float((u_w * np.exp(-d_a)).sum())
        if s_lab == 0.0:
            skipped.add(UNIF_LABELED)
        else:
            terms[UNIF_LABELED] = float(np.log(s_lab / n_a**2))
    elif kernel is not None and kernel.n != 0:
        raise ValueError("kernel given but the labeled group is empty")

    if n_u > 0:
        terms[ALIGN_UNLABELED] = float(d[idx_u, idx_u].sum() / n_u)
        if n_u >= 2:
            e_u = np.exp(-d[np.ix_(idx_u, idx_u)])
            s_unl = float(e_u.sum() - np.trace(e_u))
            if s_unl == 0.0:
                skipped.add(UNIF_UNLABELED)
            else:
                terms[UNIF_UNLABELED] = float(np.log(s_unl / n_u**2))
        else:
            skipped.add(UNIF_UNLABELED)

    return _breakdown(terms, skipped, n_a, n_u)


def evaluate_loss(
    kind: str,
    batch: ViewPairBatch,
    partition: BatchPartition | None = None,
    kernel: KernelMatrix | None = None,
    global_uniformity: bool = False,
) -> LossBreakdown:
    """Dispatch on loss kind; see LOSS_KINDS."""
    if kind == "nce":
        return loss_nce(batch)
    if kind == "conditional":
        if kernel is None:
            raise ValueError("conditional loss needs a kernel")
        return loss_conditional(batch, kernel)
    if kind == "decoupled":
        if partition is None:
            raise ValueError("decoupled loss needs a partition")
        return loss_decoupled(batch, partition, kernel, global_uniformity)
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------
#
# Every term is a function of the distance matrix alone, so the gradient
# factors through per-pair coefficients C_ij = d(total)/d(d_ij) and
# d(d_ij)/d(x1_i) = (x1_i - x2_j) / d_ij.


def _nce_coefficients(d: np.ndarray) -> np.ndarray:
    n = len(d)
    e = np.exp(-d)
    c = -e / e.sum()
    c[np.diag_indices(n)] += 1.0 / n
    return c


def _conditional_coefficients(d: np.ndarray, w: np.ndarray) -> np.ndarray:
    n = len(d)
    e = np.exp(-d)
    s = ((1.0 - w) * e).sum()
    if s == 0.0:
        raise DegenerateUniformityError(
            "degenerate uniformity: every pair weight is 1, nothing repels"
        )
    return w / n - (1.0 - w) * e / s


def _decoupled_coefficients(
    d: np.ndarray,
    partition: BatchPartition,
    kernel: KernelMatrix | None,
    global_uniformity: bool,
) -> dict[str, np.ndarray]:
    """Per-term full-size coefficient matrices; zero outside each block."""
    n = len(d)
    idx_a = np.asarray(partition.labeled, dtype=np.intp)
    idx_u = np.asarray(partition.unlabeled, dtype=np.intp)
    n_a, n_u = len(idx_a), len(idx_u)
    out: dict[str, np.ndarray] = {}

    if n_a > 0:
        if kernel is None:
            raise ValueError("labeled rows present but no kernel given")
        w = _check_kernel(kernel, n_a, "decoupled gradient")
        d_a = d[np.ix_(idx_a, idx_a)]
        c = np.zeros((n, n))
        c[np.ix_(idx_a, idx_a)] = w / n_a
        out[ALIGN_LABELED] = c
        u_w = _labeled_uniformity_weights(w, global_uniformity)
        e_a = np.exp(-d_a)
        s_lab = (u_w * e_a).sum()
        if s_lab != 0.0:
            c = np.zeros((n, n))
            c[np.ix_(idx_a, idx_a)] = -u_w * e_a / s_lab
            out[UNIF_LABELED] = c

    if n_u > 0:
        c = np.zeros((n, n))
        c[idx_u, idx_u] = 1.0 / n_u
        out[ALIGN_UNLABELED] = c
        if n_u >= 2:
            e_u = np.exp(-d[np.ix_(idx_u, idx_u)])
            off = 1.0 - np.eye(n_u)
            s_unl = (off * e_u).sum()
            if s_unl != 0.0:
                c = np.zeros((n, n))
                c[np.ix_(idx_u, idx_u)] = -off * e_u / s_unl
                out[UNIF_UNLABELED] = c

    return out


def _gradient_from_coefficients(
    batch: ViewPairBatch, d: np.ndarray, c: np.ndarray
) -> GradientBatch:
    m = c / d
    g1 = m.sum(axis=1, keepdims=True) * batch.x1 - m @ batch.x2
    g2 = m.sum(axis=0)[:, None] * batch.x2 - m.T @ batch.x1
    return GradientBatch(g1, g2)


def loss_gradient(
    kind: str,
    batch: ViewPairBatch,
    partition: BatchPartition | None = None,
    kernel: KernelMatrix | None = None,
    global_uniformity: bool = False,
) -> GradientBatch:
    """Analytic gradient of the loss total with respect to both views."""
    d = pairwise_distances(batch)
    if kind == "nce":
        c = _nce_coefficients(d)
    elif kind == "conditional":
        if kernel is None:
            raise ValueError("conditional loss needs a kernel")
        c = _conditional_coefficients(d, _check_kernel(kernel, batch.n, "conditional gradient"))
    elif kind == "decoupled":
        if partition is None:
            raise ValueError("decoupled loss needs a partition")
        partition.validate_for(batch)
        per_term = _decoupled_coefficients(d, partition, kernel, global_uniformity)
        c = np.zeros((batch.n, batch.n))
        for term_c in per_term.values():
            c += term_c
    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return _gradient_from_coefficients(batch, d, c)


def central_difference(
    f: Callable[[np.ndarray, np.ndarray], float],
    x1: np.ndarray,
    x2: np.ndarray,
    h: float = 1e-5,
) -> GradientBatch:
    """Coordinate-wise central finite differences (f(x+h) - f(x-h)) / 2h."""
    grads = []
    for which in (0, 1):
        x = (x1, x2)[which]
        g = np.zeros_like(x, dtype=np.float64)
        for idx in np.ndindex(x.shape):
            xp = x.copy()
            xm = x.copy()
            xp[idx] += h
            xm[idx] -= h
            args_p = (xp, x2) if which == 0 else (x1, xp)
            args_m = (xm, x2) if which == 0 else (x1, xm)
            g[idx] = (f(*args_p) - f(*args_m)) / (2.0 * h)
        grads.append(g)
    return GradientBatch(grads[0], grads[1])


def finite_diff_gradient(
    kind: str,
    batch: ViewPairBatch,
    partition: BatchPartition | None = None,
    kernel: KernelMatrix | None = None,
    global_uniformity: bool = False,
    h: float = 1e-5,
) -> GradientBatch:
    """Finite-difference gradient of the named loss; oracle for the analytic path."""

    def f(a: np.ndarray, b: np.ndarray) -> float:
        return evaluate_loss(
            kind, ViewPairBatch(a, b), partition, kernel, global_uniformity
        ).total

    return central_difference(f, batch.x1, batch.x2, h)


def max_relative_error(
    got: GradientBatch, want: GradientBatch, floor: float = 1e-7
) -> float:
    """Largest per-coordinate relative error between two gradient batches.

    Coordinates where both magnitudes are at or below ``floor`` count as
    exact agreement; that keeps finite-difference noise on true zeros
    from dominating the ratio.
    """
    worst = 0.0
    for a, b in ((got.g1, want.g1), (got.g2, want.g2)):
        scale = np.maximum(np.abs(a), np.abs(b))
        mask = scale > floor
        if mask.any():
            rel = np.abs(a - b)[mask] / scale[mask]
            worst = max(worst, float(rel.max()))
    return worst
