"""Lesion detection evaluation on 3D probability volumes.

A probability volume is thresholded (fixed or dynamic), the resulting
mask splits into connected components, components become candidates
scored by their peak probability, and candidates match reference lesions
greedily by descending probability under a strict IoU criterion.  Exam
and lesion level ROC AUC plus a dataset-pooled average precision follow
the matched outcomes; missed references enter the lesion pool as
zero-score positives.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import ndimage

__all__ = [
    "ProbVolume",
    "BinaryMask",
    "Component",
    "LesionCandidate",
    "TruePositive",
    "FalsePositive",
    "DetectionOutcome",
    "ExamResult",
    "DynamicThresholdParams",
    "threshold_volume",
    "dynamic_threshold",
    "connected_components",
    "lesion_candidates",
    "match_lesions",
    "evaluate_exam",
    "exam_score",
    "roc_auc",
    "exam_auc",
    "lesion_auc",
    "average_precision",
]

CONNECTIVITIES = (6, 18, 26)


@dataclass(frozen=True)
class ProbVolume:
    """Lesion probabilities on an (X, Y, Z) grid, every voxel in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {d.shape}")
        if not np.isfinite(d).all() or d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("volume voxels must be finite and lie in [0, 1]")
        object.__setattr__(self, "data", d)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class BinaryMask:
    """A {0, 1} voxel mask on an (X, Y, Z) grid."""

    data: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {d.shape}")
        if d.dtype != np.bool_:
            if not np.isin(d, (0, 1)).all():
                raise ValueError("mask voxels must be 0 or 1")
            d = d.astype(bool)
        object.__setattr__(self, "data", d)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class Component:
    """One connected set of foreground voxels, id given by scan order.

    Components are ordered by (min z, min y, min x) over their voxels,
    which fixes candidate ids independently of labeling internals.
    """

    id: int
    voxels: frozenset[tuple[int, int, int]]
    dims: tuple[int, int, int]

    @property
    def size(self) -> int:
        return len(self.voxels)


@dataclass(frozen=True)
class LesionCandidate:
    """A component scored by the highest probability inside it."""

    component: Component
    probability: float

    @property
    def id(self) -> int:
        return self.component.id


@dataclass(frozen=True)
class TruePositive:
    candidate_id: int
    reference_id: int
    overlap: float
    probability: float


@dataclass(frozen=True)
class FalsePositive:
    candidate_id: int
    probability: float


@dataclass(frozen=True)
class DetectionOutcome:
    """Matched candidates and references for one exam."""

    true_positives: tuple[TruePositive, ...]
    false_positives: tuple[FalsePositive, ...]
    false_negatives: tuple[int, ...]
    n_reference: int


@dataclass(frozen=True)
class ExamResult:
    """Everything the dataset-level metrics need from one exam."""

    exam_id: str
    candidates: tuple[LesionCandidate, ...]
    outcome: DetectionOutcome
    score: float
    has_reference: bool
    threshold: float


@dataclass(frozen=True)
class DynamicThresholdParams:
    """Descending threshold search settings."""

    t_start: float = 0.6
    t_min: float = 0.1
    step: float = 0.05
    max_candidates: int = 5
    min_voxels: int = 10

    def __post_init__(self) -> None:
        if not (0.0 <= self.t_min <= self.t_start <= 1.0):
            raise ValueError("need 0 <= t_min <= t_start <= 1")
        if self.step <= 0.0:
            raise ValueError("step must be positive")
        if self.max_candidates < 1 or self.min_voxels < 1:
            raise ValueError("max_candidates and min_voxels must be >= 1")


# ---------------------------------------------------------------------------
# Thresholding and components
# ---------------------------------------------------------------------------


def threshold_volume(volume: ProbVolume, t: float) -> BinaryMask:
    """Mark voxels strictly greater than t; a voxel equal to t stays background."""
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"threshold {t} outside [0, 1]")
    return BinaryMask(volume.data > t)


def connected_components(mask: BinaryMask, connectivity: int = 26) -> tuple[Component, ...]:
    """Maximal connected foreground sets under 6, 18, or 26 connectivity.

    Returned in a deterministic order: ascending (min z, min y, min x)
    per component, ties broken by the lexicographically smallest voxel
    in (z, y, x) order.
    """
    if connectivity not in CONNECTIVITIES:
        raise ValueError(f"connectivity must be one of {CONNECTIVITIES}, got {connectivity}")
    rank = {6: 1, 18: 2, 26: 3}[connectivity]
    structure = ndimage.generate_binary_structure(3, rank)
    labeled, n_labels = ndimage.label(mask.data, structure=structure)
    if n_labels == 0:
        return ()
    coords = np.argwhere(labeled > 0)
    labels = labeled[coords[:, 0], coords[:, 1], coords[:, 2]]
    order = np.argsort(labels, kind="stable")
    coords = coords[order]
    ends = np.searchsorted(labels[order], np.arange(1, n_labels + 1), side="right")
    raw: list[tuple[tuple[int, int, int, tuple[int, int, int]], frozenset]] = []
    for lab in range(n_labels):
        chunk = coords[(0 if lab == 0 else ends[lab - 1]) : ends[lab]]
        voxels = frozenset((int(x), int(y), int(z)) for x, y, z in chunk)
        min_z = int(chunk[:, 2].min())
        min_y = int(chunk[:, 1].min())
        min_x = int(chunk[:, 0].min())
        first = min((z, y, x) for x, y, z in voxels)
        raw.append(((min_z, min_y, min_x, first), voxels))
    raw.sort(key=lambda item: item[0])
    return tuple(
        Component(idx, voxels, mask.dims) for idx, (_, voxels) in enumerate(raw)
    )


def dynamic_threshold(
    volume: ProbVolume,
    params: DynamicThresholdParams = DynamicThresholdParams(),
    connectivity: int = 26,
) -> tuple[BinaryMask, float]:
    """Lower the threshold until enough sizeable components appear.

    Starting at t_start, step down while the count of components with at
    least min_voxels voxels stays below max_candidates and t is above
    t_min; the mask at the final t is returned together with that t.  An
    all-background volume therefore ends at exactly t_min.
    """
    k = 0
    t = params.t_start
    while True:
        mask = threshold_volume(volume, t)
        comps = connected_components(mask, connectivity)
        count = sum(1 for c in comps if c.size >= params.min_voxels)
        if count >= params.max_candidates or t <= params.t_min:
            return mask, t
        k += 1
        t = max(params.t_start - k * params.step, params.t_min)


def lesion_candidates(
    volume: ProbVolume, mask: BinaryMask, connectivity: int = 26
) -> tuple[LesionCandidate, ...]:
    """Score each mask component by its peak probability in the volume."""
    if volume.dims != mask.dims:
        raise ValueError(f"volume dims {volume.dims} != mask dims {mask.dims}")
    out = []
    for comp in connected_components(mask, connectivity):
        idx = np.array(sorted(comp.voxels))
        peak = float(volume.data[idx[:, 0], idx[:, 1], idx[:, 2]].max())
        out.append(LesionCandidate(comp, peak))
    return tuple(out)


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


def _iou(a: Component, b: Component) -> Fraction:
    inter = len(a.voxels & b.voxels)
    union = len(a.voxels | b.voxels)
    return Fraction(inter, union)


def match_lesions(
    candidates: tuple[LesionCandidate, ...] | list[LesionCandidate],
    references: tuple[Component, ...] | list[Component],
    tau: float = 0.1,
) -> DetectionOutcome:
    """Greedy one-to-one matching by descending candidate probability.

    Each candidate takes the unmatched reference with the highest IoU,
    and counts as a true positive only when that IoU is strictly above
    tau; the comparison runs in exact rational arithmetic so a ratio that
    lands exactly on tau is rejected.  Leftover references are false
    negatives.
    """
    if not (0.0 <= tau < 1.0):
        raise ValueError(f"tau {tau} outside [0, 1)")
    dims = {c.component.dims for c in candidates} | {r.dims for r in references}
    if len(dims) > 1:
        raise ValueError(f"candidates and references disagree on dims: {sorted(dims)}")
    tau_exact = Fraction(tau)
    open_refs = list(references)
    tps: list[TruePositive] = []
    fps: list[FalsePositive] = []
    for cand in sorted(candidates, key=lambda c: (-c.probability, c.id)):
        best = None
        best_iou = Fraction(0)
        for ref in open_refs:
            iou = _iou(cand.component, ref)
            if best is None or iou > best_iou:
                best, best_iou = ref, iou
        if best is not None and best_iou > tau_exact:
            open_refs.remove(best)
            tps.append(
                TruePositive(cand.id, best.id, float(best_iou), cand.probability)
            )
        else:
            fps.append(FalsePositive(cand.id, cand.probability))
    fns = tuple(r.id for r in open_refs)
    return DetectionOutcome(tuple(tps), tuple(fps), fns, len(references))


def exam_score(candidates: tuple[LesionCandidate, ...] | list[LesionCandidate]) -> float:
    """Exam-level suspicion: the highest candidate probability, 0 if none."""
    return max((c.probability for c in candidates), default=0.0)


def evaluate_exam(
    exam_id: str,
    volume: ProbVolume,
    reference: BinaryMask,
    tau: float = 0.1,
    connectivity: int = 26,
    threshold: float | None = None,
    dynamic: DynamicThresholdParams | None = None,
) -> ExamResult:
    """Threshold, extract candidates, and match against the reference mask.

    Exactly one of ``threshold`` (fixed) or ``dynamic`` must be given.
    """
    if volume.dims != reference.dims:
        raise ValueError(f"volume dims {volume.dims} != reference dims {reference.dims}")
    if (threshold is None) == (dynamic is None):
        raise ValueError("give exactly one of threshold= or dynamic=")
    if threshold is not None:
        mask, t = threshold_volume(volume, threshold), threshold
    else:
        mask, t = dynamic_threshold(volume, dynamic, connectivity)
    candidates = lesion_candidates(volume, mask, connectivity)
    refs = connected_components(reference, connectivity)
    outcome = match_lesions(candidates, refs, tau)
    return ExamResult(
        exam_id=exam_id,
        candidates=candidates,
        outcome=outcome,
        score=exam_score(candidates),
        has_reference=len(refs) > 0,
        threshold=t,
    )


# ---------------------------------------------------------------------------
# Ranking metrics
# ---------------------------------------------------------------------------


def roc_auc(scores: list[float] | np.ndarray, labels: list[int] | np.ndarray) -> float:
    """Probability a random positive outscores a random negative, ties half.

    Computed by exact pair counting over sorted tie groups in integer
    arithmetic (2 per win, 1 per tie), with a single float division at
    the end, so the result matches exhaustive pair enumeration exactly.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1D sequences")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need at least one positive and one negative")
    order = np.argsort(s, kind="stable")
    s, y = s[order], y[order]
    wins2 = 0
    neg_below = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        group_pos = int((y[i:j] == 1).sum())
        group_neg = (j - i) - group_pos
        wins2 += group_pos * (2 * neg_below + group_neg)
        neg_below += group_neg
        i = j
    return wins2 / (2 * n_pos * n_neg)


def exam_auc(results: list[ExamResult]) -> float:
    """Case-level AUC of exam scores against reference presence."""
    scores = [r.score for r in results]
    labels = [1 if r.has_reference else 0 for r in results]
    return roc_auc(scores, labels)


def lesion_auc(outcomes: list[DetectionOutcome]) -> float:
    """Lesion-level AUC over the pooled candidate/reference population.

    True positives contribute (probability, 1), false positives
    (probability, 0), and every missed reference is injected as a
    zero-score positive so undetected lesions still count against the
    ranking.
    """
    scores: list[float] = []
    labels: list[int] = []
    for out in outcomes:
        for tp in out.true_positives:
            scores.append(tp.probability)
            labels.append(1)
        for fp in out.false_positives:
            scores.append(fp.probability)
            labels.append(0)
        for _ in out.false_negatives:
            scores.append(0.0)
            labels.append(1)
    return roc_auc(scores, labels)


def average_precision(outcomes: list[DetectionOutcome]) -> float:
    """Dataset-pooled average precision with step interpolation.

    Candidates from every exam rank together by descending probability
    (ties keep exam-then-candidate order).  Recall uses the total
    reference lesion count as its denominator, so false negatives cap
    the reachable recall even though they never appear in the ranking.
    """
    n_ref = sum(out.n_reference for out in outcomes)
    if n_ref == 0:
        raise ValueError("average precision undefined without reference lesions")
    pool: list[tuple[float, int, int, bool]] = []
    for exam_idx, out in enumerate(outcomes):
        for tp in out.true_positives:
            pool.append((tp.probability, exam_idx, tp.candidate_id, True))
        for fp in out.false_positives:
            pool.append((fp.probability, exam_idx, fp.candidate_id, False))
    pool.sort(key=lambda item: (-item[0], item[1], item[2]))
    ap = 0.0
    tp_seen = 0
    for rank, (_, _, _, is_tp) in enumerate(pool, start=1):
        if is_tp:
            tp_seen += 1
            # Recall steps by 1/n_ref; precision is evaluated at this rank.
            ap += (1.0 / n_ref) * (tp_seen / rank)
    return ap
