"""Binary annotation handling and the confidence-weighted pair kernel.

Exams carry zero or more binary suspicion votes derived from radiology
scores (PI-RADS) or pathology grades (ISUP).  Each exam is summarized by a
majority label plus a confidence in (0, 1]; exams without a usable majority
stay unlabeled.  Pairs of labeled exams are weighted by a kernel that is 1
on the diagonal (two views of the same exam), min(c_i, c_j) for equal
labels, and 0 for different labels, with ablation variants that coarsen
the confidence weighting.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

__all__ = [
    "DEFAULT_EPSILON",
    "AnnotationError",
    "Source",
    "RawAnnotation",
    "AnnotationVector",
    "MetadataSummary",
    "KernelVariant",
    "KernelMatrix",
    "binarize",
    "confidence",
    "summarize",
    "summarize_batch",
    "pair_weight",
    "kernel_matrix",
]

# Confidence assigned to single-vote exams: one report is weak evidence.
DEFAULT_EPSILON = 0.1

# Weight shared by the coarse ablation kernels for equal-label pairs.
COARSE_WEIGHT = 0.8

PIRADS_RANGE = (1, 5)
ISUP_RANGE = (0, 5)


class AnnotationError(ValueError):
    """Raised for out-of-range scores or malformed vote vectors."""


class Source(enum.Enum):
    """Origin of a raw score; determines the binarization rule."""

    PIRADS = "pirads"
    ISUP = "isup"


class KernelVariant(enum.Enum):
    PROPOSED = "proposed"
    HIGH_CONFIDENCE = "hc"
    MAJORITY_VOTING = "majority"


@dataclass(frozen=True)
class RawAnnotation:
    """One score attached to one exam, validated at construction."""

    exam_id: str
    source: Source
    value: int

    def __post_init__(self) -> None:
        lo, hi = PIRADS_RANGE if self.source is Source.PIRADS else ISUP_RANGE
        if not (lo <= self.value <= hi):
            raise AnnotationError(
                f"exam {self.exam_id!r}: {self.source.value} value {self.value} "
                f"outside [{lo}, {hi}]"
            )


@dataclass(frozen=True)
class AnnotationVector:
    """Binary votes for one exam, abstentions already removed.

    ``sources`` records where each vote came from; it always has the same
    length as ``votes``.  An empty vector is legal and means the exam has
    no usable annotation.
    """

    exam_id: str
    votes: tuple[int, ...] = ()
    sources: tuple[Source, ...] = ()

    def __post_init__(self) -> None:
        if len(self.votes) != len(self.sources):
            raise AnnotationError(
                f"exam {self.exam_id!r}: {len(self.votes)} votes but "
                f"{len(self.sources)} source tags"
            )
        if any(v not in (0, 1) for v in self.votes):
            raise AnnotationError(f"exam {self.exam_id!r}: votes must be 0 or 1")

    @property
    def n(self) -> int:
        return len(self.votes)


@dataclass(frozen=True)
class MetadataSummary:
    """Majority label and confidence for one exam, or the unlabeled state.

    ``label is None`` marks the unlabeled state, reached when the vote
    vector is empty or the vote is tied.  A labeled summary always has
    confidence in (0, 1].
    """

    exam_id: str
    label: int | None = None
    confidence: float | None = None

    @property
    def is_labeled(self) -> bool:
        return self.label is not None

    @classmethod
    def labeled(cls, exam_id: str, label: int, conf: float) -> "MetadataSummary":
        if not (0.0 < conf <= 1.0):
            raise AnnotationError(
                f"exam {exam_id!r}: labeled confidence {conf} outside (0, 1]"
            )
        return cls(exam_id, label, conf)

    @classmethod
    def unlabeled(cls, exam_id: str) -> "MetadataSummary":
        return cls(exam_id, None, None)


@dataclass(frozen=True)
class KernelMatrix:
    """Pairwise weights over a batch of labeled exams.

    ``weights[i, j]`` weighs the pair (view 1 of exam i, view 2 of exam j);
    the diagonal marks same-exam pairs and is identically 1.
    """

    weights: np.ndarray
    same_exam: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"kernel must be square, got shape {w.shape}")
        object.__setattr__(self, "weights", w)
        if self.same_exam is None:
            object.__setattr__(self, "same_exam", np.eye(len(w), dtype=bool))

    @property
    def n(self) -> int:
        return self.weights.shape[0]


# ---------------------------------------------------------------------------
# Binarization and confidence
# ---------------------------------------------------------------------------


def binarize(source: Source, value: int) -> int | None:
    """Map a raw score to a binary suspicion vote.

    PI-RADS 1-2 vote 0, PI-RADS 4-5 vote 1, and PI-RADS 3 abstains
    (returns None): an equivocal read contributes no vote.  ISUP grades
    at most 1 vote 0 and grades 2 and above vote 1; there is no ISUP
    abstention.  Out-of-range values are rejected.
    """
    if source is Source.PIRADS:
        if not (PIRADS_RANGE[0] <= value <= PIRADS_RANGE[1]):
            raise AnnotationError(f"pirads value {value} outside {PIRADS_RANGE}")
        if value == 3:
            return None
        return 0 if value <= 2 else 1
    if source is Source.ISUP:
        if not (ISUP_RANGE[0] <= value <= ISUP_RANGE[1]):
            raise AnnotationError(f"isup value {value} outside {ISUP_RANGE}")
        return 0 if value <= 1 else 1
    raise AnnotationError(f"unknown source {source!r}")


def confidence(votes: tuple[int, ...] | list[int], epsilon: float = DEFAULT_EPSILON) -> float:
    """Majority-vote confidence of a nonempty binary vote vector.

    A single vote earns the floor confidence ``epsilon``.  With n > 1
    votes the confidence is 2 * (majority_count / n - 1/2): 0 for a tie,
    1 for unanimity, and strictly increasing in the majority count.  The
    ratio is formed in exact integer arithmetic and rounded to float once.
    """
    n = len(votes)
    if n == 0:
        raise AnnotationError("confidence of an empty vote vector is undefined")
    if not (0.0 < epsilon <= 1.0):
        raise AnnotationError(f"epsilon {epsilon} outside (0, 1]")
    if n == 1:
        return epsilon
    ones = sum(1 for v in votes if v == 1)
    majority_count = max(ones, n - ones)
    return float(Fraction(2 * majority_count - n, n))


def summarize(
    vector: AnnotationVector,
    epsilon: float = DEFAULT_EPSILON,
    epsilon_overrides: dict[str, float] | None = None,
) -> MetadataSummary:
    """Collapse an exam's votes to a labeled or unlabeled summary.

    Empty vectors and exact ties are unlabeled.  ``epsilon_overrides``
    substitutes a per-exam single-vote confidence before evaluation (used
    to trust pathology-grade exams fully).
    """
    if epsilon_overrides and vector.exam_id in epsilon_overrides:
        epsilon = epsilon_overrides[vector.exam_id]
    if vector.n == 0:
        return MetadataSummary.unlabeled(vector.exam_id)
    ones = sum(vector.votes)
    zeros = vector.n - ones
    if ones == zeros:
        return MetadataSummary.unlabeled(vector.exam_id)
    label = 1 if ones > zeros else 0
    return MetadataSummary.labeled(vector.exam_id, label, confidence(vector.votes, epsilon))


def summarize_batch(
    vectors: list[AnnotationVector],
    epsilon: float = DEFAULT_EPSILON,
    epsilon_overrides: dict[str, float] | None = None,
) -> list[MetadataSummary]:
    return [summarize(v, epsilon, epsilon_overrides) for v in vectors]


# ---------------------------------------------------------------------------
# Pair kernel
# ---------------------------------------------------------------------------


def pair_weight(
    s_i: MetadataSummary,
    s_j: MetadataSummary,
    same_exam: bool,
    variant: KernelVariant = KernelVariant.PROPOSED,
) -> float:
    """Kernel weight for one ordered pair of exam summaries.

    Same-exam pairs weigh 1 regardless of metadata.  Across exams both
    summaries must be labeled; pairs with different labels weigh 0, and
    equal-label pairs weigh

    - PROPOSED: min(c_i, c_j),
    - HIGH_CONFIDENCE: 0.8 when both confidences are exactly 1, else 0,
    - MAJORITY_VOTING: 0.8 flat.
    """
    if same_exam:
        return 1.0
    if not (s_i.is_labeled and s_j.is_labeled):
        bad = s_i if not s_i.is_labeled else s_j
        raise AnnotationError(
            f"exam {bad.exam_id!r} is unlabeled; cross-exam weights need labels"
        )
    if s_i.label != s_j.label:
        return 0.0
    if variant is KernelVariant.PROPOSED:
        return min(s_i.confidence, s_j.confidence)  # type: ignore[arg-type]
    if variant is KernelVariant.HIGH_CONFIDENCE:
        # Confidence is an exact integer ratio, so equality with 1 is sharp.
        return COARSE_WEIGHT if s_i.confidence == 1.0 and s_j.confidence == 1.0 else 0.0
    if variant is KernelVariant.MAJORITY_VOTING:
        return COARSE_WEIGHT
    raise ValueError(f"unknown kernel variant {variant!r}")


def kernel_matrix(
    summaries: list[MetadataSummary],
    variant: KernelVariant = KernelVariant.PROPOSED,
) -> KernelMatrix:
    """Full pairwise weight matrix for a batch of labeled exams.

    Entry (i, j) equals ``pair_weight`` with same_exam exactly on the
    diagonal, so the result is symmetric with unit diagonal and entries
    in [0, 1].  Built vectorized; ``pair_weight`` stays the single-pair
    reference semantics.
    """
    for s in summaries:
        if not s.is_labeled:
            raise AnnotationError(
                f"exam {s.exam_id!r} is unlabeled; kernels are built over labeled exams"
            )
    n = len(summaries)
    if n == 0:
        return KernelMatrix(np.zeros((0, 0), dtype=np.float64))
    labels = np.array([s.label for s in summaries])
    conf = np.array([s.confidence for s in summaries], dtype=np.float64)
    equal = labels[:, None] == labels[None, :]
    if variant is KernelVariant.PROPOSED:
        w = np.where(equal, np.minimum(conf[:, None], conf[None, :]), 0.0)
    elif variant is KernelVariant.HIGH_CONFIDENCE:
        sure = conf == 1.0
        w = np.where(equal & sure[:, None] & sure[None, :], COARSE_WEIGHT, 0.0)
    elif variant is KernelVariant.MAJORITY_VOTING:
        w = np.where(equal, COARSE_WEIGHT, 0.0)
    else:
        raise ValueError(f"unknown kernel variant {variant!r}")
    np.fill_diagonal(w, 1.0)
    return KernelMatrix(w)
