"""Selection of in-context-learning examples from a labelled incident pool.

The pipeline: z-score the feature space (with cyclic time encoding), drop
outliers that sit closer to another class's centroid than to their own, keep
the near-boundary fraction of each class, draw stratified candidate example
sets, score each candidate on a validation set with the prediction provider,
and concatenate the top-k candidates into the final example list.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import (
    DegeneratePoolError,
    InsufficientClassError,
    InvalidInputError,
    MissingClassError,
    ProviderError,
)
from .model import (
    CLASSES,
    ClassThresholds,
    DEFAULT_THRESHOLDS,
    FeatureVector,
    ImpactClass,
    LabeledExample,
    minutes_of_day,
)

log = logging.getLogger(__name__)

FEATURE_NAMES: Tuple[str, ...] = (
    "time_sin",
    "time_cos",
    "num_vehicles",
    "num_lanes_blocked",
    "pre_incident_relative_speed",
    "initial_decrease_ratio",
)

MINUTES_PER_DAY = 24 * 60


def encode_feature_vector(fv: FeatureVector) -> np.ndarray:
    """Numeric encoding used for all distance computations.

    The incident time becomes (sin, cos) of its time-of-day angle so 23:55 and
    00:05 land close together; prompts still render clock time.
    """
    angle = 2.0 * math.pi * minutes_of_day(fv.incident_time) / MINUTES_PER_DAY
    return np.array(
        [
            math.sin(angle),
            math.cos(angle),
            float(fv.num_vehicles),
            float(fv.num_lanes_blocked),
            fv.pre_incident_relative_speed,
            fv.initial_decrease_ratio,
        ]
    )


def encode_examples(examples: Sequence[LabeledExample]) -> np.ndarray:
    if not examples:
        return np.empty((0, len(FEATURE_NAMES)))
    return np.stack([encode_feature_vector(e.feature_vector) for e in examples])


@dataclass(frozen=True)
class Normalizer:
    """Per-feature z-score parameters; zero-variance dimensions are dropped."""

    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray  # boolean mask over FEATURE_NAMES

    @property
    def dropped_features(self) -> Tuple[str, ...]:
        return tuple(name for name, keep in zip(FEATURE_NAMES, self.kept) if not keep)

    def transform(self, encoded: np.ndarray) -> np.ndarray:
        """Map encoded vectors ((n, 6) or (6,)) into the kept, z-scored space."""
        x = np.atleast_2d(encoded)[:, self.kept]
        z = (x - self.mean) / self.std
        return z[0] if encoded.ndim == 1 else z

    def transform_examples(self, examples: Sequence[LabeledExample]) -> np.ndarray:
        return self.transform(encode_examples(examples))


def fit_normalizer(pool: Sequence[LabeledExample]) -> Normalizer:
    """Fit z-score parameters on a labelled pool.

    Raises:
        DegeneratePoolError: fewer than two distinct feature vectors, or no
            feature dimension varies.
    """
    if len(pool) < 2:
        raise DegeneratePoolError(f"need at least 2 examples to normalize, got {len(pool)}")
    x = encode_examples(pool)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    kept = std > 0
    if not kept.any():
        raise DegeneratePoolError("every feature dimension has zero variance")
    return Normalizer(mean=mean[kept], std=std[kept], kept=kept)


def class_centroids(
    pool: Sequence[LabeledExample], normalizer: Normalizer
) -> Dict[ImpactClass, np.ndarray]:
    """Arithmetic mean of each class's members in normalized space.

    Raises:
        MissingClassError: naming the first class with no members.
    """
    z = normalizer.transform_examples(pool)
    centroids: Dict[ImpactClass, np.ndarray] = {}
    labels = np.array([e.truth for e in pool])
    for cls in CLASSES:
        members = z[labels == cls]
        if members.shape[0] == 0:
            raise MissingClassError(f"class {cls.word} has no members in the pool")
        centroids[cls] = members.mean(axis=0)
    return centroids


def filter_outliers(
    pool: Sequence[LabeledExample],
    centroids: Mapping[ImpactClass, np.ndarray],
    normalizer: Normalizer,
) -> Tuple[List[LabeledExample], List[LabeledExample]]:
    """Split the pool into (non_outliers, outliers).

    An example is an outlier iff it is strictly closer (Euclidean, normalized
    space) to some other class's centroid than to its own; ties stay inside.
    """
    non_outliers: List[LabeledExample] = []
    outliers: List[LabeledExample] = []
    for example in pool:
        z = normalizer.transform(encode_feature_vector(example.feature_vector))
        own = float(np.linalg.norm(z - centroids[example.truth]))
        other = min(
            float(np.linalg.norm(z - centroids[c])) for c in CLASSES if c != example.truth
        )
        (outliers if other < own else non_outliers).append(example)
    return non_outliers, outliers


def near_boundary_subset(
    non_outliers: Sequence[LabeledExample],
    centroids: Mapping[ImpactClass, np.ndarray],
    normalizer: Normalizer,
    fraction: float = 0.5,
) -> Dict[ImpactClass, List[LabeledExample]]:
    """Per class, the fraction of non-outliers closest to the neighbor class.

    Mild and severe rank by distance to the moderate centroid; moderate ranks
    by the smaller of its distances to the mild and severe centroids. Keeps
    ceil(fraction * class size) members per class.
    """
    if not (0.0 < fraction <= 1.0):
        raise InvalidInputError(f"fraction must be in (0, 1], got {fraction}")
    by_class: Dict[ImpactClass, List[Tuple[float, int, LabeledExample]]] = {c: [] for c in CLASSES}
    for position, example in enumerate(non_outliers):
        z = normalizer.transform(encode_feature_vector(example.feature_vector))
        key = min(
            float(np.linalg.norm(z - centroids[neighbor]))
            for neighbor in example.truth.neighbors
        )
        by_class[example.truth].append((key, position, example))
    subset: Dict[ImpactClass, List[LabeledExample]] = {}
    for cls in CLASSES:
        ranked = sorted(by_class[cls], key=lambda item: (item[0], item[1]))
        keep = math.ceil(fraction * len(ranked))
        subset[cls] = [example for _, _, example in ranked[:keep]]
    return subset


@dataclass(frozen=True)
class SelectionConfig:
    """Knobs of the example-selection procedure."""

    m: int = 12  # examples per candidate prompt, stratified m/3 per class
    n_candidates: int = 30
    k_top: int = 2
    near_boundary_fraction: float = 0.5
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.m <= 0 or self.m % 3 != 0:
            raise InvalidInputError(f"m must be a positive multiple of 3, got {self.m}")
        if self.k_top > self.n_candidates:
            raise InvalidInputError(
                f"k_top ({self.k_top}) cannot exceed n_candidates ({self.n_candidates})"
            )
        if not (0.0 < self.near_boundary_fraction <= 1.0):
            raise InvalidInputError(
                f"near_boundary_fraction must be in (0, 1], got {self.near_boundary_fraction}"
            )


@dataclass(frozen=True)
class CandidateResult:
    """One scored candidate example set."""

    candidate_index: int
    examples: Tuple[LabeledExample, ...]
    validation_score: float


def sample_example_set(
    near_boundary: Mapping[ImpactClass, Sequence[LabeledExample]],
    non_outliers: Mapping[ImpactClass, Sequence[LabeledExample]],
    m: int,
    rng: np.random.Generator,
) -> List[LabeledExample]:
    """Draw m/3 examples per class, preferring near-boundary members.

    When a class's near-boundary list is short, the draw is topped up from
    that class's remaining non-outliers.

    Raises:
        InsufficientClassError: a class has fewer than m/3 non-outliers total.
    """
    if m % 3 != 0:
        raise InvalidInputError(f"m must be a multiple of 3, got {m}")
    per_class = m // 3
    chosen: List[LabeledExample] = []
    for cls in CLASSES:
        boundary = list(near_boundary.get(cls, ()))
        total = list(non_outliers.get(cls, ()))
        if len(total) < per_class:
            raise InsufficientClassError(
                f"class {cls.word} has {len(total)} usable examples, need {per_class}"
            )
        take = min(per_class, len(boundary))
        picked = [boundary[i] for i in rng.choice(len(boundary), size=take, replace=False)]
        if take < per_class:
            picked_ids = {id(e) for e in picked}
            remainder = [e for e in total if id(e) not in picked_ids]
            extra = rng.choice(len(remainder), size=per_class - take, replace=False)
            picked.extend(remainder[i] for i in extra)
        chosen.extend(picked)
    return chosen


def generate_candidates(
    near_boundary: Mapping[ImpactClass, Sequence[LabeledExample]],
    non_outliers: Mapping[ImpactClass, Sequence[LabeledExample]],
    config: SelectionConfig,
) -> List[List[LabeledExample]]:
    """n_candidates independent stratified draws, one rng stream per candidate."""
    candidates = []
    for index in range(config.n_candidates):
        rng = np.random.default_rng([config.rng_seed, index])
        candidates.append(sample_example_set(near_boundary, non_outliers, config.m, rng))
    return candidates


def evaluate_candidate(
    examples: Sequence[LabeledExample],
    validation: Sequence[LabeledExample],
    provider: "LlmProvider",  # noqa: F821 - protocol defined in gateway
    horizon_minutes: int,
    thresholds: ClassThresholds = DEFAULT_THRESHOLDS,
) -> float:
    """Fraction of the validation set the provider classifies correctly.

    A prediction that errors out counts as incorrect and is logged.
    """
    from .gateway import PromptPair, predict_impact
    from .prompts import render_system_prompt, render_user_prompt

    if not validation:
        raise InvalidInputError("validation set is empty")
    system_text = render_system_prompt(examples, horizon_minutes, thresholds)
    correct = 0
    for item in validation:
        user_text = render_user_prompt(item.feature_vector, horizon_minutes)
        try:
            predicted, _ = predict_impact(provider, PromptPair(system_text, user_text))
        except ProviderError as exc:
            log.warning("validation prediction failed for %s: %s", item.incident_id, exc)
            continue
        if predicted == item.truth:
            correct += 1
    return correct / len(validation)


def select_top_k(results: Sequence[CandidateResult], k_top: int) -> List[LabeledExample]:
    """Concatenate the k_top best-scoring candidates' example lists.

    Sorted by score descending, ties broken by lower candidate index; examples
    appearing in several winners are kept verbatim.
    """
    if len(results) < k_top:
        raise InvalidInputError(f"need at least {k_top} candidate results, got {len(results)}")
    ranked = sorted(results, key=lambda r: (-r.validation_score, r.candidate_index))
    combined: List[LabeledExample] = []
    for result in ranked[:k_top]:
        combined.extend(result.examples)
    return combined


def split_validation(
    training_set: Sequence[LabeledExample],
    per_class: int,
    rng: np.random.Generator,
) -> Tuple[List[LabeledExample], List[LabeledExample]]:
    """Stratified random validation draw; the remainder becomes the example pool.

    Raises:
        InsufficientClassError: naming the class and shortfall.
    """
    if per_class <= 0:
        raise InvalidInputError(f"per_class must be positive, got {per_class}")
    validation: List[LabeledExample] = []
    chosen_ids: set = set()
    for cls in CLASSES:
        members = [e for e in training_set if e.truth == cls]
        if len(members) < per_class:
            raise InsufficientClassError(
                f"class {cls.word} has {len(members)} training examples, "
                f"need {per_class} for validation (short by {per_class - len(members)})"
            )
        picks = rng.choice(len(members), size=per_class, replace=False)
        for i in picks:
            validation.append(members[i])
            chosen_ids.add(id(members[i]))
    pool = [e for e in training_set if id(e) not in chosen_ids]
    return validation, pool


@dataclass(frozen=True)
class SelectionOutcome:
    """Everything the selection stage produced, for auditing and reuse."""

    normalizer: Normalizer
    outliers: Tuple[LabeledExample, ...]
    candidates: Tuple[CandidateResult, ...]
    winner_indices: Tuple[int, ...]
    final_examples: Tuple[LabeledExample, ...]


def select_examples(
    pool: Sequence[LabeledExample],
    validation: Sequence[LabeledExample],
    provider: "LlmProvider",  # noqa: F821
    horizon_minutes: int,
    config: SelectionConfig,
    thresholds: ClassThresholds = DEFAULT_THRESHOLDS,
) -> SelectionOutcome:
    """Run the full selection pipeline over an example pool."""
    normalizer = fit_normalizer(pool)
    centroids = class_centroids(pool, normalizer)
    non_outliers, outliers = filter_outliers(pool, centroids, normalizer)
    boundary = near_boundary_subset(
        non_outliers, centroids, normalizer, config.near_boundary_fraction
    )
    by_class = {c: [e for e in non_outliers if e.truth == c] for c in CLASSES}
    candidate_sets = generate_candidates(boundary, by_class, config)
    results = []
    for index, examples in enumerate(candidate_sets):
        score = evaluate_candidate(examples, validation, provider, horizon_minutes, thresholds)
        results.append(
            CandidateResult(
                candidate_index=index,
                examples=tuple(examples),
                validation_score=score,
            )
        )
    final = select_top_k(results, config.k_top)
    ranked = sorted(results, key=lambda r: (-r.validation_score, r.candidate_index))
    winners = tuple(r.candidate_index for r in ranked[: config.k_top])
    return SelectionOutcome(
        normalizer=normalizer,
        outliers=tuple(outliers),
        candidates=tuple(results),
        winner_indices=winners,
        final_examples=tuple(final),
    )
