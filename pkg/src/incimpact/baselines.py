"""Reference classifiers and class-imbalance resampling.

Nearest-centroid and k-nearest-neighbor models stand in as the trained
comparison references; combined resampling (majority undersampling plus
synthetic minority oversampling) balances the training set before fitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import time
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InsufficientClassError, InvalidInputError, MissingClassError
from .model import CLASSES, FeatureVector, ImpactClass, LabeledExample
from .selection import (
    FEATURE_NAMES,
    Normalizer,
    class_centroids,
    encode_examples,
    encode_feature_vector,
    fit_normalizer,
)

# Indices of integer-valued dimensions in the encoded feature space.
_INTEGER_DIMS = (FEATURE_NAMES.index("num_vehicles"), FEATURE_NAMES.index("num_lanes_blocked"))
_TIME_DIMS = (FEATURE_NAMES.index("time_sin"), FEATURE_NAMES.index("time_cos"))


@dataclass(frozen=True)
class ResampleConfig:
    """Combined-resampling knobs.

    undersample_ratio None applies the default rule: the majority class drops
    to twice the largest minority class before the minorities are filled in.
    """

    undersample_ratio: Optional[float] = None
    smote_neighbors: int = 5
    target_per_class: Union[int, str] = "match-majority-after-undersample"
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.undersample_ratio is not None and not (0.0 < self.undersample_ratio <= 1.0):
            raise InvalidInputError(
                f"undersample_ratio must be in (0, 1], got {self.undersample_ratio}"
            )
        if self.smote_neighbors < 1:
            raise InvalidInputError(f"smote_neighbors must be >= 1, got {self.smote_neighbors}")


def smote_synthesize(
    minority: np.ndarray,
    k_neighbors: int,
    n_new: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Interpolated synthetic points: x + lambda * (nn - x), lambda uniform in [0, 1].

    Neighbors are the k nearest same-class members in z-scored space; integer
    dimensions (vehicle and lane counts) are rounded after interpolation.

    Raises:
        InvalidInputError: fewer than two members, or k_neighbors too large.
    """
    minority = np.asarray(minority, dtype=np.float64)
    n = minority.shape[0]
    if n < 2:
        raise InvalidInputError(f"SMOTE needs at least 2 members, got {n}")
    if not (1 <= k_neighbors <= n - 1):
        raise InvalidInputError(f"k_neighbors must be in [1, {n - 1}], got {k_neighbors}")
    if n_new <= 0:
        return np.empty((0, minority.shape[1]))

    # Scale-free neighbor search; constant dimensions contribute nothing.
    std = minority.std(axis=0)
    std[std == 0] = 1.0
    z = (minority - minority.mean(axis=0)) / std
    d2 = ((z[:, None, :] - z[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    neighbor_idx = np.argsort(d2, axis=1, kind="stable")[:, :k_neighbors]

    base = rng.integers(0, n, size=n_new)
    pick = rng.integers(0, k_neighbors, size=n_new)
    lam = rng.uniform(0.0, 1.0, size=n_new)
    x = minority[base]
    nn = minority[neighbor_idx[base, pick]]
    synthetic = x + lam[:, None] * (nn - x)
    for dim in _INTEGER_DIMS:
        synthetic[:, dim] = np.rint(synthetic[:, dim])
    return synthetic


def _decode_example(
    vector: np.ndarray, truth: ImpactClass, horizon_minutes: int, incident_id: str
) -> LabeledExample:
    """Turn an encoded vector back into a LabeledExample (time from its sin/cos)."""
    angle = math.atan2(vector[_TIME_DIMS[0]], vector[_TIME_DIMS[1]])
    minutes = int(round(angle / (2 * math.pi) * 1440)) % 1440
    fv = FeatureVector(
        incident_time=time(minutes // 60, minutes % 60),
        num_vehicles=max(int(round(vector[2])), 0),
        num_lanes_blocked=max(int(round(vector[3])), 0),
        pre_incident_relative_speed=float(vector[4]),
        initial_decrease_ratio=max(float(vector[5]), 0.0),
    )
    return LabeledExample(
        feature_vector=fv, horizon_minutes=horizon_minutes, truth=truth, incident_id=incident_id
    )


def combined_resample(
    train: Sequence[LabeledExample], config: ResampleConfig
) -> List[LabeledExample]:
    """Undersample the majority class, then SMOTE the minorities up to balance.

    Retained originals pass through unchanged; synthetic examples get ids of
    the form ``synthetic:<class>:<n>``. Output class counts differ pairwise by
    at most one.

    Raises:
        InsufficientClassError: a class has fewer than 2 members.
    """
    by_class: Dict[ImpactClass, List[LabeledExample]] = {c: [] for c in CLASSES}
    for example in train:
        by_class[example.truth].append(example)
    for cls in CLASSES:
        if len(by_class[cls]) < 2:
            raise InsufficientClassError(
                f"class {cls.word} has {len(by_class[cls])} members; resampling needs >= 2"
            )
    horizon = train[0].horizon_minutes
    rng = np.random.default_rng([config.rng_seed, 1])

    counts = {c: len(by_class[c]) for c in CLASSES}
    majority = max(CLASSES, key=lambda c: (counts[c], -int(c)))
    largest_minority = max(counts[c] for c in CLASSES if c != majority)
    if config.undersample_ratio is None:
        kept_majority = min(counts[majority], max(2 * largest_minority, 2))
    else:
        kept_majority = max(int(math.ceil(counts[majority] * config.undersample_ratio)), 1)
    kept_majority = max(kept_majority, largest_minority)

    if config.target_per_class == "match-majority-after-undersample":
        target = kept_majority
    else:
        target = int(config.target_per_class)

    resampled: List[LabeledExample] = []
    for cls in CLASSES:
        members = by_class[cls]
        if cls is majority and len(members) > kept_majority:
            picks = rng.choice(len(members), size=kept_majority, replace=False)
            members = [members[i] for i in sorted(picks)]
        resampled.extend(members)
        shortfall = target - len(members)
        if shortfall > 0:
            vectors = encode_examples(members)
            k = min(config.smote_neighbors, len(members) - 1)
            synthetic = smote_synthesize(vectors, k, shortfall, rng)
            for i in range(synthetic.shape[0]):
                resampled.append(
                    _decode_example(
                        synthetic[i], cls, horizon, f"synthetic:{cls.word}:{i}"
                    )
                )
    return resampled


@dataclass(frozen=True)
class NearestCentroidModel:
    normalizer: Normalizer
    centroids: Dict[ImpactClass, np.ndarray]


def nearest_centroid_fit(train: Sequence[LabeledExample]) -> NearestCentroidModel:
    """Z-scored class centroids.

    Raises:
        MissingClassError: some class has no training members.
    """
    normalizer = fit_normalizer(train)
    return NearestCentroidModel(
        normalizer=normalizer, centroids=class_centroids(train, normalizer)
    )


def nearest_centroid_predict(model: NearestCentroidModel, features: FeatureVector) -> ImpactClass:
    """Class of the nearest centroid; exact ties resolve toward the milder class."""
    z = model.normalizer.transform(encode_feature_vector(features))
    best = CLASSES[0]
    best_dist = float("inf")
    for cls in CLASSES:  # mild first, so ties keep the milder class
        dist = float(np.linalg.norm(z - model.centroids[cls]))
        if dist < best_dist - 1e-12:
            best, best_dist = cls, dist
    return best


@dataclass(frozen=True)
class KnnModel:
    normalizer: Normalizer
    points: np.ndarray
    labels: np.ndarray


def knn_fit(train: Sequence[LabeledExample]) -> KnnModel:
    normalizer = fit_normalizer(train)
    return KnnModel(
        normalizer=normalizer,
        points=normalizer.transform_examples(train),
        labels=np.array([int(e.truth) for e in train]),
    )


def knn_predict_model(model: KnnModel, features: FeatureVector, k_nn: int = 5) -> ImpactClass:
    if not (1 <= k_nn <= model.points.shape[0]):
        raise InvalidInputError(
            f"k_nn must be in [1, {model.points.shape[0]}], got {k_nn}"
        )
    z = model.normalizer.transform(encode_feature_vector(features))
    distances = np.linalg.norm(model.points - z, axis=1)
    nearest = np.argsort(distances, kind="stable")[:k_nn]
    votes = np.bincount(model.labels[nearest], minlength=3)
    best = votes.max()
    return CLASSES[int(np.flatnonzero(votes == best)[0])]  # ties toward the milder class


def knn_predict(
    train: Sequence[LabeledExample], features: FeatureVector, k_nn: int = 5
) -> ImpactClass:
    """Majority vote among the k nearest z-scored training examples."""
    if len(train) < k_nn:
        raise InvalidInputError(f"need at least k_nn={k_nn} training examples, got {len(train)}")
    return knn_predict_model(knn_fit(train), features, k_nn)
