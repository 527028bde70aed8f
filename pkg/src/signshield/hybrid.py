"""Three-step hybrid defense: text check, random-filtered candidates, plurality vote."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .classifiers import TrainedModel, predict_batch
from .dataset import CLASS_NAMES
from .errors import ArgumentError, ParameterError
from .featuremap import TextDetector, WordLabelMap, detect_text, map_to_label
from .transforms import DEFAULT_CROP_FRACTION, random_crop_resize, resize_bilinear


class Stage(str, Enum):
    STEP1_MATCH = "STEP1_MATCH"
    STEP1_FEATURE_TRUSTED = "STEP1_FEATURE_TRUSTED"
    ENSEMBLE = "ENSEMBLE"


@dataclass
class HybridConfig:
    m: int = 8
    n: int = 10
    crop_fraction: float = DEFAULT_CROP_FRACTION
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ParameterError(f"m and n must be >= 1, got m={self.m}, n={self.n}")
        if not 0 < self.crop_fraction <= 1:
            raise ParameterError(f"crop fraction must be in (0, 1], got {self.crop_fraction}")


@dataclass
class PipelineDecision:
    label: int
    stage: Stage
    attack_detected: bool
    tally: dict | None = None
    feature_label: int | None = None
    labels_a: list = field(default_factory=list)
    labels_b: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "label": CLASS_NAMES[self.label],
            "stage": self.stage.value,
            "attack_detected": self.attack_detected,
            "tally": None if self.tally is None else {CLASS_NAMES[k]: v for k, v in sorted(self.tally.items())},
            "feature_label": None if self.feature_label is None else CLASS_NAMES[self.feature_label],
        }


def ensemble_vote(labels, rng: np.random.Generator) -> int:
    """Most frequent label; ties are broken uniformly at random with ``rng``."""
    labels = [int(v) for v in labels]
    if not labels:
        raise ArgumentError("cannot vote over an empty label list")
    counts = Counter(labels)
    top = max(counts.values())
    tied = sorted(k for k, v in counts.items() if v == top)
    if len(tied) == 1:
        return tied[0]
    return tied[int(rng.integers(len(tied)))]


def candidate_labels(model: TrainedModel, x: np.ndarray, count: int, fraction: float,
                     rng: np.random.Generator) -> list[int]:
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    crops = np.stack([random_crop_resize(x, fraction, rng) for _ in range(count)])
    return [int(v) for v in predict_batch(model, crops)]


def random_filter_label(model: TrainedModel, x: np.ndarray, rng: np.random.Generator, count: int = 8,
                        fraction: float = DEFAULT_CROP_FRACTION) -> int:
    """Stand-alone random filtering: vote over ``count`` crops of one model."""
    crop_rng, tie_rng = rng.spawn(2)
    return ensemble_vote(candidate_labels(model, x, count, fraction, crop_rng), tie_rng)


def classify_hybrid(x: np.ndarray, model_a: TrainedModel, model_b: TrainedModel,
                    detector: TextDetector | None = None, word_map: WordLabelMap | None = None,
                    cfg: HybridConfig | None = None, rng: np.random.Generator | None = None) -> PipelineDecision:
    """Run the full defense on one image at model A's resolution.

    Model A's label is the plurality over ``m`` random crops. A word-map
    label that agrees with it is accepted; one that disagrees overrides
    it and flags an attack. Without a word-map label the ``m`` A labels
    and ``n`` labels from model B (on a resized copy) are pooled and
    voted on.
    """
    cfg = cfg or HybridConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    crop_a, crop_b, ties = rng.spawn(3)

    labels_a = candidate_labels(model_a, x, cfg.m, cfg.crop_fraction, crop_a)
    label_a = ensemble_vote(labels_a, ties)
    feat = map_to_label([d.word for d in detect_text(x, detector)], word_map)
    if feat is not None:
        if feat == label_a:
            return PipelineDecision(label_a, Stage.STEP1_MATCH, False, feature_label=feat, labels_a=labels_a)
        return PipelineDecision(feat, Stage.STEP1_FEATURE_TRUSTED, True, feature_label=feat, labels_a=labels_a)

    h, w = model_b.input_shape[:2]
    labels_b = candidate_labels(model_b, resize_bilinear(x, h, w), cfg.n, cfg.crop_fraction, crop_b)
    pooled = labels_a + labels_b
    final = ensemble_vote(pooled, ties)
    return PipelineDecision(final, Stage.ENSEMBLE, False, tally=dict(Counter(pooled)),
                            labels_a=labels_a, labels_b=labels_b)
