"""Hybrid defense against adversarial attacks on traffic sign classifiers.

A numpy-only convolutional network engine, two small sign classifiers,
a synthetic 18-class sign renderer, white-box attacks (FGSM, MIM, PGD,
C&W-L2), input-transformation defenses, a glyph-template text reader,
and the hybrid pipeline that combines them, plus the evaluation harness
and ``signshield`` command line.
"""

from .attacks import (AttackResult, CwConfig, FgsmConfig, MimConfig, ModelOracle, PgdConfig, attack_batch, cw_l2,
                      fgsm, mim, pgd)
from .classifiers import (ModelArchitecture, ModelId, TrainConfig, TrainedModel, architecture, load_model, predict,
                          save_model, train)
from .dataset import CLASS_NAMES, SIGN_CLASSES, generate_synthetic, load_directory, render_sign
from .errors import SignShieldError
from .evaluation import EvaluationReport, SweepReport, compute_metrics, evaluate, evaluate_defenses, sweep_epsilon
from .featuremap import GlyphTemplateDetector, WordLabelMap, detect_text, map_to_label
from .hybrid import HybridConfig, PipelineDecision, Stage, classify_hybrid, ensemble_vote
from .transforms import binary_filter, bit_squeeze, dct_quantize, random_crop_resize, resize_bilinear

__version__ = "0.1.0"
