"""Stub models and independent reference implementations shared by the test modules."""

import math
from fractions import Fraction

import numpy as np

from signshield import classifiers as C
from signshield import tensor as T


def constant_model(label, model_id="A"):
    """A model whose logits ignore the input: always ``label``."""
    arch = C.architecture(model_id)
    layers = (T.flatten(), T.dense("d", 18))
    size = int(np.prod(arch.input_shape))
    bias = np.zeros(18, np.float32)
    bias[label] = 1
    params = {"d.w": np.zeros((size, 18), np.float32), "d.b": bias}
    return C.TrainedModel(C.ModelArchitecture(arch.id, arch.input_shape, layers),
                          T.Network(arch.input_shape, layers, params))


def random_model(model_id, seed=0):
    """Glorot-initialised, untrained model."""
    arch = C.architecture(model_id)
    params = T.glorot_init(arch.layers, arch.input_shape, np.random.default_rng(seed))
    return C.TrainedModel(arch, T.Network(arch.input_shape, arch.layers, params))


def reference_mim(grad_fn, x, steps, alpha, decay):
    """Per-element scalar re-implementation of the momentum recurrence."""
    xs = [float(v) for v in x]
    g = [0.0] * len(xs)
    out = []
    for _ in range(steps):
        grad = [float(v) for v in grad_fn(np.array(xs, dtype=np.float32))]
        l1 = math.fsum(abs(v) for v in grad)
        for i in range(len(xs)):
            g[i] = decay * g[i] + (grad[i] / l1 if l1 > 0 else 0.0)
            s = (g[i] > 0) - (g[i] < 0)
            xs[i] = float(np.float32(min(max(xs[i] + alpha * s, 0.0), 1.0)))
        out.append((list(g), list(xs)))
    return out


def scalar_metrics(pairs, k):
    """Independent oracle: per-class counts by direct loops over the pairs."""
    prec, rec, f1, sup = [], [], [], []
    for c in range(k):
        tp = sum(1 for t, p in pairs if t == c and p == c)
        pred = sum(1 for _, p in pairs if p == c)
        true = sum(1 for t, _ in pairs if t == c)
        pc = Fraction(tp, pred) if pred else Fraction(0)
        rc = Fraction(tp, true) if true else Fraction(0)
        prec.append(pc)
        rec.append(rc)
        f1.append(2 * pc * rc / (pc + rc) if pc + rc else Fraction(0))
        sup.append(true)
    n = len(pairs)

    def weighted(vals):
        return float(sum(Fraction(s) * v for s, v in zip(sup, vals)) / n)

    return {
        "precision": [float(v) for v in prec], "recall": [float(v) for v in rec], "f1": [float(v) for v in f1],
        "support": sup, "weighted_precision": weighted(prec), "weighted_recall": weighted(rec),
        "weighted_f1": weighted(f1), "accuracy": float(Fraction(sum(t == p for t, p in pairs), n)),
    }
