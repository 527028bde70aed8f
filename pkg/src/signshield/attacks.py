"""White-box untargeted attacks: FGSM, MIM, PGD and C&W-L2.

Attacks only talk to a gradient oracle (``logits(x)``, ``grad(x, y)``
and, for C&W, ``logits_vjp(x, v)``). Images are float32 in [0, 1];
updates are computed in float64 and rounded back, with a final nudge so
that float32 rounding never pushes a pixel outside its budget.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import tensor as T
from .errors import ParameterError, SignShieldError


class GradientOracle(Protocol):
    def logits(self, x: np.ndarray) -> np.ndarray: ...

    def grad(self, x: np.ndarray, y: int) -> np.ndarray: ...


class ModelOracle:
    """Gradient oracle backed by a network (or anything with a ``.network``)."""

    def __init__(self, model):
        self.network = getattr(model, "network", model)

    def logits(self, x):
        return T.forward(self.network, x)

    def grad(self, x, y):
        return T.loss_and_input_gradient(self.network, x, y).grad_input

    def logits_vjp(self, x, v):
        return T.logits_vjp(self.network, x, v)


@dataclass
class FgsmConfig:
    epsilon: float = 0.1

    def __post_init__(self):
        if self.epsilon < 0:
            raise ParameterError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass
class MimConfig:
    epsilon: float = 0.1
    steps: int = 10
    decay: float = 1.0
    step_size: float | None = None  # defaults to epsilon / steps

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.decay < 0:
            raise ParameterError(f"decay must be >= 0, got {self.decay}")
        if self.step_size is None:
            self.step_size = self.epsilon / self.steps
        if not self.step_size > 0:
            raise ParameterError(f"step size must be > 0, got {self.step_size}")


@dataclass
class PgdConfig:
    epsilon: float = 0.1
    steps: int = 40
    step_size: float | None = None  # defaults to 2.5 * epsilon / steps
    random_start: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.epsilon < 0:
            raise ParameterError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.step_size is None:
            self.step_size = 2.5 * self.epsilon / self.steps
        if not self.step_size > 0:
            raise ParameterError(f"step size must be > 0, got {self.step_size}")


@dataclass
class CwConfig:
    c: float = 1.0
    max_iterations: int = 80
    learning_rate: float = 0.01
    confidence: float = 0.0
    search: bool = False  # try c in SEARCH_CONSTANTS and keep the smallest successful distortion

    SEARCH_CONSTANTS = (0.01, 0.1, 1.0, 10.0)

    def __post_init__(self):
        if self.c < 0:
            raise ParameterError(f"c must be >= 0, got {self.c}")
        if self.max_iterations < 1:
            raise ParameterError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: bool
    linf_distortion: float
    l2_distortion: float
    iterations: int
    label: int  # model label on the adversarial image


def _finish(oracle, x, x_adv, y, iterations) -> AttackResult:
    label = int(np.argmax(oracle.logits(x_adv)))
    delta = x_adv.astype(np.float64) - x.astype(np.float64)
    return AttackResult(x_adv, label != y, float(np.abs(delta).max(initial=0.0)),
                        float(np.sqrt((delta ** 2).sum())), iterations, label)


def _to_image(cand: np.ndarray, x: np.ndarray, eps: float | None) -> np.ndarray:
    """Round a float64 candidate to float32, keeping it inside [0, 1] and the eps-box."""
    x64 = x.astype(np.float64)
    lo, hi = np.zeros_like(x64), np.ones_like(x64)
    if eps is not None:
        lo = np.maximum(lo, x64 - eps)
        hi = np.minimum(hi, x64 + eps)
    out = np.clip(cand, lo, hi).astype(np.float32)
    over = out.astype(np.float64) > hi
    out[over] = np.nextafter(out[over], np.float32(-np.inf))
    under = out.astype(np.float64) < lo
    out[under] = np.nextafter(out[under], np.float32(np.inf))
    return out


def fgsm(oracle, x, y: int, cfg: FgsmConfig | None = None) -> AttackResult:
    cfg = cfg or FgsmConfig()
    x = np.asarray(x, dtype=np.float32)
    g = oracle.grad(x, y)
    x_adv = _to_image(x.astype(np.float64) + cfg.epsilon * np.sign(g), x, cfg.epsilon)
    return _finish(oracle, x, x_adv, y, 1)


def mim(oracle, x, y: int, cfg: MimConfig | None = None, trace: list | None = None) -> AttackResult:
    """Momentum iterative method with L1-normalized gradients.

    ``trace`` (if given) receives ``(g, x_adv)`` after every step. A zero
    gradient contributes nothing to the momentum for that step.
    """
    cfg = cfg or MimConfig()
    x = np.asarray(x, dtype=np.float32)
    g = np.zeros(x.shape, dtype=np.float64)
    x_adv = x.copy()
    for _ in range(cfg.steps):
        grad = oracle.grad(x_adv, y).astype(np.float64)
        l1 = math.fsum(np.abs(grad).ravel())
        g = cfg.decay * g + (grad / l1 if l1 > 0 else 0.0)
        x_adv = _to_image(x_adv.astype(np.float64) + cfg.step_size * np.sign(g), x, None)
        if trace is not None:
            trace.append((g.copy(), x_adv.copy()))
    return _finish(oracle, x, x_adv, y, cfg.steps)


def pgd(oracle, x, y: int, cfg: PgdConfig | None = None, rng: np.random.Generator | None = None,
        trace: list | None = None) -> AttackResult:
    """L-inf projected gradient descent; ``trace`` receives every iterate, the start included."""
    cfg = cfg or PgdConfig()
    x = np.asarray(x, dtype=np.float32)
    x_adv = x.copy()
    if cfg.random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        x_adv = _to_image(x.astype(np.float64) + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), x, cfg.epsilon)
    if trace is not None:
        trace.append(x_adv.copy())
    for _ in range(cfg.steps):
        grad = oracle.grad(x_adv, y)
        x_adv = _to_image(x_adv.astype(np.float64) + cfg.step_size * np.sign(grad), x, cfg.epsilon)
        if trace is not None:
            trace.append(x_adv.copy())
    return _finish(oracle, x, x_adv, y, cfg.steps)


def tanh_to_image(w: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(w) + 1.0)


def image_to_tanh(x: np.ndarray) -> np.ndarray:
    return np.arctanh(2.0 * np.clip(np.asarray(x, dtype=np.float64), 1e-6, 1 - 1e-6) - 1.0)


def _cw_single(oracle, x, y, c, cfg, trace):
    x64 = x.astype(np.float64)
    w = image_to_tanh(x)
    best = None
    last = None
    n_classes = None
    for it in range(cfg.max_iterations):
        x_adv64 = tanh_to_image(w)
        x_adv = x_adv64.astype(np.float32)
        logits = oracle.logits(x_adv)
        n_classes = n_classes or len(logits)
        others = np.delete(np.arange(n_classes), y)
        j = int(others[np.argmax(logits[others])])
        margin = float(logits[y] - logits[j])
        success = int(np.argmax(logits)) != y
        l2 = float(np.sqrt(((x_adv.astype(np.float64) - x64) ** 2).sum()))
        if trace is not None:
            trace.append((l2, success))
        if success and (best is None or l2 < best[1]):
            best = (x_adv.copy(), l2, it + 1)
        last = (x_adv, it + 1)
        grad_x = 2.0 * (x_adv64 - x64)
        if c > 0 and margin > -cfg.confidence:
            v = np.zeros(n_classes)
            v[y], v[j] = 1.0, -1.0
            _, vjp = oracle.logits_vjp(x_adv, v)
            grad_x = grad_x + c * vjp.astype(np.float64)
        w = w - cfg.learning_rate * grad_x * 0.5 * (1.0 - np.tanh(w) ** 2)
    return best, last


def cw_l2(oracle, x, y: int, cfg: CwConfig | None = None, trace: list | None = None) -> AttackResult:
    """Carlini-Wagner L2 with the tanh change of variables and plain gradient descent.

    Returns the successful iterate of smallest L2 distortion, or the last
    iterate (``success=False``) when none succeeded. ``trace`` receives
    ``(l2, success)`` for every evaluated iterate.
    """
    cfg = cfg or CwConfig()
    x = np.asarray(x, dtype=np.float32)
    constants = CwConfig.SEARCH_CONSTANTS if cfg.search else (cfg.c,)
    best, last, used = None, None, 0
    for c in constants:
        b, last = _cw_single(oracle, x, y, c, cfg, trace)
        used += last[1]
        if b is not None and (best is None or b[1] < best[1]):
            best = b
    chosen = best[0] if best is not None else last[0]
    res = _finish(oracle, x, chosen, y, used)
    return res


ATTACKS = {"fgsm": (fgsm, FgsmConfig), "mim": (mim, MimConfig), "pgd": (pgd, PgdConfig), "cw": (cw_l2, CwConfig)}


def make_config(kind: str, epsilon: float | None = None, steps: int | None = None, **extra):
    """Config for ``kind`` with the usual CLI knobs; unknown-to-kind knobs are ignored."""
    if kind not in ATTACKS:
        raise ParameterError(f"unknown attack kind {kind!r}; choose from {', '.join(ATTACKS)}")
    cls = ATTACKS[kind][1]
    kwargs = {k: v for k, v in extra.items() if v is not None}
    if kind == "cw":
        if steps is not None:
            kwargs["max_iterations"] = steps
        return cls(**kwargs)
    if epsilon is not None:
        kwargs["epsilon"] = epsilon
    if steps is not None and kind != "fgsm":
        kwargs["steps"] = steps
    return cls(**kwargs)


def run_attack(oracle, x, y, kind: str, cfg=None, rng: np.random.Generator | None = None) -> AttackResult:
    fn, cls = ATTACKS[kind]
    cfg = cfg if cfg is not None else cls()
    if kind == "pgd":
        return fn(oracle, x, y, cfg, rng=rng)
    return fn(oracle, x, y, cfg)


def image_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Per-image stream derived from the master seed, independent of processing order."""
    return np.random.default_rng([seed, index, stream])


class AttackBatchError(SignShieldError):
    def __init__(self, failures):
        self.failures = failures
        detail = "; ".join(f"#{i}: {e}" for i, e in failures)
        super().__init__(f"{len(failures)} image(s) failed: {detail}")


_WORKER_STATE: dict = {}


def _init_worker(oracle, kind, cfg, seed):
    _WORKER_STATE.update(oracle=oracle, kind=kind, cfg=cfg, seed=seed)


def _attack_one(job):
    idx, x, y = job
    st = _WORKER_STATE
    try:
        return idx, run_attack(st["oracle"], x, y, st["kind"], st["cfg"], image_rng(st["seed"], idx)), None
    except Exception as exc:  # reported with its index by the caller
        return idx, None, exc


def attack_batch(oracle, images, labels, kind: str, cfg=None, seed: int = 0, workers: int = 1) -> list:
    """Attack every image independently; results keep input order for any worker count."""
    jobs = [(i, np.asarray(x, dtype=np.float32), int(y)) for i, (x, y) in enumerate(zip(images, labels))]
    if not jobs:
        return []
    if workers <= 1:
        _init_worker(oracle, kind, cfg, seed)
        outcomes = [_attack_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(oracle, kind, cfg, seed)) as ex:
            outcomes = list(ex.map(_attack_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    failures = [(i, e) for i, _, e in outcomes if e is not None]
    if failures:
        raise AttackBatchError(failures)
    return [r for _, r, _ in sorted(outcomes, key=lambda o: o[0])]
