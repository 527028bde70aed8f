"""Metrics, defense comparisons, epsilon sweeps and report files."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .attacks import ModelOracle, image_rng, make_config, run_attack
from .classifiers import NUM_CLASSES, TrainedModel, predict
from .dataset import CLASS_NAMES
from .errors import ArgumentError, FormatError, ParameterError, SignShieldError
from .hybrid import HybridConfig, classify_hybrid, random_filter_label
from .transforms import binary_filter, bit_squeeze, dct_quantize

DEFENSES = ("none", "jpeg", "squeeze", "binary", "random", "hybrid")
ATTACK_KINDS = ("none", "fgsm", "mim", "pgd", "cw")
SWEEP_ATTACKS = ("fgsm", "mim", "pgd")
DEFAULT_EPSILONS = (0.05, 0.1, 0.2)
JPEG_QUALITY = 50
SQUEEZE_DEPTH = 4
RANDOM_SAMPLES = 8

# rng stream 0 of each image belongs to the attack; defenses get fixed streams
# of their own so adding or reordering defenses never changes another's draws
_DEFENSE_STREAM = {name: i + 1 for i, name in enumerate(DEFENSES)}


@dataclass(eq=False)
class EvaluationReport:
    precision: list
    recall: list
    f1: list
    support: list
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    accuracy: float
    confusion: np.ndarray
    attack: str = "none"
    epsilon: float | None = None
    defense: str = "none"
    seed: int | None = None

    @property
    def total(self) -> int:
        return int(sum(self.support))

    def __eq__(self, other):
        if not isinstance(other, EvaluationReport):
            return NotImplemented
        return (self.precision == other.precision and self.recall == other.recall and self.f1 == other.f1
                and self.support == other.support and self.weighted_precision == other.weighted_precision
                and self.weighted_recall == other.weighted_recall and self.weighted_f1 == other.weighted_f1
                and self.accuracy == other.accuracy and np.array_equal(self.confusion, other.confusion)
                and (self.attack, self.epsilon, self.defense, self.seed)
                == (other.attack, other.epsilon, other.defense, other.seed))


def confusion_matrix(pairs, num_classes: int = NUM_CLASSES) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in pairs:
        t, p = int(t), int(p)
        if not (0 <= t < num_classes and 0 <= p < num_classes):
            raise ArgumentError(f"label pair ({t}, {p}) outside [0, {num_classes})")
        cm[t, p] += 1
    return cm


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def compute_metrics(pairs, attack: str = "none", epsilon: float | None = None, defense: str = "none",
                    seed: int | None = None, num_classes: int = NUM_CLASSES) -> EvaluationReport:
    """Per-class and support-weighted precision/recall/F1 plus accuracy.

    Undefined ratios (empty column or absent class) count as 0. Every
    value is the exact rational rounded once to float, so results do not
    depend on summation order.
    """
    pairs = list(pairs)
    if not pairs:
        raise ArgumentError("cannot compute metrics over zero samples")
    cm = confusion_matrix(pairs, num_classes)
    diag = np.diag(cm)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    total = int(cm.sum())
    p = [_ratio(int(diag[c]), int(cols[c])) for c in range(num_classes)]
    r = [_ratio(int(diag[c]), int(rows[c])) for c in range(num_classes)]
    f = [2 * a * b / (a + b) if a + b else Fraction(0) for a, b in zip(p, r)]

    def weighted(values):
        return float(sum(int(rows[c]) * values[c] for c in range(num_classes)) / total)

    return EvaluationReport(
        precision=[float(v) for v in p], recall=[float(v) for v in r], f1=[float(v) for v in f],
        support=[int(v) for v in rows],
        weighted_precision=weighted(p), weighted_recall=weighted(r), weighted_f1=weighted(f),
        accuracy=float(Fraction(int(diag.sum()), total)), confusion=cm,
        attack=attack, epsilon=epsilon, defense=defense, seed=seed,
    )


# -- running defenses ----------------------------------------------------------


def apply_defense(defense: str, x: np.ndarray, model_a: TrainedModel, model_b: TrainedModel | None,
                  rng: np.random.Generator, hybrid_cfg: HybridConfig | None = None) -> int:
    """Label of ``x`` as seen through ``defense`` (model A behind a filter, or the hybrid)."""
    if defense == "none":
        return predict(model_a, x)[0]
    if defense == "jpeg":
        return predict(model_a, dct_quantize(x, JPEG_QUALITY))[0]
    if defense == "squeeze":
        return predict(model_a, bit_squeeze(x, SQUEEZE_DEPTH))[0]
    if defense == "binary":
        return predict(model_a, binary_filter(x))[0]
    if defense == "random":
        fraction = (hybrid_cfg or HybridConfig()).crop_fraction
        return random_filter_label(model_a, x, rng, RANDOM_SAMPLES, fraction)
    if defense == "hybrid":
        if model_b is None:
            raise ArgumentError("the hybrid defense needs model B")
        return classify_hybrid(x, model_a, model_b, cfg=hybrid_cfg, rng=rng).label
    raise ParameterError(f"unknown defense {defense!r}; choose from {', '.join(DEFENSES)}")


def _check_defenses(defenses):
    defenses = tuple(defenses)
    if not defenses:
        raise ArgumentError("at least one defense is required")
    for d in defenses:
        if d not in DEFENSES:
            raise ParameterError(f"unknown defense {d!r}; choose from {', '.join(DEFENSES)}")
    if len(set(defenses)) != len(defenses):
        raise ArgumentError(f"duplicate defense in {defenses}")
    return defenses


_STATE: dict = {}


def _init_state(model_a, model_b, attack, attack_cfg, defenses, hybrid_cfg, seed):
    _STATE.update(model_a=model_a, model_b=model_b, oracle=ModelOracle(model_a), attack=attack,
                  attack_cfg=attack_cfg, defenses=defenses, hybrid_cfg=hybrid_cfg, seed=seed)


def _evaluate_one(job):
    idx, x, y = job
    st = _STATE
    x_in = x
    if st["attack"] != "none":
        x_in = run_attack(st["oracle"], x, y, st["attack"], st["attack_cfg"], image_rng(st["seed"], idx, 0)).adversarial
    labels = [apply_defense(d, x_in, st["model_a"], st["model_b"], image_rng(st["seed"], idx, _DEFENSE_STREAM[d]),
                            st["hybrid_cfg"]) for d in st["defenses"]]
    return idx, labels


def evaluate_defenses(model_a: TrainedModel, model_b: TrainedModel | None, images, labels, attack: str = "none",
                      defenses=("none",), epsilon: float | None = None, seed: int = 0, workers: int = 1,
                      attack_cfg=None, hybrid_cfg: HybridConfig | None = None) -> list[EvaluationReport]:
    """One report per defense, all judged on the same adversarial images.

    Each adversarial image is crafted once against undefended model A;
    every defense then classifies that same image. Randomness comes from
    per-image streams of ``seed``, so results do not depend on ``workers``.
    """
    defenses = _check_defenses(defenses)
    if attack not in ATTACK_KINDS:
        raise ParameterError(f"unknown attack {attack!r}; choose from {', '.join(ATTACK_KINDS)}")
    if attack != "none" and attack_cfg is None:
        attack_cfg = make_config(attack, epsilon)
    if attack in ("none", "cw"):
        epsilon = None
    elif epsilon is None:
        epsilon = attack_cfg.epsilon
    hybrid_cfg = hybrid_cfg or HybridConfig(seed=seed)
    jobs = [(i, np.asarray(x, dtype=np.float32), int(y)) for i, (x, y) in enumerate(zip(images, labels))]
    if not jobs:
        raise ArgumentError("cannot evaluate an empty dataset")
    init = (model_a, model_b, attack, attack_cfg, defenses, hybrid_cfg, seed)
    if workers <= 1:
        _init_state(*init)
        outcomes = [_evaluate_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers, initializer=_init_state, initargs=init) as ex:
            outcomes = list(ex.map(_evaluate_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    outcomes.sort(key=lambda o: o[0])
    reports = []
    for k, d in enumerate(defenses):
        pairs = [(jobs[i][2], predicted[k]) for i, predicted in outcomes]
        reports.append(compute_metrics(pairs, attack=attack, epsilon=epsilon, defense=d, seed=seed))
    return reports


def evaluate(model_a: TrainedModel, model_b: TrainedModel | None, images, labels, attack: str = "none",
             defense: str = "none", epsilon: float | None = None, seed: int = 0, workers: int = 1,
             attack_cfg=None, hybrid_cfg: HybridConfig | None = None) -> EvaluationReport:
    return evaluate_defenses(model_a, model_b, images, labels, attack, (defense,), epsilon, seed, workers,
                             attack_cfg, hybrid_cfg)[0]


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)  # (attack, epsilon, defense, accuracy)
    seed: int | None = None

    def accuracy(self, attack: str, epsilon: float, defense: str) -> float:
        for a, e, d, acc in self.rows:
            if (a, e, d) == (attack, epsilon, defense):
                return acc
        raise KeyError((attack, epsilon, defense))


def sweep_epsilon(model_a: TrainedModel, model_b: TrainedModel | None, images, labels,
                  attacks=SWEEP_ATTACKS, epsilons=DEFAULT_EPSILONS, defenses=("none", "hybrid"),
                  seed: int = 0, workers: int = 1, hybrid_cfg: HybridConfig | None = None, steps: int | None = None):
    epsilons = tuple(float(e) for e in epsilons)
    if not epsilons:
        raise ArgumentError("epsilon list is empty")
    if any(not e > 0 for e in epsilons):
        raise ParameterError(f"epsilons must be > 0, got {epsilons}")
    for a in attacks:
        if a not in SWEEP_ATTACKS:
            raise ParameterError(f"attack {a!r} has no epsilon budget to sweep; choose from {', '.join(SWEEP_ATTACKS)}")
    out = SweepReport(seed=seed)
    for a in attacks:
        for eps in epsilons:
            reports = evaluate_defenses(model_a, model_b, images, labels, a, defenses, eps, seed, workers,
                                        make_config(a, eps, steps), hybrid_cfg)
            out.rows.extend((a, eps, r.defense, r.accuracy) for r in reports)
    return out


# -- report files ----------------------------------------------------------------

SUMMARY_HEADER = ["defense", "precision", "recall", "f1", "accuracy"]
CLASS_HEADER = ["class", "precision", "recall", "f1", "support"]
SWEEP_HEADER = ["attack", "epsilon", "defense", "accuracy"]


def _meta(report: EvaluationReport) -> str:
    eps = "" if report.epsilon is None else repr(report.epsilon)
    seed = "" if report.seed is None else str(report.seed)
    return f"# attack={report.attack} epsilon={eps} seed={seed}"


def render_csv(reports) -> str:
    """Summary block then one per-class block per defense, each preceded by a ``#`` comment line."""
    reports = list(reports)
    if not reports:
        raise ArgumentError("no reports to write")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    buf.write(_meta(reports[0]) + "\n")
    w.writerow(SUMMARY_HEADER)
    for r in reports:
        w.writerow([r.defense, repr(r.weighted_precision), repr(r.weighted_recall), repr(r.weighted_f1),
                    repr(r.accuracy)])
    for r in reports:
        buf.write("\n")
        buf.write(f"{_meta(r)} defense={r.defense}\n")
        w.writerow(CLASS_HEADER)
        for c, name in enumerate(CLASS_NAMES):
            w.writerow([name, repr(r.precision[c]), repr(r.recall[c]), repr(r.f1[c]), r.support[c]])
    return buf.getvalue()


def render_markdown(reports) -> str:
    reports = list(reports)
    if not reports:
        raise ArgumentError("no reports to write")
    head = reports[0]
    eps = "" if head.epsilon is None else f", epsilon {head.epsilon:g}"
    lines = [f"## Comparison of defense methods (attack: {head.attack}{eps}; seed {head.seed})", "",
             "| Defense | Precision | Recall | F1 | Accuracy |", "|---|---|---|---|---|"]
    for r in reports:
        lines.append(f"| {r.defense} | {r.weighted_precision:.2f} | {r.weighted_recall:.2f} | "
                     f"{r.weighted_f1:.2f} | {r.accuracy:.2f} |")
    for r in reports:
        lines += ["", f"### Class-wise results ({r.defense})", "",
                  "| Class | Precision | Recall | F1 | Support |", "|---|---|---|---|---|"]
        for c, name in enumerate(CLASS_NAMES):
            lines.append(f"| {name} | {r.precision[c]:.2f} | {r.recall[c]:.2f} | {r.f1[c]:.2f} | {r.support[c]} |")
        lines.append(f"| weighted | {r.weighted_precision:.2f} | {r.weighted_recall:.2f} | "
                     f"{r.weighted_f1:.2f} | {r.total} |")
    return "\n".join(lines) + "\n"


def render_confusion(report: EvaluationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\predicted", *CLASS_NAMES])
    for name, row in zip(CLASS_NAMES, report.confusion):
        w.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()


def confusion_path(report_path, defense: str) -> Path:
    return Path(report_path).with_name(f"confusion_{defense}.csv")


def _write(path: Path, text: str):
    try:
        path.write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        raise SignShieldError(f"cannot write {path}: {exc.strerror}") from exc


def emit_report(reports, fmt: str, path) -> None:
    """Write ``reports`` as ``csv`` (plus a ``confusion_<defense>.csv`` per defense) or ``markdown``."""
    if isinstance(reports, EvaluationReport):
        reports = [reports]
    path = Path(path)
    if fmt == "csv":
        _write(path, render_csv(reports))
        for r in reports:
            _write(confusion_path(path, r.defense), render_confusion(r))
    elif fmt == "markdown":
        _write(path, render_markdown(reports))
    else:
        raise ParameterError(f"unknown report format {fmt!r}; use csv or markdown")


def _parse_meta(line: str, where: str) -> dict:
    if not line.startswith("# "):
        raise FormatError(f"expected a '# attack=...' metadata line, got {line!r}", path=where)
    meta = dict(tok.split("=", 1) for tok in line[2:].split() if "=" in tok)
    if "attack" not in meta:
        raise FormatError(f"metadata line lacks attack= ({line!r})", path=where)
    return meta


def parse_confusion(text: str, where: str = "<confusion>") -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) != NUM_CLASSES + 1 or any(len(r) != NUM_CLASSES + 1 for r in rows):
        raise FormatError(f"confusion matrix must be {NUM_CLASSES}x{NUM_CLASSES} with header row and column", path=where)
    try:
        return np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"non-integer confusion entry: {exc}", path=where) from None


def parse_report(path) -> list[EvaluationReport]:
    """Inverse of ``emit_report(..., "csv", path)``, reading the confusion files beside it."""
    path = Path(path)
    where = str(path)
    blocks = [b.strip("\n").split("\n") for b in path.read_text(encoding="utf-8").split("\n\n")]
    head = blocks[0]
    meta = _parse_meta(head[0], where)
    if head[1].split(",") != SUMMARY_HEADER:
        raise FormatError("missing summary header", path=where)
    summary = {row[0]: [float(v) for v in row[1:]] for row in csv.reader(head[2:])}
    reports = []
    for block in blocks[1:]:
        bmeta = _parse_meta(block[0], where)
        defense = bmeta.get("defense")
        if defense not in summary or block[1].split(",") != CLASS_HEADER:
            raise FormatError(f"malformed per-class block for defense {defense!r}", path=where)
        rows = list(csv.reader(block[2:]))
        if [r[0] for r in rows] != list(CLASS_NAMES):
            raise FormatError(f"per-class block for {defense!r} does not list the {NUM_CLASSES} classes in order",
                              path=where)
        wp, wr, wf, acc = summary[defense]
        cpath = confusion_path(path, defense)
        cm = parse_confusion(cpath.read_text(encoding="utf-8"), str(cpath))
        reports.append(EvaluationReport(
            precision=[float(r[1]) for r in rows], recall=[float(r[2]) for r in rows],
            f1=[float(r[3]) for r in rows], support=[int(r[4]) for r in rows],
            weighted_precision=wp, weighted_recall=wr, weighted_f1=wf, accuracy=acc, confusion=cm,
            attack=meta["attack"], epsilon=float(meta["epsilon"]) if meta.get("epsilon") else None,
            defense=defense, seed=int(meta["seed"]) if meta.get("seed") else None,
        ))
    order = list(summary)
    if [r.defense for r in reports] != order:
        raise FormatError("per-class blocks do not match the summary rows", path=where)
    return reports


def render_sweep(sweep: SweepReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for a, e, d, acc in sweep.rows:
        w.writerow([a, repr(e), d, repr(acc)])
    return buf.getvalue()


def emit_sweep(sweep: SweepReport, path) -> None:
    _write(Path(path), render_sweep(sweep))


def parse_sweep(text: str) -> SweepReport:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != SWEEP_HEADER:
        raise FormatError("sweep file must start with attack,epsilon,defense,accuracy")
    return SweepReport([(a, float(e), d, float(acc)) for a, e, d, acc in rows[1:]])
