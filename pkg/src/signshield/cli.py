"""``signshield`` command line: data generation, training, attacks, filters, classification and reports.

Every subcommand takes ``--seed``, ``--workers`` and ``--config FILE``.
The config file holds ``key = value`` lines whose keys are long flag
names (``learning-rate`` or ``learning_rate``); flags given on the
command line win. Exit status is 0 on success, 1 for usage errors and 2
for data or format errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks as A
from . import classifiers as C
from . import dataset as D
from . import evaluation as E
from .errors import ArgumentError, DataError, SignShieldError
from .featuremap import detect_text, map_to_label
from .hybrid import HybridConfig, classify_hybrid
from .transforms import (DEFAULT_CROP_FRACTION, binary_filter, bit_squeeze, dct_quantize, random_crop_resize,
                         resize_bilinear)

log = logging.getLogger("signshield")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _csv_list(kind=str):
    def parse(text):
        try:
            return [kind(t.strip()) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid list {text!r}") from None
    return parse


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--workers", type=int, default=1, help="worker processes for per-image work (default 1)")
    p.add_argument("--config", metavar="FILE", help="key = value defaults; command-line flags override")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _hybrid_opts(p):
    p.add_argument("--m", type=int, default=8, help="random crops fed to model A (default 8)")
    p.add_argument("--n", type=int, default=10, help="random crops fed to model B (default 10)")
    p.add_argument("--crop-fraction", type=float, default=DEFAULT_CROP_FRACTION)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="signshield", description="Hybrid adversarial defense for traffic sign classifiers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic sign dataset as <out>/<class>/<n>.ppm")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--extent", type=int, default=D.DEFAULT_EXTENT)

    p = sub.add_parser("train", help="train model A or B on a dataset directory")
    _common(p)
    p.add_argument("--model", required=True, choices=["A", "B"])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--epochs", type=int, default=C.TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=C.TrainConfig.batch_size)
    p.add_argument("--learning-rate", type=float, default=C.TrainConfig.learning_rate)
    p.add_argument("--crop-fraction", type=float, default=DEFAULT_CROP_FRACTION)

    p = sub.add_parser("attack", help="craft adversarial images against a model")
    _common(p)
    p.add_argument("--kind", required=True, choices=sorted(A.ATTACKS))
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--c", type=float, default=None, help="C&W trade-off constant")
    p.add_argument("--confidence", type=float, default=None, help="C&W margin")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("filter", help="apply an input transformation to every image of a dataset")
    _common(p)
    p.add_argument("--kind", required=True, choices=["jpeg", "squeeze", "binary", "random"])
    p.add_argument("--quality", type=int, default=E.JPEG_QUALITY)
    p.add_argument("--depth", type=int, default=E.SQUEEZE_DEPTH)
    p.add_argument("--crop-fraction", type=float, default=DEFAULT_CROP_FRACTION)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("classify", help="label one image with model A or the hybrid pipeline (JSON line)")
    _common(p)
    p.add_argument("--hybrid", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--modelA", dest="modelA", required=True)
    p.add_argument("--modelB", dest="modelB")
    p.add_argument("--image", required=True)
    _hybrid_opts(p)

    p = sub.add_parser("ocr", help="print detected words and the mapped label (JSON lines)")
    _common(p)
    p.add_argument("--image", required=True)

    p = sub.add_parser("eval", help="compare defenses under one attack; writes report.csv/.md and confusion.csv")
    _common(p)
    p.add_argument("--modelA", dest="modelA", required=True)
    p.add_argument("--modelB", dest="modelB")
    p.add_argument("--data", required=True)
    p.add_argument("--attack", default="none", choices=list(E.ATTACK_KINDS))
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--defenses", type=_csv_list(), default=list(E.DEFENSES))
    p.add_argument("--out", required=True)
    _hybrid_opts(p)

    p = sub.add_parser("sweep", help="accuracy over an epsilon grid; writes sweep.csv")
    _common(p)
    p.add_argument("--modelA", dest="modelA", required=True)
    p.add_argument("--modelB", dest="modelB")
    p.add_argument("--data", required=True)
    p.add_argument("--attacks", type=_csv_list(), default=list(E.SWEEP_ATTACKS))
    p.add_argument("--epsilons", type=_csv_list(float), default=list(E.DEFAULT_EPSILONS))
    p.add_argument("--defenses", type=_csv_list(), default=["none", "hybrid"])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    _hybrid_opts(p)
    return parser


def read_config(path) -> dict:
    """``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config = pre.parse_known_args(argv)[0].config
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in subparsers), None)
    if config and command:
        sub = subparsers[command]
        known = {a.dest: a for a in sub._actions}
        values = read_config(config)
        defaults = {}
        for key, value in values.items():
            if key not in known or key in ("config", "help"):
                parser.error(f"unknown config key {key!r} for {command}")
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                try:
                    defaults[key] = _bool(value)
                except argparse.ArgumentTypeError as exc:
                    parser.error(f"config key {key!r}: {exc}")
            else:
                # string defaults go through the action's type like command-line values
                defaults[key] = value
            action.required = False  # supplied by the file
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- helpers --------------------------------------------------------------------


def _load(path, expect: C.ModelId) -> C.TrainedModel:
    model = C.load_model(path)
    if model.architecture.id != expect:
        raise ArgumentError(f"{path} holds {model.architecture.id.name}, expected {expect.name}")
    return model


def _dataset(path, extent):
    items = D.load_directory(path, extent)
    if not items:
        raise DataError(f"no images under {path}")
    return items


def _hybrid_cfg(args) -> HybridConfig:
    return HybridConfig(m=args.m, n=args.n, crop_fraction=args.crop_fraction, seed=args.seed)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args):
    items = D.generate_synthetic(args.seed, args.per_class, args.extent)
    D.write_directory(args.out, items)
    print(f"wrote {len(items)} images to {args.out}")


def cmd_train(args):
    arch = C.architecture(args.model)
    items = _dataset(args.data, arch.extent)
    x, y = D.as_arrays(items)
    cfg = C.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.learning_rate,
                        crop_fraction=args.crop_fraction, seed=args.seed)
    model = C.train(x, y, arch, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    C.save_model(model, args.out)
    status = "" if model.converged else " (loss still moving over the final epochs)"
    print(f"trained {arch.id.name} on {len(items)} images, final loss {model.epoch_losses[-1]:.4f}{status}")


def cmd_attack(args):
    model = C.load_model(args.model)
    items = _dataset(args.data, model.architecture.extent)
    x, y = D.as_arrays(items)
    cfg = A.make_config(args.kind, args.epsilon, args.steps, c=args.c, confidence=args.confidence)
    results = A.attack_batch(A.ModelOracle(model), x, y, args.kind, cfg, seed=args.seed, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    adv = [D.LabeledImage(r.adversarial, it.label, it.index) for r, it in zip(results, items)]
    paths = D.write_directory(out, adv)
    rows = [[it.index, p.relative_to(out).as_posix(), D.CLASS_NAMES[it.label], D.CLASS_NAMES[r.label],
             repr(r.linf_distortion), repr(r.l2_distortion), int(r.success)]
            for it, r, p in zip(items, results, paths)]
    _write_csv(out / "manifest.csv", ["index", "path", "true_label", "adversarial_label", "linf", "l2", "success"], rows)
    rate = sum(r.success for r in results) / len(results)
    print(f"{args.kind}: {len(results)} images, success rate {rate:.3f}")


def cmd_filter(args):
    items = _dataset(args.data, D.DEFAULT_EXTENT)
    out = []
    for it in items:
        if args.kind == "jpeg":
            img = dct_quantize(it.image, args.quality)
        elif args.kind == "squeeze":
            img = bit_squeeze(it.image, args.depth)
        elif args.kind == "binary":
            img = binary_filter(it.image)
        else:
            img = random_crop_resize(it.image, args.crop_fraction, A.image_rng(args.seed, it.index))
        out.append(D.LabeledImage(img, it.label, it.index))
    D.write_directory(args.out, out)
    print(f"{args.kind}: wrote {len(out)} images to {args.out}")


def cmd_classify(args):
    model_a = _load(args.modelA, C.ModelId.MODEL_A)
    x = D.read_image(args.image)
    extent = model_a.architecture.extent
    if x.shape[:2] != (extent, extent):
        x = resize_bilinear(x, extent, extent)
    if args.hybrid:
        if not args.modelB:
            raise UsageError("--hybrid needs --modelB")
        model_b = _load(args.modelB, C.ModelId.MODEL_B)
        decision = classify_hybrid(x, model_a, model_b, cfg=_hybrid_cfg(args), rng=np.random.default_rng(args.seed))
        record = decision.to_json_dict()
    else:
        label, _ = C.predict(model_a, x)
        record = {"label": D.CLASS_NAMES[label]}
    print(json.dumps(record))


def cmd_ocr(args):
    x = D.read_image(args.image)
    found = detect_text(x)
    for d in found:
        print(json.dumps({"word": d.word, "region": list(d.region), "score": round(d.score, 4)}))
    label = map_to_label([d.word for d in found])
    print(json.dumps({"label": None if label is None else D.CLASS_NAMES[label]}))


def _models(args):
    model_a = _load(args.modelA, C.ModelId.MODEL_A)
    needs_b = "hybrid" in args.defenses
    if needs_b and not args.modelB:
        raise UsageError("the hybrid defense needs --modelB")
    model_b = _load(args.modelB, C.ModelId.MODEL_B) if args.modelB else None
    return model_a, model_b


def cmd_eval(args):
    model_a, model_b = _models(args)
    x, y = D.as_arrays(_dataset(args.data, model_a.architecture.extent))
    attack_cfg = None if args.attack == "none" else A.make_config(args.attack, args.epsilon, args.steps)
    reports = E.evaluate_defenses(model_a, model_b, x, y, args.attack, args.defenses, args.epsilon, args.seed,
                                  args.workers, attack_cfg, _hybrid_cfg(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    E.emit_report(reports, "csv", out / "report.csv")
    E.emit_report(reports, "markdown", out / "report.md")
    main_report = next((r for r in reports if r.defense == "hybrid"), reports[0])
    (out / "confusion.csv").write_text(E.render_confusion(main_report), encoding="utf-8", newline="")
    for r in reports:
        print(f"{r.defense:8s} accuracy {r.accuracy:.4f}  weighted F1 {r.weighted_f1:.4f}")


def cmd_sweep(args):
    model_a, model_b = _models(args)
    x, y = D.as_arrays(_dataset(args.data, model_a.architecture.extent))
    sweep = E.sweep_epsilon(model_a, model_b, x, y, args.attacks, args.epsilons, args.defenses, args.seed,
                            args.workers, _hybrid_cfg(args), args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    E.emit_sweep(sweep, out / "sweep.csv")
    for a, e, d, acc in sweep.rows:
        print(f"{a:5s} eps={e:<5g} {d:8s} accuracy {acc:.4f}")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack, "filter": cmd_filter,
    "classify": cmd_classify, "ocr": cmd_ocr, "eval": cmd_eval, "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"signshield: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("signshield: error: --workers must be >= 1", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"signshield: error: {exc}", file=sys.stderr)
        return 1
    except SignShieldError as exc:
        print(f"signshield: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"signshield: error: {exc.filename}: no such file", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"signshield: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
