"""Command-line entry point: ``retina-grader <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import checks
from .data import PRESETS, DatasetManifest, ImageStore, generate_dataset
from .evaluation import MetricsReport, class_difference_report, combine_single_task, cross_validate, evaluate
from .model import ModelConfig, MultiTaskModel, load_model, predict_batch
from .preprocess import preprocess_pipeline, read_ppm
from .serialization import FormatError, load_tensor, save_tensor
from .severity import TASKS, CharacteristicGrades, GradeError, severity_trace
from .training import DivergenceError, TrainConfig, train_multitask, train_singletask

logger = logging.getLogger("retina_grader")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "RETINA_GRADER_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the documented code for usage errors is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_config(out_dir: Path, args: argparse.Namespace, **extra) -> None:
    """Resolved run configuration, written beside every run's outputs."""
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(_dump(cfg), encoding="utf-8")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        batch_size=args.batch_size,
        patience_phase1=args.patience1,
        patience_phase2=args.patience2,
        max_epochs=args.max_epochs,
        augment=not args.no_augment,
        seed=args.seed,
    )


def _model_config(args) -> ModelConfig:
    overrides = {"dropout_rate": args.dropout}
    if args.side is not None:
        overrides["input_side"] = args.side
    return ModelConfig.preset(args.preset, **overrides)


def _parse_mode(mode: str) -> Optional[str]:
    """None for multi-task, otherwise the single task name."""
    if mode == "multitask":
        return None
    if mode.startswith("singletask:") and mode.split(":", 1)[1] in TASKS:
        return mode.split(":", 1)[1]
    raise UsageError(f"--mode must be multitask or singletask:<{'|'.join(TASKS)}>, got {mode!r}")


def _read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return DatasetManifest.read_csv(path)


def _train_once(manifest, args, store, out_dir: Optional[Path] = None):
    """Train per ``--mode``; writes weights and the log when ``out_dir`` is given."""
    task = _parse_mode(args.mode)
    model_cfg = _model_config(args)
    cfg = _train_config(args)
    if task is not None:
        result = train_singletask(task, manifest, model_cfg, cfg, store)
        if out_dir is not None:
            result.model.save(out_dir / "phase1.weights")
    else:
        init = None
        if args.init:
            # warm start: shared trunk from a prior run, heads freshly initialised
            init = load_model(args.init, model_cfg, groups=["shared"], rng=np.random.default_rng([args.seed, 1]))
        callback = (lambda m: m.save(out_dir / "phase1.weights")) if out_dir is not None else None
        result = train_multitask(manifest, model_cfg, cfg, store, init=init, phase1_callback=callback)
    if out_dir is not None:
        result.model.save(out_dir / "final.weights")
        (out_dir / "train_log.csv").write_text(result.log.to_csv(), encoding="utf-8")
    return result


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    manifest = generate_dataset(out, args.patients, args.per_patient, args.preset, args.side, args.seed)
    _write_config(out, args)
    print(f"wrote {len(manifest.images())} images for {args.patients} patients to {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    src, dst = Path(args.in_dir), Path(args.out)
    if not src.is_dir():
        raise FileNotFoundError(f"input directory not found: {src}")
    ppms = sorted(src.rglob("*.ppm"))
    if not ppms:
        raise ValueError(f"no .ppm images under {src}")
    for path in ppms:
        rel = path.relative_to(src).with_suffix(".mtt")
        (dst / rel).parent.mkdir(parents=True, exist_ok=True)
        save_tensor(dst / rel, preprocess_pipeline(read_ppm(path), args.side))
    manifest_path = src / "manifest.csv"
    if manifest_path.exists():
        # carry the manifest along, pointing at the processed tensors
        manifest = DatasetManifest.read_csv(manifest_path)
        for patient in manifest.records:
            patient.images = [
                replace(img, image_path=str(Path(img.image_path).with_suffix(".mtt"))) for img in patient.images
            ]
        manifest.write_csv(dst / "manifest.csv")
    _write_config(dst, args)
    print(f"preprocessed {len(ppms)} images into {dst}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = _read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, args)
    store = ImageStore(manifest, _model_config(args).input_side)
    result = _train_once(manifest, args, store, out)
    summary = {"phase1_best_epoch": result.phase1_best_epoch, "phase1_best_loss": result.phase1_best_loss}
    if result.phase2_best:
        summary["phase2_best_val_loss"] = result.phase2_best
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _load_predictor(weight_paths: Sequence[str]):
    """One multi-task model, or four single-task models combined per characteristic."""
    models = [load_model(p) for p in weight_paths]
    if len(models) == 1 and tuple(models[0].config.tasks) == TASKS:
        return models[0], models[0].config.input_side
    by_task = {}
    for m in models:
        if len(m.config.tasks) != 1:
            raise ValueError("combine either one multi-task model or one single-task model per characteristic")
        by_task[m.config.tasks[0]] = m
    sides = {m.config.input_side for m in models}
    if len(sides) != 1:
        raise ValueError("single-task models disagree on input side")
    return combine_single_task(by_task), sides.pop()


def cmd_eval(args) -> int:
    manifest = _read_manifest(args.manifest)
    predictor, side = _load_predictor(args.weights)
    store = ImageStore(manifest, side)
    split = None if args.split == "all" else args.split
    report = evaluate(predictor, manifest, split, store, config={"split": args.split, "weights": list(args.weights)})
    text = _dump(report.to_json())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        if not (out.parent / "config.json").exists():
            _write_config(out.parent, args)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_cross_validate(args) -> int:
    manifest = _read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, args)
    _parse_mode(args.mode)
    side = _model_config(args).input_side
    store = ImageStore(manifest, side)

    def train_fn(fold_manifest, i):
        fold_args = argparse.Namespace(**{**vars(args), "seed": args.seed + i})
        result = _train_once(fold_manifest, fold_args, store)
        if isinstance(result.model, MultiTaskModel) and tuple(result.model.config.tasks) == TASKS:
            return result.model
        raise UsageError("cross-validate needs --mode multitask")

    means, reports = cross_validate(manifest, train_fn, args.k, args.seed, side)
    doc = {"k": args.k, "seed": args.seed, "mean": means, "folds": [r.to_json() for r in reports]}
    (out / "cv_report.json").write_text(_dump(doc), encoding="utf-8")
    print(_dump(means), end="")
    return EXIT_OK


def _image_paths(target: Path) -> list[Path]:
    if target.is_dir():
        return sorted(p for p in target.iterdir() if p.suffix in (".ppm", ".mtt"))
    return [target]


def cmd_predict(args) -> int:
    model = load_model(args.weights)
    side = model.config.input_side
    target = Path(args.input)
    if not target.exists():
        raise FileNotFoundError(f"input not found: {target}")
    failed = 0
    lines = []
    for path in _image_paths(target):
        try:
            img = load_tensor(path) if path.suffix == ".mtt" else preprocess_pipeline(read_ppm(path), side)
            if img.shape != (3, side, side):
                raise ValueError(f"image shape {img.shape}, model expects (3, {side}, {side})")
        except (OSError, ValueError) as exc:
            logger.error("cannot read %s: %s", path, exc)
            failed += 1
            continue
        pred = predict_batch(model, img[None].astype(np.float32))[0]
        lines.append(
            json.dumps(
                {
                    "image": str(path),
                    "probabilities": {t: [round(float(v), 8) for v in pred.probabilities[t]] for t in TASKS},
                    "grades": dict(zip(TASKS, pred.grades.as_tuple())),
                    "severity": pred.severity,
                },
                sort_keys=True,
            )
        )
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_DATA if failed else EXIT_OK


def cmd_grade(args) -> int:
    grades = CharacteristicGrades(args.ga, args.pigment, args.depig, args.drusen)
    severity, row, col = severity_trace(grades)
    print(json.dumps({"severity": severity, "row": row, "column": col}))
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = []
    for p in (args.a, args.b):
        path = Path(p)
        if not path.exists():
            raise FileNotFoundError(f"report not found: {path}")
        try:
            reports.append(MetricsReport.from_json(json.loads(path.read_text(encoding="utf-8"))))
        except (KeyError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: not a metrics report ({exc})") from exc
    diff = class_difference_report(*reports, min_support=args.min_support)
    if diff.warning:
        logger.warning(diff.warning)
    if args.out:
        Path(args.out).write_text(diff.to_csv(), encoding="utf-8")
    else:
        sys.stdout.write(diff.to_csv())
    return EXIT_OK


def _report(results) -> int:
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_gradcheck(args) -> int:
    results = []
    for s in range(args.seed, args.seed + args.seeds):
        results.extend(checks.gradcheck_suite(s, args.coords))
    return _report(results)


def cmd_selftest(args) -> int:
    return _report(checks.selftest(args.seed, args.matrices))


# ---------------------------------------------------------------- parser


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--mode", default="multitask", help="multitask or singletask:<task>")
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--side", type=int, default=None, help="override the preset's input side")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=d.max_epochs)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--beta1", type=float, default=d.beta1)
    p.add_argument("--beta2", type=float, default=d.beta2)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--dropout", type=float, default=ModelConfig().dropout_rate)
    p.add_argument("--patience1", type=int, default=d.patience_phase1)
    p.add_argument("--patience2", type=int, default=d.patience_phase2)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--init", default=None, help="warm-start the shared trunk from a weights file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="retina-grader", description="Multi-task AMD severity grading on fundus images.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="render a synthetic fundus dataset")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--per-patient", type=int, default=2)
    p.add_argument("--preset", choices=sorted(PRESETS), default="uniform")
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", help="normalise, crop and resize PPM images into tensors")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--side", type=int, default=64)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="two-phase multi-task or single-task training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics report for a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True, nargs="+", help="one multi-task model or four single-task models")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cross-validate", help="patient-level k-fold cross-validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    _add_training_flags(p)
    p.set_defaults(func=cmd_cross_validate)

    p = sub.add_parser("predict", help="JSON lines of per-image predictions")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("grade", help="severity step from the four characteristic grades")
    p.add_argument("--ga", type=int, choices=range(2), required=True)
    p.add_argument("--pigment", type=int, choices=range(2), required=True)
    p.add_argument("--depig", type=int, choices=range(4), required=True)
    p.add_argument("--drusen", type=int, choices=range(6), required=True)
    p.set_defaults(func=cmd_grade)

    p = sub.add_parser("compare", help="per-class F1/accuracy differences between two reports")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--min-support", type=int, default=50)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--coords", type=int, default=6, help="coordinates probed per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="severity table and metric oracle checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--matrices", type=int, default=200)
    p.set_defaults(func=cmd_selftest)
    return parser


def _thread_cap() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = _thread_cap()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        print(f"retina-grader: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"retina-grader: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, FormatError, GradeError) as exc:
        print(f"retina-grader: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
