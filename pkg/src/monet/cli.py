"""Command-line entry point: data generation, training, evaluation,
hallucination, gradient checking, and cost accounting.

Config files are strict JSON: unknown keys are rejected so a typo cannot
silently fall back to a default.  Exit codes: 0 success, 1 runtime failure
(diverged training, artifact/data mismatch, failed check), 2 invalid input
(bad flags, missing or malformed files, bad config values).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .binio import FormatError
from .cells import (CellConfig, FAMILIES, Hallucinator, count_params,
                    flops_per_sequence, flops_per_step, match_params)
from .classify import (LinearClassifier, Prediction, classify, ensemble,
                       fit_linear_classifier, pooled_matrix, predictions_csv,
                       top1_accuracy)
from .data import (FeatureRecord, SyntheticTaskSpec, dataset_manifest,
                   generate_synthetic, read_dataset, write_dataset,
                   write_manifest)
from .gradcheck import check_family
from .training import (LossConfig, TrainConfig, TrainingDiverged, evaluate,
                       hallucinate_array, records_arrays, train)


class UsageError(ValueError):
    """Invalid input: maps to exit code 2."""


class PipelineError(RuntimeError):
    """Runtime failure on valid input: maps to exit code 1."""


def _load_json(path: str, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{what} file {path} must hold a JSON object")
    return raw


def _strict_build(cls, raw: dict, what: str):
    """Instantiate a config dataclass from a dict, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise UsageError(f"{what}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    try:
        obj = cls(**raw)
    except TypeError as e:
        raise UsageError(f"{what}: {e}") from None
    try:
        obj.validate()
    except ValueError as e:
        raise UsageError(f"{what}: {e}") from None
    return obj


def _thread_cap() -> int:
    raw = os.environ.get("MONET_THREADS")
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"MONET_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"MONET_THREADS must be >= 1, got {value}")
    # Execution is single-worker in this version; the cap is validated and
    # acknowledged so configured environments keep working.
    return 1


def _save_classifier(path: str, clf: LinearClassifier) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"W": clf.W.tolist(), "b": clf.b.tolist()}, f)
        f.write("\n")


def _load_classifier(path: str) -> LinearClassifier:
    raw = _load_json(path, "classifier")
    if set(raw) != {"W", "b"}:
        raise UsageError(f"classifier file {path} must hold exactly W and b")
    return LinearClassifier(W=np.array(raw["W"], dtype=np.float64),
                            b=np.array(raw["b"], dtype=np.float64))


def _read_records(path: str) -> list[FeatureRecord]:
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"dataset file not found: {path}") from None
    except FormatError as e:
        raise UsageError(f"dataset file {path}: {e}") from None


def _load_model(path: str) -> Hallucinator:
    try:
        return Hallucinator.load(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint file not found: {path}") from None
    except FormatError as e:
        raise UsageError(f"checkpoint file {path}: {e}") from None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = _strict_build(SyntheticTaskSpec, _load_json(args.spec, "task spec"), "task spec")
    os.makedirs(args.out, exist_ok=True)
    train_recs, val_recs = generate_synthetic(spec)
    paths = {}
    for name, recs in (("train", train_recs), ("val", val_recs)):
        path = os.path.join(args.out, f"{name}.mofe")
        write_dataset(path, recs, n_classes=spec.n_classes)
        write_manifest(os.path.join(args.out, f"{name}.manifest.json"),
                       dataset_manifest(path, spec))
        paths[name] = path
    print(json.dumps({"train": paths["train"], "val": paths["val"],
                      "n_train": len(train_recs), "n_val": len(val_recs)}))
    return 0


def _experiment_parts(raw: dict):
    allowed = {"task", "cell", "train", "loss", "out_dir", "seed"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise UsageError(f"experiment config: unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    for key in ("task", "cell", "out_dir"):
        if key not in raw:
            raise UsageError(f"experiment config: missing required key {key!r}")
    task = _strict_build(SyntheticTaskSpec, raw["task"], "task spec")
    cell = _strict_build(CellConfig, raw["cell"], "cell config")
    tcfg = _strict_build(TrainConfig, raw.get("train", {}), "train config")
    loss_raw = dict(raw.get("loss", {}))
    if set(loss_raw) - {"alpha"}:
        raise UsageError(f"loss config: unknown key(s) {sorted(set(loss_raw) - {'alpha'})}; "
                         f"allowed: ['alpha']")
    alpha = loss_raw.get("alpha", 10.0)
    if not isinstance(alpha, (int, float)) or alpha < 0:
        raise UsageError(f"loss config: alpha must be a nonnegative number, got {alpha!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise UsageError(f"experiment config: seed must be a nonnegative integer, got {seed!r}")
    return task, cell, tcfg, float(alpha), raw["out_dir"], seed


def cmd_train(args) -> int:
    task, cell, tcfg, alpha, out_dir, seed = _experiment_parts(
        _load_json(args.config, "experiment config"))
    if args.epochs is not None:
        if args.epochs < 0:
            raise UsageError(f"--epochs must be >= 0, got {args.epochs}")
        tcfg.max_epochs = args.epochs
    if cell.d_x != task.d_x:
        raise UsageError(f"cell d_x {cell.d_x} does not match task d_x {task.d_x}")
    if cell.output_dim != task.d_s:
        raise UsageError(f"cell output dim {cell.output_dim} does not match task d_s {task.d_s}")
    os.makedirs(out_dir, exist_ok=True)
    train_gen, val_gen = generate_synthetic(task)
    for name, recs in (("train", train_gen), ("val", val_gen)):
        path = os.path.join(out_dir, f"{name}.mofe")
        write_dataset(path, recs, n_classes=task.n_classes)
        write_manifest(os.path.join(out_dir, f"{name}.manifest.json"),
                       dataset_manifest(path, task))
    # Train from the files just written so later evaluation of those files
    # sees byte-for-byte the features the reported numbers came from.
    train_recs = read_dataset(os.path.join(out_dir, "train.mofe"))
    val_recs = read_dataset(os.path.join(out_dir, "val.mofe"))
    flow_pool = pooled_matrix([r.flow_target for r in train_recs])
    app_pool = pooled_matrix([r.appearance for r in train_recs])
    labels = np.array([r.label for r in train_recs])
    teacher = fit_linear_classifier(flow_pool, labels, task.n_classes)
    appearance_clf = fit_linear_classifier(app_pool, labels, task.n_classes)
    _save_classifier(os.path.join(out_dir, "teacher.json"), teacher)
    _save_classifier(os.path.join(out_dir, "appearance.json"), appearance_clf)
    model = Hallucinator.build(cell, np.random.default_rng(seed))
    loss_cfg = LossConfig(alpha=alpha, classifier=teacher if alpha > 0 else None)
    try:
        report = train(model, train_recs, val_recs, tcfg, loss_cfg)
    except TrainingDiverged as e:
        raise PipelineError(str(e)) from None
    model.save(os.path.join(out_dir, "checkpoint.monw"))
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        f.write(report.to_json())
        f.write("\n")
    summary = {"epochs_run": len(report.epochs), "best_epoch": report.best_epoch,
               "best_val_mse": report.best_val_mse,
               "checkpoint": os.path.join(out_dir, "checkpoint.monw")}
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    records = _read_records(args.data)
    if not records:
        raise PipelineError("dataset holds no records")
    d_x = records[0].appearance.shape[1]
    d_s = records[0].flow_target.shape[1]
    if model.config.d_x != d_x or model.config.output_dim != d_s:
        raise PipelineError(f"checkpoint expects d_x={model.config.d_x}, "
                            f"out={model.config.output_dim} but data has "
                            f"d_x={d_x}, d_s={d_s}")
    teacher = _load_classifier(args.teacher) if args.teacher else None
    appearance_clf = _load_classifier(args.appearance) if args.appearance else None
    result = evaluate(model, records, teacher)
    out = {"val_mse": result.mse, "val_top1": result.top1}
    labels = [r.label for r in records]
    flow_preds: list[Prediction] | None = None
    if teacher is not None:
        app, _, _ = records_arrays(records)
        halluc = hallucinate_array(model, app).astype(np.float32).astype(np.float64)
        flow_preds = [classify(halluc[i], teacher) for i in range(len(records))]
        out["top1_flow"] = top1_accuracy(flow_preds, labels)
    if appearance_clf is not None:
        app_preds = [classify(r.appearance, appearance_clf) for r in records]
        out["top1_appearance"] = top1_accuracy(app_preds, labels)
        if flow_preds is not None:
            fused = [ensemble(a, b) for a, b in zip(app_preds, flow_preds)]
            out["top1_fused"] = top1_accuracy(fused, labels)
            if args.csv:
                with open(args.csv, "w", encoding="utf-8") as f:
                    f.write(predictions_csv([r.id for r in records], labels, fused))
    print(json.dumps(out))
    return 0


def cmd_hallucinate(args) -> int:
    model = _load_model(args.checkpoint)
    records = _read_records(args.data)
    if not records:
        raise PipelineError("dataset holds no records")
    d_x = records[0].appearance.shape[1]
    if model.config.d_x != d_x:
        raise PipelineError(f"checkpoint expects d_x={model.config.d_x} but data has d_x={d_x}")
    app, _, _ = records_arrays(records)
    halluc = hallucinate_array(model, app)
    out_records = [FeatureRecord(id=r.id, label=r.label, appearance=r.appearance,
                                 flow_target=halluc[i])
                   for i, r in enumerate(records)]
    n_classes = 1 + max(r.label for r in records)
    write_dataset(args.out, out_records, n_classes=n_classes)
    print(json.dumps({"out": args.out, "n_records": len(out_records)}))
    return 0


def cmd_gradcheck(args) -> int:
    if args.family not in FAMILIES:
        raise UsageError(f"unknown family {args.family!r}; choose from {FAMILIES}")
    failed = False
    for layers in args.layers:
        result = check_family(args.family, layers, instances=args.trials, seed=args.seed)
        status = "PASS" if result.passed else "FAIL"
        print(f"family={result.family} layers={result.layers} instances={result.instances} "
              f"max_rel_err={result.max_rel_err:.3e} time={result.seconds:.2f}s {status}")
        failed = failed or not result.passed
    return 1 if failed else 0


def cmd_flops(args) -> int:
    cell = _strict_build(CellConfig, _load_json(args.config, "cell config"), "cell config")
    baseline = match_params(cell, "gru").config if cell.family != "gru" \
        else match_params(cell, "monet").config
    rows = {}
    for tag, cfg in (("configured", cell), ("matched_baseline", baseline)):
        step = flops_per_step(cfg)
        seq = flops_per_sequence(cfg, args.seq_len)
        rows[tag] = {
            "family": cfg.family, "d_x": cfg.d_x, "d_s": cfg.d_s, "layers": cfg.layers,
            "params": count_params(cfg),
            "per_step": dataclasses.asdict(step) | {"total_madds": step.total_madds},
            "per_sequence": dataclasses.asdict(seq) | {"total_madds": seq.total_madds},
        }
    print(json.dumps(rows, indent=2))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monet",
        description="Motion-feature hallucination toolkit: synthetic data, "
                    "recurrent/convolutional cells, training, two-stream evaluation.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic two-stream dataset")
    p.add_argument("--spec", required=True, help="task spec JSON file")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a hallucinator end to end")
    p.add_argument("--config", required=True, help="experiment config JSON file")
    p.add_argument("--epochs", type=int, default=None,
                   help="override max_epochs from the config")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", default=None, help="motion-stream classifier JSON")
    p.add_argument("--appearance", default=None, help="appearance-stream classifier JSON")
    p.add_argument("--csv", default=None, help="write fused predictions CSV here")

    p = sub.add_parser("hallucinate", help="write a dataset whose motion features "
                                           "are the model's output")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="compare tape gradients to finite differences")
    p.add_argument("--family", required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--layers", type=int, nargs="+", default=[1])
    p.add_argument("--seed", type=int, default=20240)

    p = sub.add_parser("flops", help="print exact multiply-add counts for a cell config")
    p.add_argument("--config", required=True, help="cell config JSON file")
    p.add_argument("--seq-len", type=int, default=20)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
                "hallucinate": cmd_hallucinate, "gradcheck": cmd_gradcheck,
                "flops": cmd_flops}
    try:
        _thread_cap()
        return handlers[args.cmd](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PipelineError as e:
        print(f"failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
