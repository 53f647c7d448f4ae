"""``locpmap`` command line: generate, train, infer, eval, verify, bench.

Every subcommand accepts ``--config file.json`` whose keys mirror the long flags
(dashes or underscores); flags given on the command line win. Machine-readable
output goes to stdout, logs and the resolved-config line to stderr.
Exit codes: 0 success, 2 usage or validation error, 1 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, validation
from .inference import METHODS, InferenceConfig, infer
from .learning import TrainConfig, TrainingDiverged, train
from .model import UnsupportedBlockSize, Weights, load_model, save_model
from .netpbm import PGMError, read_pgm, write_pgm, write_prob_map

log = logging.getLogger("locpmap")

DATASET_FORMAT = "locpmap-dataset"
DEFAULT_LR = 8.0
DEFAULT_ITERS = 1500


class UsageError(Exception):
    pass


def _threads_default() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _json_arg(value):
    """A JSON document given inline or as a path; dicts pass through."""
    if value is None or isinstance(value, dict):
        return value
    text = str(value)
    if not text.lstrip().startswith("{"):
        try:
            text = Path(text).read_text()
        except OSError as e:
            raise UsageError(f"cannot read {value}: {e}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"invalid JSON in {value!r}: {e}") from None
    if not isinstance(doc, dict):
        raise UsageError("spec must be a JSON object")
    return doc


def _csv_list(value):
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [s.strip() for s in str(value).split(",") if s.strip()]


# -- parser ------------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="locpmap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file whose keys mirror the flags")
        sp.add_argument("--threads", type=_positive_int, default=_threads_default(),
                        help="worker cap (default: available cores)")
        return sp

    g = add("generate", "write a synthetic denoising dataset")
    g.add_argument("--spec", help="SyntheticSpec JSON (inline or path)")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int, help="overrides the spec seed")

    t = add("train", "pseudolikelihood training on a dataset directory")
    t.add_argument("--data", help="dataset directory written by generate")
    t.add_argument("--out", help="model JSON path")
    t.add_argument("--trace", help="trace CSV path (default: <out>.trace.csv)")
    t.add_argument("--lr", type=float, default=DEFAULT_LR)
    t.add_argument("--iters", type=int, default=DEFAULT_ITERS)
    t.add_argument("--l2", type=float, default=0.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=_positive_int)
    t.add_argument("--grad-tol", type=float, default=1e-6)
    t.add_argument("--symmetric", action="store_true", help="tie pairwise weights W[a,b] = W[b,a]")
    t.add_argument("--freeze-pairwise", action="store_true")

    i = add("infer", "predict labels for one image")
    i.add_argument("--model")
    i.add_argument("--image")
    i.add_argument("--method", default="locpmap", choices=METHODS)
    i.add_argument("--samples", type=_positive_int, default=InferenceConfig.num_samples)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--max-sweeps", type=_positive_int, default=InferenceConfig.max_sweeps)
    i.add_argument("--dropout", type=float, default=InferenceConfig.dropout_fraction)
    i.add_argument("--gibbs-samples", type=_positive_int, default=InferenceConfig.gibbs_samples)
    i.add_argument("--out-labels")
    i.add_argument("--out-prob")
    i.add_argument("--out-var")

    e = add("eval", "IoU of predicted label images against truth")
    e.add_argument("--pred", help="directory of predicted label PGMs")
    e.add_argument("--truth", help="directory of truth label PGMs with the same names")
    e.add_argument("--num-labels", type=int, default=2)
    e.add_argument("--out", help="also write the table here (.json or .csv)")
    e.add_argument("--format", choices=("csv", "json"), default="csv")

    v = add("verify", "oracle checks of the sampling identities and the PL gradient")
    v.add_argument("--check", choices=validation.CHECKS + ("all",), default="all")
    v.add_argument("--draws", type=_positive_int, default=200000)
    v.add_argument("--seed", type=int, default=0)

    b = add("bench", "train once per seed and score inference methods")
    b.add_argument("--spec", help="SyntheticSpec JSON (inline or path)")
    b.add_argument("--methods", default=",".join(METHODS))
    b.add_argument("--seeds", default="0")
    b.add_argument("--out", help="output directory")
    b.add_argument("--lr", type=float, default=DEFAULT_LR)
    b.add_argument("--iters", type=int, default=DEFAULT_ITERS)
    b.add_argument("--samples", type=_positive_int, default=InferenceConfig.num_samples)
    b.add_argument("--pooled", action="store_true", help="pool pixels over images before IoU")
    return p, sub.choices


def parse_args(argv=None):
    parser, subparsers = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.config:
        sp = subparsers[args.command]
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            sp.error(f"cannot load config {args.config}: {e}")
        if not isinstance(cfg, dict):
            sp.error("config must be a JSON object")
        valid = {a.dest for a in sp._actions} - {"help", "config"}
        cfg = {k.replace("-", "_"): val for k, val in cfg.items()}
        unknown = sorted(set(cfg) - valid)
        if unknown:
            sp.error(f"unknown config keys: {', '.join(unknown)}")
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _resolved(args):
    d = {k: v for k, v in vars(args).items()}
    log.info("resolved %s", json.dumps(d, sort_keys=True, default=str))


def _mkdir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create {path}: {e}") from None


# -- subcommands ------------------------------------------------------------------------

def _spec_from(args) -> bench.SyntheticSpec:
    doc = dict(_json_arg(args.spec) or {})
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    try:
        return bench.SyntheticSpec.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid spec: {e}") from None


def cmd_generate(args):
    _require(args, "out")
    spec = _spec_from(args)
    args.seed = spec.seed
    _resolved(args)
    out = Path(args.out)
    train_pairs, test_pairs = bench.generate_images(spec)
    manifest = {"format": DATASET_FORMAT, "version": 1, "spec": spec.to_dict(), "seed": spec.seed}
    for split, pairs in (("train", train_pairs), ("test", test_pairs)):
        _mkdir(out / split)
        entries = []
        for k, (mask, x) in enumerate(pairs):
            img, lab = f"img_{k:04d}.pgm", f"mask_{k:04d}.pgm"
            write_pgm(out / split / img, np.floor(255.0 * x + 0.5).astype(np.int64))
            write_pgm(out / split / lab, mask, maxval=1, binary=False)
            entries.append({"image": img, "mask": lab})
        manifest[split] = entries
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d train and %d test pairs to %s", len(train_pairs), len(test_pairs), out)
    return 0


def _read_image(path):
    img, maxval = read_pgm(path)
    return img.astype(np.float64) / maxval


def load_split(data_dir, split="train"):
    """[(mask, image in [0, 1])] for one split of a generated dataset directory."""
    data_dir = Path(data_dir)
    try:
        manifest = json.loads((data_dir / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read dataset manifest in {data_dir}: {e}") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise UsageError(f"{data_dir} is not a locpmap dataset")
    pairs = []
    for ent in manifest.get(split, []):
        mask, _ = read_pgm(data_dir / split / ent["mask"])
        pairs.append((mask, _read_image(data_dir / split / ent["image"])))
    if not pairs:
        raise UsageError(f"no {split} items in {data_dir}")
    return pairs


def cmd_train(args):
    _require(args, "data", "out")
    _resolved(args)
    pairs = load_split(args.data, "train")
    ds = bench.dataset_from_images(pairs)
    cfg = TrainConfig(learning_rate=args.lr, max_iters=args.iters, l2_weight=args.l2,
                      batch_size=args.batch_size, grad_tol=args.grad_tol,
                      freeze_pairwise=args.freeze_pairwise, seed=args.seed)
    init = Weights.zeros(ds.num_labels, ds.d_unary, ds.d_pairwise, args.symmetric)
    try:
        res = train(ds, init, cfg)
    except TrainingDiverged as e:
        log.error("training diverged: %s", e)
        return 2
    # the stored model carries the features of the first training image as a template
    save_model(args.out, ds.items[0][0], res.weights)
    trace = args.trace or str(Path(args.out).with_suffix("")) + ".trace.csv"
    res.write_trace_csv(trace)
    log.info("%d iterations, objective %.6g, grad norm %.3g", res.iterations, res.trace[-1], res.grad_norms[-1])
    print(json.dumps({"model": str(args.out), "trace": trace, "iterations": res.iterations,
                      "objective": res.trace[-1], "grad_norm": res.grad_norms[-1]}))
    return 0


def cmd_infer(args):
    _require(args, "model", "image")
    _resolved(args)
    template, weights = load_model(args.model)
    model = bench.model_from_image(_read_image(args.image), template.num_labels)
    if (model.d_unary, model.d_pairwise) != (template.d_unary, template.d_pairwise):
        raise UsageError("image features do not match the model's feature dimensions")
    cfg = InferenceConfig(method=args.method, num_samples=args.samples, max_sweeps=args.max_sweeps,
                          dropout_fraction=args.dropout, gibbs_samples=args.gibbs_samples, seed=args.seed)
    res = infer(model, weights, cfg, threads=args.threads)
    h, w = model.height, model.width
    K = model.num_labels
    written = {}
    if args.out_labels:
        write_pgm(args.out_labels, res.labels.reshape(h, w), maxval=max(K - 1, 1), binary=False)
        written["labels"] = args.out_labels
    if args.out_prob:
        # K=2: proportion of label 1; otherwise the frequency of the predicted label
        p = res.node_prob[:, 1] if K == 2 else res.node_prob[np.arange(model.num_nodes), res.labels]
        write_prob_map(args.out_prob, p.reshape(h, w))
        written["prob"] = args.out_prob
    if args.out_var:
        write_prob_map(args.out_var, res.node_var.reshape(h, w))
        written["var"] = args.out_var
    print(json.dumps({"method": args.method, "seed": args.seed, "samples_used": res.samples_used,
                      "sweeps": res.sweeps_run, "converged": bool(res.converged), "outputs": written}))
    return 0


def eval_rows(pred_dir, truth_dir, num_labels: int):
    pred_dir, truth_dir = Path(pred_dir), Path(truth_dir)
    names = sorted(p.name for p in pred_dir.glob("*.pgm"))
    if not names:
        raise UsageError(f"no .pgm files in {pred_dir}")
    rows, reps = [], []
    for name in names:
        if not (truth_dir / name).exists():
            raise UsageError(f"no truth image for {name}")
        pred, _ = read_pgm(pred_dir / name)
        truth, _ = read_pgm(truth_dir / name)
        if pred.shape != truth.shape:
            raise UsageError(f"size mismatch for {name}: {pred.shape} vs {truth.shape}")
        rep = bench.iou(pred, truth, num_labels)
        reps.append(rep)
        for c, v in enumerate(rep.per_class_iou):
            rows.append({"image": name, "class": str(c), "iou": float(v), "mean_iou": rep.mean_iou})
    per_class = np.mean([r.per_class_iou for r in reps], axis=0)
    mean = float(np.mean([r.mean_iou for r in reps]))
    for c, v in enumerate(per_class):
        rows.append({"image": "ALL", "class": str(c), "iou": float(v), "mean_iou": mean})
    return rows


def cmd_eval(args):
    _require(args, "pred", "truth")
    _resolved(args)
    rows = eval_rows(args.pred, args.truth, args.num_labels)
    fields = ["image", "class", "iou", "mean_iou"]
    text_csv = bench.rows_to_csv(rows, fields)
    text_json = bench.rows_to_json(rows) + "\n"
    sys.stdout.write(text_csv if args.format == "csv" else text_json)
    if args.out:
        Path(args.out).write_text(text_json if str(args.out).endswith(".json") else text_csv)
    return 0


def cmd_verify(args):
    _resolved(args)
    report = validation.run_checks(args.check, args.draws, args.seed)
    for w in report["warnings"]:
        log.warning("warning: %s", w)
    for c in report["checks"]:
        log.info("%-28s %s  max dev %.3g (tol %.3g)", c["name"], "PASS" if c["passed"] else "FAIL",
                 c["max_abs_dev"], c["tolerance"])
    print(json.dumps(report, indent=2))
    return 0 if report["passed"] else 1


def cmd_bench(args):
    _require(args, "out")
    spec = _spec_from(argparse.Namespace(spec=args.spec, seed=None))
    methods = _csv_list(args.methods)
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"unknown method(s) {bad}; valid: {', '.join(METHODS)}")
    try:
        seeds = [int(s) for s in _csv_list(args.seeds)]
    except ValueError:
        raise UsageError("--seeds must be a comma-separated list of integers") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    args.methods, args.seeds = methods, seeds
    _resolved(args)
    out = Path(args.out)
    _mkdir(out)
    tcfg = TrainConfig(learning_rate=args.lr, max_iters=args.iters)
    summary = []
    for s in seeds:
        icfgs = {m: InferenceConfig(method=m, num_samples=args.samples, seed=s) for m in methods}
        res = bench.run_experiment(replace(spec, seed=s), methods, replace(tcfg, seed=s), icfgs,
                                   threads=args.threads, pooled=args.pooled, inference_seed=s)
        (out / f"results_seed{s}.csv").write_text(
            bench.rows_to_csv(res.rows(timing=False), ["method", "class", "iou", "mean_iou"]))
        for sc in res.scores:
            summary.append({"method": sc.method, "seed": s, "mean_iou": sc.mean_iou,
                            "wallclock_ms": sc.wallclock_ms})
            log.info("seed %d %-10s mean IoU %.4f  %.0f ms", s, sc.method, sc.mean_iou, sc.wallclock_ms)
    det = [{k: r[k] for k in ("method", "seed", "mean_iou")} for r in summary]
    (out / "summary.csv").write_text(bench.rows_to_csv(det, ["method", "seed", "mean_iou"]))
    (out / "timing.csv").write_text(bench.rows_to_csv(summary, ["method", "seed", "mean_iou", "wallclock_ms"]))
    (out / "summary.json").write_text(json.dumps({"spec": spec.to_dict(), "seeds": seeds, "rows": summary},
                                                  indent=2) + "\n")
    sys.stdout.write(bench.rows_to_csv(summary, ["method", "seed", "mean_iou", "wallclock_ms"]))
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "verify": cmd_verify, "bench": cmd_bench}


def main(argv=None) -> int:
    for h in list(log.handlers):
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    log.propagate = False
    try:
        args = parse_args(argv)
    except SystemExit as e:  # argparse usage errors exit with 2
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValueError, PGMError, UnsupportedBlockSize, OSError) as e:
        log.error("error: %s", e)
        return 2
    except Exception:  # pragma: no cover
        log.exception("internal error")
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
