"""``geco`` command-line entry point.

Exit codes: 0 success, 2 usage, 3 file access, 4 file format, 5 domain error.
Every failure is reported as one line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .bench import bench
from .features import FeatureMap, GecoError
from .loss import LossWeights, build_correspondence_sets, finite_difference_check, loss_and_gradient
from .marginals import MarginalSpec, estimate_marginals, visibility_ratio
from .match_eval import match_pair, parse_sweep, radius_sweep, summarize
from .ot import BALANCED, UNBALANCED, Marginals, SolverConfig, build_score_matrix, marginal_residual, solve
from .seg_eval import (
    centroid_assign,
    centroid_fit,
    confusion_matrix,
    confusion_normalize,
    geometric_subset_metrics,
    seg_metrics,
)
from .synth import DatasetSpec, SyntheticPairSpec, gen_synthetic_pair, pair_id, part_labels
from .trainer import LinearAdapter, TrainConfig, evaluate_adapter, train

EXIT_USAGE, EXIT_FILE, EXIT_FORMAT, EXIT_DOMAIN = 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_report(path, obj) -> None:
    Path(path).write_text(io.dumps(obj), encoding="utf-8")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise io.FormatError(io.FormatError.SCHEMA, f"{Path(path).name}: {exc}") from exc


def _read_list(path) -> list[Path]:
    """Non-blank, non-comment lines of a list file, resolved against its directory."""
    base = Path(path).parent
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append([base / part for part in line.split()])
    return out


def _solver_config(args) -> SolverConfig:
    return SolverConfig(lam=args.lam, alpha=args.alpha, beta=args.beta, iterations=args.iters, z=args.z)


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _load_adapter(path):
    return None if path is None else LinearAdapter(io.read_adapter(path))


def _adapt(f: FeatureMap, adapter):
    return f if adapter is None else adapter.apply(f)


def _dataset_spec(path, args) -> DatasetSpec:
    obj = _read_json(path)
    if not isinstance(obj, dict):
        raise io.FormatError(io.FormatError.SCHEMA, "spec must be an object")
    spec = DatasetSpec.from_dict(obj)
    if args.seed_given:
        gen = SyntheticPairSpec(**{**spec.generator.__dict__, "category_seed": args.seed})
        spec = DatasetSpec(gen, spec.train_seeds, spec.heldout_seeds)
    return spec


# subcommands ---------------------------------------------------------------


def cmd_gen_synth(args) -> None:
    spec = _dataset_spec(args.spec, args)
    out = Path(args.out_dir)
    for sub in ("features", "annotations", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lists = {"train": [], "heldout": []}
    seg = {"train": [], "heldout": []}
    for split, seeds in (("train", spec.train_seeds), ("heldout", spec.heldout_seeds)):
        for seed in seeds:
            xs, xt, ann = gen_synthetic_pair(spec.generator.with_seed(seed))
            pid = pair_id(ann)
            io.write_annotation(out / "annotations" / f"{pid}.json", ann)
            lists[split].append(f"annotations/{pid}.json")
            for fmap, image_id, kps, mask in (
                (xs, ann.source_id, ann.keypoints_src, ann.mask_src),
                (xt, ann.target_id, ann.keypoints_tgt, ann.mask_tgt),
            ):
                io.write_features(out / "features" / f"{image_id}.gecf", fmap)
                io.write_labels(out / "labels" / f"{image_id}.json", part_labels(fmap, kps, mask))
                seg[split].append(f"features/{image_id}.gecf labels/{image_id}.json")
    for name, lines in (
        ("train.txt", lists["train"]),
        ("heldout.txt", lists["heldout"]),
        ("pairs.txt", lists["train"] + lists["heldout"]),
        ("seg_fit.txt", seg["train"]),
        ("seg_eval.txt", seg["heldout"]),
    ):
        (out / name).write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    _write_report(out / "parts.json", parts_document(spec.generator))
    manifest = {
        "dataset": spec.to_dict(),
        "n_train_pairs": len(lists["train"]),
        "n_heldout_pairs": len(lists["heldout"]),
        "lists": ["train.txt", "heldout.txt", "pairs.txt", "seg_fit.txt", "seg_eval.txt"],
    }
    _write_report(out / "manifest.json", manifest)


def parts_document(gen: SyntheticPairSpec) -> dict:
    """Part table matching :func:`geco.synth.part_labels`."""
    partner = {}
    for p, q in gen.symmetry_pairs:
        partner[p], partner[q] = q, p
    parts = [
        {"id": 0, "name": "background", "symmetric_id": None},
        {"id": 1, "name": "body", "symmetric_id": None},
    ]
    for k in range(gen.n_keypoints):
        parts.append({"id": 2 + k, "name": f"keypoint{k}", "symmetric_id": 2 + partner[k] if k in partner else None})
    return {"parts": parts}


def cmd_marginals(args) -> None:
    ann = io.read_annotation(args.annotation)
    spec = MarginalSpec(visibility_ratio(ann.keypoints_src), visibility_ratio(ann.keypoints_tgt), args.s)
    marg, flags = estimate_marginals(ann.mask_src, ann.mask_tgt, spec)
    for flag in flags:
        print(f"geco: warning: {flag}", file=sys.stderr)
    io.write_marginals(args.out, marg)


def cmd_solve(args) -> None:
    xs = io.read_features(args.features_src)
    xt = io.read_features(args.features_tgt)
    cfg = _solver_config(args)
    c = build_score_matrix(xs, xt, cfg.z)
    marg = io.read_marginals(args.marginals) if args.marginals else Marginals.uniform(c.l + 1, c.m + 1)
    if marg.a.shape != (c.l + 1,) or marg.b.shape != (c.m + 1,):
        raise GecoError(f"marginals sized {marg.a.size}x{marg.b.size}, score matrix {c.l + 1}x{c.m + 1}")
    plan = solve(c, marg, cfg, args.mode, tol=args.tol)
    io.write_plan(args.out, plan)
    if args.report:
        values = plan.values
        _write_report(args.report, {
            "mode": args.mode,
            "solver": _solver_dict(cfg),
            "shape": list(values.shape),
            "iterations_run": plan.iterations_run,
            "total_mass": float(values.sum()),
            "marginal_residual": marginal_residual(plan, marg),
            "bin_row_mass": float(values[-1, :].sum()),
            "bin_col_mass": float(values[:, -1].sum()),
        })


def _solver_dict(cfg: SolverConfig) -> dict:
    return {"lambda": cfg.lam, "alpha": cfg.alpha, "beta": cfg.beta, "iterations": cfg.iterations, "z": cfg.z}


def _result_dict(r) -> dict:
    return {
        "query_id": r.query_id,
        "split": r.split,
        "pred": list(r.pred),
        "gt": list(r.gt),
        "sym": None if r.sym is None else list(r.sym),
        "similarity": r.similarity,
    }


def cmd_match(args) -> None:
    xs = io.read_features(args.features_src)
    xt = io.read_features(args.features_tgt)
    ann = io.read_annotation(args.annotation)
    ann.check_geometry(xs, xt)
    adapter = _load_adapter(args.adapter)
    results = match_pair(_adapt(xs, adapter), _adapt(xt, adapter), ann)
    report = {"pair": pair_id(ann), "matches": [_result_dict(r) for r in results]}
    if results:
        report["summary"] = summarize(results, args.alpha, args.norm)
    _write_report(args.out, report)


def _find_features(directory: Path, image_id: str) -> Path:
    for candidate in (directory / f"{image_id}.gecf", directory / "features" / f"{image_id}.gecf"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no feature file for image {image_id} in the pair directory")


def cmd_loss(args) -> None:
    pair_dir = Path(args.pair_dir)
    ann = io.read_annotation(pair_dir / "annotation.json")
    xs = io.read_features(_find_features(pair_dir, ann.source_id))
    xt = io.read_features(_find_features(pair_dir, ann.target_id))
    ann.check_geometry(xs, xt)
    cfg = _solver_config(args)
    w = LossWeights(args.w_pos, args.w_bin, args.w_neg)
    marg, flags = estimate_marginals(
        ann.mask_src, ann.mask_tgt,
        MarginalSpec(visibility_ratio(ann.keypoints_src), visibility_ratio(ann.keypoints_tgt), args.s),
    )
    sets = build_correspondence_sets(ann, xs.grid, xt.grid, args.neg_samples, args.seed)
    res = loss_and_gradient(xs.values, xt.values, marg, sets, cfg, w, args.mode)
    report = {
        "pair": pair_id(ann),
        "mode": args.mode,
        "solver": _solver_dict(cfg),
        "loss": res.loss,
        "n_positive": len(sets.positives),
        "n_bin": len(sets.bins),
        "n_negative": len(sets.negatives),
        "marginal_flags": flags,
        "grad_norm": float(np.sqrt(np.sum(res.grad_src ** 2) + np.sum(res.grad_tgt ** 2))),
    }
    if args.check_grad:
        worst, checked = finite_difference_check(
            xs.values, xt.values, marg, sets, cfg, w, args.mode,
            step=args.fd_step, max_entries=args.fd_entries, seed=args.seed,
        )
        report["grad_check"] = {"step": args.fd_step, "max_relative_error": worst, "n_checked": checked}
    text = io.dumps(report)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")


def cmd_train_toy(args) -> None:
    spec = _dataset_spec(args.spec, args)
    if not spec.train_seeds:
        raise GecoError("spec has no training seeds")
    if not spec.heldout_seeds:
        raise GecoError("spec has no held-out seeds")
    cfg = TrainConfig(
        steps=args.steps, learning_rate=args.lr, batch_pairs=args.batch, sigma_init=args.sigma_init,
        seed=args.seed, mode=args.mode, s=args.s, solver=_solver_config(args),
        weights=LossWeights(args.w_pos, args.w_bin, args.w_neg), neg_fg_bg_samples=args.neg_samples,
    )
    train_set, heldout = spec.train_set(), spec.heldout_set()
    init = LinearAdapter.init(spec.generator.dim, cfg.sigma_init, cfg.seed)
    before = evaluate_adapter(init, heldout, cfg, args.pck_alpha, args.norm, args.threads)
    adapter, trace = train(train_set, cfg, args.threads, init)
    after = evaluate_adapter(adapter, heldout, cfg, args.pck_alpha, args.norm, args.threads)
    io.write_adapter(args.out, adapter.weight)
    if args.report:
        _write_report(args.report, {
            "dataset": spec.to_dict(),
            "config": {
                "steps": cfg.steps, "learning_rate": cfg.learning_rate, "batch_pairs": cfg.batch_pairs,
                "sigma_init": cfg.sigma_init, "seed": cfg.seed, "mode": cfg.mode, "s": cfg.s,
                "neg_fg_bg_samples": cfg.neg_fg_bg_samples, "solver": _solver_dict(cfg.solver),
                "weights": {"pos": cfg.weights.w_pos, "bin": cfg.weights.w_bin, "neg": cfg.weights.w_neg},
            },
            "loss_trace": trace,
            "before": before,
            "after": after,
        })


def _eval_pairs(args):
    entries = _read_list(args.pairs)
    features_dir = Path(args.features_dir) if args.features_dir else Path(args.pairs).parent / "features"
    adapter = _load_adapter(args.adapter)

    def one(entry):
        ann = io.read_annotation(entry[0])
        xs = io.read_features(features_dir / f"{ann.source_id}.gecf")
        xt = io.read_features(features_dir / f"{ann.target_id}.gecf")
        ann.check_geometry(xs, xt)
        return match_pair(_adapt(xs, adapter), _adapt(xt, adapter), ann)

    per_pair = _map(one, entries, args.threads)
    return [r for rs in per_pair for r in rs], len(entries)


def _cmd_eval(args, metric: str) -> None:
    results, n_pairs = _eval_pairs(args)
    alphas = parse_sweep(args.sweep) if args.sweep else [args.alpha]
    table = radius_sweep(results, alphas, args.norm)
    if not results:
        raise GecoError("no evaluable pairs")
    main = summarize(results, args.alpha, args.norm)
    report = {
        "metric": metric,
        "norm": args.norm,
        "n_pairs": n_pairs,
        "alpha": args.alpha,
        "value": main[metric],
        "summary": main,
        "sweep": table,
    }
    _write_report(args.out, report)


def cmd_eval_pck(args) -> None:
    _cmd_eval(args, "pck")


def cmd_eval_pgck(args) -> None:
    _cmd_eval(args, "pgck")


def _load_seg_list(path, adapter, threads):
    def one(entry):
        if len(entry) != 2:
            raise io.FormatError(io.FormatError.SCHEMA, "segmentation list lines need a feature and a label file")
        f = _adapt(io.read_features(entry[0]), adapter)
        labels = io.read_labels(entry[1])
        if labels.shape != (f.rows, f.cols):
            raise GecoError("label grid does not match the feature grid")
        return f, labels.reshape(-1)

    return _map(one, _read_list(path), threads)


def cmd_eval_seg(args) -> None:
    parts_doc = _read_json(args.parts)
    try:
        parts = sorted(parts_doc["parts"], key=lambda p: p["id"])
        part_ids = [int(p["id"]) for p in parts]
        symmetric = {int(p["id"]): p.get("symmetric_id") for p in parts}
    except (KeyError, TypeError, ValueError) as exc:
        raise io.FormatError(io.FormatError.SCHEMA, "parts file needs a list of {id, name, symmetric_id}") from exc
    adapter = _load_adapter(args.adapter)
    fit = _load_seg_list(args.fit_list, adapter, args.threads)
    evaluate = _load_seg_list(args.eval_list, adapter, args.threads)
    if not fit or not evaluate:
        raise GecoError("empty image list")
    vectors = np.concatenate([np.asarray(f.values, dtype=np.float64) for f, _ in fit])
    labels = np.concatenate([lab for _, lab in fit])
    centroids = centroid_fit(vectors, labels, part_ids)
    conf = np.zeros((len(part_ids), len(part_ids)), dtype=np.int64)
    for f, lab in evaluate:
        conf += confusion_matrix(lab, centroid_assign(f, centroids), part_ids)
    display, zero_cols = confusion_normalize(conf)
    report = {
        "parts": [{"id": int(p["id"]), "name": str(p.get("name", "")), "symmetric_id": p.get("symmetric_id")}
                  for p in parts],
        "n_fit_images": len(fit),
        "n_eval_images": len(evaluate),
        "metrics": seg_metrics(conf),
        "confusion": conf.tolist(),
        "confusion_normalized": display.tolist(),
        "zero_columns": [part_ids[k] for k in zero_cols],
    }
    if any(v is not None for v in symmetric.values()):
        report["geometric"] = geometric_subset_metrics(conf, part_ids, symmetric)
    _write_report(args.out, report)


def cmd_bench(args) -> None:
    report = bench(args.sizes, _solver_config(args), args.mode, args.runs, args.warmup, args.threads, args.seed)
    text = io.dumps(report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# parser --------------------------------------------------------------------


def _solver_flags(p) -> None:
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=10.0, help="KL weight on the source marginal")
    p.add_argument("--beta", type=float, default=10.0, help="KL weight on the target marginal")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--z", type=float, default=0.3, help="bin score")


def _mode_flag(p) -> None:
    p.add_argument("--mode", choices=(BALANCED, UNBALANCED), default=UNBALANCED)


def _loss_flags(p) -> None:
    p.add_argument("--s", type=float, default=0.9, help="shape mass")
    p.add_argument("--w-pos", type=float, default=1.0)
    p.add_argument("--w-bin", type=float, default=1.0)
    p.add_argument("--w-neg", type=float, default=10.0)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _sizes(text):
    try:
        sizes = [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError("sizes are comma-separated integers")
    if not sizes or any(s < 2 for s in sizes):
        raise argparse.ArgumentTypeError("sizes must be integers >= 2")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (fallback: GECO_SEED)")
    common.add_argument("--threads", type=_positive_int, default=argparse.SUPPRESS)
    common.add_argument("--format", choices=("json",), default=argparse.SUPPRESS, help="report format")

    parser = _Parser(prog="geco", description="Geometry-aware correspondence toolkit.")
    parser.add_argument("--seed", type=int, default=None, help="random seed (fallback: GECO_SEED)")
    parser.add_argument("--threads", type=_positive_int, default=1)
    parser.add_argument("--format", choices=("json",), default="json", help="report format")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("gen-synth", cmd_gen_synth, "write a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-dir", required=True)

    p = add("marginals", cmd_marginals, "marginals from an annotation")
    p.add_argument("--annotation", required=True)
    p.add_argument("--s", type=float, default=0.9)
    p.add_argument("--out", required=True)

    p = add("solve", cmd_solve, "entropic OT plan between two feature maps")
    p.add_argument("--features-src", required=True)
    p.add_argument("--features-tgt", required=True)
    _mode_flag(p)
    _solver_flags(p)
    p.add_argument("--marginals", help="marginal file; uniform when omitted")
    p.add_argument("--tol", type=float, default=None, help="early-stop residual")
    p.add_argument("--out", required=True)
    p.add_argument("--report")

    p = add("match", cmd_match, "argmax keypoint matching for one pair")
    p.add_argument("--features-src", required=True)
    p.add_argument("--features-tgt", required=True)
    p.add_argument("--annotation", required=True)
    p.add_argument("--adapter")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--norm", choices=("image", "bbox"), default="image")
    p.add_argument("--out", required=True)

    p = add("loss", cmd_loss, "OT loss of one pair, optionally with a gradient check")
    p.add_argument("--pair-dir", required=True)
    _mode_flag(p)
    _solver_flags(p)
    _loss_flags(p)
    p.add_argument("--neg-samples", type=int, default=0, help="sampled foreground/background negatives")
    p.add_argument("--check-grad", action="store_true")
    p.add_argument("--fd-step", type=float, default=1e-4)
    p.add_argument("--fd-entries", type=int, default=200, help="coordinates checked")
    p.add_argument("--out")

    p = add("train-toy", cmd_train_toy, "train a linear adapter on synthetic pairs")
    p.add_argument("--spec", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=_positive_int, default=4)
    p.add_argument("--sigma-init", type=float, default=0.01)
    p.add_argument("--neg-samples", type=int, default=8)
    _mode_flag(p)
    _solver_flags(p)
    _loss_flags(p)
    p.add_argument("--pck-alpha", dest="pck_alpha", type=float, default=0.1)
    p.add_argument("--norm", choices=("image", "bbox"), default="image")
    p.add_argument("--out", required=True)
    p.add_argument("--report")

    for name, func in (("eval-pck", cmd_eval_pck), ("eval-pgck", cmd_eval_pgck)):
        p = add(name, func, f"{name[5:].upper()} over a pair list")
        p.add_argument("--pairs", required=True)
        p.add_argument("--features-dir")
        p.add_argument("--adapter")
        p.add_argument("--alpha", type=float, default=0.1)
        p.add_argument("--sweep")
        p.add_argument("--norm", choices=("image", "bbox"), default="image")
        p.add_argument("--out", required=True)

    p = add("eval-seg", cmd_eval_seg, "centroid part segmentation metrics")
    p.add_argument("--fit-list", required=True)
    p.add_argument("--eval-list", required=True)
    p.add_argument("--parts", required=True)
    p.add_argument("--adapter")
    p.add_argument("--out", required=True)

    p = add("bench", cmd_bench, "time the sinkhorn layer")
    p.add_argument("--sizes", type=_sizes, default=[1370])
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=3)
    _mode_flag(p)
    _solver_flags(p)
    p.add_argument("--out")
    return parser


def _resolve_seed(args) -> None:
    args.seed_given = args.seed is not None
    if args.seed is None:
        env = os.environ.get("GECO_SEED")
        if env is not None:
            try:
                args.seed = int(env)
            except ValueError:
                raise UsageError(f"GECO_SEED must be an integer, got {env!r}")
            args.seed_given = True
        else:
            args.seed = 0


def _fail(code: int, kind: str, message) -> int:
    text = " ".join(str(message).split())
    print(f"geco: error: {kind}: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _resolve_seed(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    try:
        args.func(args)
    except io.FormatError as exc:
        return _fail(EXIT_FORMAT, "format", exc)
    except (OSError, UnicodeDecodeError) as exc:
        detail = f"{exc.strerror}: {Path(exc.filename).name}" if getattr(exc, "filename", None) else exc
        return _fail(EXIT_FILE, "file", detail)
    except GecoError as exc:
        return _fail(EXIT_DOMAIN, "domain", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
