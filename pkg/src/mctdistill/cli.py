"""Command-line entry point: ``mctdistill <command> [flags]``.

Commands chain through directories.  ``gen-experts`` writes buffers and a
manifest, ``convexify`` turns a buffer directory into convex files,
``distill`` reads either kind and writes a synthetic set with its traces,
``eval`` scores a synthetic set or a random real subset, ``report`` merges
run summaries into one table and ``pca`` projects a trajectory.

Settings come from built-in defaults, then the ``config.json`` found next to
the inputs, then ``--config``, then flags.  The effective configuration is
written to every output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .datasets import desk_blobs, load_idx, split
from .distill import DistillConfig, distill, read_synthetic, write_report_csv, write_synthetic
from .errors import ConfigError, MctError, with_context
from .evaluate import (
    convergence_iteration,
    evaluate_synthetic,
    pca_project_trajectory,
    random_subset_baseline,
    stability_metric,
    write_comparison_csv,
    write_eval_trace_csv,
    write_pca_csv,
)
from .expert import ExpertConfig, train_expert_ensemble
from .model import ModelSpec
from .seeding import derive_seed
from .trajectory import (
    convexify,
    encode_convex,
    read_buffer,
    read_convex,
    sample_continuous,
    storage_report,
    write_buffer,
    write_convex,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"
CONFIG = "config.json"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# parsing helpers


def parse_anchors(text: str) -> tuple:
    """``"0,6,25,K"`` -> ``(0, 6, 25, "K")``."""
    tokens = [t.strip() for t in text.split(",")]
    out = []
    for tok in tokens:
        if tok == "K":
            out.append("K")
        elif tok.isdigit():
            out.append(int(tok))
        else:
            raise UsageError(f"malformed anchors {text!r}: {tok!r} is neither a non-negative integer nor K")
    if len(out) < 2:
        raise UsageError(f"malformed anchors {text!r}: at least two anchors are required")
    return tuple(out)


def parse_int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated list of integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise UsageError(f"{what} values must be >= 1")
    return values


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    if not path.is_file():
        raise MctError(f"missing file {path}")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# config resolution


def base_config(args, near: Optional[Path] = None) -> RunConfig:
    cfg = RunConfig()
    if near is not None:
        candidate = (near if near.is_dir() else near.parent) / CONFIG
        if candidate.is_file():
            cfg = RunConfig.load(candidate)
    if args.config:
        cfg = RunConfig.load(args.config)
    cfg = cfg.with_overrides("seed", seed=args.seed)
    cfg = cfg.with_overrides(
        "dataset", name=args.dataset, images=args.idx_images, labels=args.idx_labels
    )
    return cfg


def load_data(cfg: RunConfig):
    ds = cfg.dataset
    if ds.name == "blobs":
        return desk_blobs(
            seed=derive_seed(cfg.seed, "dataset"),
            num_classes=ds.num_classes,
            feature_dim=ds.feature_dim,
            train_per_class=ds.train_per_class,
            val_per_class=ds.val_per_class,
            spread=ds.spread,
        )
    if ds.name == "idx":
        if not ds.images or not ds.labels:
            raise UsageError("the idx dataset needs --idx-images and --idx-labels")
        full = load_idx(ds.images, ds.labels, standardize=ds.standardize)
        return split(full, ds.train_fraction, derive_seed(cfg.seed, "split"), stratify=True)
    raise UsageError(f"unknown dataset {ds.name!r}")


def model_spec(cfg: RunConfig, train) -> ModelSpec:
    return ModelSpec(train.feature_dim, tuple(cfg.model.hidden_widths), train.num_classes)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_experts(args) -> int:
    cfg = base_config(args)
    cfg = cfg.with_overrides(
        "expert", epochs=args.epochs, num_experts=args.num_experts, lr=args.lr, batch_size=args.batch_size
    )
    if args.hidden is not None:
        cfg = cfg.with_overrides("model", hidden_widths=parse_int_list(args.hidden, "--hidden"))
    e = cfg.expert
    try:
        config = ExpertConfig(
            epochs=e.epochs, batch_size=e.batch_size, lr=e.lr, num_experts=e.num_experts,
            base_seed=derive_seed(cfg.seed, "experts"), record_step_norms=e.record_step_norms,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    train, val = load_data(cfg)
    spec = model_spec(cfg, train)
    buffers = train_expert_ensemble(train, val, spec, config, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, buf in enumerate(buffers):
        name = f"expert_{i:03d}.mttb"
        write_buffer(out / name, buf)
        files.append(name)
        print(f"{name}: final val accuracy {buf.val_accuracy[-1]:.4f}")
    _write_json(out / MANIFEST, {
        "kind": "mtt",
        "files": files,
        "K": e.epochs,
        "expert_lr": e.lr,
        "dataset": cfg.to_dict()["dataset"],
        "final_val_accuracy": [float(b.val_accuracy[-1]) for b in buffers],
    })
    cfg.save(out / CONFIG)
    return EXIT_OK


def _load_manifest(directory: Path) -> dict:
    manifest = _read_json(directory / MANIFEST)
    for name in manifest["files"]:
        if not (directory / name).is_file():
            raise MctError(f"manifest lists missing file {directory / name}")
    return manifest


def cmd_convexify(args) -> int:
    src = Path(args.inp)
    cfg = base_config(args, src)
    cfg = cfg.with_overrides("convexify", anchors=args.anchors)
    anchors = parse_anchors(cfg.convexify.anchors)
    manifest = _load_manifest(src)
    if manifest.get("kind") != "mtt":
        raise MctError(f"{src} does not hold expert buffers")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files, ratios = [], []
    for name in manifest["files"]:
        buf = read_buffer(src / name)
        try:
            traj = convexify(buf, anchors)
        except (MctError, ValueError) as exc:
            raise with_context(exc, name) from exc
        target = Path(name).with_suffix(".mctb").name
        write_convex(out / target, traj)
        rep = storage_report(buf, traj, src / name, out / target)
        files.append(target)
        ratios.append(rep.ratio)
        print(f"{target}: storage ratio {rep.ratio:.4f} ({rep.bytes_conv} of {rep.bytes_mtt} bytes)")
    _write_json(out / MANIFEST, {**manifest, "kind": "mct", "files": files, "anchors": cfg.convexify.anchors,
                                 "storage_ratio": ratios})
    cfg.save(out / CONFIG)
    return EXIT_OK


def _load_experts(directory: Path, mode: str, anchors: tuple):
    manifest = _load_manifest(directory)
    kind = manifest.get("kind")
    if kind == "mtt":
        buffers = [read_buffer(directory / f) for f in manifest["files"]]
        if mode == "mtt":
            trajs = buffers
            storage = sum((directory / f).stat().st_size for f in manifest["files"])
        else:
            trajs = []
            for name, b in zip(manifest["files"], buffers):
                try:
                    trajs.append(convexify(b, anchors))
                except (MctError, ValueError) as exc:
                    raise with_context(exc, name) from exc
            storage = sum(len(encode_convex(t)) for t in trajs)
    elif kind == "mct":
        if mode == "mtt":
            raise MctError(f"{directory} holds convexified trajectories; mtt mode needs expert buffers")
        trajs = [read_convex(directory / f) for f in manifest["files"]]
        storage = sum((directory / f).stat().st_size for f in manifest["files"])
    else:
        raise MctError(f"{directory / MANIFEST}: unknown kind {kind!r}")
    return manifest, trajs, storage


def _method_name(dc) -> str:
    if dc.mode == "mct" and not dc.continuous_sampling:
        return "mct-discrete"
    return dc.mode


def cmd_distill(args) -> int:
    src = Path(args.experts)
    cfg = base_config(args, src)
    cfg = cfg.with_overrides(
        "distill", mode=args.mode, ipc=args.ipc, N=args.N, max_start_epoch=args.max_start,
        outer_iters=args.iters, eval_every=args.eval_every, continuous_sampling=args.continuous,
        outer_lr_features=args.outer_lr_features, outer_lr_alpha=args.outer_lr_alpha,
    )
    cfg = cfg.with_overrides("eval", repeats=args.repeats, train_iters=args.train_iters)
    cfg = cfg.with_overrides("convexify", anchors=args.anchors)
    m_values = parse_int_list(args.M, "--M") if args.M is not None else [cfg.distill.M]
    anchors = parse_anchors(cfg.convexify.anchors)
    d = cfg.distill
    if d.outer_iters < 0:
        raise UsageError("--iters must be >= 0")
    if cfg.eval.repeats < 1 or cfg.eval.train_iters < 1:
        raise UsageError("--repeats and --train-iters must be >= 1")
    try:
        configs = [
            DistillConfig(
                mode=d.mode, ipc=d.ipc, M=m, N=d.N, max_start_epoch=d.max_start_epoch,
                outer_lr_features=d.outer_lr_features, outer_lr_alpha=d.outer_lr_alpha,
                outer_iters=d.outer_iters, eval_every=d.eval_every,
                continuous_sampling=d.continuous_sampling, anchors=anchors, seed=cfg.seed,
            )
            for m in m_values
        ]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    manifest, trajs, storage = _load_experts(src, d.mode, anchors)
    if manifest.get("dataset") != cfg.to_dict()["dataset"]:
        raise MctError("dataset settings differ from the ones the experts were trained on")
    train, val = load_data(cfg)
    spec = model_spec(cfg, train)
    if any(t.spec != spec for t in trajs):
        raise MctError("expert model spec does not match the configured model")
    eval_seed = derive_seed(cfg.seed, "eval")

    def eval_fn(syn):
        rep = evaluate_synthetic(syn, val, spec, cfg.eval.repeats, cfg.eval.train_iters, eval_seed)
        return rep.mean, rep.std

    root = Path(args.out)
    for m, dc in zip(m_values, configs):
        out = root / f"M{m}" if len(m_values) > 1 else root
        out.mkdir(parents=True, exist_ok=True)
        syn, report = distill(trajs, train, dc, expert_lr=manifest["expert_lr"], eval_fn=eval_fn)
        percent = [(i, 100.0 * a) for i, a in report.eval_trace()]
        report.convergence_iteration = convergence_iteration(percent, cfg.eval.epsilon)
        tail = min(d.stability_tail, len(percent))
        tail_std = stability_metric(percent, tail) if tail >= 2 else None
        write_synthetic(out / "synthetic.synd", syn)
        write_report_csv(out / "report.csv", report)
        write_eval_trace_csv(out / "eval_trace.csv", report.eval_iterations, report.eval_mean, report.eval_std)
        _write_json(out / "summary.json", {
            "method": _method_name(dc),
            "ipc": dc.ipc,
            "M": m,
            "N": dc.N,
            "outer_iters": dc.outer_iters,
            "final_mean": report.eval_mean[-1],
            "final_std": report.eval_std[-1],
            "final_alpha": report.final_alpha,
            "convergence_iter": report.convergence_iteration,
            "tail_std": tail_std,
            "storage_bytes": storage,
        })
        cfg.with_overrides("distill", M=m).save(out / CONFIG)
        print(
            f"{_method_name(dc)} M={m}: accuracy {100 * report.eval_mean[-1]:.2f} ± {100 * report.eval_std[-1]:.2f}, "
            f"convergence at {report.convergence_iteration}, {report.wall_time:.1f}s"
        )
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.synthetic is None) == (args.random_ipc is None):
        raise UsageError("give exactly one of --synthetic or --random-ipc")
    near = Path(args.synthetic) if args.synthetic else None
    if near is not None and not near.is_file():
        raise MctError(f"missing file {near}")
    cfg = base_config(args, near)
    cfg = cfg.with_overrides("eval", repeats=args.repeats, train_iters=args.train_iters)
    if cfg.eval.repeats < 1 or cfg.eval.train_iters < 1:
        raise UsageError("--repeats and --train-iters must be >= 1")
    train, val = load_data(cfg)
    spec = model_spec(cfg, train)
    if args.synthetic:
        syn = read_synthetic(args.synthetic)
        rep = evaluate_synthetic(syn, val, spec, cfg.eval.repeats, cfg.eval.train_iters,
                                 derive_seed(cfg.seed, "eval"))
        method, ipc = "synthetic", syn.ipc
    else:
        lr = args.lr if args.lr is not None else cfg.expert.lr
        rep = random_subset_baseline(train, args.random_ipc, val, spec, lr, cfg.eval.repeats,
                                     cfg.eval.train_iters, derive_seed(cfg.seed, "baseline"))
        method, ipc = "random", args.random_ipc
    print(f"{method} ipc={ipc}: accuracy {100 * rep.mean:.2f} ± {100 * rep.std:.2f} over {rep.repeats} repeat(s)")
    if args.out:
        _write_json(Path(args.out), {
            "method": method, "ipc": ipc, "final_mean": rep.mean, "final_std": rep.std,
            "accuracies": rep.accuracies, "convergence_iter": None, "storage_bytes": None,
        })
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for item in args.inputs:
        path = Path(item)
        summary = _read_json(path / "summary.json" if path.is_dir() else path)
        rows.append({
            "method": summary["method"],
            "ipc": summary["ipc"],
            "mean": summary["final_mean"],
            "std": summary["final_std"],
            "convergence_iter": summary.get("convergence_iter"),
            "storage_bytes": summary.get("storage_bytes"),
        })
    write_comparison_csv(args.out, rows)
    for r in rows:
        print(f"{r['method']:>12} ipc={r['ipc']}: {100 * r['mean']:.2f} ± {100 * r['std']:.2f}"
              f"  convergence {r['convergence_iter']}")
    return EXIT_OK


def cmd_pca(args) -> int:
    buf_path = Path(args.buffer)
    if not buf_path.is_file():
        raise MctError(f"missing file {buf_path}")
    cfg = base_config(args, buf_path)
    cfg = cfg.with_overrides("convexify", anchors=args.anchors)
    buf = read_buffer(buf_path)
    traj = convexify(buf, parse_anchors(cfg.convexify.anchors))
    _, val = load_data(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = derive_seed(cfg.seed, "pca")
    for label, waypoints in (
        ("mtt", buf.checkpoints),
        ("mct", [sample_continuous(traj, t) for t in range(traj.K + 1)]),
    ):
        pca = pca_project_trajectory(waypoints, val=val, seed=seed)
        write_pca_csv(out / f"pca_{label}.csv", pca)
        print(f"{label}: second/first component variance {pca.variances[1] / pca.variances[0]:.3e}")
    cfg.save(out / CONFIG)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", choices=["blobs", "idx"])
    p.add_argument("--idx-images")
    p.add_argument("--idx-labels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mctdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-experts", help="train expert trajectories")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--num-experts", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hidden", help="hidden widths, e.g. 64,64")
    p.add_argument("--workers", type=int, help="parallel processes (default: $MCTDISTILL_THREADS or 1)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_experts)

    p = sub.add_parser("convexify", help="convert expert buffers to convex trajectories")
    _common(p)
    p.add_argument("--in", dest="inp", required=True, help="directory written by gen-experts")
    p.add_argument("--anchors", help='anchor epochs, e.g. "0,6,25,K"')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convexify)

    p = sub.add_parser("distill", help="distill a synthetic set")
    _common(p)
    p.add_argument("--experts", required=True, help="directory of buffers or convex files")
    p.add_argument("--mode", choices=["mtt", "mct"])
    p.add_argument("--ipc", type=int)
    p.add_argument("--M", help="expert epochs to match; a comma list runs a sweep")
    p.add_argument("--N", type=int)
    p.add_argument("--max-start", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--continuous", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--outer-lr-features", type=float)
    p.add_argument("--outer-lr-alpha", type=float)
    p.add_argument("--anchors", help="anchors when convexifying buffers on the fly")
    p.add_argument("--repeats", type=int)
    p.add_argument("--train-iters", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a synthetic set or a random real subset")
    _common(p)
    p.add_argument("--synthetic")
    p.add_argument("--random-ipc", type=int)
    p.add_argument("--lr", type=float, help="training rate for --random-ipc (default: expert lr)")
    p.add_argument("--repeats", type=int)
    p.add_argument("--train-iters", type=int)
    p.add_argument("--out", help="write the result as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge run summaries into a comparison table")
    p.add_argument("--inputs", nargs="+", required=True, help="distill directories or eval JSON files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pca", help="project MTT and convexified waypoints onto two components")
    _common(p)
    p.add_argument("--buffer", required=True)
    p.add_argument("--anchors")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"mctdistill {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MctError, ValueError, OSError, FloatingPointError) as exc:
        print(f"mctdistill {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
