"""Command-line entry points.

Subcommands: gen-data, train, continual, eval, bench, gradcheck. Every
RunConfig field is also a flag (--token-dim, --epsilon, ...) layered over
an optional --config file. Exit codes: 0 success, 2 config error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import resource
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .continual import EpochMetrics, run_protocol, evaluate_round, train_task
from .errors import (
    AdvisorUpdateError,
    CheckpointError,
    CloudParseError,
    ConfigError,
    DataError,
    ForwardError,
    TrainingAbort,
    UndefinedMetricError,
)
from .kernel_attention import AttentionInputs, RandomFeatureMap, kernel_oracle, linear_attention
from .model import (
    ModelConfig,
    TokenBatch,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .rpp import PerturbationConfig, gradient_check
from .synthgen import (
    SHAPES,
    CategorySpec,
    DefectSpec,
    SplitSizes,
    build_task_stream,
    load_task_stream,
    write_stream,
)
from .taskstream import AccessAuditor, AuditedSamples


def build_stream_from_config(cfg: RunConfig):
    """Assemble the synthetic stream described by a RunConfig."""
    total = cfg.tasks * cfg.categories_per_task
    categories = []
    for k in range(total):
        shape = SHAPES[k % len(SHAPES)]
        name = shape if k < len(SHAPES) else f"{shape}{k // len(SHAPES) + 1}"
        categories.append(
            CategorySpec(
                shape=shape,
                points_per_cloud=cfg.points_per_cloud,
                jitter_sigma=cfg.jitter_sigma,
                pose_randomization=cfg.pose_randomization,
                name=name,
            )
        )
    partition = [
        list(range(t * cfg.categories_per_task, (t + 1) * cfg.categories_per_task))
        for t in range(cfg.tasks)
    ]
    sizes = SplitSizes(
        train_per_category=cfg.train_per_category,
        test_normal_per_category=cfg.test_normal_per_category,
        test_anomalous_per_category=cfg.test_anomalous_per_category,
    )
    defects = [
        DefectSpec(kind, cfg.defect_amplitude, cfg.defect_extent)
        for kind in cfg.defect_kind_list()
    ]
    return build_task_stream(categories, partition, sizes, defects, cfg.seed)


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="flat TOML config file")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            sub.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        elif f.type == "int":
            sub.add_argument(flag, type=int, default=None)
        elif f.type == "float":
            sub.add_argument(flag, type=float, default=None)
        else:
            sub.add_argument(flag, type=str, default=None)


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        cfg = RunConfig.from_file(args.config)
    overrides = {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(RunConfig)
        if getattr(args, f.name, None) is not None
    }
    cfg = cfg.with_overrides(overrides)
    if cfg.deterministic:
        cfg = cfg.with_overrides({"threads": 1})
    return cfg


def _stamp(out_dir: Path, cfg: RunConfig) -> None:
    cfg.echo_to(out_dir)
    (out_dir / "VERSION").write_text(f"cloudad {__version__}\n")


def _write_metrics_csv(metrics: list[EpochMetrics], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "epoch", "recon_loss", "rpp_loss", "lr"])
        for m in metrics:
            w.writerow([m.task_id, m.epoch, f"{m.recon_loss:.8g}", f"{m.rpp_loss:.8g}", f"{m.lr:.8g}"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    stream = build_stream_from_config(cfg)
    manifest = write_stream(stream, out)
    _stamp(out, cfg)
    total = sum(len(t.train) for t in stream.tasks) + sum(
        len(t.test) - (len(stream.tasks[i - 1].test) if i else 0)
        for i, t in enumerate(stream.tasks)
    )
    print(f"wrote {total} clouds across {len(stream.tasks)} tasks to {out}")
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    stream = load_task_stream(args.data)
    wanted = [t for t in stream.tasks if t.task_id == args.task]
    if not wanted:
        raise DataError(f"dataset has no task {args.task}")
    task = wanted[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _stamp(out, cfg)

    params = init_params(cfg.model_config(), cfg.seed)
    auditor = AccessAuditor()
    auditor.begin_task(task.task_id)
    metrics: list[EpochMetrics] = []
    train_task(params, AuditedSamples(task.train, auditor), cfg, task.task_id, metrics)
    auditor.end_task()
    save_checkpoint(params, out / f"task_{task.task_id}.ckpt")
    _write_metrics_csv(metrics, out / "loss.csv")
    print(f"trained task {task.task_id} on {len(task.train)} clouds -> {out}")
    return 0


def _protocol_variants(args, cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    variants = [(args.label, cfg)]
    ablate = args.ablate or []
    if "all" in ablate:
        ablate = ["rpp", "kaa", "kal"]
    for name in ablate:
        if name == "rpp":
            variants.append(("no_rpp", cfg.with_overrides({"lambda_rpp": 0.0})))
        elif name == "kaa":
            variants.append(("no_kaa", cfg.with_overrides({"attention": "linear"})))
        elif name == "kal":
            variants.append(("no_kal", cfg.with_overrides({"kal_enabled": False})))
        else:
            raise ConfigError(f"unknown ablation {name!r} (choose rpp, kaa, kal, all)")
    if args.eps_sweep:
        for text in args.eps_sweep.split(","):
            eps = float(text)
            variants.append((f"eps_{text.strip()}", cfg.with_overrides({"epsilon": eps})))
    return variants


def cmd_continual(args) -> int:
    cfg = _resolve_config(args)
    stream = load_task_stream(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _stamp(out, cfg)

    rows = []
    for label, variant_cfg in _protocol_variants(args, cfg):
        run_dir = out / label
        run_dir.mkdir(parents=True, exist_ok=True)
        variant_cfg.echo_to(run_dir)
        metrics: list[EpochMetrics] = []
        params, report = run_protocol(stream, variant_cfg, label=label, metrics=metrics)
        save_checkpoint(params, run_dir / "final.ckpt")
        (run_dir / "report.json").write_text(report.to_json())
        _write_metrics_csv(metrics, run_dir / "loss.csv")
        rows.append((label, report.task_means()))
        print(f"{label}: mean O-AUROC per task = "
              + ", ".join(f"{v:.3f}" for v in report.task_means()))

    task_ids = [t.task_id for t in stream.tasks]
    with open(out / "auroc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + [f"task_{t}" for t in task_ids])
        for label, means in rows:
            w.writerow([label] + [f"{v:.4f}" for v in means])
    print(f"summary: {out / 'auroc.csv'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    params = load_checkpoint(args.checkpoint)
    stream = load_task_stream(args.data)
    task = stream.tasks[-1] if args.task is None else next(
        (t for t in stream.tasks if t.task_id == args.task), None
    )
    if task is None:
        raise DataError(f"dataset has no task {args.task}")
    history: dict[str, list[float]] = {}
    round_ = evaluate_round(params, task.test, cfg, task.task_id, history)
    payload = dataclasses.asdict(round_)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=1, sort_keys=True))
    print(
        f"scored {len(task.test)} clouds (through task {task.task_id}): "
        f"mean O-AUROC {round_.mean_auroc_categories:.3f} -> {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# benchmarks
# ---------------------------------------------------------------------------

def _peak_rss_bytes() -> int:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def _time_call(fn, repeats: int) -> float:
    fn()  # warmup
    best = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best.append(time.perf_counter() - t0)
    return float(np.median(best))


def bench_attention(sizes, d=64, m=64, repeats=5, seed=0):
    """Rows (n, seconds, bytes, variant) for the linear path."""
    rows = []
    fmap = RandomFeatureMap.draw(d, m, seed)
    rng = np.random.default_rng(seed)
    for n in sizes:
        x = rng.standard_normal((n, d)) * 0.3
        inputs = AttentionInputs(Q=x, K=x, V=rng.standard_normal((n, d)))
        t = _time_call(lambda: linear_attention(inputs, fmap), repeats)
        rows.append((n, t, _peak_rss_bytes(), "linear_attention"))
    return rows


def bench_oracle(sizes, d=64, m=64, repeats=3, seed=0):
    """Rows for the quadratic reference; keep sizes modest."""
    rows = []
    fmap = RandomFeatureMap.draw(d, m, seed)
    rng = np.random.default_rng(seed)
    for n in sizes:
        x = rng.standard_normal((n, d)) * 0.3
        inputs = AttentionInputs(Q=x, K=x, V=rng.standard_normal((n, d)))
        t = _time_call(lambda: kernel_oracle(inputs, fmap), repeats)
        rows.append((n, t, _peak_rss_bytes(), "kernel_oracle"))
    return rows


def bench_model_eval(sizes, cfg: RunConfig, repeats=3):
    """Whole-model eval forward at varying group counts."""
    rows = []
    rng = np.random.default_rng(cfg.seed)
    for n in sizes:
        mc = cfg.model_config()
        mc = dataclasses.replace(mc, n_groups=n)
        params = init_params(mc, cfg.seed)
        tokens = TokenBatch(
            tokens=rng.standard_normal((n, mc.d)).astype(mc.np_dtype),
            centers=rng.standard_normal((n, 3)),
        )
        t = _time_call(lambda: forward(tokens, params, mode="eval"), repeats)
        rows.append((n, t, _peak_rss_bytes(), "model_eval"))
    return rows


def linear_fit_r2(ns, ts) -> float:
    ns = np.asarray(ns, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    slope, intercept = np.polyfit(ns, ts, 1)
    pred = slope * ns + intercept
    ss_res = float(((ts - pred) ** 2).sum())
    ss_tot = float(((ts - ts.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    attn_sizes = [int(s) for s in args.attn_sizes.split(",")]
    oracle_sizes = [int(s) for s in args.oracle_sizes.split(",")]
    rows = bench_attention(attn_sizes, repeats=args.repeats, seed=cfg.seed)
    rows += bench_oracle(oracle_sizes, repeats=max(2, args.repeats - 2), seed=cfg.seed)
    if args.model_sizes:
        model_sizes = [int(s) for s in args.model_sizes.split(",")]
        rows += bench_model_eval(model_sizes, cfg, repeats=max(2, args.repeats - 2))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "seconds", "bytes", "variant"])
        for n, t, b, variant in rows:
            w.writerow([n, f"{t:.6g}", b, variant])

    lin = [(n, t) for n, t, _, v in rows if v == "linear_attention"]
    r2 = linear_fit_r2([n for n, _ in lin], [t for _, t in lin])
    print(f"linear_attention: R^2 of linear fit = {r2:.4f}")
    for variant in ("linear_attention", "kernel_oracle"):
        sub = [(n, t) for n, t, _, v in rows if v == variant]
        for (n1, t1), (n2, t2) in zip(sub, sub[1:]):
            if n2 == 2 * n1:
                print(f"{variant}: t({n2})/t({n1}) = {t2 / t1:.2f}")
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args) -> int:
    dtype = "float64" if args.double else "float32"
    rel_tol = 1e-4 if args.double else 2e-2
    mc = ModelConfig(
        d=8, m=8, blocks=1, g=4, n_groups=4, stage1_width=16, dtype=dtype
    )
    pcfg = PerturbationConfig(epsilon=0.05, ascent_steps=1, step_size=0.5,
                              lambda_rpp=1.0, seed=7)
    report = gradient_check(mc, pcfg, seed=3, rel_tol=rel_tol, corrupt=args.corrupt)
    for name, worst in sorted(report.per_array.items()):
        status = "ok" if worst <= rel_tol else "FAIL"
        print(f"{name:24s} worst rel err {worst:.3e}  {status}")
    print(
        f"gradcheck {'PASS' if report.ok else 'FAIL'}: "
        f"worst {report.worst:.3e} (tol {rel_tol:g}, dtype {dtype})"
    )
    return 0 if report.ok else 4


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudad",
        description="Class-incremental 3D point-cloud anomaly detection engine",
    )
    parser.add_argument("--version", action="version", version=f"cloudad {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic task-stream dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="train a single task from a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--task", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("continual", help="run the class-incremental protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", default="full")
    p.add_argument("--ablate", action="append",
                   help="also run with a component off: rpp, kaa, kal, or all")
    p.add_argument("--eps-sweep", default=None,
                   help="comma-separated epsilon values to sweep")
    _add_config_flags(p)
    p.set_defaults(func=cmd_continual)

    p = subs.add_parser("eval", help="score a dataset's cumulative test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("bench", help="attention/model scaling benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--attn-sizes", default="1024,2048,4096,8192")
    p.add_argument("--oracle-sizes", default="256,512,1024,2048")
    p.add_argument("--model-sizes", default="1024,2048,4096,8192")
    p.add_argument("--repeats", type=int, default=5)
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = subs.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--double", action="store_true",
                   help="run in float64 at the 1e-4 relative tolerance")
    p.add_argument("--corrupt", default=None,
                   help="testing aid: corrupt this parameter's gradient")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CloudParseError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (ForwardError, TrainingAbort, AdvisorUpdateError, UndefinedMetricError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
