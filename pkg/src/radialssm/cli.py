"""Command-line entry point.

Subcommands: synth, gradcheck, train, eval, ablate, bench.  Every run
writes a ``run.log`` (resolved arguments plus versions, no timestamps) into
its output directory.  Exit codes: 0 success, 1 validation error,
2 verification failure.

``RADIAL_SSM_THREADS`` caps internal parallelism; it is applied to the BLAS
thread pools before numpy loads, and the compute paths themselves are
single-threaded.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_VERIFICATION = 2

CONFIG_KEYS = ("channels", "d_state", "groups", "lr", "iterations", "seed", "dataset")


@dataclass
class RunConfig:
    subcommand: str
    config_path: str | None = None
    seed: int = 0
    out_dir: str = ""
    disable_unfold: bool = False
    disable_hb: bool = False
    disable_rse: bool = False
    extra: dict = field(default_factory=dict)


def _apply_thread_cap() -> None:
    cap = os.environ.get("RADIAL_SSM_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def parse_config_file(path) -> dict[str, str]:
    """Plain-text ``key=value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def write_run_log(out_dir: Path, subcommand: str, args: argparse.Namespace) -> None:
    import numpy

    from . import __version__
    lines = [f"subcommand {subcommand}"]
    for key in sorted(vars(args)):
        if key in ("func", "command"):
            continue
        lines.append(f"arg {key} = {getattr(args, key)}")
    lines.append(f"package radialssm {__version__}")
    lines.append(f"numpy {numpy.__version__}")
    lines.append(f"python {sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}")
    (out_dir / "run.log").write_text("\n".join(lines) + "\n")


def _resolve(args: argparse.Namespace, key: str, cast, default):
    value = getattr(args, key, None)
    if value is not None:
        return cast(value)
    if args.config:
        cfg = parse_config_file(args.config)
        if key in cfg:
            return cast(cfg[key])
    return default


def _out_dir(args, subcommand: str) -> Path:
    from . import fileio
    out = args.out if args.out else os.path.join("runs", subcommand)
    return fileio.ensure_dir(out)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from . import synth
    out = _out_dir(args, "synth")
    write_run_log(out, "synth", args)
    config = synth.SynthConfig(
        height=_resolve(args, "height", int, 32),
        width=_resolve(args, "width", int, 32),
        min_sources=_resolve(args, "min_sources", int, 1),
        max_sources=_resolve(args, "max_sources", int, 2),
    )
    seed = _resolve(args, "seed", int, 0)
    manifest = synth.write_dataset(args.n, config, out, base_seed=seed)
    print(f"wrote {args.n} records to {manifest}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import losses, models, numerics, scan
    out = _out_dir(args, "gradcheck")
    write_run_log(out, "gradcheck", args)
    original_vjp = numerics.conv2d_vjp
    if args.self_test_corrupt:
        # sanity hook: scale one analytic gradient so the harness must trip
        def corrupted(up, x, kernel, stride=1, padding=0):
            dx, dk, db = original_vjp(up, x, kernel, stride, padding)
            return dx * 1.5, dk, db

        numerics.conv2d_vjp = corrupted
    try:
        reports = []
        reports += numerics.gradcheck_suite(seed=args.seed or 0)
        reports += losses.gradcheck_suite(seed=args.seed or 0)
        reports += scan.gradcheck_suite(seed=args.seed or 0)
    finally:
        numerics.conv2d_vjp = original_vjp
    lines = [str(r) for r in reports]
    e2e = models.directional_gradient_check()
    e2e_ok = e2e["rel_err"] <= 1e-5
    lines.append(f"[{'PASS' if e2e_ok else 'FAIL'}] end_to_end_directional: "
                 f"rel_err={e2e['rel_err']:.3e} (tol 1e-05)")
    report_text = "\n".join(lines)
    print(report_text)
    (out / "gradcheck.txt").write_text(report_text + "\n")
    ok = all(r.passed for r in reports) and e2e_ok
    return EXIT_OK if ok else EXIT_VERIFICATION


def _write_loss_curve(path: Path, result) -> None:
    lines = ["iteration\ttotal\t" + "\t".join(sorted(result.history[0][1].components))]
    for it, rep in result.history:
        if it % 10 == 0 or it == result.history[-1][0]:
            comps = "\t".join(f"{rep.components[k]:.6f}" for k in sorted(rep.components))
            lines.append(f"{it}\t{rep.total:.6f}\t{comps}")
    path.write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    from . import models, training
    out = _out_dir(args, "train")
    write_run_log(out, "train", args)
    dataset_path = _resolve(args, "dataset", str, None)
    if dataset_path is None:
        print("error: no dataset given (flag --dataset or config key 'dataset')", file=sys.stderr)
        return EXIT_VALIDATION
    dataset = training.ToyDataset(Path(dataset_path) / "manifest.tsv"
                                  if not str(dataset_path).endswith(".tsv") else dataset_path)
    lr = _resolve(args, "lr", float, 1e-2)
    iterations = _resolve(args, "iterations", int, 500 if args.stage == "fpn" else 1000)
    seed = _resolve(args, "seed", int, 0)
    channels = _resolve(args, "channels", int, 8)
    d_state = _resolve(args, "d_state", int, 4)
    groups = _resolve(args, "groups", int, 3)
    resume = training.load_checkpoint(args.resume) if args.resume else None
    end_iteration = args.stop_at if args.stop_at is not None else iterations

    if args.stage == "fpn":
        cfg = models.FpnConfig(base_channels=channels)
        model, opt, rng, result = training.train_fpn(
            dataset, iterations, lr=lr, seed=seed, resume=resume, fpn_config=cfg,
            stop_at=args.stop_at)
        training.save_fpn_checkpoint(out / "checkpoint.ckpt", model, opt, rng, end_iteration)
    else:
        if not args.fpn_checkpoint:
            print("error: --stage main requires --fpn-checkpoint (train the prior network first)",
                  file=sys.stderr)
            return EXIT_VALIDATION
        if not Path(args.fpn_checkpoint).exists():
            print(f"error: prior-network checkpoint not found: {args.fpn_checkpoint}",
                  file=sys.stderr)
            return EXIT_VALIDATION
        fpn_model, _ = training.load_fpn_model(args.fpn_checkpoint)
        cfg = models.MainConfig(groups=groups, channels=channels, d_state=d_state)
        model, opt, rng, result = training.train_main(
            dataset, fpn_model, iterations, lr=lr, seed=seed, resume=resume, main_config=cfg,
            stop_at=args.stop_at)
        training.save_main_checkpoint(out / "checkpoint.ckpt", model, opt, rng, end_iteration)
    _write_loss_curve(out / "loss_curve.tsv", result)
    first, last = result.smoothed_endpoints()
    print(f"trained {args.stage} for {iterations} iterations: "
          f"smoothed loss {first:.4f} -> {last:.4f}")
    return EXIT_OK


EVAL_COLUMNS = ("PSNR", "SSIM", "Light-PSNR", "Clean-PSNR", "G-PSNR", "S-PSNR")
_ROW_KEYS = ("psnr", "ssim", "light_psnr", "clean_psnr", "g_psnr", "s_psnr")


def _metric_rows_to_tsv(rows) -> str:
    lines = ["sample\t" + "\t".join(EVAL_COLUMNS)]
    for row in rows:
        lines.append(str(row["sample"]) + "\t"
                     + "\t".join(f"{row[k]:.4f}" for k in _ROW_KEYS))
    return "\n".join(lines) + "\n"


def _load_models(args):
    from . import training
    fpn_model = main_model = None
    if args.fpn_checkpoint:
        fpn_model, _ = training.load_fpn_model(args.fpn_checkpoint)
    if getattr(args, "main_checkpoint", None):
        main_model, _ = training.load_main_model(args.main_checkpoint)
    return fpn_model, main_model


def cmd_eval(args) -> int:
    import numpy as np

    from . import fileio, training
    out = _out_dir(args, "eval")
    write_run_log(out, "eval", args)
    dataset = training.ToyDataset(Path(args.dataset) / "manifest.tsv")
    fpn_model, main_model = _load_models(args)
    identity = args.identity or main_model is None
    rows = training.evaluate(main_model, fpn_model, dataset, identity=identity,
                             disable_unfold=args.disable_unfold,
                             disable_hb=args.disable_hb,
                             disable_rse=args.disable_rse)
    (out / "metrics.tsv").write_text(_metric_rows_to_tsv(rows))
    improvements = []
    for row in rows:
        fileio.save_ppm(out / f"restored_{row['sample']:04d}.ppm", row["pred_clean"])
        improvements.append(row["psnr"] - row["psnr_identity"])
    with open(out / "run.log", "a") as f:
        for row, delta in zip(rows, improvements):
            f.write(f"improvement sample {row['sample']}: {delta:+.3f} dB vs identity\n")
    print(f"evaluated {len(rows)} samples; mean PSNR "
          f"{float(np.mean([r['psnr'] for r in rows])):.3f} dB "
          f"(identity baseline {float(np.mean([r['psnr_identity'] for r in rows])):.3f} dB)")
    return EXIT_OK


ABLATION_MODES = (
    ("full", {}),
    ("no_unfold", {"disable_unfold": True}),
    ("no_hb", {"disable_hb": True}),
    ("no_rse", {"disable_rse": True}),
)


def cmd_ablate(args) -> int:
    import numpy as np

    from . import training
    out = _out_dir(args, "ablate")
    write_run_log(out, "ablate", args)
    dataset = training.ToyDataset(Path(args.dataset) / "manifest.tsv")
    fpn_model, main_model = _load_models(args)
    if main_model is None or fpn_model is None:
        print("error: ablate requires --fpn-checkpoint and --main-checkpoint", file=sys.stderr)
        return EXIT_VALIDATION
    lines = ["config\tClean-PSNR\tPSNR\tSSIM\tLight-PSNR"]
    for name, flags in ABLATION_MODES:
        rows = training.evaluate(main_model, fpn_model, dataset, **flags)
        means = {k: float(np.nanmean([r[k] for r in rows]))
                 for k in ("clean_psnr", "psnr", "ssim", "light_psnr")}
        lines.append(f"{name}\t{means['clean_psnr']:.4f}\t{means['psnr']:.4f}"
                     f"\t{means['ssim']:.4f}\t{means['light_psnr']:.4f}")
    table = "\n".join(lines) + "\n"
    (out / "ablation.tsv").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import scan, training
    out = _out_dir(args, "bench")
    write_run_log(out, "bench", args)
    lengths = tuple(int(v) for v in args.lengths.split(","))
    rows = scan.bench_scan(lengths=lengths, chunk=args.chunk, seed=args.seed or 0)
    for row in rows:
        if row["max_rel_dev"] >= 1e-10:
            print(f"error: chunked/sequential deviation {row['max_rel_dev']:.3e} "
                  f"at L={row['length']} exceeds 1e-10", file=sys.stderr)
            return EXIT_VERIFICATION
    training.bench_throughput_warning(rows)
    lines = ["L\tseq_tokens_per_s\tchunked_tokens_per_s\tspeedup\tmax_rel_dev"]
    for row in rows:
        lines.append(f"{row['length']}\t{row['seq_tokens_per_s']:.0f}"
                     f"\t{row['chunked_tokens_per_s']:.0f}"
                     f"\t{row['speedup']:.2f}\t{row['max_rel_dev']:.3e}")
    table = "\n".join(lines) + "\n"
    (out / "bench.tsv").write_text(table)
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radialssm",
        description="Flare-aware radial state-space scanning: synthesis, training, "
                    "verification and benchmarks at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--min-sources", dest="min_sources", type=int, default=None)
    p.add_argument("--max-sources", dest="max_sources", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="verify every analytic gradient")
    common(p)
    p.add_argument("--self-test-corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="two-stage toy training")
    common(p)
    p.add_argument("--stage", choices=("fpn", "main"), required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--d-state", dest="d_state", type=int, default=None)
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--fpn-checkpoint", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--stop-at", dest="stop_at", type=int, default=None,
                   help="pause after this iteration (schedule still spans --iterations)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics over a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--fpn-checkpoint", default=None)
    p.add_argument("--main-checkpoint", default=None)
    p.add_argument("--identity", action="store_true",
                   help="score the unmodified input instead of a model")
    p.add_argument("--disable-unfold", action="store_true")
    p.add_argument("--disable-hb", action="store_true")
    p.add_argument("--disable-rse", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare full vs prior-starved configurations")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--fpn-checkpoint", required=True)
    p.add_argument("--main-checkpoint", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="sequential vs chunked scan throughput")
    common(p)
    p.add_argument("--lengths", default="1024,4096,16384")
    p.add_argument("--chunk", type=int, default=64)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
