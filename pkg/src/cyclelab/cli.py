"""Command-line entry point: dataset generation, training, evaluation,
probing, and plot emission as reproducible runs.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every subcommand
records its fully resolved configuration before doing work.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks, metrics, plots, scenes, training
from .checkpoint import CorruptCheckpointError

log = logging.getLogger("cyclelab")


def _parse_sigma_grid(text: str) -> list[float]:
    try:
        a, b, count = text.split(":")
        grid = np.linspace(float(a), float(b), int(count))
    except ValueError as e:
        raise argparse.ArgumentTypeError(
            f"sigma grid must be 'a:b:count', got {text!r}") from e
    return [float(s) for s in grid]


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",")]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad float list {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclelab",
        description="Reproduce, measure, and defend against the "
                    "self-adversarial attack in cycle-consistent translation. "
                    "CYCLELAB_THREADS caps evaluation parallelism.")
    parser.add_argument("--quiet", action="store_true",
                        help="only warnings and errors on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["many-to-one", "one-to-one"],
                   default="many-to-one")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser(
        "train", help="train a translator pair",
        description="Unset weights take defense-appropriate defaults: "
                    "none: lambda_a=10, lambda_b=10; "
                    "noise: sigma=0.06, lambda_a=5, lambda_b=3; "
                    "guess: lambda_guess=1, lambda_a=1, lambda_b=2.")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--defense", choices=list(training.DEFENSE_MODES),
                   default="none")
    p.add_argument("--preset", choices=sorted(training.PRESETS),
                   help="install one configuration row verbatim")
    p.add_argument("--sigma", type=float)
    p.add_argument("--lambda-a", type=float)
    p.add_argument("--lambda-b", type=float)
    p.add_argument("--lambda-guess", type=float)
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--decay-start", type=int)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--pool-size", type=int, default=50)
    p.add_argument("--gen-filters", type=int, default=16)
    p.add_argument("--gen-blocks", type=int, default=2)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--identity", action="store_true",
                   help="add the identity loss at weight 0.5*lambda")
    p.add_argument("--resume", help="run-state checkpoint to continue from")

    p = sub.add_parser("eval", help="compute metrics for a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default="rh,sn,segm,quality",
                   help="comma list from rh,sn,segm,quality")
    p.add_argument("--sigma-grid", type=_parse_sigma_grid, default="0:0.2:21")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--norm", choices=["l1", "l2"], default="l1")
    p.add_argument("--sn-repeats", type=int, default=1)
    p.add_argument("--oracle-ckpt", help="cache path for the oracle segmenter")
    p.add_argument("--oracle-iters", type=int, default=3000)
    p.add_argument("--out", help="output directory (default: the run dir)")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("probe", help="noise probes or targeted attacks")
    p.add_argument("kind", choices=["noise", "attack"])
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sigma", type=float, default=0.08)
    p.add_argument("--epsilon", type=_parse_float_list, default="0.08",
                   help="epsilon value(s), comma separated")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (default: <run>/probes)")

    p = sub.add_parser("plot", help="emit a self-contained SVG plot")
    p.add_argument("--in", dest="inputs", action="append", required=True,
                   help="input CSV; repeat to overlay runs")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["sn", "rh", "log"], required=True)
    return parser


def _cmd_gen_data(args) -> int:
    manifest = scenes.generate_dataset(args.mode, args.n_train, args.n_test,
                                       args.size, args.seed, args.out,
                                       overwrite=args.overwrite)
    n_files = sum(len(v) for v in manifest.files.values())
    log.info("wrote %d images under %s", n_files, args.out)
    return 0


def _cmd_train(args) -> int:
    overrides = {}
    if args.preset:
        overrides.update(training.PRESETS[args.preset])
    for flag, field in (("sigma", "sigma"), ("lambda_a", "lambda_a"),
                        ("lambda_b", "lambda_b"),
                        ("lambda_guess", "lambda_guess")):
        value = getattr(args, flag)
        if value is not None:
            overrides[field] = value
    defense = overrides.pop("defense", args.defense)
    if defense == "none" and overrides.get("sigma") not in (None,):
        print("warning: sigma is ignored with defense=none", file=sys.stderr)
    cfg = training.TrainConfig(
        defense=defense, total_iters=args.iters, seed=args.seed, lr=args.lr,
        decay_start_iter=args.decay_start, image_size=args.image_size,
        batch_size=args.batch_size, pool_size=args.pool_size,
        gen_filters=args.gen_filters, gen_blocks=args.gen_blocks,
        checkpoint_every=args.checkpoint_every, identity=args.identity,
        **overrides)
    out = training.train(cfg, args.data, args.out, resume_from=args.resume)
    log.info("run complete: %s", out)
    return 0


def _cmd_eval(args) -> int:
    names = tuple(m for m in args.metrics.split(",") if m)
    report = metrics.evaluate_run(
        args.run, args.data, metric_names=names, n=args.n,
        sigma_grid=args.sigma_grid, seed=args.seed, norm=args.norm,
        sn_repeats=args.sn_repeats, oracle_cache=args.oracle_ckpt,
        oracle_iters=args.oracle_iters, out_dir=args.out,
        emit_figures=not args.no_figures)
    log.info("metrics written: %s", ", ".join(sorted(report)))
    return 0


def _cmd_probe(args) -> int:
    out = Path(args.out) if args.out else Path(args.run) / "probes"
    out.mkdir(parents=True, exist_ok=True)
    config = {"kind": args.kind, "run": args.run, "data": args.data,
              "sigma": args.sigma, "epsilon": args.epsilon,
              "steps": args.steps, "step_size": args.step_size,
              "n": args.n, "seed": args.seed}
    (out / "probe_config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n", "utf-8")

    from .figures import save_image_row

    if args.kind == "noise":
        g_ab, g_ba, _ = metrics.load_translators(args.run)
        manifest = scenes.load_manifest(args.data, check_files=False)
        test_a = scenes.load_split(args.data, "testA", manifest)
        if args.n > len(test_a):
            raise ValueError(f"requested {args.n} samples but the test set "
                             f"has {len(test_a)}")
        rows = []
        for i in range(args.n):
            res = attacks.noise_probe(g_ba, g_ab, test_a[i], args.sigma,
                                      seed=args.seed + i)
            save_image_row(out / f"noise_{i:03d}.png",
                           [test_a[i], res.translation, res.recon_clean,
                            res.recon_noisy],
                           ["input", "translation", "reconstruction",
                            "noisy reconstruction"])
            rows.append([i, args.sigma, res.mse])
        lines = ["sample_index,sigma,mse"]
        lines += [f"{i},{s!r},{m!r}" for i, s, m in rows]
        (out / "noise_probe.csv").write_text("\n".join(lines) + "\n", "utf-8")
        log.info("noise probes for %d samples -> %s", args.n, out)
        return 0

    rows = attacks.attack_sweep(args.run, args.data, epsilons=args.epsilon,
                                n_samples=args.n, steps=args.steps,
                                step_size=args.step_size, seed=args.seed,
                                out_csv=out / "attack.csv")
    g_ab, g_ba, _ = metrics.load_translators(args.run)
    manifest = scenes.load_manifest(args.data, check_files=False)
    test_a = scenes.load_split(args.data, "testA", manifest)
    # panel for the first sample at the largest epsilon
    first = max(rows, key=lambda r: r["epsilon"])
    i, j = first["sample_index"], first["target_index"]
    import torch
    with torch.no_grad():
        y_base = metrics._torch_to_np(g_ab(metrics._np_to_torch(test_a[i])))
    res = attacks.targeted_embedding_attack(
        g_ba, y_base, test_a[j], epsilon=first["epsilon"], steps=args.steps,
        step_size=args.step_size)
    with torch.no_grad():
        perturbed = np.clip(y_base + res.delta, 0.0, 1.0)
        restored = metrics._torch_to_np(
            g_ba(metrics._np_to_torch(perturbed.astype(np.float32))))
    save_image_row(out / "attack_panel.png",
                   [y_base, perturbed, restored, test_a[j]],
                   ["translation", "perturbed", "restored", "target"])
    log.info("attack sweep (%d rows) -> %s", len(rows), out / "attack.csv")
    return 0


def _cmd_plot(args) -> int:
    out = plots.emit_plot(args.kind, args.inputs, args.out)
    log.info("plot written: %s", out)
    return 0


COMMANDS = {"gen-data": _cmd_gen_data, "train": _cmd_train, "eval": _cmd_eval,
            "probe": _cmd_probe, "plot": _cmd_plot}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError, CorruptCheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
