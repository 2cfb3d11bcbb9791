"""Command-line driver for the full synthetic pipeline.

One binary with five subcommands covering the experiment flow end to end:

    fuseclip gen-data         build a world and write its datasets
    fuseclip pretrain         contrastive alignment stage
    fuseclip train-diffusion  conditional denoiser stage
    fuseclip eval             metrics for a saved checkpoint
    fuseclip ablate           loss-mask comparison table

Every command resolves configuration the same way: built-in defaults,
then an optional JSON file (--config), then repeatable --set overrides,
then the dedicated flags. The effective tree is echoed into the output
directory as config.json, so any run can be reproduced from its
artifacts alone. Reruns with identical settings rewrite identical
bytes; --no-clobber turns the rewrite into a skip.

Exit codes: 0 success, 2 usage or configuration, 3 numeric failure,
4 compatibility (wrong world, wrong checkpoint kind, malformed file).
The FUSECLIP_THREADS environment variable caps BLAS/openmp worker
threads for the whole process.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import (
    apply_overrides,
    config_text,
    diffusion_from_config,
    load_config,
    pretrain_from_config,
    world_from_config,
)
from .dataio import read_dataset, write_dataset
from .encoders import build_encoders
from .errors import (
    CheckpointError,
    CompatibilityError,
    ConfigError,
    DataFormatError,
    NumericsError,
)
from .evaluation import (
    EvalReport,
    ablation_table_text,
    bootstrap_mean_diff_ci,
    cluster_report,
    plane_projection,
    run_ablation,
    zero_shot_report,
)
from .losses import MASK_NAMES
from .training import (
    CHECKPOINT_NAME,
    encoder_from_checkpoint,
    pretrain,
    train_diffusion,
)
from .world import generate_guided_dataset, generate_main_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_COMPAT = 4

KNOWN_METRICS = ("zero-shot", "cluster")


def _resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then file, then --set items, in that order."""
    cfg = load_config(args.config)
    apply_overrides(cfg, list(args.set or []))
    return cfg


def _seed_override(cfg: dict, args: argparse.Namespace, dotted: str) -> None:
    if getattr(args, "seed", None) is not None:
        apply_overrides(cfg, [f"{dotted}={args.seed}"])


def _prepare_out(
    out: str | Path, no_clobber: bool, markers: list[str]
) -> Path | None:
    """Create the output directory; None means an intact run was kept.

    The parent must already exist, so a typo cannot silently create a
    directory tree, and nothing is written before this check passes.
    """
    out = Path(out)
    if not out.parent.exists():
        raise ConfigError(f"parent of output directory {out} does not exist")
    if no_clobber and any((out / m).exists() for m in markers):
        return None
    out.mkdir(exist_ok=True)
    return out


def _echo_config(out: Path, cfg: dict) -> None:
    (out / "config.json").write_text(config_text(cfg), encoding="utf-8")


def _csv_text(header: list[str], rows: list[list]) -> str:
    """Comma-joined table with repr floats, stable across reruns."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(c) if isinstance(c, float) else str(c) for c in row))
    return "\n".join(lines) + "\n"


def _load_datasets(world, cfg: dict, need_guided: bool = True):
    data_dir = Path(cfg["data"]["dir"])
    main = read_dataset(data_dir / "main.ds")
    guided = read_dataset(data_dir / "guided.ds") if need_guided else None
    return main, guided


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _seed_override(cfg, args, "world.seed")
    out_path = args.out if args.out is not None else cfg["data"]["dir"]
    out = _prepare_out(
        out_path, args.no_clobber, ["world.json", "main.ds", "guided.ds"]
    )
    if out is None:
        print(f"{out_path}: datasets present, skipping (--no-clobber)")
        return EXIT_OK

    world = world_from_config(cfg["world"])
    main = generate_main_dataset(world, cfg["data"]["n_main"], cfg["data"]["main_seed"])
    guided = generate_guided_dataset(
        world, cfg["data"]["n_guided"], cfg["data"]["guided_seed"]
    )
    (out / "world.json").write_text(config_text(cfg["world"]), encoding="utf-8")
    write_dataset(out / "main.ds", main)
    write_dataset(out / "guided.ds", guided)
    _echo_config(out, cfg)
    print(f"world seed {world.seed}: {world.n_identities} identities, d_x={world.d_x}")
    print(f"main.ds: {len(main)} samples")
    print(f"guided.ds: {len(guided)} samples")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _seed_override(cfg, args, "pretrain.seed")
    if args.loss_mask is not None:
        image, ident, text = MASK_NAMES[args.loss_mask.upper()]
        apply_overrides(
            cfg,
            [
                f"pretrain.loss.use_image_term={str(image).lower()}",
                f"pretrain.loss.use_id_term={str(ident).lower()}",
                f"pretrain.loss.use_text_term={str(text).lower()}",
            ],
        )
    if args.lam is not None:
        apply_overrides(cfg, [f"pretrain.loss.guided_probability={args.lam}"])

    out = _prepare_out(args.out, args.no_clobber, [CHECKPOINT_NAME])
    if out is None:
        print(f"{args.out}: checkpoint present, skipping (--no-clobber)")
        return EXIT_OK
    world = world_from_config(cfg["world"])
    frozen = build_encoders(world)
    main, guided = _load_datasets(world, cfg)
    pcfg = pretrain_from_config(cfg["pretrain"])

    _echo_config(out, cfg)
    _, records = pretrain(
        world, frozen, main, guided, pcfg, run_dir=out, resume=args.resume
    )
    last = records[-1] if records else {}
    print(f"pretrain done: {pcfg.steps} steps, loss {last.get('loss', float('nan')):.6f}")
    print(f"checkpoint: {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_train_diffusion(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _seed_override(cfg, args, "diffusion.seed")
    if args.lam is not None:
        apply_overrides(cfg, [f"diffusion.guided_probability={args.lam}"])

    out = _prepare_out(args.out, args.no_clobber, [CHECKPOINT_NAME])
    if out is None:
        print(f"{args.out}: checkpoint present, skipping (--no-clobber)")
        return EXIT_OK
    world = world_from_config(cfg["world"])
    frozen = build_encoders(world)
    dcfg = diffusion_from_config(cfg["diffusion"])
    main, guided = _load_datasets(world, cfg, need_guided=dcfg.guided_probability > 0.0)

    _echo_config(out, cfg)
    _, _, records = train_diffusion(
        world, frozen, main, dcfg, run_dir=out, resume=args.resume, guided=guided
    )
    last = records[-1] if records else {}
    print(
        f"diffusion done: {dcfg.steps} steps, loss {last.get('loss', float('nan')):.6f}"
    )
    print(f"checkpoint: {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _seed_override(cfg, args, "eval.seed")
    if args.metrics is not None:
        wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
        apply_overrides(cfg, [f"eval.metrics={json.dumps(wanted)}"])
    metrics = cfg["eval"]["metrics"]
    for m in metrics:
        if m not in KNOWN_METRICS:
            raise ConfigError(f"unknown metric {m!r}; expected one of {KNOWN_METRICS}")
    if not metrics:
        raise ConfigError("no metrics requested")

    out = _prepare_out(args.out, args.no_clobber, ["report.json"])
    if out is None:
        print(f"{args.out}: report present, skipping (--no-clobber)")
        return EXIT_OK
    world = world_from_config(cfg["world"])
    frozen = build_encoders(world)
    encoder = encoder_from_checkpoint(args.checkpoint, world, frozen)

    ev = cfg["eval"]
    all_metrics: dict[str, float] = {}
    per_class: dict[str, float] = {}
    per_identity: dict[str, float] = {}
    projection_rows: list[list] = []
    if "zero-shot" in metrics:
        zs, per_class = zero_shot_report(
            encoder, world, ev["n_eval"], ev["seed"], ev["class_slot"]
        )
        all_metrics.update(zs)
    if "cluster" in metrics:
        cl, per_identity, embeddings, labels = cluster_report(
            encoder, world, ev["n_ids"], ev["n_per_id"], ev["seed"]
        )
        all_metrics.update(cl)
        coords = plane_projection(embeddings)
        projection_rows = [
            [int(lab), float(x), float(y)]
            for lab, (x, y) in zip(labels, coords)
        ]

    report = EvalReport(
        metrics=all_metrics,
        per_class_top1=per_class,
        per_identity_recall=per_identity,
        config=cfg,
        seed=ev["seed"],
    )
    _echo_config(out, cfg)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.csv").write_text(
        _csv_text(
            ["metric", "value"],
            [[k, float(v)] for k, v in sorted(all_metrics.items())],
        ),
        encoding="utf-8",
    )
    if projection_rows:
        (out / "projection.csv").write_text(
            _csv_text(["identity", "x", "y"], projection_rows), encoding="utf-8"
        )
    for name, value in sorted(all_metrics.items()):
        print(f"{name}: {value:.4f}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _seed_override(cfg, args, "eval.seed")
    if args.lam is not None:
        apply_overrides(cfg, [f"pretrain.loss.guided_probability={args.lam}"])
    if args.variants is not None:
        wanted = [v.strip().upper() for v in args.variants.split(",") if v.strip()]
        apply_overrides(cfg, [f"eval.variants={json.dumps(wanted)}"])
    variants = [v.upper() for v in cfg["eval"]["variants"]]
    for v in variants:
        if v not in MASK_NAMES:
            raise ConfigError(f"unknown variant {v!r}; expected one of L1, L2, L3")
    if not variants:
        raise ConfigError("no ablation variants requested")

    out = _prepare_out(args.out, args.no_clobber, ["ablation.json"])
    if out is None:
        print(f"{args.out}: ablation present, skipping (--no-clobber)")
        return EXIT_OK
    world = world_from_config(cfg["world"])
    frozen = build_encoders(world)
    main, guided = _load_datasets(world, cfg)
    pcfg = pretrain_from_config(cfg["pretrain"])
    dcfg = diffusion_from_config(cfg["diffusion"])
    ev = cfg["eval"]

    # One call per variant: a numeric blow-up in one pipeline should not
    # silence the others. The evaluation pool is a pure function of
    # eval.seed, so split calls still compare on identical conditionings.
    table_rows: list[dict] = []
    samples: dict[str, dict] = {"face_sim": {}, "text_align": {}}
    baseline = None
    failed = []
    for v in variants:
        try:
            rows, details = run_ablation(
                world,
                frozen,
                main,
                guided,
                pcfg,
                dcfg,
                n_gen=ev["n_gen"],
                eval_seed=ev["seed"],
                variants=(v,),
                clip_x0=ev["clip_x0"],
            )
        except NumericsError as exc:
            print(f"variant {v} failed: {exc}", file=sys.stderr)
            table_rows.append({"variant": v, "status": "FAILED"})
            failed.append(v)
            continue
        row = rows[0]
        baseline = details["baseline"]
        samples["face_sim"][v] = details["face_sim_samples"][v]
        samples["text_align"][v] = details["text_align_samples"][v]
        table_rows.append(
            {
                "variant": v,
                "face_sim": row.face_sim,
                "text_align": row.text_align,
                "mmd": row.mmd,
                "status": "ok",
            }
        )

    ci = None
    if "L2" in samples["text_align"] and "L3" in samples["text_align"]:
        ci = bootstrap_mean_diff_ci(
            samples["text_align"]["L3"], samples["text_align"]["L2"], seed=ev["seed"]
        )

    verdict = _ablation_verdict(table_rows, baseline, ci, failed)
    text = _ablation_text(table_rows, baseline, verdict)
    payload = {
        "rows": table_rows,
        "baseline": baseline,
        "text_align_ci_l3_minus_l2": list(ci) if ci is not None else None,
        "verdict": verdict,
        "config": cfg,
    }
    _echo_config(out, cfg)
    (out / "ablation.json").write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n",
        encoding="utf-8",
    )
    (out / "ablation.csv").write_text(
        _csv_text(
            ["variant", "face_sim", "text_align", "mmd", "status"],
            [
                [
                    r["variant"],
                    r.get("face_sim", ""),
                    r.get("text_align", ""),
                    r.get("mmd", ""),
                    r["status"],
                ]
                for r in table_rows
            ],
        ),
        encoding="utf-8",
    )
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_NUMERIC if failed else EXIT_OK


def _ablation_verdict(
    table_rows: list[dict],
    baseline: float | None,
    ci: tuple[float, float] | None,
    failed: list[str],
) -> str:
    """PASS iff the three directional loss-mask findings reproduce."""
    if failed:
        return "FAILED"
    by = {r["variant"]: r for r in table_rows}
    if not {"L1", "L2", "L3"} <= set(by):
        return "SKIPPED (needs variants L1, L2, L3)"
    checks = {
        "L1 face_sim near baseline": abs(by["L1"]["face_sim"] - baseline) <= 0.1,
        "L2 face_sim >= L1 + 0.3": by["L2"]["face_sim"] >= by["L1"]["face_sim"] + 0.3,
        "L3 face_sim >= L1 + 0.3": by["L3"]["face_sim"] >= by["L1"]["face_sim"] + 0.3,
        "L3 text_align > L2 (CI)": ci is not None and ci[0] > 0.0,
    }
    if all(checks.values()):
        return "PASS"
    bad = ", ".join(name for name, ok in checks.items() if not ok)
    return f"FAIL ({bad})"


def _ablation_text(
    table_rows: list[dict], baseline: float | None, verdict: str
) -> str:
    header = f"{'variant':<8} {'face_sim':>9} {'text_align':>11} {'mmd':>10}"
    lines = [header, "-" * len(header)]
    for r in table_rows:
        if r["status"] == "FAILED":
            lines.append(f"{r['variant']:<8} {'FAILED':>9}")
        else:
            lines.append(
                f"{r['variant']:<8} {r['face_sim']:>9.4f} "
                f"{r['text_align']:>11.4f} {r['mmd']:>10.6f}"
            )
    if baseline is not None:
        lines.append(f"random-pair face_sim baseline: {baseline:.4f}")
    lines.append(f"verdict: {verdict}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fuseclip",
        description="Synthetic joint-encoder and diffusion pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, seed_help: str) -> None:
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help=seed_help)
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY.PATH=VALUE",
            help="override any config leaf; repeatable",
        )
        p.add_argument(
            "--no-clobber",
            action="store_true",
            help="skip instead of rewriting existing artifacts",
        )

    p = sub.add_parser("gen-data", help="build a world and write its datasets")
    common(p, "overrides world.seed")
    p.add_argument("--out", type=Path, default=None, help="defaults to data.dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="contrastive alignment stage")
    common(p, "overrides pretrain.seed")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--resume", action="store_true", help="continue from checkpoint")
    p.add_argument(
        "--loss-mask",
        choices=sorted(MASK_NAMES),
        default=None,
        help="select the contrastive term mask",
    )
    p.add_argument(
        "--lambda",
        dest="lam",
        type=float,
        default=None,
        help="guided-data probability",
    )
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-diffusion", help="conditional denoiser stage")
    common(p, "overrides diffusion.seed")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--resume", action="store_true", help="continue from checkpoint")
    p.add_argument(
        "--lambda",
        dest="lam",
        type=float,
        default=None,
        help="guided-mixing probability for diffusion batches",
    )
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("eval", help="metrics for a saved checkpoint")
    common(p, "overrides eval.seed")
    p.add_argument("checkpoint", type=Path, help="checkpoint.bin from either stage")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.add_argument(
        "--metrics",
        default=None,
        help="comma-separated subset of: " + ", ".join(KNOWN_METRICS),
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="loss-mask comparison table")
    common(p, "overrides eval.seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument(
        "--variants", default=None, help="comma-separated subset of L1,L2,L3"
    )
    p.add_argument(
        "--lambda",
        dest="lam",
        type=float,
        default=None,
        help="guided-data probability for the shared pre-training config",
    )
    p.set_defaults(func=cmd_ablate)
    return parser


def _thread_cap() -> int | None:
    raw = os.environ.get("FUSECLIP_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FUSECLIP_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"FUSECLIP_THREADS must be >= 1, got {n}")
    return n


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed the message; normalize --help to 0 and
        # usage errors to the config exit code.
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        cap = _thread_cap()
        if cap is None:
            return args.func(args)
        with threadpool_limits(limits=cap):
            return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CompatibilityError, CheckpointError, DataFormatError) as exc:
        print(f"incompatible input: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
