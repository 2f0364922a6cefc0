"""Batch command-line front door.

Subcommands: train, encode, verify, eval, entropy-lab, report. Every run
resolves its configuration (defaults <- config file <- key=value overrides),
rejects unknown keys, and writes the resolved snapshot next to its outputs
so any run can be reproduced from its output directory alone.

Exit codes: 0 success, 1 validation/configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

OUTPUT_ROOT_ENV = "CONDVC_OUTPUT_ROOT"


class CliError(ValueError):
    """Validation problem: bad flags, bad config, bad inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage -> 1
        raise CliError(message)


def _parse_kv_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise CliError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(defaults: dict, config_path: str | None, overrides: list[str]) -> dict:
    """Layer config file and overrides onto defaults; unknown keys rejected."""
    resolved = dict(defaults)
    layers = []
    if config_path:
        layers.append(_parse_kv_file(Path(config_path)))
    layers.append(_parse_overrides(overrides))
    for layer in layers:
        for key, raw in layer.items():
            if key not in resolved:
                raise CliError(
                    f"unknown config key {key!r}; known keys: {', '.join(sorted(resolved))}"
                )
            current = resolved[key]
            try:
                if isinstance(current, bool):
                    resolved[key] = raw.lower() in ("1", "true", "yes")
                elif isinstance(current, int):
                    resolved[key] = int(raw)
                elif isinstance(current, float):
                    resolved[key] = float(raw)
                else:
                    resolved[key] = raw
            except ValueError as exc:
                raise CliError(f"config key {key!r}: cannot parse {raw!r}: {exc}") from exc
    return resolved


def _out_dir(arg: str | None, command: str) -> Path:
    if arg:
        path = Path(arg)
    else:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        path = Path(root) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_snapshot(out: Path, config: dict) -> None:
    lines = [f"{k}={config[k]}" for k in sorted(config)]
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

_TRAIN_DEFAULTS = dict(
    lambda1=2048.0,
    gop_n=5,
    batch_size=4,
    patch_size=64,
    stage0_steps=80,
    stage1_steps=60,
    stage2_steps=60,
    stage1_lr=1e-4,
    stage2_lr=1e-5,
    seed=0,
    variant="conditional",
    flow_scale=4.0,
    corpus_seed=-1,  # -1: derive from seed
    fine_tune_steps=60,  # used with --init-from
)


def cmd_train(args) -> int:
    import torch

    from . import training as tr

    out = _out_dir(args.out, "train")
    config = resolve_config(_TRAIN_DEFAULTS, args.config, args.set)
    config["lambda1"] = float(args.lambda1) if args.lambda1 is not None else config["lambda1"]
    if args.seed is not None:
        config["seed"] = args.seed
    corpus_seed = config["corpus_seed"] if config["corpus_seed"] >= 0 else config["seed"]
    _write_snapshot(out, {**config, "corpus_seed": corpus_seed, "init_from": args.init_from or ""})

    cfg = tr.TrainConfig(
        lambda1=config["lambda1"],
        gop_n=config["gop_n"],
        batch_size=config["batch_size"],
        patch_size=config["patch_size"],
        stage0_steps=0 if args.init_from else config["stage0_steps"],
        stage1_steps=config["stage1_steps"],
        stage2_steps=config["stage2_steps"],
        stage1_lr=config["stage1_lr"],
        stage2_lr=config["stage2_lr"],
        seed=config["seed"],
        variant=config["variant"],
        flow_scale=config["flow_scale"],
    )
    corpus = tr.SyntheticCorpus(
        tr.CorpusConfig(patch_size=cfg.patch_size, clip_length=cfg.gop_n, seed=corpus_seed)
    )
    model = None
    if args.init_from:
        base = tr.load_checkpoint(args.init_from)
        model = tr.codec_from_checkpoint(base)
        torch.manual_seed(cfg.seed)
    result = tr.train_two_stage(cfg, corpus=corpus, model=model)
    tr.save_checkpoint(result.checkpoint, out / "checkpoint.pt")
    tr.write_telemetry_csv(result.telemetry, out / "telemetry.csv")
    final = result.telemetry[-1] if result.telemetry else None
    print(f"trained {cfg.variant} codec at lambda1={cfg.lambda1:g}; checkpoint -> {out/'checkpoint.pt'}")
    if final:
        print(f"final step {final.step}: loss={final.loss:.4f} bpp={final.bpp:.4f} psnr={final.psnr:.2f}")
    return 0


_ENCODE_DEFAULTS = dict(gop=32, frames=96, seed=0, synth_size=64)


def cmd_encode(args) -> int:
    from . import eval_harness as ev
    from . import mode_codec as mc
    from . import training as tr
    from . import video_core as vc

    out = _out_dir(args.out, "encode")
    config = resolve_config(_ENCODE_DEFAULTS, args.config, args.set)
    if args.gop is not None:
        config["gop"] = args.gop
    if args.frames is not None:
        config["frames"] = args.frames

    ckpt = tr.load_checkpoint(args.checkpoint)
    codec = tr.codec_from_checkpoint(ckpt).eval()

    if args.input:
        if not args.descriptor:
            raise CliError("--input requires --descriptor")
        desc = vc.parse_descriptor(args.descriptor)
        source = vc.load_sequence(args.input, desc)
    elif args.synthetic:
        source = vc.synth_sequence(
            vc.SynthSpec(
                args.synthetic,
                n_frames=config["frames"],
                height=config["synth_size"],
                width=config["synth_size"],
                seed=config["seed"],
            )
        )
    else:
        raise CliError("provide --input/--descriptor or --synthetic <generator>")

    _write_snapshot(out, {**config, "checkpoint": str(args.checkpoint), "source": source.provenance})

    result = mc.encode_gop(
        codec, source, vc.GopConfig(config["gop"], config["frames"]), collect_latents=True
    )
    mc.save_encoding(
        out, result, gop_size=config["gop"],
        lambda_id=str(ckpt.config.get("lambda1", "")), flow_scale=codec.flow_scale,
    )
    records = [
        ev.frame_record(
            source.provenance, float(ckpt.config.get("lambda1", 0)), t, role, report,
            ev.psnr_rgb(source.frames[t], recon), ev.msssim_rgb(source.frames[t], recon),
        )
        for t, (role, report, recon) in enumerate(
            zip(result.roles, result.reports, result.reconstructions)
        )
    ]
    ev.write_frame_records(records, out / "report.jsonl")
    total = result.total_report
    iframes = sum(1 for r in result.roles if r == vc.FrameRole.I)
    print(
        f"encoded {len(result.roles)} frames ({iframes} intra) at gop={config['gop']}: "
        f"{total.bpp:.4f} bpp -> {out}"
    )
    return 0


def cmd_verify(args) -> int:
    from . import mode_codec as mc
    from . import training as tr

    ckpt = tr.load_checkpoint(args.checkpoint)
    codec = tr.codec_from_checkpoint(ckpt).eval()
    summary = mc.verify_encoding(codec, args.encoded)
    print(f"verified {summary['frames']} frames: decoder output bit-exact, no mode-map bits")
    return 0


_EVAL_DEFAULTS = dict(gop=32, frames=96, seed=100, sequences=3, synth_size=64, dataset="synthetic")


def cmd_eval(args) -> int:
    from . import eval_harness as ev
    from . import training as tr
    from . import video_core as vc

    out = _out_dir(args.out, "eval")
    config = resolve_config(_EVAL_DEFAULTS, args.config, args.set)
    if args.gop is not None:
        config["gop"] = args.gop
    if args.frames is not None:
        config["frames"] = args.frames

    ladder_dir = Path(args.ladder)
    codecs = {}
    for lam in (256.0, 512.0, 1024.0, 2048.0):
        path = ladder_dir / f"lambda_{int(lam)}.pt"
        if path.exists():
            codecs[lam] = tr.codec_from_checkpoint(tr.load_checkpoint(path)).eval()
    gens = ("global_pan", "moving_texture", "moving_square")
    sequences = [
        vc.synth_sequence(
            vc.SynthSpec(
                gens[k % len(gens)],
                n_frames=config["frames"],
                height=config["synth_size"],
                width=config["synth_size"],
                seed=config["seed"] + k,
            )
        )
        for k in range(config["sequences"])
    ]
    _write_snapshot(out, {**config, "ladder": str(ladder_dir)})

    cfg = ev.ProtocolConfig(
        gop_size=config["gop"], max_frames=config["frames"], dataset=config["dataset"]
    )
    result = ev.run_protocol(sequences, codecs, cfg, label=args.label, jobs=args.jobs)
    ev.write_frame_records(result.records, out / "frames.jsonl")
    ev.write_protocol_csv(result.rows, out / "rd.csv")
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2))
    for metric in ("psnr", "msssim"):
        ev.plot_curves([result.curve(metric)], out / f"rd_{metric}.png", title=config["dataset"])
    print(f"evaluated {len(sequences)} sequences at {len(codecs)} rate points -> {out}")
    for lam, point in result.summary["points"].items():
        print(f"  lambda1={lam}: bpp={point['bpp']:.4f} psnr={point['psnr']:.2f} msssim={point['msssim']:.4f}")
    return 0


def cmd_entropy_lab(args) -> int:
    import csv

    from . import entropy_lab as el

    out = _out_dir(args.out, "entropy-lab")
    _write_snapshot(
        out,
        {
            "trials": args.trials,
            "chain_trials": args.chain_trials,
            "max_alphabet": args.max_alphabet,
            "seed": args.seed,
        },
    )
    report = el.run_inequality_trials(args.trials, args.max_alphabet, args.seed)
    chain = el.run_chain_trials(args.chain_trials, seed=args.seed)

    with open(out / "margins.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["trial", "n_x", "n_y", "conditional_bits", "residual_bits",
             "residual_margin", "predictor_margin", "mutual_information", "mi_symmetry_gap"]
        )
        for r in report.records:
            writer.writerow(
                [r.trial, r.n_x, r.n_y, f"{r.conditional_bits:.9f}", f"{r.residual_bits:.9f}",
                 f"{r.residual_margin:.3e}", f"{r.predictor_margin:.3e}",
                 f"{r.mutual_information:.9f}", f"{r.mi_symmetry_gap:.3e}"]
            )
    violations = report.violations + chain.violations
    summary = [
        f"joint trials: {args.trials} (alphabets up to {args.max_alphabet}x{args.max_alphabet})",
        f"exhaustive predictor-chain trials: {args.chain_trials}",
        f"violations: {violations}",
    ]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    if violations:
        print("inequality violations found", file=sys.stderr)
        return 2
    return 0


def cmd_report(args) -> int:
    from . import eval_harness as ev

    out = _out_dir(args.out, "report")
    if len(args.summary) < 2:
        raise CliError("report needs at least two --summary files (anchor first)")
    summaries = [json.loads(Path(p).read_text()) for p in args.summary]
    _write_snapshot(out, {"summaries": ";".join(map(str, args.summary))})

    def curves_of(summary):
        out_curves = {}
        for metric in ("psnr", "msssim"):
            points = [
                ev.RDPoint(v["bpp"], v[metric], metric) for v in summary["points"].values()
            ]
            out_curves[metric] = ev.RDCurve(summary["label"], metric, tuple(points))
        return out_curves

    anchor = curves_of(summaries[0])
    table = {}
    for summary in summaries[1:]:
        test = curves_of(summary)
        table[summary["label"]] = ev.bd_rate_table(anchor, test)
        for metric in ("psnr", "msssim"):
            ev.plot_curves(
                [anchor[metric], test[metric]],
                out / f"rd_{metric}_{summary['label']}.png",
                title=f"{summaries[0]['dataset']}",
            )
    result = {
        "anchor": summaries[0]["label"],
        "bd_rate_percent": table,
        "bd_interpolation": ev.BD_INTERPOLATION,
    }
    (out / "bd_rate.json").write_text(json.dumps(result, indent=2))
    for label, metrics in table.items():
        for metric, value in metrics.items():
            print(f"BD-Rate[{metric}] {label} vs {summaries[0]['label']}: {value:+.2f}%")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="condvc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                       help="override a config key")
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>)")

    p = sub.add_parser("train", help="train a codec on the synthetic corpus")
    common(p)
    p.add_argument("--lambda1", type=float, help="rate-distortion tradeoff")
    p.add_argument("--seed", type=int)
    p.add_argument("--init-from", help="checkpoint to initialize from (rate-ladder workflow)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a sequence and emit manifest + latents + report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", help="raw video file")
    p.add_argument("--descriptor", help="sequence descriptor for --input")
    p.add_argument("--synthetic", choices=("moving_square", "moving_texture", "global_pan"),
                   help="encode a generated sequence instead of a file")
    p.add_argument("--gop", type=int)
    p.add_argument("--frames", type=int)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("verify", help="decode from latents and check bit-exactness")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--encoded", required=True, help="directory written by encode")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="run the RD protocol over a rate ladder")
    common(p)
    p.add_argument("--ladder", required=True, help="directory with lambda_<value>.pt checkpoints")
    p.add_argument("--label", default="condvc")
    p.add_argument("--gop", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--jobs", type=int, default=1, help="max concurrent sequence encodes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("entropy-lab", help="verify the coding inequalities on random sources")
    common(p)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--chain-trials", type=int, default=30)
    p.add_argument("--max-alphabet", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_entropy_lab)

    p = sub.add_parser("report", help="BD-Rate table between protocol summaries")
    common(p)
    p.add_argument("--summary", action="append", default=[],
                   help="protocol summary.json (anchor first; repeat)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
