"""Command-line orchestration: run, synth, metrics, ablate.

Exit codes: 0 success, 1 configuration error, 2 file/IO error,
3 numeric validation error. All outputs are written atomically; runs
are deterministic given their inputs (timing lines in metrics reports
excepted).
"""

from __future__ import annotations

import argparse
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    EngineError,
    ShapeError,
    TensorFormatError,
    ValidationError,
)
from .feedback import (
    ADAPT_STRATEGIES,
    PRUNING_MODES,
    SIMILARITY_METRICS,
    fsa_pipeline,
)
from .head import ATTENTION_MODES, AttentionConfig, HeadWeights
from .io_formats import (
    MetricsReport,
    RunConfig,
    _atomic_write_text,
    metrics_to_text,
    read_config,
    read_tensor,
    read_weights_bundle,
    write_metrics,
    write_tensor,
)
from .metrics import miou, retention_through_ops, retention_topk
from .synth import SynthSpec, generate_fixture, write_fixture
from .validation import as_index_vector

RETENTION_KS = (1, 5, 10)


@contextmanager
def _stage(name: str):
    """Prefix engine errors with the pipeline stage that raised them."""
    try:
        yield
    except EngineError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    fb_fields = ("lam", "p", "similarity_metric", "pruning_mode", "ratio",
                 "threshold", "scaling", "strategy", "iterations")
    fb_overrides = {f: getattr(args, f) for f in fb_fields
                    if getattr(args, f, None) is not None}
    top_overrides = {}
    for f in ("attention_mode", "use_residual", "use_ffn"):
        if getattr(args, f, None) is not None:
            top_overrides[f] = getattr(args, f)
    if getattr(args, "output_dir", None) is not None:
        top_overrides["output_dir"] = Path(args.output_dir)
    if fb_overrides:
        top_overrides["feedback"] = replace(config.feedback, **fb_overrides)
    return replace(config, **top_overrides) if top_overrides else config


def _load_inputs(config: RunConfig):
    with _stage("loading tensors"):
        tokens = read_tensor(config.tokens)
        if tokens.ndim != 2:
            raise ValidationError(f"tokens must be 2-D, file holds ndim={tokens.ndim}")
        text = read_tensor(config.text)
        if text.ndim != 2:
            raise ValidationError(f"text embeddings must be 2-D, file holds ndim={text.ndim}")
        weights = read_weights_bundle(config.weights, config.use_residual, config.use_ffn)
        external = None
        if config.attention_mode == "external":
            if config.external_attention is None:
                raise ConfigError("attention_mode=external requires external_attention")
            external = read_tensor(config.external_attention)
        labels = None
        if config.labels is not None:
            labels = as_index_vector(read_tensor(config.labels), "labels")
    with _stage("validating attention config"):
        attn_config = AttentionConfig(mode=config.attention_mode,
                                      external_attention=external)
    return tokens, weights, text, attn_config, labels


def _compute_metrics(result, labels, num_classes: int) -> MetricsReport:
    n = result.seg_init.shape[0]
    report = MetricsReport(timings_ms=dict(result.diagnostics.timings_ms))
    with _stage("retention metrics"):
        for k in RETENTION_KS:
            if 1 <= k <= n - 1:
                report.retention_init[k] = retention_topk(
                    result.attn_init, result.seg_init, k).retention
                report.retention_adapted[k] = retention_topk(
                    result.attn_adapted, result.seg_adapted, k).retention
        if result.trace_init is not None and n >= 2:
            report.stage_retention_init = retention_through_ops(
                result.attn_init, result.trace_init)
            report.stage_retention_adapted = retention_through_ops(
                result.attn_adapted, result.trace_adapted)
    if labels is not None:
        with _stage("miou"):
            report.miou_init = miou(result.seg_init, labels, num_classes)[1]
            report.miou_adapted = miou(result.seg_adapted, labels, num_classes)[1]
    return report


def cmd_run(args: argparse.Namespace) -> int:
    config = _apply_overrides(read_config(args.config), args)
    tokens, weights, text, attn_config, labels = _load_inputs(config)
    with _stage("pipeline"):
        result = fsa_pipeline(tokens, weights, text, attn_config,
                              config.feedback, capture_traces=True)
    report = _compute_metrics(result, labels, num_classes=text.shape[0])
    out = Path(config.output_dir)
    with _stage("writing outputs"):
        out.mkdir(parents=True, exist_ok=True)
        write_tensor(out / "seg_init.fsat", result.seg_init.astype(np.float64))
        write_tensor(out / "seg_adapted.fsat", result.seg_adapted.astype(np.float64))
        write_tensor(out / "logits_init.fsat", result.logits_init)
        write_tensor(out / "logits_adapted.fsat", result.logits_adapted)
        write_tensor(out / "feedback_attention.fsat", result.feedback)
        write_tensor(out / "adapted_attention.fsat", result.attn_adapted)
        write_metrics(out / "metrics.txt", report)
    print(f"wrote {out}/seg_init.fsat, seg_adapted.fsat, logits_init.fsat, "
          f"logits_adapted.fsat, feedback_attention.fsat, adapted_attention.fsat, "
          f"metrics.txt")
    for k in sorted(report.retention_adapted):
        print(f"retention k={k}: init {report.retention_init[k]:.4f} "
              f"-> adapted {report.retention_adapted[k]:.4f}")
    if report.miou_adapted is not None:
        print(f"miou: init {report.miou_init:.4f} -> adapted {report.miou_adapted:.4f}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        num_patches=args.num_patches,
        visual_dim=args.visual_dim,
        joint_dim=args.joint_dim,
        num_classes=args.num_classes,
        num_clusters=args.num_clusters,
        attention_noise=args.attention_noise,
        logit_separation=args.logit_separation,
        seed=args.seed,
    )
    with _stage("synthesizing fixture"):
        fixture = generate_fixture(spec)
        paths = write_fixture(fixture, args.out)
    print(f"fixture written to {args.out} "
          f"(L={spec.num_patches}, clusters={spec.num_clusters}, seed={spec.seed})")
    print(f"run it with: fsattn run {paths['config']}")
    return 0


def cmd_metrics(args: argparse.Namespace) -> int:
    config = _apply_overrides(read_config(args.config), args)
    tokens, weights, text, attn_config, labels = _load_inputs(config)
    with _stage("pipeline"):
        result = fsa_pipeline(tokens, weights, text, attn_config,
                              config.feedback, capture_traces=True)
    report = _compute_metrics(result, labels, num_classes=text.shape[0])
    out = Path(config.output_dir)
    with _stage("writing outputs"):
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.txt", report)
    sys.stdout.write(metrics_to_text(report))
    return 0


def _parse_sweep(text: str, flag: str) -> list[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{flag}: expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise ConfigError(f"{flag}: sweep list is empty")
    return values


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _apply_overrides(read_config(args.config), args)
    p_values = _parse_sweep(args.p_values, "--p-values")
    lam_values = _parse_sweep(args.lambda_values, "--lambda-values")
    tokens, weights, text, attn_config, labels = _load_inputs(config)
    n = tokens.shape[0]
    k = min(10, n - 1)
    if k < 1:
        raise ValidationError("ablation retention needs at least 2 patches")

    table = ["# p lambda retention_init retention_adapted miou_init miou_adapted mean_keep_fraction"]
    ratio_lines = ["# p lambda per-row-keep-fraction..."]
    for p in p_values:
        for lam in lam_values:
            fb = replace(config.feedback, p=p, lam=lam)
            with _stage(f"pipeline (p={p}, lambda={lam})"):
                result = fsa_pipeline(tokens, weights, text, attn_config, fb)
            ret_init = retention_topk(result.attn_init, result.seg_init, k).retention
            ret_adapted = retention_topk(result.attn_adapted, result.seg_adapted, k).retention
            if labels is not None:
                miou_init = miou(result.seg_init, labels, text.shape[0])[1]
                miou_adapted = miou(result.seg_adapted, labels, text.shape[0])[1]
            else:
                miou_init = miou_adapted = float("nan")
            keep_fractions = result.diagnostics.keep_counts / n
            table.append(
                f"{p!r} {lam!r} {ret_init!r} {ret_adapted!r} "
                f"{miou_init!r} {miou_adapted!r} {float(keep_fractions.mean())!r}"
            )
            ratio_lines.append(
                f"{p!r} {lam!r} " + " ".join(f"{f:.8f}" for f in keep_fractions)
            )

    out = Path(config.output_dir)
    with _stage("writing outputs"):
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(out / "ablation.txt", "\n".join(table) + "\n")
        _atomic_write_text(out / "pruning_ratios.txt", "\n".join(ratio_lines) + "\n")
    print("\n".join(table))
    print(f"wrote {out}/ablation.txt and {out}/pruning_ratios.txt")
    return 0


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--attention-mode", dest="attention_mode",
                        choices=ATTENTION_MODES, help="override attention mode")
    parser.add_argument("--use-residual", dest="use_residual",
                        action=argparse.BooleanOptionalAction,
                        help="override the residual flag")
    parser.add_argument("--use-ffn", dest="use_ffn",
                        action=argparse.BooleanOptionalAction,
                        help="override the feed-forward flag")
    parser.add_argument("--lambda", dest="lam", type=float,
                        help="exponential scaling sharpness (default 2.0)")
    parser.add_argument("--p", dest="p", type=float,
                        help="cumulative-confidence cutoff in (0, 1] (default 0.45)")
    parser.add_argument("--similarity-metric", dest="similarity_metric",
                        choices=SIMILARITY_METRICS,
                        help="patch similarity metric (default kl)")
    parser.add_argument("--pruning-mode", dest="pruning_mode",
                        choices=PRUNING_MODES,
                        help="pruning mode (default confidence)")
    parser.add_argument("--ratio", dest="ratio", type=float,
                        help="keep ratio for fixed_ratio pruning (default 0.25)")
    parser.add_argument("--threshold", dest="threshold", type=float,
                        help="confidence cutoff for fixed_threshold pruning (default 1/L)")
    parser.add_argument("--scaling", dest="scaling",
                        action=argparse.BooleanOptionalAction,
                        help="exponential scaling of kept similarities (default on)")
    parser.add_argument("--strategy", dest="strategy", choices=ADAPT_STRATEGIES,
                        help="adaptation strategy (default ensemble)")
    parser.add_argument("--iterations", dest="iterations", type=int,
                        help="number of feedback passes (default 1)")
    parser.add_argument("--output-dir", dest="output_dir",
                        help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsattn",
        description="Feedback-driven self-adaptive attention engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the pipeline described by a config file")
    run.add_argument("config", help="path to a key=value run config")
    _add_override_flags(run)
    run.set_defaults(func=cmd_run)

    synth = sub.add_parser("synth", help="generate a planted-cluster fixture")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--num-patches", type=int, default=64)
    synth.add_argument("--visual-dim", type=int, default=32)
    synth.add_argument("--joint-dim", type=int, default=16)
    synth.add_argument("--num-classes", type=int, default=8)
    synth.add_argument("--num-clusters", type=int, default=4)
    synth.add_argument("--attention-noise", type=float, default=0.4)
    synth.add_argument("--logit-separation", type=float, default=8.0)
    synth.add_argument("--seed", type=int, default=0)
    synth.set_defaults(func=cmd_synth)

    metrics = sub.add_parser("metrics", help="compute metrics without writing maps")
    metrics.add_argument("config", help="path to a key=value run config")
    _add_override_flags(metrics)
    metrics.set_defaults(func=cmd_metrics)

    ablate = sub.add_parser("ablate", help="sweep p and lambda, one table row per point")
    ablate.add_argument("config", help="path to a key=value run config")
    ablate.add_argument("--p-values", default="0.45",
                        help="comma-separated p sweep (default 0.45)")
    ablate.add_argument("--lambda-values", default="2.0",
                        help="comma-separated lambda sweep (default 2.0)")
    _add_override_flags(ablate)
    ablate.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (TensorFormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ShapeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 3
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
