"""Command-line front end.

Subcommands: ``run`` (forward pass with report), ``traffic`` (measured vs
analytic schedule statistics), ``approx gelu`` / ``approx softmax`` (error
reports), ``moe-report`` (load accounting for both execution orders),
``breakdown`` (latency shares of a saved report), ``gen-weights``
(seed-reproducible random weight files), and ``presets``.

Machine-readable output is JSON with sorted keys; summaries are aligned
text.  Every subcommand is deterministic given its flags and seed; the
``EMOE_SEED`` environment variable overrides the default seed 0.  Exit
codes: 0 success, 1 runtime failure, 2 usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .approx import gelu_error_report, softmax_error_report
from .attention import Phase, make_schedule, measure_traffic
from .context import RunContext
from .costmodel import analytic_attention_stats, breakdown
from .fixedpoint import FormatCatalog, FxTensor
from .model import PRESETS, ModelConfig, RunReport, forward, generate_weights
from .moe import build_queues, gate_scores, moe_forward, moe_forward_oracle
from .weights_io import load_weights, save_weights


def _default_seed() -> int:
    return int(os.environ.get("EMOE_SEED", "0"))


def _emit(data: dict) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def _parse_step(text: str) -> float:
    if "^" in text:
        base, exp = text.split("^", 1)
        return float(base) ** int(exp)
    return float(text)


def load_image(source: str, cfg: ModelConfig) -> np.ndarray:
    """``synthetic:<seed>`` for deterministic noise in [0, 1), or a raw
    row-major u8 grayscale file of exactly image_h x image_w bytes."""
    if source.startswith("synthetic:"):
        seed = int(source.split(":", 1)[1])
        rng = np.random.default_rng(seed)
        return rng.uniform(0.0, 1.0, (cfg.image_h, cfg.image_w))
    expected = cfg.image_h * cfg.image_w
    with open(source, "rb") as f:
        data = f.read()
    if len(data) != expected:
        raise ValueError(
            f"image file {source!r} has {len(data)} bytes, expected "
            f"{expected} ({cfg.image_h}x{cfg.image_w} u8)"
        )
    pixels = np.frombuffer(data, dtype=np.uint8).astype(np.float64)
    return (pixels / 256.0).reshape(cfg.image_h, cfg.image_w)


def _config_from_args(args) -> ModelConfig:
    if getattr(args, "config", None):
        with open(args.config) as f:
            fields = json.load(f)
        return ModelConfig(**fields)
    return PRESETS[args.preset]


def cmd_run(args) -> int:
    if args.weights:
        weights = load_weights(args.weights)
    else:
        weights = generate_weights(PRESETS[args.preset], seed=args.seed)
    image = load_image(args.image, weights.config)
    features, report = forward(weights, image, args.task, args.parallelism)
    doc = report.to_dict()
    doc["feature_shape"] = list(features.shape)
    if args.report:
        with open(args.report, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
    totals = report.totals()
    print(f"features        [{features.shape[0]} x {features.shape[1]}]")
    print(f"task            {args.task}")
    print(f"parallelism     {args.parallelism}")
    print(f"latency proxy   {report.latency_proxy}")
    print(f"blocks loaded   {totals['blocks_loaded']}")
    print(f"expert loads    {totals['expert_loads']}")
    print(f"overflow events {totals['overflow_events']}")
    if args.report:
        print(f"report written  {args.report}")
    return 0


def cmd_traffic(args) -> int:
    phase = Phase.MV if args.phase == "mv" else Phase.QK
    reordered = not args.naive
    measured = measure_traffic(
        make_schedule(args.n, args.p, reordered=reordered, phase=phase)
    )
    analytic = analytic_attention_stats(args.n, args.p, reordered)
    _emit({
        "n": args.n,
        "p": args.p,
        "phase": phase.value,
        "reordered": reordered,
        "measured": {
            "blocks_loaded": measured.blocks_loaded,
            "latency_iters": measured.latency_iters,
            "peak_bandwidth_blocks_per_iter":
                measured.peak_bandwidth_blocks_per_iter,
            "live_buffers": measured.live_buffers,
        },
        "analytic": analytic.as_dict(),
    })
    return 0


def cmd_approx_gelu(args) -> int:
    _emit(gelu_error_report(_parse_step(args.step), args.grid))
    return 0


def cmd_approx_softmax(args) -> int:
    _emit(softmax_error_report(args.len, args.trials, args.seed))
    return 0


def cmd_moe_report(args) -> int:
    rng = np.random.default_rng(args.seed)
    cat = FormatCatalog()
    d, h = 16, 8
    from .model import _draw_linear  # same deterministic layer generator
    from .moe import ExpertMlp, ExpertParams

    experts = ExpertParams(experts=tuple(
        ExpertMlp(w1=_draw_linear(rng, cat, h, d, "mlp"),
                  w2=_draw_linear(rng, cat, d, h, "mlp"))
        for _ in range(args.m)
    ))
    gate = _draw_linear(rng, cat, args.m, d, "attention")
    tokens = FxTensor.from_real(rng.uniform(-1, 1, (args.n, d)), cat.activation)
    with RunContext():
        gr = gate_scores(tokens, [gate], task=0, k=args.k)
        mq = build_queues(gr, args.m)
        out_r, stats_r = moe_forward(tokens, experts, mq, gr)
        out_o, stats_o = moe_forward_oracle(tokens, experts, gr)
    _emit({
        "n": args.n,
        "m": args.m,
        "k": args.k,
        "seed": args.seed,
        "expert_by_expert": {
            "expert_loads": stats_r.expert_loads,
            "tokens_computed": stats_r.tokens_computed,
        },
        "patch_by_patch": {
            "expert_loads": stats_o.expert_loads,
            "tokens_computed": stats_o.tokens_computed,
        },
        "distinct_experts": len(mq.order),
        "outputs_bitwise_equal": bool(np.array_equal(out_r.raw, out_o.raw)),
    })
    return 0


def cmd_breakdown(args) -> int:
    with open(args.report) as f:
        report = RunReport.from_dict(json.load(f))
    bd = breakdown(report)
    _emit(bd.as_dict())
    print(bd.render_text(), file=sys.stderr)
    return 0


def cmd_gen_weights(args) -> int:
    cfg = _config_from_args(args)
    weights = generate_weights(cfg, seed=args.seed)
    save_weights(weights, args.out)
    size = os.path.getsize(args.out)
    print(f"wrote {args.out} ({size} bytes, seed {args.seed})")
    return 0


def cmd_presets(args) -> int:
    print(f"{'name':<12}{'blocks':>7}{'hidden':>8}{'mlp':>6}{'heads':>7}"
          f"{'experts':>9}{'tasks':>7}")
    for name, cfg in PRESETS.items():
        print(f"{name:<12}{cfg.n_blocks:>7}{cfg.d:>8}{cfg.mlp_dim:>6}"
              f"{cfg.n_heads:>7}{cfg.m_experts:>9}{cfg.n_tasks:>7}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fxmoe",
        description="Fixed-point multi-task MoE vision-transformer engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="forward pass over one image")
    run.add_argument("--weights", help="weight file; omit to use --preset")
    run.add_argument("--preset", choices=sorted(PRESETS), default="m3vit",
                     help="generate seed weights in memory when no file given")
    run.add_argument("--seed", type=int, default=_default_seed())
    run.add_argument("--image", default=f"synthetic:{_default_seed()}")
    run.add_argument("--task", type=int, default=0)
    run.add_argument("--parallelism", type=int, default=4)
    run.add_argument("--report", help="write the run report JSON here")
    run.set_defaults(func=cmd_run)

    traffic = sub.add_parser("traffic", help="schedule traffic, measured vs analytic")
    traffic.add_argument("--n", type=int, required=True)
    traffic.add_argument("--p", type=int, required=True)
    traffic.add_argument("--naive", action="store_true")
    traffic.add_argument("--phase", choices=("qk", "mv"), default="qk")
    traffic.set_defaults(func=cmd_traffic)

    approx = sub.add_parser("approx", help="approximation error reports")
    approx_sub = approx.add_subparsers(dest="kind", required=True)
    gelu_p = approx_sub.add_parser("gelu")
    gelu_p.add_argument("--step", default="2^-10")
    gelu_p.add_argument("--grid", type=int, default=100_001)
    gelu_p.set_defaults(func=cmd_approx_gelu)
    soft_p = approx_sub.add_parser("softmax")
    soft_p.add_argument("--len", type=int, default=128)
    soft_p.add_argument("--trials", type=int, default=100)
    soft_p.add_argument("--seed", type=int, default=_default_seed())
    soft_p.set_defaults(func=cmd_approx_softmax)

    moe_p = sub.add_parser("moe-report", help="expert-load accounting comparison")
    moe_p.add_argument("--n", type=int, default=128)
    moe_p.add_argument("--m", type=int, default=16)
    moe_p.add_argument("--k", type=int, default=2)
    moe_p.add_argument("--seed", type=int, default=_default_seed())
    moe_p.set_defaults(func=cmd_moe_report)

    bd = sub.add_parser("breakdown", help="latency shares of a saved report")
    bd.add_argument("--report", required=True)
    bd.set_defaults(func=cmd_breakdown)

    gen = sub.add_parser("gen-weights", help="write a random weight file")
    gen.add_argument("--preset", choices=sorted(PRESETS), default="m3vit")
    gen.add_argument("--config", help="JSON file with model-config fields")
    gen.add_argument("--seed", type=int, default=_default_seed())
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_weights)

    pre = sub.add_parser("presets", help="list the built-in model shapes")
    pre.set_defaults(func=cmd_presets)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, IndexError, OSError, ZeroDivisionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
