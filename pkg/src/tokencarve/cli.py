"""Command-line front end.

Subcommands: ``order`` (curve export), ``masks`` (selection mask dump),
``attend`` (sparse attention on tensor files), ``plan`` (stage plan
generation), ``pipeline`` (progressive-resolution run), ``analyze``
(partition overhead table).
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import pipeline as pl
from .analyze import PartitionStrategy, attention_flops, effective_sparsity, partition_overhead
from .attention import (
    AmplifierBias,
    AttentionInputs,
    block_mask_logit_bias,
    carve_attention,
    dense_attention,
)
from .errors import ContractError, DomainError, ParseError, ShapeError, SizeError
from .masks import BlockMask, SelectionParams, build_block_mask, mask_stats
from .partition import StaticMasks, build_layout
from .sfc import GridDims, build_curve
from .tensorio import read_mask, read_tensor, write_mask, write_tensor


def _dims(text: str) -> GridDims:
    return GridDims.from_string(text)


def _cmd_order(args) -> int:
    perm = build_curve(args.dims)
    if args.binary:
        write_tensor(args.out, perm.forward.astype(np.float32))
    elif args.out:
        with open(args.out, "w") as fh:
            fh.writelines(f"{i}\n" for i in perm.forward)
    else:
        sys.stdout.writelines(f"{i}\n" for i in perm.forward)
    return 0


def _random_qkv(layout, heads, d_k, seed):
    rng = np.random.default_rng(seed)
    shape = (heads, layout.padded_total, d_k)
    return tuple(rng.standard_normal(shape, dtype=np.float32) for _ in range(3))


def _cmd_masks(args) -> int:
    perm = build_curve(args.dims)
    layout = build_layout(args.dims, args.block, args.cond)
    statics = StaticMasks.build(layout, args.dims, perm)
    if args.csv:
        neighbor_counts = statics.adja.sum(axis=1) - 1
        with open(args.csv, "w") as fh:
            fh.write("block_id,neighbor_count\n")
            fh.writelines(f"{i},{c}\n" for i, c in enumerate(neighbor_counts))
    if args.q and args.k:
        q, k = read_tensor(args.q), read_tensor(args.k)
    else:
        q, k, _ = _random_qkv(layout, args.heads, args.dk, args.seed)
    params = SelectionParams(k=args.rate, p=args.cutoff)
    mask, rel = build_block_mask(q, k, layout, statics, params)
    if args.out:
        write_mask(args.out, mask.bits)
    stats = mask_stats(mask, rel, params.p)
    stats["effective_sparsity"] = effective_sparsity(mask).mean
    out = json.dumps(stats, indent=2)
    if args.stats:
        with open(args.stats, "w") as fh:
            fh.write(out + "\n")
    else:
        print(out)
    return 0


def _cmd_attend(args) -> int:
    q, k, v = read_tensor(args.q), read_tensor(args.k), read_tensor(args.v)
    layout = build_layout(args.dims, args.block, args.cond)
    inputs = AttentionInputs(q=q, k=k, v=v, layout=layout)
    if args.full_mask:
        bits = np.ones((q.shape[0], layout.M_v, layout.M_total), dtype=bool)
        mask = BlockMask(bits=bits)
    elif args.mask:
        mask = BlockMask(bits=read_mask(args.mask))
    else:
        raise ContractError("attend needs --mask FILE or --full-mask")
    beta = AmplifierBias(args.beta)

    start = time.perf_counter()
    out = carve_attention(inputs, mask, beta)
    wall = time.perf_counter() - start

    report = {
        "effective_sparsity": effective_sparsity(mask).mean,
        "n_prime": attention_flops(mask, layout.m, q.shape[2]).n_prime,
        "wall_time": wall,
    }
    if layout.padded_total <= args.verify_limit:
        bias = block_mask_logit_bias(mask, layout, beta.beta)
        oracle = dense_attention(q, k, v, logit_bias=bias, valid=layout.token_valid_mask)
        report["max_abs_err_vs_dense"] = float(np.abs(out - oracle).max())
    else:
        # the dense oracle needs an N x N logit matrix per head
        report["max_abs_err_vs_dense"] = None
        report["verify_skipped"] = f"sequence {layout.padded_total} > --verify-limit"
    if args.out:
        write_tensor(args.out, out)
    text = json.dumps(report, indent=2)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


_DEFAULT_SCALES = {1: (1.0,), 2: (0.75, 1.0), 3: (0.5, 0.75, 1.0)}


def default_stage_plan(
    target: GridDims,
    n_stages: int = 2,
    base_T: int = 50,
    keep: int = 23,
    alpha: float = 7.0,
    rates: tuple[float, ...] = (0.3, 0.2),
    rho: float = 0.5,
    block_size: int = 128,
    cond_tokens: int = 0,
    p: float = 0.3,
    scales: tuple[float, ...] | None = None,
) -> pl.StagePlan:
    """Stage plan with the stock multi-stage layout.

    The last stage covers the second half of the base grid at the target
    resolution; earlier stages split the first half evenly at reduced
    spatial scale.  Each stage after the first re-enters at the switch
    index and shifts alpha by +2.
    """
    if scales is None:
        scales = _DEFAULT_SCALES.get(
            n_stages, tuple(0.5 + 0.5 * i / (n_stages - 1) for i in range(n_stages))
        )
    if len(scales) != n_stages or scales[-1] != 1.0:
        raise ContractError(f"need {n_stages} scales ending at 1.0, got {scales}")
    retained = pl.skip_schedule(base_T, keep)
    if n_stages == 1:
        bounds = [0, base_T]
    else:
        half = -(-base_T // 2)
        bounds = [round(half * i / (n_stages - 1)) for i in range(n_stages - 1)] + [half, base_T]
    stages = []
    for s in range(n_stages):
        lo, hi = bounds[s], bounds[s + 1]
        steps = [i for i in retained if lo <= i < hi]
        if s > 0 and (not steps or steps[0] != lo):
            steps = [lo] + steps  # repeat the switch timestep
        scale = scales[s]
        dims = GridDims(target.t, max(1, round(target.h * scale)), max(1, round(target.w * scale)))
        if s == n_stages - 1:
            dims = target
        stages.append(
            pl.StageConfig(
                dims=dims,
                step_indices=tuple(steps),
                alpha=alpha + 2 * s,
                k=rates[min(s, len(rates) - 1)],
                rho=rho if s == 0 else 0.0,
            )
        )
    return pl.StagePlan(
        stages=tuple(stages),
        base_T=base_T,
        block_size=block_size,
        n_cond_tokens=cond_tokens,
        p=p,
    )


def _cmd_plan(args) -> int:
    plan = default_stage_plan(
        target=args.target,
        n_stages=args.stages,
        base_T=args.base_steps,
        keep=args.keep,
        alpha=args.alpha,
        rates=tuple(float(r) for r in args.rates.split(",")),
        rho=args.rho,
        block_size=args.block,
        cond_tokens=args.cond,
        p=args.cutoff,
    )
    data = pl.plan_to_dict(plan)
    data["seed"] = args.seed
    data["denoiser"] = args.denoiser
    text = json.dumps(data, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def _load_plan_file(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.pos) from exc


def _cmd_pipeline(args) -> int:
    data = _load_plan_file(args.plan)
    plan = pl.plan_from_dict(data)
    kind = data.get("denoiser", "gaussian")
    params = data.get("denoiser_params", {})
    channels = int(data.get("channels", 1))
    if kind == "gaussian":
        denoiser = pl.gaussian_analytic_denoiser(
            mu=float(params.get("mu", 3.0)), s=float(params.get("s", 2.0))
        )
    elif kind == "toy-transformer":
        denoiser = pl.toy_transformer_denoiser(
            channels=channels,
            n_heads=int(params.get("heads", 2)),
            d_k=int(params.get("dk", 16)),
            seed=int(params.get("seed", 1234)),
        )
    else:
        raise ContractError(f"unknown denoiser {kind!r}")
    result = pl.run_pipeline(plan, denoiser, rng=int(data.get("seed", 0)), channels=channels)
    if args.out:
        write_tensor(args.out, result.latent)
    text = json.dumps(result.report, indent=2)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def _cmd_analyze(args) -> int:
    if args.strategy == "sfc":
        strategy = PartitionStrategy(kind="sfc")
    else:
        if not args.tile:
            raise ContractError("tiled strategy needs --tile t,h,w")
        strategy = PartitionStrategy(kind="tiled_window", tile=tuple(args.tile.as_tuple()))
    report = partition_overhead(args.dims, strategy, args.block)
    print(report.csv_row())
    if args.json:
        raw = {
            "strategy": report.strategy,
            "padding_tokens": report.padding_tokens,
            "extra_matmul_fraction": report.extra_matmul_fraction,
            "effective_tokens": report.effective_tokens,
        }
        with open(args.json, "w") as fh:
            json.dump(raw, fh, indent=2)
            fh.write("\n")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokencarve",
        description="Space-filling-curve block-sparse attention toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("order", help="export the curve permutation")
    p.add_argument("--dims", type=_dims, required=True, help="grid dims t,h,w")
    p.add_argument("--out", help="output path (default: stdout)")
    p.add_argument("--binary", action="store_true", help="write the binary tensor format")
    p.set_defaults(func=_cmd_order)

    p = sub.add_parser("masks", help="build and dump selection masks")
    p.add_argument("--dims", type=_dims, required=True)
    p.add_argument("--block", type=int, default=128, help="block size m")
    p.add_argument("--cond", type=int, default=0, help="condition token count")
    p.add_argument("--q", help="query tensor file (random if omitted)")
    p.add_argument("--k", help="key tensor file (random if omitted)")
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--dk", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float, default=0.3, help="selection rate k")
    p.add_argument("--cutoff", type=float, default=0.3, help="cutoff probability p")
    p.add_argument("--out", help="bit-packed mask output")
    p.add_argument("--stats", help="JSON stats output (default: stdout)")
    p.add_argument("--csv", help="CSV of per-block 3D neighbor counts")
    p.set_defaults(func=_cmd_masks)

    p = sub.add_parser("attend", help="run carve attention on tensor files")
    p.add_argument("--q", required=True)
    p.add_argument("--k", required=True)
    p.add_argument("--v", required=True)
    p.add_argument("--dims", type=_dims, required=True)
    p.add_argument("--block", type=int, default=128)
    p.add_argument("--cond", type=int, default=0)
    p.add_argument("--mask", help="bit-packed mask file")
    p.add_argument("--full-mask", action="store_true", help="select every block")
    p.add_argument("--beta", type=float, default=0.0, help="text amplifier bias")
    p.add_argument(
        "--verify-limit",
        type=int,
        default=4096,
        help="skip the dense-oracle comparison above this sequence length",
    )
    p.add_argument("--out", help="output tensor path")
    p.add_argument("--report", help="JSON report path (default: stdout)")
    p.set_defaults(func=_cmd_attend)

    p = sub.add_parser("plan", help="emit a stage plan JSON")
    p.add_argument("--target", type=_dims, required=True, help="target dims t,h,w")
    p.add_argument("--stages", type=int, default=2)
    p.add_argument("--base-steps", type=int, default=50)
    p.add_argument("--keep", type=int, default=23)
    p.add_argument("--alpha", type=float, default=7.0)
    p.add_argument("--rates", default="0.3,0.2", help="per-stage selection rates")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--block", type=int, default=128)
    p.add_argument("--cond", type=int, default=0)
    p.add_argument("--cutoff", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--denoiser", choices=("gaussian", "toy-transformer"), default="gaussian")
    p.add_argument("--out", help="plan JSON path (default: stdout)")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("pipeline", help="run the progressive-resolution sampler")
    p.add_argument("--plan", required=True, help="plan JSON file")
    p.add_argument("--out", help="terminal latent tensor path")
    p.add_argument("--report", help="JSON run report path (default: stdout)")
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("analyze", help="partition overhead table")
    p.add_argument("--dims", type=_dims, required=True)
    p.add_argument("--strategy", choices=("sfc", "tiled"), required=True)
    p.add_argument("--block", type=int, default=128)
    p.add_argument("--tile", type=_dims, help="tile dims for the tiled strategy")
    p.add_argument("--json", help="write raw values as JSON")
    p.set_defaults(func=_cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ContractError, ShapeError, DomainError, SizeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
