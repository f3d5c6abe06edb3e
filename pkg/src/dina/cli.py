"""Command-line surface: check, rf, flops, bench, train, eval.

Exit codes: 0 success, 1 runtime/config failure, 2 usage error.  All text
output is UTF-8; reports are tab-separated.  Every subcommand is
deterministic under fixed seeds and flags, timing fields aside.
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from . import checks
from .bench import bench_attention, bench_pair
from .data import SyntheticDataset
from .errors import ArgumentError, DinaError
from .model import (
    ModelConfig, build_model, canonical_preset_name, load_weights, preset,
    preset_names, preset_targets, save_weights,
)
from .rfanalysis import (
    LayerKind, RUNNABLE_KINDS, analytic_rf, comparison_rows, empirical_rf,
    footprint_raster, instantiate_stack, model_flops, model_params, write_pgm,
)
from .train import evaluate, train

_KIND_NAMES = {"sa": "SA", "na": "NA", "dina": "DiNA", "wsa": "WSA", "swsa": "SWSA", "dwsconv": "DWSConv"}


def parse_stack(text: str) -> list[LayerKind]:
    """Parse inline stack specs like '4xNA k=7' or 'NA k=3; DiNA k=3 d=3'."""
    layers: list[LayerKind] = []
    for segment in text.split(";"):
        segment = segment.strip()
        if not segment:
            continue
        tokens = segment.replace("×", "x").split()
        head = tokens[0]
        count = 1
        m = re.fullmatch(r"(\d+)[xX](\w+)", head)
        if m:
            count, kind_token = int(m.group(1)), m.group(2)
        else:
            kind_token = head
        kind = _KIND_NAMES.get(kind_token.lower())
        if kind is None:
            raise ArgumentError(f"unknown layer kind {kind_token!r} in stack spec {text!r}")
        k = None
        delta = 1
        for token in tokens[1:]:
            m = re.fullmatch(r"(k|d|delta|δ)=(\d+)", token.lower())
            if not m:
                raise ArgumentError(f"cannot parse {token!r} in stack spec {text!r}")
            if m.group(1) == "k":
                k = int(m.group(2))
            else:
                delta = int(m.group(2))
        layers.extend(LayerKind(kind, k, delta) for _ in range(count))
    if not layers:
        raise ArgumentError(f"empty stack spec {text!r}")
    return layers


def _parse_res(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text.lower())
    if not m:
        raise ArgumentError(f"resolution must look like 224x224, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _load_config(spec: str) -> tuple[ModelConfig, str | None]:
    """A preset name or a JSON config path; returns (config, preset name or None)."""
    path = Path(spec)
    if path.suffix == ".json" or path.exists():
        return ModelConfig.from_json(path.read_text(encoding="utf-8")), None
    canon = canonical_preset_name(spec)
    return preset(canon), canon


def _target_line(kind: str, value: float, target: float, tol: float) -> str:
    scale, unit = (1e6, "M") if kind == "params" else (1e9, "G")
    dev = abs(value - target) / target
    return f"{kind}\t{value:,}\ttarget {target / scale:.1f} {unit}\tdeviation {dev:.2%} (tolerance {tol:.0%})"


def cmd_check(args) -> int:
    names = None
    if args.filter:
        if args.filter not in checks.SUITES:
            raise UsageError(f"unknown suite {args.filter!r}; available: {sorted(checks.SUITES)}")
        names = [args.filter]
    if args.mutate and args.mutate not in checks._MUTATIONS:
        raise UsageError(f"unknown mutation {args.mutate!r}; available: {sorted(checks._MUTATIONS)}")
    results, ok = checks.run_suites(names, mutate=args.mutate)
    for name, failures in results.items():
        print(f"{name}: {'PASS' if not failures else 'FAIL'}")
        for line in failures:
            print(f"  {line}")
    return 0 if ok else 1


def cmd_rf(args) -> int:
    stack = parse_stack(args.stack)
    n = args.n
    print(f"stack\t{args.stack}")
    print(f"n\t{n}")
    analytic = analytic_rf(stack, n)
    print(f"analytic_rf\t{analytic}")
    if args.empirical:
        if any(layer.kind not in RUNNABLE_KINDS for layer in stack):
            raise ArgumentError(f"--empirical needs runnable kinds ({', '.join(RUNNABLE_KINDS)})")
        probe = args.probe if args.probe is not None else (n - 1) // 2
        layers = instantiate_stack(stack, n, seed=args.seed)
        print(f"empirical_rf\t{empirical_rf(layers, n, probe, seed=args.seed)}")
    print()
    print("structure\tMACs/layer\treceptive field")
    for name, macs, rf in comparison_rows(stack, n, d=args.dim):
        print(f"{name}\t{macs:,}\t{rf}")
    if args.pgm:
        extent = _parse_res(args.extent)
        probes = [tuple(int(v) for v in p.split(",")) for p in args.pixel] or [
            ((extent[0] - 1) // 2, (extent[1] - 1) // 2)
        ]
        for py, px in probes:
            img = footprint_raster(stack, extent, (py, px))
            path = Path(args.pgm)
            if len(probes) > 1:
                path = path.with_name(f"{path.stem}_{py}_{px}{path.suffix or '.pgm'}")
            write_pgm(path, img)
            print(f"wrote\t{path}")
    return 0


def cmd_flops(args) -> int:
    config, preset_name = _load_config(args.config)
    res = _parse_res(args.res)
    params = model_params(config)
    macs = model_flops(config, res)
    print(f"config\t{preset_name or args.config}")
    print(f"resolution\t{res[0]}x{res[1]}")
    targets = preset_targets(preset_name) if preset_name else None
    if targets and res == (224, 224):
        print(_target_line("params", params, targets[0], 0.03))
        print(_target_line("macs", macs, targets[1], 0.05))
    else:
        print(f"params\t{params:,}")
        print(f"macs\t{macs:,}")
    return 0


def cmd_bench(args) -> int:
    kwargs = dict(height=args.height, width=args.width, k=args.k, delta=args.delta,
                  heads=args.heads, dim=args.dim, reps=args.reps, seed=args.seed)
    print("op\tH\tW\tk\tdelta\theads\tdim\tmedian_ms\tp10_ms\tp90_ms\tchecksum")

    def show(r):
        c = r.config
        print(f"{r.op}\t{c['H']}\t{c['W']}\t{c['k']}\t{c['delta']}\t{c['heads']}\t{c['dim']}"
              f"\t{r.median_ms:.3f}\t{r.p10_ms:.3f}\t{r.p90_ms:.3f}\t{r.checksum}")

    if args.op == "both":
        naive, tiled, ratio = bench_pair(**kwargs)
        show(naive)
        show(tiled)
        print(f"speedup (naive/tiled)\t{ratio:.3f}")
    else:
        show(bench_attention(args.op, **kwargs))
    return 0


def cmd_train(args) -> int:
    config, _ = _load_config(args.config)
    res = _parse_res(args.res)
    dataset = SyntheticDataset(seed=args.data_seed, count=args.data_count,
                               resolution=res, classes=config.classes)
    model = build_model(config, res, seed=args.seed)  # config errors surface before any step
    losses = train(model, dataset, steps=args.steps, lr=args.lr, seed=args.seed,
                   batch_size=args.batch)
    out = Path(args.out)
    save_weights(model, out)
    if losses:
        print(f"final\tstep {len(losses) - 1}\tloss {losses[-1]:.6f}")
    print(f"saved\t{out}")
    return 0


def cmd_eval(args) -> int:
    config, _ = _load_config(args.config)
    res = _parse_res(args.res)
    model = load_weights(args.weights, config, res)
    dataset = SyntheticDataset(seed=args.data_seed, count=args.data_count,
                               resolution=res, classes=config.classes)
    acc = evaluate(model, dataset)
    print(f"accuracy\t{acc:.4f}\t(samples {len(dataset)}, classes {config.classes})")
    return 0


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dina", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run the invariant suites")
    p.add_argument("--filter", help="run a single suite by name")
    p.add_argument("--mutate", help=argparse.SUPPRESS)  # fault injection for harness tests
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("rf", help="receptive-field report for a layer stack")
    p.add_argument("stack", help="e.g. '4xNA k=7' or 'NA k=3; DiNA k=3 d=3'")
    p.add_argument("--n", type=int, default=4096, help="axis extent (default 4096)")
    p.add_argument("--dim", type=int, default=64, help="width for the MACs column")
    p.add_argument("--empirical", action="store_true", help="add a Jacobian-probe column")
    p.add_argument("--probe", type=int, default=None, help="probe index (default center)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pgm", default=None, help="write footprint raster(s) to this path")
    p.add_argument("--extent", default="56x56", help="raster extent (default 56x56)")
    p.add_argument("--pixel", action="append", default=[], help="raster probe 'y,x' (repeatable)")
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("flops", help="parameter/MAC report for a config or preset")
    p.add_argument("config", help=f"preset name ({', '.join(preset_names())}) or config JSON path")
    p.add_argument("--res", default="224x224")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("bench", help="time the reference vs tiled attention paths")
    p.add_argument("--op", choices=("naive", "tiled", "both"), default="both")
    p.add_argument("--height", type=int, default=56)
    p.add_argument("--width", type=int, default=56)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--delta", type=int, default=1)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train on the synthetic shapes dataset")
    p.add_argument("config", help="config JSON path or preset name")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.08)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--out", default="weights.dnw")
    p.add_argument("--res", default="96x96")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--data-count", type=int, default=192)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved weights on the shapes dataset")
    p.add_argument("weights", help="path to a .dnw archive")
    p.add_argument("--config", required=True, help="config JSON path or preset name")
    p.add_argument("--res", default="96x96")
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--data-count", type=int, default=96)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DinaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())
