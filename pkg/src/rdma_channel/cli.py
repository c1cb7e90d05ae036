"""``rdma-bench``: run the microbenchmarks and write a CSV report."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .bench import BenchConfig, report, run, with_chunk
from .channel import Variant
from .config import as_bool, as_number, load_kv
from .errors import ConfigError, RdmaChannelError
from .fabric import MODEL_KEYS, CostModel
from .regcache import CacheConfig
from .ring import PointerMode, RingConfig

DEFAULT_SIZES = {"latency": "4", "bandwidth": "1048576", "sweep": "1048576"}
DEFAULT_VARIANT = {"latency": "piggyback", "bandwidth": "pipeline", "sweep": "pipeline"}

BENCH_KEYS = {"window", "iterations", "warmup", "zerocopy_threshold", "seed", "sizes", "variant",
              "num_chunks", "chunk_size_bytes", "tail_update_threshold", "pointer_mode",
              "regcache", "cache_max_entries", "cache_max_pinned_bytes"}


def parse_sizes(text: str) -> tuple[int, ...]:
    units = {"k": 1 << 10, "m": 1 << 20}
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if not tok:
            continue
        mult = units.get(tok[-1], 1)
        digits = tok[:-1] if tok[-1] in units else tok
        try:
            out.append(int(digits) * mult)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad size {tok!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("no sizes given")
    return tuple(out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdma-bench", description=__doc__)
    sub = parser.add_subparsers(dest="test", required=True)
    for name, help_text in (("latency", "ping-pong half round-trip latency"),
                            ("bandwidth", "windowed one-way bandwidth"),
                            ("sweep", "pipeline bandwidth across chunk sizes")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--variant", choices=[v.value for v in Variant])
        p.add_argument("--sizes", type=parse_sizes, help="comma list, K/M suffixes allowed")
        p.add_argument("--window", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--warmup", type=int)
        p.add_argument("--chunk-size", type=int, help="payload bytes per ring chunk")
        p.add_argument("--model", help="cost model file (key=value)")
        p.add_argument("--config", help="bench config file (key=value)")
        p.add_argument("--out", default="-", help="CSV path, - for stdout")
        p.add_argument("--seed", type=int)
        p.add_argument("--torn-delivery", action="store_true", default=None)
        p.add_argument("--no-regcache", action="store_true")
    return parser


def _int(values: dict, key: str, default: int) -> int:
    return as_number(values[key], key, int) if key in values else default


def config_from_args(args: argparse.Namespace) -> BenchConfig:
    values = load_kv(args.config) if args.config else {}
    unknown = set(values) - BENCH_KEYS - set(MODEL_KEYS) - {"torn_delivery"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    model_values = load_kv(args.model) if args.model else {}
    model, torn = CostModel.from_mapping({**values, **model_values})
    if args.torn_delivery:
        torn = True

    ring = RingConfig.for_payload(16384)
    ring = RingConfig(
        num_chunks=_int(values, "num_chunks", ring.num_chunks),
        chunk_size=_int(values, "chunk_size_bytes", ring.chunk_size),
        tail_update_threshold=(as_number(values["tail_update_threshold"], "tail_update_threshold")
                               if "tail_update_threshold" in values else ring.tail_update_threshold),
        pointer_mode=PointerMode(values.get("pointer_mode", ring.pointer_mode.value)),
    )
    regcache = as_bool(values["regcache"], "regcache") if "regcache" in values else True
    cache = CacheConfig(
        max_entries=_int(values, "cache_max_entries", CacheConfig.max_entries),
        max_pinned_bytes=_int(values, "cache_max_pinned_bytes", CacheConfig.max_pinned_bytes),
        enabled=regcache and not args.no_regcache,
    )
    variant = args.variant or values.get("variant") or DEFAULT_VARIANT[args.test]
    sizes = args.sizes or parse_sizes(values.get("sizes", DEFAULT_SIZES[args.test]))

    def pick(flag, key, default):
        return flag if flag is not None else _int(values, key, default)

    cfg = BenchConfig(
        test=args.test, variant=variant, sizes=sizes,
        window=pick(args.window, "window", 64),
        iterations=pick(args.iterations, "iterations", 1000),
        warmup=pick(args.warmup, "warmup", 100),
        model=model, torn_delivery=torn, ring=ring,
        zerocopy_threshold=_int(values, "zerocopy_threshold", 32768),
        cache=cache, seed=pick(args.seed, "seed", 0),
    )
    if args.chunk_size is not None:
        cfg = with_chunk(cfg, args.chunk_size)
        if args.test == "sweep":
            cfg = replace(cfg, sweep_chunks=(args.chunk_size,))
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        report(run(cfg), args.out)
    except (RdmaChannelError, argparse.ArgumentTypeError, ValueError, OSError) as exc:
        print(f"rdma-bench: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
