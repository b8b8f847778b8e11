"""``qpal`` command line: codebooks, quantization, distortion, allocation and MSQ planning.

Exit codes: 0 success, 2 invalid configuration, 3 infeasible budget, 4 I/O or
file-format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import errors
from .cache import cached_codebook
from .incoherence import IncoherenceState, gaussianize, rotate_hessian
from .msq.catalog import read_catalog
from .msq.costs import ingest_cost_profile, synth_cost_model
from .msq.fusion import build_block_frontier, solve_fusion_msq
from .msq.groups import BlockCatalog
from .msq.mckp import DEFAULT_TIME_LIMIT, solve_mckp
from .quant import trellis
from .quant.engine import dequantize, quantize_matrix
from .quant.ldlq import block_ldlq
from .rate import LayerSpec, allocate_bits, gap_report, measure_scheme_distortion, rd_bound
from .tensor_store import (
    Scheme,
    bits_to_x4,
    check_width,
    load_dense,
    read_codebook,
    read_quantized,
    save_dense,
    write_codebook,
    write_quantized,
)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: InvalidConfig: {message}\nremedy: see `{self.prog} --help`", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _dims(text: str) -> tuple[int, int]:
    parts = text.lower().replace("×", "x").split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected RxC, got {text!r}")
    try:
        r, c = int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected RxC, got {text!r}") from None
    if r < 1 or c < 1:
        raise argparse.ArgumentTypeError("dims must be positive")
    return r, c


def _width(scheme: str, bits: float) -> tuple[Scheme, int]:
    s = Scheme.parse(scheme)
    x4 = bits_to_x4(bits)
    check_width(s, x4)
    return s, x4


def _load_matrix(path, dtype=np.float32) -> np.ndarray:
    if str(path).endswith(".npy"):
        m = np.load(path, allow_pickle=False)
        if m.ndim != 2:
            raise errors.InvalidInput(f"{path}: expected a 2-D array")
        return np.asarray(m, dtype=dtype)
    return load_dense(path).astype(dtype)


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except ValueError as exc:
        raise errors.FormatError(f"{path}: not valid JSON ({exc})") from exc


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _read_layers(path) -> list[LayerSpec]:
    obj = _read_json(path)
    rows = obj["layers"] if isinstance(obj, dict) else obj
    try:
        return [LayerSpec(r["name"], r["d_in"], r["d_out"], r["sensitivity"]) for r in rows]
    except (KeyError, TypeError) as exc:
        raise errors.FormatError(f"{path}: malformed layer list ({exc!r})") from exc


# ---------------------------------------------------------------- commands


def cmd_forge_codebook(a) -> int:
    scheme, x4 = _width(a.scheme, a.bits)
    cb = cached_codebook(scheme, x4, seed=a.seed, n_samples=a.samples)
    write_codebook(a.out, cb)
    print(f"codebook {cb.codebook_id}: {cb.kind.name} {x4 / 4:g} bits, {cb.entries.shape[0]} entries -> {a.out}")
    return EXIT_OK


def cmd_quantize(a) -> int:
    scheme, x4 = _width(a.scheme, a.bits)
    m = _load_matrix(a.input)
    cb = read_codebook(a.codebook) if a.codebook else cached_codebook(scheme, x4)
    h = _load_matrix(a.hessian, np.float64) if a.hessian else None
    seed, scales = None, None
    if a.rotate:
        m, state = gaussianize(m, a.seed)
        seed, scales = a.seed, state.scales
        if h is not None:
            h = rotate_hessian(h, a.seed)
    if h is not None:
        q = block_ldlq(m, h, scheme, x4, cb, seed=seed, scales=scales, threads=a.threads)
    else:
        q = quantize_matrix(m, scheme, x4, cb, seed=seed, scales=scales, threads=a.threads)
    write_quantized(a.out, q)
    print(f"{scheme.label} {x4 / 4:g} bits {q.rows}x{q.cols}: {len(q.packed)} packed bytes -> {a.out}")
    return EXIT_OK


def cmd_dequantize(a) -> int:
    q = read_quantized(a.input)
    cb = read_codebook(a.codebook)
    out = dequantize(q, cb, IncoherenceState.from_quantized(q))
    save_dense(a.out, np.asarray(out, dtype=np.float32))
    print(f"{q.rows}x{q.cols} -> {a.out}")
    return EXIT_OK


def cmd_eval_distortion(a) -> int:
    scheme, x4 = _width(a.scheme, a.bits)
    cb = read_codebook(a.codebook) if a.codebook else None
    err = measure_scheme_distortion(scheme, x4, a.dims, a.seed, codebook=cb, threads=a.threads)
    bound = rd_bound(x4 / 4)
    print(f"{scheme.label}-{x4 / 4:g} {a.dims[0]}x{a.dims[1]} seed {a.seed}: err {err:.5f}  bound {bound:.5f}")
    if a.out:
        _write_json(a.out, {"scheme": scheme.label, "bits": x4 / 4, "dims": list(a.dims), "seed": a.seed, "err": err, "rd_bound": bound})
    return EXIT_OK


def cmd_allocate_bits(a) -> int:
    layers = _read_layers(a.layers)
    res = allocate_bits(layers, a.budget_bits, a.eta)
    obj = res.to_json()
    text = json.dumps(obj, indent=2)
    if a.out:
        _write_json(a.out, obj)
    print(text)
    return EXIT_OK


def cmd_solve_msq(a) -> int:
    _, entries = read_catalog(a.catalog)
    sol = solve_mckp(entries, a.budget, a.time_limit)
    obj = sol.to_json()
    if a.out:
        _write_json(a.out, obj)
    print(f"loss {sol.total_loss:.6g} cost {sol.total_cost:.6g} optimal {sol.optimal}")
    for e in sol.choices.values():
        print(f"  {e.layer}: {e.quantizer_id} ({e.bits:g} bits)")
    return EXIT_OK


def cmd_solve_fusion_msq(a) -> int:
    obj = _read_json(a.blocks)
    try:
        quantizers = {str(k): float(v) for k, v in obj["quantizers"].items()}
        blocks = [BlockCatalog.from_json(b, quantizers) for b in obj["blocks"]]
    except (KeyError, TypeError, AttributeError) as exc:
        raise errors.FormatError(f"{a.blocks}: malformed block catalog ({exc!r})") from exc
    if a.cost_model == "synth":
        costs = synth_cost_model(blocks, quantizers, obj.get("cost_params", {}))
    else:
        if not a.costs:
            raise errors.InvalidInput("--cost-model file needs --costs PATH")
        costs = ingest_cost_profile(a.costs, blocks)
    frontiers = {b.block_id: build_block_frontier(b, costs) for b in blocks}
    plan = solve_fusion_msq(frontiers, a.budget, quantizers, a.time_limit)
    if a.out:
        _write_json(a.out, plan.to_json())
    print(f"loss {plan.total_loss:.6g} cost {plan.total_cost:.6g} ({costs.units}) optimal {plan.optimal}")
    for b in plan.blocks:
        groups = ", ".join(f"{'+'.join(g['members'])}:{g['quantizer']}" for g in b["groups"])
        print(f"  block {b['block']}: {groups}")
    return EXIT_OK


def cmd_gap_report(a) -> int:
    layers = _read_layers(a.layers)
    obj = _read_json(a.chosen)
    rows = obj["chosen"] if isinstance(obj, dict) else obj
    try:
        by_name = {r["layer"]: (float(r["bits"]), float(r["err"])) for r in rows}
        chosen = [by_name[l.name] for l in layers]
    except (KeyError, TypeError) as exc:
        raise errors.FormatError(f"{a.chosen}: needs one {{layer, bits, err}} row per layer ({exc!r})") from exc
    alloc = allocate_bits(layers, a.budget, a.eta)
    rep = gap_report(chosen, layers, alloc, a.budget)
    if a.out:
        _write_json(a.out, rep.to_json())
    print(f"distortion gap {rep.distortion_gap:.6g}  bit-allocation gap {rep.bit_alloc_gap:.6g}  total {rep.total_gap:.6g}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qpal", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("--config", help="JSON file of flag values for the subcommand")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")
        return sp

    sp = add("forge-codebook", cmd_forge_codebook, "build a codebook")
    sp.add_argument("--scheme")
    sp.add_argument("--bits", type=float)
    sp.add_argument("--samples", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")

    sp = add("quantize", cmd_quantize, "quantize a dense matrix")
    sp.add_argument("--in", dest="input")
    sp.add_argument("--scheme")
    sp.add_argument("--bits", type=float)
    sp.add_argument("--codebook", default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--rotate", action="store_true")
    sp.add_argument("--hessian", default=None, help="proxy Hessian (d_in x d_in) for block LDLQ")
    sp.add_argument("--out")

    sp = add("dequantize", cmd_dequantize, "decode a quantized tensor")
    sp.add_argument("--in", dest="input")
    sp.add_argument("--codebook")
    sp.add_argument("--out")

    sp = add("eval-distortion", cmd_eval_distortion, "distortion on a random Gaussian matrix")
    sp.add_argument("--scheme")
    sp.add_argument("--bits", type=float)
    sp.add_argument("--dims", type=_dims, default=(1024, 1024))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--codebook", default=None)
    sp.add_argument("--out", default=None)

    sp = add("allocate-bits", cmd_allocate_bits, "optimal fractional bit allocation")
    sp.add_argument("--layers")
    sp.add_argument("--budget-bits", type=float)
    sp.add_argument("--eta", type=float, default=0.0)
    sp.add_argument("--out", default=None)

    sp = add("solve-msq", cmd_solve_msq, "exact memory/cost-constrained quantizer selection")
    sp.add_argument("--catalog")
    sp.add_argument("--budget", type=float)
    sp.add_argument("--time-limit", type=float, default=DEFAULT_TIME_LIMIT)
    sp.add_argument("--out", default=None)

    sp = add("solve-fusion-msq", cmd_solve_fusion_msq, "fusion-aware quantizer selection")
    sp.add_argument("--blocks")
    sp.add_argument("--budget", type=float)
    sp.add_argument("--cost-model", choices=("synth", "file"), default="synth")
    sp.add_argument("--costs", default=None)
    sp.add_argument("--time-limit", type=float, default=DEFAULT_TIME_LIMIT)
    sp.add_argument("--out", default=None)

    sp = add("gap-report", cmd_gap_report, "optimality gap of a chosen assignment")
    sp.add_argument("--chosen")
    sp.add_argument("--layers")
    sp.add_argument("--budget", type=float)
    sp.add_argument("--eta", type=float, default=0.0)
    sp.add_argument("--out", default=None)
    return p


REQUIRED = {
    "forge-codebook": ("scheme", "bits", "out"),
    "quantize": ("input", "scheme", "bits", "out"),
    "dequantize": ("input", "codebook", "out"),
    "eval-distortion": ("scheme", "bits"),
    "allocate-bits": ("layers", "budget_bits"),
    "solve-msq": ("catalog", "budget"),
    "solve-fusion-msq": ("blocks", "budget"),
    "gap-report": ("chosen", "layers", "budget"),
}


def _apply_config(args, path, argv) -> None:
    obj = _read_json(path)
    if not isinstance(obj, dict):
        raise errors.InvalidInput(f"{path}: config must be a JSON object")
    explicit = {t.split("=", 1)[0] for t in argv}
    for key, value in obj.items():
        dest = key.replace("-", "_")
        if dest == "in":
            dest = "input"
        if dest in ("func", "command", "config") or not hasattr(args, dest):
            raise errors.InvalidInput(f"{path}: unknown key {key!r} for {args.command}")
        if f"--{key.replace('_', '-')}" in explicit:
            continue
        if dest == "dims" and isinstance(value, str):
            value = _dims(value)
        setattr(args, dest, value)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        if args.config:
            _apply_config(args, args.config, argv)
        missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) is None]
        if missing:
            raise errors.InvalidInput(f"{args.command}: missing " + ", ".join("--" + m.replace("_", "-").replace("input", "in") for m in missing))
        if args.threads is not None and args.threads < 1:
            raise errors.InvalidInput("--threads must be >= 1")
        trellis.set_threads(args.threads)
        return args.func(args)
    except (errors.InfeasibleBudget, errors.Infeasible) as exc:
        return _fail(exc, EXIT_INFEASIBLE)
    except (errors.FormatError, OSError) as exc:
        return _fail(exc, EXIT_IO)
    except errors.QpalError as exc:
        return _fail(exc, EXIT_CONFIG)
    except argparse.ArgumentTypeError as exc:
        return _fail(errors.InvalidInput(str(exc)), EXIT_CONFIG)


def _fail(exc: Exception, code: int) -> int:
    name = type(exc).__name__
    remedy = getattr(exc, "remedy", "check that the file exists and is readable")
    print(f"error: {name}: {exc}\nremedy: {remedy}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
