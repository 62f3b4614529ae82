"""Command-line entry point: ``repsparse {bench,sweep,analyze,train,pack,unpack}``.

Every command writes JSON or CSV that carries its full configuration. On
failure the exit status is nonzero and the last line on stderr is a JSON
object ``{"status": "error", "type": ..., "message": ...}``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import LayerShape, parse_shapes, profile_layers, resnet18_layers, throughput_potential
from .packing import load_packed, save_packed
from .quantize import (
    VARIANTS,
    QuantizedLayer,
    assign_regions,
    compute_delta,
    dequantize,
    density,
    quantize_binary,
    quantize_signed_binary,
    quantize_ternary,
    unique_2d_filters,
    unique_values_per_filter,
)
from .repkernel import sweep_sparsity
from .tensor import load_tensor, save_tensor


class CLIError(Exception):
    pass


def _on_off(text):
    return [s.strip() == "on" for s in text.split(",") if s.strip()]


def _write(text: str, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _json(obj) -> str:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return json.dumps(obj, indent=2, default=default) + "\n"


def _load_model(path) -> tuple[dict, dict, dict]:
    """Quantized layers, latent weights and metadata from a ``.plum`` file or
    a checkpoint directory written by ``train``."""
    p = Path(path)
    if not p.exists():
        raise CLIError(f"model file not found: {p}")
    if p.is_file():
        return {p.stem: load_packed(p)}, {}, {"source": str(p)}
    meta_path = p / "meta.json"
    if not meta_path.exists():
        raise CLIError(f"{p} has no meta.json")
    meta = json.loads(meta_path.read_text())
    layers, latents = {}, {}
    for entry in meta["layers"]:
        name = entry["name"]
        W = load_tensor(p / entry["latent"])
        latents[name] = W
        coeff = meta["config"].get("delta_coeff", 0.05)
        if "packed" in entry:
            layers[name] = load_packed(p / entry["packed"])
        elif entry["variant"] == "ternary":
            layers[name] = quantize_ternary(W, compute_delta(W, coeff), coeff)
        elif entry["variant"] == "binary":
            layers[name] = quantize_binary(W)
        elif entry["variant"] == "signed-binary":
            raise CLIError(f"{name}: intra-filter signed-binary layers need their packed form")
    return layers, latents, meta


def cmd_bench(args):
    if args.model:
        quantized, _, _ = _load_model(args.model)
        variants = sorted({q.scheme.variant for q in quantized.values()})
        if len(variants) != 1:
            raise CLIError(f"model mixes quantization schemes {variants}")
        shapes = [LayerShape(n, *q.shape, args.out_hw) for n, q in quantized.items()]
        report = profile_layers(shapes, schemes=tuple(variants),
                                sparsity_flags=_on_off(args.sparsity_flags), trials=args.trials,
                                seed=args.seed, quantized=quantized)
    else:
        shapes = parse_shapes(args.shapes) if args.shapes else resnet18_layers()
        report = profile_layers(shapes, schemes=args.schemes.split(","),
                                sparsity_flags=_on_off(args.sparsity_flags),
                                sparsity=args.sparsity, trials=args.trials, seed=args.seed)
    d = report.as_dict()
    d["config"]["command"] = "bench"
    d["config"]["version"] = __version__
    _write(_json(d), args.out)


def cmd_sweep(args):
    shape = tuple(int(v) for v in args.shape.split(","))
    if len(shape) != 4:
        raise CLIError("--shape needs R,S,C,K")
    grid = [float(v) for v in args.grid.split(",")]
    rows = sweep_sparsity(shape, args.schemes.split(","), grid, args.seed,
                          factoring=args.factoring)
    buf = io.StringIO()
    config = {"command": "sweep", "shape": args.shape, "schemes": args.schemes,
              "grid": args.grid, "seed": args.seed, "factoring": args.factoring,
              "version": __version__}
    for k, v in config.items():
        buf.write(f"# {k}={v}\n")
    w = csv.DictWriter(buf, ["scheme", "sparsity", "plan_ops", "naive_ops", "reduction"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "reduction": f"{r['reduction']:.6f}"})
    _write(buf.getvalue(), args.out)


def analyze_layers(layers: dict[str, QuantizedLayer]) -> dict:
    rows = []
    nnz = total = 0
    for name, q in layers.items():
        d = density(q)
        rows.append({
            "name": name,
            "variant": q.scheme.variant,
            "shape": list(q.shape),
            "density": d,
            "unique_2d_filters": unique_2d_filters(q),
            "max_unique_values_per_filter": int(unique_values_per_filter(q).max()),
        })
        nnz += np.count_nonzero(q.values)
        total += q.values.size
    d = nnz / total
    return {
        "layers": rows,
        "density": d,
        "throughput_potential": throughput_potential(d),
        # fraction of dense multiplications that touch a nonzero weight
        "energy_proxy": d,
    }


def cmd_analyze(args):
    layers, latents, meta = _load_model(args.model)
    report = analyze_layers(layers)
    report["config"] = {"command": "analyze", "model": str(args.model), "bins": args.bins,
                        "version": __version__, "model_meta": meta}
    if args.hist_dir and latents:
        from .train.histogram import distribution_report, weight_histogram, write_histogram_csv

        out = Path(args.hist_dir)
        out.mkdir(parents=True, exist_ok=True)
        names = [n for n in latents if n in layers]
        for n in names:
            q = layers[n]
            h = weight_histogram(latents[n], q.region_map, q.delta, args.bins)
            write_histogram_csv(out / f"{n}.csv", h, {"layer": n, "delta": q.delta})
        if names:
            dist = distribution_report([latents[n] for n in names],
                                       [layers[n].region_map for n in names],
                                       [layers[n].delta for n in names], args.bins)
            dist.pop("histogram")
            report["distribution"] = dist
    _write(_json(report), args.out)


def cmd_train(args):
    from .train.data import DatasetMissing
    from .train.trainer import TrainConfig, save_checkpoint, train

    overrides = {
        "model": args.model, "dataset": args.dataset, "data_dir": args.data_dir,
        "scheme": args.scheme, "p": args.p, "delta_coeff": args.delta_coeff,
        "ede": args.ede, "epochs": args.epochs, "batch_size": args.batch_size,
        "lr": args.lr, "seed": args.seed, "out_dir": args.out_dir,
    }
    if args.config:
        cfg = TrainConfig.from_file(args.config, **overrides)
    else:
        cfg = TrainConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    out = Path(cfg.out_dir or "run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    try:
        result = train(cfg, metrics_path=out / "metrics.csv")
    except DatasetMissing as exc:
        raise CLIError(str(exc)) from exc
    save_checkpoint(result, out / "checkpoint")
    last = result.metrics[-1]
    sys.stdout.write(_json({"status": "ok", "out_dir": str(out), "final": last,
                            "config": cfg.as_dict()}))


def cmd_pack(args):
    W = load_tensor(args.weights)
    R, S, C, K = W.shape
    rmap = assign_regions(K, C, None, args.p, args.seed)
    delta = compute_delta(W, args.delta_coeff)
    layer = quantize_signed_binary(W, rmap, delta, args.delta_coeff)
    packed = save_packed(args.out, layer)
    sys.stdout.write(_json({
        "status": "ok", "out": args.out, "dims": packed.dims, "delta": packed.delta,
        "payload_bits": packed.payload_bits, "payload_bytes": len(packed.payload),
        "density": density(layer),
        "config": {"command": "pack", "p": args.p, "seed": args.seed,
                   "delta_coeff": args.delta_coeff},
    }))


def cmd_unpack(args):
    layer = load_packed(args.model)
    save_tensor(args.out, dequantize(layer))
    sys.stdout.write(_json({
        "status": "ok", "out": args.out, "dims": list(layer.shape), "delta": layer.delta,
        "fraction_pos": layer.region_map.fraction_pos, "seed": layer.region_map.seed,
        "density": density(layer),
    }))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="repsparse", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="plan op counts and wall-clock per layer")
    b.add_argument("--model", help=".plum file or checkpoint directory")
    b.add_argument("--out-hw", type=int, default=8, help="output size used with --model")
    b.add_argument("--shapes", help="'R,S,C,K@HW[/stride];...' (default: ResNet-18 layers)")
    b.add_argument("--schemes", default="binary,ternary,signed-binary")
    b.add_argument("--sparsity-flags", default="on,off")
    b.add_argument("--sparsity", type=float, default=0.65)
    b.add_argument("--trials", type=int, default=50)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="-")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="arithmetic reduction against sparsity")
    s.add_argument("--shape", default="3,3,512,512")
    s.add_argument("--schemes", default="binary,ternary,signed-binary")
    s.add_argument("--grid", default=",".join(f"{i / 10:g}" for i in range(11)))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--factoring", choices=("tree", "tile"), default="tree")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="density, throughput potential, filter counts")
    a.add_argument("model", help=".plum file or checkpoint directory")
    a.add_argument("--bins", type=int, default=100)
    a.add_argument("--hist-dir", help="write per-layer histogram CSVs here")
    a.add_argument("--out", default="-")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("train", help="quantization-aware training")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--model")
    t.add_argument("--dataset")
    t.add_argument("--data-dir")
    t.add_argument("--scheme", choices=VARIANTS + ("fp",))
    t.add_argument("--p", type=float)
    t.add_argument("--delta-coeff", type=float)
    t.add_argument("--ede", choices=("on", "off"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("pack", help="quantize RSCK latent weights and bit-pack them")
    p.add_argument("weights", help="tensor container with RSCK float32 weights")
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta-coeff", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    u = sub.add_parser("unpack", help="expand a packed layer to dequantized weights")
    u.add_argument("model")
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_unpack)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, ValueError, OSError, KeyError) as exc:
        msg = {"status": "error", "type": type(exc).__name__, "message": str(exc)}
        sys.stderr.write(json.dumps(msg) + "\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
