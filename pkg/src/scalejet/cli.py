"""Command-line harness.

Subcommands: gen-dataset, train, eval, covariance-check, export, kernel-dump.
All flags are long-form; tabular output is CSV with a header row, reports are
JSON.  Exit codes: 0 success, 1 check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from . import covariance, data, evaluate
from .config import available_presets, build_run_config, load_config_file, preset_path
from .jet import JetSpec, effective_kernel
from .net import CENTRE, MultiNetConfig, NetworkParams, init_params
from .params_io import load_checkpoint, save_checkpoint
from .scalespace import Tensor, disc_gauss_kernel
from .train import pretrain_then_transfer, train_loop


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def _load_config(path_or_preset: str) -> dict:
    if os.path.exists(path_or_preset):
        return load_config_file(path_or_preset)
    preset = preset_path(path_or_preset)
    if os.path.exists(preset):
        return load_config_file(preset)
    raise FileNotFoundError(
        f"no config file {path_or_preset!r}; presets: {', '.join(available_presets())}"
    )


# ---------------------------------------------------------------------------
# gen-dataset


def cmd_gen_dataset(args) -> int:
    root = args.out
    if os.path.exists(root) and os.listdir(root) and not args.force:
        return _fail(f"{root} exists and is not empty (use --force to overwrite)")
    os.makedirs(root, exist_ok=True)
    if not args.toy:
        return _fail("only --toy generation is supported")
    canvas = (args.canvas, args.canvas)
    if args.factors == "default":
        factors = list(data.default_size_factors())
    elif args.factors == "none":
        factors = []
    else:
        factors = [float(tok) for tok in args.factors.split(",")]
    splits: dict[str, dict] = {}
    train_split = data.gen_toy_dataset(
        args.classes, args.per_class, args.base_size, canvas, args.seed
    )
    checksum = data.write_split(root, "train", train_split)
    splits["train"] = {"count": len(train_split.labels), "factor": 1.0, "checksum": checksum}
    for i, f in enumerate(factors):
        test = data.gen_toy_dataset(
            args.classes, args.test_per_class, args.base_size, canvas,
            args.seed + 1, size_factor=f,
        )
        name = f"test_{i}"
        checksum = data.write_split(root, name, test)
        splits[name] = {"count": len(test.labels), "factor": f, "checksum": checksum}
    data.write_manifest(
        root,
        {
            "format_version": 1,
            "name": "toy",
            "generator": {
                "kind": "toy",
                "classes": args.classes,
                "per_class": args.per_class,
                "test_per_class": args.test_per_class,
                "base_size": args.base_size,
                "canvas": list(canvas),
                "seed": args.seed,
            },
            "factor_grid": factors,
            "canvas": list(canvas),
            "splits": splits,
        },
    )
    print(f"wrote {root}: train + {len(factors)} test sets")
    return 0


# ---------------------------------------------------------------------------
# train


def _write_metrics_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "lr", "train_loss", "train_acc", "val_acc"])
        for r in rows:
            writer.writerow(
                [r.epoch, r.step, f"{r.lr:.8g}", f"{r.train_loss:.8g}",
                 f"{r.train_acc:.6g}", f"{r.val_acc:.6g}"]
            )


def cmd_train(args) -> int:
    raw = _load_config(args.config)
    run = build_run_config(raw, seed=args.seed)
    dataset = data.read_split(args.data, "train")
    if run.net.num_classes != int(dataset.labels.max()) + 1:
        return _fail(
            f"config expects {run.net.num_classes} classes, dataset has "
            f"{int(dataset.labels.max()) + 1}"
        )
    t0 = time.time()
    if args.pretrain:
        single, stage1, stage2 = run.pretrain_stage_configs
        params, log = pretrain_then_transfer(dataset, single, run.net, stage1, stage2)
    else:
        params, log = train_loop(dataset, run.net, run.train)
    save_checkpoint(args.out_checkpoint, params, run.net)
    _write_metrics_csv(args.metrics, log)
    print(
        f"trained {len(log)} epochs in {time.time() - t0:.1f}s; "
        f"final train_acc={log[-1].train_acc:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_testsets(root: str) -> dict[float, tuple[np.ndarray, np.ndarray]]:
    manifest = data.read_manifest(root)
    out = {}
    for name, info in manifest["splits"].items():
        if not name.startswith("test"):
            continue
        split = data.read_split(root, name)
        out[float(info["factor"])] = (split.images, split.labels)
    if not out:
        raise FileNotFoundError(f"{root}: manifest lists no test splits")
    return out


def _densified_config(cfg: MultiNetConfig) -> MultiNetConfig:
    """Refine sqrt(2)-spaced channels to 2^(1/4) spacing, adding one boundary
    channel past the coarse end."""
    lam = math.sqrt(cfg.lam)
    sigmas = []
    s = cfg.channel_sigmas[0]
    while s < cfg.channel_sigmas[-1] * lam * 1.0001:
        sigmas.append(s)
        s *= lam
    return MultiNetConfig(tuple(sigmas), cfg.channel, cfg.scale_pooling)


def cmd_eval(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    if args.pooling:
        cfg = MultiNetConfig(cfg.channel_sigmas, cfg.channel, args.pooling)
    if args.densify:
        from .net import densify_channels

        if len(cfg.channel_sigmas) < 2:
            return _fail("--densify needs a multi-channel checkpoint")
        cfg = densify_channels(params, cfg, _densified_config(cfg)).cfg
    testsets = _load_testsets(args.data)
    report = evaluate.run_report(testsets, cfg, params, seed=args.seed)
    out_json = args.out + ".json"
    with open(out_json, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(args.out + "_accuracy.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size_factor", "accuracy"])
        for f in sorted(report.accuracies):
            writer.writerow([f"{f:.8g}", f"{report.accuracies[f]:.6g}"])
    with open(args.out + "_histogram.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        n_ch = report.histogram.bins.shape[1]
        writer.writerow(["size_factor"] + [f"channel_{i}" for i in range(n_ch)])
        for f, row in zip(report.histogram.factors, report.histogram.bins):
            writer.writerow([f"{f:.8g}"] + [f"{v:.8g}" for v in row])
    accs = " ".join(f"{f:.3g}:{a:.3f}" for f, a in sorted(report.accuracies.items()))
    print(f"accuracy per size factor: {accs}")
    print(f"report written to {out_json}")
    return 0


# ---------------------------------------------------------------------------
# covariance-check


def cmd_covariance_check(args) -> int:
    results = covariance.run_all(seed=args.seed)
    rows = []
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        detail = f"  [{r.detail}]" if r.detail else ""
        print(f"{status}  {r.name}: max_error={r.max_error:.6g} tolerance={r.tolerance:g}{detail}")
        rows.append(
            {"name": r.name, "max_error": r.max_error, "tolerance": r.tolerance,
             "passed": r.passed, "detail": r.detail}
        )
    if args.report:
        with open(args.report, "w") as fh:
            json.dump({"schema_version": 1, "seed": args.seed, "sections": rows}, fh, indent=2)
            fh.write("\n")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# export


def _layer_lookup(params: NetworkParams, cfg: MultiNetConfig, name: str):
    channel = cfg.channel
    if name == "first":
        return params.first.weights, channel.jet_spec(1, first_layer=True)
    if name == "final":
        return params.final, channel.jet_spec(channel.num_effective)
    try:
        block_part, layer_part = name.split(".")
        k = int(block_part.removeprefix("block"))
        bp = params.blocks[k - 2]
        layer = {"l1": bp.layer1, "l2": bp.layer2}[layer_part]
    except (ValueError, KeyError, IndexError):
        raise KeyError(
            f"unknown layer {name!r} (use first, final or blockK.l1/blockK.l2)"
        ) from None
    return layer.weights, channel.jet_spec(k)


def cmd_export(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    if args.what == "filters":
        weights, spec = _layer_lookup(params, cfg, args.layer)
        from .jet import DepthSepWeights

        if isinstance(weights, DepthSepWeights):
            return _fail("filter export for depthwise layers is not supported")
        kern = effective_kernel(weights, spec, args.c_out, args.c_in)
        base = f"{args.out}_filter_{args.layer}_out{args.c_out}_in{args.c_in}"
        data.write_graymap(base + ".pgm", kern.data[:, :, 0])
        _write_map_csv(base + ".csv", kern.data[:, :, 0])
        print(f"wrote {base}.pgm (+sidecar) and {base}.csv")
        return 0
    # activation maps: final-layer class map of chosen scale channels
    img = _read_image(args.image)
    sigmas = (
        [float(tok) for tok in args.channel_sigmas.split(",")]
        if args.channel_sigmas
        else list(cfg.channel_sigmas)
    )
    from .net import scale_channel_forward

    for s in sigmas:
        ccfg = cfg.channel.with_sigma0(s)
        maps = scale_channel_forward(Tensor(img), ccfg, params)
        if maps.data.shape[:2] != img.shape[:2]:
            raise AssertionError("activation map size differs from the input")
        cls = args.class_index
        base = f"{args.out}_activation_sigma{s:g}_class{cls}"
        data.write_graymap(base + ".pgm", maps.data[:, :, cls])
        _write_map_csv(base + ".csv", maps.data[:, :, cls])
        print(f"wrote {base}.pgm (+sidecar) and {base}.csv")
    return 0


def _read_image(path: str) -> np.ndarray:
    if path.endswith(".pgm"):
        return data.read_graymap(path)[:, :, None]
    return data.read_tensor(path).data


def _write_map_csv(path: str, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "value"])
        for i in range(values.shape[0]):
            for j in range(values.shape[1]):
                writer.writerow([i, j, f"{values[i, j]:.12g}"])


# ---------------------------------------------------------------------------
# kernel-dump


def cmd_kernel_dump(args) -> int:
    kern = disc_gauss_kernel(args.sigma, args.epsilon)
    rows = [(n, kern.tap(n)) for n in range(-kern.radius, kern.radius + 1)]
    target = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(target)
        writer.writerow(["n", "tap"])
        for n, tap in rows:
            writer.writerow([n, f"{tap:.17g}"])
    finally:
        if args.out:
            target.close()
            print(f"wrote {args.out} (radius {kern.radius}, tail mass {kern.tail_mass:.3g})")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scalejet",
        description="Scale-covariant Gaussian-derivative residual network harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", help="generate a dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--toy", action="store_true", help="synthetic shape classes")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--test-per-class", type=int, default=40)
    g.add_argument("--base-size", type=float, default=7.0)
    g.add_argument("--canvas", type=int, default=41)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--factors", default="default",
                   help="'default' (9 factors), 'none', or a comma list")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_dataset)

    t = sub.add_parser("train", help="train from a config file or preset name")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--metrics", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--pretrain", action="store_true",
                   help="two-stage schedule: single channel then multi-channel")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on rescaled test sets")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="output path prefix")
    e.add_argument("--pooling", choices=["max", "logsumexp", "average"], default=None)
    e.add_argument("--densify", action="store_true",
                   help="refine channel spacing from sqrt(2) to 2^(1/4)")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("covariance-check", help="run the covariance test battery")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--report", default=None, help="also write a JSON report")
    c.set_defaults(func=cmd_covariance_check)

    x = sub.add_parser("export", help="export effective filters or activation maps")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--what", choices=["filters", "activations"], required=True)
    x.add_argument("--out", required=True, help="output path prefix")
    x.add_argument("--layer", default="first", help="first, final, or blockK.l1/l2")
    x.add_argument("--c-out", type=int, default=0)
    x.add_argument("--c-in", type=int, default=0)
    x.add_argument("--image", default=None, help="input image (.gdtn or .pgm)")
    x.add_argument("--channel-sigmas", default=None, help="comma list of sigma_0")
    x.add_argument("--class-index", type=int, default=0)
    x.set_defaults(func=cmd_export)

    k = sub.add_parser("kernel-dump", help="dump discrete kernel taps as CSV")
    k.add_argument("--sigma", type=float, required=True)
    k.add_argument("--epsilon", type=float, default=0.005)
    k.add_argument("--out", default=None)
    k.set_defaults(func=cmd_kernel_dump)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
