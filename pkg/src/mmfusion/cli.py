"""Command-line front end: simulate, train, eval, infer, inspect, gradcheck.

Every command that takes ``--out`` writes ``run.json`` there: the
resolved configuration and seed, enough to reproduce the run exactly.
Outputs are byte-identical across identical invocations, with wall-clock
measurements quarantined in ``timing.txt``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .data import (
    DataError,
    load_checkpoint,
    read_manifest,
    read_sample,
    restore_model,
    split,
    validate_files,
    write_manifest,
)
from .engine import EngineError, RngStream, Tape, Tensor, tensor_sum
from .evaluate import EvalError, binarize, emit_overlay, evaluate_dataset
from .model import ModelConfig, forward, init_params
from .preprocess import preprocess_depth, preprocess_radar
from .simulate import DatasetSpec, SimulationError, make_dataset
from .train import TrainConfig, TrainError, save_log, train


class ConfigError(Exception):
    pass


def _pair(cast):
    def parse(text):
        parts = text.split(",")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
        return tuple(cast(p) for p in parts)

    return parse


def _triple(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(float(p) for p in parts)


def _resolution(text):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return tuple(int(p) for p in parts)


def build_parser():
    p = argparse.ArgumentParser(prog="mmfusion",
                                description="radar + depth concealed-metal pipeline")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--config", help="JSON file of scene-distribution keys")
    sim.add_argument("--count", type=int)
    sim.add_argument("--resolution", type=_resolution, metavar="HxW")
    sim.add_argument("--fov-deg", type=_pair(float))
    sim.add_argument("--positive-fraction", type=float)
    sim.add_argument("--regime-mix", type=_triple)
    sim.add_argument("--range-m", type=_pair(float))
    sim.add_argument("--azimuth-deg", type=_pair(float))
    sim.add_argument("--min-range-gap-m", type=float)
    sim.add_argument("--min-azimuth-gap-deg", type=float)
    sim.add_argument("--noise-sigma", type=float)
    sim.add_argument("--hole-fraction", type=float)
    sim.add_argument("--background-m", type=float)
    sim.add_argument("--metal-reflectivity", type=float)
    sim.add_argument("--facing-jitter-deg", type=float)
    sim.add_argument("--split", type=_triple, metavar="TR,VA,TE",
                     help="assign train/val/test splits after generation")

    tr = sub.add_parser("train", help="train a model on a dataset directory")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--config", help="JSON file of training keys")
    tr.add_argument("--max-epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--initial-lr", type=float)
    tr.add_argument("--min-lr", type=float)
    tr.add_argument("--val-fraction", type=float)
    tr.add_argument("--checkpoint-every", type=int)
    tr.add_argument("--plateau-factor", type=float)
    tr.add_argument("--plateau-patience", type=int)
    tr.add_argument("--plateau-min-delta", type=float)
    tr.add_argument("--early-stop-window", type=int)
    tr.add_argument("--modality", choices=("fused", "radar", "depth"))
    tr.add_argument("--preset", choices=("spad", "wide", "tiny"), default="spad")
    tr.add_argument("--width-divisor", type=int)
    tr.add_argument("--dropout", type=float)
    tr.add_argument("--resume", help="checkpoint to continue from")

    ev = sub.add_parser("eval", help="score a checkpoint on a split")
    ev.add_argument("--data", required=True)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--regime", choices=("1P", "2P1", "2P2"))
    ev.add_argument("--threshold", type=float, default=0.5)
    ev.add_argument("--radius", type=float, default=5.0)
    ev.add_argument("--modality", choices=("fused", "radar", "depth"), default="fused")
    ev.add_argument("--batch-size", type=int, default=64)
    ev.add_argument("--overlays", action="store_true")
    ev.add_argument("--no-decoys", action="store_true")

    inf = sub.add_parser("infer", help="probability mask for one sample")
    inf.add_argument("--data", required=True)
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--out", required=True)
    inf.add_argument("--id", required=True, dest="sample_id")
    inf.add_argument("--threshold", type=float, default=0.5)

    ins = sub.add_parser("inspect", help="print the model's shape registry")
    ins.add_argument("--ckpt")
    ins.add_argument("--preset", choices=("spad", "wide", "tiny"), default="spad")
    ins.add_argument("--width-divisor", type=int)
    ins.add_argument("--resolution", type=_resolution, metavar="HxW")
    ins.add_argument("--out")

    gc = sub.add_parser("gradcheck", help="finite-difference self-check")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out")
    return p


def _load_json(path):
    try:
        with open(path, "rb") as fh:
            return json.loads(fh.read().decode())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None


def _merge_config(cls, file_doc, args, fields):
    """File keys first, then flag overrides; returns a validated instance."""
    doc = dict(file_doc)
    for name in fields:
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
    known = {f.name for f in dataclasses.fields(cls)}
    stray = set(doc) - known
    if stray:
        raise ConfigError(f"unknown {cls.__name__} keys {sorted(stray)}")
    try:
        return cls(**doc)
    except (SimulationError, TrainError, EngineError) as e:
        raise ConfigError(str(e)) from None


def _write_run_manifest(out_dir, command, seed, resolved, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    doc = {"command": command, "seed": seed, "version": __version__,
           "config": resolved}
    if extra:
        doc.update(extra)
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _dataset(path):
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"{path}: no manifest.json; not a dataset directory")
    manifest = read_manifest(manifest_path)
    validate_files(manifest, path)
    return manifest


def cmd_simulate(args):
    file_doc = _load_json(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else int(file_doc.pop("seed", 0))
    file_doc.pop("seed", None)
    fields = ("count", "resolution", "fov_deg", "positive_fraction", "regime_mix",
              "range_m", "azimuth_deg", "min_range_gap_m", "min_azimuth_gap_deg",
              "noise_sigma", "hole_fraction", "background_m", "metal_reflectivity",
              "facing_jitter_deg")
    if "count" not in file_doc and args.count is None:
        raise ConfigError("simulate needs --count or a config file with a count")
    spec = _merge_config(DatasetSpec, file_doc, args, fields)
    _write_run_manifest(args.out, "simulate", seed,
                        dataclasses.asdict(spec),
                        {"split": list(args.split) if args.split else None})
    manifest = make_dataset(spec, seed=seed, out_dir=args.out)
    if args.split is not None:
        manifest = split(manifest, args.split, seed=seed)
        write_manifest(manifest, os.path.join(args.out, "manifest.json"))
    print(f"wrote {len(manifest.samples)} samples to {args.out}")
    return 0


def _model_config(preset, manifest_resolution, width_divisor, dropout):
    base = {"spad": ModelConfig.spad, "wide": ModelConfig.wide,
            "tiny": ModelConfig.tiny}[preset]()
    changes = {"depth_resolution": tuple(manifest_resolution)}
    if width_divisor is not None:
        changes["width_divisor"] = width_divisor
    if dropout is not None:
        changes["dropout_rate"] = dropout
    try:
        return dataclasses.replace(base, **changes)
    except EngineError as e:
        raise ConfigError(str(e)) from None


def cmd_train(args):
    manifest = _dataset(args.data)
    file_doc = _load_json(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else int(file_doc.get("seed", 0))
    fields = ("max_epochs", "batch_size", "initial_lr", "min_lr", "val_fraction",
              "checkpoint_every", "plateau_factor", "plateau_patience",
              "plateau_min_delta", "early_stop_window", "modality")
    file_doc.setdefault("checkpoint_dir", os.path.join(args.out, "checkpoints"))
    file_doc["seed"] = seed
    config = _merge_config(TrainConfig, file_doc, args, fields)

    model_config = _model_config(args.preset, manifest.resolution,
                                 args.width_divisor, args.dropout)
    model = init_params(model_config, RngStream(seed))
    _write_run_manifest(args.out, "train", seed, {
        "train": dataclasses.asdict(config),
        "model": dataclasses.asdict(model_config),
        "data": args.data,
        "resume": args.resume,
    })
    try:
        model, log = train(model, manifest, args.data, config, resume=args.resume)
    except TrainError as e:
        if "empty" in str(e):
            raise DataError(str(e)) from None
        raise
    save_log(log, os.path.join(args.out, "train.log"))
    with open(os.path.join(args.out, "timing.txt"), "w") as fh:
        for line in log.timing_lines():
            fh.write(line + "\n")
    if log.epochs:
        print(f"trained {len(log.epochs)} epochs; "
              f"final val loss {log.epoch_val_loss[-1]:.6f}")
    if log.checkpoints:
        print(f"checkpoint: {log.checkpoints[-1]}")
    return 0


def _restore_for(manifest, ckpt_path):
    ckpt = load_checkpoint(ckpt_path)
    if tuple(ckpt.config.depth_resolution) != tuple(manifest.resolution):
        raise DataError(
            f"checkpoint expects depth resolution {ckpt.config.depth_resolution}, "
            f"dataset provides {tuple(manifest.resolution)}"
        )
    return restore_model(ckpt), ckpt


def cmd_eval(args):
    manifest = _dataset(args.data)
    model, ckpt = _restore_for(manifest, args.ckpt)
    if args.regime is not None:
        ids = [i for i in manifest.by_split(args.split)
               if manifest.record(i).regime == args.regime]
        if not ids:
            raise DataError(f"split {args.split!r} has no {args.regime} samples")
        manifest = dataclasses.replace(
            manifest, splits=dict(manifest.splits, **{args.split: ids}))
    rep, decisions = evaluate_dataset(
        model, manifest, args.data, args.split, threshold=args.threshold,
        radius=args.radius, modality=args.modality, batch_size=args.batch_size,
        use_decoys=not args.no_decoys)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(rep.to_text())
    with open(os.path.join(args.out, "decisions.txt"), "w") as fh:
        for d in decisions:
            dist = "n/a" if d.distance is None else f"{d.distance:.4f}"
            fh.write(f"{d.frame_id} outcome={d.outcome} predicted={int(d.predicted)} "
                     f"actual={int(d.actual)} distance={dist}\n")
    if args.overlays:
        overlay_dir = os.path.join(args.out, "overlays")
        os.makedirs(overlay_dir, exist_ok=True)
        for frame_id in manifest.by_split(args.split):
            rec = manifest.record(frame_id)
            raw = read_sample(os.path.join(args.data, rec.path))
            radar = preprocess_radar(raw.radar).samples[None]
            depth = preprocess_depth(raw.depth).values[None, :, :, None]
            if args.modality == "radar":
                depth = np.zeros_like(depth)
            elif args.modality == "depth":
                radar = np.zeros_like(radar)
            prob = forward(model, radar, depth, mode="infer").data[0]
            emit_overlay(raw.depth, binarize(prob, args.threshold), raw.mask,
                         os.path.join(overlay_dir, f"{frame_id}.ppm"))
    _write_run_manifest(args.out, "eval", ckpt.meta.get("seed", 0), {
        "data": args.data, "ckpt": args.ckpt, "split": args.split,
        "regime": args.regime, "threshold": args.threshold, "radius": args.radius,
        "modality": args.modality, "overlays": bool(args.overlays),
        "decoys": not args.no_decoys,
    })
    sys.stdout.write(rep.to_text())
    return 0


def cmd_infer(args):
    manifest = _dataset(args.data)
    model, ckpt = _restore_for(manifest, args.ckpt)
    rec = manifest.record(args.sample_id)
    raw = read_sample(os.path.join(args.data, rec.path))
    radar = preprocess_radar(raw.radar).samples[None]
    depth = preprocess_depth(raw.depth).values[None, :, :, None]
    prob = forward(model, radar, depth, mode="infer").data[0, :, :, 0]
    os.makedirs(args.out, exist_ok=True)
    np.save(os.path.join(args.out, f"{args.sample_id}-prob.npy"),
            prob.astype(np.float32))
    emit_overlay(raw.depth, binarize(prob, args.threshold), raw.mask,
                 os.path.join(args.out, f"{args.sample_id}-overlay.ppm"))
    _write_run_manifest(args.out, "infer", ckpt.meta.get("seed", 0), {
        "data": args.data, "ckpt": args.ckpt, "id": args.sample_id,
        "threshold": args.threshold,
    })
    print(f"wrote {args.sample_id}-prob.npy and {args.sample_id}-overlay.ppm")
    return 0


def cmd_inspect(args):
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        config = ckpt.config
        header = [f"checkpoint: {args.ckpt}",
                  f"epoch: {ckpt.meta.get('epoch', 'n/a')}",
                  f"optimizer state: {'yes' if ckpt.adam else 'no'}"]
    else:
        resolution = args.resolution
        base = {"spad": ModelConfig.spad, "wide": ModelConfig.wide,
                "tiny": ModelConfig.tiny}[args.preset]()
        changes = {}
        if resolution is not None:
            changes["depth_resolution"] = resolution
        if args.width_divisor is not None:
            changes["width_divisor"] = args.width_divisor
        try:
            config = dataclasses.replace(base, **changes)
        except EngineError as e:
            raise ConfigError(str(e)) from None
        header = [f"preset: {args.preset}"]
    lines = list(header)
    lines.append(f"config: {dataclasses.asdict(config)}")
    total = 0
    for name, shape in config.param_shapes().items():
        size = int(np.prod(shape))
        total += size
        lines.append(f"{name:24s} {str(shape):22s} {size:>9d}")
    lines.append(f"{'total':24s} {'':22s} {total:>9d}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "inspect.txt"), "w") as fh:
            fh.write(text)
        _write_run_manifest(args.out, "inspect", 0,
                            {"ckpt": args.ckpt, "preset": args.preset})
    return 0


def _fd_max_rel(build, arrays, eps=1e-5):
    """Analytic grads vs full-coordinate central differences."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        tape.backward(build(leaves))
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.data)
                for lf in leaves]

    def value():
        return float(build([Tensor(a) for a in arrays]).data)

    worst = 0.0
    for a, got in zip(arrays, analytic):
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            keep = a[idx]
            a[idx] = keep + eps
            up = value()
            a[idx] = keep - eps
            down = value()
            a[idx] = keep
            num = (up - down) / (2.0 * eps)
            rel = abs(num - got[idx]) / max(abs(num), abs(got[idx]), 1.0)
            worst = max(worst, rel)
    return worst


def model_fd_error(seed=0, tol=1e-4, coords_per_tensor=2, eps=1e-5):
    """Sampled finite differences through the reduced-width model.

    A probe whose +/-eps interval straddles a ReLU kink fails the central
    difference at the nominal step; those re-probe at eps/1000, which a
    genuinely wrong gradient still fails.
    """
    from .engine import bce_loss

    config = dataclasses.replace(ModelConfig.tiny(), dropout_rate=0.0)
    model = init_params(config, RngStream(seed), dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    radar = rng.standard_normal((2, 1, 256, 4))
    h, w = config.depth_resolution
    depth = rng.standard_normal((2, h, w, 1))
    target = Tensor((rng.uniform(size=(2, h, w, 1)) > 0.5).astype(np.float64))

    def loss():
        return bce_loss(forward(model, radar, depth, mode="train",
                                update_stats=False), target)

    with Tape() as tape:
        tape.backward(loss())
    grads = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
             for k, t in model.params.items()}
    model.zero_grads()

    def probe(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(loss().data)
        flat[i] = orig - step
        fm = float(loss().data)
        flat[i] = orig
        return (fp - fm) / (2.0 * step)

    coord_rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for name, t in model.params.items():
        flat = t.data.reshape(-1)
        picks = coord_rng.choice(flat.size, size=min(coords_per_tensor, flat.size),
                                 replace=False)
        for i in picks:
            ana = grads[name].reshape(-1)[i]
            num = probe(flat, i, eps)
            err = abs(ana - num) / max(abs(ana), abs(num), 1.0)
            if err >= tol:
                num = probe(flat, i, eps / 1000)
                err = abs(ana - num) / max(abs(ana), abs(num), 1.0)
            worst = max(worst, err)
    return worst


def operator_fd_errors(seed=0):
    """Worst relative FD error per operator: [(name, max_rel)], full-coordinate."""
    from .engine import (BatchNormState, batch_norm, bce_loss, conv1d, conv2d,
                         conv_lstm1d, depthwise_conv2d, dropout, relu, sigmoid,
                         tanh, upsample_nearest)

    rng = np.random.default_rng(seed)

    def arr(*shape):
        return rng.standard_normal(shape)

    w1 = rng.standard_normal((2, 3, 4, 2))
    w2 = rng.standard_normal((2, 2, 2, 3))
    w3 = rng.standard_normal((1, 4, 2))
    w4 = rng.standard_normal((2, 2, 4, 2))
    bn_state = BatchNormState(2, dtype=np.float64)
    bce_target = Tensor((rng.standard_normal((2, 3, 4, 2)) > 0).astype(np.float64))

    def wsum(t, w):
        return tensor_sum(t * Tensor(w))

    checks = [
        ("add", lambda ts: wsum(ts[0] + ts[1], w1), [arr(2, 3, 4, 2), arr(4, 2)]),
        ("mul", lambda ts: wsum(ts[0] * ts[1], w1), [arr(2, 3, 4, 2), arr(2, 3, 4, 2)]),
        ("relu", lambda ts: wsum(relu(ts[0]), w1), [arr(2, 3, 4, 2) + 0.2]),
        ("sigmoid", lambda ts: wsum(sigmoid(ts[0]), w1), [arr(2, 3, 4, 2)]),
        ("tanh", lambda ts: wsum(tanh(ts[0]), w1), [arr(2, 3, 4, 2)]),
        ("upsample", lambda ts: wsum(upsample_nearest(ts[0], (2, 2)), w4),
         [arr(2, 1, 2, 2)]),
        ("conv2d", lambda ts: wsum(conv2d(ts[0], ts[1], stride=(2, 2)), w2),
         [arr(2, 4, 4, 2), arr(3, 3, 2, 3)]),
        ("depthwise", lambda ts: wsum(depthwise_conv2d(ts[0], ts[1]), w1),
         [arr(2, 3, 4, 2), arr(3, 3, 2)]),
        ("conv1d", lambda ts: wsum(conv1d(ts[0], ts[1], stride=2), w3),
         [arr(1, 8, 3), arr(3, 3, 2)]),
        ("conv_lstm1d", lambda ts: wsum(conv_lstm1d(ts[0], ts[1], ts[2], ts[3],
                                                    stride=2), w3),
         [arr(1, 2, 8, 2), arr(3, 2, 8), arr(3, 2, 8), 0.1 * arr(8)]),
        ("batch_norm", lambda ts: wsum(batch_norm(ts[0], ts[1], ts[2], bn_state,
                                                  mode="train", update_stats=False), w1),
         [arr(2, 3, 4, 2), arr(2), arr(2)]),
        ("dropout", lambda ts: wsum(dropout(ts[0], 0.3, mode="train",
                                            rng=RngStream(7)), w1),
         [arr(2, 3, 4, 2)]),
        ("bce", lambda ts: bce_loss(sigmoid(ts[0]), bce_target),
         [arr(2, 3, 4, 2)]),
    ]
    return [(name, _fd_max_rel(build, arrays)) for name, build, arrays in checks]


def cmd_gradcheck(args):
    tol = 1e-4
    lines = []
    failed = False
    for name, worst in operator_fd_errors(args.seed):
        ok = worst < tol
        failed = failed or not ok
        lines.append(f"{name:12s} {'PASS' if ok else 'FAIL'} max_rel={worst:.2e}")
    worst = model_fd_error(args.seed, tol)
    ok = worst < tol
    failed = failed or not ok
    lines.append(f"{'fused_model':12s} {'PASS' if ok else 'FAIL'} max_rel={worst:.2e}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.txt"), "w") as fh:
            fh.write(text)
        _write_run_manifest(args.out, "gradcheck", args.seed, {"tolerance": tol})
    if failed:
        raise EngineError("gradient check failed; see listing above")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "inspect": cmd_inspect,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, EvalError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (EngineError, TrainError, SimulationError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
