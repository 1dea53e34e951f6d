"""Command-line entry point.

Subcommands: train, eval, predict, count, bench, analyze, preset.
Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure.

Run configs are strict JSON documents (unknown keys are rejected); use
`dwrseg preset desk` to emit a fully populated starting point.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, data, network, training
from .data import IGNORE_LABEL, ShapesSpec
from .engine import FormatError, NumericError, ShapeError
from .training import AugmentConfig, OhemConfig, TrainConfig


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass
class DataSection:
    kind: str = "shapes"                 # "shapes" | "manifest"
    dir: str | None = None               # manifest only
    canvas: tuple[int, int] = (64, 64)
    shapes_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (12, 28)
    noise: float = 0.04
    seed: int = 7
    train_count: int = 256
    val_count: int = 64


@dataclass
class RunConfig:
    variant: str = "tiny"
    num_classes: int = 4
    seed: int = 0
    out_dir: str = "runs/out"
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(iters=2000, batch_size=4))
    augment: AugmentConfig | None = None


def _take(d: dict, allowed: dict, where: str) -> dict:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    out = dict(allowed)
    out.update(d)
    return out


def _pair(v, where):
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ConfigError(f"{where} must be a 2-element list, got {v!r}")
    return tuple(v)


def parse_run_config(doc: dict) -> RunConfig:
    top = _take(doc, {"variant": "tiny", "num_classes": 4, "seed": 0,
                      "out_dir": "runs/out", "data": {}, "train": {}, "ohem": {},
                      "augment": None}, "config")
    if top["variant"] not in network.VARIANTS:
        raise ConfigError(f"variant must be one of {sorted(network.VARIANTS)}")

    d = _take(top["data"], {"kind": "shapes", "dir": None, "canvas": [64, 64],
                            "shapes_per_image": [1, 3], "size_range": [12, 28],
                            "noise": 0.04, "seed": 7, "train_count": 256,
                            "val_count": 64}, "config.data")
    if d["kind"] not in ("shapes", "manifest"):
        raise ConfigError("config.data.kind must be 'shapes' or 'manifest'")
    if d["kind"] == "manifest" and not d["dir"]:
        raise ConfigError("config.data.dir is required for manifest datasets")
    data_sec = DataSection(kind=d["kind"], dir=d["dir"],
                           canvas=_pair(d["canvas"], "config.data.canvas"),
                           shapes_per_image=_pair(d["shapes_per_image"],
                                                  "config.data.shapes_per_image"),
                           size_range=_pair(d["size_range"], "config.data.size_range"),
                           noise=float(d["noise"]), seed=int(d["seed"]),
                           train_count=int(d["train_count"]), val_count=int(d["val_count"]))

    t = _take(top["train"], {"iters": 2000, "batch": 4, "lr": 0.02, "momentum": 0.9,
                             "weight_decay": 0.0005, "poly_power": 0.9,
                             "log_every": 50, "eval_every": 0}, "config.train")
    o = _take(top["ohem"], {"prob_threshold": 0.7, "min_kept_fraction": 1 / 16,
                            "ignore_label": IGNORE_LABEL}, "config.ohem")
    try:
        ohem = OhemConfig(prob_threshold=float(o["prob_threshold"]),
                          min_kept_fraction=float(o["min_kept_fraction"]),
                          ignore_label=int(o["ignore_label"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    aug = None
    if top["augment"] is not None:
        a = _take(top["augment"], {"scale_range": [1.0, 1.0],
                                   "crop": list(data_sec.canvas), "hflip_prob": 0.5,
                                   "brightness": 0.0, "contrast": 0.0,
                                   "saturation": 0.0}, "config.augment")
        try:
            aug = AugmentConfig(scale_range=tuple(map(float, _pair(a["scale_range"],
                                                                   "scale_range"))),
                                crop=tuple(map(int, _pair(a["crop"], "crop"))),
                                hflip_prob=float(a["hflip_prob"]),
                                brightness=float(a["brightness"]),
                                contrast=float(a["contrast"]),
                                saturation=float(a["saturation"]),
                                ignore_label=ohem.ignore_label)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    train_cfg = TrainConfig(iters=int(t["iters"]), batch_size=int(t["batch"]),
                            seed=int(top["seed"]), lr_base=float(t["lr"]),
                            momentum=float(t["momentum"]),
                            weight_decay=float(t["weight_decay"]),
                            poly_power=float(t["poly_power"]), ohem=ohem,
                            augment=aug, log_every=int(t["log_every"]),
                            eval_every=int(t["eval_every"]))
    return RunConfig(variant=top["variant"], num_classes=int(top["num_classes"]),
                     seed=int(top["seed"]), out_dir=str(top["out_dir"]),
                     data=data_sec, train=train_cfg, augment=aug)


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return parse_run_config(doc)


def _load_datasets(cfg: RunConfig):
    if cfg.data.kind == "manifest":
        manifest = data.dataset_manifest(cfg.data.dir)
        if not manifest.ok:
            raise ConfigError(
                f"unpaired files in {cfg.data.dir}: "
                f"images={[str(p) for p in manifest.unpaired_images]} "
                f"masks={[str(p) for p in manifest.unpaired_masks]}")
        samples = data.load_manifest_samples(manifest)
        split = max(1, int(0.8 * len(samples)))
        return samples[:split], samples[split:] or samples[:1]
    spec = ShapesSpec(canvas=cfg.data.canvas, num_classes=cfg.num_classes,
                      shapes_per_image=cfg.data.shapes_per_image,
                      size_range=cfg.data.size_range, noise=cfg.data.noise,
                      seed=cfg.data.seed)
    train = data.make_dataset(spec, cfg.data.train_count, start=0)
    val = data.make_dataset(spec, cfg.data.val_count, start=cfg.data.train_count)
    return train, val


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if args.iters is not None:
        cfg.train.iters = args.iters
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    net_cfg = network.preset(cfg.variant, num_classes=cfg.num_classes)
    params = network.build(net_cfg, rng_seed=cfg.seed)
    train_set, val_set = _load_datasets(cfg)

    metrics_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "checkpoint.dwck"
    if cfg.train.iters > 0:
        training.train_loop(params, net_cfg, train_set, cfg.train,
                            val_dataset=val_set, log_path=metrics_path)
    else:
        metrics_path.write_text("", encoding="utf-8")
    network.save_checkpoint(params, net_cfg, ckpt_path)
    report = training.evaluate(params, net_cfg, val_set, cfg.train.ohem.ignore_label)
    (out_dir / "eval.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(json.dumps({"checkpoint": str(ckpt_path), "metrics": str(metrics_path),
                      "eval": str(out_dir / "eval.json"), "miou": report["miou"]}))
    return 0


def cmd_eval(args) -> int:
    params, net_cfg = network.load_checkpoint(args.checkpoint)
    if args.data:
        manifest = data.dataset_manifest(args.data)
        if not manifest.pairs:
            raise ConfigError(f"no image/mask pairs found in {args.data}")
        samples = data.load_manifest_samples(manifest)
    else:
        cfg = load_run_config(args.config)
        _, samples = _load_datasets(cfg)
    report = training.evaluate(params, net_cfg, samples)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return 0


def _pad_to_32(image: np.ndarray):
    _, _, h, w = image.shape
    ph = (32 - h % 32) % 32
    pw = (32 - w % 32) % 32
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return image, h, w


def cmd_predict(args) -> int:
    params, net_cfg = network.load_checkpoint(args.checkpoint)
    image = data.read_ppm(args.image)
    padded, h, w = _pad_to_32(image)
    logits, _ = network.infer(params, net_cfg, padded, mode="eval")
    pred = logits.argmax(axis=1)[0, :h, :w].astype(np.int32)
    data.write_pgm(args.out, pred)
    print(json.dumps({"out": str(args.out), "height": h, "width": w,
                      "classes_present": sorted(int(c) for c in np.unique(pred))}))
    return 0


def cmd_count(args) -> int:
    cfg = network.preset(args.variant, num_classes=args.classes)
    p_total, p_items = network.count_params(cfg)
    m_total, m_items = network.count_macs(cfg, args.height, args.width)
    result = {
        "variant": args.variant,
        "num_classes": args.classes,
        "params": p_total,
        "macs": m_total,
        "mac_input": [3, args.height, args.width],
        "param_breakdown": network.breakdown_by_group(p_items),
        "mac_breakdown": network.breakdown_by_group(m_items),
        "param_layers": [{"name": n, "count": c} for n, c in p_items],
    }
    p_target = network.PARAM_TARGETS.get(args.variant)
    m_target = network.MAC_TARGETS.get(args.variant)
    if p_target:
        result["param_target"] = p_target
        result["param_deviation_pct"] = 100.0 * (p_total - p_target) / p_target
    if m_target and (args.height, args.width) == (512, 1024):
        result["mac_target"] = m_target
        result["mac_deviation_pct"] = 100.0 * (m_total - m_target) / m_target
    if args.json:
        print(json.dumps(result, indent=2))
    else:
        print(network.format_count_report(
            f"parameters: {args.variant}", p_total, p_items, p_target))
        print()
        print(network.format_count_report(
            f"MACs: {args.variant} at 3x{args.height}x{args.width}", m_total,
            [(n, c) for n, c in m_items],
            m_target if (args.height, args.width) == (512, 1024) else None))
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2), encoding="utf-8")
    return 0


def cmd_bench(args) -> int:
    cfg = network.preset(args.variant, num_classes=args.classes)
    params = network.build(cfg, rng_seed=args.seed)
    stats = network.benchmark_forward(params, cfg, (1, 3, args.height, args.width),
                                      warmup=args.warmup, iters=args.iters)
    stats["variant"] = args.variant
    print(json.dumps(stats, indent=2))
    return 0


def cmd_analyze(args) -> int:
    if args.what == "rf":
        cfg = network.preset(args.variant, num_classes=args.classes)
        report = analysis.network_rf_report(cfg)
        if args.json:
            print(json.dumps(report, indent=2))
        else:
            print(f"theoretical receptive field: {args.variant}")
            for row in report["trace"]:
                print(f"  {row['layer']:<24s} rf={row['rf']:>6d} jump={row['jump']}")
            for block, branches in report["branches"].items():
                per = ", ".join(f"{k}: rf={v}" for k, v in branches.items())
                print(f"  {block:<24s} {per}")
        if args.out:
            Path(args.out).write_text(json.dumps(report, indent=2), encoding="utf-8")
        return 0

    if args.what == "erf":
        params, net_cfg = network.load_checkpoint(args.checkpoint)
        if args.image:
            image = data.read_ppm(args.image)
        else:
            spec = ShapesSpec(num_classes=net_cfg.num_classes, seed=args.seed)
            image = data.generate(spec, 0).image
        image, _, _ = _pad_to_32(image)
        _, _, h, w = image.shape
        tap_h, tap_w = h // 32, w // 32
        cy = args.cy if args.cy is not None else tap_h // 2
        cx = args.cx if args.cx is not None else tap_w // 2
        heat = analysis.erf_map(params, net_cfg, image, (cy, cx), stage=args.stage)
        out = Path(args.out or "erf.nt")
        from .engine import write_nt
        write_nt(out, heat.astype(np.float32))
        pgm = out.with_suffix(".pgm")
        peak = float(heat.max()) or 1.0
        data.write_pgm(pgm, np.clip(np.rint(255 * heat / peak), 0, 255).astype(np.int32))
        nz = np.argwhere(heat > 0)
        bbox = ([int(v) for v in nz.min(axis=0)] + [int(v) for v in nz.max(axis=0)]
                if nz.size else [])
        print(json.dumps({"out": str(out), "pgm": str(pgm), "stage": args.stage,
                          "center": [cy, cx], "support_bbox": bbox}))
        return 0

    if args.what == "weights":
        params, net_cfg = network.load_checkpoint(args.checkpoint)
        stats = analysis.branch_weight_stats(params, net_cfg, bins=args.bins)
        doc = [row for s in stats for row in s.to_json()]
        text = json.dumps(doc, indent=2)
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        print(text)
        return 0

    # heatmaps
    params, net_cfg = network.load_checkpoint(args.checkpoint)
    if args.image:
        image = data.read_ppm(args.image)
    else:
        spec = ShapesSpec(num_classes=net_cfg.num_classes, seed=args.seed)
        image = data.generate(spec, 0).image
    image, _, _ = _pad_to_32(image)
    result = analysis.dump_feature_heatmaps(params, net_cfg, image, args.block,
                                            args.out or "heatmaps")
    print(json.dumps({"files": result["files"]}))
    return 0


DESK_PRESET = {
    "variant": "tiny",
    "num_classes": 4,
    "seed": 0,
    "out_dir": "runs/tiny",
    "data": {"kind": "shapes", "canvas": [64, 64], "shapes_per_image": [1, 3],
             "size_range": [12, 28], "noise": 0.04, "seed": 7,
             "train_count": 256, "val_count": 64},
    "train": {"iters": 2000, "batch": 4, "lr": 0.02, "momentum": 0.9,
              "weight_decay": 0.0005, "poly_power": 0.9, "log_every": 50,
              "eval_every": 0},
    "ohem": {"prob_threshold": 0.7, "min_kept_fraction": 0.0625, "ignore_label": 255},
    "augment": {"scale_range": [0.75, 1.25], "crop": [64, 64], "hflip_prob": 0.5,
                "brightness": 0.15, "contrast": 0.15, "saturation": 0.15},
}

# the published full-scale recipe, kept as a reference preset (not used in tests)
FULL_PRESET = {
    "variant": "B",
    "num_classes": 19,
    "seed": 0,
    "out_dir": "runs/full",
    "data": {"kind": "manifest", "dir": "datasets/converted"},
    "train": {"iters": 185000, "batch": 16, "lr": 0.02, "momentum": 0.9,
              "weight_decay": 0.0005, "poly_power": 0.9, "log_every": 100,
              "eval_every": 5000},
    "ohem": {"prob_threshold": 0.7, "min_kept_fraction": 0.0625, "ignore_label": 255},
    "augment": {"scale_range": [0.25, 1.5], "crop": [640, 1280], "hflip_prob": 0.5,
                "brightness": 0.3, "contrast": 0.3, "saturation": 0.3},
}


def cmd_preset(args) -> int:
    doc = DESK_PRESET if args.name == "desk" else FULL_PRESET
    print(json.dumps(doc, indent=2))
    return 0


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dwrseg",
        description="Train, evaluate, and analyze DWRSeg networks on the CPU.",
        epilog="Config defaults: see `dwrseg preset desk`. Exit codes: "
               "0 ok, 2 config error, 3 numeric failure.")
    p.add_argument("--threads", type=int, default=1,
                   help="cap BLAS worker threads (default 1 for bitwise reproducibility)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.add_argument("--iters", type=int, default=None, help="override config iteration count")
    t.add_argument("--out", default=None, help="override config out_dir")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="run config providing the validation data")
    e.add_argument("--data", help="directory of .ppm/_mask.pgm pairs")
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("predict", help="segment one PPM image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_predict)

    c = sub.add_parser("count", help="parameter and MAC counts")
    c.add_argument("variant", choices=list(network.VARIANTS))
    c.add_argument("--classes", type=int, default=19)
    c.add_argument("--height", type=int, default=512)
    c.add_argument("--width", type=int, default=1024)
    c.add_argument("--json", action="store_true")
    c.add_argument("--out", default=None)
    c.set_defaults(fn=cmd_count)

    b = sub.add_parser("bench", help="forward-pass wall-time benchmark")
    b.add_argument("variant", choices=list(network.VARIANTS))
    b.add_argument("height", type=int)
    b.add_argument("width", type=int)
    b.add_argument("--classes", type=int, default=19)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--iters", type=int, default=10)
    b.set_defaults(fn=cmd_bench)

    a = sub.add_parser("analyze", help="receptive fields, ERF, weights, heatmaps")
    a.add_argument("what", choices=["rf", "erf", "weights", "heatmaps"])
    a.add_argument("--variant", default="B", choices=list(network.VARIANTS))
    a.add_argument("--classes", type=int, default=19)
    a.add_argument("--checkpoint")
    a.add_argument("--image")
    a.add_argument("--stage", default="s4", choices=["s2", "s3", "s4"])
    a.add_argument("--cy", type=int, default=None)
    a.add_argument("--cx", type=int, default=None)
    a.add_argument("--block", default="s4.0")
    a.add_argument("--bins", type=int, default=24)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--json", action="store_true")
    a.add_argument("--out", default=None)
    a.set_defaults(fn=cmd_analyze)

    ps = sub.add_parser("preset", help="print an example run config")
    ps.add_argument("name", choices=["desk", "full"])
    ps.set_defaults(fn=cmd_preset)
    return p


def _limit_threads(n: int) -> None:
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=max(1, n))
    except ImportError:
        pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_threads(args.threads)
    try:
        return args.fn(args)
    except (ConfigError, FormatError, ShapeError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
