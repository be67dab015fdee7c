"""Command-line front end: config parsing, subcommands, ablation runner.

Configuration is a flat key=value namespace; a config file and repeated
--set overrides feed the same parser, later sources winning. Every key is
listed with its default in --help. Exit codes are stable for scripting:
0 success, 1 numeric failure, 2 bad configuration or usage, 3 unreadable
data or model files, 4 training divergence, 5 selftest failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import complexity as cx
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    NumericError,
    TrainingError,
)
from .metrics import CSV_HEADER as METRICS_HEADER
from .metrics import confusion, csv_row, from_confusion
from .netpbm import read_pnm, write_pnm
from .network import (
    KIND_CHECKPOINT,
    ModelConfig,
    build_model,
    load_model,
    save_model,
)
from .scenes import SceneParams, generate_dataset, generate_scene, load_dataset
from .selftest import run_selftest
from .trainer import Dataset, TrainConfig, evaluate, train


@dataclass(frozen=True)
class KeySpec:
    name: str
    kind: str  # int | float | bool | str | ints
    default: object
    help: str
    choices: tuple[str, ...] = ()


KEYS: tuple[KeySpec, ...] = (
    KeySpec("seed", "int", 0, "master seed for data, init, and shuffling"),
    KeySpec("height", "int", 64, "input image height"),
    KeySpec("width", "int", 64, "input image width"),
    KeySpec("width_multiplier", "float", 1.0, "scales every stage width"),
    KeySpec("channels", "ints", (16, 32, 64), "stage widths, three values"),
    KeySpec("rates", "ints", (1, 2, 4), "bottleneck dilation rates, increasing"),
    KeySpec("binarize_encoder", "bool", True, "binarize encoder convolutions"),
    KeySpec("binarize_bottleneck", "bool", True, "binarize dilated bottleneck"),
    KeySpec("binarize_decoder", "bool", True, "binarize decoder convolutions"),
    KeySpec("binarize_first_layer", "bool", True, "let the stem be binarized too"),
    KeySpec("binarize_last_layer", "bool", True, "let the class head be binarized too"),
    KeySpec("multi_base", "int", 1, "binary bases per binarized filter"),
    KeySpec("epochs", "int", 30, "training epochs"),
    KeySpec("batch_size", "int", 8, "minibatch size"),
    KeySpec("optimizer", "str", "adam", "weight update rule", ("sgd", "adam")),
    KeySpec("lr", "float", 1e-3, "learning rate"),
    KeySpec("momentum", "float", 0.9, "sgd momentum"),
    KeySpec("beta1", "float", 0.9, "adam first-moment decay"),
    KeySpec("beta2", "float", 0.999, "adam second-moment decay"),
    KeySpec("eps", "float", 1e-8, "adam denominator floor"),
    KeySpec("weight_decay", "float", 0.0, "L2 decay on float conv weights"),
    KeySpec("latent_clip", "float", 1.0, "clamp for latent binary weights"),
    KeySpec("shuffle", "bool", True, "reshuffle training batches each epoch"),
    KeySpec("count", "int", 200, "scenes written by gen-data"),
    KeySpec("eval_count", "int", 40, "held-out scenes during train"),
    KeySpec("bottom_min", "float", 0.3, "road bottom-width fraction, low"),
    KeySpec("bottom_max", "float", 0.7, "road bottom-width fraction, high"),
    KeySpec("horizon_min", "float", 0.3, "horizon height fraction, low"),
    KeySpec("horizon_max", "float", 0.5, "horizon height fraction, high"),
    KeySpec("curvature_min", "float", -0.25, "road curvature, low"),
    KeySpec("curvature_max", "float", 0.25, "road curvature, high"),
    KeySpec("noise_sigma", "float", 0.02, "additive texture noise sigma"),
    KeySpec("distractors_min", "int", 0, "off-road rectangles per scene, low"),
    KeySpec("distractors_max", "int", 4, "off-road rectangles per scene, high"),
    KeySpec("bitop_per_mac", "float", 1.0 / 64.0, "cost of one bit op in MACs"),
    KeySpec("engine", "str", "gemm", "binary conv backend", ("gemm", "packed")),
    KeySpec("ablate_epochs", "int", 8, "epochs per ablation cell"),
    KeySpec("ablate_scenes", "int", 80, "scenes per ablation cell"),
    KeySpec("ablate_size", "int", 48, "square image size for ablation"),
)

_KEY_MAP = {spec.name: spec for spec in KEYS}

_TRUE_WORDS = frozenset({"1", "true", "yes", "on"})
_FALSE_WORDS = frozenset({"0", "false", "no", "off"})


def _parse_value(spec: KeySpec, raw: str, where: str):
    raw = raw.strip()
    try:
        if spec.kind == "int":
            return int(raw)
        if spec.kind == "float":
            return float(raw)
        if spec.kind == "ints":
            return tuple(int(part) for part in raw.split(","))
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {spec.kind} for '{spec.name}'") from None
    if spec.kind == "bool":
        low = raw.lower()
        if low in _TRUE_WORDS:
            return True
        if low in _FALSE_WORDS:
            return False
        raise ConfigError(f"{where}: cannot parse {raw!r} as bool for '{spec.name}'")
    if spec.choices and raw not in spec.choices:
        raise ConfigError(
            f"{where}: '{spec.name}' must be one of {', '.join(spec.choices)}, got {raw!r}"
        )
    return raw


def _apply_line(cfg: dict, line: str, where: str) -> None:
    if "=" not in line:
        raise ConfigError(f"{where}: expected key=value, got {line!r}")
    key, _, value = line.partition("=")
    key = key.strip()
    spec = _KEY_MAP.get(key)
    if spec is None:
        raise ConfigError(f"{where}: unknown key '{key}'")
    cfg[key] = _parse_value(spec, value, where)


def parse_config(path: str | None = None, overrides: tuple[str, ...] = ()) -> dict:
    """Defaults, then the config file, then --set overrides; later wins."""
    cfg = {spec.name: spec.default for spec in KEYS}
    if path is not None:
        with open(path, "r", encoding="ascii") as fh:
            for number, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                _apply_line(cfg, line, f"{path} line {number}")
    for number, line in enumerate(overrides, start=1):
        _apply_line(cfg, line, f"override {number}")
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        input_size=(cfg["height"], cfg["width"]),
        width_multiplier=cfg["width_multiplier"],
        channels=cfg["channels"],
        rates=cfg["rates"],
        binarize_encoder=cfg["binarize_encoder"],
        binarize_bottleneck=cfg["binarize_bottleneck"],
        binarize_decoder=cfg["binarize_decoder"],
        binarize_first_layer=cfg["binarize_first_layer"],
        binarize_last_layer=cfg["binarize_last_layer"],
        multi_base=cfg["multi_base"],
        seed=cfg["seed"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        optimizer=cfg["optimizer"],
        lr=cfg["lr"],
        momentum=cfg["momentum"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        eps=cfg["eps"],
        weight_decay=cfg["weight_decay"],
        latent_clip=cfg["latent_clip"],
        seed=cfg["seed"],
        shuffle=cfg["shuffle"],
    )


def scene_params(cfg: dict) -> SceneParams:
    try:
        return SceneParams(
            size=(cfg["height"], cfg["width"]),
            bottom_range=(cfg["bottom_min"], cfg["bottom_max"]),
            horizon_range=(cfg["horizon_min"], cfg["horizon_max"]),
            curvature_range=(cfg["curvature_min"], cfg["curvature_max"]),
            noise_sigma=cfg["noise_sigma"],
            distractor_range=(cfg["distractors_min"], cfg["distractors_max"]),
            seed=cfg["seed"],
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cost_model(cfg: dict) -> cx.CostModel:
    return cx.CostModel(bitop_per_mac=cfg["bitop_per_mac"])


def _key_help() -> str:
    lines = ["configuration keys (config file or --set key=value):"]
    for spec in KEYS:
        default = spec.default
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        elif isinstance(default, bool):
            default = str(default).lower()
        extra = f" [{'|'.join(spec.choices)}]" if spec.choices else ""
        lines.append(f"  {spec.name}={default}{extra}  {spec.help}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitseg",
        description="binary drivable-area segmentation toolkit",
        epilog=_key_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def common(p):
        p.add_argument("--config", metavar="FILE", help="key=value config file")
        p.add_argument(
            "--set",
            metavar="KEY=VALUE",
            action="append",
            default=[],
            help="override one config key (repeatable)",
        )

    p = sub.add_parser("gen-data", help="write a synthetic scene dataset")
    common(p)
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="FILE", help="inference model path")
    p.add_argument("--log", metavar="FILE", help="write per-epoch csv lines here")
    p.add_argument("--checkpoint", metavar="FILE", help="also save resumable weights")

    p = sub.add_parser("eval", help="score a saved model against a dataset")
    common(p)
    p.add_argument("--model", required=True, metavar="FILE")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--csv", metavar="FILE", help="write per-image metric rows here")

    p = sub.add_parser("predict", help="segment one image with a saved model")
    common(p)
    p.add_argument("--model", required=True, metavar="FILE")
    p.add_argument("--image", required=True, metavar="FILE", help="P6 input image")
    p.add_argument("--out", required=True, metavar="FILE", help="P5 mask output")

    p = sub.add_parser("complexity", help="print compute and size accounting")
    common(p)
    p.add_argument("--csv", metavar="FILE", help="also write the csv table here")

    p = sub.add_parser("ablate", help="train the binarization-placement grid")
    common(p)
    p.add_argument("--out-dir", default="ablation", metavar="DIR")

    p = sub.add_parser("selftest", help="run built-in correctness suites")
    common(p)
    return parser


def _cmd_gen_data(args, cfg: dict) -> int:
    pairs = generate_dataset(scene_params(cfg), cfg["count"], args.out)
    print(f"wrote {len(pairs)} scene pairs under {args.out}")
    return 0


def _cmd_train(args, cfg: dict) -> int:
    ds = Dataset.from_dir(args.data)
    train_ds, eval_ds = ds.split(cfg["eval_count"])
    model = build_model(model_config(cfg))
    lines: list[str] = []

    def log(line: str) -> None:
        lines.append(line)
        print(line)

    print("epoch,loss,road_iou")
    train(model, train_ds, train_config(cfg), eval_ds=eval_ds, engine=cfg["engine"], log=log)
    save_model(model, args.out)
    if args.checkpoint:
        save_model(model, args.checkpoint, kind=KIND_CHECKPOINT)
    if args.log:
        with open(args.log, "w", encoding="ascii") as fh:
            fh.write("epoch,loss,road_iou\n")
            fh.writelines(line + "\n" for line in lines)
    final = evaluate(model, eval_ds, engine=cfg["engine"])
    print(
        f"saved {args.out}  eval road_iou={final.iou_road:.4f} "
        f"miou={final.mean_iou:.4f} acc={final.pixel_acc:.4f}"
    )
    return 0


def _cmd_eval(args, cfg: dict) -> int:
    images, masks, names = load_dataset(args.data)
    model = load_model(args.model)
    rows = []
    totals = np.zeros(4, dtype=np.int64)
    for i, name in enumerate(names):
        pred = model.predict(images[i : i + 1], engine=cfg["engine"])[0]
        cell = confusion(pred, masks[i])
        totals += cell
        rows.append(csv_row(name, from_confusion(*cell)))
    overall = from_confusion(*totals.tolist())
    rows.append(csv_row("overall", overall))
    print(METRICS_HEADER)
    print(rows[-1])
    if args.csv:
        with open(args.csv, "w", encoding="ascii") as fh:
            fh.write(METRICS_HEADER + "\n")
            fh.writelines(row + "\n" for row in rows)
    return 0


def _cmd_predict(args, cfg: dict) -> int:
    arr = read_pnm(args.image)
    if arr.ndim != 3:
        raise DimensionError(f"expected a color image, got shape {arr.shape}")
    model = load_model(args.model)
    x = (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]
    mask = model.predict(x, engine=cfg["engine"])[0]
    write_pnm(args.out, (mask * 255).astype(np.uint8))
    road = float(mask.mean())
    print(f"wrote {args.out} (road fraction {road:.3f})")
    return 0


def _cmd_complexity(args, cfg: dict) -> int:
    report = cx.count_model(build_model(model_config(cfg)), cost_model(cfg))
    print(cx.text_table(report))
    print()
    lines = cx.csv_lines(report)
    for line in lines:
        print(line)
    if args.csv:
        with open(args.csv, "w", encoding="ascii") as fh:
            fh.writelines(line + "\n" for line in lines)
    return 0


_PLACEMENT_FLAGS: dict[str, tuple[bool, bool, bool]] = {
    "none": (False, False, False),
    "encoder": (True, False, False),
    "bottleneck": (False, True, False),
    "decoder": (False, False, True),
    "full": (True, True, True),
}

ABLATION_HEADER = "placement,multi_base,size_bytes,compression,effective_macs,road_iou"


def ablation_cells() -> list[tuple[str, int]]:
    """The all-float control plus placement x base-count grid."""
    grid = [("none", 1)]
    for placement in ("encoder", "bottleneck", "decoder", "full"):
        for bases in (1, 2):
            grid.append((placement, bases))
    return grid


def _ablate_cell(payload: dict) -> dict:
    cfg = payload["cfg"]
    placement = payload["placement"]
    bases = payload["multi_base"]
    enc, bott, dec = _PLACEMENT_FLAGS[placement]
    side = cfg["ablate_size"]
    count = cfg["ablate_scenes"]
    cell_seed = cfg["seed"] * 100 + payload["index"]

    params = replace(scene_params(cfg), size=(side, side))
    images = np.empty((count, 3, side, side), dtype=np.float32)
    labels = np.empty((count, side, side), dtype=np.uint8)
    for i in range(count):
        images[i], labels[i] = generate_scene(params, i)
    train_ds, eval_ds = Dataset(images=images, masks=labels).split(max(1, count // 4))

    mcfg = replace(
        model_config(cfg),
        input_size=(side, side),
        binarize_encoder=enc,
        binarize_bottleneck=bott,
        binarize_decoder=dec,
        multi_base=bases,
        seed=cell_seed,
    )
    tcfg = replace(train_config(cfg), epochs=cfg["ablate_epochs"], seed=cell_seed)
    model = build_model(mcfg)
    train(model, train_ds, tcfg, engine=cfg["engine"])
    scored = evaluate(model, eval_ds, engine=cfg["engine"])
    report = cx.count_model(model, cost_model(cfg))
    return {
        "placement": placement,
        "multi_base": bases,
        "size_bytes": report.total_size_bytes,
        "compression": report.compression,
        "effective_macs": report.effective_macs,
        "road_iou": scored.iou_road,
    }


def _ablation_row(cell: dict) -> str:
    return (
        f"{cell['placement']},{cell['multi_base']},{cell['size_bytes']},"
        f"{cell['compression']:.4f},{cell['effective_macs']:.1f},{cell['road_iou']:.6f}"
    )


def worker_count() -> int:
    """BITSEG_THREADS caps process parallelism; 0 or unset means sequential."""
    raw = os.environ.get("BITSEG_THREADS", "").strip()
    if not raw:
        return 0
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"BITSEG_THREADS must be an integer, got {raw!r}") from None
    if value < 0:
        raise ConfigError(f"BITSEG_THREADS must be >= 0, got {value}")
    return value


def _cmd_ablate(args, cfg: dict) -> int:
    cells = ablation_cells()
    payloads = [
        {"cfg": cfg, "placement": p, "multi_base": m, "index": i}
        for i, (p, m) in enumerate(cells)
    ]
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(payloads))) as pool:
            results = list(pool.map(_ablate_cell, payloads))
    else:
        results = [_ablate_cell(p) for p in payloads]

    os.makedirs(args.out_dir, exist_ok=True)
    for cell in results:
        name = f"cell_{cell['placement']}_m{cell['multi_base']}.csv"
        with open(os.path.join(args.out_dir, name), "w", encoding="ascii") as fh:
            fh.write(ABLATION_HEADER + "\n" + _ablation_row(cell) + "\n")

    results.sort(key=lambda c: (-c["size_bytes"], c["placement"], c["multi_base"]))
    table = [ABLATION_HEADER] + [_ablation_row(c) for c in results]
    out_path = os.path.join(args.out_dir, "ablation.csv")
    with open(out_path, "w", encoding="ascii") as fh:
        fh.writelines(line + "\n" for line in table)
    for line in table:
        print(line)
    print(f"wrote {out_path}")
    return 0


def _cmd_selftest(args, cfg: dict) -> int:
    return 0 if run_selftest(print) else 5


_DISPATCH = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "complexity": _cmd_complexity,
    "ablate": _cmd_ablate,
    "selftest": _cmd_selftest,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = parse_config(args.config, tuple(args.set))
        return _DISPATCH[args.command](args, cfg)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
