"""``calibfw`` command line: generation, training, adaptation, evaluation.

Option values resolve as command-line flags, then the ``--config`` JSON file,
then built-in defaults. Every command writes its resolved configuration next
to its outputs. Relative data paths are taken under ``$CALIB_DATA_DIR`` when
that variable is set.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import camera_geometry as cg
from . import pano_pipeline as pp
from .eval_harness import emit_report, evaluate, exemplar_sweep, report_filename
from .incremental import STRATEGIES, BiCParams, DomainData, StrategyConfig, train_incremental
from .nn.checkpoint import load_checkpoint, read_header, save_checkpoint
from .nn.network import ARCHS, Network, make_arch
from .nn.optim import DEFAULT_LR
from .nn.train import TrainConfig, train_base

log = logging.getLogger("calibfw")

COMMON_DEFAULTS = {"seed": 0, "workers": 1, "deterministic": False, "log_level": "warning"}
TRAIN_DEFAULTS = {"epochs": 10, "batch_size": 16, "lr": DEFAULT_LR, "momentum": 0.0, "patience": 2, "factor": 0.1}
DEFAULTS = {
    "gen-panos": {"count": 4, "style": "indoor-like", "height": 512},
    "gen-dataset": {"count": 100, "test_count": 0, "size": 64, "val_fraction": 0.2,
                    "crops_per_panorama": None, "focal_range": list(cg.FOCAL_RANGE_PX),
                    "pitch_range": list(cg.PITCH_RANGE_DEG), "roll_range": list(cg.ROLL_RANGE_DEG)},
    "train": {**TRAIN_DEFAULTS, "arch": "calibnet-tiny", "head": "affine"},
    "train-incremental": {**TRAIN_DEFAULTS, "strategy": "finetune", "lambda0": 1.0, "exemplar_pct": 0.0,
                          "lambda_dist": 1.0, "bic_val_fraction": 0.1, "distill_exemplars": True,
                          "herding_bins": 0, "max_steps": None},
    "eval": {"split": "val", "model_id": None, "timestamp": None, "formats": ["csv", "svg"]},
    "sweep-exemplars": {**TRAIN_DEFAULTS, "pcts": [0.0, 20.0, 100.0], "strategy": "icarl", "lambda0": 1.0},
    "draw-horizon": {"truth": None, "scale": 4},
}
REQUIRED = {
    "gen-panos": ["out"],
    "gen-dataset": ["panos", "out"],
    "train": ["data", "out"],
    "train-incremental": ["base", "new_data", "out"],
    "eval": ["model", "data", "out_dir"],
    "sweep-exemplars": ["base", "old_data", "new_data", "out_dir"],
    "draw-horizon": ["model", "image", "out"],
}
DATA_KEYS = ("panos", "data", "old_data", "new_data", "image")


class UsageError(ValueError):
    pass


def _floats(text):
    return [float(t) for t in str(text).split(",") if t.strip()]


def _add_common(p):
    s = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=s, help="random seed (default 0)")
    p.add_argument("--workers", type=int, default=s, help="worker threads (default 1)")
    p.add_argument("--deterministic", action="store_true", default=s, help="single-threaded BLAS for bitwise reproducibility")
    p.add_argument("--config", default=s, help="JSON file of option values; flags override it")
    p.add_argument("--log-level", default=s, choices=["debug", "info", "warning", "error"])


def _add_train(p):
    s = argparse.SUPPRESS
    p.add_argument("--epochs", type=int, default=s)
    p.add_argument("--batch-size", type=int, default=s)
    p.add_argument("--lr", type=float, default=s, help=f"initial learning rate (default {DEFAULT_LR})")
    p.add_argument("--momentum", type=float, default=s)
    p.add_argument("--patience", type=int, default=s)
    p.add_argument("--factor", type=float, default=s)


def build_parser() -> argparse.ArgumentParser:
    s = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="calibfw", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-panos", help="synthesize procedural equirectangular panoramas")
    p.add_argument("--count", type=int, default=s)
    p.add_argument("--style", choices=pp.STYLES, default=s)
    p.add_argument("--height", type=int, default=s)
    p.add_argument("--out", default=s)
    _add_common(p)

    p = sub.add_parser("gen-dataset", help="render labelled perspective crops from panoramas")
    p.add_argument("--panos", default=s, help="directory of panorama PNGs")
    p.add_argument("--out", default=s)
    p.add_argument("--count", type=int, default=s, help="train+val crops")
    p.add_argument("--test-count", type=int, default=s, help="test crops from held-out panoramas")
    p.add_argument("--size", type=int, default=s)
    p.add_argument("--val-fraction", type=float, default=s)
    p.add_argument("--crops-per-panorama", type=int, default=s)
    p.add_argument("--focal-range", type=_floats, default=s, metavar="LO,HI")
    p.add_argument("--pitch-range", type=_floats, default=s, metavar="LO,HI")
    p.add_argument("--roll-range", type=_floats, default=s, metavar="LO,HI")
    _add_common(p)

    p = sub.add_parser("train", help="train a base calibration network")
    p.add_argument("--data", default=s, help="dataset directory with manifest.jsonl")
    p.add_argument("--arch", default=s, help=f"one of {', '.join(ARCHS)}")
    p.add_argument("--head", choices=["affine", "cosine"], default=s)
    p.add_argument("--out", default=s, help="checkpoint path")
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("train-incremental", help="adapt a trained network to a new domain")
    p.add_argument("--base", default=s, help="base checkpoint")
    p.add_argument("--old-data", default=s)
    p.add_argument("--new-data", default=s)
    p.add_argument("--strategy", choices=STRATEGIES, default=s)
    p.add_argument("--lambda", dest="lambda0", type=float, default=s, help="output distillation weight")
    p.add_argument("--exemplar-pct", type=float, default=s)
    p.add_argument("--lambda-dist", type=float, default=s, help="less-forget weight (lucir)")
    p.add_argument("--bic-val-fraction", type=float, default=s)
    p.add_argument("--no-distill-exemplars", dest="distill_exemplars", action="store_false", default=s)
    p.add_argument("--herding-bins", type=int, default=s)
    p.add_argument("--max-steps", type=int, default=s, help="stop after this many SGD steps")
    p.add_argument("--out", default=s)
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--model", default=s)
    p.add_argument("--data", default=s)
    p.add_argument("--split", default=s)
    p.add_argument("--model-id", default=s)
    p.add_argument("--timestamp", default=s, help="file-name timestamp (default: now, UTC)")
    p.add_argument("--out-dir", default=s)
    _add_common(p)

    p = sub.add_parser("sweep-exemplars", help="incremental runs over exemplar percentages")
    p.add_argument("--base", default=s)
    p.add_argument("--old-data", default=s)
    p.add_argument("--new-data", default=s)
    p.add_argument("--pcts", type=_floats, default=s, metavar="P1,P2,...")
    p.add_argument("--strategy", choices=["icarl", "lucir", "bic"], default=s)
    p.add_argument("--lambda", dest="lambda0", type=float, default=s)
    p.add_argument("--out-dir", default=s)
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("draw-horizon", help="overlay predicted and true horizon lines on a crop")
    p.add_argument("--model", default=s)
    p.add_argument("--image", default=s)
    p.add_argument("--truth", type=_floats, default=s, metavar="F_PX,PITCH_DEG,ROLL_DEG",
                   help="ground truth; looked up in a neighbouring manifest when omitted")
    p.add_argument("--scale", type=int, default=s, help="upscaling factor of the overlay")
    p.add_argument("--out", default=s)
    _add_common(p)
    return parser


def resolve(args: argparse.Namespace, env=os.environ) -> dict:
    """Merge defaults, the config file and explicit flags (highest priority)."""
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    cfg = {**COMMON_DEFAULTS, **DEFAULTS[args.command]}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            from_file = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise UsageError(f"config {config_path} must hold a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in from_file.items() if k != "command"})
    cfg.update(given)
    missing = [k for k in REQUIRED[args.command] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    root = env.get("CALIB_DATA_DIR")
    if root:
        for k in DATA_KEYS:
            if cfg.get(k) and not Path(cfg[k]).is_absolute():
                cfg[k] = str(Path(root) / cfg[k])
    cfg["command"] = args.command
    return cfg


def persist_config(cfg: dict, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _train_cfg(cfg) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], momentum=cfg["momentum"],
                       patience=cfg["patience"], factor=cfg["factor"], seed=cfg["seed"])


def _write_jsonl(records, path: Path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _rng_state(rng) -> dict:
    return rng.bit_generator.state


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise FileNotFoundError(f"{what} directory {path} does not exist")


# ---------------------------------------------------------------- commands


def cmd_gen_panos(cfg) -> int:
    if cfg["count"] <= 0:
        raise UsageError("gen-panos: --count must be positive")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    index = {"seed": cfg["seed"], "style": cfg["style"], "height": cfg["height"], "files": []}
    for i in range(cfg["count"]):
        pano_seed = cfg["seed"] * 100_000 + i
        pano = pp.synth_panorama(pano_seed, cfg["style"], cfg["height"])
        name = f"pano_{i:04d}.png"
        pp.save_png(pano.pixels, out / name)
        index["files"].append({"file": name, "seed": pano_seed})
    (out / "index.json").write_text(json.dumps(index, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    persist_config(cfg, out / "run_config.json")
    print(f"wrote {cfg['count']} panoramas to {out}")
    return 0


def _load_panoramas(folder) -> list:
    _require_dir(folder, "panorama")
    folder = Path(folder)
    files = sorted(folder.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no panorama PNGs in {folder}")
    return [pp.load_panorama(f, source_id=f.stem) for f in files]


def cmd_gen_dataset(cfg) -> int:
    panos = _load_panoramas(cfg["panos"])
    sampler = pp.SamplerConfig(seed=cfg["seed"], focal_range=tuple(cfg["focal_range"]),
                               pitch_range_deg=tuple(cfg["pitch_range"]), roll_range_deg=tuple(cfg["roll_range"]),
                               crops_per_panorama=cfg["crops_per_panorama"], crop_size=cfg["size"])
    dcfg = pp.DatasetConfig(sampler, count=cfg["count"], test_count=cfg["test_count"], val_fraction=cfg["val_fraction"])
    manifest = pp.generate_dataset(panos, dcfg, cfg["out"], workers=cfg["workers"])
    persist_config(cfg, Path(cfg["out"]) / "run_config.json")
    print(f"wrote {len(manifest.records)} crops to {cfg['out']} {manifest.counts()}")
    return 0


def _sidecar(ckpt: Path, suffix: str) -> Path:
    return ckpt.with_name(ckpt.stem + suffix)


def cmd_train(cfg) -> int:
    _require_dir(cfg["data"], "dataset")
    manifest = pp.load_manifest(cfg["data"])
    arch = make_arch(cfg["arch"], head=cfg["head"], input_size=int(manifest.header["crop_size"]))
    train = pp.load_split(cfg["data"], "train", manifest)
    val = pp.load_split(cfg["data"], "val", manifest)
    net = Network(arch, seed=cfg["seed"])
    res = train_base(net, train, val, _train_cfg(cfg))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, res.state, out, rng_state=_rng_state(res.rng))
    _write_jsonl(res.history, _sidecar(out, ".history.jsonl"))
    persist_config(cfg, _sidecar(out, ".config.json"))
    last = res.history[-1]
    print(f"saved {out} (train_loss {last['train_loss']:.5f}, val muMSE {last['val_muMSE']:.5f})")
    return 0


def _domain(path) -> DomainData | None:
    if path is None:
        return None
    _require_dir(path, "dataset")
    manifest = pp.load_manifest(path)
    train = pp.load_split(path, "train", manifest)
    val = pp.load_split(path, "val", manifest) if manifest.split("val") else None
    return DomainData(train, val)


def _strategy(cfg) -> StrategyConfig:
    return StrategyConfig(kind=cfg["strategy"], lambda0=cfg["lambda0"], exemplar_pct=cfg.get("exemplar_pct", 0.0),
                          lambda_dist=cfg.get("lambda_dist", 1.0), bic_val_fraction=cfg.get("bic_val_fraction", 0.1),
                          distill_exemplars=cfg.get("distill_exemplars", True), herding_bins=cfg.get("herding_bins", 0))


def cmd_train_incremental(cfg) -> int:
    strategy = _strategy(cfg)
    base = load_checkpoint(cfg["base"]).net
    old = _domain(cfg.get("old_data"))
    new = _domain(cfg["new_data"])
    res = train_incremental(base, old or DomainData(None), new, strategy, _train_cfg(cfg), max_steps=cfg["max_steps"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    # strategy settings live in the config sidecar so equivalent runs give identical checkpoints
    extra = {"teacher_hash": res.teacher_hash}
    if res.bic is not None:
        extra["bic"] = res.bic.to_dict()
    save_checkpoint(res.net, res.train.state, out, rng_state=_rng_state(res.train.rng), extra=extra)
    _write_jsonl(res.history, _sidecar(out, ".history.jsonl"))
    persist_config(cfg, _sidecar(out, ".config.json"))
    print(f"saved {out} ({strategy.describe()})")
    return 0


def _bic_from(path) -> BiCParams | None:
    extra = read_header(path).get("extra", {})
    return BiCParams.from_dict(extra["bic"]) if "bic" in extra else None


def cmd_eval(cfg) -> int:
    _require_dir(cfg["data"], "dataset")
    net = load_checkpoint(cfg["model"]).net
    ds = pp.load_split(cfg["data"], cfg["split"])
    model_id = cfg["model_id"] or Path(cfg["model"]).stem
    ds.name = f"{Path(cfg['data']).name}-{cfg['split']}"
    reports = evaluate(net, ds, _bic_from(cfg["model"]), model=model_id)
    stamp = cfg["timestamp"] or datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    out_dir = Path(cfg["out_dir"])
    for fmt in cfg["formats"]:
        emit_report(reports, out_dir / report_filename(model_id, ds.name, stamp, fmt), fmt)
    persist_config(cfg, out_dir / f"eval_{stamp}.config.json")
    for r in reports:
        print(f"{r.model} on {r.dataset}: muMSE {r.mu_mse:.5f} (focal {r.mse_focal:.5f}, roll {r.mse_roll:.5f}, "
              f"pitch {r.mse_pitch:.5f}, n={r.n})")
    return 0


def cmd_sweep(cfg) -> int:
    base = load_checkpoint(cfg["base"]).net
    old, new = _domain(cfg["old_data"]), _domain(cfg["new_data"])
    if old.val is None or new.val is None:
        raise ValueError("sweep-exemplars needs a val split in both datasets")
    strategy = StrategyConfig(kind=cfg["strategy"], lambda0=cfg["lambda0"])
    sweep = exemplar_sweep(base, old, new, cfg["pcts"], _train_cfg(cfg), strategy)
    out_dir = Path(cfg["out_dir"])
    emit_report(sweep, out_dir / "sweep.csv")
    emit_report(sweep, out_dir / "sweep.svg")
    persist_config(cfg, out_dir / "sweep.config.json")
    for pct, o, n in sweep.rows:
        print(f"{pct:6.1f}%  old muMSE {o:.5f}  new muMSE {n:.5f}")
    return 0


def _truth_for(image: Path):
    """Ground truth from a manifest in the image's dataset directory, if any."""
    for root in (image.parent, image.parent.parent):
        mpath = root / "manifest.jsonl"
        if mpath.exists():
            rel = image.resolve().relative_to(root.resolve()).as_posix()
            for r in pp.load_manifest(mpath).records:
                if r.path == rel:
                    return r.f_px, r.pitch_deg, r.roll_deg
    return None


def _clamp_prediction(pred):
    """Denormalize a prediction and clip it into the valid camera ranges (radians out)."""
    f_px, pitch_deg, roll_deg = cg.denormalize_array(np.asarray(pred, dtype=np.float64))
    f_px = float(np.clip(f_px, *cg.FOCAL_RANGE_PX))
    pitch = float(np.radians(np.clip(pitch_deg, cg.PITCH_RANGE_DEG[0] + 1e-6, cg.PITCH_RANGE_DEG[1])))
    roll = float(np.radians(np.clip(roll_deg, *cg.ROLL_RANGE_DEG)))
    return f_px, pitch, roll


def draw_overlay(pixels, lines, scale=4):
    """Upscaled copy of ``pixels`` with each ``(label, color, endpoints)``
    line drawn and a legend in the top-left corner."""
    from PIL import Image, ImageDraw

    h, w = pixels.shape[:2]
    img = Image.fromarray(pixels).resize((w * scale, h * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for label, color, ((u0, v0), (u1, v1)) in lines:
        draw.line([(u0 * scale, v0 * scale), (u1 * scale, v1 * scale)], fill=color, width=max(1, scale // 2))
    for i, (label, color, ((u0, v0), (u1, v1))) in enumerate(lines):
        if not (0 <= v0 <= h or 0 <= v1 <= h or v0 < 0 < v1 or v1 < 0 < v0):
            label += " (off-frame)"
        y = 4 + 14 * i
        draw.rectangle([4, y, 8 + 6 * len(label) + 14, y + 12], fill=(0, 0, 0))
        draw.rectangle([6, y + 3, 14, y + 9], fill=color)
        draw.text((18, y), label, fill=(255, 255, 255))
    return np.asarray(img)


def cmd_draw_horizon(cfg) -> int:
    image = Path(cfg["image"])
    pixels = pp.load_png(image)
    h, w = pixels.shape[:2]
    net = load_checkpoint(cfg["model"]).net
    pred = net.predict(pp.to_network_input(pixels[None]))[0]
    f_px, pitch, roll = _clamp_prediction(pred)
    lines = [("predicted", (230, 40, 40), cg.horizon_endpoints(f_px, pitch, roll, w, h))]
    truth = cfg["truth"] or _truth_for(image)
    if truth is not None:
        tf, tp, tr = truth
        lines.insert(0, ("ground truth", (40, 200, 60), cg.horizon_endpoints(tf, np.radians(tp), np.radians(tr), w, h)))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    pp.save_png(draw_overlay(pixels, lines, cfg["scale"]), out)
    persist_config(cfg, _sidecar(out, ".config.json"))
    print(f"predicted f={f_px:.1f}px pitch={np.degrees(pitch):.2f}deg roll={np.degrees(roll):.2f}deg -> {out}")
    return 0


COMMANDS = {
    "gen-panos": cmd_gen_panos,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "train-incremental": cmd_train_incremental,
    "eval": cmd_eval,
    "sweep-exemplars": cmd_sweep,
    "draw-horizon": cmd_draw_horizon,
}


@contextlib.contextmanager
def _determinism(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
    except UsageError as exc:
        parser.error(str(exc))
    logging.basicConfig(level=cfg["log_level"].upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        with _determinism(cfg["deterministic"]):
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"calibfw {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single-line diagnostic for every failure
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"calibfw {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
