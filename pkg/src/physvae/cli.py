"""Command-line interface: ``physvae <command> ...``.

Every command writes files and nothing else.  Exit codes: 0 success,
2 configuration/schema error, 3 I/O or format error, 4 training aborted.
Errors go to stderr as ``ERROR <code>: <message>``.  ``PHYSVAE_LOG``
(error | info | debug) sets stderr verbosity.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import datapipe as dp
from . import phys_loss, segmentation, trainer, vae_core

log = logging.getLogger("physvae")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ABORT = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------- schema


def _obj(props: dict, **extra) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props, "default": {}, **extra}


_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_PAIR = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_TEXTURES = {"type": "array", "items": _PAIR, "minItems": 2, "maxItems": 4}

RUN_SCHEMA = _obj(
    {
        "data": _obj(
            {
                "input": {"type": "string", "description": "PGM or PVTN micrograph; overrides synth"},
                "synth": _obj(
                    {
                        "kind": {"enum": ["two-phase", "multiphase"], "default": "two-phase"},
                        "seed": {"type": "integer", "minimum": 0, "default": 0},
                        "side": {"type": "integer", "minimum": 128, "default": 256},
                        "n_phases": {"type": "integer", "minimum": 3, "maximum": 4, "default": 3},
                        "noise": {"type": "number", "minimum": 0, "default": 0.0},
                        "sharpness": {"type": "number", "exclusiveMinimum": 0, "default": 4.0},
                        "textures": {**_TEXTURES, "default": [[1 / 12, 0.0], [0.1, 30.0]]},
                    }
                ),
            }
        ),
        "patch": _obj(
            {
                "side": {"type": "integer", "minimum": 3, "default": 16},
                "stride": {**_POS_INT, "default": 2},
            }
        ),
        "model": _obj(
            {
                "n_content": {**_POS_INT, "default": 2},
                "k": {"type": "number", "exclusiveMinimum": 0, "maximum": 1, "default": 0.5},
                "hidden": {"type": "array", "items": _POS_INT, "minItems": 1, "default": [128, 128]},
                "decoder_hidden": {
                    "type": ["array", "null"],
                    "items": _POS_INT,
                    "minItems": 1,
                    "default": None,
                    "description": "null reuses the encoder sizes",
                },
                "likelihood": {"enum": ["bernoulli", "mse"], "default": "bernoulli"},
            }
        ),
        "train": _obj(
            {
                "epochs": {**_POS_INT, "default": 50},
                "block_grid": {
                    "type": "array",
                    "items": _POS_INT,
                    "minItems": 2,
                    "maxItems": 2,
                    "default": [16, 16],
                },
                "schedule": _obj(
                    {
                        "beta_start": {"type": "number", "minimum": 0, "default": 0.05},
                        "beta_end": {"type": "number", "minimum": 0, "default": 1.0},
                        "ramp_epochs": {**_POS_INT, "description": "default: epochs"},
                        "total_epochs": {**_POS_INT, "description": "default: epochs"},
                    }
                ),
                "optimizer": _obj(
                    {
                        "learning_rate": {"type": "number", "exclusiveMinimum": 0, "default": 1e-3},
                        "adam_beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1, "default": 0.9},
                        "adam_beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1, "default": 0.999},
                        "adam_eps": {"type": "number", "exclusiveMinimum": 0, "default": 1e-8},
                    }
                ),
                "seed": {"type": "integer", "minimum": 0, "default": 0},
                "snapshot_every": {"type": "integer", "minimum": 0, "default": 0},
                "snapshot_denoise": {"type": "number", "minimum": 0, "default": 0.1},
                "log_wall_time": {"type": "boolean", "default": False},
                "physics_warmup": {"type": "integer", "minimum": 0, "default": 0},
            }
        ),
        "physics": _obj(
            {
                "kind": {"enum": ["none", "sl1", "sl2", "SL1", "SL2"], "default": "none"},
                "w": {"type": "number", "minimum": 0, "maximum": 0.5, "default": 0.1},
                "denoise": {
                    "oneOf": [{"type": "number", "minimum": 0}, {"const": "auto_std"}],
                    "default": 0.1,
                },
                "central_window": {
                    **_PAIR,
                    "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
                    "default": [0.125, 0.125],
                },
                "map_mask": {
                    "type": ["array", "null"],
                    "items": {"type": "integer", "minimum": 0},
                    "minItems": 1,
                    "default": None,
                    "description": "content-latent indices; null selects all",
                },
                "sign": {"enum": ["minimize", "maximize"], "default": "minimize"},
                "sl1_reduction": {"enum": ["mean", "sum"], "default": "mean"},
                "spatial_sigma": {"type": "number", "exclusiveMinimum": 0, "default": 1.0},
                "radius": {**_POS_INT, "default": 2},
                "detach_extrema": {"type": "boolean", "default": False},
            }
        ),
        "segment": _obj(
            {
                "denoise": {"type": "number", "minimum": 0, "default": 0.1},
                "mode": {"enum": ["binary", "multi"], "default": "binary"},
                "n_classes": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 2, "maximum": 4},
                    "minItems": 1,
                    "default": [3],
                    "description": "class counts for multi mode",
                },
            }
        ),
        "output": {"type": "string", "default": "run"},
    }
)


def _fill_defaults(schema: dict, inst: dict) -> dict:
    for key, sub in schema.get("properties", {}).items():
        if key not in inst and "default" in sub:
            inst[key] = copy.deepcopy(sub["default"])
        if sub.get("type") == "object" and isinstance(inst.get(key), dict):
            _fill_defaults(sub, inst[key])
    return inst


def load_run_config(path: str | os.PathLike, seed: int | None = None) -> dict:
    """Parse, validate and default-fill a RunConfig JSON document."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(raw, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(EXIT_CONFIG, f"config {where}: {exc.message}") from None
    cfg = _fill_defaults(RUN_SCHEMA, raw)
    if seed is not None:
        cfg["train"]["seed"] = seed
    sched = cfg["train"]["schedule"]
    sched.setdefault("ramp_epochs", cfg["train"]["epochs"])
    sched.setdefault("total_epochs", cfg["train"]["epochs"])
    return cfg


def train_config_from_run(cfg: dict) -> trainer.TrainConfig:
    d = dict(cfg["train"])
    d["physics"] = cfg["physics"]
    d["model"] = cfg["model"]
    try:
        return trainer.TrainConfig.from_dict(d)
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid training config: {exc}") from None


# ------------------------------------------------------------------ helpers


def _read_image(path: str) -> np.ndarray:
    if path.endswith(".pvtn"):
        img = dp.read_tensor(path)
        if img.ndim != 2:
            raise CliError(EXIT_CONFIG, f"{path}: expected a 2D tensor, got shape {img.shape}")
        lo, hi = img.min(), img.max()
        return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return dp.read_pgm(path)


def read_label_pgm(path: str) -> np.ndarray:
    """Label image from grey levels: the k-th distinct level becomes label k."""
    raw, _ = dp.read_pgm_raw(path)
    _, labels = np.unique(raw, return_inverse=True)
    return labels.reshape(raw.shape)


def _synth(synth_cfg: dict) -> dp.SyntheticTruth:
    common = dict(
        seed=synth_cfg["seed"],
        side=synth_cfg["side"],
        noise=synth_cfg["noise"],
        sharpness=synth_cfg["sharpness"],
    )
    textures = tuple(tuple(t) for t in synth_cfg["textures"])
    if synth_cfg["kind"] == "two-phase":
        return dp.synth_two_phase(textures=textures, **common)
    if len(textures) < synth_cfg["n_phases"]:
        textures = dp.DEFAULT_TEXTURES
    return dp.synth_multiphase(n_phases=synth_cfg["n_phases"], textures=textures, **common)


def _load_field(path: str) -> segmentation.LatentField:
    maps = dp.read_tensor(path)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.ndim != 3:
        raise CliError(EXIT_CONFIG, f"{path}: latent field must be 2D or 3D, got shape {maps.shape}")
    return segmentation.LatentField(maps, maps.shape[1:])


def _write_json(path: Path, obj) -> None:
    dp._atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------- commands


def cmd_synth(a) -> None:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    synth_cfg = _fill_defaults(RUN_SCHEMA["properties"]["data"]["properties"]["synth"], {})
    synth_cfg.update(kind=a.kind, seed=a.seed, side=a.side, n_phases=a.n_phases)
    for key in ("noise", "sharpness"):
        if getattr(a, key) is not None:
            synth_cfg[key] = getattr(a, key)
    truth = _synth(synth_cfg)
    dp.write_pgm(out / "micrograph.pgm", truth.micrograph.pixels, maxval=65535)
    dp.write_tensor(out / "micrograph.pvtn", truth.micrograph.pixels)
    lm = segmentation.LabelMap(truth.phase_mask, truth.n_phases)
    dp.write_pgm_levels(out / "truth.pgm", segmentation.label_levels(lm))
    pix = segmentation.LabelMap(truth.pixel_mask, truth.n_phases)
    dp.write_pgm_levels(out / "truth_pixels.pgm", segmentation.label_levels(pix))
    _write_json(out / "meta.json", truth.meta)
    log.info("wrote %s (%d phases)", out, truth.n_phases)


def cmd_extract(a) -> None:
    ps = dp.extract_patches(dp.Micrograph(_read_image(a.image), a.image), a.side, a.stride)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    dp.save_patchset(a.out, ps)
    log.info("extracted %d patches on a %dx%d grid", len(ps), *ps.grid_shape)


def cmd_train(a) -> None:
    cfg = load_run_config(a.config, a.seed)
    if a.out:
        cfg["output"] = a.out
    tcfg = train_config_from_run(cfg)
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    data = cfg["data"]
    if "input" in data:
        micro = dp.Micrograph(_read_image(data["input"]), data["input"])
    else:
        truth = _synth(data["synth"])
        micro = truth.micrograph
        grid_truth = dp.grid_majority(truth.pixel_mask, cfg["patch"]["side"], cfg["patch"]["stride"], truth.n_phases)
        lm = segmentation.LabelMap(grid_truth, truth.n_phases)
        dp.write_pgm_levels(out / "truth.pgm", segmentation.label_levels(lm))
    ps = dp.extract_patches(micro, cfg["patch"]["side"], cfg["patch"]["stride"])
    dp.save_patchset(out / "patches", ps)
    _write_json(out / "config.json", cfg)
    resume = None
    ckpt = out / "checkpoint.pvae"
    if a.resume and ckpt.exists():
        resume = trainer.load_checkpoint(ckpt)
    res = trainer.train(ps, tcfg, run_dir=out, resume=resume)
    field = trainer.embed(res.params, ps)
    dp.write_tensor(out / "field.pvtn", field.maps)
    seg = cfg["segment"]
    write_segmentations(field, out / "segment", seg["denoise"], seg["mode"], seg["n_classes"])
    log.info("trained %d epochs; final vae loss %.4f", len(res.history), res.history[-1][2])


def cmd_embed(a) -> None:
    params = trainer.load_params(a.checkpoint)
    ps = dp.load_patchset(a.patches)
    field = trainer.embed(params, ps)
    dp.write_tensor(a.out, field.maps)


def write_segmentations(field: segmentation.LatentField, out: Path, denoise: float, mode: str, n_classes) -> None:
    out.mkdir(parents=True, exist_ok=True)
    runs = [("binary", 2)] if mode == "binary" else [("multi", n) for n in n_classes]
    for kind, n in runs:
        labels = segmentation.segment_pipeline(field, denoise, mode=kind, n_classes=n)
        tag = "binary" if kind == "binary" else f"multi{n}"
        for j, lm in enumerate(labels):
            dp.write_pgm_levels(out / f"z{j + 1}_{tag}_labels.pgm", segmentation.label_levels(lm))
            dp.write_pgm(out / f"z{j + 1}_{tag}_overlay.pgm", segmentation.boundary_overlay(field.maps[j], lm))


def cmd_segment(a) -> None:
    write_segmentations(_load_field(a.field), Path(a.out), a.denoise, a.mode, a.n_classes)


def cmd_metrics(a) -> None:
    field = _load_field(a.field)
    rows = [
        ["all", "edge_magnitude", repr(phys_loss.mean_edge_magnitude(field.maps))],
        ["all", "off_center_log_fraction", repr(phys_loss.off_center_fraction(field.maps))],
        ["all", "off_center_energy_fraction", repr(phys_loss.off_center_energy_fraction(field.maps))],
    ]
    for j, m in enumerate(field.maps):
        rows.append([f"z{j + 1}", "edge_magnitude", repr(phys_loss.mean_edge_magnitude([m]))])
        rows.append([f"z{j + 1}", "off_center_energy_fraction", repr(phys_loss.off_center_energy_fraction([m]))])
    if a.truth:
        truth = read_label_pgm(a.truth)
        if truth.shape != tuple(field.grid_shape):
            raise CliError(EXIT_CONFIG, f"truth shape {truth.shape} != field grid {tuple(field.grid_shape)}")
        n = int(truth.max()) + 1
        mode = "binary" if n == 2 else "multi"
        for j, lm in enumerate(segmentation.segment_pipeline(field, a.denoise, mode=mode, n_classes=n)):
            ious, _ = segmentation.iou_per_class(lm.labels, truth)
            for c, v in enumerate(ious):
                rows.append([f"z{j + 1}", f"iou_class{c}", repr(float(v))])
            rows.append([f"z{j + 1}", "iou_mean", repr(float(np.mean(ious)))])
            rows.append([f"z{j + 1}", "components", str(segmentation.connected_components(lm.labels))])
    if a.out:
        Path(a.out).parent.mkdir(parents=True, exist_ok=True)
        dp.write_csv(a.out, ["map", "metric", "value"], rows)
    else:
        for r in rows:
            print(",".join(r))


def cmd_manifold(a) -> None:
    params = trainer.load_params(a.checkpoint)
    try:
        img = vae_core.decode_manifold(params, (a.lo, a.hi), a.m)
    except vae_core.UnsupportedLayoutError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    dp.write_pgm(a.out, img)


def cmd_render(a) -> None:
    arr = dp.read_tensor(a.input)
    if arr.ndim == 3:
        if not 0 <= a.index < arr.shape[0]:
            raise CliError(EXIT_CONFIG, f"index {a.index} out of range for {arr.shape[0]} maps")
        arr = arr[a.index]
    if arr.ndim != 2:
        raise CliError(EXIT_CONFIG, f"render needs a 2D array (or 3D with --index), got shape {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    img = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    dp.write_pgm(a.out, img)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="physvae", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", help="write a synthetic micrograph with its truth mask")
    s.add_argument("--kind", choices=["two-phase", "multiphase"], default="two-phase", help="generator")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--side", type=int, default=256, help="image side in pixels (>= 128)")
    s.add_argument("--n-phases", type=int, default=3, choices=[3, 4], help="phases for multiphase")
    s.add_argument("--noise", type=float, default=None, help="Gaussian noise sigma (default 0)")
    s.add_argument("--sharpness", type=float, default=None, help="lattice spot exponent (default 4)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="cut a micrograph into a patch set")
    s.add_argument("--image", required=True, help="PGM or PVTN micrograph")
    s.add_argument("--side", type=int, default=16, help="patch side")
    s.add_argument("--stride", type=int, default=2, help="patch stride")
    s.add_argument("--out", required=True, help="output prefix (writes .pvtn, _coords.csv, .json)")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train a model from a JSON run config")
    s.add_argument("--config", required=True, help="RunConfig JSON")
    s.add_argument("--seed", type=int, default=None, help="override train.seed")
    s.add_argument("--out", default=None, help="override the output directory")
    s.add_argument("--resume", action="store_true", help="continue from the run's checkpoint if present")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", help="encode a patch set into a latent field")
    s.add_argument("--checkpoint", required=True, help="model checkpoint (.pvae)")
    s.add_argument("--patches", required=True, help="patch-set prefix")
    s.add_argument("--out", required=True, help="output latent field (.pvtn)")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("segment", help="segment a latent field into label maps")
    s.add_argument("--field", required=True, help="latent field (.pvtn)")
    s.add_argument("--denoise", type=float, default=0.1, help="bilateral range sigma")
    s.add_argument("--mode", choices=["binary", "multi"], default="binary", help="Otsu+Chan-Vese or multi-Otsu")
    s.add_argument("--n-classes", type=int, nargs="+", default=[3], choices=[2, 3, 4], help="class counts for multi mode")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("metrics", help="full-field smoothness metrics and IoU against a truth mask")
    s.add_argument("--field", required=True, help="latent field (.pvtn)")
    s.add_argument("--truth", default=None, help="truth label PGM at patch-grid resolution")
    s.add_argument("--denoise", type=float, default=0.1, help="bilateral range sigma for segmentation")
    s.add_argument("--out", default=None, help="CSV path (default: print to stdout)")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("manifold", help="decode a grid of content latents into one image")
    s.add_argument("--checkpoint", required=True, help="model checkpoint (.pvae)")
    s.add_argument("--lo", type=float, default=-3.0, help="lower latent bound")
    s.add_argument("--hi", type=float, default=3.0, help="upper latent bound")
    s.add_argument("--m", type=int, default=12, help="tiles per side")
    s.add_argument("--out", required=True, help="output PGM")
    s.set_defaults(func=cmd_manifold)

    s = sub.add_parser("render", help="min-max scale a PVTN array to PGM")
    s.add_argument("--in", dest="input", required=True, help="input .pvtn")
    s.add_argument("--index", type=int, default=0, help="map index for 3D arrays")
    s.add_argument("--out", required=True, help="output PGM")
    s.set_defaults(func=cmd_render)
    return p


def _setup_logging() -> None:
    level = os.environ.get("PHYSVAE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logger = logging.getLogger("physvae")
    logger.handlers[:] = []
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(levels.get(level, logging.ERROR))
    logger.propagate = False


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except trainer.TrainingAborted as exc:
        code, msg = EXIT_ABORT, str(exc)
    except dp.FormatError as exc:
        code, msg = EXIT_IO, str(exc)
    except OSError as exc:
        code, msg = EXIT_IO, f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc)
    except (ValueError, TypeError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    else:
        return EXIT_OK
    print(f"ERROR {code}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
