"""Command-line front end.

Subcommands: gradcheck, render, fit, train, sample, edit, metrics. Every run
resolves its configuration from hard defaults, then an optional --config JSON
file, then explicit flags (flags win), and echoes the result as one JSON line
to stderr; a run is reproducible from that echo alone.

Exit codes: 0 success, 1 validation failure, 2 I/O or file-format error,
3 numerical abort.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from .errors import FileFormatError, NumericalAbort, ValidationError
from .fileio import (
    list_views, load_checkpoint, load_view, read_point_ply, read_pose_json,
    read_splat_ply, save_checkpoint, write_csv, write_point_ply, write_ppm,
    write_splat_ply,
)
from .fitting import FitOptions, fit_splats, init_scene_from_views
from .flow import LatentPointCloud
from .losses import chamfer_distance, psnr
from .nets import DenoiserConfig, init_denoiser
from .rasterizer import RasterizeOptions, rasterize
from .surfels import utilization_ratio
from .synthetic import make_shape_dataset, sphere_fit_task
from .training import (
    TrainConfig, cascade_sample, pack_training_state, train_stage1,
    train_stage2, unpack_training_state,
)

CHAMFER_NOTE = ("symmetric sum of per-set means of squared Euclidean "
                "nearest-neighbor distances")

DEFAULTS = {
    "gradcheck": {"eps": 1e-4},
    "render": {"scene": None, "camera": None, "out": None, "losses": None,
               "aux": False, "background": "1,1,1"},
    "fit": {"views": None, "synthetic": None, "splats": 256, "iters": 2000,
            "out": None, "losses_csv": None, "lambda_d": 1000.0,
            "lambda_n": 0.2, "width": 64, "height": 64, "tau": 0.005},
    "train": {"dataset": None, "synthetic": None, "stage": None, "out": None,
              "steps": 2000, "lr": 2e-3, "net_width": 32, "layers": 2,
              "heads": 4, "drop_prob": 0.1, "schedule": "gvp",
              "clouds_per_class": 8, "points": 64, "ckpt_every": 500,
              "log_csv": None, "resume": None, "no_anchor_injection": False,
              "export_dataset": None},
    "sample": {"stage1": None, "stage2": None, "label": None, "steps": 250,
               "cfg": 4.0, "out": None, "resample_h": None},
    "edit": {"anchors": None, "transform": None, "stage2": None,
             "label": None, "steps": 250, "cfg": 4.0, "out": None},
    "metrics": {"scene": None, "cloud": None, "reference": None,
                "views": None, "tau": 0.005, "out": None},
}

COMMON = {"seed": 0, "deterministic": False, "threads": None, "config": None}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="surfelflow")
    sub = ap.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--deterministic", action="store_true", default=S)
        p.add_argument("--threads", type=int, default=S)
        p.add_argument("--config", default=S, help="JSON file of flag values")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--eps", type=float, default=S, help="FD step size")
    common(p)

    p = sub.add_parser("render", help="rasterize a splat scene")
    p.add_argument("scene", nargs="?", default=S)
    p.add_argument("camera", nargs="?", default=S)
    p.add_argument("--out", default=S, help="output PPM path")
    p.add_argument("--losses", default=S, help="write depth/normal loss CSV here")
    p.add_argument("--aux", action="store_true", default=S,
                   help="also write depth/normal/alpha images")
    p.add_argument("--background", default=S, help="R,G,B in [0,1]")
    common(p)

    p = sub.add_parser("fit", help="fit splats to posed views")
    p.add_argument("views", nargs="?", default=S, help="directory of views")
    p.add_argument("--synthetic", choices=["sphere"], default=S)
    p.add_argument("--splats", type=int, default=S)
    p.add_argument("--iters", type=int, default=S)
    p.add_argument("--out", default=S, help="output scene PLY")
    p.add_argument("--losses-csv", dest="losses_csv", default=S)
    p.add_argument("--lambda-d", dest="lambda_d", type=float, default=S)
    p.add_argument("--lambda-n", dest="lambda_n", type=float, default=S)
    p.add_argument("--width", type=int, default=S, help="synthetic view width")
    p.add_argument("--height", type=int, default=S, help="synthetic view height")
    p.add_argument("--tau", type=float, default=S, help="utilization threshold")
    common(p)

    p = sub.add_parser("train", help="train a flow-matching stage")
    p.add_argument("dataset", nargs="?", default=S, help="dataset directory")
    p.add_argument("--stage", type=int, choices=[1, 2], default=S)
    p.add_argument("--synthetic", choices=["shapes"], default=S)
    p.add_argument("--out", default=S, help="checkpoint directory")
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--net-width", dest="net_width", type=int, default=S)
    p.add_argument("--layers", type=int, default=S)
    p.add_argument("--heads", type=int, default=S)
    p.add_argument("--drop-prob", dest="drop_prob", type=float, default=S)
    p.add_argument("--schedule", choices=["gvp", "linear"], default=S)
    p.add_argument("--clouds-per-class", dest="clouds_per_class", type=int, default=S)
    p.add_argument("--points", type=int, default=S)
    p.add_argument("--ckpt-every", dest="ckpt_every", type=int, default=S)
    p.add_argument("--log-csv", dest="log_csv", default=S)
    p.add_argument("--resume", default=S, help="checkpoint directory to resume")
    p.add_argument("--no-anchor-injection", dest="no_anchor_injection",
                   action="store_true", default=S)
    p.add_argument("--export-dataset", dest="export_dataset", default=S,
                   help="also write the synthetic dataset here")
    common(p)

    p = sub.add_parser("sample", help="sample the two-stage cascade")
    p.add_argument("--stage1", default=S, help="stage-1 checkpoint dir")
    p.add_argument("--stage2", default=S, help="stage-2 checkpoint dir")
    p.add_argument("--label", type=int, default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--cfg", type=float, default=S, help="guidance scale")
    p.add_argument("--out", default=S, help="output prefix")
    p.add_argument("--resample-h", dest="resample_h", type=int, default=S,
                   help="redo stage 2 with this seed; anchors unchanged")
    common(p)

    p = sub.add_parser("edit", help="edit anchors, regenerate features")
    p.add_argument("--anchors", default=S, help="input anchor PLY")
    p.add_argument("--transform", default=S, help="transform JSON path")
    p.add_argument("--stage2", default=S, help="stage-2 checkpoint dir")
    p.add_argument("--label", type=int, default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--cfg", type=float, default=S)
    p.add_argument("--out", default=S, help="output prefix")
    common(p)

    p = sub.add_parser("metrics", help="utilization / Chamfer / PSNR report")
    p.add_argument("--scene", default=S, help="splat scene PLY")
    p.add_argument("--cloud", default=S, help="point cloud PLY")
    p.add_argument("--reference", default=S, help="reference cloud PLY")
    p.add_argument("--views", default=S, help="views dir for per-view PSNR")
    p.add_argument("--tau", type=float, default=S)
    p.add_argument("--out", default=S, help="write the JSON report here too")
    common(p)

    return ap


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags; rejects unknown file keys."""
    resolved = {**DEFAULTS[command], **COMMON}
    given = {k: v for k, v in vars(args).items() if k != "command"}
    path = given.pop("config", None)
    if path is not None:
        try:
            with open(path) as f:
                file_vals = json.load(f)
        except OSError as e:
            raise FileFormatError(f"{path}: {e.strerror or e}") from e
        except json.JSONDecodeError as e:
            raise FileFormatError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(file_vals, dict):
            raise FileFormatError(f"{path}: config must be a JSON object")
        unknown = set(file_vals) - set(resolved)
        if unknown:
            raise ValidationError(
                f"{path}: unknown config keys {sorted(unknown)}")
        resolved.update(file_vals)
        resolved["config"] = path
    resolved.update(given)
    return resolved


def _setup_threads(cfg: dict):
    if cfg["threads"] is None:
        env = os.environ.get("SURFELFLOW_THREADS")
        cfg["threads"] = int(env) if env else 1
    if cfg["threads"] < 1:
        raise ValidationError(f"--threads must be >= 1, got {cfg['threads']}")
    os.environ["SURFELFLOW_THREADS"] = str(cfg["threads"])
    if cfg["threads"] > 1:
        import numba
        numba.set_num_threads(min(cfg["threads"], numba.config.NUMBA_NUM_THREADS))


def _echo(cfg: dict, command: str):
    print(json.dumps({"command": command, **cfg}, sort_keys=True), file=sys.stderr)


def _require(cfg: dict, *keys: str):
    for k in keys:
        if cfg[k] is None:
            raise ValidationError(f"missing required option --{k.replace('_', '-')}")


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(cfg: dict) -> int:
    from .gradcheck import run_all

    if not 1e-7 <= cfg["eps"] <= 1e-3:
        raise ValidationError(f"--eps must lie in [1e-7, 1e-3], got {cfg['eps']}")
    started = time.perf_counter()
    report = run_all(eps=cfg["eps"])
    elapsed = time.perf_counter() - started
    ok = all(row["passed"] for row in report)
    for row in report:
        print(json.dumps(row))
    print(f"eps {cfg['eps']:g}  elapsed {elapsed:.1f}s  "
          f"{'PASS' if ok else 'FAIL'}")
    if not ok:
        worst = max(report, key=lambda r: r["max_rel_error"])
        print(f"failing suite: {worst['suite']}"
              + (f" (op {worst['worst_op']})" if "worst_op" in worst else ""),
              file=sys.stderr)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# render

def _parse_background(text: str) -> np.ndarray:
    try:
        bg = np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError:
        raise ValidationError(f"--background must be R,G,B, got {text!r}")
    if bg.shape != (3,) or bg.min() < 0 or bg.max() > 1:
        raise ValidationError(f"--background must be three values in [0,1], got {text!r}")
    return bg


def cmd_render(cfg: dict) -> int:
    _require(cfg, "scene", "camera", "out")
    scene = read_splat_ply(cfg["scene"])
    pose, intr = read_pose_json(cfg["camera"])
    opts = RasterizeOptions(background=_parse_background(cfg["background"]),
                            retain_record=bool(cfg["losses"]))
    out = rasterize(scene, pose, intr, opts)
    write_ppm(cfg["out"], out.color)
    stem = cfg["out"][:-4] if cfg["out"].endswith(".ppm") else cfg["out"]
    if cfg["aux"]:
        dmax = out.depth.max()
        write_ppm(stem + ".depth.ppm",
                  np.repeat((out.depth / (dmax if dmax > 0 else 1.0))[..., None], 3, axis=2))
        write_ppm(stem + ".normal.ppm", 0.5 * (np.clip(out.normal, -1, 1) + 1.0))
        write_ppm(stem + ".alpha.ppm", np.repeat(out.alpha[..., None], 3, axis=2))
    if cfg["losses"]:
        from .losses import distortion_loss, normal_loss

        ld = distortion_loss(out)
        # self-consistency target: the blended normal map, renormalized per
        # covered pixel, measures per-hit normal spread
        norms = np.linalg.norm(out.normal, axis=-1, keepdims=True)
        target = np.where(norms > 1e-12, out.normal / np.where(norms > 0, norms, 1.0), 0.0)
        ln = normal_loss(out, target)
        write_csv(cfg["losses"], [{"ld": ld, "ln": ln}], fields=("ld", "ln"))
    print(f"rendered {intr.width}x{intr.height}, {len(scene.splats)} splats -> {cfg['out']}")
    return 0


# ---------------------------------------------------------------------------
# fit

def cmd_fit(cfg: dict) -> int:
    _require(cfg, "out")
    if (cfg["views"] is None) == (cfg["synthetic"] is None):
        raise ValidationError("fit needs a views directory or --synthetic sphere")
    if cfg["synthetic"] is not None:
        train_views, held_views = sphere_fit_task(cfg["width"], cfg["height"])
    else:
        names = list_views(cfg["views"])
        if not names:
            raise ValidationError(f"{cfg['views']}: no views found")
        train_views = [load_view(cfg["views"], n) for n in names]
        held_views = []

    init = init_scene_from_views(train_views, cfg["splats"], seed=cfg["seed"])
    opts = FitOptions(iters=cfg["iters"], lambda_d=cfg["lambda_d"],
                      lambda_n=cfg["lambda_n"])
    started = time.perf_counter()
    scene, rows = fit_splats(train_views, init, opts)
    elapsed = time.perf_counter() - started

    write_splat_ply(cfg["out"], scene)
    losses_csv = cfg["losses_csv"] or (cfg["out"] + ".losses.csv")
    write_csv(losses_csv, rows, fields=("iter", "l1", "ld", "ln", "total"))

    report = {"minutes": round(elapsed / 60.0, 2),
              "utilization": utilization_ratio(scene, tau=cfg["tau"]),
              "tau": cfg["tau"]}
    for tag, views in (("train", train_views), ("held", held_views)):
        for i, v in enumerate(views):
            out = rasterize(scene, v.pose, v.intrinsics, RasterizeOptions())
            report[f"psnr_{tag}{i}"] = round(psnr(out.color, v.image), 3)
    print(json.dumps(report, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# train

def _load_dataset_dir(path: str, stage: int):
    index_path = os.path.join(path, "index.json")
    try:
        with open(index_path) as f:
            index = json.load(f)
    except OSError as e:
        raise FileFormatError(f"{index_path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{index_path}: invalid JSON ({e})") from e
    items = index.get("items")
    if not isinstance(items, list) or not items:
        raise FileFormatError(f"{index_path}: needs a non-empty 'items' list")
    anchors, feats, labels = [], [], []
    for item in items:
        if not isinstance(item.get("label"), int):
            raise FileFormatError(f"{index_path}: every item needs an integer label")
        pos, f = read_point_ply(os.path.join(path, item["file"]))
        anchors.append(pos)
        feats.append(f)
        labels.append(item["label"])
    shapes = {a.shape for a in anchors}
    if len(shapes) != 1:
        raise ValidationError(f"{path}: clouds differ in point count: {sorted(shapes)}")
    if stage == 2:
        if any(f is None for f in feats):
            raise ValidationError(f"{path}: stage 2 needs feature columns in every cloud")
        fshapes = {f.shape for f in feats}
        if len(fshapes) != 1:
            raise ValidationError(f"{path}: clouds differ in feature width: {sorted(fshapes)}")
        feats = np.stack(feats)
    else:
        feats = None
    num_classes = index.get("num_classes", max(labels) + 1)
    return np.stack(anchors), feats, np.array(labels, dtype=np.int64), int(num_classes)


def _export_dataset(path: str, anchors, feats, labels, num_classes):
    os.makedirs(path, exist_ok=True)
    items = []
    for i in range(len(labels)):
        name = f"cloud_{i:03d}.ply"
        write_point_ply(os.path.join(path, name), anchors[i],
                        feats[i] if feats is not None else None)
        items.append({"file": name, "label": int(labels[i])})
    with open(os.path.join(path, "index.json"), "w") as f:
        json.dump({"num_classes": int(num_classes), "items": items}, f, indent=1)
        f.write("\n")


def _model_config(cfg: dict, stage: int, n_points: int, in_dim: int,
                  num_classes: int) -> dict:
    return {
        "stage": stage, "schedule": cfg["schedule"], "n_points": n_points,
        "in_dim": in_dim, "num_classes": num_classes,
        "width": cfg["net_width"], "layers": cfg["layers"], "heads": cfg["heads"],
        "anchor_injection": stage == 2 and not cfg["no_anchor_injection"],
        "seed": cfg["seed"], "steps": cfg["steps"], "lr": cfg["lr"],
        "drop_prob": cfg["drop_prob"],
    }


ARCH_KEYS = ("stage", "schedule", "n_points", "in_dim", "num_classes",
             "width", "layers", "heads", "anchor_injection", "seed", "steps",
             "lr", "drop_prob")


def load_model_checkpoint(path: str, stage: int = None):
    """Returns (params, optimizer flat dict or None, config). Validates the
    parameter shapes against a fresh init of the stored architecture."""
    flat, config = load_checkpoint(path)
    for key in ARCH_KEYS:
        if key not in config:
            raise FileFormatError(f"{path}: checkpoint config missing {key!r}")
    if stage is not None and config["stage"] != stage:
        raise ValidationError(
            f"{path}: stage-{config['stage']} checkpoint where stage {stage} is needed")
    dcfg = DenoiserConfig(layers=config["layers"], heads=config["heads"],
                          width=config["width"])
    template = init_denoiser(dcfg, in_dim=config["in_dim"],
                             num_classes=config["num_classes"], seed=0,
                             anchor_injection=config["anchor_injection"])
    params = {k: v for k, v in flat.items() if not k.startswith("_opt.")}
    if sorted(params) != sorted(template):
        raise ValidationError(
            f"{path}: checkpoint tensors do not match the stored architecture")
    for k in params:
        if params[k].shape != template[k].shape:
            raise ValidationError(
                f"{path}: {k} has shape {params[k].shape}, architecture wants "
                f"{template[k].shape}")
    return params, flat, config, dcfg


def cmd_train(cfg: dict) -> int:
    _require(cfg, "stage", "out")
    if (cfg["dataset"] is None) == (cfg["synthetic"] is None):
        raise ValidationError("train needs a dataset directory or --synthetic shapes")
    stage = cfg["stage"]
    if cfg["synthetic"] is not None:
        anchors, feats, labels = make_shape_dataset(
            cfg["clouds_per_class"], cfg["points"], seed=cfg["seed"])
        num_classes = 3
        if cfg["export_dataset"]:
            _export_dataset(cfg["export_dataset"], anchors, feats, labels, num_classes)
    else:
        anchors, feats, labels, num_classes = _load_dataset_dir(cfg["dataset"], stage)

    # log_every=1 so the CSV and the drop statistic cover every step
    tcfg = TrainConfig(steps=cfg["steps"], lr=cfg["lr"], seed=cfg["seed"],
                       drop_prob=cfg["drop_prob"], schedule=cfg["schedule"],
                       log_every=1)
    dcfg = DenoiserConfig(layers=cfg["layers"], heads=cfg["heads"],
                          width=cfg["net_width"])
    in_dim = 3 if stage == 1 else feats.shape[2]
    model_cfg = _model_config(cfg, stage, anchors.shape[1], in_dim, num_classes)

    resume = None
    if cfg["resume"]:
        params0, flat0, old_cfg, _ = load_model_checkpoint(cfg["resume"], stage=stage)
        mismatched = [k for k in ARCH_KEYS if old_cfg[k] != model_cfg[k]]
        if mismatched:
            raise ValidationError(
                f"{cfg['resume']}: checkpoint config mismatch on {mismatched}")
        p0, opt0 = unpack_training_state(flat0, old_cfg["adam_step"])
        resume = (p0, opt0, old_cfg["next_step"])

    def save(next_step, params, state):
        if next_step % cfg["ckpt_every"] == 0 and next_step < cfg["steps"]:
            save_checkpoint(os.path.join(cfg["out"], f"step_{next_step:06d}"),
                            pack_training_state(params, state),
                            {**model_cfg, "next_step": next_step,
                             "adam_step": state.step})

    started = time.perf_counter()
    if stage == 1:
        params, rows, state = train_stage1(
            anchors, labels, dcfg, tcfg, num_classes=num_classes,
            resume=resume, checkpoint_cb=save)
    else:
        params, rows, state = train_stage2(
            anchors, feats, labels, dcfg, tcfg, num_classes=num_classes,
            anchor_injection=model_cfg["anchor_injection"],
            resume=resume, checkpoint_cb=save)
    elapsed = time.perf_counter() - started

    save_checkpoint(cfg["out"], pack_training_state(params, state),
                    {**model_cfg, "next_step": cfg["steps"], "adam_step": state.step})
    log_csv = cfg["log_csv"] or os.path.join(cfg["out"], "loss.csv")
    write_csv(log_csv, [{**r, "dropped": int(r["dropped"])} for r in rows],
              fields=("step", "loss", "dropped"))

    # epoch = one expected pass over the dataset; rates are cumulative so the
    # last line is the whole-run statistic
    epoch_len = max(1, len(labels))
    drops = 0
    seen = 0
    for r in rows:
        seen += 1
        drops += int(r["dropped"])
        if seen % epoch_len == 0 or r is rows[-1]:
            epoch = (seen + epoch_len - 1) // epoch_len
            print(f"epoch {epoch}: cumulative drop rate {drops / seen:.4f}",
                  file=sys.stderr)
    first = rows[0]["loss"]
    last = rows[-1]["loss"]
    print(json.dumps({"stage": stage, "steps": cfg["steps"],
                      "minutes": round(elapsed / 60.0, 2),
                      "first_loss": round(first, 6), "last_loss": round(last, 6),
                      "drop_rate": round(drops / max(1, seen), 4),
                      "checkpoint": cfg["out"]}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# sample

def _check_cascade_pair(path1, config1, path2, config2):
    for key in ("n_points", "num_classes", "schedule"):
        if config1[key] != config2[key]:
            raise ValidationError(
                f"checkpoint config mismatch: {key} is {config1[key]} in {path1} "
                f"but {config2[key]} in {path2}")
    if config1["in_dim"] != 3:
        raise ValidationError(f"{path1}: stage-1 checkpoint must diffuse 3D anchors")


def _write_latent(prefix: str, latent: LatentPointCloud):
    write_point_ply(prefix + ".x.ply", latent.anchors)
    write_point_ply(prefix + ".xh.ply", latent.anchors, latent.features)


def cmd_sample(cfg: dict) -> int:
    _require(cfg, "stage1", "stage2", "label", "out")
    p1, _, c1, d1 = load_model_checkpoint(cfg["stage1"], stage=1)
    p2, _, c2, d2 = load_model_checkpoint(cfg["stage2"], stage=2)
    _check_cascade_pair(cfg["stage1"], c1, cfg["stage2"], c2)
    if not 0 <= cfg["label"] < c1["num_classes"]:
        raise ValidationError(
            f"--label must lie in [0, {c1['num_classes']}), got {cfg['label']}")
    seed2 = cfg["seed"] + 1 if cfg["resample_h"] is None else cfg["resample_h"]
    latent = cascade_sample(p1, d1, p2, d2, cond=cfg["label"],
                            n_points=c1["n_points"], feature_dim=c2["in_dim"],
                            seeds=(cfg["seed"], seed2), steps=cfg["steps"],
                            scale=cfg["cfg"])
    _write_latent(cfg["out"], latent)
    print(f"wrote {cfg['out']}.x.ply and {cfg['out']}.xh.ply "
          f"({latent.n_points} points, {latent.feature_dim} features)")
    return 0


# ---------------------------------------------------------------------------
# edit

def _rotation_about(axis, angle_deg: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        raise ValidationError("rotation axis must be nonzero")
    x, y, z = axis / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    th = np.deg2rad(angle_deg)
    return np.eye(3) + np.sin(th) * k + (1 - np.cos(th)) * (k @ k)


def apply_transforms(anchors: np.ndarray, spec: dict) -> np.ndarray:
    """Sequential region edits: each op selects a box (default: everything)
    and applies an optional rotation about a pivot then a translation."""
    ops = spec.get("ops")
    if not isinstance(ops, list):
        raise ValidationError("transform JSON needs an 'ops' list")
    out = anchors.copy()
    for n, op in enumerate(ops):
        sel = np.ones(len(out), dtype=bool)
        if "select" in op:
            lo = np.asarray(op["select"]["lo"], dtype=np.float64).reshape(3)
            hi = np.asarray(op["select"]["hi"], dtype=np.float64).reshape(3)
            sel = ((out >= lo) & (out <= hi)).all(axis=1)
        if not sel.any():
            print(f"warning: op {n} selected 0 anchors", file=sys.stderr)
            continue
        if "rotate" in op:
            rot = op["rotate"]
            r = _rotation_about(rot["axis"], float(rot["angle_deg"]))
            pivot = np.asarray(rot.get("pivot", out[sel].mean(axis=0)),
                               dtype=np.float64).reshape(3)
            out[sel] = (out[sel] - pivot) @ r.T + pivot
        if "translate" in op:
            out[sel] = out[sel] + np.asarray(op["translate"], dtype=np.float64).reshape(3)
    return out


def cmd_edit(cfg: dict) -> int:
    _require(cfg, "anchors", "transform", "stage2", "label", "out")
    anchors, _ = read_point_ply(cfg["anchors"])
    try:
        with open(cfg["transform"]) as f:
            spec = json.load(f)
    except OSError as e:
        raise FileFormatError(f"{cfg['transform']}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{cfg['transform']}: invalid JSON ({e})") from e
    edited = apply_transforms(anchors, spec)

    p2, _, c2, d2 = load_model_checkpoint(cfg["stage2"], stage=2)
    if len(anchors) != c2["n_points"]:
        raise ValidationError(
            f"{cfg['anchors']}: {len(anchors)} anchors, checkpoint wants {c2['n_points']}")
    if not 0 <= cfg["label"] < c2["num_classes"]:
        raise ValidationError(
            f"--label must lie in [0, {c2['num_classes']}), got {cfg['label']}")
    latent = cascade_sample(None, None, p2, d2, cond=cfg["label"],
                            n_points=c2["n_points"], feature_dim=c2["in_dim"],
                            seeds=(0, cfg["seed"]), steps=cfg["steps"],
                            scale=cfg["cfg"], z_x_override=edited)
    _write_latent(cfg["out"], latent)
    moved = int((edited != anchors).any(axis=1).sum())
    print(f"edited {moved} of {len(anchors)} anchors -> {cfg['out']}.xh.ply")
    return 0


# ---------------------------------------------------------------------------
# metrics

def cmd_metrics(cfg: dict) -> int:
    if cfg["scene"] is None and cfg["cloud"] is None:
        raise ValidationError("metrics needs --scene and/or --cloud")
    report = {}
    scene = None
    if cfg["scene"] is not None:
        scene = read_splat_ply(cfg["scene"])
        report["utilization"] = utilization_ratio(scene, tau=cfg["tau"])
        report["tau"] = cfg["tau"]
    if (cfg["cloud"] is None) != (cfg["reference"] is None):
        raise ValidationError("a Chamfer report needs both --cloud and --reference")
    if cfg["cloud"] is not None:
        a, _ = read_point_ply(cfg["cloud"])
        b, _ = read_point_ply(cfg["reference"])
        report["chamfer"] = chamfer_distance(a, b)
        report["chamfer_convention"] = CHAMFER_NOTE
    if cfg["views"] is not None:
        if scene is None:
            raise ValidationError("per-view PSNR needs --scene")
        for name in list_views(cfg["views"]):
            v = load_view(cfg["views"], name)
            out = rasterize(scene, v.pose, v.intrinsics, RasterizeOptions())
            report[f"psnr_{name}"] = round(psnr(out.color, v.image), 4)
    text = json.dumps(report, sort_keys=True)
    print(text)
    if cfg["out"]:
        with open(cfg["out"], "w") as f:
            f.write(text + "\n")
    return 0


# ---------------------------------------------------------------------------

HANDLERS = {
    "gradcheck": cmd_gradcheck,
    "render": cmd_render,
    "fit": cmd_fit,
    "train": cmd_train,
    "sample": cmd_sample,
    "edit": cmd_edit,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    try:
        cfg = resolve_config(command, args)
        _setup_threads(cfg)
        _echo(cfg, command)
        return HANDLERS[command](cfg)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        # FileFormatError subclasses OSError, so malformed and missing files
        # land on the same exit code
        print(f"file error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
