"""On-disk formats: .tsr tensors, PPM images, PLY clouds and splat scenes,
JSON camera sidecars, CSV loss curves, and checkpoint directories.

Every writer is deterministic byte-for-byte given equal inputs; several
acceptance checks compare outputs with cmp, so keep it that way. Readers
raise FileFormatError naming the offending path.
"""

import csv
import json
import os
import struct

import numpy as np

from .errors import FileFormatError, ValidationError
from .geometry import CameraPose, PinholeIntrinsics, RenderingInput
from .surfels import SplatScene, frame_to_quat

TSR_MAGIC = b"TSR0\x00\x00\x00\x00"

SPLAT_PROPS = ("x", "y", "z", "qw", "qx", "qy", "qz", "su", "sv",
               "opacity", "r", "g", "b")


# ---------------------------------------------------------------------------
# .tsr tensors

def write_tsr(path: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(TSR_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<Q", d))
        f.write(arr.astype("<f8").tobytes())


def read_tsr(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise FileFormatError(f"{path}: {e.strerror or e}") from e
    if len(blob) < len(TSR_MAGIC) + 4:
        raise FileFormatError(f"{path}: truncated before header")
    if blob[:8] != TSR_MAGIC:
        raise FileFormatError(f"{path}: bad magic {blob[:8]!r}, not a .tsr file")
    (rank,) = struct.unpack_from("<I", blob, 8)
    if rank > 32:
        raise FileFormatError(f"{path}: implausible rank {rank}")
    off = 12
    if len(blob) < off + 8 * rank:
        raise FileFormatError(f"{path}: truncated inside dims")
    dims = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
    off += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    want = off + 8 * count
    if len(blob) != want:
        raise FileFormatError(
            f"{path}: payload is {len(blob) - off} bytes, header promises {8 * count}")
    return np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims).copy()


# ---------------------------------------------------------------------------
# PPM images

def write_ppm(path: str, image: np.ndarray) -> None:
    """P6 with maxval 255; input is float color in [0, 1], (H, W, 3)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"image must be (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise FileFormatError(f"{path}: {e.strerror or e}") from e
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise FileFormatError(f"{path}: not a P6 PPM")
    try:
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError:
        raise FileFormatError(f"{path}: malformed PPM header")
    if maxval != 255:
        raise FileFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pixels = parts[4][: w * h * 3]
    if len(pixels) < w * h * 3:
        raise FileFormatError(f"{path}: pixel payload truncated")
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# point-cloud PLY (ASCII)

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_point_ply(path: str, positions: np.ndarray,
                    features: np.ndarray = None) -> None:
    """ASCII PLY of x y z plus optional feature columns f0..f{C-1}."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValidationError(f"positions must be (N, 3), got {positions.shape}")
    cols = [positions]
    names = ["x", "y", "z"]
    if features is not None:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or len(features) != len(positions):
            raise ValidationError(
                f"features must be (N, C) with N={len(positions)}, got {features.shape}")
        cols.append(features)
        names += [f"f{i}" for i in range(features.shape[1])]
    table = np.concatenate(cols, axis=1)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(table)}"]
    lines += [f"property float {n}" for n in names]
    lines.append("end_header")
    for row in table:
        lines.append(" ".join(_fmt(v) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_point_ply(path: str):
    """Returns (positions (N,3), features (N,C) or None)."""
    try:
        with open(path) as f:
            lines = [ln.rstrip("\n") for ln in f]
    except OSError as e:
        raise FileFormatError(f"{path}: {e.strerror or e}") from e
    if not lines or lines[0] != "ply":
        raise FileFormatError(f"{path}: missing ply magic")
    names = []
    count = None
    body_at = None
    for i, ln in enumerate(lines[1:], start=1):
        if ln.startswith("element vertex"):
            count = int(ln.split()[-1])
        elif ln.startswith("property"):
            names.append(ln.split()[-1])
        elif ln == "end_header":
            body_at = i + 1
            break
    if body_at is None or count is None:
        raise FileFormatError(f"{path}: header missing end_header or vertex count")
    if names[:3] != ["x", "y", "z"]:
        raise FileFormatError(f"{path}: expected x y z leading properties, got {names[:3]}")
    rows = lines[body_at:body_at + count]
    if len(rows) < count:
        raise FileFormatError(f"{path}: {len(rows)} data rows, header promises {count}")
    try:
        table = np.array([[float(v) for v in r.split()] for r in rows])
    except ValueError:
        raise FileFormatError(f"{path}: non-numeric vertex data")
    if count and table.shape[1] != len(names):
        raise FileFormatError(
            f"{path}: rows have {table.shape[1]} columns, header promises {len(names)}")
    table = table.reshape(count, len(names))
    feats = table[:, 3:] if len(names) > 3 else None
    return table[:, :3], feats


# ---------------------------------------------------------------------------
# splat-scene PLY (binary)

def write_splat_ply(path: str, scene: SplatScene) -> None:
    arr = scene.arrays()
    quats = frame_to_quat(arr["t_u"], arr["t_v"], arr["normal"])
    n = len(arr["center"])
    table = np.zeros((n, 13), dtype="<f4")
    table[:, 0:3] = arr["center"]
    table[:, 3:7] = quats
    table[:, 7] = arr["s_u"]
    table[:, 8] = arr["s_v"]
    table[:, 9] = arr["opacity"]
    table[:, 10:13] = arr["color"]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in SPLAT_PROPS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(table.tobytes())


def read_splat_ply(path: str) -> SplatScene:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise FileFormatError(f"{path}: {e.strerror or e}") from e
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise FileFormatError(f"{path}: not a binary PLY (no end_header)")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FileFormatError(f"{path}: expected binary_little_endian format")
    count = None
    props = []
    for ln in header:
        if ln.startswith("element vertex"):
            count = int(ln.split()[-1])
        elif ln.startswith("property"):
            props.append(ln.split()[-1])
    if count is None:
        raise FileFormatError(f"{path}: missing vertex count")
    if tuple(props) != SPLAT_PROPS:
        raise FileFormatError(
            f"{path}: splat PLY needs properties {' '.join(SPLAT_PROPS)}, got {' '.join(props)}")
    body = blob[end + len(b"end_header\n"):]
    want = count * 13 * 4
    if len(body) != want:
        raise FileFormatError(f"{path}: body is {len(body)} bytes, expected {want}")
    table = np.frombuffer(body, dtype="<f4").reshape(count, 13).astype(np.float64)
    if count == 0:
        return SplatScene(splats=[])
    return SplatScene.from_arrays(
        centers=table[:, 0:3], quats=table[:, 3:7],
        s_u=table[:, 7], s_v=table[:, 8],
        opacities=table[:, 9], colors=np.clip(table[:, 10:13], 0.0, 1.0))


# ---------------------------------------------------------------------------
# camera sidecars and views

def write_pose_json(path: str, pose: CameraPose, intr: PinholeIntrinsics) -> None:
    doc = {
        "rotation": [float(v) for v in np.asarray(pose.rotation).reshape(9)],
        "origin": [float(v) for v in np.asarray(pose.origin).reshape(3)],
        "fx": float(intr.fx), "fy": float(intr.fy),
        "cx": float(intr.cx), "cy": float(intr.cy),
        "width": int(intr.width), "height": int(intr.height),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def read_pose_json(path: str):
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise FileFormatError(f"{path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{path}: invalid JSON ({e})") from e
    try:
        pose = CameraPose(rotation=np.array(doc["rotation"], dtype=np.float64).reshape(3, 3),
                          origin=np.array(doc["origin"], dtype=np.float64))
        intr = PinholeIntrinsics(fx=doc["fx"], fy=doc["fy"], cx=doc["cx"], cy=doc["cy"],
                                 width=int(doc["width"]), height=int(doc["height"]))
    except (KeyError, ValueError) as e:
        raise FileFormatError(f"{path}: bad camera sidecar ({e})") from e
    return pose, intr


def save_view(dirpath: str, name: str, view: RenderingInput) -> None:
    write_ppm(os.path.join(dirpath, f"{name}.ppm"), view.image)
    write_tsr(os.path.join(dirpath, f"{name}.depth.tsr"), view.depth)
    write_tsr(os.path.join(dirpath, f"{name}.normal.tsr"), view.normal)
    write_pose_json(os.path.join(dirpath, f"{name}.json"), view.pose, view.intrinsics)


def load_view(dirpath: str, name: str) -> RenderingInput:
    pose, intr = read_pose_json(os.path.join(dirpath, f"{name}.json"))
    return RenderingInput(
        image=read_ppm(os.path.join(dirpath, f"{name}.ppm")),
        depth=read_tsr(os.path.join(dirpath, f"{name}.depth.tsr")),
        normal=read_tsr(os.path.join(dirpath, f"{name}.normal.tsr")),
        pose=pose, intrinsics=intr)


def list_views(dirpath: str) -> list:
    """View base names in a directory, sorted; a view is present when its
    .json sidecar is."""
    if not os.path.isdir(dirpath):
        raise FileFormatError(f"{dirpath}: not a directory")
    return sorted(f[:-5] for f in os.listdir(dirpath) if f.endswith(".json"))


# ---------------------------------------------------------------------------
# loss curves

def write_csv(path: str, rows: list, fields: tuple) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(dirpath: str, params: dict, config: dict) -> None:
    os.makedirs(dirpath, exist_ok=True)
    with open(os.path.join(dirpath, "config.json"), "w") as f:
        json.dump(config, f, indent=1, sort_keys=True)
        f.write("\n")
    for key, arr in params.items():
        write_tsr(os.path.join(dirpath, key + ".tsr"), np.asarray(arr))


def load_checkpoint(dirpath: str):
    """Returns (params dict, config dict)."""
    cfg_path = os.path.join(dirpath, "config.json")
    try:
        with open(cfg_path) as f:
            config = json.load(f)
    except OSError as e:
        raise FileFormatError(f"{cfg_path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{cfg_path}: invalid JSON ({e})") from e
    params = {}
    for fname in sorted(os.listdir(dirpath)):
        if fname.endswith(".tsr"):
            params[fname[:-4]] = read_tsr(os.path.join(dirpath, fname))
    if not params:
        raise FileFormatError(f"{dirpath}: checkpoint holds no .tsr tensors")
    return params, config
