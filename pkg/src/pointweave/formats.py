"""Bit-exact interchange formats and the frame-exchange directory protocol.

This module is the package's external interface: PFM depth, PPM color,
PGM masks, FLO2 flow, PLY seed clouds, the versioned binary container for
network checkpoints and feature banks, and the JSON frame manifest.

Byte-layout commitments (enforced by tests on crafted fixtures):

  * all multi-byte binary values are little-endian;
  * PFM: header "Pf\\n<w> <h>\\n-1.0\\n", float32 rows stored bottom-to-top,
    invalid depth encoded as 0.0 (0.0 is not a legal depth);
  * PPM/PGM: P6/P5 with maxval 255;
  * FLO2: 16-byte header (magic "FLO2", u32 width, u32 height, u32
    reserved = 0), then float32 (du, dv) interleaved row-major;
  * PLY: binary_little_endian 1.0, vertex properties float x,y,z +
    uchar red,green,blue (the SfM-seed layout splat trainers accept),
    colors quantized by round(c*255);
  * container: magic (4 bytes), u32 entry count, then per entry
    u32 name length, name bytes (utf-8), u32 rank, u32 dims, float32 data.

Writers emit canonical bytes; readers tolerate standard whitespace/comment
variation in Netpbm/PFM headers so files from other writers parse.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, CameraRig, DepthMap, Pose
from .errors import FormatError, ValidationError

DCM_MAGIC = b"DCM1"
BANK_MAGIC = b"FTB1"

_MANIFEST_VERSION = 1
_MANIFEST_KEYS = {"schema_version", "frame_id", "provenance", "intrinsics", "camera_to_world", "paths"}
_INTRINSIC_KEYS = {"fx", "fy", "cx", "cy", "width", "height"}
_PATH_KEYS = {"color", "raw_color", "depth", "flow", "hole_mask", "inpaint_mask", "occlusion", "loss_mask"}
_PROVENANCES = {"oracle", "adapter", "engine"}


def _check_path(path) -> str:
    p = os.fspath(path)
    if not p:
        raise FormatError("empty path")
    return p


def _read_file(path) -> bytes:
    p = _check_path(path)
    try:
        with open(p, "rb") as f:
            return f.read()
    except OSError as exc:
        raise FormatError(f"cannot read {p}: {exc}") from exc


def _write_file(path, data: bytes) -> None:
    p = _check_path(path)
    try:
        with open(p, "wb") as f:
            f.write(data)
    except OSError as exc:
        raise FormatError(f"cannot write {p}: {exc}") from exc


def _tokens(buf: bytes, count: int, allow_comments: bool):
    """Yield `count` whitespace-separated header tokens and the payload
    offset (the byte right after the single whitespace ending the last
    token)."""
    toks = []
    i = 0
    while len(toks) < count:
        if i >= len(buf):
            raise FormatError("truncated header")
        ch = buf[i : i + 1]
        if ch.isspace():
            i += 1
            continue
        if allow_comments and ch == b"#":
            while i < len(buf) and buf[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace():
            j += 1
        toks.append(buf[i:j])
        i = j
    if i >= len(buf) or not buf[i : i + 1].isspace():
        raise FormatError("header not terminated by whitespace")
    return toks, i + 1


# ---------------------------------------------------------------- PFM depth


def write_depth_pfm(path, depth: DepthMap) -> None:
    h, w = depth.shape
    header = b"Pf\n" + f"{w} {h}\n".encode("ascii") + b"-1.0\n"
    payload = np.flipud(depth.values).astype("<f4").tobytes()
    _write_file(path, header + payload)


def read_depth_pfm(path) -> DepthMap:
    buf = _read_file(path)
    toks, off = _tokens(buf, 4, allow_comments=False)
    if toks[0] != b"Pf":
        raise FormatError(f"not a grayscale PFM (magic {toks[0]!r})")
    try:
        w, h = int(toks[1]), int(toks[2])
        scl = float(toks[3])
    except ValueError as exc:
        raise FormatError(f"bad PFM header tokens {toks[1:]!r}") from exc
    if w < 1 or h < 1:
        raise FormatError(f"bad PFM dimensions {w}x{h}")
    if scl >= 0:
        raise FormatError("big-endian PFM (non-negative scale) is not supported")
    need = w * h * 4
    if len(buf) - off != need:
        raise FormatError(f"PFM payload is {len(buf) - off} bytes, expected {need}")
    vals = np.frombuffer(buf, dtype="<f4", count=w * h, offset=off).reshape(h, w)
    vals = np.flipud(vals).astype(np.float64)
    if not np.all(np.isfinite(vals)):
        raise FormatError("PFM payload contains non-finite values")
    if np.any(vals < 0):
        raise FormatError("PFM depth payload contains negative values")
    return DepthMap(vals, vals > 0)


# ------------------------------------------------------------- PPM / PGM


def write_color_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"PPM image must be H x W x 3, got {img.shape}")
    h, w = img.shape[:2]
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    _write_file(path, b"P6\n" + f"{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_color_ppm(path) -> np.ndarray:
    buf = _read_file(path)
    toks, off = _tokens(buf, 4, allow_comments=True)
    if toks[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {toks[0]!r})")
    w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    need = w * h * 3
    if len(buf) - off != need:
        raise FormatError(f"PPM payload is {len(buf) - off} bytes, expected {need}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3)
    return data.astype(np.float64) / 255.0


def write_gray_pgm(path, gray: np.ndarray) -> None:
    g = np.asarray(gray)
    if g.ndim != 2:
        raise ValidationError(f"PGM image must be 2-D, got {g.shape}")
    if g.dtype != np.uint8:
        g = np.clip(np.rint(np.asarray(g, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = g.shape
    _write_file(path, b"P5\n" + f"{w} {h}\n255\n".encode("ascii") + g.tobytes())


def read_gray_pgm(path) -> np.ndarray:
    buf = _read_file(path)
    toks, off = _tokens(buf, 4, allow_comments=True)
    if toks[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {toks[0]!r})")
    w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    need = w * h
    if len(buf) - off != need:
        raise FormatError(f"PGM payload is {len(buf) - off} bytes, expected {need}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w).copy()


def write_loss_mask(path, inpaint_mask: np.ndarray) -> None:
    """Supervision mask for downstream splat training: 255 = supervise
    (real content), 0 = ignore (pixel was inpainted)."""
    m = np.asarray(inpaint_mask, dtype=np.float64)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValidationError("inpaint mask entries must be exactly 0 or 1")
    write_gray_pgm(path, np.where(m == 0.0, 255, 0).astype(np.uint8))


def read_loss_mask(path) -> np.ndarray:
    """Returns the supervise mask as floats in {0, 1} (1 = supervise)."""
    g = read_gray_pgm(path)
    if not np.all((g == 0) | (g == 255)):
        raise FormatError("loss mask bytes must be 0 or 255")
    return (g == 255).astype(np.float64)


# ------------------------------------------------------------------- FLO2


def write_flow_flo2(path, flow: np.ndarray) -> None:
    f = np.asarray(flow, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 2:
        raise ValidationError(f"flow must be H x W x 2, got {f.shape}")
    h, w = f.shape[:2]
    header = b"FLO2" + struct.pack("<III", w, h, 0)
    _write_file(path, header + f.astype("<f4").tobytes())


def read_flow_flo2(path) -> np.ndarray:
    buf = _read_file(path)
    if len(buf) < 16:
        raise FormatError("FLO2 file shorter than its 16-byte header")
    if buf[:4] != b"FLO2":
        raise FormatError(f"bad FLO2 magic {buf[:4]!r}")
    w, h, reserved = struct.unpack("<III", buf[4:16])
    if reserved != 0:
        raise FormatError(f"FLO2 reserved word must be 0, got {reserved}")
    need = w * h * 2 * 4
    if len(buf) - 16 != need:
        raise FormatError(f"FLO2 payload is {len(buf) - 16} bytes, expected {need}")
    return np.frombuffer(buf, dtype="<f4", count=w * h * 2, offset=16).reshape(h, w, 2).astype(np.float64)


# -------------------------------------------------------------------- PLY


@dataclass
class GaussianSeedCloud:
    """Seed points for a Gaussian-splatting trainer. confidence is
    1 - inpaint-origin flag (1 = real observation, 0 = fully inpainted)."""

    positions: np.ndarray
    colors: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("seed positions must be finite")
        if self.colors.size and (self.colors.min() < 0 or self.colors.max() > 1):
            raise ValidationError("seed colors must lie in [0, 1]")
        if self.confidence.size and (self.confidence.min() < 0 or self.confidence.max() > 1):
            raise ValidationError("seed confidence must lie in [0, 1]")
        n = self.positions.shape[0]
        if self.colors.shape[0] != n or self.confidence.shape[0] != n:
            raise ValidationError("seed cloud field lengths disagree")

    def __len__(self) -> int:
        return self.positions.shape[0]


_PLY_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
)


def _ply_header(n: int) -> bytes:
    return (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    ).encode("ascii")


def write_ply_seeds(path, cloud: GaussianSeedCloud) -> None:
    """Atomic write: bytes go to a temp name in the target directory and
    are renamed into place, so a crash never leaves a partial PLY."""
    if len(cloud) == 0:
        raise ValidationError("refusing to write an empty seed cloud")
    p = _check_path(path)
    rec = np.empty(len(cloud), dtype=_PLY_DTYPE)
    rec["x"] = cloud.positions[:, 0].astype("<f4")
    rec["y"] = cloud.positions[:, 1].astype("<f4")
    rec["z"] = cloud.positions[:, 2].astype("<f4")
    quant = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = quant[:, 0], quant[:, 1], quant[:, 2]
    tmp = p + ".tmp"
    try:
        _write_file(tmp, _ply_header(len(cloud)) + rec.tobytes())
        os.replace(tmp, p)
    except OSError as exc:
        raise FormatError(f"cannot write {p}: {exc}") from exc


def read_ply_seeds(path) -> GaussianSeedCloud:
    buf = _read_file(path)
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file")
    header_lines = buf[:end].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in header_lines:
        raise FormatError("only binary_little_endian 1.0 PLY is supported")
    n = None
    props = []
    for line in header_lines:
        if line.startswith("element vertex "):
            n = int(line.split()[-1])
        elif line.startswith("element "):
            raise FormatError(f"unsupported PLY element: {line!r}")
        elif line.startswith("property "):
            props.append(tuple(line.split()[1:]))
    expected = [
        ("float", "x"), ("float", "y"), ("float", "z"),
        ("uchar", "red"), ("uchar", "green"), ("uchar", "blue"),
    ]
    if n is None or props != expected:
        raise FormatError("PLY vertex layout is not the seed-cloud layout (xyz float + rgb uchar)")
    off = end + len(b"end_header\n")
    need = n * _PLY_DTYPE.itemsize
    if len(buf) - off != need:
        raise FormatError(f"PLY payload is {len(buf) - off} bytes, expected {need}")
    rec = np.frombuffer(buf, dtype=_PLY_DTYPE, count=n, offset=off)
    positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64) / 255.0
    return GaussianSeedCloud(positions, colors, np.ones(n))


# -------------------------------------------------- versioned binary container


def write_container(path, magic: bytes, entries) -> None:
    """entries: ordered (name, array) pairs; data stored as float32."""
    if len(magic) != 4:
        raise ValidationError("container magic must be exactly 4 bytes")
    out = [magic, struct.pack("<I", len(entries))]
    for name, arr in entries:
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
        out.append(a.tobytes())
    _write_file(path, b"".join(out))


def read_container(path, magic: bytes):
    buf = _read_file(path)
    if len(buf) < 8:
        raise FormatError("container shorter than its 8-byte header")
    if buf[:4] != magic:
        raise FormatError(f"container magic {buf[:4]!r} does not match expected {magic!r} (version mismatch?)")
    (count,) = struct.unpack("<I", buf[4:8])
    off = 8
    entries = []
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            if len(buf) < off + nlen:
                raise FormatError("truncated container entry name")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            if rank > 8:
                raise FormatError(f"implausible container rank {rank}")
            dims = struct.unpack_from(f"<{rank}I", buf, off) if rank else ()
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated or corrupt container: {exc}") from exc
        entries.append((name, arr.copy()))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after the last container entry")
    return entries


# ---------------------------------------------------------------- manifests


@dataclass
class FrameManifest:
    frame_id: int
    rig: CameraRig
    paths: dict
    provenance: str
    directory: str = field(default="")

    def resolve(self, key: str) -> str:
        if key not in self.paths:
            raise FormatError(f"manifest for frame {self.frame_id} has no {key!r} entry")
        return os.path.join(self.directory, self.paths[key])

    def has(self, key: str) -> bool:
        return key in self.paths


def _validate_rel_path(p: str) -> str:
    if not isinstance(p, str) or not p:
        raise FormatError("manifest path entries must be non-empty strings")
    if os.path.isabs(p) or p.startswith("\\") or (len(p) > 1 and p[1] == ":"):
        raise FormatError(f"manifest path {p!r} must be relative to the frame directory")
    parts = p.replace("\\", "/").split("/")
    if ".." in parts:
        raise FormatError(f"manifest path {p!r} escapes the frame directory")
    return p


def manifest_to_dict(m: FrameManifest) -> dict:
    k = m.rig.intrinsics
    return {
        "schema_version": _MANIFEST_VERSION,
        "frame_id": int(m.frame_id),
        "provenance": m.provenance,
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height},
        "camera_to_world": [[float(x) for x in row] for row in m.rig.pose.matrix],
        "paths": dict(sorted(m.paths.items())),
    }


def write_manifest(path, m: FrameManifest) -> None:
    if m.provenance not in _PROVENANCES:
        raise ValidationError(f"provenance must be one of {sorted(_PROVENANCES)}, got {m.provenance!r}")
    for key, rel in m.paths.items():
        if key not in _PATH_KEYS:
            raise ValidationError(f"unknown manifest path key {key!r}")
        _validate_rel_path(rel)
    blob = json.dumps(manifest_to_dict(m), indent=2, sort_keys=True) + "\n"
    _write_file(path, blob.encode("utf-8"))


def read_manifest(path) -> FrameManifest:
    p = _check_path(path)
    try:
        obj = json.loads(_read_file(p).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest {p} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise FormatError("manifest root must be a JSON object")
    for key in obj:
        if key not in _MANIFEST_KEYS:
            raise FormatError(f"unknown manifest field {key!r}")
    for key in _MANIFEST_KEYS:
        if key not in obj:
            raise FormatError(f"manifest is missing required field {key!r}")
    if obj["schema_version"] != _MANIFEST_VERSION:
        raise FormatError(f"manifest schema version {obj['schema_version']} != supported {_MANIFEST_VERSION}")
    if obj["provenance"] not in _PROVENANCES:
        raise FormatError(f"unknown provenance {obj['provenance']!r}")
    intr = obj["intrinsics"]
    if not isinstance(intr, dict) or set(intr) != _INTRINSIC_KEYS:
        raise FormatError("manifest intrinsics must have exactly fx, fy, cx, cy, width, height")
    mat = np.asarray(obj["camera_to_world"], dtype=np.float64)
    if mat.shape != (4, 4):
        raise FormatError(f"camera_to_world must be 4x4, got {mat.shape}")
    if not np.allclose(mat[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
        raise FormatError(f"camera_to_world bottom row must be (0, 0, 0, 1), got {mat[3].tolist()}")
    paths = obj["paths"]
    if not isinstance(paths, dict):
        raise FormatError("manifest paths must be an object")
    directory = os.path.dirname(p)
    for key, rel in paths.items():
        if key not in _PATH_KEYS:
            raise FormatError(f"unknown manifest path key {key!r}")
        _validate_rel_path(rel)
        target = os.path.join(directory, rel)
        if not os.path.exists(target):
            raise FormatError(f"manifest references missing file {rel!r}")
    try:
        rig = CameraRig(
            CameraIntrinsics(
                fx=float(intr["fx"]), fy=float(intr["fy"]), cx=float(intr["cx"]), cy=float(intr["cy"]),
                width=int(intr["width"]), height=int(intr["height"]),
            ),
            Pose(mat[:3, :3], mat[:3, 3]),
        )
    except ValidationError as exc:
        raise FormatError(f"manifest rig invalid: {exc}") from exc
    return FrameManifest(int(obj["frame_id"]), rig, dict(paths), obj["provenance"], directory)


# ------------------------------------------------------- frame directories


def frame_dir_name(index: int) -> str:
    return f"frame_{index:04d}"


def write_frame(
    root,
    frame_id: int,
    rig: CameraRig,
    provenance: str,
    color: np.ndarray | None = None,
    raw_color: np.ndarray | None = None,
    depth: DepthMap | None = None,
    flow: np.ndarray | None = None,
    hole_mask: np.ndarray | None = None,
    inpaint_mask: np.ndarray | None = None,
    occlusion: np.ndarray | None = None,
    loss_mask: np.ndarray | None = None,
) -> str:
    """Write one frame-exchange entry under root/frame_XXXX and return the
    manifest path. Binary masks are stored as {0, 255} PGM; loss_mask is
    given as an inpaint mask and stored in supervise-is-255 polarity."""
    d = os.path.join(_check_path(root), frame_dir_name(frame_id))
    os.makedirs(d, exist_ok=True)
    paths = {}
    if color is not None:
        write_color_ppm(os.path.join(d, "color.ppm"), color)
        paths["color"] = "color.ppm"
    if raw_color is not None:
        write_color_ppm(os.path.join(d, "raw_color.ppm"), raw_color)
        paths["raw_color"] = "raw_color.ppm"
    if depth is not None:
        write_depth_pfm(os.path.join(d, "depth.pfm"), depth)
        paths["depth"] = "depth.pfm"
    if flow is not None:
        write_flow_flo2(os.path.join(d, "flow.flo2"), flow)
        paths["flow"] = "flow.flo2"
    for key, mask in (("hole_mask", hole_mask), ("inpaint_mask", inpaint_mask), ("occlusion", occlusion)):
        if mask is not None:
            name = f"{key}.pgm"
            write_gray_pgm(os.path.join(d, name), np.asarray(mask, dtype=np.float64))
            paths[key] = name
    if loss_mask is not None:
        write_loss_mask(os.path.join(d, "loss_mask.pgm"), loss_mask)
        paths["loss_mask"] = "loss_mask.pgm"
    manifest = FrameManifest(frame_id, rig, paths, provenance, d)
    mp = os.path.join(d, "manifest.json")
    write_manifest(mp, manifest)
    return mp


def list_frame_manifests(root) -> list:
    root = _check_path(root)
    if not os.path.isdir(root):
        raise FormatError(f"frame directory {root!r} does not exist")
    out = []
    for name in sorted(os.listdir(root)):
        mp = os.path.join(root, name, "manifest.json")
        if name.startswith("frame_") and os.path.isfile(mp):
            out.append(mp)
    return out
