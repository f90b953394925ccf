"""Geometry types plus depth-image, point-cloud and config file I/O.

Depth images are stored as 16-bit binary PGM (``P5``, big-endian samples)
with a ``# scale=<float>`` header comment; ``depth = raw * scale`` and a raw
value of 0 marks an invalid pixel.  Point clouds are ASCII PLY.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

MAX_RAW = 65535
_SCALE_RE = re.compile(r"#\s*scale\s*=\s*(\S+)")


class FormatError(ValueError):
    """Raised when a depth image, point cloud or config cannot be parsed."""


@dataclass(frozen=True)
class CameraRig:
    """Two rectified pinhole cameras sharing intrinsics.

    The right camera sits at ``(D, 0, 0)`` in the left camera frame, so a
    point at depth ``z`` seen at left column ``u`` appears at right column
    ``u - f*D/z``.
    """

    f: float
    D: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if not self.D >= 0:
            raise ValueError(f"baseline must be non-negative, got {self.D}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"bad image size {self.width}x{self.height}")

    @property
    def fD(self) -> float:
        return self.f * self.D

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        return cls(f=float(d["f"]), D=float(d["D"]), cx=float(d["cx"]),
                   cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class DepthImage:
    values: np.ndarray
    mask: np.ndarray
    bit_depth: int = 16

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape != mask.shape:
            raise ValueError("values and mask must be matching 2-D grids")
        if np.any(values[mask] < 0) or not np.all(np.isfinite(values[mask])):
            raise ValueError("valid depth values must be finite and non-negative")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def full(cls, values, bit_depth: int = 16) -> "DepthImage":
        values = np.asarray(values, dtype=float)
        return cls(values, np.ones(values.shape, dtype=bool), bit_depth)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def check_rig(self, rig: CameraRig) -> None:
        if self.shape != (rig.height, rig.width):
            raise ValueError(f"image shape {self.shape} does not match rig "
                             f"{(rig.height, rig.width)}")


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", points)
        if self.normals is not None:
            normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if normals.shape != points.shape:
                raise ValueError("normals must match points one-to-one")
            norms = np.linalg.norm(normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ValueError("normals must be unit vectors")
            object.__setattr__(self, "normals", normals)

    def __len__(self):
        return len(self.points)

    @classmethod
    def concat(cls, *clouds: "PointCloud") -> "PointCloud":
        pts = np.concatenate([c.points for c in clouds]) if clouds else np.zeros((0, 3))
        if clouds and all(c.normals is not None for c in clouds):
            return cls(pts, np.concatenate([c.normals for c in clouds]))
        return cls(pts)


# ---------------------------------------------------------------------------
# depth images
# ---------------------------------------------------------------------------

def _read_token(buf: bytes, pos: int, comments: list[str]) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            end = n if end < 0 else end
            comments.append(buf[pos:end].decode("ascii", "replace"))
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header")
    return buf[start:pos], pos


def read_depth_image(path) -> DepthImage:
    buf = Path(path).read_bytes()
    comments: list[str] = []
    magic, pos = _read_token(buf, 0, comments)
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
    try:
        width, pos = _read_token(buf, pos, comments)
        height, pos = _read_token(buf, pos, comments)
        maxval, pos = _read_token(buf, pos, comments)
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if width <= 0 or height <= 0 or not 0 < maxval <= MAX_RAW:
        raise FormatError(f"{path}: bad PGM dimensions or maxval")
    pos += 1  # single whitespace byte after maxval
    scale = None
    for c in comments:
        m = _SCALE_RE.match(c)
        if m:
            try:
                scale = float(m.group(1))
            except ValueError as exc:
                raise FormatError(f"{path}: bad scale comment {c!r}") from exc
    if scale is None or not scale > 0:
        raise FormatError(f"{path}: missing '# scale=<float>' header comment")
    sample = ">u2" if maxval > 255 else "u1"
    nbytes = width * height * np.dtype(sample).itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"{path}: pixel data shorter than {width}x{height}")
    raw = np.frombuffer(buf, dtype=sample, count=width * height, offset=pos)
    raw = raw.reshape(height, width).astype(np.int64)
    bit_depth = 16 if maxval > 255 else 8
    return DepthImage(raw * scale, raw > 0, bit_depth)


def storage_scale(Q: float, max_depth: float) -> float:
    """Largest-precision scale ``Q / 2**m`` that still fits ``max_depth`` in 16 bits.

    Values on the quantisation lattice ``kQ`` round-trip exactly at this scale.
    """
    if not Q > 0:
        raise ValueError("quantisation step must be positive")
    scale = Q
    if not max_depth > 0:
        return scale
    while max_depth / (scale / 2) <= MAX_RAW:
        scale /= 2
    while max_depth / scale > MAX_RAW:
        scale *= 2
    return scale


def write_depth_image(img: DepthImage, path, scale: float) -> None:
    if not scale > 0:
        raise ValueError("scale must be positive")
    raw = np.where(img.mask, np.rint(img.values / scale), 0)
    # valid depths below scale/2 would otherwise read back as invalid
    raw = np.where(img.mask, np.maximum(raw, 1), 0)
    if raw.max(initial=0) > MAX_RAW:
        raise ValueError(f"depth {img.values[img.mask].max()} overflows 16 bits at scale {scale}")
    h, w = img.shape
    header = f"P5\n# scale={scale!r}\n{w} {h}\n{MAX_RAW}\n".encode("ascii")
    Path(path).write_bytes(header + raw.astype(">u2").tobytes())


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

def write_point_cloud(cloud: PointCloud, path) -> None:
    has_normals = cloud.normals is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property double x", "property double y", "property double z"]
    if has_normals:
        lines += ["property double nx", "property double ny", "property double nz"]
    lines.append("end_header")
    data = np.hstack([cloud.points, cloud.normals]) if has_normals else cloud.points
    body = "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in data)
    Path(path).write_text("\n".join(lines) + "\n" + body)


def read_point_cloud(path) -> PointCloud:
    text = Path(path).read_text()
    head, sep, body = text.partition("end_header\n")
    if not sep or not head.startswith("ply"):
        raise FormatError(f"{path}: not an ASCII PLY file")
    count, props = None, []
    for line in head.splitlines():
        parts = line.split()
        if parts[:2] == ["format", "ascii"] or not parts:
            continue
        if parts[0] == "format":
            raise FormatError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[-1])
    if count is None or props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: missing vertex element or x/y/z properties")
    data = np.loadtxt(body.splitlines(), ndmin=2) if count else np.zeros((0, len(props)))
    if data.shape != (count, len(props)):
        raise FormatError(f"{path}: expected {count} vertices with {len(props)} fields")
    normals = data[:, 3:6] if props[3:6] == ["nx", "ny", "nz"] else None
    return PointCloud(data[:, :3], normals)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def _section(cls, raw: dict | None):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise FormatError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**raw)


@dataclass
class SceneSpec:
    kind: str = "slanted_sinusoid"
    z0: float = 1300.0
    normal: tuple[float, float, float] = (0.25, 0.1, -1.0)
    amplitude: float = 30.0
    period: float = 128.0

    def __post_init__(self):
        self.normal = tuple(float(v) for v in self.normal)


@dataclass
class RunConfig:
    """Everything one experiment needs, serialised as a single JSON document."""

    rig: CameraRig
    scene: SceneSpec = field(default_factory=SceneSpec)
    formation: dict = field(default_factory=dict)
    warp: dict = field(default_factory=dict)
    graph: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    pipeline: dict = field(default_factory=dict)
    synthesis: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scene"]["normal"] = list(self.scene.normal)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "rig" not in d:
            raise FormatError("config is missing the 'rig' section")
        try:
            rig = CameraRig.from_dict(d.pop("rig"))
        except KeyError as exc:
            raise FormatError(f"rig section is missing {exc}") from exc
        scene = _section(SceneSpec, d.pop("scene", None))
        known = {f.name for f in fields(cls)} - {"rig", "scene"}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown config sections: {sorted(unknown)}")
        for key, value in d.items():
            if not isinstance(value, dict):
                raise FormatError(f"config section {key!r} must be an object")
        return cls(rig=rig, scene=scene, **d)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
