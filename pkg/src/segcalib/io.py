"""Point cloud, label image, config and report files."""
from __future__ import annotations

import configparser
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .core import (
    CLASS_NAMES,
    DYNAMIC_IDS,
    NUM_CLASSES,
    SKY,
    INVALID,
    CameraIntrinsics,
    LabeledPointCloud,
    PoseParams,
    SemanticImage,
)
from .errors import ConfigError, ParseError, UnknownClassError
from .loss import LossTermKind
from .optimize import CalibrationOptions, NmParams, SearchBounds, STAGE_THRESHOLDS
from .reconstruction import IcpParams, Scan
from .render import RenderConfig


# --- point clouds -----------------------------------------------------------

def _parse_class(tok: str, line: int, path) -> int:
    try:
        value = float(tok)
    except ValueError:
        raise ParseError(f"bad class id {tok!r}", line, path) from None
    if not value.is_integer():
        raise ParseError(f"class id {tok!r} is not an integer", line, path)
    cid = int(value)
    if not 0 <= cid < NUM_CLASSES:
        raise UnknownClassError(cid, line, path)
    return cid


def _parse_xyz(toks, line, path):
    try:
        xyz = [float(t) for t in toks]
    except ValueError:
        raise ParseError(f"bad coordinate in {' '.join(toks)!r}", line, path) from None
    if not all(math.isfinite(v) for v in xyz):
        raise ParseError("non-finite coordinate", line, path)
    return xyz


def _read_xyz_records(lines, path, first_line=1):
    pts, labels = [], []
    for n, raw in enumerate(lines, start=first_line):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        toks = text.split()
        if len(toks) != 4:
            raise ParseError(f"expected 'x y z class_id', got {text!r}", n, path)
        pts.append(_parse_xyz(toks[:3], n, path))
        labels.append(_parse_class(toks[3], n, path))
    return LabeledPointCloud(np.array(pts, dtype=np.float64).reshape(-1, 3),
                             np.array(labels, dtype=np.uint8))


def _read_ply(lines, path):
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1, path)
    props, count, fmt = [], None, None
    in_vertex = False
    end = None
    for n, raw in enumerate(lines[1:], start=2):
        toks = raw.split()
        if not toks or toks[0] == "comment" or toks[0] == "obj_info":
            continue
        if toks[0] == "format":
            fmt = toks[1] if len(toks) > 1 else None
        elif toks[0] == "element":
            in_vertex = len(toks) == 3 and toks[1] == "vertex"
            if in_vertex:
                try:
                    count = int(toks[2])
                except ValueError:
                    raise ParseError("bad vertex count", n, path) from None
        elif toks[0] == "property" and in_vertex:
            props.append(toks[-1])
        elif toks[0] == "end_header":
            end = n
            break
    if end is None:
        raise ParseError("missing end_header", len(lines), path)
    if fmt != "ascii":
        raise ParseError(f"only ascii PLY is supported, got {fmt!r}", None, path)
    if count is None:
        raise ParseError("no vertex element", None, path)
    for name in ("x", "y", "z", "label"):
        if name not in props:
            raise ParseError(f"vertex property {name!r} missing", None, path)
    ix, iy, iz, il = (props.index(k) for k in ("x", "y", "z", "label"))
    pts = np.empty((count, 3))
    labels = np.empty(count, dtype=np.uint8)
    body = lines[end:]
    k = 0
    for n, raw in enumerate(body, start=end + 1):
        toks = raw.split()
        if not toks:
            continue
        if k >= count:
            raise ParseError("more vertex records than declared", n, path)
        if len(toks) != len(props):
            raise ParseError(f"expected {len(props)} values", n, path)
        pts[k] = _parse_xyz([toks[ix], toks[iy], toks[iz]], n, path)
        labels[k] = _parse_class(toks[il], n, path)
        k += 1
    if k != count:
        raise ParseError(f"declared {count} vertices, found {k}", None, path)
    return LabeledPointCloud(pts, labels)


def read_cloud(path) -> LabeledPointCloud:
    """Read ``x y z class_id`` records or an ASCII PLY with x, y, z, label."""
    path = Path(path)
    with open(path) as f:
        lines = f.read().splitlines()
    if lines and lines[0].strip() == "ply":
        return _read_ply(lines, path)
    return _read_xyz_records(lines, path)


def write_cloud(cloud: LabeledPointCloud, path):
    """Write as PLY when the suffix is ``.ply``, else as ``x y z class_id`` lines.

    Coordinates use ``repr`` so reading them back is exact.
    """
    path = Path(path)
    rows = [f"{x!r} {y!r} {z!r} {int(c)}" for (x, y, z), c in
            zip(cloud.points.tolist(), cloud.labels.tolist())]
    with open(path, "w", newline="\n") as f:
        if path.suffix.lower() == ".ply":
            f.write("ply\nformat ascii 1.0\n")
            f.write(f"element vertex {len(cloud)}\n")
            f.write("property double x\nproperty double y\nproperty double z\n")
            f.write("property uchar label\nend_header\n")
        else:
            f.write("# x y z class_id\n")
        for r in rows:
            f.write(r + "\n")


# --- label images (PGM) ---------------------------------------------------

def _pgm_header(data: bytes, path):
    """Return (magic, width, height, maxval, offset of first data byte)."""
    toks = []
    i = 0
    n = len(data)
    while len(toks) < 4:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i >= n:
            raise ParseError("truncated PGM header", None, path)
        if data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        toks.append(data[i:j])
        i = j
    magic = toks[0].decode("ascii", "replace")
    if magic not in ("P2", "P5"):
        raise ParseError(f"not a P2/P5 PGM (magic {magic!r})", 1, path)
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise ParseError("bad PGM dimensions", None, path) from None
    if w <= 0 or h <= 0 or not 0 < maxval <= 255:
        raise ParseError(f"unsupported PGM geometry {w}x{h} maxval {maxval}", None, path)
    # a single whitespace byte separates the header from binary data
    return magic, w, h, maxval, i + 1


def read_label_image(path) -> SemanticImage:
    """Read a P2 or P5 PGM whose pixel values are class ids."""
    path = Path(path)
    data = path.read_bytes()
    magic, w, h, _, offset = _pgm_header(data, path)
    if magic == "P5":
        body = data[offset:]
        if len(body) != w * h:
            raise ParseError(f"expected {w * h} pixel bytes, found {len(body)}", None, path)
        grid = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    else:
        text = data[offset:].decode("ascii", "replace")
        values = []
        for n, line in enumerate(text.splitlines(), start=1):
            for tok in line.split("#", 1)[0].split():
                try:
                    values.append(int(tok))
                except ValueError:
                    raise ParseError(f"bad pixel value {tok!r}", n, path) from None
        if len(values) != w * h:
            raise ParseError(f"expected {w * h} pixel values, found {len(values)}", None, path)
        grid = np.array(values, dtype=np.int64).reshape(h, w)
    bad = grid[grid >= NUM_CLASSES]
    if bad.size:
        raise UnknownClassError(int(bad[0]), None, path)
    return SemanticImage(grid.astype(np.uint8))


def write_label_image(img: SemanticImage, path, binary: bool = True):
    header = f"{'P5' if binary else 'P2'}\n{img.width} {img.height}\n255\n".encode("ascii")
    if binary:
        body = img.grid.astype(np.uint8).tobytes()
    else:
        body = "".join(" ".join(str(v) for v in row) + "\n"
                       for row in img.grid.tolist()).encode("ascii")
    Path(path).write_bytes(header + body)


# --- scans and poses ----------------------------------------------------

def read_poses(path) -> List[tuple]:
    """Lines of ``scan_file timestamp r11 r12 r13 t1 r21 r22 r23 t2 r31 r32 r33 t3``."""
    path = Path(path)
    out = []
    for n, raw in enumerate(path.read_text().splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        toks = text.split()
        if len(toks) != 14:
            raise ParseError("expected a file name, a timestamp and 12 matrix values", n, path)
        try:
            vals = [float(t) for t in toks[1:]]
        except ValueError:
            raise ParseError("bad number", n, path) from None
        T = np.eye(4)
        T[:3] = np.array(vals[1:]).reshape(3, 4)
        out.append((toks[0], vals[0], T))
    return out


def write_poses(entries: Iterable[tuple], path):
    with open(path, "w", newline="\n") as f:
        f.write("# scan_file timestamp r11 r12 r13 t1 r21 r22 r23 t2 r31 r32 r33 t3\n")
        for name, stamp, T in entries:
            vals = " ".join(repr(float(v)) for v in np.asarray(T)[:3].ravel())
            f.write(f"{name} {float(stamp)!r} {vals}\n")


def read_scans(scan_dir, poses_path) -> List[Scan]:
    scan_dir = Path(scan_dir)
    scans = []
    for name, stamp, T in read_poses(poses_path):
        p = scan_dir / name
        if not p.exists():
            raise FileNotFoundError(p)
        try:
            scans.append(Scan(read_cloud(p), T, stamp))
        except ValueError as exc:
            raise ParseError(str(exc), None, poses_path) from exc
    scans.sort(key=lambda s: s.timestamp)
    return scans


# --- configuration ------------------------------------------------------

def parse_pose(text: str) -> PoseParams:
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"bad pose {text!r}") from None
    if len(vals) != 5:
        raise ConfigError(f"pose needs 'tx ty tz yaw pitch', got {text!r}")
    try:
        return PoseParams(*vals)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_intrinsics(text: str) -> CameraIntrinsics:
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"bad intrinsics {text!r}") from None
    if len(vals) != 6:
        raise ConfigError(f"intrinsics need 'fx fy cx cy width height', got {text!r}")
    try:
        return CameraIntrinsics(vals[0], vals[1], vals[2], vals[3], int(vals[4]), int(vals[5]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_classes(text: str) -> frozenset:
    ids = set()
    for tok in text.replace(",", " ").split():
        if tok.isdigit():
            cid = int(tok)
        elif tok in CLASS_NAMES:
            cid = CLASS_NAMES.index(tok)
        else:
            raise ConfigError(f"unknown class {tok!r}")
        if not 0 <= cid < NUM_CLASSES:
            raise ConfigError(f"unknown class {tok!r}")
        ids.add(cid)
    return frozenset(ids)


@dataclass
class RunConfig:
    cloud: Optional[Path] = None
    target: Optional[Path] = None
    output: Optional[Path] = None
    intrinsics: Optional[CameraIntrinsics] = None
    guess: Optional[PoseParams] = None
    ground_truth: Optional[PoseParams] = None
    bounds: SearchBounds = SearchBounds()
    render: RenderConfig = RenderConfig()
    loss: LossTermKind = LossTermKind()
    options: CalibrationOptions = CalibrationOptions()
    d_max: float = 75.0
    crop_radius: Optional[float] = None
    dynamic_classes: frozenset = frozenset(DYNAMIC_IDS)
    icp: IcpParams = IcpParams()
    seed: int = 0
    trials: int = 30
    keep: int = 10
    label_noise: float = 0.0
    verify_trials: int = 0
    verify_noise: SearchBounds = SearchBounds(0.5, 1.0)
    workers: int = 1


def load_config(path) -> RunConfig:
    """Read an INI run configuration.  Relative paths resolve against its folder."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    base = path.parent
    cfg = RunConfig()

    def get(section, key, conv=str, default=None):
        if not cp.has_option(section, key):
            return default
        raw = cp.get(section, key)
        try:
            return conv(raw)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{path}: [{section}] {key}: {exc}") from None

    def as_bool(s):
        if s.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if s.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {s!r}")

    for key in ("cloud", "target", "output"):
        value = get("paths", key)
        if value is not None:
            p = Path(value)
            setattr(cfg, key, p if p.is_absolute() else base / p)
    for key in ("cloud", "target"):
        p = getattr(cfg, key)
        if p is not None and not p.exists():
            raise ConfigError(f"{path}: [paths] {key} {p} does not exist")

    if cp.has_section("camera"):
        if cp.has_option("camera", "hfov"):
            cfg.intrinsics = CameraIntrinsics.from_fov(
                get("camera", "width", int), get("camera", "height", int), get("camera", "hfov", float))
        else:
            try:
                cfg.intrinsics = CameraIntrinsics(
                    *(get("camera", k, float) for k in ("fx", "fy", "cx", "cy")),
                    get("camera", "width", int), get("camera", "height", int))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}: [camera] {exc}") from None

    cfg.guess = get("pose", "guess", parse_pose)
    cfg.ground_truth = get("pose", "ground_truth", parse_pose)

    try:
        cfg.bounds = SearchBounds(get("bounds", "pos_half_range", float, 2.5),
                                  get("bounds", "ang_half_range", float, 5.0))
        bg = get("render", "background", str, "sky").strip()
        cfg.render = RenderConfig(
            get("render", "lambda", float, RenderConfig.lam),
            get("render", "min_radius", float, RenderConfig.min_radius),
            get("render", "max_radius", float, RenderConfig.max_radius),
            {"sky": SKY, "invalid": INVALID}.get(bg, -1))
        cfg.loss = LossTermKind(get("loss", "kind", str, "l2").strip(),
                                get("loss", "delta", float, 0.3))
        thresholds = get("optimizer", "thresholds",
                         lambda s: tuple(float(v) for v in s.replace(",", " ").split()),
                         STAGE_THRESHOLDS)
        cfg.options = CalibrationOptions(
            mask_sky=get("loss", "mask_sky", as_bool, True),
            lower_half=get("loss", "lower_half", as_bool, True),
            sky_valid=get("loss", "sky_valid", as_bool, False),
            nm=NmParams(max_evals=get("optimizer", "max_evals", int, 2000)),
            thresholds=thresholds,
        )
        cfg.icp = IcpParams(
            get("reconstruction", "max_correspondence_dist", float, 1.0),
            get("reconstruction", "max_iterations", int, 50),
            get("reconstruction", "convergence_delta", float, 1e-6),
            get("reconstruction", "voxel_size", float, 0.1),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg.d_max = get("reconstruction", "d_max", float, 75.0)
    cfg.crop_radius = get("reconstruction", "crop_radius", float, None)
    cfg.dynamic_classes = get("reconstruction", "dynamic_classes", parse_classes,
                              frozenset(DYNAMIC_IDS))
    cfg.seed = get("protocol", "seed", int, 0)
    cfg.trials = get("protocol", "trials", int, 30)
    cfg.keep = get("protocol", "keep", int, 10)
    cfg.label_noise = get("protocol", "label_noise", float, 0.0)
    cfg.verify_trials = get("protocol", "verify_trials", int, 0)
    try:
        cfg.verify_noise = SearchBounds(get("protocol", "verify_pos_noise", float, 0.5),
                                        get("protocol", "verify_ang_noise", float, 1.0))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg.workers = get("protocol", "workers", int, 1)
    if not 1 <= cfg.keep <= cfg.trials:
        raise ConfigError(f"{path}: need trials >= keep >= 1")
    return cfg


def read_scene_spec(path):
    from .synth import SceneSpec, urban_intersection

    if str(path) == "default":
        return urban_intersection()
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, exc.lineno, path) from None
    try:
        return SceneSpec.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc), None, path) from None


def write_scene_spec(spec, path):
    with open(path, "w", newline="\n") as f:
        json.dump(spec.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")


# --- reports --------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def write_report(path, fields: dict, tables: Sequence[tuple] = (), delimiter: str = "\t"):
    """Key/value lines followed by named delimiter-separated tables.

    ``tables`` holds ``(name, columns, rows)`` triples.  Floats are written
    with ``repr`` so the file is bit-stable and exactly re-readable.
    """
    out = []
    for k, v in fields.items():
        out.append(f"{k} = {_fmt(v)}")
    for name, columns, rows in tables:
        out.append("")
        out.append(f"[{name}]")
        out.append(delimiter.join(columns))
        for row in rows:
            out.append(delimiter.join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(out) + "\n")


def read_report(path, delimiter: str = "\t"):
    """Parse a report back into ``(fields, {table: (columns, rows)})`` of strings."""
    fields, tables = {}, {}
    current = None
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            tables[current] = (None, [])
            continue
        if current is None:
            k, _, v = line.partition(" = ")
            fields[k] = v
        elif tables[current][0] is None:
            tables[current] = (line.split(delimiter), [])
        else:
            tables[current][1].append(line.split(delimiter))
    return fields, tables
