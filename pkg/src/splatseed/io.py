"""File formats: PLY point clouds and field checkpoints, sparse-model text, images."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .cloud import ColoredPointCloud, Provenance
from .geometry import CameraIntrinsics, CameraModel, CameraPose, FeatureTrack, Observation

logger = logging.getLogger(__name__)


class MalformedHeader(ValueError):
    pass


class TruncatedBody(ValueError):
    pass


class UnsupportedProperty(ValueError):
    pass


class DanglingReference(ValueError):
    pass


# --- PLY ----------------------------------------------------------------------

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_CANON = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}

SPLAT_PROPS = ("f_dc_0", "f_dc_1", "f_dc_2", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity")
_KNOWN = {"x", "y", "z", "red", "green", "blue", "track_len", "provenance", "track_id", "support"}


@dataclass
class PlyProperty:
    name: str
    dtype: str  # numpy code, e.g. "f4"
    list_count: Optional[str] = None  # numpy code of the count for list properties


@dataclass
class PlyElement:
    name: str
    count: int
    props: list


@dataclass
class PlyHeader:
    fmt: str
    elements: list
    comments: list
    size: int  # header length in bytes

    def vertex(self) -> PlyElement:
        for e in self.elements:
            if e.name == "vertex":
                return e
        raise MalformedHeader("no vertex element")


def _parse_header(data: bytes) -> PlyHeader:
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MalformedHeader("missing 'ply' magic or 'end_header'")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise MalformedHeader("header not terminated by newline")
    try:
        lines = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as e:
        raise MalformedHeader("non-ascii header") from e
    fmt = None
    elements: list = []
    comments: list = []
    for ln in lines[1:]:
        tok = ln.split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise MalformedHeader(f"bad format line: {ln!r}")
            fmt = tok[1]
        elif tok[0] == "comment":
            comments.append(ln[len("comment "):] if len(ln) > 8 else "")
        elif tok[0] == "obj_info":
            continue
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise MalformedHeader(f"bad element line: {ln!r}")
            elements.append(PlyElement(tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MalformedHeader("property before any element")
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in PLY_TYPES or tok[3] not in PLY_TYPES:
                    raise MalformedHeader(f"unknown type in {ln!r}")
                elements[-1].props.append(PlyProperty(tok[4], PLY_TYPES[tok[3]], PLY_TYPES[tok[2]]))
            elif len(tok) == 3 and tok[1] in PLY_TYPES:
                elements[-1].props.append(PlyProperty(tok[2], PLY_TYPES[tok[1]]))
            else:
                raise MalformedHeader(f"bad property line: {ln!r}")
        else:
            raise MalformedHeader(f"unexpected header line: {ln!r}")
    if fmt is None:
        raise MalformedHeader("missing format line")
    return PlyHeader(fmt, elements, comments, nl + 1)


def _read_binary(body: memoryview, offset: int, el: PlyElement, endian: str):
    """Decode one element; returns ({name: array or list of arrays}, new offset)."""
    if all(p.list_count is None for p in el.props):
        dt = np.dtype([(p.name, endian + p.dtype) for p in el.props])
        need = dt.itemsize * el.count
        if len(body) - offset < need:
            raise TruncatedBody(f"expected {need} bytes for {el.count} {el.name} records")
        rec = np.frombuffer(body, dtype=dt, count=el.count, offset=offset)
        return {p.name: rec[p.name].astype(p.dtype) for p in el.props}, offset + need
    cols: dict = {p.name: [] for p in el.props}
    for _ in range(el.count):
        for p in el.props:
            if p.list_count is None:
                size = np.dtype(p.dtype).itemsize
                if len(body) - offset < size:
                    raise TruncatedBody("body ended inside a record")
                cols[p.name].append(np.frombuffer(body, endian + p.dtype, 1, offset)[0])
                offset += size
            else:
                csize = np.dtype(p.list_count).itemsize
                if len(body) - offset < csize:
                    raise TruncatedBody("body ended inside a record")
                n = int(np.frombuffer(body, endian + p.list_count, 1, offset)[0])
                offset += csize
                size = np.dtype(p.dtype).itemsize * n
                if len(body) - offset < size:
                    raise TruncatedBody("body ended inside a list")
                cols[p.name].append(np.frombuffer(body, endian + p.dtype, n, offset).astype(p.dtype))
                offset += size
    out = {}
    for p in el.props:
        out[p.name] = cols[p.name] if p.list_count else np.array(cols[p.name], dtype=p.dtype)
    return out, offset


def _read_ascii(tokens: list, pos: int, el: PlyElement):
    cols: dict = {p.name: [] for p in el.props}
    try:
        for _ in range(el.count):
            for p in el.props:
                if p.list_count is None:
                    cols[p.name].append(tokens[pos])
                    pos += 1
                else:
                    n = int(tokens[pos])
                    cols[p.name].append(np.array(tokens[pos + 1 : pos + 1 + n], dtype=float).astype(p.dtype))
                    if pos + 1 + n > len(tokens):
                        raise IndexError
                    pos += 1 + n
    except IndexError as e:
        raise TruncatedBody(f"fewer than {el.count} {el.name} records") from e
    out = {}
    for p in el.props:
        if p.list_count:
            out[p.name] = cols[p.name]
        else:
            kind = np.dtype(p.dtype).kind
            arr = np.array(cols[p.name], dtype=float if kind == "f" else np.int64)
            out[p.name] = arr.astype(p.dtype)
    return out, pos


def read_ply_raw(path) -> tuple:
    """Parse a PLY file into (header, vertex columns)."""
    data = Path(path).read_bytes()
    hdr = _parse_header(data)
    vertex = hdr.vertex()
    if hdr.fmt == "ascii":
        tokens = data[hdr.size :].decode("ascii").split()
        pos = 0
        for el in hdr.elements:
            cols, pos = _read_ascii(tokens, pos, el)
            if el is vertex:
                return hdr, cols
    endian = "<" if hdr.fmt == "binary_little_endian" else ">"
    body = memoryview(data)
    off = hdr.size
    for el in hdr.elements:
        cols, off = _read_binary(body, off, el, endian)
        if el is vertex:
            return hdr, cols
    raise MalformedHeader("no vertex element")  # pragma: no cover


def read_ply(path) -> Union[ColoredPointCloud, "GaussianField"]:
    """Read a point cloud, or a field checkpoint when splat properties are present."""
    hdr, cols = read_ply_raw(path)
    props = {p.name: p for p in hdr.vertex().props}
    for c in ("x", "y", "z"):
        if c not in props:
            raise UnsupportedProperty(f"required vertex property {c!r} missing")
        if props[c].list_count is not None or np.dtype(props[c].dtype).kind != "f":
            raise UnsupportedProperty(f"property {c!r} must be a float scalar")
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(float)
    if all(k in props for k in SPLAT_PROPS):
        from .splat import GaussianField

        return GaussianField(
            means=pos,
            log_scales=np.stack([cols[f"scale_{i}"] for i in range(3)], axis=1).astype(float),
            quats=np.stack([cols[f"rot_{i}"] for i in range(4)], axis=1).astype(float),
            opacity_logits=cols["opacity"].astype(float),
            colors=np.stack([cols[f"f_dc_{i}"] for i in range(3)], axis=1).astype(float),
        )
    n = len(pos)
    if all(c in props for c in ("red", "green", "blue")):
        rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
        colors = rgb / 255.0 if np.dtype(props["red"].dtype).kind in "iu" else np.clip(rgb.astype(float), 0, 1)
    else:
        colors = np.full((n, 3), 0.5)
    support = [frozenset(int(v) for v in s) for s in cols["support"]] if "support" in cols else None
    extra = {k: v for k, v in cols.items() if k not in _KNOWN}
    return ColoredPointCloud(
        positions=pos,
        colors=colors,
        provenance=cols.get("provenance"),
        support=support,
        track_length=cols.get("track_len"),
        track_id=cols.get("track_id"),
        extra=extra,
    )


def _columns_for(obj) -> list:
    """(name, dtype code, values, is_list) in canonical write order."""
    from .splat import GaussianField

    if isinstance(obj, GaussianField):
        rgb = np.round(np.clip(obj.colors, 0, 1) * 255).astype("u1")
        cols = [("x", "f4", obj.means[:, 0]), ("y", "f4", obj.means[:, 1]), ("z", "f4", obj.means[:, 2])]
        cols += [("red", "u1", rgb[:, 0]), ("green", "u1", rgb[:, 1]), ("blue", "u1", rgb[:, 2])]
        cols += [(f"f_dc_{i}", "f4", obj.colors[:, i]) for i in range(3)]
        cols += [(f"scale_{i}", "f4", obj.log_scales[:, i]) for i in range(3)]
        cols += [(f"rot_{i}", "f4", obj.quats[:, i]) for i in range(4)]
        cols += [("opacity", "f4", obj.opacity_logits)]
        return [(n, d, v, False) for n, d, v in cols]
    c = obj
    rgb = np.round(c.colors * 255).astype("u1")
    cols = [
        ("x", "f4", c.positions[:, 0], False),
        ("y", "f4", c.positions[:, 1], False),
        ("z", "f4", c.positions[:, 2], False),
        ("red", "u1", rgb[:, 0], False),
        ("green", "u1", rgb[:, 1], False),
        ("blue", "u1", rgb[:, 2], False),
        ("track_len", "i4", c.track_length, False),
        ("provenance", "u1", c.provenance, False),
        ("track_id", "i4", c.track_id, False),
        ("support", "i4", [np.array(sorted(s), dtype="i4") for s in c.support], True),
    ]
    for k, v in c.extra.items():
        if isinstance(v, list) or (isinstance(v, np.ndarray) and v.dtype == object):
            cols.append((k, np.asarray(v[0]).dtype.str[1:] if len(v) else "i4", list(v), True))
        else:
            v = np.asarray(v)
            if v.dtype.str[1:] not in _CANON:
                raise UnsupportedProperty(f"extra property {k!r} has unsupported dtype {v.dtype}")
            cols.append((k, v.dtype.str[1:], v, False))
    return cols


def write_ply(path, obj, binary: bool = True, comments: Sequence[str] = ()) -> None:
    """Write a ColoredPointCloud or GaussianField.

    Colors are stored as uint8. Field checkpoints additionally carry the raw
    optimization parameters: f_dc_* (unclamped color), scale_* (log scale),
    rot_* (quaternion w, x, y, z) and opacity (logit), all float32.
    """
    cols = _columns_for(obj)
    n = len(obj)
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    head += [f"comment {c}" for c in comments]
    head.append(f"element vertex {n}")
    for name, dt, _, is_list in cols:
        head.append(f"property list uchar {_CANON[dt]} {name}" if is_list else f"property {_CANON[dt]} {name}")
    head.append("end_header")
    header = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        if not any(c[3] for c in cols):
            dt = np.dtype([(name, "<" + d) for name, d, _, _ in cols])
            rec = np.empty(n, dtype=dt)
            for name, _, v, _ in cols:
                rec[name] = v
            body = rec.tobytes()
        else:
            chunks = []
            for i in range(n):
                for name, d, v, is_list in cols:
                    if is_list:
                        arr = np.asarray(v[i], dtype="<" + d)
                        if len(arr) > 255:
                            raise UnsupportedProperty(f"list {name!r} longer than 255")
                        chunks.append(np.uint8(len(arr)).tobytes())
                        chunks.append(arr.tobytes())
                    else:
                        chunks.append(np.asarray(v[i], dtype="<" + d).tobytes())
            body = b"".join(chunks)
    else:
        lines = []
        for i in range(n):
            toks = []
            for _, d, v, is_list in cols:
                if is_list:
                    arr = np.asarray(v[i])
                    toks.append(str(len(arr)))
                    toks.extend(_fmt_ascii(x, d) for x in arr)
                else:
                    toks.append(_fmt_ascii(v[i], d))
            lines.append(" ".join(toks))
        body = ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")
    Path(path).write_bytes(header + body)


def _fmt_ascii(x, d) -> str:
    if d in ("f4", "f8"):
        # shortest repr that round-trips at the stored precision
        return repr(float(np.float32(x))) if d == "f4" else repr(float(x))
    return str(int(x))


# --- sparse model text --------------------------------------------------------


def _data_lines(path: Path, keep_blank: bool = False) -> list:
    out = []
    for ln in path.read_text().splitlines():
        if ln.lstrip().startswith("#"):
            continue
        if not ln.strip() and not keep_blank:
            continue
        out.append(ln.strip())
    return out


_FOCAL_MODELS = {"SIMPLE_PINHOLE": 1, "PINHOLE": 2, "SIMPLE_RADIAL": 1, "RADIAL": 1, "OPENCV": 2}


@dataclass
class SparseModel:
    cameras: dict  # image id -> CameraModel
    tracks: list
    points: ColoredPointCloud
    names: dict  # image id -> image file name


def read_sparse_model(directory) -> SparseModel:
    """Read cameras.txt, images.txt and points3D.txt.

    Pixel coordinates in the files put the image corner at (0, 0); they are
    shifted by -0.5 so pixel centers sit on integers. Distortion parameters
    of radial models are ignored with a warning.
    """
    d = Path(directory)
    for f in ("cameras.txt", "images.txt", "points3D.txt"):
        if not (d / f).exists():
            raise FileNotFoundError(str(d / f))
    intr = {}
    for ln in _data_lines(d / "cameras.txt"):
        tok = ln.split()
        cid, model, w, h = int(tok[0]), tok[1], int(tok[2]), int(tok[3])
        p = [float(x) for x in tok[4:]]
        if model not in _FOCAL_MODELS:
            raise UnsupportedProperty(f"camera model {model}")
        if _FOCAL_MODELS[model] == 1:
            fx = fy = p[0]
            cx, cy = p[1], p[2]
        else:
            fx, fy, cx, cy = p[:4]
        if model not in ("SIMPLE_PINHOLE", "PINHOLE"):
            logger.warning("camera %d: %s distortion ignored", cid, model)
        intr[cid] = CameraIntrinsics(fx, fy, cx - 0.5, cy - 0.5, w, h)

    cameras, names, kps = {}, {}, {}
    lines = _data_lines(d / "images.txt", keep_blank=True)
    while lines and not lines[-1]:
        lines.pop()
    i = 0
    while i < len(lines):
        if not lines[i]:
            i += 1
            continue
        tok = lines[i].split()
        iid = int(tok[0])
        q = np.array([float(x) for x in tok[1:5]])
        t = [float(x) for x in tok[5:8]]
        cid = int(tok[8])
        if cid not in intr:
            raise DanglingReference(f"image {iid} references missing camera {cid}")
        pose = CameraPose(tuple(q / np.linalg.norm(q)), tuple(t))
        cameras[iid] = CameraModel(intr[cid], pose)
        names[iid] = " ".join(tok[9:])
        pts = lines[i + 1].split() if i + 1 < len(lines) else []
        arr = np.array([float(x) for x in pts]).reshape(-1, 3)
        kps[iid] = arr[:, :2] - 0.5
        i += 2

    pos, col, sup, tracks, tids = [], [], [], [], []
    for ln in _data_lines(d / "points3D.txt"):
        tok = ln.split()
        pid = int(tok[0])
        xyz = [float(x) for x in tok[1:4]]
        rgb = [int(x) for x in tok[4:7]]
        tr = [int(x) for x in tok[8:]]
        obs, seen = [], set()
        for img, idx in zip(tr[0::2], tr[1::2]):
            if img not in cameras:
                raise DanglingReference(f"point {pid} references missing image {img}")
            if not 0 <= idx < len(kps[img]):
                raise DanglingReference(f"point {pid} references missing 2D point {idx} of image {img}")
            if img in seen:
                continue
            seen.add(img)
            obs.append(Observation(img, tuple(float(v) for v in kps[img][idx])))
        tracks.append(FeatureTrack(obs, track_id=pid))
        pos.append(xyz)
        col.append(np.array(rgb) / 255.0)
        sup.append(frozenset(seen))
        tids.append(pid)
    n = len(pos)
    points = ColoredPointCloud(
        positions=np.array(pos, float).reshape(n, 3),
        colors=np.array(col, float).reshape(n, 3),
        provenance=np.full(n, Provenance.SFM, dtype=np.uint8),
        support=sup,
        track_id=np.array(tids, dtype=np.int64),
    )
    return SparseModel(cameras, tracks, points, names)


def write_sparse_model(directory, cameras: dict, tracks: Sequence[FeatureTrack], points: ColoredPointCloud, names: Optional[dict] = None) -> None:
    """Write a PINHOLE text model with one camera record per image."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = names or {}
    cam_lines = ["# Camera list with one line of data per camera:"]
    img_lines = ["# Image list with two lines of data per image:"]
    pt2d: dict = {iid: [] for iid in cameras}
    refs = []
    for k, tr in enumerate(tracks):
        pid = int(points.track_id[k]) if points.track_id[k] >= 0 else k + 1
        entry = []
        for ob in tr.observations:
            if ob.view_id not in cameras:
                raise DanglingReference(f"track {k} references missing image {ob.view_id}")
            pt2d[ob.view_id].append((ob.pixel[0] + 0.5, ob.pixel[1] + 0.5, pid))
            entry.append((ob.view_id, len(pt2d[ob.view_id]) - 1))
        refs.append((pid, entry))
    for iid in sorted(cameras):
        cam = cameras[iid]
        k = cam.intrinsics
        cam_lines.append(f"{iid} PINHOLE {k.width} {k.height} {k.fx!r} {k.fy!r} {k.cx + 0.5!r} {k.cy + 0.5!r}")
        q, t = cam.pose.rotation, cam.pose.translation
        img_lines.append(" ".join([str(iid)] + [repr(float(v)) for v in (*q, *t)] + [str(iid), names.get(iid, f"{iid:04d}.ppm")]))
        img_lines.append(" ".join(f"{x!r} {y!r} {p}" for x, y, p in pt2d[iid]))
    pt_lines = ["# 3D point list with one line of data per point:"]
    rgb = np.round(points.colors * 255).astype(int)
    for k, (pid, entry) in enumerate(refs):
        xyz = " ".join(repr(float(v)) for v in points.positions[k])
        tr = " ".join(f"{a} {b}" for a, b in entry)
        pt_lines.append(f"{pid} {xyz} {rgb[k, 0]} {rgb[k, 1]} {rgb[k, 2]} 0.0 {tr}")
    (d / "cameras.txt").write_text("\n".join(cam_lines) + "\n")
    (d / "images.txt").write_text("\n".join(img_lines) + "\n")
    (d / "points3D.txt").write_text("\n".join(pt_lines) + "\n")


# --- images -------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """PPM (P6) or PNG as float RGB in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float)
    return arr / 255.0


def write_image(path, pixels: np.ndarray) -> None:
    """Write float RGB as 8-bit PPM or PNG, chosen by extension."""
    from PIL import Image

    arr = np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)
