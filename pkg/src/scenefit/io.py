"""File formats: OBJ, PLY, PNG masks/images, PMAP point maps, JSON.

Every writer goes through :func:`atomic_write`, so an interrupted run never
leaves a half-written file behind.
"""

from __future__ import annotations

import contextlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BadMagic, BadVersion, ParseError, TruncatedPayload, UnsupportedVariant
from .geometry import BinaryMask, OrganizedPointMap, PointCloud, TriMesh


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


@contextlib.contextmanager
def atomic_write(path, mode: str = "wb"):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        # mkstemp creates 0600 files; give the result the usual umask-based mode
        os.chmod(tmp, 0o666 & ~_umask())
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_bytes(path, data: bytes) -> None:
    with atomic_write(path, "wb") as fh:
        fh.write(data)


def write_json(path, obj) -> None:
    data = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    with atomic_write(path, "w") as fh:
        fh.write(data)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# -- OBJ --------------------------------------------------------------------

def _obj_index(tok: str, n: int, line: int) -> int:
    try:
        i = int(tok.split("/")[0])
    except ValueError:
        raise ParseError(f"bad face index {tok!r}", line) from None
    i = i - 1 if i > 0 else n + i
    if not 0 <= i < n:
        raise ParseError(f"face index {tok!r} out of range", line)
    return i


def load_obj(path) -> TriMesh:
    """Read vertices (optionally ``v x y z r g b``) and faces; polygons are
    fan-triangulated and unknown directives ignored."""
    verts, colors, faces = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    vals = [float(x) for x in parts[1:]]
                except ValueError:
                    raise ParseError("bad vertex", lineno) from None
                if len(vals) < 3:
                    raise ParseError("vertex needs 3 coordinates", lineno)
                verts.append(vals[:3])
                colors.append(vals[3:6] if len(vals) >= 6 else None)
            elif tag == "f":
                idx = [_obj_index(t, len(verts), lineno) for t in parts[1:]]
                if len(idx) < 3:
                    raise UnsupportedVariant("face with fewer than 3 vertices", lineno)
                faces.extend([idx[0], idx[i], idx[i + 1]] for i in range(1, len(idx) - 1))
    if any(c is None for c in colors) or not colors:
        cols = None
    else:
        cols = np.array(colors)
    mesh = TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3), cols)
    return mesh.cleaned()


def save_obj(path, mesh: TriMesh) -> None:
    buf = io.StringIO()
    if mesh.colors is None:
        for v in mesh.vertices:
            buf.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
    else:
        for v, c in zip(mesh.vertices, mesh.colors):
            buf.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
    for f in mesh.faces + 1:
        buf.write(f"f {f[0]} {f[1]} {f[2]}\n")
    with atomic_write(path, "w") as fh:
        fh.write(buf.getvalue())


# -- PLY --------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise BadMagic("not a PLY file", 0)
    fmt, elements, lineno = None, [], 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise TruncatedPayload("PLY header not terminated", lineno)
        parts = raw.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before element", lineno)
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", parts[2], parts[3])))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise ParseError(f"unknown PLY type {parts[1]}", lineno)
                elements[-1][2].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedVariant(f"PLY format {fmt!r} not supported", lineno)
    return fmt, elements


def load_ply(path) -> PointCloud:
    """Vertex positions (x, y, z) plus an optional ``confidence`` property;
    other properties and elements are skipped."""
    with open(path, "rb") as fh:
        fmt, elements = _read_ply_header(fh)
        body = fh.read()
    cols: dict[str, np.ndarray] = {}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for r in range(count):
                row = []
                for pname, ptype in props:
                    if pos >= len(tokens):
                        raise TruncatedPayload(f"PLY ended inside element {name!r} row {r}")
                    if isinstance(ptype, tuple):
                        n = int(tokens[pos])
                        pos += 1 + n
                        row.append(np.nan)
                    else:
                        try:
                            row.append(float(tokens[pos]))
                        except ValueError:
                            raise ParseError(f"bad number {tokens[pos]!r}") from None
                        pos += 1
                rows.append(row)
            if name == "vertex":
                arr = np.array(rows, dtype=np.float64).reshape(count, len(props))
                cols = {p[0]: arr[:, i] for i, p in enumerate(props)}
    else:
        offset = 0
        for name, count, props in elements:
            if any(isinstance(t, tuple) for _, t in props):
                if name == "vertex":
                    raise UnsupportedVariant("list properties on vertices are not supported")
                # skip list element rows one by one
                for _ in range(count):
                    for _, ptype in props:
                        if isinstance(ptype, tuple):
                            cnt_t = np.dtype("<" + _PLY_TYPES[ptype[1]])
                            itm_t = np.dtype("<" + _PLY_TYPES[ptype[2]])
                            if offset + cnt_t.itemsize > len(body):
                                raise TruncatedPayload("PLY list truncated", offset)
                            n = int(np.frombuffer(body, cnt_t, 1, offset)[0])
                            offset += cnt_t.itemsize + n * itm_t.itemsize
                        else:
                            offset += np.dtype(_PLY_TYPES[ptype]).itemsize
                if offset > len(body):
                    raise TruncatedPayload("PLY element truncated", offset)
                continue
            dt = np.dtype([(p, "<" + _PLY_TYPES[t]) for p, t in props])
            need = dt.itemsize * count
            if offset + need > len(body):
                raise TruncatedPayload(f"PLY element {name!r} truncated", offset + len(body[offset:]))
            arr = np.frombuffer(body, dt, count, offset)
            offset += need
            if name == "vertex":
                cols = {p: arr[p].astype(np.float64) for p, _ in props}
    if not all(k in cols for k in "xyz"):
        if any(e[0] == "vertex" and e[1] == 0 for e in elements):
            return PointCloud(np.zeros((0, 3)))
        raise ParseError("PLY has no vertex x/y/z")
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    return PointCloud(pts, cols.get("confidence"))


def save_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    has_c = cloud.confidence is not None
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}", "property float x", "property float y", "property float z"]
    if has_c:
        header.append("property float confidence")
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    data = cloud.points.astype("<f4")
    if has_c:
        data = np.concatenate([data, cloud.confidence.astype("<f4")[:, None]], axis=1)
    if binary:
        body = np.ascontiguousarray(data).tobytes()
    else:
        body = "".join(" ".join(f"{x:.9g}" for x in row) + "\n" for row in data).encode("ascii")
    write_bytes(path, head + body)


# -- PNG --------------------------------------------------------------------

def load_mask(path) -> BinaryMask:
    """Any nonzero pixel (in any channel) is true."""
    with Image.open(path) as im:
        a = np.asarray(im)
    if a.ndim == 3:
        a = a.any(axis=2)
    return BinaryMask(a != 0)


def save_mask(path, mask: BinaryMask) -> None:
    buf = io.BytesIO()
    Image.fromarray((mask.bits * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    write_bytes(path, buf.getvalue())


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).copy()


def encode_png(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB")).copy()


def save_rgb(path, rgb: np.ndarray) -> None:
    write_bytes(path, encode_png(rgb))


def save_probmap(path, values: np.ndarray) -> None:
    """8-bit grayscale debug dump of a probability map."""
    a = np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(a, mode="L").save(buf, format="PNG")
    write_bytes(path, buf.getvalue())


# -- PMAP -------------------------------------------------------------------

PMAP_MAGIC = b"PMAP"
PMAP_VERSION = 1
_PMAP_HEADER = struct.Struct("<4sIII")


def encode_pmap(pm: OrganizedPointMap) -> bytes:
    rec = np.empty((pm.height, pm.width, 4), dtype="<f4")
    rec[..., :3] = pm.points
    rec[..., 3] = pm.confidence
    rec[~pm.valid, :3] = np.nan
    return _PMAP_HEADER.pack(PMAP_MAGIC, PMAP_VERSION, pm.width, pm.height) + rec.tobytes()


def decode_pmap(data: bytes) -> OrganizedPointMap:
    if len(data) < 4 or data[:4] != PMAP_MAGIC:
        raise BadMagic("missing PMAP magic", 0)
    if len(data) < _PMAP_HEADER.size:
        raise TruncatedPayload("PMAP header truncated", len(data))
    _, version, width, height = _PMAP_HEADER.unpack_from(data)
    if version != PMAP_VERSION:
        raise BadVersion(f"PMAP version {version} unsupported", 4)
    need = width * height * 16
    payload = data[_PMAP_HEADER.size:]
    if len(payload) < need:
        raise TruncatedPayload(f"PMAP payload has {len(payload)} of {need} bytes",
                               _PMAP_HEADER.size + len(payload))
    rec = np.frombuffer(payload, "<f4", width * height * 4).reshape(height, width, 4)
    pts = rec[..., :3].astype(np.float64)
    valid = np.all(np.isfinite(pts), axis=-1)
    return OrganizedPointMap(pts, rec[..., 3].astype(np.float64), valid)


def load_pmap(path) -> OrganizedPointMap:
    return decode_pmap(Path(path).read_bytes())


def save_pmap(path, pm: OrganizedPointMap) -> None:
    write_bytes(path, encode_pmap(pm))
