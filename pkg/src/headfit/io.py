"""File formats: HHM v1 containers, PFM/PGM images, OBJ meshes, landmark CSV, JSON.

HHM v1 layout (all text lines end with ``\\n``)::

    HHM v1
    meta <single-line JSON object>          (optional, at most once)
    array <name> <f4|i4> <dim0> <dim1> ...  (one line per section, in file order)
    end
    <section 0 bytes><section 1 bytes>...

Each section is the C-order array in little-endian IEEE float32 (``f4``) or
two's-complement int32 (``i4``); a section with no dims is a scalar.  There is
no padding between sections, so the byte stream is identical on every platform.
"""
import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ValidationError

HHM_TAG = "HHM v1"
_DTYPES = {"f4": np.dtype("<f4"), "i4": np.dtype("<i4")}
F32_MAX = float(np.finfo(np.float32).max)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def _dtype_tag(arr):
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return "i4"
    if np.issubdtype(arr.dtype, np.floating):
        return "f4"
    raise ValidationError(f"HHM cannot store dtype {arr.dtype}")


def write_hhm(path, arrays: dict, meta: dict | None = None):
    path = Path(path)
    lines = [HHM_TAG]
    if meta is not None:
        lines.append("meta " + canonical_json(meta))
    payload = []
    for name, value in arrays.items():
        if not name or any(ch.isspace() for ch in name):
            raise ValidationError(f"invalid HHM section name {name!r}")
        arr = np.asarray(value)
        tag = _dtype_tag(arr)
        data = np.asarray(arr, dtype=_DTYPES[tag])
        lines.append(" ".join(["array", name, tag, *map(str, data.shape)]))
        payload.append(data.tobytes())
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    try:
        path.write_bytes(header + b"".join(payload))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_hhm(path):
    """Return ``(arrays, meta)``; float sections come back as float64."""
    path = Path(path)
    raw = path.read_bytes()
    pos = 0
    sections = []
    meta = {}
    first = True
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise ValidationError(f"{path}: truncated HHM header")
        line = raw[pos:nl].decode("ascii")
        pos = nl + 1
        if first:
            if line != HHM_TAG:
                raise ValidationError(f"{path}: not an HHM v1 file (tag {line!r})")
            first = False
            continue
        if line == "end":
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "array":
            parts = rest.split()
            if len(parts) < 2 or parts[1] not in _DTYPES:
                raise ValidationError(f"{path}: bad section line {line!r}")
            sections.append((parts[0], parts[1], tuple(int(p) for p in parts[2:])))
        else:
            raise ValidationError(f"{path}: unknown header record {kind!r}")
    arrays = {}
    for name, tag, shape in sections:
        dt = _DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(raw):
            raise ValidationError(f"{path}: section {name!r} runs past end of file")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(shape)
        pos += nbytes
        arrays[name] = arr.astype(np.float64) if tag == "f4" else arr.astype(np.int64)
    if pos != len(raw):
        raise ValidationError(f"{path}: {len(raw) - pos} trailing bytes after last section")
    return arrays, meta


def f32(x):
    """Round to float32 precision but keep float64 storage."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


# -- PFM / PGM ---------------------------------------------------------------

def write_pfm(path, image):
    """Little-endian PFM (scale -1.0), rows stored bottom-to-top.

    +inf is written as the largest finite float32 so readers never see inf.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        tag, chans = b"Pf", 1
    elif img.ndim == 3 and img.shape[2] == 3:
        tag, chans = b"PF", 3
    else:
        raise ValidationError(f"PFM needs HxW or HxWx3, got {img.shape}")
    img = np.where(np.isposinf(img), F32_MAX, img)
    h, w = img.shape[:2]
    data = np.ascontiguousarray(img[::-1], dtype="<f4").reshape(h, w * chans)
    try:
        with open(path, "wb") as fh:
            fh.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
            fh.write(data.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_pfm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"PF", b"Pf"):
        raise ValidationError(f"{path}: not a PFM file")
    chans = 3 if parts[0] == b"PF" else 1
    w, h = (int(t) for t in parts[1].split())
    scale = float(parts[2])
    dt = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(parts[3], dtype=dt, count=w * h * chans)
    arr = arr.reshape((h, w, 3) if chans == 3 else (h, w))[::-1].astype(np.float64)
    arr[arr == F32_MAX] = np.inf
    return arr


def write_pgm(path, mask):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValidationError(f"PGM needs a 2-D mask, got {m.shape}")
    h, w = m.shape
    data = np.where(m.astype(bool), 255, 0).astype(np.uint8)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM file")
    w, h = (int(t) for t in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
    return data > 127


# -- OBJ ---------------------------------------------------------------------

def write_obj(path, vertices, faces):
    # repr() is the shortest string that parses back to the same double
    lines = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in np.asarray(vertices, dtype=np.float64)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.int64)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "f":
            faces.append([int(t.split("/")[0]) - 1 for t in tok[1:4]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


# -- landmarks CSV -------------------------------------------------------------

LANDMARK_FIELDS = ["frame", "landmark_id", "u", "v", "valid"]


def write_landmarks_csv(path, landmarks, valid):
    """``landmarks``: F x K x 2 pixel coordinates; ``valid``: F x K booleans."""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LANDMARK_FIELDS)
        for f in range(landmarks.shape[0]):
            for k in range(landmarks.shape[1]):
                u, v = landmarks[f, k]
                writer.writerow([f, k, repr(float(u)), repr(float(v)), int(bool(valid[f][k]))])


def read_landmarks_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LANDMARK_FIELDS:
            raise ValidationError(f"{path}: expected columns {LANDMARK_FIELDS}, got {reader.fieldnames}")
        for row in reader:
            rows.append((int(row["frame"]), int(row["landmark_id"]), float(row["u"]), float(row["v"]), row["valid"] == "1"))
    if not rows:
        raise ValidationError(f"{path}: no landmark rows")
    n_frames = max(r[0] for r in rows) + 1
    n_lmk = max(r[1] for r in rows) + 1
    uv = np.zeros((n_frames, n_lmk, 2))
    valid = np.zeros((n_frames, n_lmk), dtype=bool)
    for f, k, u, v, ok in rows:
        uv[f, k] = (u, v)
        valid[f, k] = ok
    return uv, valid


def write_json(path, obj):
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
