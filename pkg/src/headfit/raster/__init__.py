"""Deterministic software rasterizer for normal/depth buffers, with an adjoint.

The z-buffer loop runs in a compiled Cython kernel when it is importable and in a
numpy fallback otherwise (``HEADFIT_BACKEND=python`` forces the fallback).  Both
evaluate the same floating-point expressions in the same order, so their output
is bit-identical.
"""
import os
from dataclasses import dataclass

import numpy as np

from ..deform import Camera, _check_depth
from ..errors import ValidationError
from . import _fallback

try:
    from . import _kernel
except ImportError:  # extension not built
    _kernel = None

MIN_AREA = 1e-12


def available_backends():
    return ["cython", "python"] if _kernel is not None else ["python"]


def default_backend():
    if os.environ.get("HEADFIT_BACKEND", "").lower() == "python" or _kernel is None:
        return "python"
    return "cython"


def thread_count():
    n = int(os.environ.get("HEADFIT_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass(eq=False)
class RenderBuffers:
    normal: np.ndarray     # H x W x 3, camera space
    depth: np.ndarray      # H x W, +inf on background
    coverage: np.ndarray   # H x W bool
    face_id: np.ndarray    # H x W, -1 on background
    bary: np.ndarray       # H x W x 3 perspective-correct
    n_faces: int


def setup_faces(u, v, z, faces, width, height):
    """Per-face screen data shared by both backends.

    Culled (back-facing or degenerate) faces get an empty row range.
    """
    f0, f1, f2 = faces[:, 0], faces[:, 1], faces[:, 2]
    x0, y0, x1, y1, x2, y2 = u[f0], v[f0], u[f1], v[f1], u[f2], v[f2]
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    # y points down in the image, so camera-facing CCW triangles have negative area
    keep = (area < 0.0) & (0.5 * np.abs(area) >= MIN_AREA)
    xs = np.stack([x0, x1, x2], axis=1)
    ys = np.stack([y0, y1, y2], axis=1)
    # one pixel of slack so rounding at the bbox edge cannot drop a covered centre
    bbox = np.stack([
        np.floor(xs.min(axis=1) - 0.5) - 1, np.ceil(xs.max(axis=1) - 0.5) + 1,
        np.floor(ys.min(axis=1) - 0.5) - 1, np.ceil(ys.max(axis=1) - 0.5) + 1,
    ], axis=1)
    bbox[:, 0:2] = np.clip(bbox[:, 0:2], 0, width - 1)
    bbox[:, 2:4] = np.clip(bbox[:, 2:4], 0, height - 1)
    bbox = bbox.astype(np.int64)
    outside = (xs.max(axis=1) < 0) | (xs.min(axis=1) > width) | (ys.max(axis=1) < 0) | (ys.min(axis=1) > height)
    bbox[~keep | outside, 2] = 1
    bbox[~keep | outside, 3] = 0
    xy = np.ascontiguousarray(np.stack([x0, y0, x1, y1, x2, y2], axis=1))
    tz = np.ascontiguousarray(np.stack([z[f0], z[f1], z[f2]], axis=1))
    area = np.where(keep, area, 1.0)
    return xy, tz, np.ascontiguousarray(area), np.ascontiguousarray(bbox)


def _screen(positions, cam: Camera, frame=None):
    pc = cam.to_camera(positions)
    if len(pc):
        _check_depth(pc[:, 2], frame)
    u = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
    v = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
    return pc, u, v


def rasterize(positions, faces, normals, cam: Camera, backend=None, threads=None, frame=None):
    positions = np.asarray(positions, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    normals = np.asarray(normals, dtype=np.float64)
    if not np.all(np.isfinite(positions)):
        raise ValidationError("rasterize: non-finite vertex positions")
    h, w = cam.height, cam.width
    if len(faces) == 0:
        return RenderBuffers(np.zeros((h, w, 3)), np.full((h, w), np.inf), np.zeros((h, w), bool),
                             np.full((h, w), -1, np.int32), np.zeros((h, w, 3)), 0)
    pc, u, v = _screen(positions, cam, frame)
    setup = setup_faces(u, v, pc[:, 2], faces, w, h)
    backend = backend or default_backend()
    if backend == "cython":
        if _kernel is None:
            raise ValidationError("compiled raster kernel is not built")
        fid, depth, bary = _kernel.raster_kernel(*setup, w, h, threads or thread_count())
    elif backend == "python":
        fid, depth, bary = _fallback.raster_kernel(*setup, w, h)
    else:
        raise ValidationError(f"unknown raster backend {backend!r}")
    coverage = fid >= 0
    normal = np.zeros((h, w, 3))
    if coverage.any():
        ncam = normals @ cam.rotation.T
        tri = faces[fid[coverage]]
        b = bary[coverage]
        m = b[:, 0:1] * ncam[tri[:, 0]] + b[:, 1:2] * ncam[tri[:, 1]] + b[:, 2:3] * ncam[tri[:, 2]]
        length = np.linalg.norm(m, axis=1, keepdims=True)
        normal[coverage] = m / np.where(length > 0, length, 1.0)
    return RenderBuffers(normal, depth, coverage, fid, bary, len(faces))


def _scatter(idx, vals, n):
    return np.stack([np.bincount(idx, weights=vals[:, c], minlength=n) for c in range(vals.shape[1])], axis=1)


def rasterize_adjoint(buffers: RenderBuffers, grad_normal, grad_depth, positions, faces, normals, cam: Camera):
    """Gradients w.r.t. world vertex positions and world vertex normals.

    Coverage and per-pixel face assignment are held fixed (no visibility
    gradients); background pixels contribute nothing.
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if buffers.n_faces != len(faces):
        raise ValidationError(f"buffers were rendered from {buffers.n_faces} faces, scene has {len(faces)}")
    if buffers.depth.shape != (cam.height, cam.width):
        raise ValidationError("buffer resolution does not match camera")
    n = len(positions)
    g_pos = np.zeros((n, 3))
    g_nrm = np.zeros((n, 3))
    cov = buffers.coverage
    if not cov.any():
        return g_pos, g_nrm
    rows, cols = np.nonzero(cov)
    gn = np.asarray(grad_normal, dtype=np.float64)[rows, cols]
    gd = np.asarray(grad_depth, dtype=np.float64)[rows, cols]
    active = np.any(gn != 0.0, axis=1) | (gd != 0.0)
    if not active.any():
        return g_pos, g_nrm
    rows, cols, gn, gd = rows[active], cols[active], gn[active], gd[active]

    pc, u, v = _screen(positions, cam)
    ncam = np.asarray(normals, dtype=np.float64) @ cam.rotation.T
    tri = faces[buffers.face_id[rows, cols]]                      # P x 3
    px = cols + 0.5
    py = rows + 0.5
    su, sv, sz = u[tri], v[tri], pc[:, 2][tri]                    # P x 3 each
    ax = su - px[:, None]
    ay = sv - py[:, None]
    nxt = [1, 2, 0]
    prv = [2, 0, 1]
    # E_k = cross(s_{k+1} - p, s_{k+2} - p)
    e = ax[:, nxt] * ay[:, prv] - ax[:, prv] * ay[:, nxt]
    x0, y0 = su[:, 0], sv[:, 0]
    area = (su[:, 1] - x0) * (sv[:, 2] - y0) - (su[:, 2] - x0) * (sv[:, 1] - y0)
    lam = e / area[:, None]
    wk = lam / sz
    d = 1.0 / wk.sum(axis=1)
    b = wk * d[:, None]
    nk = ncam[tri]                                                # P x 3 x 3
    m = np.einsum("pk,pkc->pc", b, nk)
    mlen = np.linalg.norm(m, axis=1)
    nn = m / mlen[:, None]

    gm = (gn - nn * np.sum(nn * gn, axis=1, keepdims=True)) / mlen[:, None]
    g_b = np.einsum("pc,pkc->pk", gm, nk)
    g_nk = b[:, :, None] * gm[:, None, :]
    g_w = d[:, None] * (g_b - np.sum(g_b * b, axis=1, keepdims=True)) - (gd * d * d)[:, None]
    g_lam = g_w / sz
    g_z = -g_lam * lam / sz
    g_e = (g_lam - np.sum(g_lam * lam, axis=1, keepdims=True)) / area[:, None]
    g_su = np.zeros_like(su)
    g_sv = np.zeros_like(sv)
    for k in range(3):
        a_x, a_y = ax[:, nxt[k]], ay[:, nxt[k]]
        b_x, b_y = ax[:, prv[k]], ay[:, prv[k]]
        g_su[:, nxt[k]] += g_e[:, k] * b_y
        g_sv[:, nxt[k]] += -g_e[:, k] * b_x
        g_su[:, prv[k]] += -g_e[:, k] * a_y
        g_sv[:, prv[k]] += g_e[:, k] * a_x
    xc, yc = pc[:, 0][tri], pc[:, 1][tri]
    g_cam = np.stack([
        g_su * cam.fx / sz,
        g_sv * cam.fy / sz,
        g_z - (g_su * cam.fx * xc + g_sv * cam.fy * yc) / (sz * sz),
    ], axis=2)                                                    # P x 3 x 3
    idx = tri.reshape(-1)
    g_pos = _scatter(idx, g_cam.reshape(-1, 3), n) @ cam.rotation
    g_nrm = _scatter(idx, g_nk.reshape(-1, 3), n) @ cam.rotation
    return g_pos, g_nrm
