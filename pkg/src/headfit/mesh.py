"""Dense topology: midpoint upsampling operator, region masks, Laplacian, normals."""
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError


@dataclass(eq=False)
class DenseTopology:
    n_coarse: int
    faces: np.ndarray          # dense triangles
    bary_face: np.ndarray      # N_s, source coarse face per dense vertex
    bary: np.ndarray           # N_s x 3 barycentric weights inside bary_face
    corners: np.ndarray        # N_s x 3 coarse vertex ids of bary_face
    dense_skin_weights: np.ndarray | None = None
    facial_mask: np.ndarray | None = None

    @property
    def n_dense(self):
        return self.bary.shape[0]

    @cached_property
    def matrix(self):
        """Operator B as a sparse N_s x N matrix (explicit zeros dropped)."""
        rows = np.repeat(np.arange(self.n_dense), 3)
        m = sp.coo_matrix((self.bary.reshape(-1), (rows, self.corners.reshape(-1))),
                          shape=(self.n_dense, self.n_coarse)).tocsr()
        m.eliminate_zeros()
        return m

    @cached_property
    def matrix_t(self):
        return self.matrix.T.tocsr()

    @cached_property
    def coarse_identity_rows(self):
        """Dense index of every coarse vertex (its one-hot row of B)."""
        out = np.full(self.n_coarse, -1, dtype=np.int64)
        onehot = np.flatnonzero(self.bary.max(axis=1) == 1.0)
        for d in onehot[::-1]:
            out[self.corners[d, np.argmax(self.bary[d])]] = d
        return out

    @cached_property
    def edges(self):
        """Unique undirected dense edges, sorted (i < j)."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def _lap_ops(self):
        e = self.edges
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        deg = np.bincount(src, minlength=self.n_dense).astype(np.float64)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        n_dir = len(src)
        # diff_e = x[dst_e] - x[src_e];  (L x)_i = sum_{e: src_e = i} diff_e / deg_i
        gather = sp.csr_matrix((np.ones(n_dir), (np.arange(n_dir), dst)), shape=(n_dir, self.n_dense))
        gather_src = sp.csr_matrix((np.ones(n_dir), (np.arange(n_dir), src)), shape=(n_dir, self.n_dense))
        scatter = sp.csr_matrix((inv[src], (src, np.arange(n_dir))), shape=(self.n_dense, n_dir))
        return gather, gather_src, scatter, src, dst

    @cached_property
    def laplacian(self):
        """Uniform umbrella Laplacian (neighbour mean minus identity), sparse."""
        _, _, _, src, dst = self._lap_ops
        deg = np.bincount(src, minlength=self.n_dense).astype(np.float64)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        off = sp.coo_matrix((inv[src], (src, dst)), shape=(self.n_dense, self.n_dense)).tocsr()
        diag = -np.asarray(off.sum(axis=1)).ravel()
        return (off + sp.diags(diag)).tocsr()

    def apply_laplacian(self, field):
        """L @ field via edge differences, so constant fields map to exact zeros."""
        _, _, scatter, src, dst = self._lap_ops
        diff = field[dst] - field[src]
        return scatter @ diff

    def apply_laplacian_t(self, grad):
        gather, gather_src, scatter, _, _ = self._lap_ops
        g_diff = scatter.T @ grad
        return gather.T @ g_diff - gather_src.T @ g_diff


def _check_manifold(faces):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise ValidationError(f"non-manifold input: {int(np.sum(counts > 2))} edges shared by more than 2 faces")


def build_upsampler(faces, positions, levels=2):
    """Midpoint-subdivide ``levels`` times, recording each new vertex's barycentric
    coordinates relative to the original coarse face it was born in."""
    faces = np.asarray(faces, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.float64)
    if levels < 1:
        raise ValidationError(f"levels must be >= 1, got {levels}")
    if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) == 0:
        raise ValidationError("need a non-empty M x 3 face list")
    n = positions.shape[0]
    if faces.min() < 0 or faces.max() >= n:
        raise ValidationError("face indices out of range")
    if np.any(faces[:, 0] == faces[:, 1]) or np.any(faces[:, 1] == faces[:, 2]) or np.any(faces[:, 0] == faces[:, 2]):
        raise ValidationError("face with repeated vertex")
    _check_manifold(faces)

    used = np.zeros(n, dtype=bool)
    used[faces.ravel()] = True
    if not used.all():
        raise ValidationError(f"coarse vertex {int(np.flatnonzero(~used)[0])} belongs to no face")

    eye = np.eye(3)
    bary_face = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 3))
    for f in range(len(faces) - 1, -1, -1):   # lowest face index wins
        for c in range(3):
            bary_face[faces[f, c]] = f
            bary[faces[f, c]] = eye[c]
    bary_face, bary = list(bary_face), list(bary)

    cur = [(tuple(faces[f]), f, eye.copy()) for f in range(len(faces))]
    for _ in range(levels):
        mids = {}
        nxt = []
        for (i, j, k), origin, cb in cur:
            def mid(a, b, ba, bb):
                key = (a, b) if a < b else (b, a)
                idx = mids.get(key)
                local = 0.5 * (ba + bb)
                if idx is None:
                    idx = len(bary)
                    mids[key] = idx
                    bary_face.append(origin)
                    bary.append(local)
                return idx, local
            ij, bij = mid(i, j, cb[0], cb[1])
            jk, bjk = mid(j, k, cb[1], cb[2])
            ki, bki = mid(k, i, cb[2], cb[0])
            nxt.append(((ij, jk, ki), origin, np.array([bij, bjk, bki])))
            nxt.append(((i, ij, ki), origin, np.array([cb[0], bij, bki])))
            nxt.append(((j, jk, ij), origin, np.array([cb[1], bjk, bij])))
            nxt.append(((k, ki, jk), origin, np.array([cb[2], bki, bjk])))
        cur = nxt

    bary_face = np.array(bary_face, dtype=np.int64)
    return DenseTopology(
        n_coarse=n,
        faces=np.array([t[0] for t in cur], dtype=np.int64),
        bary_face=bary_face,
        bary=np.array(bary),
        corners=faces[bary_face],
    )


def apply_barycentric(topo: DenseTopology, coarse_field):
    coarse_field = np.asarray(coarse_field, dtype=np.float64)
    if coarse_field.shape[0] != topo.n_coarse:
        raise ValidationError(f"coarse field has {coarse_field.shape[0]} rows, topology expects {topo.n_coarse}")
    return topo.matrix @ coarse_field


def apply_barycentric_adjoint(topo: DenseTopology, dense_grad):
    dense_grad = np.asarray(dense_grad, dtype=np.float64)
    if dense_grad.shape[0] != topo.n_dense:
        raise ValidationError(f"dense gradient has {dense_grad.shape[0]} rows, topology expects {topo.n_dense}")
    return topo.matrix_t @ dense_grad


def mark_facial(topo: DenseTopology, coarse_labels, dilate=False):
    labels = np.asarray(coarse_labels).astype(bool)
    if labels.shape != (topo.n_coarse,):
        raise ValidationError(f"expected {topo.n_coarse} coarse labels, got {labels.shape}")
    mask = np.any(labels[topo.corners] & (topo.bary > 0), axis=1)
    if dilate:
        e = topo.edges
        grown = mask.copy()
        grown[e[mask[e[:, 0]], 1]] = True
        grown[e[mask[e[:, 1]], 0]] = True
        mask = grown
    return mask


def build_dense_topology(model, levels=2, dilate_facial=False):
    """Upsample a head model's selected subset and attach skin weights and the facial mask."""
    coarse_pos = model.template[model.head_selector]
    topo = build_upsampler(model.head_faces, coarse_pos, levels)
    topo.dense_skin_weights = apply_barycentric(topo, model.head_skin_weights)
    topo.facial_mask = mark_facial(topo, model.head_facial_labels, dilate=dilate_facial)
    return topo


def _face_cross(positions, faces):
    p0, p1, p2 = positions[faces[:, 0]], positions[faces[:, 1]], positions[faces[:, 2]]
    return np.cross(p1 - p0, p2 - p0)


def vertex_normals(positions, faces):
    """Area-weighted unit vertex normals; returns ``(normals, isolated_vertex_ids)``."""
    positions = np.asarray(positions, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    n = positions.shape[0]
    if len(faces) == 0:
        return np.zeros_like(positions), list(range(n))
    fn = _face_cross(positions, faces)
    idx = faces.reshape(-1)
    vals = np.repeat(fn, 3, axis=0)
    acc = np.stack([np.bincount(idx, weights=vals[:, c], minlength=n) for c in range(3)], axis=1)
    norm = np.linalg.norm(acc, axis=1)
    isolated = np.flatnonzero(norm == 0.0)
    safe = np.where(norm > 0, norm, 1.0)
    return acc / safe[:, None], isolated.tolist()


def vertex_normals_adjoint(positions, faces, grad_normals):
    positions = np.asarray(positions, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    n = positions.shape[0]
    fn = _face_cross(positions, faces)
    idx = faces.reshape(-1)
    vals = np.repeat(fn, 3, axis=0)
    acc = np.stack([np.bincount(idx, weights=vals[:, c], minlength=n) for c in range(3)], axis=1)
    norm = np.linalg.norm(acc, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    unit = acc / safe[:, None]
    g_acc = (grad_normals - unit * np.sum(unit * grad_normals, axis=1, keepdims=True)) / safe[:, None]
    g_acc[norm == 0] = 0.0
    g_c = g_acc[faces[:, 0]] + g_acc[faces[:, 1]] + g_acc[faces[:, 2]]
    p0, p1, p2 = positions[faces[:, 0]], positions[faces[:, 1]], positions[faces[:, 2]]
    a, b = p1 - p0, p2 - p0
    g_a = np.cross(b, g_c)
    g_b = np.cross(g_c, a)
    out_idx = faces.reshape(-1)
    out_vals = np.stack([-(g_a + g_b), g_a, g_b], axis=1).reshape(-1, 3)
    return np.stack([np.bincount(out_idx, weights=out_vals[:, c], minlength=n) for c in range(3)], axis=1)
