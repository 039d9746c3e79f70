"""Generic blendshape + skinning head model and the coarse mesh evaluation."""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import io
from .errors import ValidationError

SKIN_TOL = 1e-6


def normalize_axis_angle(aa):
    """Wrap an axis-angle vector so its magnitude lies in [0, pi]."""
    aa = np.asarray(aa, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(aa)):
        raise ValidationError(f"non-finite axis-angle {aa}")
    theta = float(np.linalg.norm(aa))
    if theta <= np.pi:
        return aa.copy()
    wrapped = (theta + np.pi) % (2.0 * np.pi) - np.pi
    return aa * (wrapped / theta)


@dataclass(eq=False)
class HeadModel:
    template: np.ndarray            # N x 3
    faces: np.ndarray               # M x 3, CCW = outward
    shape_basis: np.ndarray         # 3N x K_beta, row 3*v + axis
    expr_basis: np.ndarray          # 3N x K_psi
    joint_rest: np.ndarray          # J x 3
    joint_parents: np.ndarray       # J, root has -1
    joint_names: list
    skin_weights: np.ndarray        # N x J
    head_selector: np.ndarray       # |P| vertex indices
    landmark_indices: np.ndarray    # K vertex indices (must lie in P)
    facial_labels: np.ndarray       # N booleans

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.expr_basis = np.asarray(self.expr_basis, dtype=np.float64)
        self.joint_rest = np.asarray(self.joint_rest, dtype=np.float64)
        self.joint_parents = np.asarray(self.joint_parents, dtype=np.int64)
        self.joint_names = list(self.joint_names)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.head_selector = np.asarray(self.head_selector, dtype=np.int64)
        self.landmark_indices = np.asarray(self.landmark_indices, dtype=np.int64)
        self.facial_labels = np.asarray(self.facial_labels).astype(bool)
        self._validate()

    def _validate(self):
        n = self.template.shape[0]
        if self.template.ndim != 2 or self.template.shape[1] != 3:
            raise ValidationError(f"template must be N x 3, got {self.template.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValidationError(f"faces must be M x 3, got {self.faces.shape}")
        for name in ("faces", "head_selector", "landmark_indices"):
            idx = getattr(self, name)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValidationError(f"{name} has indices outside [0, {n})")
        for name in ("shape_basis", "expr_basis"):
            basis = getattr(self, name)
            if basis.ndim != 2 or basis.shape[0] != 3 * n:
                raise ValidationError(f"{name} must have {3 * n} rows, got shape {basis.shape}")
        j = self.joint_rest.shape[0]
        if self.joint_parents.shape != (j,) or len(self.joint_names) != j:
            raise ValidationError("joint_rest, joint_parents and joint_names disagree on J")
        roots = np.flatnonzero(self.joint_parents < 0)
        if len(roots) != 1:
            raise ValidationError(f"joint tree needs exactly one root, found {len(roots)}")
        # every joint must reach the root without revisiting a node
        for k in range(j):
            seen, cur = set(), k
            while cur >= 0:
                if cur in seen or cur >= j:
                    raise ValidationError(f"joint parent graph is not a tree (joint {self.joint_names[k]})")
                seen.add(cur)
                cur = int(self.joint_parents[cur])
        if "jaw" not in self.joint_names:
            raise ValidationError("model has no joint named 'jaw'")
        w = self.skin_weights
        if w.shape != (n, j):
            raise ValidationError(f"skin_weights must be {n} x {j}, got {w.shape}")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > SKIN_TOL):
            raise ValidationError("skin weight rows must be nonnegative and sum to 1")
        if self.facial_labels.shape != (n,):
            raise ValidationError("facial_labels must have one entry per vertex")
        if not np.all(np.isin(self.landmark_indices, self.head_selector)):
            raise ValidationError("landmark vertices must belong to the head selector")

    @property
    def n_vertices(self):
        return self.template.shape[0]

    @property
    def k_beta(self):
        return self.shape_basis.shape[1]

    @property
    def k_psi(self):
        return self.expr_basis.shape[1]

    @property
    def n_joints(self):
        return self.joint_rest.shape[0]

    @property
    def jaw_index(self):
        return self.joint_names.index("jaw")

    @property
    def root_index(self):
        return int(np.flatnonzero(self.joint_parents < 0)[0])

    @cached_property
    def _subset_position(self):
        lookup = np.full(self.n_vertices, -1, dtype=np.int64)
        lookup[self.head_selector] = np.arange(len(self.head_selector))
        return lookup

    @cached_property
    def head_faces(self):
        """Faces whose three corners are all selected, reindexed into the subset."""
        mapped = self._subset_position[self.faces]
        return mapped[np.all(mapped >= 0, axis=1)]

    @cached_property
    def head_landmarks(self):
        return self._subset_position[self.landmark_indices]

    @cached_property
    def head_skin_weights(self):
        return self.skin_weights[self.head_selector]

    @cached_property
    def head_facial_labels(self):
        return self.facial_labels[self.head_selector]

    @cached_property
    def _rows(self):
        sel = self.head_selector
        return (3 * sel[:, None] + np.arange(3)).reshape(-1)

    @cached_property
    def head_shape_basis(self):
        return self.shape_basis[self._rows]

    @cached_property
    def head_expr_basis(self):
        """3|P| x K_psi; also the Jacobian of coarse_mesh w.r.t. psi."""
        return self.expr_basis[self._rows]

    def save(self, path, meta=None):
        m = {"joint_names": self.joint_names}
        m.update(meta or {})
        io.write_hhm(path, {
            "template": self.template,
            "faces": self.faces,
            "shape_basis": self.shape_basis,
            "expr_basis": self.expr_basis,
            "joint_rest": self.joint_rest,
            "joint_parents": self.joint_parents,
            "skin_weights": self.skin_weights,
            "head_selector": self.head_selector,
            "landmark_indices": self.landmark_indices,
            "facial_labels": self.facial_labels.astype(np.int32),
        }, meta=m)

    @classmethod
    def load(cls, path):
        arrays, meta = io.read_hhm(path)
        try:
            return cls(joint_names=meta["joint_names"], **arrays)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: incomplete head model ({exc})") from exc


def _check_vector(name, vec, dim):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (dim,):
        raise ValidationError(f"{name} must have shape ({dim},), got {vec.shape}")
    return vec


def coarse_mesh(model: HeadModel, beta, psi):
    """Template plus shape and expression blendshapes, restricted to the head subset."""
    beta = _check_vector("beta", beta, model.k_beta)
    psi = _check_vector("psi", psi, model.k_psi)
    base = model.template[model.head_selector].reshape(-1)
    disp = model.head_shape_basis @ beta + model.head_expr_basis @ psi
    return (base + disp).reshape(-1, 3)


def coarse_mesh_adjoint(model: HeadModel, grad_vertices):
    """Gradient w.r.t. psi given dL/dV on the coarse head subset."""
    return model.head_expr_basis.T @ np.asarray(grad_vertices).reshape(-1)


@dataclass
class FrameParams:
    psi: np.ndarray
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.psi)):
            raise ValidationError("psi has non-finite entries")
        self.omega = normalize_axis_angle(self.omega)
        self.global_rot = normalize_axis_angle(self.global_rot)
        self.global_trans = np.asarray(self.global_trans, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.global_trans)):
            raise ValidationError("global_trans has non-finite entries")

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("psi", "omega", "global_rot", "global_trans")}

    @classmethod
    def from_dict(cls, rec):
        try:
            return cls(**{k: rec[k] for k in ("psi", "omega", "global_rot", "global_trans")})
        except KeyError as exc:
            raise ValidationError(f"frame record missing key {exc}") from exc


def write_frames(path, frames):
    io.write_json(path, [fp.to_dict() for fp in frames])


def read_frames(path):
    recs = io.read_json(path)
    if not isinstance(recs, list):
        raise ValidationError(f"{path}: expected a JSON array of frame records")
    return [FrameParams.from_dict(r) for r in recs]
