"""Detail-field composition, linear blend skinning and pinhole projection, with adjoints."""
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ProjectionError, ValidationError

SMALL_ANGLE = 1e-8
MIN_DEPTH = 1e-6


class DetailFields:
    """Static offsets ``delta_g`` and per-frame offsets ``delta_f``.

    ``delta_f`` is hard-masked to the facial region on every write and is exposed
    read-only, so nothing outside this class can put offsets off the mask.
    """

    def __init__(self, delta_g, delta_f, facial_mask):
        self.facial_mask = np.asarray(facial_mask, dtype=bool)
        self._mask3 = self.facial_mask[:, None].astype(np.float64)
        n = self.facial_mask.shape[0]
        self._g = np.zeros((n, 3))
        self._f = np.zeros((len(delta_f), n, 3))
        self.delta_g = delta_g
        self.delta_f = delta_f

    @classmethod
    def zeros(cls, n_frames, facial_mask):
        n = len(facial_mask)
        return cls(np.zeros((n, 3)), np.zeros((n_frames, n, 3)), facial_mask)

    @property
    def n_frames(self):
        return self._f.shape[0]

    @property
    def delta_g(self):
        v = self._g.view()
        v.flags.writeable = False
        return v

    @delta_g.setter
    def delta_g(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._g.shape:
            raise ValidationError(f"delta_g must be {self._g.shape}, got {value.shape}")
        if not np.all(np.isfinite(value)):
            raise NumericalError("delta_g has non-finite entries")
        self._g = value.copy()

    @property
    def delta_f(self):
        v = self._f.view()
        v.flags.writeable = False
        return v

    @delta_f.setter
    def delta_f(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._f.shape:
            raise ValidationError(f"delta_f must be {self._f.shape}, got {value.shape}")
        if not np.all(np.isfinite(value)):
            raise NumericalError("delta_f has non-finite entries")
        self._f = value * self._mask3

    def set_frame(self, i, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._g.shape:
            raise ValidationError(f"delta_f[{i}] must be {self._g.shape}, got {value.shape}")
        f = self._f.copy()
        f[i] = value * self._mask3
        self._f = f

    def copy(self):
        return DetailFields(self._g, self._f, self.facial_mask)


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be at least 1x1")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValidationError("camera rotation is not orthonormal")

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def resized(self, width, height):
        sx, sy = width / self.width, height / self.height
        return Camera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height,
                      self.rotation, self.translation)


def compose_detailed(dense_canonical, fields: DetailFields, i):
    if not 0 <= i < fields.n_frames:
        raise ValidationError(f"frame index {i} outside [0, {fields.n_frames})")
    dense_canonical = np.asarray(dense_canonical, dtype=np.float64)
    if dense_canonical.shape != fields.delta_g.shape:
        raise ValidationError(f"dense mesh {dense_canonical.shape} does not match fields {fields.delta_g.shape}")
    return dense_canonical + fields.delta_g + fields.delta_f[i]


# -- rotations ---------------------------------------------------------------

def skew(w):
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


_E = np.eye(3)
_SKEW_E = np.array([skew(e) for e in _E])


def rodrigues(aa):
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa)
    k = skew(aa)
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    return np.eye(3) + (np.sin(theta) / theta) * k + ((1.0 - np.cos(theta)) / theta**2) * (k @ k)


def rodrigues_jacobian(aa):
    """``dR[i] = dR / d aa[i]`` as a 3 x 3 x 3 array."""
    aa = np.asarray(aa, dtype=np.float64)
    theta2 = float(aa @ aa)
    k = skew(aa)
    if np.sqrt(theta2) < SMALL_ANGLE:
        return np.array([s + 0.5 * (s @ k + k @ s) for s in _SKEW_E])
    r = rodrigues(aa)
    out = np.empty((3, 3, 3))
    for i in range(3):
        v = np.cross(aa, (np.eye(3) - r)[:, i])
        out[i] = (aa[i] * k + skew(v)) @ r / theta2
    return out


# -- skeleton / LBS ------------------------------------------------------------

@dataclass(eq=False)
class Skeleton:
    rest: np.ndarray       # J x 3
    parents: np.ndarray    # J
    names: list

    @classmethod
    def from_model(cls, model):
        return cls(model.joint_rest, model.joint_parents, model.joint_names)

    @property
    def n_joints(self):
        return len(self.names)

    @property
    def order(self):
        """Joint indices with every parent before its children."""
        order, placed = [], set()
        while len(order) < self.n_joints:
            for k in range(self.n_joints):
                p = int(self.parents[k])
                if k not in placed and (p < 0 or p in placed):
                    order.append(k)
                    placed.add(k)
        return order

    def pose_vector(self, frame):
        """Per-joint axis-angle: root <- global_rot, jaw <- omega, others identity."""
        aa = np.zeros((self.n_joints, 3))
        root = int(np.flatnonzero(self.parents < 0)[0])
        aa[root] = frame.global_rot
        aa[self.names.index("jaw")] = frame.omega
        return aa


def forward_kinematics(skel: Skeleton, axis_angles, root_trans):
    """Affine skinning transforms ``x -> M[k] x + c[k]`` for every joint.

    Joint k rotates about its rest position and inherits its parent's transform;
    the root additionally translates by ``root_trans``.
    """
    j = skel.n_joints
    rots = np.array([rodrigues(a) for a in axis_angles])
    mats = np.zeros((j, 3, 3))
    offs = np.zeros((j, 3))
    for k in skel.order:
        p = int(skel.parents[k])
        local_c = skel.rest[k] - rots[k] @ skel.rest[k]
        if p < 0:
            mats[k] = rots[k]
            offs[k] = local_c + root_trans
        else:
            mats[k] = mats[p] @ rots[k]
            offs[k] = mats[p] @ local_c + offs[p]
        if not (np.all(np.isfinite(mats[k])) and np.all(np.isfinite(offs[k]))):
            raise NumericalError(f"non-finite transform at joint {skel.names[k]!r}")
    return mats, offs, rots


def skin(weights, mats, offs, verts):
    blend_m = np.einsum("vj,jab->vab", weights, mats)
    blend_c = weights @ offs
    return np.einsum("vab,vb->va", blend_m, verts) + blend_c


def lbs_pose(topo, skel: Skeleton, verts, frame):
    if topo.dense_skin_weights is None:
        raise ValidationError("topology has no dense skin weights")
    mats, offs, _ = forward_kinematics(skel, skel.pose_vector(frame), frame.global_trans)
    return skin(topo.dense_skin_weights, mats, offs, verts)


def lbs_adjoint(weights, skel: Skeleton, verts, axis_angles, root_trans, grad_posed):
    """Returns ``(g_verts, g_axis_angles (J x 3), g_root_trans)``."""
    mats, offs, rots = forward_kinematics(skel, axis_angles, root_trans)
    blend_m = np.einsum("vj,jab->vab", weights, mats)
    g_verts = np.einsum("vba,vb->va", blend_m, grad_posed)
    g_mats = np.einsum("vj,va,vb->jab", weights, grad_posed, verts)
    g_offs = weights.T @ grad_posed

    g_rots = np.zeros_like(rots)
    g_trans = np.zeros(3)
    for k in reversed(skel.order):
        p = int(skel.parents[k])
        jk = skel.rest[k]
        if p < 0:
            g_rots[k] += g_mats[k] - np.outer(g_offs[k], jk)
            g_trans += g_offs[k]
        else:
            local_c = jk - rots[k] @ jk
            g_mats[p] += g_mats[k] @ rots[k].T + np.outer(g_offs[k], local_c)
            g_rots[k] += mats[p].T @ g_mats[k] - np.outer(mats[p].T @ g_offs[k], jk)
            g_offs[p] += g_offs[k]
    g_aa = np.zeros((skel.n_joints, 3))
    for k in range(skel.n_joints):
        d = rodrigues_jacobian(axis_angles[k])
        g_aa[k] = np.einsum("iab,ab->i", d, g_rots[k])
    return g_verts, g_aa, g_trans


# -- projection ----------------------------------------------------------------

def _check_depth(z, frame=None):
    bad = np.flatnonzero(~(z > MIN_DEPTH))
    if len(bad):
        where = f" in frame {frame}" if frame is not None else ""
        raise ProjectionError(f"point {int(bad[0])}{where} is at or behind the camera (z={z[bad[0]]:.3g})",
                              point_index=int(bad[0]), frame=frame)


def project(points, cam: Camera, frame=None):
    pc = cam.to_camera(points)
    _check_depth(pc[:, 2], frame)
    u = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
    v = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
    return np.stack([u, v], axis=1)


def project_adjoint(points, cam: Camera, grad_uv):
    """Gradient w.r.t. world-space points of a loss on the pixel coordinates."""
    pc = cam.to_camera(points)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    gu, gv = grad_uv[:, 0], grad_uv[:, 1]
    g_cam = np.stack([gu * cam.fx / z, gv * cam.fy / z,
                      -(gu * cam.fx * x + gv * cam.fy * y) / (z * z)], axis=1)
    return g_cam @ cam.rotation
