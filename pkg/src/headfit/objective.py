"""Supervision and regularisation terms with their gradients.

All pixel, landmark, vertex and frame aggregations are means, so the default
weights do not depend on resolution, mesh density or sequence length.
"""
import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import NumericalError, ValidationError

log = logging.getLogger(__name__)


@dataclass
class SupervisionFrame:
    landmarks_2d: np.ndarray       # K x 2 pixels
    landmark_valid: np.ndarray     # K bool
    target_normal: np.ndarray      # H x W x 3
    normal_valid: np.ndarray       # H x W bool
    target_depth: np.ndarray       # H x W
    depth_valid: np.ndarray        # H x W bool

    def __post_init__(self):
        self.landmarks_2d = np.asarray(self.landmarks_2d, dtype=np.float64)
        self.landmark_valid = np.asarray(self.landmark_valid, dtype=bool)
        self.target_normal = np.asarray(self.target_normal, dtype=np.float64)
        self.normal_valid = np.asarray(self.normal_valid, dtype=bool)
        self.target_depth = np.asarray(self.target_depth, dtype=np.float64)
        self.depth_valid = np.asarray(self.depth_valid, dtype=bool)
        h, w = self.target_depth.shape
        if self.target_normal.shape != (h, w, 3) or self.normal_valid.shape != (h, w) or self.depth_valid.shape != (h, w):
            raise ValidationError("supervision buffers and masks disagree in size")
        if self.landmark_valid.shape != self.landmarks_2d.shape[:1]:
            raise ValidationError("landmark validity flags do not match landmark count")
        lens = np.linalg.norm(self.target_normal[self.normal_valid], axis=1)
        if lens.size and np.max(np.abs(lens - 1.0)) > 1e-3:
            raise ValidationError("valid target normals must be unit length")

    @property
    def shape(self):
        return self.target_depth.shape


@dataclass
class LossWeights:
    ldmk: float = 1.0
    normal: float = 0.1
    depth: float = 0.1
    exp: float = 1e-4
    # offsets are in metres, so these sit far above the data weights; dynamics pay much more than statics
    dis_f: float = 3e4
    dis_g: float = 1.0
    dis_g_facial_boost: float = 10.0
    lap: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v >= 0):
                raise ValidationError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown loss weight keys: {sorted(extra)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self):
        return asdict(self)


def landmark_loss(projected, targets, valid=None):
    """Mean squared pixel distance over valid landmarks -> ``(loss, d loss / d projected)``."""
    projected = np.asarray(projected, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if projected.shape != targets.shape:
        raise ValidationError(f"{len(projected)} projected landmarks vs {len(targets)} targets")
    valid = np.ones(len(projected), bool) if valid is None else np.asarray(valid, bool)
    k = int(valid.sum())
    if k == 0:
        raise ValidationError("no valid landmarks")
    r = np.where(valid[:, None], projected - targets, 0.0)
    return float(np.sum(r * r) / k), 2.0 * r / k


def dense_losses(buffers, target: SupervisionFrame, exclude=None, diagnostics=None):
    """Masked mean L1 of normal and depth maps over covered, target-valid pixels.

    The normal residual of a pixel is the L1 norm over its three channels.
    Returns ``(l_normal, l_depth, d l_normal / d normal_buffer, d l_depth / d depth_buffer)``.
    """
    if buffers.depth.shape != target.shape:
        raise ValidationError(f"render {buffers.depth.shape} vs target {target.shape}")
    keep = buffers.coverage if exclude is None else buffers.coverage & ~exclude
    out = []
    for pred, tgt, valid in ((buffers.normal, target.target_normal, target.normal_valid),
                             (buffers.depth, target.target_depth, target.depth_valid)):
        mask = keep & valid
        count = int(mask.sum())
        grad = np.zeros_like(pred)
        if count == 0:
            if diagnostics is not None:
                diagnostics["empty_overlap"] = diagnostics.get("empty_overlap", 0) + 1
            log.warning("dense loss: empty overlap between render and target")
            out.append((0.0, grad))
            continue
        r = pred[mask] - tgt[mask]
        grad[mask] = np.sign(r) / count   # sign(0) = 0 is the chosen subgradient
        out.append((float(np.sum(np.abs(r)) / count), grad))
    (ln, gn), (ld, gd) = out
    return ln, ld, gn, gd


def exp_prior(psi):
    psi = np.asarray(psi, dtype=np.float64)
    return float(psi @ psi)


def exp_prior_grad(psi):
    return 2.0 * np.asarray(psi, dtype=np.float64)


def detail_regularizers(fields_, topo, weights: LossWeights):
    """Displacement-magnitude and Laplacian terms on both detail fields.

    Returns ``(l_dis, l_lap, grads)`` where ``grads`` holds the gradients of
    ``l_dis`` and of the unweighted ``l_lap`` for ``delta_g`` and ``delta_f``.
    """
    g = fields_.delta_g
    f = fields_.delta_f
    n = g.shape[0]
    n_frames = max(f.shape[0], 1)
    scale = np.where(topo.facial_mask, weights.dis_g_facial_boost, 1.0)

    l_dis = weights.dis_g * float(np.sum(scale * np.sum(g * g, axis=1)) / n)
    l_dis += weights.dis_f * float(np.sum(f * f) / (n * n_frames))
    g_dis_g = weights.dis_g * 2.0 * scale[:, None] * g / n
    g_dis_f = weights.dis_f * 2.0 * f / (n * n_frames)

    lg = topo.apply_laplacian(g)
    l_lap = float(np.sum(lg * lg) / n)
    g_lap_g = 2.0 * topo.apply_laplacian_t(lg) / n
    g_lap_f = np.zeros_like(f)
    for i in range(f.shape[0]):
        lf = topo.apply_laplacian(f[i])
        l_lap += float(np.sum(lf * lf) / (n * n_frames))
        g_lap_f[i] = 2.0 * topo.apply_laplacian_t(lf) / (n * n_frames)
    return l_dis, l_lap, {"dis_g": g_dis_g, "dis_f": g_dis_f, "lap_g": g_lap_g, "lap_f": g_lap_f}


FRAME_TERMS = ("ldmk", "normal", "depth", "exp")


def total_loss(frame_terms, l_dis, l_lap, weights: LossWeights):
    """Weighted total; ``frame_terms`` is a list (one dict per frame) of raw term values.

    Returns ``(total, breakdown)`` where the breakdown holds the weighted contributions.
    """
    n_frames = len(frame_terms)
    if n_frames == 0:
        raise ValidationError("total_loss needs at least one frame")
    breakdown = {}
    for name in FRAME_TERMS:
        acc = 0.0
        for i, terms in enumerate(frame_terms):
            v = terms[name]
            if not np.isfinite(v):
                raise NumericalError(f"loss term {name!r} is not finite in frame {i}")
            acc += v
        breakdown[name] = getattr(weights, name) * acc / n_frames
    for name, v in (("dis", l_dis), ("lap", l_lap)):
        if not np.isfinite(v):
            raise NumericalError(f"loss term {name!r} is not finite")
    breakdown["dis"] = l_dis
    breakdown["lap"] = weights.lap * l_lap
    total = 0.0
    for name in (*FRAME_TERMS, "dis", "lap"):
        total += breakdown[name]
    return total, breakdown
