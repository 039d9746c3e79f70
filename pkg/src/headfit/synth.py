"""Synthetic ground truth: a procedural toy head, GT detail fields and rendered targets."""
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io, mesh
from .deform import Camera, DetailFields
from .engine import Scene, forward_frame
from .errors import ValidationError
from .model import FrameParams, HeadModel, read_frames, write_frames
from .objective import SupervisionFrame

HEAD_RADII = np.array([0.075, 0.1, 0.09])   # x (width), y (height), z (depth), metres


def _smoothstep(x, lo, hi):
    t = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def unit_coords(points):
    """Ellipsoid-normalised coordinates (the toy head maps onto the unit sphere)."""
    return np.asarray(points) / HEAD_RADII


def facial_weight(q):
    """Smooth weight strictly inside the labelled facial region."""
    return (_smoothstep(q[:, 2], 0.62, 0.82) * _smoothstep(q[:, 1], -0.8, -0.6)
            * (1.0 - _smoothstep(q[:, 1], 0.22, 0.38)))


def _ellipsoid_normals(points):
    n = np.asarray(points) / HEAD_RADII**2
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _uv_sphere(n_rings, n_segments):
    verts = [(0.0, 1.0, 0.0)]
    for r in range(1, n_rings + 1):
        theta = np.pi * r / (n_rings + 1)
        for s in range(n_segments):
            phi = 2.0 * np.pi * s / n_segments
            verts.append((np.sin(theta) * np.sin(phi), np.cos(theta), np.sin(theta) * np.cos(phi)))
    verts.append((0.0, -1.0, 0.0))
    verts = np.array(verts)
    south = len(verts) - 1

    def ring(r, s):
        return 1 + (r - 1) * n_segments + (s % n_segments)

    faces = []
    for s in range(n_segments):
        faces.append((0, ring(1, s), ring(1, s + 1)))
    for r in range(1, n_rings):
        for s in range(n_segments):
            a, b = ring(r, s), ring(r, s + 1)
            c, d = ring(r + 1, s), ring(r + 1, s + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))
    for s in range(n_segments):
        faces.append((south, ring(n_rings, s + 1), ring(n_rings, s)))
    faces = np.array(faces)
    # orient outward
    p = verts[faces]
    vol = np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum()
    if vol < 0:
        faces = faces[:, [0, 2, 1]]
    return verts, faces


LANDMARK_SITES = [
    (-0.35, 0.35), (0.35, 0.35),            # brows
    (-0.45, 0.18), (-0.15, 0.18), (0.15, 0.18), (0.45, 0.18),   # eye corners
    (0.0, -0.05),                            # nose tip
    (-0.28, -0.45), (0.28, -0.45),           # mouth corners
    (-0.55, -0.6), (0.0, -0.78), (0.55, -0.6),   # jaw line and chin
]


def make_toy_model(seed=0, n_rings=15, n_segments=20, k_beta=8, k_psi=6):
    """Ellipsoidal head (~300 vertices), root + jaw joints, small shape/expression bases.

    Four extra "shoulder" vertices sit outside the head selector.  All arrays
    are rounded to float32 so that a saved model reloads bit-identically.
    """
    rng = np.random.default_rng(seed)
    unit, faces = _uv_sphere(n_rings, n_segments)
    head = unit * HEAD_RADII
    n_head = len(head)
    shoulders = np.array([[-0.12, -0.16, -0.05], [0.12, -0.16, -0.05], [0.12, -0.16, 0.08], [-0.12, -0.16, 0.08]])
    template = np.concatenate([head, shoulders])
    s0 = n_head
    faces = np.concatenate([faces, [[s0, s0 + 2, s0 + 1], [s0, s0 + 3, s0 + 2]]])
    n = len(template)

    q = np.concatenate([unit, shoulders / HEAD_RADII])
    nrm = np.concatenate([_ellipsoid_normals(head), np.tile([0.0, 1.0, 0.0], (4, 1))])

    def poly_features(qq):
        x, y, z = qq[:, 0], qq[:, 1], qq[:, 2]
        return np.stack([np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, y * z, x * z], axis=1)

    feats = poly_features(q)
    shape_basis = np.zeros((3 * n, k_beta))
    for k in range(k_beta):
        g = feats @ rng.normal(size=feats.shape[1])
        g *= 0.004 / np.sqrt(np.mean(g[:n_head] ** 2))
        shape_basis[:, k] = (nrm * g[:, None]).reshape(-1)

    face_w = _smoothstep(q[:, 2], 0.35, 0.75) * _smoothstep(q[:, 1], -1.0, -0.8) * (1.0 - _smoothstep(q[:, 1], 0.45, 0.7))
    face_w[n_head:] = 0.0
    expr_basis = np.zeros((3 * n, k_psi))
    lin = np.stack([np.ones(n), q[:, 0], q[:, 1], q[:, 2]], axis=1)
    for k in range(k_psi):
        vec = lin @ rng.normal(size=(4, 3)) * 0.3 + nrm * (lin @ rng.normal(size=4))[:, None]
        expr_basis[:, k] = (vec * face_w[:, None]).reshape(-1)
    # orthogonal columns keep the coefficients identifiable from the geometry
    expr_basis = np.linalg.qr(expr_basis)[0]
    for k in range(k_psi):
        vec = expr_basis[:, k].reshape(n, 3)
        expr_basis[:, k] *= 0.004 / np.sqrt(np.mean(np.sum(vec[:n_head] ** 2, axis=1)[face_w[:n_head] > 0.5]))

    joint_rest = np.array([[0.0, -0.1, -0.01], [0.0, -0.02, 0.0]])
    w_jaw = _smoothstep(-q[:, 1], 0.05, 0.4) * _smoothstep(q[:, 2], -0.2, 0.35)
    w_jaw[n_head:] = 0.0
    w_jaw = io.f32(w_jaw)
    skin = io.f32(np.stack([1.0 - w_jaw, w_jaw], axis=1))

    facial = (q[:, 2] > 0.5) & (q[:, 1] > -0.92) & (q[:, 1] < 0.45)
    facial[n_head:] = False

    used = set()
    landmarks = []
    dirs = unit / np.linalg.norm(unit, axis=1, keepdims=True)
    for x, y in LANDMARK_SITES:
        target = np.array([x, y, np.sqrt(max(1.0 - x * x - y * y, 0.0))])
        order = np.argsort(-(dirs @ target), kind="stable")
        pick = next(int(v) for v in order if int(v) not in used)
        used.add(pick)
        landmarks.append(pick)

    return HeadModel(
        template=io.f32(template),
        faces=faces,
        shape_basis=io.f32(shape_basis),
        expr_basis=io.f32(expr_basis),
        joint_rest=io.f32(joint_rest),
        joint_parents=np.array([-1, 0]),
        joint_names=["root", "jaw"],
        skin_weights=skin,
        head_selector=np.arange(n_head),
        landmark_indices=np.array(landmarks),
        facial_labels=facial,
    )


def default_camera(width=128, height=128, distance=0.6):
    """Camera at +z looking back at the origin; world +y maps to image up."""
    s = width / 128.0
    return Camera(300.0 * s, 300.0 * height / 128.0, width / 2.0, height / 2.0, width, height,
                  rotation=np.diag([1.0, -1.0, -1.0]), translation=np.array([0.0, 0.0, distance]))


@dataclass
class SynthParams:
    frames: int = 8
    seed: int = 0
    width: int = 128
    height: int = 128
    levels: int = 2
    model_seed: int = 0
    beta_sigma: float = 0.5
    psi_sigma: float = 0.5
    n_bumps: int = 1
    bump_amplitude: float = 0.004
    bump_radius: float = 0.02      # compact support radius (m)
    dyn_amplitude: float = 0.002
    prior_psi_sigma: float = 0.2
    prior_omega_sigma: float = 0.02
    yaw_range: float = 0.35
    noise_landmark: float = 0.5
    noise_normal: float = 0.01
    noise_depth: float = 0.001
    dilate_facial: bool = False

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValidationError(f"unknown synth parameters: {sorted(extra)}")
        return cls(**d)

    def noiseless(self):
        d = asdict(self)
        d.update(noise_landmark=0.0, noise_normal=0.0, noise_depth=0.0)
        return SynthParams(**d)


@dataclass(eq=False)
class SynthScene:
    params: SynthParams
    model: HeadModel
    topo: object
    beta: np.ndarray
    cam: Camera
    gt_frames: list
    prior_frames: list
    gt_fields: DetailFields
    bump_vertices: np.ndarray
    supervision: list = field(default_factory=list)

    def scene(self):
        return Scene(self.model, self.topo, self.beta, self.cam, self.prior_frames, self.supervision)

    def gt_posed(self, i):
        c = forward_frame(self.scene(), i, self.gt_frames[i].psi, self.gt_frames[i].omega,
                          self.gt_fields.delta_g, self.gt_fields.delta_f[i], render=False)
        return c.posed


def visibility_counts(model, topo, beta, cam, frames):
    """Number of frames in which each dense vertex touches a rendered pixel (no detail fields)."""
    from .model import coarse_mesh
    from .deform import Skeleton, lbs_pose
    from .raster import rasterize
    skel = Skeleton.from_model(model)
    counts = np.zeros(topo.n_dense, dtype=np.int64)
    for i, fp in enumerate(frames):
        dense = mesh.apply_barycentric(topo, coarse_mesh(model, beta, fp.psi))
        posed = lbs_pose(topo, skel, dense, fp)
        nrm, _ = mesh.vertex_normals(posed, topo.faces)
        buf = rasterize(posed, topo.faces, nrm, cam, frame=i)
        seen = np.zeros(topo.n_dense, bool)
        seen[topo.faces[buf.face_id[buf.coverage]].ravel()] = True
        counts += seen
    return counts


def _pick_bumps(rng, dense, facial_mask, always_visible, n_bumps, radius):
    """Bump centres whose whole support (``radius``) is visible in every frame and clear of the face."""
    facial_pts = dense[facial_mask]
    dist = np.min(np.linalg.norm(dense[:, None, :] - facial_pts[None, :, :], axis=2), axis=1)
    hidden = dense[~always_visible]
    clear = np.min(np.linalg.norm(dense[:, None, :] - hidden[None, :, :], axis=2), axis=1) if len(hidden) else np.full(len(dense), np.inf)
    cand = np.flatnonzero(~facial_mask & (dist > radius) & (clear > radius))
    if len(cand) < n_bumps:
        raise ValidationError("not enough visible room for static bumps on the toy head")
    centres = []
    for _ in range(n_bumps):
        pool = cand if not centres else cand[np.min(np.linalg.norm(
            dense[cand][:, None] - dense[centres][None], axis=2), axis=1) > 2.0 * radius]
        if len(pool) == 0:
            break
        centres.append(int(rng.choice(pool)))
    return centres


def make_scene(params: SynthParams | None = None, model: HeadModel | None = None, beta=None):
    """Build a synthetic scene in memory and render its (optionally noisy) targets."""
    p = params or SynthParams()
    if p.frames < 1:
        raise ValidationError("need at least one frame")
    rng = np.random.default_rng(p.seed)
    model = model or make_toy_model(p.model_seed)
    topo = mesh.build_dense_topology(model, p.levels, dilate_facial=p.dilate_facial)
    cam = default_camera(p.width, p.height)
    beta = io.f32(rng.normal(size=model.k_beta) * p.beta_sigma) if beta is None else np.asarray(beta, float)

    from .model import coarse_mesh
    neutral = mesh.apply_barycentric(topo, coarse_mesh(model, beta, np.zeros(model.k_psi)))
    normals, _ = mesh.vertex_normals(neutral, topo.faces)
    mask = topo.facial_mask

    n_frames = p.frames
    gt_frames, prior_frames = [], []
    phase = rng.uniform(0, 2 * np.pi, size=3)
    for i in range(n_frames):
        s = 2 * np.pi * i / n_frames
        psi = rng.normal(size=model.k_psi) * p.psi_sigma
        omega = np.array([0.08 + 0.06 * np.sin(s + phase[0]), 0.0, 0.0])
        rot = np.array([0.08 * np.sin(s + phase[1]), p.yaw_range * np.sin(s + phase[2]), 0.0])
        trans = rng.normal(size=3) * 0.003
        gt = FrameParams(psi, omega, rot, trans)
        gt_frames.append(gt)
        prior_frames.append(FrameParams(psi + rng.normal(size=model.k_psi) * p.prior_psi_sigma,
                                        omega + rng.normal(size=3) * p.prior_omega_sigma, rot, trans))

    # static bumps, hard-zeroed on the facial mask
    if p.n_bumps:
        seen = visibility_counts(model, topo, beta, cam, gt_frames) == n_frames
        centres = _pick_bumps(rng, neutral, mask, seen, p.n_bumps, p.bump_radius)
    else:
        centres = []
    amp = np.zeros(topo.n_dense)
    for c in centres:
        r2 = np.sum((neutral - neutral[c]) ** 2, axis=1) / p.bump_radius**2
        amp += p.bump_amplitude * rng.uniform(0.7, 1.0) * np.clip(1.0 - r2, 0.0, None) ** 3
    amp[mask] = 0.0
    delta_g = amp[:, None] * normals
    bump_vertices = np.flatnonzero(amp > 0.0)

    # zero-mean sinusoidal facial dynamics
    q = unit_coords(neutral)
    fw = facial_weight(q) * mask
    delta_f = np.zeros((n_frames, topo.n_dense, 3))
    t = np.arange(n_frames)
    for m in (1, 2):
        centre = q[mask][rng.integers(mask.sum())]
        blob = np.exp(-0.5 * np.sum((q - centre) ** 2, axis=1) / 0.35**2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * m * t / n_frames + phase) if n_frames > 2 else np.zeros(n_frames)
        field_ = (p.dyn_amplitude * fw * blob)[:, None] * normals
        delta_f += wave[:, None, None] * field_[None]
    delta_f -= delta_f.mean(axis=0, keepdims=True)
    gt_fields = DetailFields(delta_g, delta_f, mask)

    scene = SynthScene(p, model, topo, beta, cam, gt_frames, prior_frames, gt_fields, bump_vertices)
    scene.supervision = render_targets(scene, rng)
    return scene


def render_targets(synth: SynthScene, rng):
    """Targets through the same forward pipeline as fitting, plus seeded noise."""
    p = synth.params
    k = len(synth.model.landmark_indices)
    blank = SupervisionFrame(np.zeros((k, 2)), np.ones(k, bool), np.zeros((p.height, p.width, 3)),
                             np.zeros((p.height, p.width), bool), np.zeros((p.height, p.width)),
                             np.zeros((p.height, p.width), bool))
    tmp = Scene(synth.model, synth.topo, synth.beta, synth.cam, synth.gt_frames, [blank] * len(synth.gt_frames))
    out = []
    for i, gt in enumerate(synth.gt_frames):
        c = forward_frame(tmp, i, gt.psi, gt.omega, synth.gt_fields.delta_g, synth.gt_fields.delta_f[i])
        buf = c.buffers
        uv = c.landmarks_uv.copy()
        normal = buf.normal.copy()
        depth = buf.depth.copy()
        cov = buf.coverage
        if p.noise_landmark > 0:
            uv += rng.normal(size=uv.shape) * p.noise_landmark
        if p.noise_normal > 0:
            normal[cov] += rng.normal(size=(int(cov.sum()), 3)) * p.noise_normal
            normal[cov] /= np.linalg.norm(normal[cov], axis=1, keepdims=True)
        if p.noise_depth > 0:
            depth[cov] += rng.normal(size=int(cov.sum())) * p.noise_depth
        out.append(SupervisionFrame(uv, np.ones(k, bool), normal, cov.copy(), depth, cov.copy()))
    return out


# -- on-disk datasets ------------------------------------------------------------

def synth_generate(params: SynthParams, out_dir):
    """Write a synthetic dataset; returns the in-memory scene and the manifest."""
    out = Path(out_dir)
    try:
        (out / "targets").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    scene = make_scene(params)
    meta = {"params": asdict(params), "config_hash": io.config_hash(asdict(params)), "seed": params.seed}
    scene.model.save(out / "model.hhm", meta=meta)
    write_frames(out / "frames_prior.json", scene.prior_frames)
    write_frames(out / "frames_gt.json", scene.gt_frames)
    uv = np.stack([s.landmarks_2d for s in scene.supervision])
    valid = np.stack([s.landmark_valid for s in scene.supervision])
    io.write_landmarks_csv(out / "landmarks.csv", uv, valid)
    files = []
    for i, s in enumerate(scene.supervision):
        rec = {"frame": i, "normal": f"targets/normal_{i:03d}.pfm", "depth": f"targets/depth_{i:03d}.pfm",
               "mask": f"targets/mask_{i:03d}.pgm"}
        io.write_pfm(out / rec["normal"], np.where(s.normal_valid[..., None], s.target_normal, 0.0))
        io.write_pfm(out / rec["depth"], np.where(s.depth_valid, s.target_depth, np.inf))
        io.write_pgm(out / rec["mask"], s.depth_valid)
        files.append(rec)
    io.write_hhm(out / "gt_fields.hhm", {"delta_g": scene.gt_fields.delta_g, "delta_f": scene.gt_fields.delta_f,
                                         "bump_vertices": scene.bump_vertices}, meta=meta)
    g = io.f32(scene.gt_fields.delta_g)
    f = io.f32(scene.gt_fields.delta_f)
    manifest = {
        "format": "headfit-synth v1",
        "params": asdict(params),
        "config_hash": meta["config_hash"],
        "seed": params.seed,
        "beta": scene.beta.tolist(),
        "camera": scene.cam.to_dict(),
        "frames": files,
        "gt": {
            "delta_g_energy": float(np.sum(g * g)),
            "delta_f_energy": float(np.sum(f * f)),
            "bump_energy": float(np.sum(g[scene.bump_vertices] ** 2)),
            "n_bump_vertices": int(len(scene.bump_vertices)),
        },
    }
    io.write_json(out / "manifest.json", manifest)
    return scene, manifest


def load_dataset(data_dir, width=None, height=None):
    """Read a dataset written by :func:`synth_generate` back into a fitting Scene."""
    d = Path(data_dir)
    manifest = io.read_json(d / "manifest.json")
    params = SynthParams.from_dict(manifest["params"])
    model = HeadModel.load(d / "model.hhm")
    topo = mesh.build_dense_topology(model, params.levels, dilate_facial=params.dilate_facial)
    cam = Camera.from_dict(manifest["camera"])
    prior = read_frames(d / "frames_prior.json")
    uv, valid = io.read_landmarks_csv(d / "landmarks.csv")
    sups = []
    for rec in manifest["frames"]:
        i = rec["frame"]
        mask = io.read_pgm(d / rec["mask"])
        normal = io.read_pfm(d / rec["normal"])
        lens = np.linalg.norm(normal, axis=2, keepdims=True)
        normal = np.where(mask[..., None], normal / np.where(lens > 0, lens, 1.0), 0.0)
        depth = io.read_pfm(d / rec["depth"])
        sups.append(SupervisionFrame(uv[i], valid[i], normal, mask, depth, mask & np.isfinite(depth)))
    scene = Scene(model, topo, np.array(manifest["beta"]), cam, prior, sups)
    return scene, manifest


# -- transfer corpus ---------------------------------------------------------------

@dataclass
class LinearTeacher:
    """Ground-truth offsets ``mask * sum_k d_k (M_k x + b_k)`` over driving values ``d = (psi, omega)``."""
    mats: np.ndarray    # (K + 3) x 3 x 3
    offs: np.ndarray    # (K + 3) x 3

    @classmethod
    def random(cls, n_driving, rng, scale=0.001):
        # x is ~0.1 m, so M ~ 0.01 gives ~1 mm per unit driving value
        return cls(rng.normal(size=(n_driving, 3, 3)) * scale * 10.0, rng.normal(size=(n_driving, 3)) * scale * 0.5)

    def offsets(self, positions, mask, drive):
        lin = np.einsum("k,kab,vb->va", drive, self.mats, positions) + drive @ self.offs
        return lin * np.asarray(mask, bool)[:, None]


def make_transfer_corpus(n_identities=4, n_frames=16, seed=0, levels=1, model=None, psi_sigma=0.5,
                         bump_amplitude=0.004, omega_range=(0.0, 0.15)):
    """Identities with distinct shape and static offsets, driven by random sequences; offsets from a linear teacher."""
    from .transfer import Identity, TransferSample
    rng = np.random.default_rng(seed)
    model = model or make_toy_model(0)
    topo = mesh.build_dense_topology(model, levels)
    teacher = LinearTeacher.random(model.k_psi + 3, rng)
    identities, samples, drives = [], [], []
    for k in range(n_identities):
        beta = io.f32(rng.normal(size=model.k_beta))
        from .model import coarse_mesh
        base = mesh.apply_barycentric(topo, coarse_mesh(model, beta, np.zeros(model.k_psi)))
        nrm, _ = mesh.vertex_normals(base, topo.faces)
        centre = base[rng.integers(len(base))]
        r2 = np.sum((base - centre) ** 2, axis=1) / 0.03**2
        amp = bump_amplitude * np.clip(1.0 - r2, 0.0, None) ** 3
        amp[topo.facial_mask] = 0.0
        ident = Identity(model, topo, beta, amp[:, None] * nrm)
        neutral = ident.neutral()
        psi = rng.normal(size=(n_frames, model.k_psi)) * psi_sigma
        omega = np.zeros((n_frames, 3))
        omega[:, 0] = rng.uniform(*omega_range, size=n_frames)
        x = np.concatenate([psi, omega], axis=1)
        delta_f = np.stack([teacher.offsets(neutral.v_neutral, neutral.facial_mask, d) for d in x])
        identities.append(ident)
        samples.append(TransferSample(neutral, psi, omega, delta_f, name=f"id{k}"))
        drives.append([FrameParams(psi[i], omega[i]) for i in range(n_frames)])
    return identities, samples, drives, teacher
