"""Per-frame forward/backward pipeline, gradient checking, Adam and sequence fitting.

The pipeline is a fixed list of stages, each with a hand-derived adjoint::

    coarse_mesh -> apply_barycentric -> compose_detailed -> lbs_pose
        -> project (landmarks) / vertex_normals -> rasterize -> losses
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import mesh
from .deform import (DetailFields, Skeleton, forward_kinematics, lbs_adjoint, project,
                     project_adjoint, skin)
from .errors import DivergenceError, NumericalError, ValidationError
from .io import canonical_json
from .model import coarse_mesh, coarse_mesh_adjoint
from .objective import (LossWeights, dense_losses, detail_regularizers,
                        exp_prior, exp_prior_grad, landmark_loss, total_loss)
from .raster import rasterize, rasterize_adjoint, thread_count

log = logging.getLogger(__name__)

BLOCKS = ("psi", "omega", "delta_g", "delta_f")


def _compose_adjoint(grad_detailed):
    """d/dV^s, d/d delta_g and d/d delta_f(i) all equal the incoming gradient."""
    return grad_detailed, grad_detailed, grad_detailed


STAGES = ("coarse_mesh", "apply_barycentric", "compose_detailed", "lbs_pose",
          "project", "vertex_normals", "rasterize")
FORWARD = {
    "coarse_mesh": coarse_mesh,
    "apply_barycentric": mesh.apply_barycentric,
    "compose_detailed": None,   # inlined as V^s + delta_g + delta_f(i)
    "lbs_pose": skin,
    "project": project,
    "vertex_normals": mesh.vertex_normals,
    "rasterize": rasterize,
}
ADJOINTS = {
    "coarse_mesh": coarse_mesh_adjoint,
    "apply_barycentric": mesh.apply_barycentric_adjoint,
    "compose_detailed": _compose_adjoint,
    "lbs_pose": lbs_adjoint,
    "project": project_adjoint,
    "vertex_normals": mesh.vertex_normals_adjoint,
    "rasterize": rasterize_adjoint,
}


def check_adjoints(stages=STAGES, adjoints=None):
    adjoints = ADJOINTS if adjoints is None else adjoints
    missing = [s for s in stages if adjoints.get(s) is None]
    if missing:
        raise RuntimeError(f"pipeline stages without an adjoint: {missing}")


check_adjoints()


@dataclass(eq=False)
class Scene:
    """Fixed inputs of a fit: model, identity, topology, camera, prior and targets."""
    model: object
    topo: object
    beta: np.ndarray
    cam: object
    prior: list                  # FrameParams per frame (global pose is taken from here)
    supervision: list            # SupervisionFrame per frame

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.skeleton = Skeleton.from_model(self.model)
        self.landmark_dense = self.topo.coarse_identity_rows[self.model.head_landmarks]
        if len(self.prior) != len(self.supervision):
            raise ValidationError(f"{len(self.prior)} prior frames vs {len(self.supervision)} supervision frames")
        for sup in self.supervision:
            if sup.shape != (self.cam.height, self.cam.width):
                raise ValidationError(f"target size {sup.shape} does not match camera {self.cam.height}x{self.cam.width}")
            if len(sup.landmarks_2d) != len(self.landmark_dense):
                raise ValidationError("landmark target count does not match the model's landmark set")

    @property
    def n_frames(self):
        return len(self.prior)

    def dense_neutral(self):
        return mesh.apply_barycentric(self.topo, coarse_mesh(self.model, self.beta, np.zeros(self.model.k_psi)))


@dataclass(eq=False)
class FrameCache:
    psi: np.ndarray
    axis_angles: np.ndarray
    trans: np.ndarray
    detailed: np.ndarray
    posed: np.ndarray
    landmarks_uv: np.ndarray
    normals: np.ndarray
    buffers: object


def forward_frame(scene: Scene, i, psi, omega, delta_g, delta_f_i, render=True, backend=None, threads=None):
    prior = scene.prior[i]
    aa = np.zeros((scene.skeleton.n_joints, 3))
    aa[scene.model.root_index] = prior.global_rot
    aa[scene.model.jaw_index] = omega
    coarse = coarse_mesh(scene.model, scene.beta, psi)
    dense = mesh.apply_barycentric(scene.topo, coarse)
    detailed = dense + delta_g + delta_f_i
    mats, offs, _ = forward_kinematics(scene.skeleton, aa, prior.global_trans)
    posed = skin(scene.topo.dense_skin_weights, mats, offs, detailed)
    uv = project(posed[scene.landmark_dense], scene.cam, frame=i)
    normals = buffers = None
    if render:
        normals, _ = mesh.vertex_normals(posed, scene.topo.faces)
        buffers = rasterize(posed, scene.topo.faces, normals, scene.cam, backend=backend, threads=threads, frame=i)
    return FrameCache(np.asarray(psi, dtype=np.float64), aa, prior.global_trans, detailed, posed, uv, normals, buffers)


def frame_terms(scene: Scene, i, cache: FrameCache, exclude=None, diagnostics=None):
    sup = scene.supervision[i]
    l_ldmk, g_uv = landmark_loss(cache.landmarks_uv, sup.landmarks_2d, sup.landmark_valid)
    if cache.buffers is not None:
        l_n, l_d, g_n, g_d = dense_losses(cache.buffers, sup, exclude=exclude, diagnostics=diagnostics)
    else:
        l_n = l_d = 0.0
        g_n = g_d = None
    terms = {"ldmk": l_ldmk, "normal": l_n, "depth": l_d, "exp": exp_prior(cache.psi)}
    return terms, (g_uv, g_n, g_d)


def backward_frame(scene: Scene, cache: FrameCache, upstream, weights: LossWeights, n_frames):
    """Gradients of this frame's weighted data/prior terms w.r.t. psi, omega and
    the detailed canonical vertices (the latter feeds delta_g and delta_f(i))."""
    g_uv, g_n, g_d = upstream
    s = 1.0 / n_frames
    g_posed = np.zeros_like(cache.posed)
    lmk = scene.landmark_dense
    g_lmk = project_adjoint(cache.posed[lmk], scene.cam, (weights.ldmk * s) * g_uv)
    np.add.at(g_posed, lmk, g_lmk)
    if cache.buffers is not None and (weights.normal > 0 or weights.depth > 0):
        g_pos, g_nrm = rasterize_adjoint(cache.buffers, (weights.normal * s) * g_n, (weights.depth * s) * g_d,
                                         cache.posed, scene.topo.faces, cache.normals, scene.cam)
        g_posed += g_pos + mesh.vertex_normals_adjoint(cache.posed, scene.topo.faces, g_nrm)
    g_detailed, g_aa, _ = lbs_adjoint(scene.topo.dense_skin_weights, scene.skeleton, cache.detailed,
                                      cache.axis_angles, cache.trans, g_posed)
    g_dense, _, _ = _compose_adjoint(g_detailed)
    g_coarse = mesh.apply_barycentric_adjoint(scene.topo, g_dense)
    g_psi = coarse_mesh_adjoint(scene.model, g_coarse) + (weights.exp * s) * exp_prior_grad(cache.psi)
    return g_psi, g_aa[scene.model.jaw_index], g_detailed


@dataclass
class Evaluation:
    total: float
    breakdown: dict
    frame_terms: list
    grads: dict | None
    caches: list


def evaluate(scene: Scene, psi, omega, fields: DetailFields, weights: LossWeights, want_grad=True,
             exclude=None, render=True, threads=None, backend=None):
    """Total objective (and optionally its gradient for every parameter block)."""
    n_frames = scene.n_frames
    threads = thread_count() if threads is None else threads
    exclude = exclude or [None] * n_frames

    def run(i):
        cache = forward_frame(scene, i, psi[i], omega[i], fields.delta_g, fields.delta_f[i], render=render,
                              backend=backend, threads=1 if threads > 1 and n_frames > 1 else threads)
        terms, upstream = frame_terms(scene, i, cache, exclude=exclude[i])
        grads = backward_frame(scene, cache, upstream, weights, n_frames) if want_grad else None
        return cache, terms, grads

    if threads > 1 and n_frames > 1:
        with ThreadPoolExecutor(max_workers=min(threads, n_frames)) as pool:
            results = list(pool.map(run, range(n_frames)))
    else:
        results = [run(i) for i in range(n_frames)]

    l_dis, l_lap, reg_grads = detail_regularizers(fields, scene.topo, weights)
    terms = [r[1] for r in results]
    total, breakdown = total_loss(terms, l_dis, l_lap, weights)
    grads = None
    if want_grad:
        mask = fields.facial_mask[:, None]
        g_psi = np.stack([r[2][0] for r in results])
        g_omega = np.stack([r[2][1] for r in results])
        g_g = reg_grads["dis_g"] + weights.lap * reg_grads["lap_g"]
        for r in results:   # fixed frame order
            g_g = g_g + r[2][2]
        g_f = np.stack([r[2][2] for r in results]) + reg_grads["dis_f"] + weights.lap * reg_grads["lap_f"]
        g_f = g_f * mask
        grads = {"psi": g_psi, "omega": g_omega, "delta_g": g_g, "delta_f": g_f}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in block {name!r}")
    return Evaluation(total, breakdown, terms, grads, [r[0] for r in results])


# -- gradient check -------------------------------------------------------------

def _blocks(psi, omega, fields):
    return {"psi": np.array(psi, dtype=np.float64), "omega": np.array(omega, dtype=np.float64),
            "delta_g": np.array(fields.delta_g), "delta_f": np.array(fields.delta_f)}


def _unblocks(blocks, mask):
    return blocks["psi"], blocks["omega"], DetailFields(blocks["delta_g"], blocks["delta_f"], mask)


def _flip_pixels(base, other, sup):
    """Pixels whose visibility or L1 kink side differs between two renders."""
    flip = (base.coverage != other.coverage) | (base.face_id != other.face_id)
    both = base.coverage & other.coverage
    sn0 = np.sign(base.normal - sup.target_normal)
    sn1 = np.sign(other.normal - sup.target_normal)
    flip |= both & np.any(sn0 != sn1, axis=2)
    with np.errstate(invalid="ignore"):
        sd0 = np.sign(base.depth - sup.target_depth)
        sd1 = np.sign(other.depth - sup.target_depth)
    flip |= both & (sd0 != sd1)
    return flip


def central_difference(f, x, flat_idx, h):
    """``(f(x + h e) - f(x - h e)) / 2h`` along one flattened coordinate of ``x``."""
    xp = np.array(x, dtype=np.float64)
    xm = xp.copy()
    xp.reshape(-1)[flat_idx] += h
    xm.reshape(-1)[flat_idx] -= h
    return (f(xp) - f(xm)) / (2.0 * h)


def gradcheck(scene: Scene, psi, omega, fields: DetailFields, weights: LossWeights, h=1e-6, tol=1e-4,
              n_probe=32, seed=0, blocks=BLOCKS, render=True, threads=None):
    """Central-difference check of the analytic gradient on a seeded coordinate subset.

    Pixels that change coverage, winning face, or the sign of an L1 residual under
    any probe are removed from the dense losses for both the analytic gradient and
    the differences.  Relative error per coordinate is
    ``|a - fd| / max(|a|, |fd|, 1e-6 * max|a_block|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValidationError(f"probe step must lie in [1e-7, 1e-3], got {h}")
    for b in blocks:
        if b not in BLOCKS:
            raise ValidationError(f"unknown parameter block {b!r}")
    rng = np.random.default_rng(seed)
    mask = fields.facial_mask
    base_blocks = _blocks(psi, omega, fields)
    base = evaluate(scene, psi, omega, fields, weights, want_grad=True, render=render, threads=threads)

    probes = {}
    for name in blocks:
        arr = base_blocks[name]
        if name == "delta_f":
            cand = np.flatnonzero(np.broadcast_to(mask[None, :, None], arr.shape).reshape(-1))
        else:
            cand = np.arange(arr.size)
        g = np.abs(base.grads[name].reshape(-1)[cand])
        k = min(n_probe, len(cand))
        # half the probes on the largest-gradient coordinates, half uniformly at random
        top = cand[np.argsort(-g, kind="stable")[: k // 2]]
        rest = np.setdiff1d(cand, top)
        rand = rng.choice(rest, size=min(k - len(top), len(rest)), replace=False) if len(rest) else rest
        probes[name] = np.sort(np.concatenate([top, rand]))

    def loss_with(name, arr, exclude):
        p, o, f = _unblocks({**base_blocks, name: arr}, mask)
        return evaluate(scene, p, o, f, weights, want_grad=False, exclude=exclude, render=render, threads=threads)

    def loss_at(name, flat_idx, delta, exclude):
        arr = base_blocks[name].copy()
        arr.reshape(-1)[flat_idx] += delta
        return loss_with(name, arr, exclude)

    exclude = [np.zeros((scene.cam.height, scene.cam.width), bool) for _ in range(scene.n_frames)]
    if render:
        for name, idxs in probes.items():
            for idx in idxs:
                for sgn in (1.0, -1.0):
                    ev = loss_at(name, idx, sgn * h, None)
                    for i in range(scene.n_frames):
                        exclude[i] |= _flip_pixels(base.caches[i].buffers, ev.caches[i].buffers, scene.supervision[i])

    masked = evaluate(scene, psi, omega, fields, weights, want_grad=True, exclude=exclude, render=render, threads=threads)
    report = {"h": h, "tol": tol, "seed": seed, "excluded_pixels": int(sum(int(e.sum()) for e in exclude)),
              "blocks": {}}
    for name, idxs in probes.items():
        analytic = masked.grads[name].reshape(-1)
        floor = 1e-6 * float(np.max(np.abs(analytic))) if analytic.size else 0.0
        errs = []
        for idx in idxs:
            fd = central_difference(lambda x: loss_with(name, x, exclude).total, base_blocks[name], idx, h)
            a = float(analytic[idx])
            denom = max(abs(a), abs(fd), floor)
            errs.append(0.0 if denom == 0 else abs(a - fd) / denom)
        max_err = float(max(errs)) if errs else 0.0
        report["blocks"][name] = {"n_probes": len(idxs), "max_rel_err": max_err, "pass": bool(max_err < tol)}
    report["pass"] = all(b["pass"] for b in report["blocks"].values())
    return report


# -- optimizer -------------------------------------------------------------------

def adam_step(params, grads, moments, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, block by block.

    ``params``/``grads``/``moments`` are dicts keyed by block; ``lr`` may be a
    float or a per-block dict.  ``t`` is the 1-based step count, again either
    shared or per block.  Returns new params and moments (inputs are not modified).
    """
    new_p, new_m = {}, {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in block {name!r}")
        m, v = moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        tb = t[name] if isinstance(t, dict) else t
        m_hat = m / (1.0 - beta1**tb)
        v_hat = v / (1.0 - beta2**tb)
        rate = lr[name] if isinstance(lr, dict) else lr
        new_p[name] = p - rate * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = (m, v)
    return new_p, new_m


FIELD_BLOCKS = ("delta_g", "delta_f")


@dataclass
class FitConfig:
    iters: int = 500
    lr_fields: float = 1e-2         # in units of the mean dense edge length (see field_unit)
    lr_expr: float = 1e-2
    lr_final_scale: float = 0.01    # cosine decay of every rate down to this fraction
    field_warmup: int = 100         # iterations that move only psi/omega before the offset fields start
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimize_omega: bool = True
    static_init: float = 1e-4       # outward offset of non-facial delta_g at start (m)
    field_unit: float = 0.0         # metres per offset-field step unit; 0 = mean dense edge length
    seed: int = 0
    threads: int = 0
    divergence_factor: float = 1e3
    divergence_patience: int = 50
    log_every: int = 50

    def __post_init__(self):
        if self.iters < 0 or self.field_warmup < 0:
            raise ValidationError("iters and field_warmup must be >= 0")
        for name in ("lr_fields", "lr_expr", "lr_final_scale", "eps", "field_unit"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be finite and >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("Adam betas must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown schedule keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def rates(self, step, field_unit=1.0):
        """Learning rates for the 0-based ``step``; offset-field rates are multiplied by ``field_unit``."""
        if self.iters <= 1:
            frac = 1.0
        else:
            c = 0.5 * (1.0 + np.cos(np.pi * step / (self.iters - 1)))
            frac = self.lr_final_scale + (1.0 - self.lr_final_scale) * c
        lr_e = self.lr_expr * frac
        return {"psi": lr_e, "omega": lr_e if self.optimize_omega else 0.0,
                "delta_g": self.lr_fields * field_unit * frac, "delta_f": self.lr_fields * field_unit * frac}


@dataclass(eq=False)
class FitState:
    psi: np.ndarray
    omega: np.ndarray
    fields: DetailFields
    moments: dict = field(default_factory=dict)
    iteration: int = 0
    seed: int = 0

    def blocks(self):
        return {"psi": self.psi, "omega": self.omega, "delta_g": np.array(self.fields.delta_g),
                "delta_f": np.array(self.fields.delta_f)}


def initial_state(scene: Scene, config: FitConfig):
    n_frames = scene.n_frames
    psi = np.stack([fp.psi for fp in scene.prior])
    omega = np.stack([fp.omega for fp in scene.prior])
    mask = scene.topo.facial_mask
    normals, _ = mesh.vertex_normals(scene.dense_neutral(), scene.topo.faces)
    delta_g = np.where(mask[:, None], 0.0, config.static_init * normals)
    fields = DetailFields(delta_g, np.zeros((n_frames, len(mask), 3)), mask)
    return FitState(psi, omega, fields, seed=config.seed)


def mean_edge_length(positions, topo):
    e = topo.edges
    return float(np.mean(np.linalg.norm(positions[e[:, 0]] - positions[e[:, 1]], axis=1)))


def disentanglement_stats(fields: DetailFields, region=None):
    mean_f = fields.delta_f.mean(axis=0) if fields.n_frames else np.zeros_like(fields.delta_g)
    g = fields.delta_g if region is None else fields.delta_g[region]
    return {
        "delta_g_norm": float(np.linalg.norm(fields.delta_g)),
        "delta_g_region_norm": float(np.linalg.norm(g)),
        "delta_f_temporal_mean_norm": float(np.linalg.norm(mean_f)),
        "delta_f_frame_norms": [float(np.linalg.norm(f)) for f in fields.delta_f],
    }


def fit_sequence(scene: Scene, weights: LossWeights, config: FitConfig, state: FitState | None = None):
    """Adam on the total loss over {psi, omega, delta_g, delta_f}; returns ``(state, report)``."""
    if scene.n_frames < 1:
        raise ValidationError("need at least one frame")
    threads = config.threads or thread_count()
    state = state or initial_state(scene, config)
    mask = scene.topo.facial_mask
    unit = config.field_unit or mean_edge_length(scene.dense_neutral(), scene.topo)
    history = []
    start = time.perf_counter()
    initial = None
    over = 0
    for step in range(config.iters):
        ev = evaluate(scene, state.psi, state.omega, state.fields, weights, threads=threads)
        history.append({"total": ev.total, **ev.breakdown})
        if initial is None:
            initial = ev.total
        over = over + 1 if ev.total > config.divergence_factor * initial else 0
        if over >= config.divergence_patience:
            report = _report(scene, state, weights, config, history, None, start, unit, diverged=True)
            raise DivergenceError(f"fit diverged at iteration {step}", report)
        if config.log_every and step % config.log_every == 0:
            log.info("iter %d loss %.6g", step, ev.total)
        grads = dict(ev.grads)
        if not config.optimize_omega:
            grads["omega"] = np.zeros_like(grads["omega"])
        blocks = state.blocks()
        if step < config.field_warmup:
            # coarse stage: the fields stay put and their Adam moments stay empty
            blocks = {k: blocks[k] for k in ("psi", "omega")}
        ts = {k: step + 1 - (config.field_warmup if k in FIELD_BLOCKS else 0) for k in blocks}
        params, moments = adam_step(blocks, grads, state.moments, ts, config.rates(step, unit),
                                    config.beta1, config.beta2, config.eps)
        params = {**state.blocks(), **params}
        moments = {**state.moments, **moments}
        state = FitState(params["psi"], params["omega"], DetailFields(params["delta_g"], params["delta_f"], mask),
                         moments, state.iteration + 1, state.seed)
    final = evaluate(scene, state.psi, state.omega, state.fields, weights, want_grad=False, threads=threads)
    return state, _report(scene, state, weights, config, history, final, start, unit)


def _smoothed(values, window=20):
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")


def _report(scene, state, weights, config, history, final, start, unit, diverged=False):
    totals = [h["total"] for h in history]
    sm = _smoothed(totals)
    converged = bool(not diverged and len(sm) > 20 and abs(sm[-1] - sm[-21]) <= 1e-3 * max(abs(sm[-21]), 1e-300))
    return {
        "iterations": len(history),
        "history": history,
        "initial_loss": totals[0] if totals else None,
        "final": None if final is None else {"total": final.total, **final.breakdown},
        "converged": converged,
        "diverged": diverged,
        "disentanglement": disentanglement_stats(state.fields),
        "config": config.to_dict(),
        "field_unit": unit,
        "weights": weights.to_dict(),
        "seed": config.seed,
        "timing": {"wall_clock_s": time.perf_counter() - start},
    }


def report_digest(report):
    """Canonical JSON of a report without its timing section (for determinism checks)."""
    return canonical_json({k: v for k, v in report.items() if k != "timing"})
