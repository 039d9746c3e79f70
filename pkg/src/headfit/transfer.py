"""Identity-adaptive expression transfer: a driving-code encoder and a per-vertex geometry MLP."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io, mesh
from .deform import Skeleton, forward_kinematics, skin
from .engine import adam_step
from .errors import NumericalError, ValidationError
from .model import coarse_mesh
from .raster import rasterize, thread_count

log = logging.getLogger(__name__)


class MLP:
    """Fully connected tanh network; the output layer is linear unless ``out_tanh``."""

    def __init__(self, weights, biases, out_tanh=False):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.out_tanh = out_tanh
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValidationError(f"layer {k}: bias {b.shape} does not match weight {w.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValidationError(f"layer {k} expects {w.shape[1]} inputs, previous layer gives {self.weights[k - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericalError(f"layer {k} has non-finite weights")

    @classmethod
    def init(cls, sizes, rng, out_tanh=False, zero_last=False):
        ws, bs = [], []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-lim, lim, size=(n_out, n_in))
            if zero_last and k == len(sizes) - 2:
                w = np.zeros_like(w)
            ws.append(w)
            bs.append(np.zeros(n_out))
        return cls(ws, bs, out_tanh)

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def forward(self, x, keep=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise ValidationError(f"network expects {self.sizes[0]} inputs, got {x.shape[-1]}")
        acts = [x]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.T + b
            if k < last or self.out_tanh:
                x = np.tanh(x)
            acts.append(x)
        return (x, acts) if keep else x

    def backward(self, acts, g_out):
        """Gradients of a loss w.r.t. weights, biases and the input, given d loss / d output."""
        g = g_out
        last = len(self.weights) - 1
        gw, gb = [None] * len(self.weights), [None] * len(self.weights)
        for k in range(last, -1, -1):
            if k < last or self.out_tanh:
                g = g * (1.0 - acts[k + 1] ** 2)
            gw[k] = g.T @ acts[k]
            gb[k] = g.sum(axis=0)
            g = g @ self.weights[k]
        return gw, gb, g

    def params(self, prefix):
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{k}"] = w
            out[f"{prefix}.b{k}"] = b
        return out

    def with_params(self, prefix, p):
        n = len(self.weights)
        return MLP([p[f"{prefix}.w{k}"] for k in range(n)], [p[f"{prefix}.b{k}"] for k in range(n)], self.out_tanh)


@dataclass(eq=False)
class TransferNet:
    encoder: MLP
    geo: MLP
    pos_scale: float = 10.0      # canonical positions are multiplied by this before the MLP
    out_scale: float = 0.01      # metres per unit of geo output

    def __post_init__(self):
        if self.geo.sizes[-1] != 3:
            raise ValidationError("geometry MLP must output exactly 3 values per vertex")
        if self.geo.sizes[0] != 6 + self.d_code:
            raise ValidationError(f"geometry MLP expects 6 + {self.d_code} inputs, has {self.geo.sizes[0]}")

    @classmethod
    def create(cls, n_driving, d_code=64, enc_hidden=(128, 128), geo_hidden=(128, 128, 128), seed=0,
               pos_scale=10.0, out_scale=0.01):
        rng = np.random.default_rng(seed)
        enc = MLP.init([n_driving, *enc_hidden, d_code], rng, out_tanh=True)
        # zero last layer: an untrained net predicts no offsets (the zero baseline)
        geo = MLP.init([6 + d_code, *geo_hidden, 3], rng, zero_last=True)
        return cls(enc, geo, pos_scale, out_scale)

    @property
    def d_code(self):
        return self.encoder.sizes[-1]

    @property
    def n_driving(self):
        return self.encoder.sizes[0]

    def params(self):
        return {**self.encoder.params("enc"), **self.geo.params("geo")}

    def with_params(self, p):
        return TransferNet(self.encoder.with_params("enc", p), self.geo.with_params("geo", p),
                           self.pos_scale, self.out_scale)

    def quantized(self):
        return self.with_params({k: io.f32(v) for k, v in self.params().items()})

    def save(self, path, meta=None):
        header = {"encoder_sizes": self.encoder.sizes, "geo_sizes": self.geo.sizes, "pos_scale": self.pos_scale,
                  "out_scale": self.out_scale, "activation": "tanh", "encoder_out": "tanh", **(meta or {})}
        io.write_hhm(path, self.params(), meta=header)

    @classmethod
    def load(cls, path):
        arrays, meta = io.read_hhm(path)
        n_enc = len(meta["encoder_sizes"]) - 1
        n_geo = len(meta["geo_sizes"]) - 1
        enc = MLP([arrays[f"enc.w{k}"] for k in range(n_enc)], [arrays[f"enc.b{k}"] for k in range(n_enc)], True)
        geo = MLP([arrays[f"geo.w{k}"] for k in range(n_geo)], [arrays[f"geo.b{k}"] for k in range(n_geo)])
        return cls(enc, geo, float(meta["pos_scale"]), float(meta["out_scale"]))


@dataclass(eq=False)
class NeutralIdentity:
    v_neutral: np.ndarray     # N x 3, dense canonical positions plus static offsets
    normals: np.ndarray       # N x 3 unit
    facial_mask: np.ndarray   # N bool

    def __post_init__(self):
        self.v_neutral = np.asarray(self.v_neutral, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.facial_mask = np.asarray(self.facial_mask, dtype=bool)
        n = len(self.v_neutral)
        if self.normals.shape != (n, 3) or self.facial_mask.shape != (n,):
            raise ValidationError("identity positions, normals and mask disagree in size")

    def features(self, pos_scale):
        idx = np.flatnonzero(self.facial_mask)
        return idx, np.concatenate([self.v_neutral[idx] * pos_scale, self.normals[idx]], axis=1)


@dataclass(eq=False)
class Identity:
    """Everything needed to animate one subject: model, identity coefficients, topology and static offsets."""
    model: object
    topo: object
    beta: np.ndarray
    delta_g: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.delta_g = np.asarray(self.delta_g, dtype=np.float64)
        if self.delta_g.shape != (self.topo.n_dense, 3):
            raise ValidationError(f"delta_g {self.delta_g.shape} does not match topology ({self.topo.n_dense}, 3)")

    def dense(self, psi):
        return mesh.apply_barycentric(self.topo, coarse_mesh(self.model, self.beta, psi))

    def neutral(self):
        v = self.dense(np.zeros(self.model.k_psi)) + self.delta_g
        n, _ = mesh.vertex_normals(v, self.topo.faces)
        return NeutralIdentity(v, n, self.topo.facial_mask)


def driving_inputs(psi_seq, omega_seq):
    psi_seq = np.atleast_2d(np.asarray(psi_seq, dtype=np.float64))
    omega_seq = np.atleast_2d(np.asarray(omega_seq, dtype=np.float64))
    if psi_seq.shape[0] != omega_seq.shape[0]:
        raise ValidationError(f"{psi_seq.shape[0]} psi rows vs {omega_seq.shape[0]} omega rows")
    if omega_seq.shape[1] != 3:
        raise ValidationError("omega rows must have 3 entries")
    return np.concatenate([psi_seq, omega_seq], axis=1)


def encode(net: TransferNet, psi_seq, omega_seq):
    """Per-frame codes in (-1, 1)^D; each row depends only on its own frame."""
    x = driving_inputs(psi_seq, omega_seq)
    if x.shape[1] != net.n_driving:
        raise ValidationError(f"encoder expects {net.n_driving} driving values per frame, got {x.shape[1]}")
    return net.encoder.forward(x)


def predict_offsets(net: TransferNet, identity: NeutralIdentity, q):
    """Offsets for every vertex of the identity for one code; exactly zero off the facial mask."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (net.d_code,):
        raise ValidationError(f"code must have shape ({net.d_code},), got {q.shape}")
    idx, feats = identity.features(net.pos_scale)
    out = np.zeros_like(identity.v_neutral)
    if len(idx):
        x = np.concatenate([feats, np.broadcast_to(q, (len(idx), len(q)))], axis=1)
        out[idx] = net.geo.forward(x) * net.out_scale
    return out


# -- training --------------------------------------------------------------------

@dataclass(eq=False)
class TransferSample:
    """One identity's sequence: neutral geometry, driving parameters and target offsets."""
    identity: NeutralIdentity
    psi: np.ndarray           # F x K
    omega: np.ndarray         # F x 3
    delta_f: np.ndarray       # F x N x 3
    name: str = ""

    def __post_init__(self):
        self.psi = np.atleast_2d(np.asarray(self.psi, dtype=np.float64))
        self.omega = np.atleast_2d(np.asarray(self.omega, dtype=np.float64))
        self.delta_f = np.asarray(self.delta_f, dtype=np.float64)
        f = self.psi.shape[0]
        if self.omega.shape[0] != f or self.delta_f.shape != (f, *self.identity.v_neutral.shape):
            raise ValidationError(f"sample {self.name!r}: frame counts or vertex counts disagree")


def _frame_loss_grad(net: TransferNet, feats, target, x_drive, want_grad):
    """Squared error of one frame summed over facial vertices and coordinates."""
    q, enc_acts = net.encoder.forward(x_drive[None, :], keep=True)
    n = len(feats)
    x = np.concatenate([feats, np.broadcast_to(q, (n, q.shape[1]))], axis=1)
    y, geo_acts = net.geo.forward(x, keep=True)
    r = y * net.out_scale - target
    loss = float(np.sum(r * r))
    if not want_grad:
        return loss, None
    g_y = 2.0 * r * net.out_scale
    gw, gb, g_x = net.geo.backward(geo_acts, g_y)
    g_q = g_x[:, 6:].sum(axis=0, keepdims=True)
    ew, eb, _ = net.encoder.backward(enc_acts, g_q)
    grads = {}
    for k in range(len(gw)):
        grads[f"geo.w{k}"], grads[f"geo.b{k}"] = gw[k], gb[k]
    for k in range(len(ew)):
        grads[f"enc.w{k}"], grads[f"enc.b{k}"] = ew[k], eb[k]
    return loss, grads


def _items(samples, pos_scale, vertex_subset=None):
    """Flatten samples into per-frame work items ``(features, targets, driving row)``."""
    out = []
    for s_idx, s in enumerate(samples):
        idx, feats = s.identity.features(pos_scale)
        x = driving_inputs(s.psi, s.omega)
        for i in range(len(x)):
            sel = slice(None) if vertex_subset is None else vertex_subset[(s_idx, i)]
            out.append((feats[sel], s.delta_f[i][idx][sel], x[i]))
    return out


def transfer_loss(net: TransferNet, samples, want_grad=True, threads=1, items=None):
    """Masked mean squared error over facial vertices, coordinates and frames (and its gradient)."""
    items = items if items is not None else _items(samples, net.pos_scale)
    count = sum(3 * len(it[0]) for it in items)
    if count == 0:
        raise ValidationError("no facial vertices in the training data")

    def one(it):
        return _frame_loss_grad(net, it[0], it[1], it[2], want_grad)

    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    loss = 0.0
    for r in results:
        loss += r[0]
    loss /= count
    if not want_grad:
        return loss, None
    grads = {k: np.zeros_like(v) for k, v in net.params().items()}
    for r in results:   # fixed reduction order
        for k, g in r[1].items():
            grads[k] += g
    for k in grads:
        grads[k] /= count
    return loss, grads


def zero_baseline(samples):
    num, den = 0.0, 0
    for s in samples:
        t = s.delta_f[:, s.identity.facial_mask]
        num += float(np.sum(t * t))
        den += t.size
    return num / max(den, 1)


@dataclass
class TransferConfig:
    epochs: int = 300
    lr: float = 3e-3
    lr_final_scale: float = 0.01
    batch_frames: int = 8
    vertex_batch: int = 0        # facial vertices sampled per frame and step; 0 = all
    d_code: int = 64
    seed: int = 0
    threads: int = 0
    pos_scale: float = 10.0
    out_scale: float = 0.01
    eval_every: int = 10

    def __post_init__(self):
        if self.epochs < 0 or self.batch_frames < 1 or self.vertex_batch < 0:
            raise ValidationError("epochs, batch_frames and vertex_batch must be non-negative (batch_frames >= 1)")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ValidationError("lr must be positive")

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValidationError(f"unknown transfer config keys: {sorted(extra)}")
        return cls(**d)


def split_samples(samples, val_names):
    val_names = set(val_names)
    train = [s for s in samples if s.name not in val_names]
    val = [s for s in samples if s.name in val_names]
    return train, val


def train_transfer(train, val=(), config: TransferConfig | None = None, net: TransferNet | None = None):
    """Adam on the masked offset MSE; returns ``(net, report)``.  Weights are rounded to float32 at the end."""
    cfg = config or TransferConfig()
    if not train:
        raise ValidationError("empty training set")
    if len({id(s.identity) for s in train}) < 2:
        log.warning("transfer training with a single identity: cross-identity generalization is untested")
    n_driving = train[0].psi.shape[1] + 3
    net = net or TransferNet.create(n_driving, cfg.d_code, seed=cfg.seed, pos_scale=cfg.pos_scale,
                                    out_scale=cfg.out_scale)
    threads = cfg.threads or thread_count()
    rng = np.random.default_rng(cfg.seed)
    frames = [(s_idx, i) for s_idx, s in enumerate(train) for i in range(s.psi.shape[0])]
    n_facial = [int(s.identity.facial_mask.sum()) for s in train]
    base_train = zero_baseline(train)
    base_val = zero_baseline(val) if val else None
    history = []
    params = net.params()
    moments = {}
    t = 0
    steps_per_epoch = int(np.ceil(len(frames) / cfg.batch_frames))
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(frames))
        for start in range(0, len(frames), cfg.batch_frames):
            batch = [frames[j] for j in order[start:start + cfg.batch_frames]]
            items = []
            for s_idx, i in batch:
                s = train[s_idx]
                idx, feats = s.identity.features(net.pos_scale)
                sel = np.arange(len(idx))
                if cfg.vertex_batch and cfg.vertex_batch < len(idx):
                    sel = np.sort(rng.choice(len(idx), size=cfg.vertex_batch, replace=False))
                items.append((feats[sel], s.delta_f[i][idx][sel], driving_inputs(s.psi[i], s.omega[i])[0]))
            _, grads = transfer_loss(net, None, threads=threads, items=items)
            c = 0.5 * (1.0 + np.cos(np.pi * t / max(total_steps - 1, 1)))
            lr = cfg.lr * (cfg.lr_final_scale + (1.0 - cfg.lr_final_scale) * c)
            t += 1
            params, moments = adam_step(params, grads, moments, t, lr)
            net = net.with_params(params)
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            rec = {"epoch": epoch, "train": transfer_loss(net, train, want_grad=False, threads=threads)[0]}
            if val:
                rec["val"] = transfer_loss(net, val, want_grad=False, threads=threads)[0]
            history.append(rec)
            log.info("transfer epoch %d %s", epoch, rec)
    net = net.quantized()
    train_err = transfer_loss(net, train, want_grad=False, threads=threads)[0]
    report = {
        "epochs": cfg.epochs,
        "history": history,
        "train_error": train_err,
        "train_baseline": base_train,
        "per_identity_train_rms": {s.name: sample_rms(net, s) for s in train},
        "config": dict(cfg.__dict__),
        "seed": cfg.seed,
        "n_train_frames": len(frames),
        "n_facial_vertices": n_facial,
    }
    if val:
        report["val_error"] = transfer_loss(net, val, want_grad=False, threads=threads)[0]
        report["val_baseline"] = base_val
        report["val_ratio"] = report["val_error"] / base_val if base_val > 0 else 0.0
    return net, report


def sample_rms(net, sample: TransferSample):
    """Per-frame RMS (over facial vertices) of the predicted-minus-target offset length."""
    codes = encode(net, sample.psi, sample.omega)
    mask = sample.identity.facial_mask
    out = []
    for i, q in enumerate(codes):
        d = predict_offsets(net, sample.identity, q)[mask] - sample.delta_f[i][mask]
        out.append(float(np.sqrt(np.mean(np.sum(d * d, axis=1)))) if len(d) else 0.0)
    return out


# -- application -------------------------------------------------------------------

def apply_transfer(net: TransferNet, target: Identity, driving):
    """Animate ``target`` with driving frame parameters.

    Returns ``(detailed canonical meshes, posed meshes, report)`` as F x N x 3 arrays.
    """
    driving = list(driving)
    if not driving:
        raise ValidationError("no driving frames")
    psi = np.stack([fp.psi for fp in driving])
    omega = np.stack([fp.omega for fp in driving])
    codes = encode(net, psi, omega)
    neutral = target.neutral()
    skel = Skeleton.from_model(target.model)
    detailed, posed, offsets = [], [], []
    for i, fp in enumerate(driving):
        off = predict_offsets(net, neutral, codes[i])
        v = target.dense(fp.psi) + target.delta_g + off
        aa = np.zeros((skel.n_joints, 3))
        aa[target.model.root_index] = fp.global_rot
        aa[target.model.jaw_index] = fp.omega
        mats, offs, _ = forward_kinematics(skel, aa, fp.global_trans)
        detailed.append(v)
        posed.append(skin(target.topo.dense_skin_weights, mats, offs, v))
        offsets.append(off)
    offsets = np.stack(offsets)
    peak = float(np.max(np.abs(offsets))) if offsets.size else 0.0
    report = {"frames": len(driving), "max_abs_offset": peak, "offsets_degenerate": bool(peak < 1e-12)}
    if report["offsets_degenerate"]:
        log.warning("transfer net predicts (near) zero offsets: is it trained?")
    return np.stack(detailed), np.stack(posed), report


def export_control(identity: Identity, posed, cam, out_dir, meta=None):
    """Reference normal map of the unposed neutral mesh plus one driving normal map per frame."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    faces = identity.topo.faces
    neutral = identity.neutral()
    ref = rasterize(neutral.v_neutral, faces, neutral.normals, cam)
    io.write_pfm(out / "reference_normal.pfm", ref.normal)
    maps = {"reference": ref.normal, "driving": []}
    records = []
    for i, v in enumerate(posed):
        nrm, _ = mesh.vertex_normals(v, faces)
        buf = rasterize(v, faces, nrm, cam, frame=i)
        name = f"driving_normal_{i:03d}.pfm"
        io.write_pfm(out / name, buf.normal)
        maps["driving"].append(buf.normal)
        records.append({"frame": i, "file": name})
    manifest = {"reference": "reference_normal.pfm", "frames": records, "width": cam.width, "height": cam.height,
                **(meta or {})}
    io.write_json(out / "manifest.json", manifest)
    return maps, manifest
