import hashlib

import numpy as np
import pytest

from headfit import engine, io, synth
from headfit.errors import ValidationError
from headfit.objective import LossWeights


@pytest.fixture(scope="module")
def scene(toy_model):
    params = synth.SynthParams(frames=4, width=48, height=48, levels=1, seed=11)
    return synth.make_scene(params, model=toy_model)


def test_toy_model_sizes(toy_model):
    assert toy_model.k_beta == 8 and toy_model.k_psi == 6 and toy_model.n_joints == 2
    assert 250 <= toy_model.n_vertices <= 350
    # expression columns are mutually orthogonal and vanish off the face
    gram = toy_model.expr_basis.T @ toy_model.expr_basis
    off = gram - np.diag(np.diag(gram))
    assert np.abs(off).max() <= 1e-6 * np.diag(gram).max()


def test_ground_truth_invariants(scene):
    f = scene.gt_fields
    np.testing.assert_allclose(f.delta_f.mean(axis=0), 0.0, atol=1e-18)
    assert np.all(f.delta_g[scene.topo.facial_mask] == 0.0)
    assert np.all(f.delta_f[:, ~scene.topo.facial_mask] == 0.0)
    assert len(scene.bump_vertices) > 0 and np.all(np.linalg.norm(f.delta_g[scene.bump_vertices], axis=1) > 0)


def test_noiseless_targets_are_realizable(toy_model):
    s = synth.make_scene(synth.SynthParams(frames=2, width=40, height=40, levels=1, seed=4).noiseless(),
                         model=toy_model)
    gt = engine.Scene(s.model, s.topo, s.beta, s.cam, s.gt_frames, s.supervision)
    psi = np.stack([f.psi for f in s.gt_frames])
    omega = np.stack([f.omega for f in s.gt_frames])
    ev = engine.evaluate(gt, psi, omega, s.gt_fields, LossWeights(exp=0, dis_f=0, dis_g=0, lap=0),
                         want_grad=False, threads=1)
    assert ev.total == 0.0


def test_noise_is_seeded_and_sized(toy_model):
    p = synth.SynthParams(frames=2, width=40, height=40, levels=1, seed=4)
    clean = synth.make_scene(p.noiseless(), model=toy_model)
    noisy = synth.make_scene(p, model=toy_model)
    again = synth.make_scene(p, model=toy_model)
    res = np.concatenate([(n.landmarks_2d - c.landmarks_2d).ravel()
                          for n, c in zip(noisy.supervision, clean.supervision)])
    assert 0.2 < np.std(res) < 1.0
    cov = clean.supervision[0].depth_valid
    dz = noisy.supervision[0].target_depth[cov] - clean.supervision[0].target_depth[cov]
    assert 0.0005 < np.std(dz) < 0.002
    np.testing.assert_allclose(np.linalg.norm(noisy.supervision[0].target_normal[cov], axis=1), 1.0, atol=1e-12)
    for a, b in zip(noisy.supervision, again.supervision):
        np.testing.assert_array_equal(a.target_normal, b.target_normal)


def _digest(d):
    return {p.relative_to(d).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(d.rglob("*")) if p.is_file()}


def test_generate_is_byte_identical(tmp_path):
    p = synth.SynthParams(frames=2, width=32, height=32, levels=1, seed=9)
    synth.synth_generate(p, tmp_path / "a")
    synth.synth_generate(p, tmp_path / "b")
    da, db = _digest(tmp_path / "a"), _digest(tmp_path / "b")
    assert da == db and "manifest.json" in da and "targets/normal_001.pfm" in da


def test_manifest_energy_matches_stored_field(tmp_path):
    p = synth.SynthParams(frames=3, width=32, height=32, levels=1, seed=2)
    _, manifest = synth.synth_generate(p, tmp_path)
    arrays, meta = io.read_hhm(tmp_path / "gt_fields.hhm")
    g = arrays["delta_g"]
    assert manifest["gt"]["delta_g_energy"] == float(np.sum(g * g))
    assert manifest["gt"]["bump_energy"] == float(np.sum(g[arrays["bump_vertices"]] ** 2))
    assert meta["seed"] == manifest["seed"] == 2 and meta["config_hash"] == manifest["config_hash"]


def test_load_dataset_round_trip(tmp_path):
    p = synth.SynthParams(frames=2, width=32, height=32, levels=1, seed=6)
    mem, _ = synth.synth_generate(p, tmp_path)
    disk, manifest = synth.load_dataset(tmp_path)
    assert disk.n_frames == 2 and disk.topo.n_dense == mem.topo.n_dense
    for a, b in zip(disk.supervision, mem.supervision):
        np.testing.assert_array_equal(a.depth_valid, b.depth_valid)
        np.testing.assert_allclose(a.target_depth[a.depth_valid], b.target_depth[b.depth_valid], rtol=1e-6)
        np.testing.assert_allclose(a.landmarks_2d, b.landmarks_2d, rtol=0, atol=1e-9)
    np.testing.assert_array_equal(disk.beta, mem.beta)


def test_synth_validation(tmp_path):
    with pytest.raises(ValidationError):
        synth.make_scene(synth.SynthParams(frames=0))
    with pytest.raises(ValidationError):
        synth.SynthParams.from_dict({"frame": 3})
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        synth.synth_generate(synth.SynthParams(frames=1, width=16, height=16, levels=1), blocker / "sub")


def test_transfer_corpus_teacher(toy_model):
    idents, samples, drives, teacher = synth.make_transfer_corpus(2, 3, seed=1, model=toy_model)
    s = samples[1]
    x = np.concatenate([s.psi[2], s.omega[2]])
    np.testing.assert_array_equal(s.delta_f[2], teacher.offsets(s.identity.v_neutral, s.identity.facial_mask, x))
    assert np.all(s.delta_f[:, ~s.identity.facial_mask] == 0)
    assert len(drives[0]) == 3 and not np.array_equal(idents[0].beta, idents[1].beta)
