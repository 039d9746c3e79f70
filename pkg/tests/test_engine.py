import time

import numpy as np
import pytest

from headfit import engine, synth
from headfit.deform import DetailFields, rodrigues
from headfit.errors import DivergenceError, NumericalError, ValidationError
from headfit.objective import LossWeights

def _gt_state(s):
    psi = np.stack([f.psi for f in s.gt_frames])
    omega = np.stack([f.omega for f in s.gt_frames])
    return psi, omega, s.gt_fields.copy()


def _gt_scene(s):
    return engine.Scene(s.model, s.topo, s.beta, s.cam, s.gt_frames, s.supervision)


@pytest.fixture(scope="module")
def static_scene(toy_model):
    """Prior equals ground truth, neutral expressions and no detail offsets at all.

    With psi = 0 the expression prior is stationary too, so every gradient vanishes.
    """
    params = synth.SynthParams(frames=2, width=48, height=48, levels=1, seed=5, n_bumps=0, dyn_amplitude=0.0,
                               psi_sigma=0.0, prior_psi_sigma=0.0, prior_omega_sigma=0.0).noiseless()
    return synth.make_scene(params, model=toy_model)


def test_adjoint_registry_is_complete():
    engine.check_adjoints()
    with pytest.raises(RuntimeError, match="rasterize"):
        engine.check_adjoints(adjoints={**engine.ADJOINTS, "rasterize": None})


def test_perfect_targets_give_zero_gradient(small_scene):
    scene = _gt_scene(small_scene)
    psi, omega, fields = _gt_state(small_scene)
    w = LossWeights(exp=0.0, dis_f=0.0, dis_g=0.0, lap=0.0)
    ev = engine.evaluate(scene, psi, omega, fields, w, threads=1)
    assert ev.total == 0.0
    for name, g in ev.grads.items():
        assert np.all(g == 0.0), name


def test_landmark_gradient_matches_hand_chain(small_scene):
    """One landmark vertex: d/dv = ldmk/F * M^T J^T 2 r / K with M the blended rotation."""
    scene = _gt_scene(small_scene)
    psi, omega, fields = _gt_state(small_scene)
    g = np.array(fields.delta_g)
    v = scene.landmark_dense[3]
    g[v] += [0.002, -0.001, 0.0015]
    fields.delta_g = g
    ev = engine.evaluate(scene, psi, omega, fields, LossWeights(ldmk=1.0, normal=0, depth=0, exp=0, dis_f=0,
                                                               dis_g=0, lap=0), threads=1)
    cam, k, n_frames = scene.cam, len(scene.landmark_dense), scene.n_frames
    expected = np.zeros(3)
    for i in range(n_frames):
        c = ev.caches[i]
        r = c.landmarks_uv[3] - scene.supervision[i].landmarks_2d[3]
        x, y, z = cam.to_camera(c.posed[v][None])[0]
        jac = np.array([[cam.fx / z, 0, -cam.fx * x / z**2], [0, cam.fy / z, -cam.fy * y / z**2]]) @ cam.rotation
        w = scene.topo.dense_skin_weights[v]
        root = rodrigues(scene.prior[i].global_rot)
        blended = w[0] * root + w[1] * root @ rodrigues(omega[i])
        expected += blended.T @ jac.T @ (2 * r / k) / n_frames
    np.testing.assert_allclose(ev.grads["delta_g"][v], expected, rtol=1e-10)


def test_quadratic_central_difference():
    f = lambda x: float(x @ x)   # noqa: E731
    x = np.array([1.0, 1.0])
    for i in range(2):
        assert abs(engine.central_difference(f, x, i, 1e-4) - 2.0) <= 1e-8


def test_gradcheck_full_and_smooth(small_scene):
    scene = small_scene.scene()
    st = engine.initial_state(scene, engine.FitConfig())
    rng = np.random.default_rng(0)
    fields = DetailFields(st.fields.delta_g + rng.normal(size=st.fields.delta_g.shape) * 1e-4,
                          rng.normal(size=st.fields.delta_f.shape) * 1e-4, st.fields.facial_mask)
    t0 = time.perf_counter()
    full = engine.gradcheck(scene, st.psi, st.omega, fields, LossWeights(), h=1e-6, tol=1e-4, n_probe=8, threads=1)
    smooth = engine.gradcheck(scene, st.psi, st.omega, fields, LossWeights(normal=0, depth=0), h=1e-6, tol=1e-6,
                              n_probe=8, render=False, threads=1)
    assert full["pass"], full
    assert smooth["pass"], smooth
    assert time.perf_counter() - t0 < 120


def test_gradcheck_rejects_bad_arguments(small_scene):
    scene = small_scene.scene()
    st = engine.initial_state(scene, engine.FitConfig())
    with pytest.raises(ValidationError):
        engine.gradcheck(scene, st.psi, st.omega, st.fields, LossWeights(), h=1e-2)
    with pytest.raises(ValidationError):
        engine.gradcheck(scene, st.psi, st.omega, st.fields, LossWeights(), blocks=["beta"])


# -- Adam ---------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = {"x": np.array([1.0, -2.0])}
    m0 = {"x": (np.array([0.5, 0.5]), np.array([0.25, 0.25]))}
    new, mom = engine.adam_step(p, {"x": np.zeros(2)}, m0, t=3, lr=0.1)
    assert np.all(new["x"] == p["x"] - 0.1 * (0.9 * 0.5 / (1 - 0.9**3)) / (np.sqrt(0.999 * 0.25 / (1 - 0.999**3)) + 1e-8))
    np.testing.assert_array_equal(mom["x"][0], 0.9 * m0["x"][0])
    np.testing.assert_array_equal(mom["x"][1], 0.999 * m0["x"][1])
    new, _ = engine.adam_step(p, {"x": np.zeros(2)}, {}, t=1, lr=0.1)
    np.testing.assert_array_equal(new["x"], p["x"])


def test_adam_first_step_by_hand():
    g, lr, eps = 0.37, 0.01, 1e-8
    m = (1 - 0.9) * g
    v = (1 - 0.999) * g * g
    expected = 2.0 - lr * (m / 0.1) / (np.sqrt(v / 0.001) + eps)
    new, _ = engine.adam_step({"x": np.array([2.0])}, {"x": np.array([g])}, {}, t=1, lr=lr)
    assert new["x"][0] == pytest.approx(expected, rel=1e-15)
    assert new["x"][0] == pytest.approx(2.0 - lr, rel=1e-6)


def test_adam_rejects_nonfinite():
    with pytest.raises(NumericalError, match="delta_f"):
        engine.adam_step({"delta_f": np.zeros(2)}, {"delta_f": np.array([0.0, np.inf])}, {}, 1, 0.1)


# -- fitting ----------------------------------------------------------------------

def test_fixed_point(static_scene):
    scene = static_scene.scene()
    cfg = engine.FitConfig(iters=30, static_init=0.0, field_warmup=0, threads=1)
    w = LossWeights()
    state, report = engine.fit_sequence(scene, w, cfg)
    assert report["initial_loss"] == 0.0
    assert np.abs(state.fields.delta_g).max() <= 1e-5
    assert np.abs(state.fields.delta_f).max() <= 1e-5


def test_fit_preserves_mask_and_reports(small_scene):
    scene = small_scene.scene()
    cfg = engine.FitConfig(iters=12, field_warmup=4, threads=1)
    state, report = engine.fit_sequence(scene, LossWeights(), cfg)
    off = ~scene.topo.facial_mask
    assert np.all(state.fields.delta_f[:, off] == 0.0)
    assert report["iterations"] == len(report["history"]) == 12
    assert report["final"]["total"] < report["initial_loss"]
    assert set(report["disentanglement"]) >= {"delta_f_temporal_mean_norm", "delta_g_norm"}
    assert state.moments["delta_f"][0].shape == state.fields.delta_f.shape


def test_fit_is_deterministic_across_thread_counts(small_scene):
    scene = small_scene.scene()
    digests = set()
    for threads in (1, 1, 2):
        _, report = engine.fit_sequence(scene, LossWeights(), engine.FitConfig(iters=5, field_warmup=2, threads=threads))
        report["config"].pop("threads")   # the only field allowed to differ
        digests.add(engine.report_digest(report))
    assert len(digests) == 1


def test_field_warmup_freezes_fields(small_scene):
    scene = small_scene.scene()
    cfg = engine.FitConfig(iters=4, field_warmup=4, threads=1)
    init = engine.initial_state(scene, cfg)
    state, _ = engine.fit_sequence(scene, LossWeights(), cfg)
    np.testing.assert_array_equal(state.fields.delta_g, init.fields.delta_g)
    assert np.all(state.fields.delta_f == 0) and "delta_g" not in state.moments
    assert np.any(state.psi != init.psi)


def test_divergence_aborts_with_report(small_scene):
    cfg = engine.FitConfig(iters=10, divergence_factor=0.5, divergence_patience=1, threads=1)
    with pytest.raises(DivergenceError) as info:
        engine.fit_sequence(small_scene.scene(), LossWeights(), cfg)
    assert info.value.report["diverged"] and info.value.report["iterations"] == 1


def test_fit_config():
    cfg = engine.FitConfig(iters=11, lr_final_scale=0.1)
    r0, r_end = cfg.rates(0, field_unit=2.0), cfg.rates(10, field_unit=2.0)
    assert r0["delta_g"] == pytest.approx(2.0 * cfg.lr_fields)
    assert r_end["psi"] == pytest.approx(0.1 * cfg.lr_expr)
    assert engine.FitConfig(optimize_omega=False).rates(0)["omega"] == 0.0
    for bad in ({"iters": -1}, {"beta1": 1.0}, {"lr_expr": -1.0}, {"field_warmup": -2}):
        with pytest.raises(ValidationError):
            engine.FitConfig(**bad)
    with pytest.raises(ValidationError):
        engine.FitConfig.from_dict({"iterations": 3})
