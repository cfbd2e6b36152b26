import numpy as np
import pytest
import torch

from specsr.cube import HyperCube
from specsr.errors import DimensionMismatch, InvalidSpec, ShapeMismatch
from specsr.layers import RirDenoiser
from specsr.prox import prox_tv1d_taut_string
from specsr.simulate import (
    DESK6,
    SceneSpec,
    apply_srt,
    gaussian_srt,
    hsi_wavelengths,
    spectral_upsample_init,
    synth_scene,
)
from specsr.unfold import (
    UnfoldConfig,
    UnfoldNet,
    UnfoldState,
    constraint_residual,
    dual_update,
    exact_phi,
    init_state,
    run_stages,
    run_unfolding,
    v_step,
    xavier_srt,
    y_step_closed_form,
    y_step_learned,
)


def direct_solve(d, rho, y_s, v, u):
    x = 2 * d.T @ y_s + rho * (v + u)
    return np.linalg.solve(2 * d.T @ d + rho * np.eye(d.shape[1]), x)


def make_state(d, rho, u, phi=None):
    zero = HyperCube(np.zeros_like(u), u.shape[1], 1, np.arange(float(u.shape[0])))
    return UnfoldState(
        y_h=zero, u=zero.with_data(u), d=d, rho=rho, phi_mode="learned" if phi is not None else "exact", phi=phi
    )


def cube_from(a):
    return HyperCube(a, a.shape[1], 1, np.arange(float(a.shape[0])))


def test_y_step_two_band_example():
    st = make_state(np.array([[1.0, 1.0]]), 2.0, np.zeros((2, 1)))
    y = y_step_closed_form(st, np.array([[3.0]]), cube_from(np.ones((2, 1))))
    np.testing.assert_allclose(y.data[:, 0], [4 / 3, 4 / 3], rtol=1e-14)


def test_y_step_zero_d():
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=(2, 5, 7))
    st = make_state(np.zeros((2, 5)), 0.7, u)
    y = y_step_closed_form(st, rng.normal(size=(2, 7)), cube_from(v))
    np.testing.assert_allclose(y.data, v + u, rtol=1e-14)


def test_woodbury_matches_direct_solve():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        d = rng.normal(size=(6, 32))
        rho = 10 ** rng.uniform(-2, 2)
        y_s, u, v = rng.normal(size=(6, 9)), rng.normal(size=(32, 9)), rng.normal(size=(32, 9))
        ref = direct_solve(d, rho, y_s, v, u)
        got = y_step_closed_form(make_state(d, rho, u), y_s, cube_from(v)).data
        worst = max(worst, np.linalg.norm(got - ref) / np.linalg.norm(ref))
    assert worst <= 1e-10


def test_learned_phi_substitution():
    rng = np.random.default_rng(2)
    d = rng.normal(size=(3, 8))
    rho = 1.3
    y_s, u, v = rng.normal(size=(3, 4)), rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    exact = y_step_closed_form(make_state(d, rho, u), y_s, cube_from(v)).data
    learned = y_step_learned(make_state(d, rho, u, exact_phi(d, rho)), y_s, cube_from(v)).data
    np.testing.assert_allclose(learned, exact, rtol=0, atol=1e-12 * np.abs(exact).max())
    zero = y_step_learned(make_state(d, rho, u, np.zeros((3, 3))), y_s, cube_from(v)).data
    np.testing.assert_allclose(zero, (2 * d.T @ y_s + rho * (v + u)) / rho, rtol=1e-14)


def test_learned_phi_is_symmetrized():
    rng = np.random.default_rng(3)
    d = rng.normal(size=(2, 5))
    raw = rng.normal(size=(2, 2))
    y_s, u, v = rng.normal(size=(2, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    a = y_step_learned(make_state(d, 1.0, u, raw), y_s, cube_from(v)).data
    b = y_step_learned(make_state(d, 1.0, u, 0.5 * (raw + raw.T)), y_s, cube_from(v)).data
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ShapeMismatch):
        y_step_learned(make_state(d, 1.0, u, np.eye(3)), y_s, cube_from(v))


def test_net_phi_symmetric_from_raw():
    wl_m, wl_h = [500.0, 800.0], np.linspace(400, 1000, 6)
    net = UnfoldNet(UnfoldConfig(stages=2), wl_m, wl_h)
    with torch.no_grad():
        net.phi_raw.copy_(torch.tensor([[1.0, 2.0], [0.0, 3.0]]))
    phi = net.phi(net.stage_d(0), net.rho)
    np.testing.assert_array_equal(phi.detach().numpy(), [[1.0, 1.0], [1.0, 3.0]])


def test_dual_update():
    rng = np.random.default_rng(4)
    u, y, v = (cube_from(a) for a in rng.normal(size=(3, 3, 4)))
    np.testing.assert_allclose(dual_update(u, v, v).data, u.data, atol=1e-15)
    zero = u.with_data(np.zeros((3, 4)))
    c = rng.normal(size=(3, 4))
    np.testing.assert_allclose(dual_update(zero, v.with_data(v.data + c), v).data, -c, atol=1e-15)
    np.testing.assert_array_equal(dual_update(u, y, v).data, u.data - y.data + v.data)
    with pytest.raises(ShapeMismatch):
        dual_update(u, cube_from(np.zeros((2, 4))), v)


def small_problem(seed=0, m=8, mm=3):
    rng = np.random.default_rng(seed)
    wl_h = np.linspace(400, 1000, m)
    y_s = HyperCube(rng.random((mm, 6)), 3, 2, np.linspace(450, 950, mm))
    return y_s, rng.random((mm, m)), wl_h


def test_init_state():
    y_s, d, wl_h = small_problem()
    st = init_state(y_s, d, UnfoldConfig.mathematical(), wl_h)
    np.testing.assert_array_equal(st.u.data, 0.0)
    np.testing.assert_array_equal(st.y_h.data, spectral_upsample_init(y_s, wl_h).data)
    a = init_state(y_s, None, UnfoldConfig.mathematical(), wl_h, seed=5).d
    b = init_state(y_s, None, UnfoldConfig.mathematical(), wl_h, seed=5).d
    np.testing.assert_array_equal(a, b)
    assert a.std() == pytest.approx(np.sqrt(2 / (8 + 3)), rel=0.4)
    with pytest.raises(DimensionMismatch):
        init_state(y_s, np.ones((2, 8)), UnfoldConfig.mathematical(), wl_h)


def test_v_step_identities():
    y_s, d, wl_h = small_problem(1)
    st = init_state(y_s, d, UnfoldConfig.mathematical(tv_weight=0.0), wl_h)
    st.u = st.u.with_data(np.random.default_rng(0).normal(size=st.u.data.shape))
    np.testing.assert_allclose(v_step(st).data, st.y_h.data - st.u.data, atol=1e-15)

    den = RirDenoiser(8)
    with torch.no_grad():
        for p in den.parameters():
            p.zero_()
    st_l = init_state(y_s, d, UnfoldConfig(strategy="learnable", phi_mode="exact"), wl_h, denoiser=den)
    st_l.u = st.u
    np.testing.assert_allclose(v_step(st_l).data, st.y_h.data - st.u.data, atol=1e-15)


def test_v_step_single_pixel_matches_1d_prox():
    wl_h = np.linspace(400, 1000, 7)
    y_s = HyperCube(np.array([[0.2], [0.9], [0.4]]), 1, 1, [450.0, 700.0, 950.0])
    st = init_state(y_s, np.ones((3, 7)), UnfoldConfig.mathematical(tv_weight=0.6, rho=2.0), wl_h)
    # weight / rho, then folded by L (M - 1) = 6
    ref = prox_tv1d_taut_string(st.y_h.data[:, 0], 0.6 / 2.0 / 6)
    np.testing.assert_allclose(v_step(st).data[:, 0], ref, atol=1e-15)


def test_run_unfolding_k1_inert():
    y_s, _, wl_h = small_problem(2)
    cfg = UnfoldConfig.mathematical(stages=1, tv_weight=0.0)
    out = run_unfolding(y_s, cfg, d=np.zeros((3, 8)), wavelengths_h=wl_h)
    np.testing.assert_array_equal(out.data, spectral_upsample_init(y_s, wl_h).data)


def desk_problem(seed=0):
    y_h, _ = synth_scene(SceneSpec(seed=seed))
    d = gaussian_srt(y_h.wavelengths, DESK6).d
    y_s = apply_srt(gaussian_srt(y_h.wavelengths, DESK6), y_h, [b.center for b in DESK6])
    return y_h, y_s, d


def test_constraint_residual_decreases():
    y_h, y_s, d = desk_problem()
    cfg = UnfoldConfig.mathematical(stages=20, tol=0.0)
    _, st = run_unfolding(y_s, cfg, d=d, wavelengths_h=y_h.wavelengths, return_state=True)
    r = np.array(st.residuals)
    assert r[-1] < r[0]
    assert np.all(np.diff(r) <= 1e-12 * r[0])


def test_pixel_permutation_equivariance():
    y_h, y_s, d = desk_problem(1)
    perm = np.random.default_rng(0).permutation(y_s.n_pixels)
    cfg = UnfoldConfig.mathematical(stages=6)
    a = run_unfolding(y_s, cfg, d=d, wavelengths_h=y_h.wavelengths)
    b = run_unfolding(y_s.with_data(y_s.data[:, perm]), cfg, d=d, wavelengths_h=y_h.wavelengths)
    np.testing.assert_allclose(b.data, a.data[:, perm], atol=1e-13)


def test_hybrid_net_pixel_permutation_equivariance():
    rng = np.random.default_rng(2)
    wl_m, wl_h = [500.0, 700.0, 900.0], np.linspace(400, 1000, 8)
    net = UnfoldNet(UnfoldConfig(strategy="hybrid", stages=3), wl_m, wl_h, d0=rng.random((3, 8)))
    ys = torch.tensor(rng.random((1, 3, 1, 12)))
    perm = torch.tensor(rng.permutation(12))
    with torch.no_grad():
        a = net(ys)
        b = net(ys[..., perm])
    np.testing.assert_allclose(b.numpy(), a[..., perm].numpy(), atol=1e-13)


def test_fixed_point_is_stationary():
    rng = np.random.default_rng(3)
    m, mm, n = 8, 3, 5
    d = rng.random((mm, m))
    y_star = np.tile(rng.random(n), (m, 1))  # spectrally constant: TV prox leaves it alone
    st = UnfoldState(
        y_h=cube_from(y_star),
        u=cube_from(np.zeros((m, n))),
        d=d,
        rho=1.5,
        strategy="mathematical",
        tv_weight=0.8,
    )
    v = v_step(st)
    y = y_step_closed_form(st, d @ y_star, v)
    u = dual_update(st.u, y, v)
    np.testing.assert_allclose(v.data, y_star, atol=1e-10)
    np.testing.assert_allclose(y.data, y_star, atol=1e-10)
    np.testing.assert_allclose(u.data, 0.0, atol=1e-10)


def test_mathematical_converges_on_desk_problem():
    y_h, y_s, d = desk_problem()
    cfg = UnfoldConfig.mathematical(stages=50)
    out, st = run_unfolding(y_s, cfg, d=d, wavelengths_h=y_h.wavelengths, return_state=True)
    assert st.residuals[-1] <= 1e-6
    assert np.linalg.norm(d @ out.data - y_s.data) / np.linalg.norm(y_s.data) <= 1e-3


def test_net_matches_numpy_solver():
    y_h, y_s, d = desk_problem(4)
    cfg = UnfoldConfig.mathematical(stages=5, tol=0.0)
    ref = run_unfolding(y_s, cfg, d=d, wavelengths_h=y_h.wavelengths)
    net = UnfoldNet(cfg, y_s.wavelengths, y_h.wavelengths, d0=d)
    out = run_unfolding(y_s, cfg, net)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-12)


def test_config_validation():
    for kw in (dict(stages=0), dict(strategy="magic"), dict(rho=0.0), dict(phi_mode="x"), dict(tv_weight=-1.0)):
        with pytest.raises(InvalidSpec):
            UnfoldConfig(**kw).validate()
    y_s, _, wl_h = small_problem()
    with pytest.raises(InvalidSpec):
        run_unfolding(y_s, UnfoldConfig(strategy="learnable"))


def test_net_rho_positive_and_shapes():
    wl_m, wl_h = [500.0, 800.0], np.linspace(400, 1000, 6)
    net = UnfoldNet(UnfoldConfig(stages=3, rho=0.25, share_d=False), wl_m, wl_h)
    assert net.rho.item() == pytest.approx(0.25)
    assert len(net.d) == 2
    with pytest.raises(ShapeMismatch):
        net(torch.zeros(1, 3, 2, 2, dtype=torch.float64))
    assert net(torch.rand(2, 2, 4, 4, dtype=torch.float64)).shape == (2, 6, 4, 4)


def test_xavier_srt_reproducible():
    np.testing.assert_array_equal(xavier_srt(6, 32, 3), xavier_srt(6, 32, 3))
    assert constraint_residual(cube_from(np.ones((2, 2))), cube_from(np.ones((2, 2)))) == 0
