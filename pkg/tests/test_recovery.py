"""Cross-difference, pairing, quadrature pipeline, and recovery tests."""

import numpy as np
import pytest

from diamondwave import go, recovery as rc, solver, sources
from diamondwave import geometry as geo


def gaussian_V(center, amp=0.8, width=0.3):
    center = np.asarray(center, dtype=float)

    def V(pts):
        pts = np.asarray(pts, dtype=float)
        return amp * np.exp(-np.sum((pts - center) ** 2, axis=-1) / width)
    return V


# -- epsilon stencil ---------------------------------------------------------

def test_cross_derivative_cubic_monomial():
    g = np.arange(12.0).reshape(3, 4)
    st = rc.cross_derivative(lambda e: e, lambda e: e[0] * e[1] * e[2] * g,
                             h_eps=0.1)
    assert np.allclose(st.cross, g, atol=1e-12)
    assert np.allclose(st.vtau, -g / 6.0, atol=1e-12)


def test_cross_derivative_even_power_vanishes():
    g = np.ones((5,))
    st = rc.cross_derivative(lambda e: e,
                             lambda e: e[0] ** 2 * e[1] * e[2] * g, 0.1)
    assert np.max(np.abs(st.cross)) < 1e-12


def test_cross_derivative_richardson_gate():
    # a strong epsilon^5 contamination trips the h vs h/2 comparison
    def u(e):
        return np.array([e[0] * e[1] * e[2] + 100.0 * e[0] ** 3 * e[1] * e[2]])
    with pytest.raises(rc.RecoveryError, match="asymptotic window"):
        rc.cross_derivative(lambda e: e, u, h_eps=0.05)
    st = rc.cross_derivative(lambda e: e, u, h_eps=0.002)
    assert st.cross[0] == pytest.approx(1.0, abs=1e-3)


# -- pairing -----------------------------------------------------------------

@pytest.fixture(scope="module")
def pair_setup():
    m = geo.minkowski(1)
    grid = solver.Grid.for_ball(1, 1.0, 1.0, h=0.02, dt=0.008, pad=0.5)

    def Vfun(pts):
        return 0.5 * np.exp(-pts[..., 1] ** 2 / 0.1)

    def bump(pts, t0, x0):
        r2 = ((pts[..., 0] - t0) / 0.3) ** 2 + ((pts[..., 1] - x0) / 0.3) ** 2
        out = np.zeros(pts.shape[:-1])
        inside = r2 < 1
        out[inside] = np.exp(1 - 1 / (1 - r2[inside]))
        return out
    return m, grid, Vfun, bump


def test_discrete_adjoint_identity(pair_setup):
    m, grid, Vfun, bump = pair_setup
    a = solver.GridField.from_closure(grid, lambda p: bump(p, 0.5, -0.2))
    b = solver.GridField.from_closure(grid, lambda p: bump(p, 0.5, 0.3))
    Pa = solver.apply_wave_operator(m, grid, Vfun, a)
    Pb = solver.apply_wave_operator(m, grid, Vfun, b)
    lhs = solver.spacetime_integral(grid, a, Pb)
    rhs = solver.spacetime_integral(grid, b, Pa)
    scale = abs(solver.spacetime_integral(grid, a, Pa)) + abs(rhs)
    assert abs(lhs - rhs) < 1e-3 * scale


def test_pairing_routes_agree(pair_setup):
    m, grid, Vfun, bump = pair_setup
    # backward solve against a compact test source, paired with a bump field
    fplus = solver.SourceTerm.from_field(
        solver.GridField.from_closure(grid, lambda p: bump(p, 0.5, 0.2)))
    U = solver.solve_backward(m, grid, Vfun, fplus)
    v = solver.GridField.from_closure(grid, lambda p: bump(p, 0.45, -0.1))
    res = rc.pairing_integral(m, grid, Vfun, v, fplus, backward_solution=U)
    assert res.volume is not None
    assert res.discrepancy < 0.02
    assert not res.flagged
    assert complex(res) == res.data_side


def test_pairing_without_volume(pair_setup):
    m, grid, Vfun, bump = pair_setup
    fplus = solver.SourceTerm.from_field(
        solver.GridField.from_closure(grid, lambda p: bump(p, 0.5, 0.2)))
    v = solver.GridField.from_closure(grid, lambda p: bump(p, 0.45, -0.1))
    res = rc.pairing_integral(m, grid, Vfun, v, fplus)
    assert res.volume is None and not res.flagged


# -- quadrature --------------------------------------------------------------

def test_gaussian_quadrature_closed_form():
    tau = 50.0
    pts, w, _ = rc.tensor_quadrature(np.zeros(3), 0.7, 101)
    val = np.sum(w * np.exp(-tau * np.sum(pts**2, axis=-1)))
    assert val == pytest.approx((np.pi / tau) ** 1.5, rel=1e-6)


# -- closed-form packets -----------------------------------------------------

def test_line_packet_matches_grid_packet():
    V = gaussian_V([0.6, 0.5, 0.1], amp=0.5, width=0.2)
    q = np.array([0.1, -0.1, 0.0])
    xi = np.array([-1.0, 0.6, 0.8])
    gp = go.GOPacket(2, q, xi, delta=0.2, V=V, N=1, s_range=(-0.2, 1.2),
                     ns=701)
    lp = rc.LinePacket(q, xi, delta=0.2, V=V)
    rng = np.random.default_rng(3)
    # sample points inside the tube around s ~ 0.7
    base = q + 0.7 * lp.xi_sharp
    pts = base + 0.15 * rng.standard_normal((40, 3))
    a0g = gp.amplitude(0, pts)
    a1g = gp.amplitude(1, pts)
    a0l, a1l = lp.amplitudes(pts)
    # the grid packet interpolates its profile and differences its
    # laplacian, so it is the less accurate side near the tube edge
    assert np.max(np.abs(a0g - a0l)) < 5e-3
    assert np.max(np.abs(a1g - a1l)) < 0.05 * np.max(np.abs(a1l))
    # potential parts (transport integrals of V a0) agree much closer
    gp0 = go.GOPacket(2, q, xi, delta=0.2, V=None, N=1, s_range=(-0.2, 1.2),
                      ns=701)
    lp0 = rc.LinePacket(q, xi, delta=0.2, V=None)
    cg = a1g - gp0.amplitude(1, pts)
    cl = a1l - lp0.amplitudes(pts)[1]
    assert np.max(np.abs(cg - cl)) < 0.01 * np.max(np.abs(cl))


def test_line_packet_axis_oracles():
    from scipy.integrate import quad
    V = gaussian_V([0.6, 0.5, 0.1], amp=0.5, width=0.2)
    q = np.array([0.1, -0.1, 0.0])
    xi = np.array([-1.0, 0.6, 0.8])
    lp = rc.LinePacket(q, xi, delta=0.2, V=V)
    lp0 = rc.LinePacket(q, xi, delta=0.2, V=None)
    s = 0.7
    x = q + s * lp.xi_sharp
    # one transverse direction at n = 2, with chi''(0) = -2 on the axis
    _, b1 = lp0.amplitudes(x[None])
    expected_b1 = s * (-2.0 / 0.2**2) / 2j
    assert b1[0] == pytest.approx(expected_b1, rel=1e-12)
    # the potential part is the 1-D line integral of V
    _, a1 = lp.amplitudes(x[None])
    iv, _ = quad(lambda t: V((q + t * lp.xi_sharp)[None])[0], 0.0, s,
                 epsabs=1e-12)
    assert (a1 - b1)[0] == pytest.approx(iv / 2j, rel=1e-9)


def test_line_packet_rejects_non_null():
    with pytest.raises(rc.RecoveryError, match="light-like"):
        rc.LinePacket(np.zeros(3), np.array([-1.0, 0.5, 0.0]), 0.1)


def test_packet_quad_geometry():
    p = np.array([1.1, 0.9, 0.0])
    quad = rc.PacketQuad(p, 0.9, [1.0, 0.0], sigma=0.3)
    # the linear dependence holds bitwise
    assert np.all(quad.xi_total() == 0.0)
    for xi in quad.xi:
        assert abs(xi[0] ** 2 - xi[1:] @ xi[1:]) < 1e-12
    k1, k2 = sources.kappa_closed_form(0.3)
    assert quad.kappa[1] == pytest.approx(k1, abs=1e-14)
    assert quad.kappa[2] == pytest.approx(k2, abs=1e-14)
    # anchors: reversal ends s0 up the reversed ray, incoming starts s0 below
    assert np.allclose(quad.anchors[0], [2.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(quad.anchors[1], [0.2, 0.0, 0.0], atol=1e-12)


def test_packet_quad_needs_transverse_direction():
    with pytest.raises(rc.RecoveryError, match="n >= 2"):
        rc.PacketQuad(np.array([1.0, 0.5]), 0.5, [1.0], sigma=0.1)


# -- interaction integral ----------------------------------------------------

@pytest.fixture(scope="module")
def go_quad():
    p = np.array([1.1, 0.9, 0.0])
    V = gaussian_V(p)
    quad = rc.PacketQuad(p, 0.9, [1.0, 0.0], sigma=0.1, V=V, delta=0.1)
    cal = rc.PacketQuad(p, 0.9, [1.0, 0.0], sigma=0.1, V=None, delta=0.1)
    return p, V, quad, cal


def test_phase_cancellation_real_integrand(go_quad):
    p, V, quad, cal = go_quad
    val = rc.asymptotic_I(cal.packets, 500.0, p, 0.3, nq=33)
    # V = 0 amplitudes are a0 + (s lap a0)/(2i tau): the quartic product's
    # imaginary part integrates to the odd-order terms only
    assert abs(val) > 0
    valc = rc.asymptotic_I(cal.packets, -500.0, p, 0.3, nq=33)
    assert valc == pytest.approx(np.conj(val), rel=1e-12)


def test_localization_gate():
    p = np.array([1.1, 0.9, 0.0])
    cal = rc.PacketQuad(p, 0.9, [1.0, 0.0], sigma=0.1, delta=0.1)
    with pytest.raises(rc.RecoveryError, match="not localized"):
        rc.asymptotic_I(cal.packets, 100.0, p, 0.04, nq=21)


def test_interaction_series_matches_asymptotic_I(go_quad):
    p, V, quad, cal = go_quad
    taus = np.array([400.0, 800.0, 1600.0, 3200.0])
    series = rc.interaction_series(quad.packets, taus, p, 0.3, nq=25)
    direct = [rc.asymptotic_I(quad.packets, t, p, 0.3, nq=25) for t in taus]
    assert np.allclose(series, direct, rtol=1e-12)


# -- tau-series fit ----------------------------------------------------------

def test_fit_exact_two_terms():
    taus = np.array([10.0, 20.0, 40.0, 80.0])
    fit = rc.fit_tau_series(taus, 3.0 + 5.0 / taus)
    assert fit.I0 == pytest.approx(3.0, abs=1e-12)
    assert fit.Im1 == pytest.approx(5.0, abs=1e-10)
    assert not fit.flags


def test_fit_exact_three_terms():
    taus = np.array([10.0, 20.0, 40.0, 80.0, 160.0])
    fit = rc.fit_tau_series(taus, 3.0 + 5.0 / taus + 7.0 / taus**2)
    assert fit.I0 == pytest.approx(3.0, abs=1e-9)
    assert fit.Im1 == pytest.approx(5.0, abs=1e-9)
    assert fit.Im2 == pytest.approx(7.0, abs=1e-7)


def test_fit_needs_four_samples():
    with pytest.raises(rc.RecoveryError, match="4 tau samples"):
        rc.fit_tau_series([10.0, 20.0, 40.0], [1.0, 1.0, 1.0])


def test_fit_residual_flag():
    taus = np.array([2.0, 4.0, 8.0, 16.0, 32.0])
    fit = rc.fit_tau_series(taus, 1.0 + 1.0 / taus + 50.0 / taus**3)
    assert "asymptotic regime not reached" in fit.flags


def test_fit_conditioning_gate():
    taus = np.array([10.0, 10.0 + 1e-9, 10.0 + 2e-9, 10.0 + 3e-9])
    with pytest.raises(rc.RecoveryError, match="ill conditioned"):
        rc.fit_tau_series(taus, np.ones(4))


# -- extraction --------------------------------------------------------------

def test_extraction_matches_c_oracle(go_quad):
    p, V, quad, cal = go_quad
    taus = rc.default_taus(0.1, 0.9, 0.1)
    vals = rc.interaction_series(quad.packets, taus, p, 0.3, nq=41)
    vals0 = rc.interaction_series(cal.packets, taus, p, 0.3, nq=41)
    csum = rc.extract_line_integrals(rc.fit_tau_series(taus, vals),
                                     rc.fit_tau_series(taus, vals0))
    oracle = np.sum(quad.c_values(V))
    assert abs(csum - oracle) < 0.01 * abs(oracle)


def test_extraction_zero_potential_is_exact(go_quad):
    p, V, quad, cal = go_quad
    taus = rc.default_taus(0.1, 0.9, 0.1)
    vals0 = rc.interaction_series(cal.packets, taus, p, 0.3, nq=33)
    fit0 = rc.fit_tau_series(taus, vals0)
    assert rc.extract_line_integrals(fit0, fit0) == 0.0


def test_extraction_shift_by_constant(go_quad):
    # c-parts are linear in V, and the V-free parts drop out identically
    p, V, quad, cal = go_quad
    def Vshift(pts):
        return np.asarray(V(pts)) + 1.0
    quad1 = rc.PacketQuad(p, 0.9, [1.0, 0.0], sigma=0.1, V=Vshift, delta=0.1)
    quadc = rc.PacketQuad(p, 0.9, [1.0, 0.0], sigma=0.1,
                          V=lambda pts: np.ones(np.asarray(pts).shape[:-1]),
                          delta=0.1)
    taus = rc.default_taus(0.1, 0.9, 0.1)
    fits = {}
    for key, q in (("V", quad), ("V1", quad1), ("one", quadc), ("cal", cal)):
        vals = rc.interaction_series(q.packets, taus, p, 0.3, nq=33)
        fits[key] = rc.fit_tau_series(taus, vals)
    c_v = rc.extract_line_integrals(fits["V"], fits["cal"])
    c_v1 = rc.extract_line_integrals(fits["V1"], fits["cal"])
    c_one = rc.extract_line_integrals(fits["one"], fits["cal"])
    assert abs((c_v1 - c_v) - c_one) < 1e-3 * abs(c_one)


def test_extraction_inconsistent_I0_rejected():
    taus = np.array([10.0, 20.0, 40.0, 80.0])
    fa = rc.fit_tau_series(taus, 1.0 + 1.0 / taus)
    fb = rc.fit_tau_series(taus, 2.0 + 1.0 / taus)
    with pytest.raises(rc.RecoveryError, match="inconsistency"):
        rc.extract_line_integrals(fa, fb)


# -- sigma limit and differentiation ----------------------------------------

def test_richardson_sigma_exact_quadratic():
    sigmas = np.array([0.2, 0.1, 0.05])
    vals = 3.0 + 2.0 * sigmas**2 + 5.0 * sigmas**4
    lim, flags = rc.richardson_sigma(sigmas, vals)
    assert lim == pytest.approx(3.0, abs=1e-12)
    assert not flags


def test_richardson_sigma_schedule_checks():
    with pytest.raises(rc.RecoveryError, match="halve"):
        rc.richardson_sigma([0.2, 0.1, 0.07], [1.0, 1.0, 1.0])
    with pytest.raises(rc.RecoveryError, match="at least 3"):
        rc.richardson_sigma([0.2, 0.1], [1.0, 1.0])
    _, flags = rc.richardson_sigma([0.2, 0.1, 0.05], [1.0, 1.001, 1.1])
    assert "sigma extrapolation non-monotone" in flags


def test_differentiate_line_integral():
    s = np.array([0.8, 0.9, 1.0])
    assert rc.differentiate_line_integral(s, 2.0 * s) == pytest.approx(2.0)


# -- direct formula on the cylinder ------------------------------------------

def test_recover_on_mho_inverts_definition():
    m = geo.minkowski(1)
    grid = solver.Grid.for_ball(1, 1.0, 1.0, h=0.02, dt=0.008, pad=0.2)
    V = gaussian_V([0.5, 0.0], amp=0.7, width=0.2)

    def probe(pts):
        r2 = ((pts[..., 0] - 0.5) / 0.35) ** 2 + (pts[..., 1] / 0.5) ** 2
        out = np.zeros(pts.shape[:-1])
        out[r2 < 1] = np.exp(1 - 1 / (1 - r2[r2 < 1]))
        return out

    u = solver.GridField.from_closure(grid, probe)
    f = solver.apply_wave_operator(m, grid, V, u)
    vrec, mask = rc.recover_on_mho(m, grid, u, f)
    pts = np.stack(np.meshgrid(grid.times(), grid.axis(0), indexing="ij"),
                   axis=-1)
    vtrue = V(pts)
    assert np.max(np.abs(vrec.data[mask] - vtrue[mask])) < 1e-9
    # small-|u| points are skipped
    assert not mask[0].any() and not mask[-1].any()
    assert np.all(np.abs(u.data[~mask]) <= 1e-6 * u.sup_norm())


def test_recover_on_mho_zero_potential():
    m = geo.minkowski(1)
    grid = solver.Grid.for_ball(1, 1.0, 1.0, h=0.02, dt=0.008, pad=0.2)

    def probe(pts):
        r2 = ((pts[..., 0] - 0.5) / 0.35) ** 2 + (pts[..., 1] / 0.5) ** 2
        out = np.zeros(pts.shape[:-1])
        out[r2 < 1] = np.exp(1 - 1 / (1 - r2[r2 < 1]))
        return out

    u = solver.GridField.from_closure(grid, probe)
    f = solver.apply_wave_operator(m, grid, None, u)
    vrec, mask = rc.recover_on_mho(m, grid, u, f)
    assert np.max(np.abs(vrec.data[mask])) < 1e-10


# -- region driver -----------------------------------------------------------

def test_recover_point_zero_potential_control():
    m = geo.minkowski(2)
    v, flags, _ = rc.recover_point(m, None, np.array([1.8, 1.1, 0.0]),
                                   r=1.0, T=5.0)
    assert abs(v) < 5e-3


def test_recover_point_gaussian_bump():
    m = geo.minkowski(2)
    p = np.array([1.8, 1.1, 0.0])
    V = gaussian_V(p, amp=0.8, width=0.3)
    v, flags, report = rc.recover_point(m, V, p, r=1.0, T=5.0, V_true=V)
    vt = float(V(p[None])[0])
    assert abs(v - vt) < 0.05 * vt
    rows = report.summary_rows()
    assert len(rows) == 1
    assert float(rows[0]["rel_err"]) < 0.05


def test_recover_region_report_csv(tmp_path):
    m = geo.minkowski(2)
    # one valid point and one inside the cylinder (recorded failure)
    pts = [np.array([1.8, 1.1, 0.0]), np.array([1.0, 0.2, 0.0])]
    rep = rc.recover_region(m, None, pts, r=1.0, T=5.0)
    flagged = [r for r in rep.rows if r["flags"].startswith("failed")]
    assert len(flagged) == 1
    path = tmp_path / "report.csv"
    rep.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",") == rc.REPORT_COLUMNS
    assert len(lines) == len(rep.rows) + 1
