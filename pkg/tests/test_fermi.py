"""Fermi chart tests: frame recipe, parallel transport, forward/inverse map."""

import numpy as np
import pytest

from diamondwave import fermi
from diamondwave import geometry as geo


def flat_chart(n=2, span=(0.0, 2.0)):
    m = geo.minkowski(n)
    v = np.zeros(n + 1)
    v[0] = v[1] = 1.0
    g = geo.integrate_null_geodesic(m, np.zeros(n + 1), v, span)
    return fermi.FermiChart(g)


def perturbed_chart(amp=0.05, span=(0.0, 1.5), steps=400):
    n = 2
    m = geo.SplitMetric(
        n,
        beta=lambda x: 1 + amp * np.sin(np.asarray(x)[..., 1]),
        gmat=lambda x: (1 + amp * np.cos(np.asarray(x)[..., 0]
                                         + 0.5 * np.asarray(x)[..., 2]))[..., None, None]
        * np.eye(n),
    )
    p = np.zeros(3)
    # make the initial direction null numerically: -beta v0^2 + g11 v1^2 = 0
    beta0 = float(m.beta(p))
    g11 = float(m.gmat(p)[0, 0])
    v = np.array([1.0, np.sqrt(beta0 / g11), 0.0])
    g = geo.integrate_null_geodesic(m, p, v, span, steps_per_unit=steps)
    return fermi.FermiChart(g)


def test_flat_frame_recipe():
    ch = flat_chart()
    E = ch.frame.E[0]
    assert np.allclose(E[0], [1, 1, 0], atol=1e-12)
    assert np.allclose(E[1], [-1, 1, 0], atol=1e-12)
    assert np.allclose(np.abs(E[2]), [0, 0, 1], atol=1e-12)
    eta = np.diag([-1.0, 1, 1])
    assert E[0] @ eta @ E[1] == pytest.approx(2.0)


def test_flat_transport_constant():
    ch = flat_chart()
    assert np.max(np.abs(ch.frame.E - ch.frame.E[0])) < 1e-12


def test_frame_pairings_conserved_split():
    n = 2
    m = geo.SplitMetric(
        n,
        beta=lambda x: np.ones(np.asarray(x).shape[:-1]),
        gmat=lambda x: (1 + 0.05 * np.asarray(x)[..., 0])[..., None, None] * np.eye(n),
    )
    p = np.zeros(3)
    v = np.array([1.0, 1.0, 0.0])  # null at t=0 where g = I
    g = geo.integrate_null_geodesic(m, p, v, (0.0, 1.5), steps_per_unit=400)
    fr = fermi.build_frame(g)
    assert fr.pairing_defect() < 1e-8
    assert np.max(np.abs(fr.E[:, 0] - g.xdot)) < 1e-10  # E0 = gammadot


def test_flat_forward_closed_form():
    ch = flat_chart()
    for s, z1, z2 in [(0.3, 0.1, -0.2), (1.2, -0.05, 0.07)]:
        F = ch.forward(s, [z1, z2])
        assert np.allclose(F, [s - z1, s + z1, z2], atol=1e-12)


def test_forward_axis_is_geodesic():
    ch = perturbed_chart()
    ss = np.linspace(0.1, 1.4, 7)
    F = ch.forward(ss, np.zeros((7, 2)))
    assert np.max(np.abs(F - ch.geodesic.point(ss))) < 1e-10


def test_forward_symmetric_average_flat():
    ch = flat_chart()
    z = np.array([0.08, -0.11])
    avg = 0.5 * (ch.forward(0.7, z) + ch.forward(0.7, -z))
    assert np.allclose(avg, ch.geodesic.point(np.array([0.7]))[0], atol=1e-12)


def test_inverse_flat_closed_form():
    ch = flat_chart()
    s, z = ch.inverse(np.array([0.9 - 0.12, 0.9 + 0.12, 0.05]))
    assert s == pytest.approx(0.9, abs=1e-9)
    assert np.allclose(z, [0.12, 0.05], atol=1e-9)


def test_inverse_on_axis():
    ch = perturbed_chart()
    p = ch.geodesic.point(np.array([0.8]))[0]
    s, z = ch.inverse(p)
    assert s == pytest.approx(0.8, abs=1e-8)
    assert np.linalg.norm(z) < 1e-8


def test_roundtrip_random():
    ch = perturbed_chart()
    rng = np.random.default_rng(5)
    for _ in range(25):
        s = rng.uniform(0.2, 1.3)
        z = rng.uniform(-0.5, 0.5, size=2) * ch.delta_prime
        p = ch.forward(s, z)
        s2, z2 = ch.inverse(p)
        assert abs(s2 - s) < 1e-8
        assert np.max(np.abs(z2 - z)) < 1e-8


def test_inverse_rejects_far_point():
    ch = flat_chart()
    with pytest.raises(fermi.FermiError, match="outside"):
        ch.inverse(np.array([1.0, -5.0, 0.0]))


def test_axis_normal_form_flat():
    ch = flat_chart()
    mdef, ddef = ch.axis_defects(nsamp=5)
    assert mdef < 1e-9
    assert ddef < 1e-8


def test_axis_normal_form_perturbed():
    ch = perturbed_chart()
    mdef, ddef = ch.axis_defects(nsamp=5)
    assert mdef < 1e-6
    assert ddef < 1e-5


def test_chart_injective_on_samples():
    ch = perturbed_chart()
    ss = np.linspace(0.1, 1.4, 12)
    zs = np.array([[0.0, 0.0], [0.05, 0.0], [0.0, -0.05], [-0.04, 0.04]])
    pts = np.array([ch.forward(s, z) for s in ss for z in zs])
    d = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
    np.fill_diagonal(d, 1.0)
    assert d.min() > 1e-9


def test_dump_csv(tmp_path):
    ch = flat_chart()
    path = tmp_path / "chart.csv"
    ch.dump_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("s,gamma0")
    assert len(lines) == len(ch.geodesic.s) + 1
