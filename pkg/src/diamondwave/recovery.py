"""Potential recovery from three-fold wave interactions.

The pipeline: a three-parameter source family produces, through the third
cross derivative in the family parameters, an effective source that is the
product of three wave packets.  Pairing the resulting field with a test
packet gives the interaction integral I(tau).  Its tau-expansion
I = I0 + I_{-1}/tau + O(tau^-2) contains, after subtracting a V-independent
calibration run, line integrals of the potential along light-like segments.
A limit in the covector-perturbation parameter sigma and a derivative in
the segment length s0 then yield V pointwise.

Two routes are implemented.  The full route drives the PDE solver: eight
corner solves per epsilon stencil (`cross_derivative`) and a data-side
pairing (`pairing_integral`).  The fast route (`asymptotic_I` and friends)
evaluates the packet products by direct quadrature, skipping the solver
entirely; it is what `recover_region` uses.
"""

import csv
import itertools

import numpy as np

from . import geometry as geo
from . import go, solver, sources


class RecoveryError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# third cross derivative in the source family parameters
# ---------------------------------------------------------------------------

_CORNERS = [s for s in itertools.product((-1, 1), repeat=3)]


class EpsilonStencil:
    """Eight corner solutions and their assembled third cross difference."""

    def __init__(self, h_eps, corners, cross):
        self.h_eps = float(h_eps)
        self.corners = corners
        self.cross = cross

    @property
    def vtau(self):
        """-(1/6) of the cross derivative (the three-wave interaction field)."""
        return -self.cross / 6.0


def _as_array(u):
    return np.asarray(getattr(u, "data", u))


def _assemble_cross(corners, h):
    """sum over sign corners of s1 s2 s3 u_{s h} / (8 h^3)."""
    total = None
    for s in _CORNERS:
        term = (s[0] * s[1] * s[2]) * _as_array(corners[s])
        total = term if total is None else total + term
    return total / (8.0 * h**3)


def cross_derivative(family, solve, h_eps, check=True):
    """Third mixed central difference of solve(family(eps)) at eps = 0.

    `family` maps an epsilon triple to a source; `solve` maps a source to a
    field (anything with `.data`, or a plain array).  With `check`, the
    stencil is recomputed at h_eps/2 and the two must agree to 5%.
    """
    h = float(h_eps)

    def corners_at(step):
        return {s: solve(family(tuple(step * si for si in s)))
                for s in _CORNERS}

    corners = corners_at(h)
    cross = _assemble_cross(corners, h)
    if check:
        fine = _assemble_cross(corners_at(h / 2), h / 2)
        scale = float(np.max(np.abs(fine)))
        # a stencil at pure rounding level has nothing to disagree about
        corner_scale = max(float(np.max(np.abs(_as_array(u))))
                           for u in corners.values()) / (8.0 * h**3)
        if scale > 1e-9 * corner_scale:
            disagree = float(np.max(np.abs(cross - fine))) / scale
            if disagree > 0.05:
                raise RecoveryError(
                    f"epsilon-step outside asymptotic window "
                    f"(Richardson disagreement {disagree:.1%})")
    return EpsilonStencil(h, corners, cross)


# ---------------------------------------------------------------------------
# pairing
# ---------------------------------------------------------------------------

class PairingResult:
    """Interaction integral computed from data and (optionally) from volume.

    data_side pairs the cross-derivative field with the test function over
    the measurement cylinder; volume pairs the backward solution with
    (box + V) applied to the field.  Their agreement is the operational
    check that the source-to-solution map determines the integral.
    """

    def __init__(self, data_side, volume=None, discrepancy=None, flagged=False):
        self.data_side = complex(data_side)
        self.volume = None if volume is None else complex(volume)
        self.discrepancy = discrepancy
        self.flagged = bool(flagged)

    def __complex__(self):
        return self.data_side


def pairing_integral(metric, grid, V, vtau, test_source, backward_solution=None):
    """I = integral of vtau * f+ over spacetime; optional volume cross-check."""
    vdata = _as_array(vtau)
    if test_source.field is None:
        raise RecoveryError("test source must be field-based for pairing")
    data_side = solver.spacetime_integral(grid, vdata, test_source.field)
    if backward_solution is None:
        return PairingResult(data_side)
    vfield = vtau if isinstance(vtau, solver.GridField) else \
        solver.GridField(grid, vdata)
    Pv = solver.apply_wave_operator(metric, grid, V, vfield)
    volume = solver.spacetime_integral(grid, _as_array(backward_solution),
                                       Pv.data)
    disc = abs(data_side - volume) / max(abs(volume), 1e-300)
    return PairingResult(data_side, volume, disc, flagged=disc > 0.10)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def tensor_quadrature(center, half_widths, nq):
    """Trapezoid nodes and weights on a box around `center`.

    Returns (points (M, dim), weights (M,), boundary mask (M,)); the mask
    marks nodes on the box faces, used for localization checks.
    """
    center = np.asarray(center, dtype=float)
    half_widths = np.broadcast_to(np.asarray(half_widths, dtype=float),
                                  center.shape)
    axes, wts, edges = [], [], []
    for c, hw in zip(center, half_widths):
        ax = np.linspace(c - hw, c + hw, nq)
        w = np.full(nq, ax[1] - ax[0])
        w[0] *= 0.5
        w[-1] *= 0.5
        axes.append(ax)
        wts.append(w)
        e = np.zeros(nq, dtype=bool)
        e[0] = e[-1] = True
        edges.append(e)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack(mesh, axis=-1).reshape(-1, len(axes))
    weight = np.ones(mesh[0].shape)
    boundary = np.zeros(mesh[0].shape, dtype=bool)
    for i, (w, e) in enumerate(zip(wts, edges)):
        shape = [1] * len(axes)
        shape[i] = nq
        weight = weight * w.reshape(shape)
        boundary = boundary | e.reshape(shape)
    return pts, weight.ravel(), boundary.ravel()


# ---------------------------------------------------------------------------
# closed-form packets for the quadrature-only route
# ---------------------------------------------------------------------------

def _chi_second_derivative(chi):
    """chi'' as a callable; analytic for the standard bump, else central FD."""
    if chi is go.chi_bump:
        def d2(u):
            u = np.asarray(u, dtype=float)
            inside = np.abs(u) < 1.0
            us = np.where(inside, u, 0.0)
            one = 1.0 - us**2
            g1 = -2.0 * us / one**2
            g2 = -2.0 * (1.0 + 3.0 * us**2) / one**3
            return np.where(inside, chi(us) * (g1 * g1 + g2), 0.0)
        return d2
    h = 1e-4

    def d2(u):
        return (chi(u + h) - 2.0 * chi(u) + chi(u - h)) / h**2
    return d2


class LinePacket:
    """Geometric-optics packet in closed form (flat background).

    The leading amplitude a0 is a bump profile constant along the flow, so
    the first transport integral collapses to
        a1 = (1/2i) (s * lap_perp a0 + a0 * int_0^s V(gamma) ds~),
    with no grid construction needed.  The potential integral runs along the
    characteristic through the evaluation point back to the anchoring
    hyperplane s = 0; it is computed by Gauss-Legendre nodes on the segment,
    whose physical length stays O(1) even for rescaled covectors.
    """

    def __init__(self, q, xi, delta, V=None, chi="bump", gl_nodes=64):
        self.q = np.asarray(q, dtype=float)
        self.xi = np.asarray(xi, dtype=float)
        n = len(self.q) - 1
        self.n = n
        xi0, xip = self.xi[0], self.xi[1:]
        if abs(xi0**2 - xip @ xip) > 1e-10 * max(self.xi @ self.xi, 1e-30):
            raise RecoveryError("covector is not light-like")
        self.delta = float(delta)
        self.V = V
        self.chi = go.resolve_chi(chi)
        self._chi_d2 = _chi_second_derivative(self.chi)
        self.xi_sharp = np.concatenate([[-xi0], xip])
        # flow coordinates: s along gamma, w0 phase direction, w transverse
        self._s_row = self.xi_sharp / (2.0 * xi0 * xi0)
        self._w0_row = self.xi / abs(xi0)
        basis = [xip / np.linalg.norm(xip)]
        for cand in np.eye(n):
            w = cand - sum((cand @ b) * b for b in basis)
            nrm = np.linalg.norm(w)
            if nrm > 1e-8:
                basis.append(w / nrm)
            if len(basis) == n:
                break
        self._omegas = np.array([np.concatenate([[0.0], om])
                                 for om in basis[1:]])
        t, w = np.polynomial.legendre.leggauss(int(gl_nodes))
        self._gl = (t, w)

    def coords(self, x):
        """(s, w0, transverse array) of spacetime points x (..., 1+n)."""
        dx = np.asarray(x, dtype=float) - self.q
        s = dx @ self._s_row
        w0 = dx @ self._w0_row
        wt = dx @ self._omegas.T if len(self._omegas) else \
            np.zeros(dx.shape[:-1] + (0,))
        return s, w0, wt

    def _profiles(self, w0, wt):
        """(a0, lap_perp a0) from the cutoff profiles."""
        d = self.delta
        f0 = self.chi(w0 / d)
        ft = [self.chi(wt[..., i] / d) for i in range(wt.shape[-1])]
        a0 = f0
        for f in ft:
            a0 = a0 * f
        lap = np.zeros_like(a0)
        for i in range(wt.shape[-1]):
            term = f0 * self._chi_d2(wt[..., i] / d) / d**2
            for j, f in enumerate(ft):
                if j != i:
                    term = term * f
            lap = lap + term
        return a0, lap

    def _potential_integral(self, x, s):
        """int_0^{s(x)} V along the characteristic through x."""
        if self.V is None:
            return np.zeros_like(s)
        t, w = self._gl
        x = np.asarray(x, dtype=float)
        out = np.zeros(s.shape)
        for ti, wi in zip(t, w):
            # node s~ = s (ti+1)/2 on [0, s], offset from x by (s~ - s) xi^#
            off = s * ((ti + 1.0) / 2.0 - 1.0)
            pts = x + off[..., None] * self.xi_sharp
            out = out + wi * np.asarray(self.V(pts))
        return out * s / 2.0

    def amplitudes(self, x):
        """(a0, a1) at spacetime points x."""
        s, w0, wt = self.coords(x)
        a0, lap = self._profiles(w0, wt)
        a1 = (s * lap + a0 * self._potential_integral(x, s)) / 2j
        return a0, a1

    def amplitude_sum(self, tau, x):
        a0, a1 = self.amplitudes(x)
        return a0 + a1 / tau

    def phase(self, x):
        return np.asarray(x, dtype=float) @ self.xi

    def eval(self, tau, x):
        return np.exp(1j * tau * self.phase(x)) * self.amplitude_sum(tau, x)


class PacketQuad:
    """Four packets with an exact light-like linear dependence.

    Built at a point p reached from the cylinder axis along the spatial
    direction `direction` after parameter length s0.  Covector 0 is the
    sigma^2-rescaled reversal; covectors 2, 3 are sigma-perturbations of the
    incoming one, with weights kappa chosen so the four covectors sum to
    zero bitwise (the last one is defined by the dependence).
    """

    def __init__(self, p, s0, direction, sigma, V=None, delta=0.1,
                 e2=None, chi="bump", gl_nodes=64):
        p = np.asarray(p, dtype=float)
        n = len(p) - 1
        if n < 2:
            raise RecoveryError("covector perturbations need n >= 2")
        self.p = p
        self.s0 = float(s0)
        self.sigma = float(sigma)
        xp = np.asarray(direction, dtype=float)
        xp = xp / np.linalg.norm(xp)
        if e2 is None:
            cand = np.eye(n)[int(np.argmin(np.abs(xp)))]
            e2 = cand - (cand @ xp) * xp
            e2 = e2 / np.linalg.norm(e2)
        e2 = np.asarray(e2, dtype=float)
        root = np.sqrt(1.0 - sigma**2)
        k1 = 2.0 * (1.0 + root) - sigma**2
        k2 = -(1.0 + root)
        tilde = [np.concatenate([[-1.0], -xp]),
                 np.concatenate([[-1.0], xp]),
                 np.concatenate([[-1.0], root * xp + sigma * e2]),
                 np.concatenate([[-1.0], root * xp - sigma * e2])]
        xi = [sigma**2 * tilde[0], k1 * tilde[1], k2 * tilde[2], None]
        xi[3] = -(xi[0] + xi[1] + xi[2])     # dependence exact by construction
        self.xi = xi
        self.kappa = np.array([sigma**2, k1, k2, k2])
        # anchor parameters: p = gamma_{q_j, xi_j}(s_p_j)
        self.s_at_p = np.array([-s0 / sigma**2, s0 / k1, s0 / k2, s0 / k2])
        self.anchors = []
        self.packets = []
        for j in range(4):
            sharp = np.concatenate([[-xi[j][0]], xi[j][1:]])
            qj = p - self.s_at_p[j] * sharp
            self.anchors.append(qj)
            self.packets.append(LinePacket(qj, xi[j], delta, V=V, chi=chi,
                                           gl_nodes=gl_nodes))

    def xi_total(self):
        return self.xi[0] + self.xi[1] + self.xi[2] + self.xi[3]

    def c_values(self, V, nq=4001):
        """Quadrature oracle for the segment weights: 2i c^{(j)} = int V."""
        out = []
        for j in range(4):
            pk = self.packets[j]
            s = np.linspace(0.0, self.s_at_p[j], nq)
            pts = pk.q + s[:, None] * pk.xi_sharp
            vals = np.asarray(V(pts))
            from scipy.integrate import simpson
            out.append(simpson(vals, x=s) / 2j)
        return np.array(out)

    def target_line_integral(self, V, nq=4001):
        """Oracle for the sigma -> 0 limit: int_0^{s0} V down from anchor 0."""
        s = np.linspace(0.0, self.s0, nq)
        seg = self.anchors[0] + s[:, None] * np.concatenate(
            [[-1.0], self.xi[1][1:] / self.kappa[1]])
        from scipy.integrate import simpson
        return float(simpson(np.asarray(V(seg)), x=s))


# ---------------------------------------------------------------------------
# interaction integral by quadrature
# ---------------------------------------------------------------------------

def _eval_wave(wave, tau, pts):
    if hasattr(wave, "eval_many"):
        return wave.eval_many(tau, pts)
    return wave.eval(tau, pts)


def asymptotic_I(waves, tau, center, half_widths, nq=41, loc_tol=1e-3):
    """Quadrature of the product of the given waves on a box around center.

    When every wave exposes a linear phase (GO packets), the total covector
    is assembled once so an exact linear dependence cancels the phase
    grid-exactly; otherwise the full complex evaluations are multiplied.
    A localization check requires the integrand to be negligible on the box
    boundary.
    """
    pts, w, boundary = tensor_quadrature(center, half_widths, nq)
    go_like = all(hasattr(wv, "xi") and hasattr(wv, "amplitude_sum")
                  for wv in waves)
    if go_like:
        xi_tot = sum(wv.xi for wv in waves)
        integrand = np.ones(len(pts), dtype=complex)
        for wv in waves:
            integrand = integrand * wv.amplitude_sum(tau, pts)
        if np.any(xi_tot):
            integrand = integrand * np.exp(1j * tau * (pts @ xi_tot))
    else:
        integrand = np.ones(len(pts), dtype=complex)
        for wv in waves:
            integrand = integrand * np.asarray(_eval_wave(wv, tau, pts))
    peak = float(np.max(np.abs(integrand)))
    if peak > 0:
        leak = float(np.max(np.abs(integrand[boundary]))) / peak
        if leak > loc_tol:
            raise RecoveryError(
                f"tube intersection not localized (boundary level {leak:.1e})")
    return complex(np.sum(w * integrand))


def interaction_series(waves, taus, center, half_widths, nq=41, loc_tol=1e-3):
    """I(tau) over a tau ensemble, reusing amplitude evaluations.

    For GO packets the amplitude levels are tau-independent, so they are
    evaluated once and recombined per tau; other wave types fall back to a
    plain loop over `asymptotic_I`.
    """
    taus = np.asarray(taus, dtype=float)
    if not all(hasattr(wv, "amplitudes") and hasattr(wv, "xi")
               for wv in waves):
        return np.array([asymptotic_I(waves, t, center, half_widths, nq,
                                      loc_tol) for t in taus])
    pts, w, boundary = tensor_quadrature(center, half_widths, nq)
    levels = [wv.amplitudes(pts) for wv in waves]
    xi_tot = sum(wv.xi for wv in waves)
    linphase = (pts @ xi_tot) if np.any(xi_tot) else None
    a0_prod = np.ones(len(pts), dtype=complex)
    for a0, _ in levels:
        a0_prod = a0_prod * a0
    if float(np.max(np.abs(a0_prod))) > 0:
        leak = float(np.max(np.abs(a0_prod[boundary]))) \
            / float(np.max(np.abs(a0_prod)))
        if leak > loc_tol:
            raise RecoveryError(
                f"tube intersection not localized (boundary level {leak:.1e})")
    out = np.empty(len(taus), dtype=complex)
    for i, tau in enumerate(taus):
        integrand = np.ones(len(pts), dtype=complex)
        for a0, a1 in levels:
            integrand = integrand * (a0 + a1 / tau)
        if linphase is not None:
            integrand = integrand * np.exp(1j * tau * linphase)
        out[i] = np.sum(w * integrand)
    return out


# ---------------------------------------------------------------------------
# tau-series fit
# ---------------------------------------------------------------------------

class TauSeries:
    """Weighted least-squares fit of I(tau) in the basis {1, 1/tau, 1/tau^2}."""

    def __init__(self, tau, values, I0, Im1, Im2, residual, cond, flags,
                 weights):
        self.tau = np.asarray(tau, dtype=float)
        self.values = np.asarray(values)
        self.I0 = complex(I0)
        self.Im1 = complex(Im1)
        self.Im2 = complex(Im2)
        self.residual = float(residual)
        self.cond = float(cond)
        self.flags = list(flags)
        self.weights = weights


def fit_tau_series(tau, values, weights=None):
    """Fit I0 + Im1/tau + Im2/tau^2; the last term absorbs the remainder.

    Columns are scaled by min(tau) so the Vandermonde system stays well
    conditioned for wide geometric tau ranges.
    """
    tau = np.asarray(tau, dtype=float)
    values = np.asarray(values, dtype=complex)
    if len(tau) < 4:
        raise RecoveryError("need at least 4 tau samples for the series fit")
    if weights is None:
        weights = np.ones(len(tau))
    weights = np.asarray(weights, dtype=float)
    t0 = tau.min()
    A = np.stack([np.ones(len(tau)), t0 / tau, (t0 / tau) ** 2], axis=1)
    Aw = A * weights[:, None]
    cond = float(np.linalg.cond(Aw))
    if cond >= 1e6:
        raise RecoveryError(f"tau-series fit ill conditioned (cond {cond:.1e})")
    coef, _, _, _ = np.linalg.lstsq(Aw, values * weights, rcond=None)
    fitted = A @ coef
    residual = float(np.linalg.norm((values - fitted) * weights))
    I0, Im1, Im2 = coef[0], coef[1] * t0, coef[2] * t0**2
    flags = []
    if residual > 0.05 * max(abs(Im1) / t0, 1e-300):
        flags.append("asymptotic regime not reached")
    return TauSeries(tau, values, I0, Im1, Im2, residual, cond, flags, weights)


# ---------------------------------------------------------------------------
# extraction, sigma limit, differentiation
# ---------------------------------------------------------------------------

def extract_line_integrals(fit, calibration):
    """sum_j c^{(j)}(p) from the measured and potential-free series fits.

    The 1/tau coefficient splits into a V-independent part (identical in
    both runs, since the leading amplitudes do not see V) and the c-part
    carrying the potential line integrals; the difference isolates the
    latter, and the shared leading coefficient supplies the geometric
    weight.  The fits must agree on I0, which is V-independent.
    """
    scale = max(abs(fit.I0), abs(calibration.I0), 1e-300)
    if abs(fit.I0 - calibration.I0) > 0.10 * scale:
        raise RecoveryError("calibration/measurement inconsistency in I0")
    if abs(fit.I0) < 1e-300:
        raise RecoveryError("vanishing interaction weight I0")
    return (fit.Im1 - calibration.Im1) / fit.I0


def richardson_sigma(sigmas, values, tol=0.5):
    """sigma -> 0 limit of values sampled on a halving sigma schedule.

    The error is O(sigma^2), so successive pairs eliminate sigma^2 then
    sigma^4.  Returns (limit, flags); a flag is raised when the corrections
    do not shrink (extrapolation not in its asymptotic regime).
    """
    sigmas = np.asarray(sigmas, dtype=float)
    values = np.asarray(values, dtype=complex)
    if len(sigmas) < 3:
        raise RecoveryError("sigma schedule needs at least 3 values")
    if not np.allclose(sigmas[:-1] / sigmas[1:], 2.0, rtol=1e-12):
        raise RecoveryError("sigma schedule must halve at each step")
    flags = []
    first = np.abs(np.diff(values))
    if len(first) >= 2 and first[-1] > tol * first[-2] and \
            first[-2] > 1e-14 * max(np.abs(values)):
        flags.append("sigma extrapolation non-monotone")
    level = values
    factor = 4.0
    while len(level) > 1:
        level = (factor * level[1:] - level[:-1]) / (factor - 1.0)
        factor *= 4.0
    return complex(level[0]), flags


def differentiate_line_integral(s0s, Ls):
    """Central difference dL/ds0 on three samples along the segment family."""
    s0s = np.asarray(s0s, dtype=float)
    Ls = np.asarray(Ls, dtype=float)
    if len(s0s) < 3:
        raise RecoveryError("need 3 segment lengths for the derivative")
    return float((Ls[-1] - Ls[0]) / (s0s[-1] - s0s[0]))


# ---------------------------------------------------------------------------
# direct formula on the measurement cylinder
# ---------------------------------------------------------------------------

def recover_on_mho(metric, grid, u, f, threshold=1e-6):
    """V = (f - box u)/u pointwise, where the probe u is not too small.

    Works on interior time slices; returns (V field, valid mask).  Points
    with |u| below threshold * sup|u| are skipped and masked out.
    """
    udata = _as_array(u)
    fdata = f.field if isinstance(f, solver.SourceTerm) else _as_array(f)
    ufield = u if isinstance(u, solver.GridField) else \
        solver.GridField(grid, udata)
    box_u = solver.apply_wave_operator(metric, grid, None, ufield).data
    sup = float(np.max(np.abs(udata)))
    mask = np.abs(udata) > threshold * sup
    mask[0] = mask[-1] = False          # operator undefined on end slices
    vrec = np.zeros_like(udata)
    vrec[mask] = (fdata[mask] - box_u[mask]) / udata[mask]
    return solver.GridField(grid, vrec, name="recovered potential"), mask


# ---------------------------------------------------------------------------
# region driver (fast route)
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ["p_t", "p_x1", "p_x2", "sigma", "s0", "I0_re", "I0_im",
                  "Im1_re", "Im1_im", "line_integral", "V_recovered",
                  "V_true", "rel_err", "flags"]


class RecoveryReport:
    """Row-per-(sigma, s0) table plus one summary row per recovered point."""

    def __init__(self):
        self.rows = []

    def add(self, **kw):
        row = {c: kw.get(c, "") for c in REPORT_COLUMNS}
        self.rows.append(row)

    def summary_rows(self):
        return [r for r in self.rows if r["V_recovered"] != ""]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            w.writerows(self.rows)

    def median_rel_err(self):
        errs = [float(r["rel_err"]) for r in self.summary_rows()
                if r["rel_err"] != ""]
        if not errs:
            raise RecoveryError("no recovered points with truth comparison")
        return float(np.median(errs))


def default_taus(delta, s0, sigma=None):
    """tau ensemble placing the fit inside the asymptotic window.

    The first-order amplitudes carry factors up to ~ s0/delta^2 from the
    transverse curvature of the profile and ~ s0/sigma^2 from the rescaled
    reversal covector, so the smallest tau is chosen an order of magnitude
    above both; the quadrature cost does not grow with tau because the
    assembled integrand carries no oscillatory phase.
    """
    scale = 1.0 / delta**2
    if sigma is not None:
        scale += 1.0 / sigma**2
    base = 20.0 * max(s0, 1.0) * scale
    return base * np.array([1.0, 2.0, 4.0, 8.0, 16.0])


def recover_point(metric, V, p, r, T, sigma0=0.1, taus=None, delta=0.1,
                  ds0=0.05, nq=41, V_true=None, report=None):
    """Recover V(p) by the quadrature route; returns (value, flags).

    Pipeline: returning geodesics fix the segment geometry; for three
    segment lengths s0 (sharing the upper anchor) and a halving sigma
    schedule, interaction series are quadratured with the actual and the
    zero potential, fitted in tau, and differenced into weighted c-sums;
    Richardson extrapolation in sigma^2 gives the line integral L(s0) and
    a central difference in s0 gives V(p).
    """
    p = np.asarray(p, dtype=float)
    if not isinstance(metric, geo.MinkowskiMetric) and metric.kind != "minkowski":
        raise RecoveryError("fast-route recovery supports flat backgrounds")
    ret = sources.find_returning_geodesics(metric, p, r, T)
    s0c = p[0] - ret.q_minus[0]
    direction = (p[1:] - ret.q_minus[1:]) / s0c
    q_plus = ret.q_plus
    if report is None:
        report = RecoveryReport()
    all_flags = []
    Ls = []
    s0_grid = [s0c - ds0, s0c, s0c + ds0]
    for s0 in s0_grid:
        # the upper anchor stays fixed; p slides down its null geodesic
        pp = np.concatenate([[q_plus[0] - s0], q_plus[1:] + s0 * direction])
        sig_vals = []
        sigmas = [sigma0, sigma0 / 2, sigma0 / 4]
        for sig in sigmas:
            tau_list = default_taus(delta, s0, sig) if taus is None else taus
            quad = PacketQuad(pp, s0, direction, sig, V=V, delta=delta)
            cal = PacketQuad(pp, s0, direction, sig, V=None, delta=delta)
            hw = 3.0 * delta
            vals = interaction_series(quad.packets, tau_list, pp, hw, nq)
            vals0 = interaction_series(cal.packets, tau_list, pp, hw, nq)
            fit = fit_tau_series(tau_list, vals)
            fit0 = fit_tau_series(tau_list, vals0)
            csum = extract_line_integrals(fit, fit0)
            # the reversal packet integrates from its anchor backwards along
            # the flow (its parameter at p is negative), so the rescaled
            # c-sum carries a minus sign relative to the down-segment
            # parametrization of the line integral
            Lsig = -2j * sig**2 * csum
            sig_vals.append(Lsig)
            all_flags.extend(fit.flags)
            report.add(p_t=pp[0], p_x1=pp[1],
                       p_x2=pp[2] if len(pp) > 2 else "",
                       sigma=sig, s0=s0,
                       I0_re=fit.I0.real, I0_im=fit.I0.imag,
                       Im1_re=fit.Im1.real, Im1_im=fit.Im1.imag,
                       line_integral=Lsig.real,
                       flags=";".join(fit.flags))
        L, rflags = richardson_sigma(sigmas, sig_vals)
        all_flags.extend(rflags)
        if abs(L.imag) > 0.05 * max(abs(L.real), 1e-6):
            all_flags.append("line integral not real")
        Ls.append(L.real)
    v_rec = differentiate_line_integral(s0_grid, Ls)
    row = dict(p_t=p[0], p_x1=p[1], p_x2=p[2] if len(p) > 2 else "",
               sigma=0.0, s0=s0c, line_integral=Ls[1], V_recovered=v_rec,
               flags=";".join(sorted(set(all_flags))))
    if V_true is not None:
        vt = float(np.asarray(V_true(p[None]))[0])
        row["V_true"] = vt
        row["rel_err"] = abs(v_rec - vt) / max(abs(vt), 1e-12)
    report.add(**row)
    return v_rec, all_flags, report


# ---------------------------------------------------------------------------
# full route: PDE pipeline for the interaction integral
# ---------------------------------------------------------------------------

class _ShiftedPacket:
    """Time-translated view of a packet, for surgery on a short sub-grid.

    The wave equation is invariant under time translation, so a packet whose
    anchor sits at a late time can be evaluated on a window grid starting at
    t = 0 by shifting the evaluation points.
    """

    def __init__(self, packet, t_shift):
        self._packet = packet
        self.t_shift = float(t_shift)
        self._offset = np.zeros(len(packet.q))
        self._offset[0] = self.t_shift
        self.q = packet.q - self._offset
        self.Linv = packet.Linv
        self.delta = packet.delta
        self.n = packet.n

    def flow_point(self, s):
        return self._packet.flow_point(s) - self._offset

    def eval(self, tau, pts):
        return self._packet.eval(tau, np.asarray(pts, dtype=float)
                                 + self._offset)


def _shift_potential(V, t_shift):
    if V is None or not callable(V):
        return V
    offset = t_shift

    def shifted(pts):
        pts = np.asarray(pts, dtype=float).copy()
        pts[..., 0] += offset
        return V(pts)
    return shifted


class FullPathResult:
    """PDE-route interaction integral next to its quadrature prediction."""

    def __init__(self, pairing, I_fast, quad, grid, I_check=None):
        self.pairing = pairing
        self.I_full = pairing.data_side
        self.I_fast = complex(I_fast)
        self.rel_diff = abs(self.I_full - self.I_fast) / \
            max(abs(self.I_fast), 1e-300)
        self.quad = quad
        self.grid = grid
        self.I_check = I_check


def _window_packet(n, quad, j, t_lo, t_hi, delta, V, hs=0.004):
    """Grid-based packet for covector j, resolved over the window [t_lo, t_hi].

    The flow-parameter span covering the window is (t - q0)/(-xi_0); the
    s-grid is symmetric so the anchoring hyperplane s = 0 is a grid node.
    """
    xi = quad.xi[j]
    q = quad.anchors[j]
    spans = [(t_lo - q[0]) / (-xi[0]), (t_hi - q[0]) / (-xi[0])]
    a = 1.3 * max(abs(spans[0]), abs(spans[1])) + 10 * hs
    ns = 2 * max(int(np.ceil(a / hs)), 50) + 1
    return go.GOPacket(n, q, xi, delta=delta, V=V, N=1, chi="bump",
                       s_range=(-a, a), ns=ns)


def full_path_interaction(metric, V, p, r, T, tau, sigma=0.6, delta=0.1,
                          h=0.006, dt=None, pad=0.25, rho=0.06, h_eps=0.1,
                          nq=41, check=True, consistency=False):
    """Interaction integral I(tau) through the nonlinear solver.

    Eight corner solves of the three-parameter source family (plus eight at
    half step for the Richardson gate) yield the third cross derivative;
    its data-side pairing with the surgery test function is the PDE-route
    value of I, returned next to the quadrature of the same four packets.

    Memory is kept at desk scale by confining the surgery and the pairing
    to short time windows around the two anchor slabs and streaming the
    forward marches through an observer instead of storing full solutions.

    With `consistency`, the same I is recomputed without the cross
    derivative as the space-time integral of the four solved fields (three
    linear forward solves and one backward solve) and stored as `I_check`;
    this holds four full solution histories and is only meant for coarse
    grids.
    """
    p = np.asarray(p, dtype=float)
    n = len(p) - 1
    if not isinstance(metric, geo.MinkowskiMetric) and metric.kind != "minkowski":
        raise RecoveryError("full-route driver supports flat backgrounds")
    ret = sources.find_returning_geodesics(metric, p, r, T)
    s0 = p[0] - ret.q_minus[0]
    direction = (p[1:] - ret.q_minus[1:]) / s0
    quad = PacketQuad(p, s0, direction, sigma, V=V, delta=delta)
    t_minus = ret.q_minus[0]
    t_plus = ret.q_plus[0]

    if dt is None:
        # leapfrog/4th-order dispersion roughly cancels near
        # dt ~ 0.365 k h^2 for the stiffest carrier k
        k_top = float(np.max(np.abs(quad.kappa))) * tau
        dt = min(0.365 * k_top * h * h, 0.4 * h / np.sqrt(n))
    nsteps = max(int(np.ceil(T / dt)), 8)
    dt = T / nsteps
    grid = solver.Grid.for_ball(n, r, T, h, dt, pad=pad)

    if t_minus - rho - 3 * dt <= 0 or t_plus + rho + 3 * dt >= T:
        raise RecoveryError("surgery windows do not fit inside [0, T]")

    # sources for families 1..3 on a window grid starting at t = 0
    mw = int(np.ceil((t_minus + rho + 3 * dt) / dt))
    wgrid = solver.Grid(n, grid.lo, grid.shape, grid.h, dt, mw * dt)
    srcs = []
    for j in (1, 2, 3):
        gp = _window_packet(n, quad, j, 0.0, mw * dt, delta, V)
        src, _ = sources.make_source(gp, metric, wgrid, tau, V=V, r=r,
                                     t0=t_minus, rho=rho)
        srcs.append(src)
    fam = sources.build_three_family(*srcs)

    # test function on a window grid around the upper anchor slab
    m0 = int(np.floor((t_plus - rho) / dt)) - 3
    mt = int(np.ceil((t_plus + rho + 3 * dt) / dt)) - m0
    if m0 + mt > grid.nt - 1:
        raise RecoveryError("pairing window leaves the grid")
    tshift = m0 * dt
    tgrid = solver.Grid(n, grid.lo, grid.shape, grid.h, dt, mt * dt)
    gp0 = _window_packet(n, quad, 0, tshift, tshift + mt * dt, delta, V)
    fplus, _ = sources.make_test_function(
        _ShiftedPacket(gp0, tshift), metric, tgrid, tau,
        V=_shift_potential(V, tshift), r=r, t0=t_plus - tshift, rho=rho)

    zero_slice = np.zeros(grid.shape, dtype=complex)

    def lift(src_w):
        fld = src_w.field
        nwin = fld.shape[0]

        def closure(t, pts):
            m = int(round(t / dt))
            return fld[m] if m < nwin else zero_slice
        return solver.SourceTerm(grid, closure=closure, name="window family")

    def solve(src_w):
        buf = np.zeros((mt + 1,) + grid.shape, dtype=complex)

        def obs(mi, t, sl):
            if m0 <= mi <= m0 + mt:
                buf[mi - m0] = sl
        solver.solve_forward(metric, grid, V, lift(src_w), nonlinear=True,
                             store="none", observers=(obs,))
        return buf

    stencil = cross_derivative(fam, solve, h_eps, check=check)
    vfield = solver.GridField(tgrid, np.asarray(stencil.vtau))
    pairing = pairing_integral(metric, tgrid, _shift_potential(V, tshift),
                               vfield, fplus)
    I_fast = asymptotic_I(quad.packets, tau, p, 3.0 * delta, nq=nq)

    I_check = None
    if consistency:
        Us = []
        for j in range(3):
            eps = tuple(1.0 if k == j else 0.0 for k in range(3))
            Us.append(solver.solve_forward(metric, grid, V, lift(fam(eps))))
        fplus_full = solver.SourceTerm(
            grid,
            closure=lambda t, pts: (
                fplus.field[int(round(t / dt)) - m0]
                if m0 <= int(round(t / dt)) <= m0 + mt else zero_slice),
            name="lifted test function")
        U0 = solver.solve_backward(metric, grid, V, fplus_full)
        I_check = solver.spacetime_integral(
            grid, U0.data, Us[0].data, Us[1].data, Us[2].data)
    return FullPathResult(pairing, I_fast, quad, grid, I_check=I_check)


def recover_region(metric, V, points, r, T, V_true=None, sigma0=0.1,
                   taus=None, delta=0.1, ds0=0.05, nq=41):
    """Run `recover_point` over a point list; failures are recorded rows."""
    report = RecoveryReport()
    for p in points:
        p = np.asarray(p, dtype=float)
        try:
            recover_point(metric, V, p, r, T, sigma0=sigma0, taus=taus,
                          delta=delta, ds0=ds0, nq=nq, V_true=V_true,
                          report=report)
        except (RecoveryError, sources.SourceError, geo.GeometryError) as exc:
            report.add(p_t=p[0], p_x1=p[1],
                       p_x2=p[2] if len(p) > 2 else "",
                       flags=f"failed: {exc}")
    return report
