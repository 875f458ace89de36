"""Gaussian beams along a null geodesic.

The beam lives on a rescaled copy of the Fermi chart: with y^1 = 2 z^1 the
pulled-back metric on the axis becomes  2 ds dy^1/... precisely the constant
matrix [[0,1],[1,0]] (+ identity in the remaining directions), so the phase
hierarchy takes its simplest form: phi = y^1 + H(s) y.y + higher orders, with
H solving dH/ds + HCH + D = 0, C = diag(0, 2, ..., 2), D = (1/4) Hess(g^11).

All jet equations (eikonal and transport, order by order in the transverse
variables) are enforced against polynomial fits of the actual pulled-back
metric, so a wrong convention or a chart defect shows up directly in the
on-axis residual checks rather than being silently absorbed.
"""

from __future__ import annotations

import functools
import itertools

import numpy as np
from scipy.interpolate import CubicSpline

from .fermi import FermiChart, FermiError
from .go import resolve_chi


class BeamError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# dense polynomial cubes in the transverse variables
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def multi_indices(n, deg):
    """All transverse multi-indices with |alpha| <= deg, graded order."""
    out = []
    for total in range(deg + 1):
        for alpha in itertools.product(range(total + 1), repeat=n):
            if sum(alpha) == total:
                out.append(alpha)
    return tuple(out)


@functools.lru_cache(maxsize=None)
def _degree_grid(n, D):
    """|alpha| for every slot of a (D,)*n coefficient cube."""
    grids = np.meshgrid(*([np.arange(D)] * n), indexing="ij")
    return sum(grids)


class PolyCube:
    """Polynomial in n transverse variables with a leading batch shape.

    coeffs[..., a1, ..., an] multiplies y1^a1 * ... * yn^an; coefficients with
    |alpha| > deg are kept identically zero (products truncate).
    """

    __slots__ = ("n", "deg", "c")

    def __init__(self, n, deg, c):
        self.n = n
        self.deg = deg
        self.c = c

    @classmethod
    def zeros(cls, n, deg, lead=(), dtype=complex):
        return cls(n, deg, np.zeros(tuple(lead) + (deg + 1,) * n, dtype=dtype))

    def copy(self):
        return PolyCube(self.n, self.deg, self.c.copy())

    @property
    def lead(self):
        return self.c.shape[: self.c.ndim - self.n]

    def idx(self, alpha):
        return (Ellipsis,) + tuple(alpha)

    def get(self, alpha):
        return self.c[self.idx(alpha)]

    def add_to(self, alpha, value):
        self.c[self.idx(alpha)] += value

    def __add__(self, other):
        return PolyCube(self.n, self.deg, self.c + other.c)

    def __sub__(self, other):
        return PolyCube(self.n, self.deg, self.c - other.c)

    def scaled(self, fac):
        """Multiply by a scalar or an array broadcast over the lead axes."""
        fac = np.asarray(fac)
        return PolyCube(self.n, self.deg,
                        self.c * fac.reshape(fac.shape + (1,) * self.n))

    def mulp(self, other):
        """Truncated polynomial product (lead axes broadcast)."""
        D = self.deg + 1
        lead = np.broadcast_shapes(self.lead, other.lead)
        out = np.zeros(lead + (D,) * self.n, dtype=complex)
        oc = other.c
        for beta in multi_indices(self.n, self.deg):
            b = oc[(Ellipsis,) + beta]
            if not np.any(b):
                continue
            src = self.c[(Ellipsis,) + tuple(slice(0, D - k) for k in beta)]
            dst = (Ellipsis,) + tuple(slice(k, D) for k in beta)
            out[dst] += src * b.reshape(b.shape + (1,) * self.n)
        res = PolyCube(self.n, self.deg, out)
        res._mask_overflow()
        return res

    def _mask_overflow(self):
        mask = _degree_grid(self.n, self.deg + 1) > self.deg
        self.c[..., mask] = 0.0

    def diff(self, k):
        """Derivative with respect to y_{k} (k in 1..n, chart numbering)."""
        ax = self.c.ndim - self.n + (k - 1)
        D = self.deg + 1
        out = np.zeros_like(self.c)
        sl_src = [slice(None)] * self.c.ndim
        sl_dst = [slice(None)] * self.c.ndim
        sl_src[ax] = slice(1, D)
        sl_dst[ax] = slice(0, D - 1)
        powers = np.arange(1, D).reshape(
            (D - 1,) + (1,) * (self.c.ndim - 1 - ax))
        out[tuple(sl_dst)] = self.c[tuple(sl_src)] * powers
        return PolyCube(self.n, self.deg, out)

    def degree_part(self, m):
        """Cube with only the degree-m coefficients kept."""
        out = np.zeros_like(self.c)
        mask = _degree_grid(self.n, self.deg + 1) == m
        out[..., mask] = self.c[..., mask]
        return PolyCube(self.n, self.deg, out)

    def degree_coeffs(self, m):
        """Flat vector(s) of the degree-m coefficients, graded order."""
        alphas = [a for a in multi_indices(self.n, self.deg) if sum(a) == m]
        return np.stack([self.get(a) for a in alphas], axis=-1), alphas

    def set_degree_coeffs(self, m, vec):
        alphas = [a for a in multi_indices(self.n, self.deg) if sum(a) == m]
        for j, a in enumerate(alphas):
            self.c[self.idx(a)] = vec[..., j]

    def max_degree_abs(self, m):
        mask = _degree_grid(self.n, self.deg + 1) == m
        vals = self.c[..., mask]
        return float(np.max(np.abs(vals))) if vals.size else 0.0

    def eval(self, y):
        """Evaluate at points y (..., n); lead axes broadcast against y's."""
        y = np.asarray(y)
        D = self.deg + 1
        # monomial tensor for each point, then contract with the cube
        mono = np.ones(y.shape[:-1] + (D,) * self.n, dtype=y.dtype)
        for k in range(self.n):
            powers = np.cumprod(
                np.concatenate([np.ones(y.shape[:-1] + (1,)),
                                np.repeat(y[..., k:k + 1], D - 1, axis=-1)],
                               axis=-1), axis=-1)
            shape = y.shape[:-1] + (1,) * k + (D,) + (1,) * (self.n - 1 - k)
            mono = mono * powers.reshape(shape)
        axes = tuple(range(-self.n, 0))
        return np.sum(self.c * mono, axis=axes)

    def eval_grid(self, ypts):
        """Evaluate at a batch of points (m, n) -> (lead..., m)."""
        ypts = np.asarray(ypts, dtype=float)
        D = self.deg + 1
        mono = np.ones((ypts.shape[0],) + (D,) * self.n)
        for k in range(self.n):
            powers = np.cumprod(
                np.concatenate([np.ones((ypts.shape[0], 1)),
                                np.repeat(ypts[:, k:k + 1], D - 1, axis=1)],
                               axis=1), axis=1)
            shape = (ypts.shape[0],) + (1,) * k + (D,) + (1,) * (self.n - 1 - k)
            mono = mono * powers.reshape(shape)
        axes = tuple(range(1, self.n + 1))
        return np.tensordot(self.c, mono,
                            axes=(tuple(range(-self.n, 0)), axes))

    def axis(self):
        return self.c[(Ellipsis,) + (0,) * self.n]


def nmono(n, deg_lo, deg_hi):
    """Number of monomials with deg_lo <= |alpha| <= deg_hi."""
    return sum(1 for a in multi_indices(n, deg_hi) if sum(a) >= deg_lo)


# ---------------------------------------------------------------------------
# rescaled chart
# ---------------------------------------------------------------------------

class BeamChart:
    """Fermi chart with y^1 = 2 z^1, so the axis metric pairing is 1.

    In these coordinates the eikonal cross-term coefficient is exactly 2 and
    the Riccati curvature term is D = (1/4) Hess_transverse(ginv^11).
    """

    def __init__(self, chart: FermiChart):
        self.chart = chart
        self.n = chart.n
        self.scale = np.ones(self.n)
        self.scale[0] = 0.5           # z^1 = y^1 / 2
        self.metric = chart.metric

    def forward(self, s, y):
        y = np.asarray(y, dtype=float)
        return self.chart.forward(s, y * self.scale)

    def to_beam(self, zprime):
        return np.asarray(zprime) / self.scale

    def pullback(self, s, y, h=2e-3):
        """Chart metric g_ij(s, y) by 4th-order finite differences, batched."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        y = np.asarray(y, dtype=float).reshape(s.shape + (self.n,))
        dim = self.n + 1
        J = np.empty(s.shape + (dim, dim))

        def fwd(ds, dy):
            return self.forward(s + ds, y + dy)

        c1, c2 = 8.0 / (12 * h), 1.0 / (12 * h)
        J[..., 0] = (c1 * (fwd(h, 0) - fwd(-h, 0))
                     - c2 * (fwd(2 * h, 0) - fwd(-2 * h, 0)))
        for k in range(self.n):
            e = np.zeros(self.n)
            e[k] = h
            J[..., 1 + k] = (c1 * (fwd(0, e) - fwd(0, -e))
                             - c2 * (fwd(0, 2 * e) - fwd(0, -2 * e)))
        G = self.metric.matrix(self.forward(s, y))
        return np.einsum("...ai,...ab,...bj->...ij", J, G, J)


# ---------------------------------------------------------------------------
# metric jets on an s-lattice
# ---------------------------------------------------------------------------

class ChartJets:
    """Polynomial jets of the inverse chart metric (and friends) in s.

    Components fitted per s-node over a transverse cloud and accessed through
    cubic splines: ginv^{kl}, the density rho = |det g|^{1/2}, its reciprocal,
    the first-order wave-operator coefficients w^l, the Riccati matrix D and
    optionally a potential V pulled back to the chart.
    """

    def __init__(self, bchart: BeamChart, s_grid, deg=6, r_fit=0.12,
                 h_fd=2e-3, V=None):
        self.bchart = bchart
        self.n = bchart.n
        self.deg = deg
        self.s = np.asarray(s_grid, dtype=float)
        self.r_fit = r_fit
        self._fit(h_fd, V)

    # -- fitting ------------------------------------------------------------

    def _cloud(self):
        npts = self.deg + 3
        axis = np.linspace(-self.r_fit, self.r_fit, npts)
        pts = np.stack(np.meshgrid(*([axis] * self.n), indexing="ij"),
                       axis=-1).reshape(-1, self.n)
        return pts

    def _vandermonde(self, pts):
        alphas = multi_indices(self.n, self.deg)
        M = np.empty((len(pts), len(alphas)))
        for j, a in enumerate(alphas):
            M[:, j] = np.prod(pts ** np.array(a), axis=-1)
        return M, alphas

    def _scatter(self, coefvecs, alphas):
        """(..., nmono) coefficient vectors -> dense cube array."""
        D = self.deg + 1
        out = np.zeros(coefvecs.shape[:-1] + (D,) * self.n)
        for j, a in enumerate(alphas):
            out[(Ellipsis,) + a] = coefvecs[..., j]
        return out

    def _fit(self, h_fd, V):
        n, dim = self.n, self.n + 1
        cloud = self._cloud()
        M, alphas = self._vandermonde(cloud)
        pinv = np.linalg.pinv(M)
        self._cloud_pts, self._pinv, self._alphas = cloud, pinv, alphas
        ns, nc = len(self.s), len(cloud)
        S = np.repeat(self.s, nc)
        Y = np.tile(cloud, (ns, 1))
        g = self.bchart.pullback(S, Y, h=h_fd).reshape(ns, nc, dim, dim)
        ginv = np.linalg.inv(g)
        det = np.linalg.det(g)
        rho = np.sqrt(np.abs(det))

        def fit(vals):
            # vals (ns, nc, ...) -> cube coefficients (ns, ..., D^n)
            vals = np.moveaxis(vals, 1, -1)
            return self._scatter(vals @ pinv.T, alphas)

        self.ginv_c = fit(ginv)                       # (ns, dim, dim, D^n)
        self.rho_c = fit(rho)                         # (ns, D^n)
        self.rho_inv_c = fit(1.0 / rho)
        if V is not None:
            pts = self.bchart.forward(S, Y)
            self.V_c = fit(np.asarray(V(pts)).reshape(ns, nc))
        else:
            self.V_c = None

        # Riccati curvature D_ij = (1/4) d^2_ij ginv^11
        g11 = self.ginv_c[:, 1, 1]
        Dmat = np.empty((ns, n, n))
        for i in range(n):
            for j in range(n):
                a = [0] * n
                a[i] += 1
                a[j] += 1
                coef = g11[(slice(None),) + tuple(a)]
                Dmat[:, i, j] = (2.0 * coef if i == j else coef)
        self.D = 0.25 * Dmat

        # w^l = rho^{-1} [ d_s(rho ginv^{0l}) + sum_k d_k(rho ginv^{kl}) ]
        rho_cube = PolyCube(n, self.deg, self.rho_c + 0j)
        rinv_cube = PolyCube(n, self.deg, self.rho_inv_c + 0j)
        P = [[rho_cube.mulp(PolyCube(n, self.deg, self.ginv_c[:, k, l] + 0j))
              for l in range(dim)] for k in range(dim)]
        w_c = np.zeros((ns, dim) + (self.deg + 1,) * n, dtype=float)
        for l in range(dim):
            acc = PolyCube.zeros(n, self.deg, lead=(ns,))
            # time-slot derivative of the coefficient series
            dP0 = CubicSpline(self.s, P[0][l].c.real, axis=0).derivative()(self.s)
            acc.c += dP0
            for k in range(1, dim):
                acc = acc + P[k][l].diff(k)
            w_c[:, l] = rinv_cube.mulp(acc).c.real
        self.w_c = w_c

        # splines for everything (real data; complex never enters the fits)
        self._sp = {
            "ginv": CubicSpline(self.s, self.ginv_c, axis=0),
            "rho": CubicSpline(self.s, self.rho_c, axis=0),
            "rho_inv": CubicSpline(self.s, self.rho_inv_c, axis=0),
            "w": CubicSpline(self.s, self.w_c, axis=0),
            "D": CubicSpline(self.s, self.D, axis=0),
        }
        self._sp["Ddot"] = self._sp["D"].derivative()
        if self.V_c is not None:
            self._sp["V"] = CubicSpline(self.s, self.V_c, axis=0)

    def attach_potential(self, V):
        """Fit (or clear) jets of a potential closure on the same lattice."""
        if V is None:
            self.V_c = None
            self._sp.pop("V", None)
            return
        cloud, pinv, alphas = self._cloud_pts, self._pinv, self._alphas
        ns, nc = len(self.s), len(cloud)
        S = np.repeat(self.s, nc)
        Y = np.tile(cloud, (ns, 1))
        pts = self.bchart.forward(S, Y)
        vals = np.asarray(V(pts), dtype=float).reshape(ns, nc)
        self.V_c = self._scatter(vals @ pinv.T, alphas)
        self._sp["V"] = CubicSpline(self.s, self.V_c, axis=0)

    # -- access -------------------------------------------------------------

    def ginv_at(self, s):
        """List-of-lists of PolyCube, indexed [k][l] over chart coords.

        Scalar s only (the solvers call this per RK4 stage).
        """
        arr = self._sp["ginv"](float(s))
        dim = self.n + 1
        return [[PolyCube(self.n, self.deg, arr[k, l] + 0j)
                 for l in range(dim)] for k in range(dim)]

    def cube_at(self, name, s):
        return PolyCube(self.n, self.deg, self._sp[name](float(s)) + 0j)

    def w_at(self, s):
        arr = self._sp["w"](float(s))
        return [PolyCube(self.n, self.deg, arr[l] + 0j)
                for l in range(self.n + 1)]

    def D_at(self, s):
        return self._sp["D"](s)

    def Ddot_at(self, s):
        return self._sp["Ddot"](s)

    def V_at(self, s):
        if self.V_c is None:
            return PolyCube.zeros(self.n, self.deg)
        return self.cube_at("V", s)


# ---------------------------------------------------------------------------
# phase jets
# ---------------------------------------------------------------------------

def _c_matrix(n):
    C = 2.0 * np.eye(n)
    C[0, 0] = 0.0
    return C


class PhaseJet:
    """Phase polynomial phi = y^1 + H(s) y.y + higher orders on an s-lattice.

    Degree-2 data is carried through the linear (Y, Z) system so the
    conservation law det(Im H) |det Y|^2 = const is available as a check.
    """

    def __init__(self, chart, bchart, jets, s0, H0, s_nodes, Y, Z):
        self.chart = chart
        self.bchart = bchart
        self.jets = jets
        self.n = bchart.n
        self.s0 = float(s0)
        self.H0 = np.asarray(H0, dtype=complex)
        self.s = np.asarray(s_nodes, dtype=float)
        self.Y = Y
        self.Z = Z
        detY = np.linalg.det(Y)
        if np.min(np.abs(detY)) < 1e-12:
            raise BeamError("Y degenerated")
        H = np.einsum("sij,sjk->sik", Z, np.linalg.inv(Y))
        self.H = 0.5 * (H + np.swapaxes(H, 1, 2))
        self.order = 2
        self.eikonal_defects = {}
        self._pieces_cache = {}
        self._build_base_cubes()
        self._splines()

    # degree <= 2 phase and its s-derivative on the lattice
    def _build_base_cubes(self):
        n, ns = self.n, len(self.s)
        deg = max(self.order, self.jets.deg)
        phi = PolyCube.zeros(n, deg, lead=(ns,))
        e1 = tuple(1 if k == 0 else 0 for k in range(n))
        phi.c[(slice(None),) + e1] = 1.0
        dsphi = PolyCube.zeros(n, deg, lead=(ns,))
        C = _c_matrix(n)
        D = self.jets._sp["D"](self.s)
        Hdot = -(np.einsum("sij,jk,skl->sil", self.H, C, self.H) + D)
        for i in range(n):
            for j in range(i, n):
                a = [0] * n
                a[i] += 1
                a[j] += 1
                fac = 1.0 if i == j else 2.0
                phi.c[(slice(None),) + tuple(a)] = fac * self.H[:, i, j]
                dsphi.c[(slice(None),) + tuple(a)] = fac * Hdot[:, i, j]
        self.phi_c = phi
        self.dsphi_c = dsphi

    def _splines(self):
        self._pieces_cache = {}
        self._sp = {
            "Y": CubicSpline(self.s, self.Y, axis=0),
            "Z": CubicSpline(self.s, self.Z, axis=0),
            "H": CubicSpline(self.s, self.H, axis=0),
            "phi": CubicSpline(self.s, self.phi_c.c, axis=0),
            "dsphi": CubicSpline(self.s, self.dsphi_c.c, axis=0),
        }
        self._sp["ddsphi"] = self._sp["dsphi"].derivative()

    def H_at(self, s):
        return self._sp["H"](s)

    def phi_cube_at(self, s):
        return PolyCube(self.n, self.phi_c.deg, self._sp["phi"](float(s)))

    def dsphi_cube_at(self, s):
        return PolyCube(self.n, self.phi_c.deg, self._sp["dsphi"](float(s)))

    def ddsphi_cube_at(self, s):
        return PolyCube(self.n, self.phi_c.deg, self._sp["ddsphi"](float(s)))

    def phase_eval(self, s, y):
        """phi(s, y) for matching point arrays s (m,), y (m, n)."""
        coeffs = self._sp["phi"](np.asarray(s, dtype=float))
        return PolyCube(self.n, self.phi_c.deg, coeffs).eval(np.asarray(y))

    def im_H_min(self):
        return float(min(np.linalg.eigvalsh(h.imag).min() for h in self.H))

    def conservation_drift(self):
        """Relative drift of det(Im H) |det Y|^2 along the lattice."""
        q = np.linalg.det(self.H.imag) * np.abs(np.linalg.det(self.Y)) ** 2
        q0 = np.linalg.det(self.H0.imag)
        return float(np.max(np.abs(q - q0)) / abs(q0))

    def detY_sqrt(self):
        """Branch-continuous sqrt(det Y) on the lattice, positive at s0."""
        detY = np.linalg.det(self.Y)
        # guard against a branch flip between neighbouring samples
        dphase = np.abs(np.diff(np.unwrap(np.angle(detY))))
        if np.max(dphase, initial=0.0) > 0.5 * np.pi:
            raise BeamError("branch jump detected in det Y^{-1/2}")
        r = np.sqrt(detY)
        i0 = int(np.argmin(np.abs(self.s - self.s0)))
        for i in range(i0 + 1, len(r)):
            if abs(r[i] - r[i - 1]) > abs(r[i] + r[i - 1]):
                r[i] = -r[i]
        for i in range(i0 - 1, -1, -1):
            if abs(r[i] - r[i + 1]) > abs(r[i] + r[i + 1]):
                r[i] = -r[i]
        return r


def _node_lattice(s0, lo, hi, hs):
    kneg = int(np.floor((s0 - lo) / hs + 1e-9))
    kpos = int(np.floor((hi - s0) / hs + 1e-9))
    return s0 + hs * np.arange(-kneg, kpos + 1), kneg


def _rk4_span(rhs, s_nodes, i0, state0):
    """Integrate dstate/ds = rhs(s, state) outward from node i0, both ways."""
    vals = [None] * len(s_nodes)
    vals[i0] = np.asarray(state0, dtype=complex)
    for direction in (+1, -1):
        i = i0
        while 0 <= i + direction < len(s_nodes):
            s, sn = s_nodes[i], s_nodes[i + direction]
            h = sn - s
            y = vals[i]
            k1 = rhs(s, y)
            k2 = rhs(s + 0.5 * h, y + 0.5 * h * k1)
            k3 = rhs(s + 0.5 * h, y + 0.5 * h * k2)
            k4 = rhs(s + h, y + h * k3)
            vals[i + direction] = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            i += direction
    return np.array(vals)


def solve_riccati(chart: FermiChart, s0, H0=None, *, hs=0.015, deg=6,
                  r_fit=0.12, hs_jet=0.02, jets=None):
    """Degree-2 phase via dY/ds = CZ, dZ/ds = -DY with Y(s0)=I, Z(s0)=H0."""
    bchart = BeamChart(chart)
    n = bchart.n
    if H0 is None:
        H0 = 1j * np.eye(n)
    H0 = np.asarray(H0, dtype=complex)
    if np.max(np.abs(H0 - H0.T)) > 1e-12:
        raise BeamError("H0 must be symmetric")
    if np.linalg.eigvalsh(H0.imag).min() <= 0:
        raise BeamError("Im H0 must be positive definite")
    lo, hi = chart.geodesic.s_range
    if not (lo <= s0 <= hi):
        raise BeamError("anchor s0 outside the geodesic range")
    if jets is None:
        njet = max(int(round((hi - lo) / hs_jet)) + 1, 8)
        jets = ChartJets(bchart, np.linspace(lo, hi, njet), deg=deg,
                         r_fit=r_fit)
    C = _c_matrix(n)
    s_nodes, i0 = _node_lattice(s0, lo, hi, hs)

    def rhs(s, state):
        Y = state[:n * n].reshape(n, n)
        Z = state[n * n:].reshape(n, n)
        return np.concatenate([(C @ Z).ravel(), (-jets.D_at(s) @ Y).ravel()])

    state0 = np.concatenate([np.eye(n).ravel() + 0j, H0.ravel()])
    vals = _rk4_span(rhs, s_nodes, i0, state0)
    Y = vals[:, :n * n].reshape(-1, n, n)
    Z = vals[:, n * n:].reshape(-1, n, n)
    return PhaseJet(chart, bchart, jets, s0, H0, s_nodes, Y, Z)


def _eikonal_pieces(jet, s, phi):
    """(B0, B1, B2) with  H(phi) = B0 + B1*dsphi + B2*dsphi^2."""
    n = jet.n
    G = jet.jets.ginv_at(s)
    dphi = [None] + [phi.diff(l) for l in range(1, n + 1)]
    B0 = PolyCube.zeros(n, phi.deg)
    for k in range(1, n + 1):
        for l in range(k, n + 1):
            fac = 1.0 if k == l else 2.0
            B0 = B0 + G[k][l].mulp(dphi[k]).mulp(dphi[l]).scaled(fac)
    B1 = PolyCube.zeros(n, phi.deg)
    for l in range(1, n + 1):
        B1 = B1 + G[0][l].mulp(dphi[l]).scaled(2.0)
    return B0, B1, G[0][0]


def _fill_dsphi(jet, s, phi, dsphi, order):
    """Complete dsphi degree by degree so the eikonal vanishes to `order`."""
    B0, B1, B2 = _eikonal_pieces(jet, s, phi)
    b0 = B1.axis()
    for m in range(3, order + 1):
        total = B0 + B1.mulp(dsphi) + B2.mulp(dsphi).mulp(dsphi)
        Rm, _ = total.degree_coeffs(m)
        dm = -Rm / b0
        dsphi.set_degree_coeffs(m, dm)
    return dsphi


def solve_phase_higher(chart: FermiChart, jet: PhaseJet, order: int):
    """Extend the phase jet with |alpha| = 3..order coefficients.

    The degree-m coefficients satisfy linear ODEs in s; they are integrated
    simultaneously, with the forcing evaluated by polynomial arithmetic on
    the fitted metric jets.  Zero initial data at s0.
    """
    n = jet.n
    if order > jet.jets.deg:
        raise BeamError("phase order exceeds the metric jet degree")
    if order <= 2:
        return jet
    sizes = [nmono(n, m, m) for m in range(3, order + 1)]

    def rhs(s, vec):
        phi = PolyCube(n, jet.phi_c.deg, jet._sp["phi"](float(s)).copy())
        dsphi = PolyCube(n, jet.phi_c.deg, jet._sp["dsphi"](float(s)).copy())
        off = 0
        for m, sz in zip(range(3, order + 1), sizes):
            phi.set_degree_coeffs(m, vec[off:off + sz])
            off += sz
        _fill_dsphi(jet, s, phi, dsphi, order)
        out = np.empty_like(vec)
        off = 0
        for m, sz in zip(range(3, order + 1), sizes):
            out[off:off + sz], _ = dsphi.degree_coeffs(m)
            off += sz
        return out

    i0 = int(np.argmin(np.abs(jet.s - jet.s0)))
    state0 = np.zeros(sum(sizes), dtype=complex)
    vals = _rk4_span(rhs, jet.s, i0, state0)

    # write the solved coefficients (and their s-derivatives) into the cubes
    defects = {m: 0.0 for m in range(order + 1)}
    for i, s in enumerate(jet.s):
        phi = PolyCube(n, jet.phi_c.deg, jet.phi_c.c[i].copy())
        dsphi = PolyCube(n, jet.phi_c.deg, jet.dsphi_c.c[i].copy())
        off = 0
        for m, sz in zip(range(3, order + 1), sizes):
            phi.set_degree_coeffs(m, vals[i, off:off + sz])
            off += sz
        _fill_dsphi(jet, s, phi, dsphi, order)
        jet.phi_c.c[i] = phi.c
        jet.dsphi_c.c[i] = dsphi.c
        B0, B1, B2 = _eikonal_pieces(jet, s, phi)
        total = B0 + B1.mulp(dsphi) + B2.mulp(dsphi).mulp(dsphi)
        for m in range(order + 1):
            defects[m] = max(defects[m], total.max_degree_abs(m))
    jet.order = order
    jet.eikonal_defects = defects
    jet._splines()
    worst = max(defects.values())
    if worst > 1e-6:
        raise BeamError(
            f"on-axis eikonal residual {worst:.2e} exceeds 1e-6 after solve")
    return jet


# ---------------------------------------------------------------------------
# amplitude jets
# ---------------------------------------------------------------------------

def _cumint(s, f, i0):
    """Cumulative trapezoid-free integral anchored at node i0 (complex ok)."""
    from scipy.integrate import cumulative_simpson
    out = (cumulative_simpson(f.real, x=s, initial=0.0)
           + 1j * cumulative_simpson(f.imag, x=s, initial=0.0))
    return out - out[i0]


class _TransportPieces:
    """Per-stage polynomial data shared by all transport fills at one s."""

    def __init__(self, jet: PhaseJet, s):
        n = jet.n
        jets = jet.jets
        G = jets.ginv_at(s)
        w = jets.w_at(s)
        phi = jet.phi_cube_at(s)
        ds = jet.dsphi_cube_at(s)
        dds = jet.ddsphi_cube_at(s)
        dphi = [ds] + [phi.diff(l) for l in range(1, n + 1)]
        self.G, self.w, self.n = G, w, n
        self.E = []
        for l in range(n + 1):
            acc = PolyCube.zeros(n, phi.deg)
            for k in range(n + 1):
                acc = acc + G[k][l].mulp(dphi[k])
            self.E.append(acc.scaled(2.0))
        box = G[0][0].mulp(dds)
        for l in range(1, n + 1):
            box = box + G[0][l].mulp(ds.diff(l)).scaled(2.0)
        for k in range(1, n + 1):
            for l in range(k, n + 1):
                fac = 1.0 if k == l else 2.0
                box = box + G[k][l].mulp(phi.diff(k).diff(l)).scaled(fac)
        box = box + w[0].mulp(ds)
        for l in range(1, n + 1):
            box = box + w[l].mulp(dphi[l])
        self.boxphi = box.scaled(-1.0)
        self.e0ax = self.E[0].axis()

    def apply_T(self, v, dsv):
        """T a = 2 <dphi, da> - (box phi) a with the s-slot supplied."""
        out = self.E[0].mulp(dsv)
        for l in range(1, self.n + 1):
            out = out + self.E[l].mulp(v.diff(l))
        return out - self.boxphi.mulp(v)

    def box(self, v, dsv, ddsv):
        G, w, n = self.G, self.w, self.n
        out = G[0][0].mulp(ddsv)
        for l in range(1, n + 1):
            out = out + G[0][l].mulp(dsv.diff(l)).scaled(2.0)
        for k in range(1, n + 1):
            for l in range(k, n + 1):
                fac = 1.0 if k == l else 2.0
                out = out + G[k][l].mulp(v.diff(k).diff(l)).scaled(fac)
        out = out + w[0].mulp(dsv)
        for l in range(1, n + 1):
            out = out + w[l].mulp(v.diff(l))
        return out.scaled(-1.0)

    def fill(self, v, forcing, mdeg):
        """Solve [T v - forcing]_j = 0 for ds v, degrees j = 0..mdeg."""
        n = self.n
        dsv = PolyCube.zeros(n, v.deg)
        for j in range(mdeg + 1):
            R = self.apply_T(v, dsv) - forcing
            Rj, _ = R.degree_coeffs(j)
            cur, _ = dsv.degree_coeffs(j)
            dsv.set_degree_coeffs(j, cur - Rj / self.e0ax)
        return dsv


def _pieces_at(jet: PhaseJet, s):
    """Stage data cache: every level hits the same node/midpoint s values."""
    key = round(float(s), 12)
    out = jet._pieces_cache.get(key)
    if out is None:
        out = _TransportPieces(jet, s)
        jet._pieces_cache[key] = out
    return out


class AmplitudeJet:
    """Amplitude hierarchy v_{k,j} along the beam, anchored at s0.

    Level k is solved to transverse degree max(N-2k, 0); this grading keeps
    every term of the conjugated residual at or below the tau^{-(N+1-?)/2}
    budget while the forcing P_V v_{k-1} never needs coefficients beyond the
    previous level's solved degree.
    """

    def __init__(self, phase: PhaseJet, V, N, s0=None):
        if s0 is None:
            s0 = phase.s0
        if abs(float(s0) - phase.s0) > 1e-12:
            raise BeamError("amplitude anchor must match the phase anchor s0")
        self.phase = phase
        self.N = int(N)
        self.s0 = float(s0)
        self.s = phase.s
        self.n = phase.n
        self.V = V
        if self.N + 2 > phase.order:
            raise BeamError("phase must be solved to order N+2 before "
                            "amplitudes")
        phase.jets.attach_potential(V)
        self._i0 = int(np.argmin(np.abs(self.s - self.s0)))
        self._forcing_cache = {}
        self.detY_root = phase.detY_sqrt()
        self.v = []
        self.dsv = []
        self._v_sp = []
        self._dsv_sp = []
        self._ddsv_sp = []
        self.transport_defects = {}
        for k in range(self.N + 1):
            self._solve_level(k)
        self._split_v1()

    def _mdeg(self, k):
        return max(self.N - 2 * k, 0)

    def _forcing(self, k, s, pieces):
        """-i P_V v_{k-1} as a PolyCube at stage s (zero cube for k=0)."""
        deg = self.phase.phi_c.deg
        if k == 0:
            return PolyCube.zeros(self.n, deg)
        key = (k, round(float(s), 12))
        cached = self._forcing_cache.get(key)
        if cached is not None:
            return cached
        vprev = PolyCube(self.n, deg, self._v_sp[k - 1](float(s)))
        dsprev = PolyCube(self.n, deg, self._dsv_sp[k - 1](float(s)))
        ddsprev = PolyCube(self.n, deg, self._ddsv_sp[k - 1](float(s)))
        P = pieces.box(vprev, dsprev, ddsprev)
        P = P + self.phase.jets.V_at(s).mulp(vprev)
        out = P.scaled(-1j)
        self._forcing_cache[key] = out
        return out

    def _solve_level(self, k):
        phase = self.phase
        n, deg = self.n, phase.phi_c.deg
        mdeg = self._mdeg(k)
        sizes = nmono(n, 0, mdeg)

        def rhs(s, vec):
            pieces = _pieces_at(phase, s)
            v = PolyCube.zeros(n, deg)
            off = 0
            for m in range(mdeg + 1):
                sz = nmono(n, m, m)
                v.set_degree_coeffs(m, vec[off:off + sz])
                off += sz
            dsv = pieces.fill(v, self._forcing(k, s, pieces), mdeg)
            out = np.empty_like(vec)
            off = 0
            for m in range(mdeg + 1):
                sz = nmono(n, m, m)
                out[off:off + sz], _ = dsv.degree_coeffs(m)
                off += sz
            return out

        state0 = np.zeros(sizes, dtype=complex)
        if k == 0:
            state0[0] = 1.0          # v_{0,0}(s0) = det Y(s0)^{-1/2} = 1
        vals = _rk4_span(rhs, self.s, self._i0, state0)

        vk = PolyCube.zeros(n, deg, lead=(len(self.s),))
        off = 0
        for m in range(mdeg + 1):
            sz = nmono(n, m, m)
            vk.set_degree_coeffs(m, vals[:, off:off + sz])
            off += sz
        if k == 0:
            # determinant formula, with the ODE solution as a cross-check
            vf = 1.0 / self.detY_root
            ode = vk.axis().copy()
            if np.max(np.abs(ode - vf)) > 1e-6 * np.max(np.abs(vf)):
                raise BeamError("quadrature disagreement: v_{0,0} ODE vs "
                                "det Y^{-1/2}")
            vk.c[(slice(None),) + (0,) * n] = vf
        dsvk = PolyCube.zeros(n, deg, lead=(len(self.s),))
        defect = 0.0
        for i, s in enumerate(self.s):
            pieces = _pieces_at(phase, s)
            vi = PolyCube(n, deg, vk.c[i])
            F = self._forcing(k, s, pieces)
            dsi = pieces.fill(vi, F, mdeg)
            dsvk.c[i] = dsi.c
            R = pieces.apply_T(vi, dsi) - F
            for m in range(mdeg + 1):
                defect = max(defect, R.max_degree_abs(m))
        self.transport_defects[k] = defect
        if defect > 1e-6:
            raise BeamError(
                f"on-axis transport residual {defect:.2e} at level {k}")
        self.v.append(vk)
        self.dsv.append(dsvk)
        self._v_sp.append(CubicSpline(self.s, vk.c, axis=0))
        sp = CubicSpline(self.s, dsvk.c, axis=0)
        self._dsv_sp.append(sp)
        self._ddsv_sp.append(sp.derivative())

    def _split_v1(self):
        """v_{1,0} = b_{1,0} + c_{1,0}; c depends on V only through the axis
        quadrature of V, per the transport equation on the axis."""
        if self.N < 1:
            self.b10 = self.c10 = None
            return
        axis_pts = self.phase.bchart.forward(
            self.s, np.zeros((len(self.s), self.n)))
        if self.V is None:
            Vax = np.zeros(len(self.s))
        else:
            Vax = np.asarray(self.V(axis_pts), dtype=float)
        root_inv = 1.0 / self.detY_root
        self.c10 = -0.5j * root_inv * _cumint(self.s, Vax + 0j, self._i0)
        v10 = self.v[1].axis()
        self.b10 = v10 - self.c10
        # independent quadrature for v_{1,0} via the integrating factor
        P0 = np.empty(len(self.s), dtype=complex)
        for i, s in enumerate(self.s):
            pieces = _pieces_at(self.phase, s)
            P0[i] = 1j * self._forcing(1, s, pieces).axis()
        quad = root_inv * _cumint(self.s, -0.5j * self.detY_root * P0,
                                  self._i0)
        scale = max(np.max(np.abs(v10)), 1e-30)
        # RK4 vs Simpson cross-check; both are O(h^4) with different constants
        if np.max(np.abs(quad - v10)) > 1e-4 * max(scale, 1.0):
            raise BeamError("quadrature disagreement: v_{1,0} ODE vs "
                            "integrating-factor quadrature")

    def v_cube_at(self, k, s):
        return PolyCube(self.n, self.phase.phi_c.deg,
                        self._v_sp[k](np.asarray(s, dtype=float)))

    def amp_eval(self, tau, s, y):
        """sum_k tau^{-k} v_k at matching point arrays s (m,), y (m, n)."""
        out = 0.0
        for k in range(self.N + 1):
            out = out + self.v_cube_at(k, s).eval(np.asarray(y)) / tau**k
        return out


def solve_amplitudes(chart: FermiChart, jet: PhaseJet, V, N: int,
                     s0=None) -> AmplitudeJet:
    return AmplitudeJet(jet, V, N, s0=s0)


# ---------------------------------------------------------------------------
# assembled beams
# ---------------------------------------------------------------------------

def chi_plateau(u):
    """C^3 cutoff: 1 for |u| <= 1/4, 0 for |u| >= 1/2, smoothstep between."""
    u = np.abs(np.asarray(u, dtype=float))
    t = np.clip((0.5 - u) * 4.0, 0.0, 1.0)
    return t**4 * (35 - 84 * t + 70 * t**2 - 20 * t**3)


class GaussianBeam:
    """e^{i tau phi} chi(|z'|/delta') sum_k tau^{-k} v_k along the geodesic.

    With the conjugation flag set the beam is e^{-i tau conj(phi)} conj(a),
    which solves the same equation family with the opposite phase sign.
    """

    def __init__(self, chart: FermiChart, phase: PhaseJet,
                 amplitude: AmplitudeJet, conjugate=False, chi=None):
        self.chart = chart
        self.bchart = phase.bchart
        self.phase = phase
        self.amp = amplitude
        self.N = amplitude.N
        self.conjugate = bool(conjugate)
        self.chi = chi_plateau if chi is None else resolve_chi(chi)
        self.delta_prime = chart.delta_prime

    def measured_C(self):
        """Transverse decay constant: min eigenvalue of Im H on the lattice."""
        return self.phase.im_H_min()

    def _value(self, tau, s, y, znorm):
        phi = self.phase.phase_eval(s, y)
        a = self.amp.amp_eval(tau, s, y)
        cut = self.chi(znorm / self.delta_prime)
        if self.conjugate:
            return np.exp(-1j * tau * np.conj(phi)) * np.conj(a) * cut
        return np.exp(1j * tau * phi) * a * cut

    def eval(self, tau, p):
        """Beam value at an ambient point; 0 outside the tube."""
        try:
            s, z = self.chart.inverse(np.asarray(p, dtype=float))
        except FermiError:
            return 0.0 + 0.0j
        if not (self.phase.s[0] <= s <= self.phase.s[-1]):
            return 0.0 + 0.0j
        y = self.bchart.to_beam(z)
        return complex(self._value(tau, np.atleast_1d(s), y[None],
                                   np.linalg.norm(z))[0])

    def eval_many(self, tau, pts):
        """Vectorized beam values; points outside the tube evaluate to 0."""
        pts = np.asarray(pts, dtype=float)
        out = np.zeros(pts.shape[0], dtype=complex)
        s, z, inside = self.chart.inverse_many(pts)
        inside &= (s >= self.phase.s[0]) & (s <= self.phase.s[-1])
        if inside.any():
            y = self.bchart.to_beam(z[inside])
            out[inside] = self._value(tau, s[inside], y,
                                      np.linalg.norm(z[inside], axis=-1))
        return out

    def manifest(self):
        geod = self.chart.geodesic
        lines = [
            "gaussian beam manifest",
            f"geodesic endpoints: {geod.x[0].tolist()} -> {geod.x[-1].tolist()}",
            f"order N: {self.N}",
            f"anchor s0: {self.phase.s0}",
            f"H0: {self.phase.H0.tolist()}",
            f"delta_prime: {self.delta_prime}",
            f"conjugated: {self.conjugate}",
            f"measured C constant: {self.measured_C():.6f}",
            f"Riccati conservation drift: {self.phase.conservation_drift():.3e}",
        ]
        return "\n".join(lines)


def eval_beam(beam: GaussianBeam, tau, p):
    return beam.eval(tau, p)


def make_beam(chart: FermiChart, V=None, N=4, s0=None, H0=None,
              conjugate=False, chi=None, **riccati_opts):
    """Full pipeline: Riccati, higher phase orders (N+2), amplitudes."""
    if s0 is None:
        lo, hi = chart.geodesic.s_range
        s0 = 0.5 * (lo + hi)
    jet = solve_riccati(chart, s0, H0, **riccati_opts)
    jet = solve_phase_higher(chart, jet, N + 2)
    amp = solve_amplitudes(chart, jet, V, N)
    return GaussianBeam(chart, jet, amp, conjugate=conjugate, chi=chi)


# ---------------------------------------------------------------------------
# residual measurement
# ---------------------------------------------------------------------------

def _embed(arr, n, deg_from, deg_to):
    """Pad cube coefficient arrays (..., (deg_from+1)^n) to a larger degree."""
    pad = [(0, 0)] * (arr.ndim - n) + [(0, deg_to - deg_from)] * n
    return np.pad(arr, pad)


class _ResidualData:
    """tau-independent cubes of the conjugated residual on measurement jets.

    P_V(e^{i tau phi} a) = e^{i tau phi} [tau^2 (Hphi) a - i tau (T a) + P_V a]
    and with a = sum tau^{-k} v_k each bracket term splits by level, so the
    tau-dependence reduces to scalar weights on precomputed cubes.
    """

    def __init__(self, beam: GaussianBeam, jets_m: ChartJets):
        phase, amp = beam.phase, beam.amp
        n = phase.n
        deg = jets_m.deg
        s = phase.s
        dim = n + 1
        self.s = s
        self.n = n
        self.deg = deg

        def cube(arr):
            return PolyCube(n, deg, arr)

        garr = jets_m._sp["ginv"](s)
        G = [[cube(garr[:, k, l] + 0j) for l in range(dim)]
             for k in range(dim)]
        warr = jets_m._sp["w"](s)
        w = [cube(warr[:, l] + 0j) for l in range(dim)]
        if jets_m.V_c is not None:
            Vc = cube(jets_m._sp["V"](s) + 0j)
        else:
            Vc = PolyCube.zeros(n, deg, lead=(len(s),))
        d0 = phase.phi_c.deg
        phi = cube(_embed(phase._sp["phi"](s), n, d0, deg))
        ds = cube(_embed(phase._sp["dsphi"](s), n, d0, deg))
        dds = cube(_embed(phase._sp["ddsphi"](s), n, d0, deg))
        self.phi = phi
        self.rho = cube(jets_m._sp["rho"](s) + 0j)

        dphi = [ds] + [phi.diff(l) for l in range(1, n + 1)]
        # eikonal cube  H(phi) = g^{kl} d_k phi d_l phi
        Hphi = PolyCube.zeros(n, deg, lead=(len(s),))
        for k in range(dim):
            for l in range(k, dim):
                fac = 1.0 if k == l else 2.0
                Hphi = Hphi + G[k][l].mulp(dphi[k]).mulp(dphi[l]).scaled(fac)
        # transport coefficients and box phi
        E = []
        for l in range(dim):
            acc = PolyCube.zeros(n, deg, lead=(len(s),))
            for k in range(dim):
                acc = acc + G[k][l].mulp(dphi[k])
            E.append(acc.scaled(2.0))
        box = G[0][0].mulp(dds)
        for l in range(1, n + 1):
            box = box + G[0][l].mulp(ds.diff(l)).scaled(2.0)
        for k in range(1, n + 1):
            for l in range(k, n + 1):
                fac = 1.0 if k == l else 2.0
                box = box + G[k][l].mulp(phi.diff(k).diff(l)).scaled(fac)
        box = box + w[0].mulp(ds)
        for l in range(1, n + 1):
            box = box + w[l].mulp(dphi[l])
        boxphi = box.scaled(-1.0)

        def box_of(v, dsv, ddsv):
            out = G[0][0].mulp(ddsv)
            for l in range(1, n + 1):
                out = out + G[0][l].mulp(dsv.diff(l)).scaled(2.0)
            for k in range(1, n + 1):
                for l in range(k, n + 1):
                    fac = 1.0 if k == l else 2.0
                    out = out + G[k][l].mulp(v.diff(k).diff(l)).scaled(fac)
            out = out + w[0].mulp(dsv)
            for l in range(1, n + 1):
                out = out + w[l].mulp(v.diff(l))
            return out.scaled(-1.0)

        self.levels = []
        for k in range(amp.N + 1):
            vk = cube(_embed(amp._v_sp[k](s), n, d0, deg))
            dsvk = cube(_embed(amp._dsv_sp[k](s), n, d0, deg))
            ddsvk = cube(_embed(amp._ddsv_sp[k](s), n, d0, deg))
            Tk = E[0].mulp(dsvk)
            for l in range(1, n + 1):
                Tk = Tk + E[l].mulp(vk.diff(l))
            Tk = Tk - boxphi.mulp(vk)
            Pk = box_of(vk, dsvk, ddsvk) + Vc.mulp(vk)
            self.levels.append((Hphi.mulp(vk), Tk, Pk, vk))

    def bracket(self, tau):
        """Residual bracket as a PolyCube (lead = s-lattice)."""
        acc = PolyCube.zeros(self.n, self.deg, lead=(len(self.s),))
        for k, (Hk, Tk, Pk, _) in enumerate(self.levels):
            acc = (acc + Hk.scaled(tau**(2 - k)) + Tk.scaled(-1j * tau**(1 - k))
                   + Pk.scaled(tau**(-k)))
        return acc

    def amp_cube(self, tau):
        acc = PolyCube.zeros(self.n, self.deg, lead=(len(self.s),))
        for k, (_, _, _, vk) in enumerate(self.levels):
            acc = acc + vk.scaled(tau**(-k))
        return acc


def _tensor_grid(half_widths, nw):
    axes = [np.linspace(-w, w, nw) for w in half_widths]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return pts.reshape(-1, len(half_widths)), axes


def beam_residual_scaling(beam: GaussianBeam, V, tau_list, k_norm=0, *,
                          meas_deg=8, meas_r_fit=0.10, meas_hfd=1.5e-3,
                          nw=17, kw=6.0):
    """Grid norms of P_V u_tau over the cutoff plateau, with a log-log fit.

    The residual is evaluated through the conjugation identity on metric jets
    fitted independently of the construction (higher degree, different cloud
    radius and difference step), over a tau-adapted transverse window inside
    the chi = 1 plateau.  The cutoff shell itself only contributes terms of
    size exp(-C tau (delta'/4)^2), which are excluded from the norm and
    documented rather than measured.  H^k norms for k in {1, 2} use the
    surrogate tau^k * L2 (each derivative of the oscillatory factor costs one
    power of tau).
    """
    phase, amp = beam.phase, beam.amp
    n = phase.n
    bchart = phase.bchart
    lo, hi = beam.chart.geodesic.s_range
    njet = max(int(round((hi - lo) / 0.02)) + 1, 8)
    jets_m = ChartJets(bchart, np.linspace(lo, hi, njet), deg=meas_deg,
                       r_fit=meas_r_fit, h_fd=meas_hfd)
    jets_m.attach_potential(V)
    data = _ResidualData(beam, jets_m)
    C = beam.measured_C()
    dprime = beam.delta_prime
    # plateau box in beam coordinates: |z'| <= delta'/4 at the corners
    a0 = dprime / (4 * np.sqrt(n))
    plateau = np.array([2 * a0] + [a0] * (n - 1))
    ds_w = np.gradient(phase.s)
    norms, sups = [], []
    for tau in tau_list:
        half = np.minimum(plateau, kw / np.sqrt(C * tau))
        ypts, axes = _tensor_grid(half, nw)
        cellw = [np.gradient(ax) for ax in axes]
        wy = cellw[0]
        for cw in cellw[1:]:
            wy = np.multiply.outer(wy, cw)
        wy = wy.reshape(-1)
        br = data.bracket(tau).eval_grid(ypts)          # (ns, m)
        imphi = data.phi.eval_grid(ypts).imag
        rho = data.rho.eval_grid(ypts).real
        dens = np.abs(br) ** 2 * np.exp(-2 * tau * imphi) * rho
        l2 = np.sqrt(np.sum(dens * wy[None, :] * ds_w[:, None]))
        norms.append(float(l2) * tau**k_norm)
        # C^0 size of the beam itself over the full tube
        yfull, _ = _tensor_grid([dprime] * n, nw)
        af = data.amp_cube(tau).eval_grid(yfull)
        imf = data.phi.eval_grid(yfull).imag
        znorm = np.linalg.norm(yfull * bchart.scale, axis=-1)
        cut = beam.chi(znorm / dprime)
        sups.append(float(np.max(np.abs(af) * np.exp(-tau * imf)
                                 * cut[None, :])))
    logs = np.log(np.asarray(tau_list, dtype=float))
    logn = np.log(np.asarray(norms))
    A = np.stack([logs, np.ones_like(logs)], axis=1)
    coef, *_ = np.linalg.lstsq(A, logn, rcond=None)
    fitres = float(np.sqrt(np.mean((A @ coef - logn) ** 2)))
    return {
        "slope": float(coef[0]),
        "fit_residual": fitres,
        "tau": list(tau_list),
        "norms": norms,
        "sup_u": sups,
    }
