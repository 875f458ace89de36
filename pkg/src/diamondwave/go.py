"""Geometric-optics wave packets on Minkowski space.

The packet is u_tau = e^{i tau xi.x} sum_k a_k tau^{-k} with a light-like
covector xi and amplitudes supported in a hypercube tube around the flow of
T_xi = -xi_0 d_t + xi' . d_x'.  Amplitudes are built on a flow-adapted grid
(s, w0, w_transverse) where T_xi = d_s exactly and the wave operator becomes
(2/|xi_0|) d_s d_w0 + Lap_w, so the transport recursion

    a_k(s) = (1/2i) int_0^s ((box + V) a_{k-1}) ds~

is a cumulative quadrature plus transverse stencils — no oscillatory
finite differences anywhere.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import RegularGridInterpolator

try:
    from scipy.integrate import cumulative_simpson
except ImportError:  # older scipy
    cumulative_simpson = None
from scipy.integrate import cumulative_trapezoid


class GOError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# cutoff profiles


def chi_bump(u):
    """exp(1 - 1/(1-u^2)) on (-1,1); equals 1 at 0."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    m = np.abs(u) < 1
    out[m] = np.exp(1.0 - 1.0 / (1.0 - u[m] ** 2))
    return out


def chi_indicator(m):
    """Mollified-indicator family: C^3 smoothstep shoulder of width ~1/m.

    chi^(m) -> 1_(-1,1) pointwise as m -> infinity; chi^(m)(0)=1 for m >= 1.
    """
    def chi(u):
        u = np.asarray(u, dtype=float)
        x = np.clip((1.0 - np.abs(u)) * m + 0.5, 0.0, 1.0)
        return x**4 * (35 - 84 * x + 70 * x**2 - 20 * x**3)
    return chi


def resolve_chi(spec):
    if spec == "bump" or spec is None:
        return chi_bump
    if callable(spec):
        return spec
    if isinstance(spec, tuple) and spec[0] == "indicator":
        return chi_indicator(spec[1])
    raise GOError(f"unknown cutoff profile {spec!r}")


# ---------------------------------------------------------------------------
# stencils (6th order, zero extension — amplitudes vanish near grid edges)


_D1_6 = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0
_D2_6 = np.array([2.0, -27.0, 270.0, -490.0, 270.0, -27.0, 2.0]) / 180.0
_OFF_6 = np.arange(-3, 4)


def _deriv(u, h, axis, order):
    coef = _D1_6 if order == 1 else _D2_6
    out = np.zeros_like(u)
    for c, off in zip(coef, _OFF_6):
        if c == 0.0:
            continue
        out += c * _shift(u, off, axis)
    return out / h**order


def _shift(u, off, ax):
    if off == 0:
        return u.copy()
    out = np.zeros_like(u)
    src = [slice(None)] * u.ndim
    dst = [slice(None)] * u.ndim
    if off > 0:
        src[ax] = slice(off, None)
        dst[ax] = slice(None, -off)
    else:
        src[ax] = slice(None, off)
        dst[ax] = slice(-off, None)
    out[tuple(dst)] = u[tuple(src)]
    return out


# ---------------------------------------------------------------------------
# packet


class GOPacket:
    """Hypercube-supported geometric-optics packet of depth N."""

    def __init__(self, n, q, xi, delta, V=None, N=2, chi="bump",
                 s_range=(-1.0, 1.0), ns=601, nw=49, r_aperture=None):
        self.n = int(n)
        self.q = np.asarray(q, dtype=float)
        self.xi = np.asarray(xi, dtype=float)
        if abs(self.xi[0] ** 2 - np.sum(self.xi[1:] ** 2)) > 1e-12 * max(self.xi @ self.xi, 1e-30):
            raise GOError("covector is not light-like")
        if abs(self.xi[0]) < 1e-14:
            raise GOError("xi_0 must be nonzero")
        self.delta = float(delta)
        self.N = int(N)
        self.chi = resolve_chi(chi)
        self.warnings = []
        if r_aperture is not None and self.delta * np.sqrt(n) > r_aperture:
            self.warnings.append(
                f"support hypercube (half-diag {self.delta * np.sqrt(n):.3g}) "
                f"exceeds aperture radius {r_aperture:.3g}")

        self._build_frames()
        self._build_grid(s_range, ns, nw)
        self._build_amplitudes(V)

    # -- coordinates ------------------------------------------------------

    def _build_frames(self):
        n, xi = self.n, self.xi
        xi0 = xi[0]
        xip = xi[1:]
        # orthonormal transverse directions omega'_j perp xi'
        basis = [xip / np.linalg.norm(xip)]
        for cand in np.eye(n):
            w = cand - sum((cand @ b) * b for b in basis)
            nrm = np.linalg.norm(w)
            if nrm > 1e-8:
                basis.append(w / nrm)
            if len(basis) == n:
                break
        self.omegas = basis[1:]

        dim = n + 1
        L = np.zeros((dim, dim))
        L[0] = np.concatenate([[-xi0], xip]) / (2 * xi0 * xi0)      # s row
        L[1] = xi / abs(xi0)                                        # w0 row
        for j, om in enumerate(self.omegas):
            L[2 + j] = np.concatenate([[0.0], om])
        self.L = L
        self.Linv = np.linalg.inv(L)
        # wave operator in flow coordinates: M = L eta^{-1} L^T
        eta_inv = np.diag([-1.0] + [1.0] * n)
        M = L @ eta_inv @ L.T
        self.c_mixed = M[0, 1]          # = 1/|xi0|
        # sanity: the flow-coordinate operator must be 2c d_s d_w0 + Lap_w
        check = M.copy()
        check[0, 1] = check[1, 0] = 0.0
        check[2:, 2:] -= np.eye(dim - 2)
        if np.max(np.abs(check)) > 1e-10:
            raise GOError("flow-coordinate reduction failed (non-null covector?)")

    def to_flow(self, x):
        """Map spacetime points (..., 1+n) to flow coordinates (s, w0, w...)."""
        x = np.asarray(x, dtype=float)
        return (x - self.q) @ self.L.T

    def from_flow(self, y):
        y = np.asarray(y, dtype=float)
        return y @ self.Linv.T + self.q

    def flow_point(self, s):
        """The flow line through q: s maps to q + s * (flow direction)."""
        return np.asarray(s)[..., None] * self.Linv[:, 0] + self.q

    # -- amplitude grid ---------------------------------------------------

    def _build_grid(self, s_range, ns, nw):
        ext = 1.25 * self.delta
        self.s_grid = np.linspace(s_range[0], s_range[1], ns)
        self.w_grid = np.linspace(-ext, ext, nw)
        self._axes = (self.s_grid,) + (self.w_grid,) * self.n
        self.hs = self.s_grid[1] - self.s_grid[0]
        self.hw = self.w_grid[1] - self.w_grid[0]
        # index of s=0 (anchor hyperplane Sigma_{q,xi}); require it on-grid
        i0 = np.argmin(np.abs(self.s_grid))
        if abs(self.s_grid[i0]) > 1e-9:
            raise GOError("s-grid must contain s=0 (vanishing data hyperplane)")
        self.i_s0 = int(i0)

    def _build_amplitudes(self, V):
        shape = (len(self.s_grid),) + (len(self.w_grid),) * self.n
        W = np.meshgrid(*self._axes[1:], indexing="ij")
        a0_slice = np.ones(W[0].shape)
        for wj in W:
            a0_slice = a0_slice * self.chi(wj / self.delta)
        a0 = np.broadcast_to(a0_slice, shape).copy()
        self.amps = [a0.astype(complex)]

        if self.N > 0:
            if V is None:
                Vgrid = 0.0
            else:
                pts = self._grid_points()
                Vgrid = np.asarray(V(pts))
            for k in range(1, self.N + 1):
                self.amps.append(self._transport(self.amps[-1], Vgrid))

        self._interps = [
            RegularGridInterpolator(self._axes, a, bounds_error=False,
                                    fill_value=0.0)
            for a in self.amps
        ]

    def _grid_points(self):
        mesh = np.meshgrid(*self._axes, indexing="ij")
        y = np.stack(mesh, axis=-1)
        return self.from_flow(y)

    def _cumint(self, F):
        """int_0^s F ds~ along axis 0, anchored at the s=0 grid index."""
        F = np.asarray(F)
        if np.iscomplexobj(F):  # scipy's cumulative rules are real-only
            return self._cumint(F.real) + 1j * self._cumint(F.imag)
        if cumulative_simpson is not None:
            cs = np.concatenate([np.zeros((1,) + F.shape[1:], dtype=F.dtype),
                                 cumulative_simpson(F, dx=self.hs, axis=0)])
        else:
            cs = np.concatenate([np.zeros((1,) + F.shape[1:], dtype=F.dtype),
                                 cumulative_trapezoid(F, dx=self.hs, axis=0)])
        return cs - cs[self.i_s0]

    def _transport(self, a_prev, Vgrid):
        """a_k from a_{k-1} per the integrated transport recursion."""
        # mixed term integrates exactly: int d_s d_w0 a = d_w0 a(s) - d_w0 a(0)
        dw0 = _deriv(a_prev, self.hw, 1, order=1)
        mixed = 2.0 * self.c_mixed * (dw0 - dw0[self.i_s0])
        lap = np.zeros_like(a_prev)
        for ax in range(2, self.n + 1):
            lap += _deriv(a_prev, self.hw, ax, order=2)
        rest = self._cumint(lap + Vgrid * a_prev)
        return (mixed + rest) / 2j

    # -- evaluation -------------------------------------------------------

    def amplitude(self, k, x):
        """a_k at spacetime points x (..., 1+n); scalar in, scalar out."""
        x = np.asarray(x, dtype=float)
        out = self._interps[k](self.to_flow(x))
        return out[0] if x.ndim == 1 else out

    def amplitude_sum(self, tau, x):
        x = np.asarray(x, dtype=float)
        y = self.to_flow(x)
        total = 0.0
        for k, interp in enumerate(self._interps):
            total = total + interp(y) * tau ** (-k)
        return total[0] if x.ndim == 1 else total

    def phase(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.xi

    def eval(self, tau, x):
        """The full ansatz e^{i tau xi.x} sum_k a_k / tau^k."""
        return np.exp(1j * tau * self.phase(x)) * self.amplitude_sum(tau, x)

    # -- diagnostics ------------------------------------------------------

    def transport_defect_grids(self, V=None):
        """Per-level defect fields d_k = -2i d_s a_k + (box + V) a_{k-1}.

        d_0 = -2i d_s a_0 (zero in exact arithmetic).  Derivatives by the
        build stencils on the amplitude grid; used for honest residuals.
        """
        if V is None:
            Vgrid = 0.0
        else:
            Vgrid = np.asarray(V(self._grid_points()))
        defects = [-2j * _deriv(self.amps[0], self.hs, 0, order=1)]
        for k in range(1, self.N + 1):
            ds = _deriv(self.amps[k], self.hs, 0, order=1)
            box = self._box_amp(self.amps[k - 1])
            defects.append(-2j * ds + box + Vgrid * self.amps[k - 1])
        return defects

    def _box_amp(self, a):
        dsw0 = _deriv(_deriv(a, self.hs, 0, order=1), self.hw, 1, order=1)
        out = 2.0 * self.c_mixed * dsw0
        for ax in range(2, self.n + 1):
            out += _deriv(a, self.hw, ax, order=2)
        return out

    def residual_sup(self, tau, V=None):
        """sup_grid |(box + V) u_tau| via the conjugation identity."""
        cached = getattr(self, "_res_cache", None)
        if cached is None or cached[0] is not V:
            defects = self.transport_defect_grids(V)
            if V is None:
                VgridN = 0.0
            else:
                VgridN = np.asarray(V(self._grid_points()))
            boxN = self._box_amp(self.amps[self.N]) + VgridN * self.amps[self.N]
            cached = (V, defects, boxN)
            self._res_cache = cached
        _, defects, boxN = cached
        total = tau * defects[0]
        for k in range(1, self.N + 1):
            total = total + tau ** (1 - k) * defects[k]
        total = total + tau ** (-self.N) * boxN
        # trim the stencil-width margin where zero-fill pollutes derivatives
        sl = (slice(4, -4),) * total.ndim
        return float(np.max(np.abs(total[sl])))


def residual_scaling(packet: GOPacket, V, tau_list):
    """Log-log slope fit of sup |(box+V)u_tau| over tau; returns (slope,
    fit residual, sup values)."""
    taus = np.asarray(tau_list, dtype=float)
    sups = np.array([packet.residual_sup(t, V) for t in taus])
    logt, logr = np.log(taus), np.log(sups)
    A = np.vstack([logt, np.ones_like(logt)]).T
    coef, res, *_ = np.linalg.lstsq(A, logr, rcond=None)
    fitres = float(np.sqrt(res[0] / len(taus))) if res.size else 0.0
    return float(coef[0]), fitres, sups
