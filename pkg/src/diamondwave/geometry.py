"""Lorentzian metrics in 1+n split form, causal structure and null geodesics.

Points are numpy arrays (t, x1..xn); covectors and vectors are plain arrays
whose index position is tracked by the caller (`sharp`/`flat` convert).
All metric evaluations are batched: x may have shape (..., 1+n).
"""

from __future__ import annotations

import numpy as np

from .exprs import ScalarField


class GeometryError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics


class Metric:
    """Base class: pseudo-Riemannian metric with signature (-,+,...,+)."""

    kind = "abstract"

    def __init__(self, n: int):
        if n not in (1, 2, 3):
            raise GeometryError(f"spatial dimension n={n} unsupported")
        self.n = n
        self.dim = n + 1

    def matrix(self, x):
        raise NotImplementedError

    def dmatrix(self, x):
        """Partial derivatives d_k g_ij, shape (..., 1+n, 1+n, 1+n), index [k,i,j]."""
        raise NotImplementedError

    def inverse(self, x):
        g = self.matrix(x)
        try:
            return np.linalg.inv(g)
        except np.linalg.LinAlgError:
            raise GeometryError("degenerate metric at point") from None

    def inner(self, x, v, w):
        g = self.matrix(x)
        return np.einsum("...ij,...i,...j->...", g, v, w)

    def sqrt_abs_det(self, x):
        return np.sqrt(np.abs(np.linalg.det(self.matrix(x))))

    def christoffel(self, x):
        """Christoffel symbols of the second kind, shape (..., k, i, j)."""
        ginv = self.inverse(x)
        dg = self.dmatrix(x)
        # Gamma^k_ij = 1/2 g^{kl} (d_i g_lj + d_j g_li - d_l g_ij)
        term = (np.einsum("...ilj->...lij", dg)
                + np.einsum("...jli->...lij", dg)
                - dg)
        gam = 0.5 * np.einsum("...kl,...lij->...kij", ginv, term)
        if not np.all(np.isfinite(gam)):
            raise GeometryError("non-finite metric derivatives")
        return gam

    def check_signature(self, x):
        w = np.linalg.eigvalsh(self.matrix(x))
        neg = np.sum(w < 0, axis=-1)
        pos = np.sum(w > 0, axis=-1)
        if not (np.all(neg == 1) and np.all(pos == self.n)):
            raise GeometryError("metric signature is not (-,+,...,+)")


class MinkowskiMetric(Metric):
    kind = "minkowski"

    def __init__(self, n: int = 2):
        super().__init__(n)
        self._eta = np.diag([-1.0] + [1.0] * n)

    def matrix(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self._eta, x.shape[:-1] + (self.dim, self.dim)).copy()

    def inverse(self, x):
        return self.matrix(x)

    def dmatrix(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.dim,) * 3)

    def christoffel(self, x):
        return self.dmatrix(x)


class SplitMetric(Metric):
    """Metric of the form -beta(t,x') dt^2 + g(t,x') on R x R^n.

    `beta` maps (...,1+n) -> (...); `gmat` maps (...,1+n) -> (...,n,n).
    Analytic derivative closures may be supplied; otherwise central finite
    differences with step `h_g` are used.
    """

    kind = "split"

    def __init__(self, n, beta, gmat, dbeta=None, dgmat=None, h_g=1e-5):
        super().__init__(n)
        self.beta = beta
        self.gmat = gmat
        self._dbeta = dbeta
        self._dgmat = dgmat
        self.h_g = h_g

    @classmethod
    def from_expressions(cls, n, beta_text, g_texts):
        """Build from the config expression grammar.

        g_texts is an n x n nested list of expression strings.
        """
        beta_f = ScalarField.from_text(beta_text, n)
        g_f = [[ScalarField.from_text(g_texts[i][j], n) for j in range(n)]
               for i in range(n)]

        def beta(x):
            return beta_f(x)

        def gmat(x):
            x = np.asarray(x, dtype=float)
            out = np.empty(x.shape[:-1] + (n, n))
            for i in range(n):
                for j in range(n):
                    out[..., i, j] = g_f[i][j](x)
            return out

        def dbeta(x):
            return beta_f.gradient(x)

        def dgmat(x):
            x = np.asarray(x, dtype=float)
            out = np.empty(x.shape[:-1] + (n + 1, n, n))
            for i in range(n):
                for j in range(n):
                    out[..., :, i, j] = g_f[i][j].gradient(x)
            return out

        return cls(n, beta, gmat, dbeta=dbeta, dgmat=dgmat)

    def matrix(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.dim, self.dim))
        out[..., 0, 0] = -self.beta(x)
        out[..., 1:, 1:] = self.gmat(x)
        return out

    def dmatrix(self, x):
        x = np.asarray(x, dtype=float)
        if self._dbeta is not None and self._dgmat is not None:
            db = self._dbeta(x)
            dg = self._dgmat(x)
            out = np.zeros(x.shape[:-1] + (self.dim,) * 3)
            out[..., :, 0, 0] = -db
            out[..., :, 1:, 1:] = dg
            return out
        # finite differences of the full matrix
        h = self.h_g
        out = np.empty(x.shape[:-1] + (self.dim,) * 3)
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = h
            out[..., k, :, :] = (self.matrix(x + e) - self.matrix(x - e)) / (2 * h)
        return out

    def max_wavespeed(self, points):
        """sup over sample points of the coordinate light speed, for CFL."""
        beta = np.asarray(self.beta(points))
        g = self.gmat(points)
        lam_min = np.linalg.eigvalsh(g)[..., 0]
        return float(np.sqrt(np.max(beta / lam_min)))


def minkowski(n: int = 2) -> MinkowskiMetric:
    return MinkowskiMetric(n)


# ---------------------------------------------------------------------------
# index gymnastics


def sharp(metric: Metric, p, xi):
    """Raise the index of a covector: result^i = g^{ij} xi_j."""
    return np.einsum("...ij,...j->...i", metric.inverse(p), np.asarray(xi, dtype=float))


def flat(metric: Metric, p, v):
    """Lower the index of a vector: result_i = g_{ij} v^j."""
    return np.einsum("...ij,...j->...i", metric.matrix(p), np.asarray(v, dtype=float))


def is_null(metric: Metric, p, v, tol=1e-10):
    v = np.asarray(v, dtype=float)
    scale = max(np.max(np.abs(v)) ** 2, 1e-300)
    return abs(float(metric.inner(p, v, v))) <= tol * scale


# ---------------------------------------------------------------------------
# geodesics


class NullGeodesic:
    """Sampled null geodesic with cubic Hermite interpolation.

    Samples are (s_i, gamma(s_i), gammadot(s_i)); accelerations are stored to
    interpolate the velocity smoothly as well.
    """

    def __init__(self, metric, s, x, xdot, xddot, null_defect, truncated=False):
        self.metric = metric
        self.s = s
        self.x = x
        self.xdot = xdot
        self.xddot = xddot
        self.null_defect = null_defect
        self.truncated = truncated

    @property
    def s_range(self):
        return (self.s[0], self.s[-1])

    def _locate(self, sq):
        sq = np.asarray(sq, dtype=float)
        idx = np.clip(np.searchsorted(self.s, sq) - 1, 0, len(self.s) - 2)
        h = self.s[idx + 1] - self.s[idx]
        u = (sq - self.s[idx]) / h
        return idx, h, u

    @staticmethod
    def _hermite(u, h, f0, f1, d0, d1):
        u = u[..., None]
        h00 = 2 * u**3 - 3 * u**2 + 1
        h10 = u**3 - 2 * u**2 + u
        h01 = -2 * u**3 + 3 * u**2
        h11 = u**3 - u**2
        return h00 * f0 + h10 * h[..., None] * d0 + h01 * f1 + h11 * h[..., None] * d1

    def point(self, sq):
        idx, h, u = self._locate(sq)
        return self._hermite(u, h, self.x[idx], self.x[idx + 1],
                             self.xdot[idx], self.xdot[idx + 1])

    def velocity(self, sq):
        idx, h, u = self._locate(sq)
        return self._hermite(u, h, self.xdot[idx], self.xdot[idx + 1],
                             self.xddot[idx], self.xddot[idx + 1])

    def __call__(self, sq):
        return self.point(sq)


def _geodesic_rhs(metric, x, xdot):
    gam = metric.christoffel(x)
    acc = -np.einsum("...kij,...i,...j->...k", gam, xdot, xdot)
    return acc


def _rk4_geodesic(metric, x0, v0, s0, s1, nsteps):
    """Batched fixed-step RK4 for the geodesic equation. x0,v0: (...,1+n)."""
    h = (s1 - s0) / nsteps
    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    xs = [x.copy()]
    vs = [v.copy()]
    for _ in range(nsteps):
        a1 = _geodesic_rhs(metric, x, v)
        k1x, k1v = v, a1
        a2 = _geodesic_rhs(metric, x + 0.5 * h * k1x, v + 0.5 * h * k1v)
        k2x, k2v = v + 0.5 * h * k1v, a2
        a3 = _geodesic_rhs(metric, x + 0.5 * h * k2x, v + 0.5 * h * k2v)
        k3x, k3v = v + 0.5 * h * k2v, a3
        a4 = _geodesic_rhs(metric, x + h * k3x, v + h * k3v)
        k4x, k4v = v + h * k3v, a4
        x = x + (h / 6) * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + (h / 6) * (k1v + 2 * k2v + 2 * k3v + k4v)
        xs.append(x.copy())
        vs.append(v.copy())
    return np.array(xs), np.array(vs)


def integrate_null_geodesic(metric, p, v, s_range, steps_per_unit=200,
                            max_refine=4):
    """Integrate the null geodesic through (p, v) over s in [a, b].

    Classical RK4 with a fixed step; the step is halved (up to `max_refine`
    times) while the null defect sup |<gdot,gdot>| exceeds 1e-9.
    """
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    if not is_null(metric, p, v):
        raise GeometryError("initial direction not light-like")
    if v[0] <= 0:
        raise GeometryError("initial direction not future-pointing (v^0 <= 0)")
    a, b = float(s_range[0]), float(s_range[1])
    span = b - a
    if span <= 0:
        raise GeometryError("empty parameter range")

    nsteps = max(8, int(np.ceil(span * steps_per_unit)))
    for _ in range(max_refine + 1):
        # integrate forward from s=0 towards both ends (p sits at s=0)
        nf = max(1, int(round(nsteps * max(b, 0) / span))) if b > 0 else 0
        nb = max(1, int(round(nsteps * max(-a, 0) / span))) if a < 0 else 0
        xs_f, vs_f = (_rk4_geodesic(metric, p, v, 0.0, b, nf)
                      if nf else (p[None], v[None]))
        xs_b, vs_b = (_rk4_geodesic(metric, p, -v, 0.0, -a, nb)
                      if nb else (p[None], v[None]))
        s_f = np.linspace(0.0, b, nf + 1) if nf else np.array([0.0])
        s_b = -np.linspace(0.0, -a, nb + 1) if nb else np.array([0.0])
        s = np.concatenate([s_b[::-1][:-1], s_f])
        x = np.concatenate([xs_b[::-1][:-1], xs_f])
        xdot = np.concatenate([-vs_b[::-1][:-1], vs_f])
        defect = np.abs(np.einsum("...ij,...i,...j->...",
                                  metric.matrix(x), xdot, xdot))
        defect = float(np.max(defect)) / max(float(np.max(np.abs(xdot))) ** 2, 1e-300)
        if defect <= 1e-9 or metric.kind == "minkowski":
            break
        nsteps *= 2

    if not np.all(np.isfinite(x)):
        good = np.all(np.isfinite(x), axis=-1) & np.all(np.isfinite(xdot), axis=-1)
        last = np.argmin(good) if not np.all(good) else len(s)
        s, x, xdot = s[:last], x[:last], xdot[:last]
        truncated = True
    else:
        truncated = False

    xddot = _geodesic_rhs(metric, x, xdot)
    return NullGeodesic(metric, s, x, xdot, xddot, defect, truncated=truncated)


def geodesic_residual(geo: NullGeodesic):
    """Max geodesic-equation residual at sample midpoints (central differences)."""
    s = geo.s
    mid = 0.5 * (s[:-1] + s[1:])
    h = np.minimum(np.diff(s), 1e-3) * 0.5
    xm = geo.point(mid)
    vm = (geo.point(mid + h) - geo.point(mid - h)) / (2 * h[:, None])
    am = (geo.point(mid + h) - 2 * xm + geo.point(mid - h)) / (h[:, None] ** 2)
    gam = geo.metric.christoffel(xm)
    res = am + np.einsum("...kij,...i,...j->...k", gam, vm, vm)
    return float(np.max(np.abs(res)))


# ---------------------------------------------------------------------------
# wave operator


_D1_4 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0  # 4th order first derivative
_OFF = np.array([-2, -1, 0, 1, 2])


def dalembertian(metric: Metric, u, p, h_op=1e-2):
    """Coordinate d'Alembertian -|g|^{-1/2} d_i (|g|^{1/2} g^{ij} d_j u) at p.

    `u` is a scalar closure on (1+n)-points; derivatives are 4th-order
    central differences with step h_op.
    """
    p = np.asarray(p, dtype=float)
    dim = metric.dim

    def flux(xpts):
        # F_i(x) = |g|^{1/2} g^{ij} d_j u(x), batched over leading axes
        xpts = np.asarray(xpts, dtype=float)
        du = np.empty(xpts.shape)
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = h_op
            vals = np.stack([u(xpts + k * e) for k in _OFF], axis=-1)
            du[..., j] = vals @ _D1_4 / h_op
        ginv = metric.inverse(xpts)
        sq = metric.sqrt_abs_det(xpts)[..., None]
        return sq * np.einsum("...ij,...j->...i", ginv, du)

    total = 0.0
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = h_op
        pts = p[None, :] + _OFF[:, None] * e[None, :]
        fi = flux(pts)[:, i]
        total += float(fi @ _D1_4) / h_op
    val = -total / float(metric.sqrt_abs_det(p))
    if not np.isfinite(val):
        raise GeometryError("non-finite derivative samples in dalembertian")
    return val


# ---------------------------------------------------------------------------
# causal structure (Minkowski helpers + desk-scale split shooting)


def causal_diamond_contains(r, T, p):
    """Membership in D = J+(mho) cap J-(mho) for mho = (0,T) x B(0,r), Minkowski."""
    p = np.asarray(p, dtype=float)
    t = p[0]
    rad = float(np.linalg.norm(p[1:]))
    if not (0.0 < t < T):
        return False
    return rad <= r + t and rad <= r + T - t


def in_mho(r, T, p):
    p = np.asarray(p, dtype=float)
    return (0.0 < p[0] < T) and float(np.linalg.norm(p[1:])) < r


def time_separation(metric: Metric, p, q, shoot_kwargs=None):
    """Time separation tau(p, q) = sup length of future causal curves p -> q.

    Minkowski: closed form. Split metrics: desk-scale geodesic shooting
    (coarse polar screening + Nelder-Mead refinement); no caustic handling.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if metric.kind == "minkowski":
        dt = q[0] - p[0]
        dx = float(np.linalg.norm(q[1:] - p[1:]))
        if dt < dx:  # not causally related (or past-directed)
            return 0.0
        return float(np.sqrt(max(dt * dt - dx * dx, 0.0)))
    return _time_separation_split(metric, p, q, **(shoot_kwargs or {}))


def _propagate_to_time(metric, p, u, t_target, nsteps=160):
    """Integrate a geodesic from (p,u) until coordinate time t_target."""
    # parameter duration estimate: dt/ds = u^0 approx constant at desk scale
    span = (t_target - p[0]) / u[0]
    for _ in range(3):
        xs, vs = _rk4_geodesic(metric, p, u, 0.0, span, nsteps)
        t_end = xs[-1, 0]
        du = vs[-1, 0]
        if abs(t_end - t_target) < 1e-10:
            break
        span += (t_target - t_end) / du
    return xs[-1], vs[-1], span


def _time_separation_split(metric, p, q, nsteps=160, polar=16, xtol=1e-8):
    from scipy import optimize

    if q[0] <= p[0]:
        return 0.0
    n = metric.n
    beta_p = float(metric.beta(p))
    g_p = metric.gmat(p)

    def initial_u(w):
        w = np.asarray(w, dtype=float)
        u0 = np.sqrt((1.0 + w @ g_p @ w) / beta_p)
        return np.concatenate([[u0], w])

    def endpoint_miss(w):
        x_end, _, span = _propagate_to_time(metric, p, initial_u(w), q[0], nsteps)
        return x_end[1:] - q[1:], span

    # Minkowski-style initial guess
    dt = q[0] - p[0]
    dxv = q[1:] - p[1:]
    dx = float(np.linalg.norm(dxv))
    if dt * dt - dx * dx <= 0:
        # desk scale: mildly perturbed metrics do not open the light cone wide
        margin = 0.05 * (dt * dt + dx * dx)
        if dx * dx - dt * dt > margin:
            return 0.0
    tau0 = np.sqrt(max(dt * dt - dx * dx, 1e-6))
    w0 = dxv / tau0

    candidates = [w0]
    if n >= 2:
        # coarse polar screen around the straight-line guess
        for ang in np.linspace(0, 2 * np.pi, polar, endpoint=False):
            d = np.zeros(n)
            d[0], d[1] = np.cos(ang), np.sin(ang)
            candidates.append(w0 + 0.2 * np.linalg.norm(w0 + 1e-9) * d)

    best = None
    for w in candidates:
        sol = optimize.least_squares(lambda ww: endpoint_miss(ww)[0], w,
                                     xtol=xtol, ftol=1e-12, gtol=1e-12)
        if best is None or sol.cost < best.cost:
            best = sol
        if sol.cost < 1e-16:
            break
    miss, span = endpoint_miss(best.x)
    if np.linalg.norm(miss) > 1e-5 * max(1.0, dx):
        raise GeometryError(
            f"time_separation shooting failed to bracket (miss={np.linalg.norm(miss):.2e})")
    # refine span via Nelder-Mead on the proper time? proper time = span for
    # unit-normalized velocity; negative norm drift is below desk tolerance.
    return max(float(span), 0.0)
