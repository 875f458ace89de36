"""Finite-difference solver for box u + V u + u^3 = f on Minkowski/split metrics.

Leapfrog in time (second order), 4th-order spatial Laplacian on Minkowski and
the divergence-form variable-coefficient operator on split metrics.  The
discrete wave operator is exposed separately (`apply_wave_operator`) using the
*same* stencils, so that applying it to a computed solution returns the source
to rounding error.  Boundaries are handled by padding the domain so that the
light cone of the source never reaches the edge (free space up to machine
precision inside the causal diamond).
"""

from __future__ import annotations

import struct

import numpy as np

from .geometry import Metric, MinkowskiMetric


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# grid


class Grid:
    """Uniform space-time grid: t_m = m*dt on [0,T], x_i = lo + j*h per axis."""

    def __init__(self, n, lo, shape, h, dt, T):
        self.n = int(n)
        self.lo = np.asarray(lo, dtype=float)
        self.shape = tuple(int(s) for s in shape)
        if len(self.shape) != self.n or len(self.lo) != self.n:
            raise SolverError("grid shape/origin rank mismatch")
        self.h = float(h)
        self.dt = float(dt)
        self.T = float(T)
        self.nt = int(round(self.T / self.dt)) + 1
        if abs((self.nt - 1) * self.dt - self.T) > 1e-9 * max(self.T, 1.0):
            raise SolverError("T is not an integer number of time steps")

    @classmethod
    def for_ball(cls, n, radius, T, h, dt, pad=None):
        """Grid covering B(0, radius) plus finite-speed padding out to time T."""
        if pad is None:
            pad = T + 2 * h
        half = radius + pad
        m = int(np.ceil(half / h))
        lo = -m * h * np.ones(n)
        return cls(n, lo, (2 * m + 1,) * n, h, dt, T)

    def axis(self, i):
        return self.lo[i] + self.h * np.arange(self.shape[i])

    def times(self):
        return self.dt * np.arange(self.nt)

    def meshgrid(self):
        return np.meshgrid(*[self.axis(i) for i in range(self.n)], indexing="ij")

    def spacetime_slice(self, m):
        """Points (t_m, x') of slice m, shape (*shape, 1+n)."""
        X = self.meshgrid()
        out = np.empty(self.shape + (self.n + 1,))
        out[..., 0] = m * self.dt
        for i in range(self.n):
            out[..., 1 + i] = X[i]
        return out

    def check_cfl(self, wavespeed=1.0):
        limit = 0.5 * self.h / (np.sqrt(self.n) * wavespeed)
        if self.dt > limit * (1 + 1e-12):
            raise SolverError(
                f"CFL violated: dt={self.dt:g} > {limit:g}")

    def cell_volume(self):
        return self.h ** self.n

    def same_layout(self, other):
        return (self.n == other.n and self.shape == other.shape
                and np.allclose(self.lo, other.lo)
                and abs(self.h - other.h) < 1e-14 and abs(self.dt - other.dt) < 1e-14)


class GridField:
    """Time-sliced field on a Grid; array shape (nt, *grid.shape)."""

    def __init__(self, grid: Grid, data, name=""):
        self.grid = grid
        self.data = np.asarray(data)
        if self.data.shape != (grid.nt,) + grid.shape:
            raise SolverError(f"field shape {self.data.shape} does not match grid")
        self.name = name

    @classmethod
    def zeros(cls, grid, dtype=float, name=""):
        return cls(grid, np.zeros((grid.nt,) + grid.shape, dtype=dtype), name=name)

    @classmethod
    def from_closure(cls, grid, func, dtype=float, name=""):
        """Sample a closure u(points) with points of shape (*shape, 1+n)."""
        data = np.empty((grid.nt,) + grid.shape, dtype=dtype)
        for m in range(grid.nt):
            data[m] = func(grid.spacetime_slice(m))
        return cls(grid, data, name=name)

    def copy(self):
        return GridField(self.grid, self.data.copy(), name=self.name)

    def sup_norm(self):
        return float(np.max(np.abs(self.data)))

    def __add__(self, other):
        return GridField(self.grid, self.data + other.data)

    def __sub__(self, other):
        return GridField(self.grid, self.data - other.data)

    def __mul__(self, c):
        return GridField(self.grid, self.data * c)

    __rmul__ = __mul__


# ---------------------------------------------------------------------------
# spatial operators


def laplacian_4th(u, h, n):
    """4th-order Laplacian with zero extension outside the array."""
    out = np.zeros_like(u)
    c = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12.0 * h * h)
    for ax in range(n):
        for k, off in zip(c, (-2, -1, 0, 1, 2)):
            out += k * _shift(u, off, ax)
    return out


def _shift(u, off, ax):
    """Shift with zero fill: result[i] = u[i+off]."""
    if off == 0:
        return u
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


class _SplitCoeffs:
    """Cached divergence-form coefficients for a split metric on one grid."""

    def __init__(self, metric, grid):
        self.metric = metric
        self.grid = grid
        self._cache = {}

    def at_time(self, t):
        key = round(t / (0.5 * self.grid.dt))
        if key in self._cache:
            return self._cache[key]
        pts = self.grid.spacetime_slice(0).copy()
        pts[..., 0] = t
        beta = np.asarray(self.metric.beta(pts))
        g = self.metric.gmat(pts)
        detg = np.linalg.det(g)
        sq = np.sqrt(beta * detg)          # |gbar|^{1/2}
        ginv = np.linalg.inv(g)
        A = sq[..., None, None] * ginv     # flux coefficients |gbar|^{1/2} g^{ij}
        w = sq / beta                      # time-term coefficient |gbar|^{1/2}/beta
        self._cache[key] = (sq, A, w)
        if len(self._cache) > 8:
            self._cache.pop(next(iter(self._cache)))
        return self._cache[key]

    def spatial_term(self, u, t):
        """|gbar|^{-1/2} d_i(A^{ij} d_j u) with conservative diagonal stencils."""
        sq, A, _ = self.at_time(t)
        n, h = self.grid.n, self.grid.h
        out = np.zeros_like(u)
        for i in range(n):
            Aii = A[..., i, i]
            Ap = 0.5 * (Aii + _shift(Aii, 1, i))
            Am = 0.5 * (Aii + _shift(Aii, -1, i))
            out += (Ap * (_shift(u, 1, i) - u) - Am * (u - _shift(u, -1, i))) / (h * h)
            for j in range(n):
                if j == i:
                    continue
                du = (_shift(u, 1, j) - _shift(u, -1, j)) / (2 * h)
                flux = A[..., i, j] * du
                out += (_shift(flux, 1, i) - _shift(flux, -1, i)) / (2 * h)
        return out / sq


# ---------------------------------------------------------------------------
# sources


class SourceTerm:
    """Source f on a grid: dense field, or a per-slice closure f(t, points)."""

    def __init__(self, grid, field=None, closure=None, name=""):
        if (field is None) == (closure is None):
            raise SolverError("provide exactly one of field/closure")
        self.grid = grid
        self.field = field
        self.closure = closure
        self.name = name

    @classmethod
    def from_field(cls, gridfield: GridField, name=""):
        return cls(gridfield.grid, field=gridfield.data, name=name)

    @classmethod
    def from_closure(cls, grid, func, name=""):
        return cls(grid, closure=func, name=name)

    @classmethod
    def zero(cls, grid):
        return cls(grid, closure=lambda t, pts: 0.0, name="zero")

    def slice(self, m):
        if self.field is not None:
            return self.field[m]
        pts = self.grid.spacetime_slice(m)
        val = self.closure(m * self.grid.dt, pts)
        return np.broadcast_to(np.asarray(val), self.grid.shape)

    def scale(self):
        if self.field is not None:
            return float(np.max(np.abs(self.field)))
        samples = [np.max(np.abs(self.slice(m)))
                   for m in range(0, self.grid.nt, max(1, self.grid.nt // 16))]
        return float(max(samples))

    def __mul__(self, c):
        if self.field is not None:
            return SourceTerm(self.grid, field=self.field * c)
        closure = self.closure
        return SourceTerm(self.grid, closure=lambda t, pts: c * closure(t, pts))

    __rmul__ = __mul__

    def __add__(self, other):
        if self.field is not None and other.field is not None:
            return SourceTerm(self.grid, field=self.field + other.field)
        a, b = self, other
        return SourceTerm(self.grid,
                          closure=lambda t, pts: a_slice(a, t, pts) + a_slice(b, t, pts))


def a_slice(src, t, pts):
    m = int(round(t / src.grid.dt))
    return src.slice(m)


# ---------------------------------------------------------------------------
# solver


def _as_potential_slices(V, grid):
    """Normalize V input (None | scalar | closure | GridField) to slice lookup."""
    if V is None:
        return lambda m: 0.0
    if np.isscalar(V):
        v = float(V)
        return lambda m: v
    if isinstance(V, GridField):
        return lambda m: V.data[m]
    # closure on space-time points; potentials are static in most experiments
    # but time dependence is allowed
    cache = {}

    def get(m):
        if m not in cache:
            cache[m] = np.asarray(V(grid.spacetime_slice(m)))
            if len(cache) > 4:
                cache.pop(next(iter(cache)))
        return cache[m]
    return get


def solve_forward(metric, grid, V, f: SourceTerm, nonlinear=False,
                  store="all", observers=(), blowup_factor=1e6):
    """March box u + V u (+ u^3) = f forward with zero Cauchy data at t=0.

    `store`: "all" keeps every slice; "none" keeps only the last three.
    `observers`: callables (m, t, slice) invoked at every accepted slice.
    Returns a GridField ("none" -> field of zeros except final slices).
    """
    return _march(metric, grid, V, f, nonlinear, store, observers,
                  blowup_factor, backward=False)


def solve_backward(metric, grid, V, f: SourceTerm, store="all", observers=()):
    """Solve the linear backward problem with zero data at t=T."""
    return _march(metric, grid, V, f, False, store, observers, 1e6, backward=True)


def _march(metric, grid, V, f, nonlinear, store, observers, blowup_factor,
           backward):
    is_mink = isinstance(metric, MinkowskiMetric) or metric.kind == "minkowski"
    if is_mink:
        grid.check_cfl(1.0)
        coeffs = None
    else:
        sample = grid.spacetime_slice(0)
        grid.check_cfl(metric.max_wavespeed(sample.reshape(-1, grid.n + 1)))
        coeffs = _SplitCoeffs(metric, grid)

    Vs = _as_potential_slices(V, grid)
    dt, nt = grid.dt, grid.nt
    dtype = complex if (f.field is not None and np.iscomplexobj(f.field)) else float
    if f.field is None:
        probe = np.asarray(f.slice(0))
        if np.iscomplexobj(probe):
            dtype = complex

    fscale = max(f.scale(), 1e-300)
    shape = grid.shape

    def time_index(m):
        return (nt - 1 - m) if backward else m

    def pot(m):
        v = Vs(time_index(m))
        return v

    def src(m):
        return f.slice(time_index(m))

    # u[m] in marching order; physical slice index = time_index(m)
    u_prev = np.zeros(shape, dtype=dtype)
    u_curr = np.zeros(shape, dtype=dtype)

    out = np.zeros((nt,) + shape, dtype=dtype) if store == "all" else None

    def emit(m, sl):
        ti = time_index(m)
        if out is not None:
            out[ti] = sl
        for obs in observers:
            obs(ti, ti * dt, sl)

    emit(0, u_prev)
    # first step: u(0)=0, u_t(0)=0 => u(+-dt) = dt^2/2 * u_tt(0); on the zero
    # slice the equation gives u_tt = f (Minkowski) or beta*f (split)
    f0 = src(0).astype(dtype)
    if not is_mink:
        pts0 = grid.spacetime_slice(time_index(0))
        f0 = np.asarray(metric.beta(pts0)) * f0
    u_curr = 0.5 * dt * dt * f0
    emit(1, u_curr)

    for m in range(1, nt - 1):
        t_m = time_index(m) * dt
        if is_mink:
            lap = laplacian_4th(u_curr, grid.h, grid.n)
            rhs = lap - pot(m) * u_curr + src(m)
            if nonlinear:
                rhs = rhs - u_curr ** 3
            u_next = 2 * u_curr - u_prev + dt * dt * rhs
        else:
            S = coeffs.spatial_term(u_curr, t_m)
            sq, _, _ = coeffs.at_time(t_m)
            half = -dt if backward else dt
            _, _, w_p = coeffs.at_time(t_m + 0.5 * half)
            _, _, w_m = coeffs.at_time(t_m - 0.5 * half)
            rhs = S - pot(m) * u_curr + src(m)
            if nonlinear:
                rhs = rhs - u_curr ** 3
            u_next = u_curr + (w_m / w_p) * (u_curr - u_prev) \
                + dt * dt * (sq / w_p) * rhs
        amax = np.max(np.abs(u_next))
        if not np.isfinite(amax) or amax > blowup_factor * fscale:
            raise SolverError("nonlinear solution left smallness regime")
        emit(m + 1, u_next)
        u_prev, u_curr = u_curr, u_next

    if out is None:
        return None
    return GridField(grid, out, name=f.name or "solution")


def apply_wave_operator(metric, grid, V, u: GridField, nonlinear=False):
    """(box + V)u (+u^3 if nonlinear) with the solver's own stencils.

    Defined on interior time slices 1..nt-2; the first and last slices of the
    result are zero.
    """
    is_mink = isinstance(metric, MinkowskiMetric) or metric.kind == "minkowski"
    coeffs = None if is_mink else _SplitCoeffs(metric, grid)
    Vs = _as_potential_slices(V, grid)
    dt = grid.dt
    out = np.zeros_like(u.data)
    for m in range(1, grid.nt - 1):
        um, up, un = u.data[m], u.data[m - 1], u.data[m + 1]
        if is_mink:
            dtt = (un - 2 * um + up) / (dt * dt)
            val = dtt - laplacian_4th(um, grid.h, grid.n) + Vs(m) * um
        else:
            t_m = m * dt
            sq, _, _ = coeffs.at_time(t_m)
            _, _, w_p = coeffs.at_time(t_m + 0.5 * dt)
            _, _, w_m = coeffs.at_time(t_m - 0.5 * dt)
            dtt = (w_p * (un - um) - w_m * (um - up)) / (dt * dt)
            val = dtt / sq - coeffs.spatial_term(um, t_m) + Vs(m) * um
        if nonlinear:
            val = val + um ** 3
        out[m] = val
    return GridField(grid, out, name="wave_operator")


# ---------------------------------------------------------------------------
# integration helpers


def spacetime_integral(grid, *fields):
    """trapezoid-in-t, midpoint-in-x integral of a product of slice arrays."""
    wts = np.ones(grid.nt)
    wts[0] = wts[-1] = 0.5
    total = 0.0
    for m in range(grid.nt):
        prod = wts[m]
        for fld in fields:
            data = fld.data if isinstance(fld, GridField) else fld
            prod = prod * data[m]
        total = total + np.sum(prod)
    return total * grid.dt * grid.cell_volume()


# ---------------------------------------------------------------------------
# snapshot format


_MAGIC = b"BLWV"
_VERSION = 1


def write_snapshot(path, field: GridField):
    """Binary snapshot: header {magic, version u32, n u32, dims, h f64, dt f64},
    f64 payload in t-major order.  Complex fields store re/im as two payloads
    (dims[0] doubled), flagged in the version high bit."""
    g = field.grid
    cplx = np.iscomplexobj(field.data)
    version = _VERSION | (0x80000000 if cplx else 0)
    dims = (g.nt,) + g.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", version, g.n))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<dd", g.h, g.dt))
        fh.write(struct.pack(f"<{g.n}d", *g.lo))
        if cplx:
            np.ascontiguousarray(field.data.real, dtype="<f8").tofile(fh)
            np.ascontiguousarray(field.data.imag, dtype="<f8").tofile(fh)
        else:
            np.ascontiguousarray(field.data, dtype="<f8").tofile(fh)


def read_snapshot(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise SolverError("bad snapshot magic")
        version, n = struct.unpack("<II", fh.read(8))
        cplx = bool(version & 0x80000000)
        dims = struct.unpack(f"<{1 + n}I", fh.read(4 * (1 + n)))
        h, dt = struct.unpack("<dd", fh.read(16))
        lo = struct.unpack(f"<{n}d", fh.read(8 * n))
        count = int(np.prod(dims))
        data = np.fromfile(fh, dtype="<f8", count=count).reshape(dims)
        if cplx:
            imag = np.fromfile(fh, dtype="<f8", count=count).reshape(dims)
            data = data + 1j * imag
    grid = Grid(n, lo, dims[1:], h, dt, (dims[0] - 1) * dt)
    return GridField(grid, data)
