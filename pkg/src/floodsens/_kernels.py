"""Compiled stencil kernels for the shallow-water solver.

Arrays are stored south-up: ``a[j, i]`` with ``j`` increasing northward and
``i`` increasing eastward.  Boundary codes: 0 wall, 1 zero-gradient outflow,
2 discharge inflow (cells with ``active == 0`` on an inflow edge act as walls).
"""

import math

import numpy as np
from numba import njit

WALL, NEUMANN, INFLOW = 0, 1, 2


@njit(cache=True, inline="always")
def hll(hl, ul, vl, hr, ur, vr, g, hdry):
    """HLL flux normal to a face; ``u`` is the normal and ``v`` the tangential velocity.

    Returns (mass, normal momentum, tangential momentum).
    """
    if hl == hr and ul == ur and vl == vr:
        q = hl * ul
        return q, q * ul + 0.5 * g * hl * hl, q * vl
    wl = hl > hdry
    wr = hr > hdry
    if not wl and not wr:
        return 0.0, 0.0, 0.0
    cl = math.sqrt(g * hl)
    cr = math.sqrt(g * hr)
    if not wl:
        sl = ur - 2.0 * cr
        sr = ur + cr
    elif not wr:
        sl = ul - cl
        sr = ul + 2.0 * cl
    else:
        sql = math.sqrt(hl)
        sqr = math.sqrt(hr)
        uroe = (sql * ul + sqr * ur) / (sql + sqr)
        croe = math.sqrt(0.5 * g * (hl + hr))
        sl = min(ul - cl, uroe - croe)
        sr = max(ur + cr, uroe + croe)
    ql = hl * ul
    qr = hr * ur
    if sl >= 0.0:
        return ql, ql * ul + 0.5 * g * hl * hl, ql * vl
    if sr <= 0.0:
        return qr, qr * ur + 0.5 * g * hr * hr, qr * vr
    fl1 = ql * ul + 0.5 * g * hl * hl
    fr1 = qr * ur + 0.5 * g * hr * hr
    inv = 1.0 / (sr - sl)
    f0 = (sr * ql - sl * qr + sl * sr * (hr - hl)) * inv
    f1 = (sr * fl1 - sl * fr1 + sl * sr * (qr - ql)) * inv
    f2 = (sr * ql * vl - sl * qr * vr + sl * sr * (hr * vr - hl * vl)) * inv
    return f0, f1, f2


@njit(cache=True, inline="always")
def interface(hl, ul, vl, zl, hr, ur, vr, zr, g, hdry):
    """Hydrostatic reconstruction followed by HLL.

    Returns (mass, momentum seen by the left cell, momentum seen by the right
    cell, tangential).  The left/right momentum fluxes include the pressure
    correction that balances the bed-slope source.
    """
    if zl == zr:
        hls, hrs = hl, hr
    else:
        zm = max(zl, zr)
        hls = max(0.0, hl + zl - zm)
        hrs = max(0.0, hr + zr - zm)
    f0, f1, f2 = hll(hls, ul, vl, hrs, ur, vr, g, hdry)
    # written as (f1 - p*) + p so that a flat free surface at rest cancels exactly
    f1l = (f1 - 0.5 * g * hls * hls) + 0.5 * g * hl * hl
    f1r = (f1 - 0.5 * g * hrs * hrs) + 0.5 * g * hr * hr
    return f0, f1l, f1r, f2


@njit(cache=True, inline="always")
def minmod(a, b):
    if a * b <= 0.0:
        return 0.0
    if a > 0.0:
        return min(a, b)
    return max(a, b)


@njit(cache=True)
def velocities(h, hu, hv, hdry, u, v):
    ny, nx = h.shape
    for j in range(ny):
        for i in range(nx):
            if h[j, i] > hdry:
                u[j, i] = hu[j, i] / h[j, i]
                v[j, i] = hv[j, i] / h[j, i]
            else:
                u[j, i] = 0.0
                v[j, i] = 0.0


@njit(cache=True)
def max_wave_rate(h, u, v, dx, dy, g, hdry):
    """max over wet cells of (|u|+c)/dx and (|v|+c)/dy."""
    ny, nx = h.shape
    rate = 0.0
    for j in range(ny):
        for i in range(nx):
            hh = h[j, i]
            if hh > hdry:
                c = math.sqrt(g * hh)
                rx = (abs(u[j, i]) + c) / dx
                ry = (abs(v[j, i]) + c) / dy
                if rx > rate:
                    rate = rx
                if ry > rate:
                    rate = ry
    return rate


@njit(cache=True)
def reconstruct(h, u, v, z, muscl, axis, fh, fu, fv, fz, gh, gu, gv, gz):
    """Face values along ``axis`` (1 = x, 0 = y).

    ``f*`` receive the values on the low-index face of each cell (west/south),
    ``g*`` those on the high-index face (east/north).  First order copies the
    cell values; MUSCL applies minmod slopes to h, u, v and the free surface
    h+z, and recovers the face bed as surface minus depth.  Cells touching the
    domain edge keep zero slope.
    """
    ny, nx = h.shape
    for j in range(ny):
        for i in range(nx):
            hc = h[j, i]
            uc = u[j, i]
            vc = v[j, i]
            zc = z[j, i]
            interior = muscl
            if interior:
                if axis == 1:
                    interior = 0 < i < nx - 1
                else:
                    interior = 0 < j < ny - 1
            if not interior:
                fh[j, i] = hc
                gh[j, i] = hc
                fu[j, i] = uc
                gu[j, i] = uc
                fv[j, i] = vc
                gv[j, i] = vc
                fz[j, i] = zc
                gz[j, i] = zc
                continue
            if axis == 1:
                jm, im, jp, ip = j, i - 1, j, i + 1
            else:
                jm, im, jp, ip = j - 1, i, j + 1, i
            dh = 0.5 * minmod(hc - h[jm, im], h[jp, ip] - hc)
            du = 0.5 * minmod(uc - u[jm, im], u[jp, ip] - uc)
            dv = 0.5 * minmod(vc - v[jm, im], v[jp, ip] - vc)
            ec = hc + zc
            de = 0.5 * minmod(ec - (h[jm, im] + z[jm, im]), (h[jp, ip] + z[jp, ip]) - ec)
            fh[j, i] = hc - dh
            gh[j, i] = hc + dh
            fu[j, i] = uc - du
            gu[j, i] = uc + du
            fv[j, i] = vc - dv
            gv[j, i] = vc + dv
            fz[j, i] = (ec - de) - (hc - dh)
            gz[j, i] = (ec + de) - (hc + dh)


@njit(cache=True, inline="always")
def _ghost_bed(zb, zin):
    """Bed behind an edge, continuing the slope of the last two cells.

    Only a falling slope is continued; a ghost above the boundary cell would
    let a zero-gradient edge push water into the domain.
    """
    return min(zb, 2.0 * zb - zin)


@njit(cache=True, inline="always")
def _edge_flux(code, active, q, h, un, ut, zc, zg, g, hdry, ghost_low):
    """Flux through a boundary face in the +axis frame.

    ``ghost_low`` is True when the ghost cell sits on the low-index side
    (west/south edges).  ``q`` is the inflow discharge per unit width,
    positive into the domain.  ``zc`` is the boundary cell bed and ``zg`` the
    ghost bed, used by the zero-gradient edge so that flow down a uniform
    slope leaves the domain without a spurious backwater.
    """
    if code == INFLOW and active:
        if q <= 0.0:
            return 0.0, 0.5 * g * h * h, 0.0
        hc = (q * q / g) ** (1.0 / 3.0)
        hg = max(h, hc)
        ug = q / hg
        mom = q * ug + 0.5 * g * hg * hg
        if ghost_low:
            return q, mom, 0.0
        return -q, mom, 0.0
    if code == NEUMANN:
        if ghost_low:
            f0, f1l, f1r, f2 = interface(h, un, ut, zg, h, un, ut, zc, g, hdry)
            return f0, f1r, f2
        f0, f1l, f1r, f2 = interface(h, un, ut, zc, h, un, ut, zg, g, hdry)
        return f0, f1l, f2
    # wall, or inactive cell of an inflow edge
    if ghost_low:
        return hll(h, -un, ut, h, un, ut, g, hdry)
    return hll(h, un, ut, h, -un, ut, g, hdry)


@njit(cache=True)
def inflow_rate(codes, actives, qs, h, g, dx, dy):
    """Largest (|u|+c)/d of the inflow ghost states; 0 if none."""
    ny, nx = h.shape
    rate = 0.0
    for edge in range(4):
        if codes[edge] != INFLOW:
            continue
        n = ny if edge < 2 else nx
        d = dx if edge < 2 else dy
        for k in range(n):
            if not actives[edge][k]:
                continue
            q = qs[edge][k]
            if q <= 0.0:
                continue
            if edge == 0:
                hb = h[k, 0]
            elif edge == 1:
                hb = h[k, nx - 1]
            elif edge == 2:
                hb = h[0, k]
            else:
                hb = h[ny - 1, k]
            hc = (q * q / g) ** (1.0 / 3.0)
            hg = max(hb, hc)
            r = (q / hg + math.sqrt(g * hg)) / d
            if r > rate:
                rate = r
    return rate


@njit(cache=True)
def residual(h, u, v, z, dx, dy, g, hdry, muscl, codes, actives, qs,
             w, rh, rhu, rhv):
    """Right-hand side of the semi-discrete system, ignoring friction.

    ``codes``/``actives``/``qs`` are indexed by edge: 0 west, 1 east,
    2 south, 3 north.  ``w`` is a (8, ny, nx) scratch array.  Returns the net
    volume rate entering through the boundary (m^3/s).
    """
    ny, nx = h.shape
    for j in range(ny):
        for i in range(nx):
            rh[j, i] = 0.0
            rhu[j, i] = 0.0
            rhv[j, i] = 0.0
    net = 0.0

    # ---- x direction
    fh, fu, fv, fz, gh, gu, gv, gz = w[0], w[1], w[2], w[3], w[4], w[5], w[6], w[7]
    reconstruct(h, u, v, z, muscl, 1, fh, fu, fv, fz, gh, gu, gv, gz)
    for j in range(ny):
        for i in range(nx - 1):
            hl = gh[j, i]
            hr = fh[j, i + 1]
            if hl <= hdry and hr <= hdry:
                continue
            f0, f1l, f1r, f2 = interface(hl, gu[j, i], gv[j, i], gz[j, i],
                                         hr, fu[j, i + 1], fv[j, i + 1], fz[j, i + 1], g, hdry)
            rh[j, i] -= f0 / dx
            rh[j, i + 1] += f0 / dx
            rhu[j, i] -= f1l / dx
            rhu[j, i + 1] += f1r / dx
            rhv[j, i] -= f2 / dx
            rhv[j, i + 1] += f2 / dx
        f0, f1, f2 = _edge_flux(codes[0], actives[0][j], qs[0][j], fh[j, 0], fu[j, 0], fv[j, 0],
                                z[j, 0], _ghost_bed(z[j, 0], z[j, 1] if nx > 1 else z[j, 0]),
                                g, hdry, True)
        rh[j, 0] += f0 / dx
        rhu[j, 0] += f1 / dx
        rhv[j, 0] += f2 / dx
        net += f0 * dy
        f0, f1, f2 = _edge_flux(codes[1], actives[1][j], qs[1][j], gh[j, nx - 1], gu[j, nx - 1],
                                gv[j, nx - 1], z[j, nx - 1],
                                _ghost_bed(z[j, nx - 1], z[j, nx - 2] if nx > 1 else z[j, nx - 1]),
                                g, hdry, False)
        rh[j, nx - 1] -= f0 / dx
        rhu[j, nx - 1] -= f1 / dx
        rhv[j, nx - 1] -= f2 / dx
        net -= f0 * dy
        if muscl:
            for i in range(nx):
                rhu[j, i] += 0.5 * g * (fh[j, i] + gh[j, i]) * (fz[j, i] - gz[j, i]) / dx

    # ---- y direction: normal velocity is v, tangential is u
    reconstruct(h, u, v, z, muscl, 0, fh, fu, fv, fz, gh, gu, gv, gz)
    for j in range(ny - 1):
        for i in range(nx):
            hl = gh[j, i]
            hr = fh[j + 1, i]
            if hl <= hdry and hr <= hdry:
                continue
            f0, f1l, f1r, f2 = interface(hl, gv[j, i], gu[j, i], gz[j, i],
                                         hr, fv[j + 1, i], fu[j + 1, i], fz[j + 1, i], g, hdry)
            rh[j, i] -= f0 / dy
            rh[j + 1, i] += f0 / dy
            rhv[j, i] -= f1l / dy
            rhv[j + 1, i] += f1r / dy
            rhu[j, i] -= f2 / dy
            rhu[j + 1, i] += f2 / dy
    for i in range(nx):
        f0, f1, f2 = _edge_flux(codes[2], actives[2][i], qs[2][i], fh[0, i], fv[0, i], fu[0, i],
                                z[0, i], _ghost_bed(z[0, i], z[1, i] if ny > 1 else z[0, i]),
                                g, hdry, True)
        rh[0, i] += f0 / dy
        rhv[0, i] += f1 / dy
        rhu[0, i] += f2 / dy
        net += f0 * dx
        f0, f1, f2 = _edge_flux(codes[3], actives[3][i], qs[3][i], gh[ny - 1, i], gv[ny - 1, i],
                                gu[ny - 1, i], z[ny - 1, i],
                                _ghost_bed(z[ny - 1, i], z[ny - 2, i] if ny > 1 else z[ny - 1, i]),
                                g, hdry, False)
        rh[ny - 1, i] -= f0 / dy
        rhv[ny - 1, i] -= f1 / dy
        rhu[ny - 1, i] -= f2 / dy
        net -= f0 * dx
    if muscl:
        for j in range(ny):
            for i in range(nx):
                rhv[j, i] += 0.5 * g * (fh[j, i] + gh[j, i]) * (fz[j, i] - gz[j, i]) / dy
    return net


@njit(cache=True)
def advance(h, hu, hv, rh, rhu, rhv, dt, hdry):
    """Forward-Euler update in place.  Returns the negative-depth mass clipped (m)."""
    ny, nx = h.shape
    clipped = 0.0
    for j in range(ny):
        for i in range(nx):
            hn = h[j, i] + dt * rh[j, i]
            if hn < 0.0:
                clipped -= hn
                hn = 0.0
            h[j, i] = hn
            if hn > hdry:
                hu[j, i] += dt * rhu[j, i]
                hv[j, i] += dt * rhv[j, i]
            else:
                hu[j, i] = 0.0
                hv[j, i] = 0.0
    return clipped


@njit(cache=True)
def heun_average(h, hu, hv, h0, hu0, hv0, hdry):
    ny, nx = h.shape
    for j in range(ny):
        for i in range(nx):
            h[j, i] = 0.5 * (h0[j, i] + h[j, i])
            if h[j, i] > hdry:
                hu[j, i] = 0.5 * (hu0[j, i] + hu[j, i])
                hv[j, i] = 0.5 * (hv0[j, i] + hv[j, i])
            else:
                hu[j, i] = 0.0
                hv[j, i] = 0.0


@njit(cache=True)
def friction(h, hu, hv, dt, manning_n, g, hdry):
    """Semi-implicit Manning: q <- q / (1 + dt g n^2 |U| / h^(4/3))."""
    if manning_n <= 0.0:
        return
    gn2 = g * manning_n * manning_n
    ny, nx = h.shape
    for j in range(ny):
        for i in range(nx):
            hh = h[j, i]
            if hh > hdry:
                uu = hu[j, i] / hh
                vv = hv[j, i] / hh
                speed = math.sqrt(uu * uu + vv * vv)
                fac = 1.0 + dt * gn2 * speed / hh ** (4.0 / 3.0)
                hu[j, i] /= fac
                hv[j, i] /= fac


@njit(cache=True)
def first_nonfinite(h, hu, hv):
    ny, nx = h.shape
    for j in range(ny):
        for i in range(nx):
            if not (math.isfinite(h[j, i]) and math.isfinite(hu[j, i]) and math.isfinite(hv[j, i])):
                return j * nx + i
    return -1


@njit(cache=True)
def track_max(h, hmax):
    ny, nx = h.shape
    for j in range(ny):
        for i in range(nx):
            if h[j, i] > hmax[j, i]:
                hmax[j, i] = h[j, i]


def empty_edges(ny, nx):
    """Per-edge active flags and inflow discharges, all zero."""
    actives = (np.zeros(ny, np.uint8), np.zeros(ny, np.uint8),
               np.zeros(nx, np.uint8), np.zeros(nx, np.uint8))
    qs = (np.zeros(ny), np.zeros(ny), np.zeros(nx), np.zeros(nx))
    return actives, qs
