"""Numba-compiled inner loops for the plain (non-tangent) simulation path.

These kernels mirror the generic transfers in :mod:`gelsim.mpm` exactly; a
cross-path equivalence test keeps them honest. Loops are serial on purpose:
accumulation order is fixed, so runs are bit-reproducible. Import is
optional; the caller falls back to the generic path when numba is missing or
``GELSIM_DISABLE_NUMBA`` is set.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _polar_R(F):
    """Rotation factor of F = R S by Newton iteration R <- (R + R^-T)/2."""
    R = F.copy()
    Rn = np.empty((3, 3))
    for _ in range(40):
        a, b, c = R[0, 0], R[0, 1], R[0, 2]
        d, e, f = R[1, 0], R[1, 1], R[1, 2]
        g, h, i = R[2, 0], R[2, 1], R[2, 2]
        det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
        inv_det = 1.0 / det
        # inverse transpose, fused with the averaging step
        Rn[0, 0] = 0.5 * (a + (e * i - f * h) * inv_det)
        Rn[1, 0] = 0.5 * (d + (c * h - b * i) * inv_det)
        Rn[2, 0] = 0.5 * (g + (b * f - c * e) * inv_det)
        Rn[0, 1] = 0.5 * (b + (f * g - d * i) * inv_det)
        Rn[1, 1] = 0.5 * (e + (a * i - c * g) * inv_det)
        Rn[2, 1] = 0.5 * (h + (c * d - a * f) * inv_det)
        Rn[0, 2] = 0.5 * (c + (d * h - e * g) * inv_det)
        Rn[1, 2] = 0.5 * (f + (b * g - a * h) * inv_det)
        Rn[2, 2] = 0.5 * (i + (a * e - b * d) * inv_det)
        err = 0.0
        for r in range(3):
            for s in range(3):
                diff = abs(Rn[r, s] - R[r, s])
                if diff > err:
                    err = diff
                R[r, s] = Rn[r, s]
        if err < 1e-12:
            break
    return R


@njit(cache=True)
def p2g_kernel(x, v, F, C, m, V0, mu_mm, lam_mm, dt, origin, h, dims, gravity):
    """Scatter mass and momentum (APIC + stress impulse) onto the grid.

    Returns (mass (nn,), momentum (nn, 3)) in flat C-order node indexing.
    """
    n = x.shape[0]
    nx, ny, nz = dims[0], dims[1], dims[2]
    nn = nx * ny * nz
    mass = np.zeros(nn)
    mom = np.zeros((nn, 3))
    inv_h = 1.0 / h
    stress_base = -dt * 4.0 * inv_h * inv_h

    wx = np.empty(3)
    wy = np.empty(3)
    wz = np.empty(3)
    P = np.empty((3, 3))
    B = np.empty((3, 3))

    for p in range(n):
        gx = (x[p, 0] - origin[0]) * inv_h
        gy = (x[p, 1] - origin[1]) * inv_h
        gz = (x[p, 2] - origin[2]) * inv_h
        bi = int(np.floor(gx - 0.5))
        bj = int(np.floor(gy - 0.5))
        bk = int(np.floor(gz - 0.5))
        fx = gx - bi
        fy = gy - bj
        fz = gz - bk
        wx[0] = 0.5 * (1.5 - fx) ** 2
        wx[1] = 0.75 - (fx - 1.0) ** 2
        wx[2] = 0.5 * (fx - 0.5) ** 2
        wy[0] = 0.5 * (1.5 - fy) ** 2
        wy[1] = 0.75 - (fy - 1.0) ** 2
        wy[2] = 0.5 * (fy - 0.5) ** 2
        wz[0] = 0.5 * (1.5 - fz) ** 2
        wz[1] = 0.75 - (fz - 1.0) ** 2
        wz[2] = 0.5 * (fz - 0.5) ** 2

        Fp = F[p]
        a, b, c = Fp[0, 0], Fp[0, 1], Fp[0, 2]
        d, e, f = Fp[1, 0], Fp[1, 1], Fp[1, 2]
        g, hh, i = Fp[2, 0], Fp[2, 1], Fp[2, 2]
        J = a * (e * i - f * hh) - b * (d * i - f * g) + c * (d * hh - e * g)
        R = _polar_R(Fp)
        # P = 2 mu (F - R) + lam (J-1) J F^{-T}; F^{-T} = adj(F)^T / J
        lam_scale = lam_mm * (J - 1.0)  # lam (J-1) J / J
        P[0, 0] = 2.0 * mu_mm * (a - R[0, 0]) + lam_scale * (e * i - f * hh)
        P[0, 1] = 2.0 * mu_mm * (b - R[0, 1]) + lam_scale * (f * g - d * i)
        P[0, 2] = 2.0 * mu_mm * (c - R[0, 2]) + lam_scale * (d * hh - e * g)
        P[1, 0] = 2.0 * mu_mm * (d - R[1, 0]) + lam_scale * (c * hh - b * i)
        P[1, 1] = 2.0 * mu_mm * (e - R[1, 1]) + lam_scale * (a * i - c * g)
        P[1, 2] = 2.0 * mu_mm * (f - R[1, 2]) + lam_scale * (b * g - a * hh)
        P[2, 0] = 2.0 * mu_mm * (g - R[2, 0]) + lam_scale * (b * f - c * e)
        P[2, 1] = 2.0 * mu_mm * (hh - R[2, 1]) + lam_scale * (c * d - a * f)
        P[2, 2] = 2.0 * mu_mm * (i - R[2, 2]) + lam_scale * (a * e - b * d)

        sc = stress_base * V0[p]
        mp = m[p]
        for r in range(3):
            for s in range(3):
                acc = 0.0
                for t in range(3):
                    acc += P[r, t] * Fp[s, t]  # P F^T
                B[r, s] = sc * acc + mp * C[p, r, s]

        mvx = mp * v[p, 0]
        mvy = mp * v[p, 1]
        mvz = mp * v[p, 2]

        for oi in range(3):
            px = origin[0] + (bi + oi) * h - x[p, 0]
            for oj in range(3):
                py = origin[1] + (bj + oj) * h - x[p, 1]
                wij = wx[oi] * wy[oj]
                row = ((bi + oi) * ny + (bj + oj)) * nz + bk
                for ok in range(3):
                    pz = origin[2] + (bk + ok) * h - x[p, 2]
                    w = wij * wz[ok]
                    node = row + ok
                    mass[node] += w * mp
                    mom[node, 0] += w * (mvx + B[0, 0] * px + B[0, 1] * py + B[0, 2] * pz)
                    mom[node, 1] += w * (mvy + B[1, 0] * px + B[1, 1] * py + B[1, 2] * pz)
                    mom[node, 2] += w * (mvz + B[2, 0] * px + B[2, 1] * py + B[2, 2] * pz)

    if gravity[0] != 0.0 or gravity[1] != 0.0 or gravity[2] != 0.0:
        for node in range(nn):
            mom[node, 0] += mass[node] * gravity[0] * dt
            mom[node, 1] += mass[node] * gravity[1] * dt
            mom[node, 2] += mass[node] * gravity[2] * dt
    return mass, mom


@njit(cache=True)
def g2p_kernel(x, F, grid_v, dt, origin, h, dims):
    """Gather grid velocities, update (v, C, x, F).

    Returns (v_new, C_new, x_new, F_new, first_inverted_index or -1).
    """
    n = x.shape[0]
    ny, nz = dims[1], dims[2]
    inv_h = 1.0 / h
    v_new = np.empty((n, 3))
    C_new = np.empty((n, 3, 3))
    x_new = np.empty((n, 3))
    F_new = np.empty((n, 3, 3))
    bad = -1

    wx = np.empty(3)
    wy = np.empty(3)
    wz = np.empty(3)

    for p in range(n):
        gx = (x[p, 0] - origin[0]) * inv_h
        gy = (x[p, 1] - origin[1]) * inv_h
        gz = (x[p, 2] - origin[2]) * inv_h
        bi = int(np.floor(gx - 0.5))
        bj = int(np.floor(gy - 0.5))
        bk = int(np.floor(gz - 0.5))
        fx = gx - bi
        fy = gy - bj
        fz = gz - bk
        wx[0] = 0.5 * (1.5 - fx) ** 2
        wx[1] = 0.75 - (fx - 1.0) ** 2
        wx[2] = 0.5 * (fx - 0.5) ** 2
        wy[0] = 0.5 * (1.5 - fy) ** 2
        wy[1] = 0.75 - (fy - 1.0) ** 2
        wy[2] = 0.5 * (fy - 0.5) ** 2
        wz[0] = 0.5 * (1.5 - fz) ** 2
        wz[1] = 0.75 - (fz - 1.0) ** 2
        wz[2] = 0.5 * (fz - 0.5) ** 2

        vx = vy = vz = 0.0
        c00 = c01 = c02 = c10 = c11 = c12 = c20 = c21 = c22 = 0.0
        for oi in range(3):
            px = origin[0] + (bi + oi) * h - x[p, 0]
            for oj in range(3):
                py = origin[1] + (bj + oj) * h - x[p, 1]
                wij = wx[oi] * wy[oj]
                row = ((bi + oi) * ny + (bj + oj)) * nz + bk
                for ok in range(3):
                    pz = origin[2] + (bk + ok) * h - x[p, 2]
                    w = wij * wz[ok]
                    node = row + ok
                    gvx = grid_v[node, 0]
                    gvy = grid_v[node, 1]
                    gvz = grid_v[node, 2]
                    vx += w * gvx
                    vy += w * gvy
                    vz += w * gvz
                    c00 += w * gvx * px
                    c01 += w * gvx * py
                    c02 += w * gvx * pz
                    c10 += w * gvy * px
                    c11 += w * gvy * py
                    c12 += w * gvy * pz
                    c20 += w * gvz * px
                    c21 += w * gvz * py
                    c22 += w * gvz * pz

        s = 4.0 * inv_h * inv_h
        C_new[p, 0, 0] = s * c00
        C_new[p, 0, 1] = s * c01
        C_new[p, 0, 2] = s * c02
        C_new[p, 1, 0] = s * c10
        C_new[p, 1, 1] = s * c11
        C_new[p, 1, 2] = s * c12
        C_new[p, 2, 0] = s * c20
        C_new[p, 2, 1] = s * c21
        C_new[p, 2, 2] = s * c22
        v_new[p, 0] = vx
        v_new[p, 1] = vy
        v_new[p, 2] = vz
        x_new[p, 0] = x[p, 0] + dt * vx
        x_new[p, 1] = x[p, 1] + dt * vy
        x_new[p, 2] = x[p, 2] + dt * vz

        for r in range(3):
            g0 = dt * C_new[p, r, 0] + (1.0 if r == 0 else 0.0)
            g1 = dt * C_new[p, r, 1] + (1.0 if r == 1 else 0.0)
            g2 = dt * C_new[p, r, 2] + (1.0 if r == 2 else 0.0)
            for s2 in range(3):
                F_new[p, r, s2] = g0 * F[p, 0, s2] + g1 * F[p, 1, s2] + g2 * F[p, 2, s2]

        a, b, c = F_new[p, 0, 0], F_new[p, 0, 1], F_new[p, 0, 2]
        d, e, f = F_new[p, 1, 0], F_new[p, 1, 1], F_new[p, 1, 2]
        g, hh, i = F_new[p, 2, 0], F_new[p, 2, 1], F_new[p, 2, 2]
        detF = a * (e * i - f * hh) - b * (d * i - f * g) + c * (d * hh - e * g)
        if detF <= 0.0 and bad < 0:
            bad = p

    return v_new, C_new, x_new, F_new, bad


# ---------------------------------------------------------------------------
# forward-mode (two tangent channel) variants
#
# These propagate d/d(log E) and d/d(nu) by hand through the same arithmetic
# as the kernels above; the generic numpy path in gelsim.mpm is the oracle
# they are tested against.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _mm3(A, B, out):
    for r in range(3):
        for s in range(3):
            acc = 0.0
            for t in range(3):
                acc += A[r, t] * B[t, s]
            out[r, s] = acc


@njit(cache=True)
def _inv3_into(R, out):
    a, b, c = R[0, 0], R[0, 1], R[0, 2]
    d, e, f = R[1, 0], R[1, 1], R[1, 2]
    g, h, i = R[2, 0], R[2, 1], R[2, 2]
    det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
    inv_det = 1.0 / det
    out[0, 0] = (e * i - f * h) * inv_det
    out[0, 1] = (c * h - b * i) * inv_det
    out[0, 2] = (b * f - c * e) * inv_det
    out[1, 0] = (f * g - d * i) * inv_det
    out[1, 1] = (a * i - c * g) * inv_det
    out[1, 2] = (c * d - a * f) * inv_det
    out[2, 0] = (d * h - e * g) * inv_det
    out[2, 1] = (b * g - a * h) * inv_det
    out[2, 2] = (a * e - b * d) * inv_det


@njit(cache=True)
def _polar_R_with_tangent(F, dF, R, dR):
    """Polar rotation and its two tangent channels via the Newton iteration.

    R_{k+1} = (R_k + R_k^{-T})/2;  d(R^{-1}) = -R^{-1} dR R^{-1}.
    """
    for r in range(3):
        for s in range(3):
            R[r, s] = F[r, s]
            dR[0, r, s] = dF[0, r, s]
            dR[1, r, s] = dF[1, r, s]
    Rinv = np.empty((3, 3))
    tmp = np.empty((3, 3))
    dRinv = np.empty((3, 3))
    for _ in range(40):
        _inv3_into(R, Rinv)
        err = 0.0
        for ch in range(2):
            _mm3(dR[ch], Rinv, tmp)
            _mm3(Rinv, tmp, dRinv)  # dRinv = Rinv dR Rinv (sign applied below)
            for r in range(3):
                for s in range(3):
                    # d(R^{-T})[r,s] = -(Rinv dR Rinv)[s,r]
                    dR[ch, r, s] = 0.5 * (dR[ch, r, s] - dRinv[s, r])
        for r in range(3):
            for s in range(3):
                new = 0.5 * (R[r, s] + Rinv[s, r])
                diff = abs(new - R[r, s])
                if diff > err:
                    err = diff
                R[r, s] = new
        if err < 1e-12:
            break


@njit(cache=True)
def _cofactor_with_tangent(F, dF, cof, dcof):
    """Cofactor matrix of F (= J F^{-T}) and its tangents (bilinear terms)."""
    idx1 = (1, 2, 0)
    idx2 = (2, 0, 1)
    for ch in range(2):
        for r in range(3):
            r1, r2 = idx1[r], idx2[r]
            for s in range(3):
                s1, s2 = idx1[s], idx2[s]
                if ch == 0:
                    cof[r, s] = F[r1, s1] * F[r2, s2] - F[r1, s2] * F[r2, s1]
                dcof[ch, r, s] = (
                    dF[ch, r1, s1] * F[r2, s2]
                    + F[r1, s1] * dF[ch, r2, s2]
                    - dF[ch, r1, s2] * F[r2, s1]
                    - F[r1, s2] * dF[ch, r2, s1]
                )


@njit(cache=True)
def p2g_dual_kernel(
    x, dx, v, dv, F, dF, C, dC, m, V0,
    mu_mm, dmu_mm, lam_mm, dlam_mm,
    dt, origin, h, dims, gravity,
):
    n = x.shape[0]
    nx, ny, nz = dims[0], dims[1], dims[2]
    nn = nx * ny * nz
    mass = np.zeros(nn)
    dmass = np.zeros((2, nn))
    mom = np.zeros((nn, 3))
    dmom = np.zeros((2, nn, 3))
    inv_h = 1.0 / h
    stress_base = -dt * 4.0 * inv_h * inv_h

    wx = np.empty(3)
    wy = np.empty(3)
    wz = np.empty(3)
    dwx = np.empty((2, 3))
    dwy = np.empty((2, 3))
    dwz = np.empty((2, 3))
    R = np.empty((3, 3))
    dR = np.empty((2, 3, 3))
    cof = np.empty((3, 3))
    dcof = np.empty((2, 3, 3))
    P = np.empty((3, 3))
    dP = np.empty((2, 3, 3))
    B = np.empty((3, 3))
    dB = np.empty((2, 3, 3))

    for p in range(n):
        gx = (x[p, 0] - origin[0]) * inv_h
        gy = (x[p, 1] - origin[1]) * inv_h
        gz = (x[p, 2] - origin[2]) * inv_h
        bi = int(np.floor(gx - 0.5))
        bj = int(np.floor(gy - 0.5))
        bk = int(np.floor(gz - 0.5))
        fx = gx - bi
        fy = gy - bj
        fz = gz - bk
        wx[0] = 0.5 * (1.5 - fx) ** 2
        wx[1] = 0.75 - (fx - 1.0) ** 2
        wx[2] = 0.5 * (fx - 0.5) ** 2
        wy[0] = 0.5 * (1.5 - fy) ** 2
        wy[1] = 0.75 - (fy - 1.0) ** 2
        wy[2] = 0.5 * (fy - 0.5) ** 2
        wz[0] = 0.5 * (1.5 - fz) ** 2
        wz[1] = 0.75 - (fz - 1.0) ** 2
        wz[2] = 0.5 * (fz - 0.5) ** 2
        for ch in range(2):
            dfx = dx[ch, p, 0] * inv_h
            dfy = dx[ch, p, 1] * inv_h
            dfz = dx[ch, p, 2] * inv_h
            dwx[ch, 0] = -(1.5 - fx) * dfx
            dwx[ch, 1] = -2.0 * (fx - 1.0) * dfx
            dwx[ch, 2] = (fx - 0.5) * dfx
            dwy[ch, 0] = -(1.5 - fy) * dfy
            dwy[ch, 1] = -2.0 * (fy - 1.0) * dfy
            dwy[ch, 2] = (fy - 0.5) * dfy
            dwz[ch, 0] = -(1.5 - fz) * dfz
            dwz[ch, 1] = -2.0 * (fz - 1.0) * dfz
            dwz[ch, 2] = (fz - 0.5) * dfz

        Fp = F[p]
        dFp = dF[:, p]
        _cofactor_with_tangent(Fp, dFp, cof, dcof)
        J = Fp[0, 0] * cof[0, 0] + Fp[0, 1] * cof[0, 1] + Fp[0, 2] * cof[0, 2]
        _polar_R_with_tangent(Fp, dFp, R, dR)

        lam_scale = lam_mm * (J - 1.0)
        for ch in range(2):
            dJ = 0.0
            for r in range(3):
                for s in range(3):
                    dJ += cof[r, s] * dFp[ch, r, s]
            dlam_scale = dlam_mm[ch] * (J - 1.0) + lam_mm * dJ
            for r in range(3):
                for s in range(3):
                    if ch == 0:
                        P[r, s] = 2.0 * mu_mm * (Fp[r, s] - R[r, s]) + lam_scale * cof[r, s]
                    dP[ch, r, s] = (
                        2.0 * dmu_mm[ch] * (Fp[r, s] - R[r, s])
                        + 2.0 * mu_mm * (dFp[ch, r, s] - dR[ch, r, s])
                        + dlam_scale * cof[r, s]
                        + lam_scale * dcof[ch, r, s]
                    )

        sc = stress_base * V0[p]
        mp = m[p]
        for r in range(3):
            for s in range(3):
                acc = 0.0
                for t in range(3):
                    acc += P[r, t] * Fp[s, t]
                B[r, s] = sc * acc + mp * C[p, r, s]
        for ch in range(2):
            for r in range(3):
                for s in range(3):
                    acc = 0.0
                    for t in range(3):
                        acc += dP[ch, r, t] * Fp[s, t] + P[r, t] * dFp[ch, s, t]
                    dB[ch, r, s] = sc * acc + mp * dC[ch, p, r, s]

        mvx = mp * v[p, 0]
        mvy = mp * v[p, 1]
        mvz = mp * v[p, 2]

        for oi in range(3):
            px = origin[0] + (bi + oi) * h - x[p, 0]
            for oj in range(3):
                py = origin[1] + (bj + oj) * h - x[p, 1]
                wij = wx[oi] * wy[oj]
                row = ((bi + oi) * ny + (bj + oj)) * nz + bk
                for ok in range(3):
                    pz = origin[2] + (bk + ok) * h - x[p, 2]
                    w = wij * wz[ok]
                    node = row + ok
                    m0 = mvx + B[0, 0] * px + B[0, 1] * py + B[0, 2] * pz
                    m1 = mvy + B[1, 0] * px + B[1, 1] * py + B[1, 2] * pz
                    m2 = mvz + B[2, 0] * px + B[2, 1] * py + B[2, 2] * pz
                    mass[node] += w * mp
                    mom[node, 0] += w * m0
                    mom[node, 1] += w * m1
                    mom[node, 2] += w * m2
                    for ch in range(2):
                        dw = (
                            dwx[ch, oi] * wy[oj] * wz[ok]
                            + wx[oi] * dwy[ch, oj] * wz[ok]
                            + wij * dwz[ch, ok]
                        )
                        ddx = dx[ch, p, 0]
                        ddy = dx[ch, p, 1]
                        ddz = dx[ch, p, 2]
                        # d(dpos) = -dx
                        dm0 = (
                            mp * dv[ch, p, 0]
                            + dB[ch, 0, 0] * px + dB[ch, 0, 1] * py + dB[ch, 0, 2] * pz
                            - (B[0, 0] * ddx + B[0, 1] * ddy + B[0, 2] * ddz)
                        )
                        dm1 = (
                            mp * dv[ch, p, 1]
                            + dB[ch, 1, 0] * px + dB[ch, 1, 1] * py + dB[ch, 1, 2] * pz
                            - (B[1, 0] * ddx + B[1, 1] * ddy + B[1, 2] * ddz)
                        )
                        dm2 = (
                            mp * dv[ch, p, 2]
                            + dB[ch, 2, 0] * px + dB[ch, 2, 1] * py + dB[ch, 2, 2] * pz
                            - (B[2, 0] * ddx + B[2, 1] * ddy + B[2, 2] * ddz)
                        )
                        dmass[ch, node] += dw * mp
                        dmom[ch, node, 0] += dw * m0 + w * dm0
                        dmom[ch, node, 1] += dw * m1 + w * dm1
                        dmom[ch, node, 2] += dw * m2 + w * dm2

    if gravity[0] != 0.0 or gravity[1] != 0.0 or gravity[2] != 0.0:
        for node in range(nn):
            for k in range(3):
                mom[node, k] += mass[node] * gravity[k] * dt
                dmom[0, node, k] += dmass[0, node] * gravity[k] * dt
                dmom[1, node, k] += dmass[1, node] * gravity[k] * dt
    return mass, dmass, mom, dmom


@njit(cache=True)
def g2p_dual_kernel(x, dx, F, dF, grid_v, dgrid_v, dt, origin, h, dims):
    n = x.shape[0]
    ny, nz = dims[1], dims[2]
    inv_h = 1.0 / h
    v_new = np.empty((n, 3))
    dv_new = np.empty((2, n, 3))
    C_new = np.empty((n, 3, 3))
    dC_new = np.empty((2, n, 3, 3))
    x_new = np.empty((n, 3))
    dx_new = np.empty((2, n, 3))
    F_new = np.empty((n, 3, 3))
    dF_new = np.empty((2, n, 3, 3))
    bad = -1

    wx = np.empty(3)
    wy = np.empty(3)
    wz = np.empty(3)
    dwx = np.empty((2, 3))
    dwy = np.empty((2, 3))
    dwz = np.empty((2, 3))
    vC = np.empty((3, 3))
    dvC = np.empty((2, 3, 3))

    for p in range(n):
        gx = (x[p, 0] - origin[0]) * inv_h
        gy = (x[p, 1] - origin[1]) * inv_h
        gz = (x[p, 2] - origin[2]) * inv_h
        bi = int(np.floor(gx - 0.5))
        bj = int(np.floor(gy - 0.5))
        bk = int(np.floor(gz - 0.5))
        fx = gx - bi
        fy = gy - bj
        fz = gz - bk
        wx[0] = 0.5 * (1.5 - fx) ** 2
        wx[1] = 0.75 - (fx - 1.0) ** 2
        wx[2] = 0.5 * (fx - 0.5) ** 2
        wy[0] = 0.5 * (1.5 - fy) ** 2
        wy[1] = 0.75 - (fy - 1.0) ** 2
        wy[2] = 0.5 * (fy - 0.5) ** 2
        wz[0] = 0.5 * (1.5 - fz) ** 2
        wz[1] = 0.75 - (fz - 1.0) ** 2
        wz[2] = 0.5 * (fz - 0.5) ** 2
        for ch in range(2):
            dfx = dx[ch, p, 0] * inv_h
            dfy = dx[ch, p, 1] * inv_h
            dfz = dx[ch, p, 2] * inv_h
            dwx[ch, 0] = -(1.5 - fx) * dfx
            dwx[ch, 1] = -2.0 * (fx - 1.0) * dfx
            dwx[ch, 2] = (fx - 0.5) * dfx
            dwy[ch, 0] = -(1.5 - fy) * dfy
            dwy[ch, 1] = -2.0 * (fy - 1.0) * dfy
            dwy[ch, 2] = (fy - 0.5) * dfy
            dwz[ch, 0] = -(1.5 - fz) * dfz
            dwz[ch, 1] = -2.0 * (fz - 1.0) * dfz
            dwz[ch, 2] = (fz - 0.5) * dfz

        vx = vy = vz = 0.0
        dvx0 = dvy0 = dvz0 = 0.0
        dvx1 = dvy1 = dvz1 = 0.0
        for r in range(3):
            for s in range(3):
                vC[r, s] = 0.0
                dvC[0, r, s] = 0.0
                dvC[1, r, s] = 0.0

        for oi in range(3):
            px = origin[0] + (bi + oi) * h - x[p, 0]
            for oj in range(3):
                py = origin[1] + (bj + oj) * h - x[p, 1]
                wij = wx[oi] * wy[oj]
                row = ((bi + oi) * ny + (bj + oj)) * nz + bk
                for ok in range(3):
                    pz = origin[2] + (bk + ok) * h - x[p, 2]
                    w = wij * wz[ok]
                    node = row + ok
                    gvx = grid_v[node, 0]
                    gvy = grid_v[node, 1]
                    gvz = grid_v[node, 2]
                    vx += w * gvx
                    vy += w * gvy
                    vz += w * gvz
                    vC[0, 0] += w * gvx * px
                    vC[0, 1] += w * gvx * py
                    vC[0, 2] += w * gvx * pz
                    vC[1, 0] += w * gvy * px
                    vC[1, 1] += w * gvy * py
                    vC[1, 2] += w * gvy * pz
                    vC[2, 0] += w * gvz * px
                    vC[2, 1] += w * gvz * py
                    vC[2, 2] += w * gvz * pz
                    for ch in range(2):
                        dw = (
                            dwx[ch, oi] * wy[oj] * wz[ok]
                            + wx[oi] * dwy[ch, oj] * wz[ok]
                            + wij * dwz[ch, ok]
                        )
                        dgx = dgrid_v[ch, node, 0]
                        dgy = dgrid_v[ch, node, 1]
                        dgz = dgrid_v[ch, node, 2]
                        ddx = dx[ch, p, 0]
                        ddy = dx[ch, p, 1]
                        ddz = dx[ch, p, 2]
                        if ch == 0:
                            dvx0 += dw * gvx + w * dgx
                            dvy0 += dw * gvy + w * dgy
                            dvz0 += dw * gvz + w * dgz
                        else:
                            dvx1 += dw * gvx + w * dgx
                            dvy1 += dw * gvy + w * dgy
                            dvz1 += dw * gvz + w * dgz
                        dvC[ch, 0, 0] += dw * gvx * px + w * (dgx * px - gvx * ddx)
                        dvC[ch, 0, 1] += dw * gvx * py + w * (dgx * py - gvx * ddy)
                        dvC[ch, 0, 2] += dw * gvx * pz + w * (dgx * pz - gvx * ddz)
                        dvC[ch, 1, 0] += dw * gvy * px + w * (dgy * px - gvy * ddx)
                        dvC[ch, 1, 1] += dw * gvy * py + w * (dgy * py - gvy * ddy)
                        dvC[ch, 1, 2] += dw * gvy * pz + w * (dgy * pz - gvy * ddz)
                        dvC[ch, 2, 0] += dw * gvz * px + w * (dgz * px - gvz * ddx)
                        dvC[ch, 2, 1] += dw * gvz * py + w * (dgz * py - gvz * ddy)
                        dvC[ch, 2, 2] += dw * gvz * pz + w * (dgz * pz - gvz * ddz)

        s4 = 4.0 * inv_h * inv_h
        v_new[p, 0] = vx
        v_new[p, 1] = vy
        v_new[p, 2] = vz
        dv_new[0, p, 0] = dvx0
        dv_new[0, p, 1] = dvy0
        dv_new[0, p, 2] = dvz0
        dv_new[1, p, 0] = dvx1
        dv_new[1, p, 1] = dvy1
        dv_new[1, p, 2] = dvz1
        for r in range(3):
            for s in range(3):
                C_new[p, r, s] = s4 * vC[r, s]
                dC_new[0, p, r, s] = s4 * dvC[0, r, s]
                dC_new[1, p, r, s] = s4 * dvC[1, r, s]
        x_new[p, 0] = x[p, 0] + dt * vx
        x_new[p, 1] = x[p, 1] + dt * vy
        x_new[p, 2] = x[p, 2] + dt * vz
        for ch in range(2):
            dx_new[ch, p, 0] = dx[ch, p, 0] + dt * dv_new[ch, p, 0]
            dx_new[ch, p, 1] = dx[ch, p, 1] + dt * dv_new[ch, p, 1]
            dx_new[ch, p, 2] = dx[ch, p, 2] + dt * dv_new[ch, p, 2]

        for r in range(3):
            g0 = dt * C_new[p, r, 0] + (1.0 if r == 0 else 0.0)
            g1 = dt * C_new[p, r, 1] + (1.0 if r == 1 else 0.0)
            g2 = dt * C_new[p, r, 2] + (1.0 if r == 2 else 0.0)
            for s in range(3):
                F_new[p, r, s] = g0 * F[p, 0, s] + g1 * F[p, 1, s] + g2 * F[p, 2, s]
                for ch in range(2):
                    dF_new[ch, p, r, s] = (
                        dt * (
                            dC_new[ch, p, r, 0] * F[p, 0, s]
                            + dC_new[ch, p, r, 1] * F[p, 1, s]
                            + dC_new[ch, p, r, 2] * F[p, 2, s]
                        )
                        + g0 * dF[ch, p, 0, s]
                        + g1 * dF[ch, p, 1, s]
                        + g2 * dF[ch, p, 2, s]
                    )

        a, b, c = F_new[p, 0, 0], F_new[p, 0, 1], F_new[p, 0, 2]
        d, e, f = F_new[p, 1, 0], F_new[p, 1, 1], F_new[p, 1, 2]
        g, hh, i = F_new[p, 2, 0], F_new[p, 2, 1], F_new[p, 2, 2]
        detF = a * (e * i - f * hh) - b * (d * i - f * g) + c * (d * hh - e * g)
        if detF <= 0.0 and bad < 0:
            bad = p

    return v_new, dv_new, C_new, dC_new, x_new, dx_new, F_new, dF_new, bad
