"""Numba kernels for the planar articulated simulator.

Generalized coordinates of the character: q = [x, y, pitch, j0..j5]. Link k>0
rotates about joint DoF 2+k relative to its parent. The free box has its own
3 coordinates [x, y, angle] and is appended to form a 12-dim velocity vector
inside the contact solver.
"""
import numpy as np
from numba import njit

NDOF = 9
NV = 12

GROUND = 1
FURNITURE = 2
BOX = 4

RECT_ONEWAY = 1
RECT_SOLID = 2


@njit(cache=True)
def _rot(phi, x, y):
    c = np.cos(phi)
    s = np.sin(phi)
    return c * x - s * y, s * x + c * y


@njit(cache=True)
def link_kinematics(q, qd, parent, joint_off, O, phi, VO, om, AO):
    """Origins, angles, origin velocities, angular velocities and velocity-product
    accelerations of every link frame."""
    n = parent.shape[0]
    for k in range(n):
        if k == 0:
            O[0, 0] = q[0]
            O[0, 1] = q[1]
            phi[0] = q[2]
            om[0] = qd[2]
            VO[0, 0] = qd[0]
            VO[0, 1] = qd[1]
            AO[0, 0] = 0.0
            AO[0, 1] = 0.0
        else:
            p = parent[k]
            rx, ry = _rot(phi[p], joint_off[k, 0], joint_off[k, 1])
            O[k, 0] = O[p, 0] + rx
            O[k, 1] = O[p, 1] + ry
            VO[k, 0] = VO[p, 0] - om[p] * ry
            VO[k, 1] = VO[p, 1] + om[p] * rx
            AO[k, 0] = AO[p, 0] - om[p] * om[p] * rx
            AO[k, 1] = AO[p, 1] - om[p] * om[p] * ry
            phi[k] = phi[p] + q[2 + k]
            om[k] = om[p] + qd[2 + k]


@njit(cache=True)
def point_jacobian(k, px, py, O, anc, J):
    """2 x NDOF Jacobian of a world point rigidly attached to link k."""
    for i in range(2):
        for d in range(NDOF):
            J[i, d] = 0.0
    J[0, 0] = 1.0
    J[1, 1] = 1.0
    n = anc.shape[0]
    for m in range(n):
        if anc[k, m]:
            dx = px - O[m, 0]
            dy = py - O[m, 1]
            J[0, 2 + m] = -dy
            J[1, 2 + m] = dx


@njit(cache=True)
def mass_matrix_and_bias(q, qd, parent, joint_off, com, mass, inertia, anc, gravity, M, h):
    n = parent.shape[0]
    O = np.empty((n, 2))
    phi = np.empty(n)
    VO = np.empty((n, 2))
    om = np.empty(n)
    AO = np.empty((n, 2))
    link_kinematics(q, qd, parent, joint_off, O, phi, VO, om, AO)
    for i in range(NDOF):
        h[i] = 0.0
        for j in range(NDOF):
            M[i, j] = 0.0
    J = np.empty((2, NDOF))
    jw = np.zeros(NDOF)
    for k in range(n):
        rx, ry = _rot(phi[k], com[k, 0], com[k, 1])
        px = O[k, 0] + rx
        py = O[k, 1] + ry
        point_jacobian(k, px, py, O, anc, J)
        ax = AO[k, 0] - om[k] * om[k] * rx
        ay = AO[k, 1] - om[k] * om[k] * ry + gravity
        m = mass[k]
        for d in range(NDOF):
            jw[d] = 0.0
        for mm in range(n):
            if anc[k, mm]:
                jw[2 + mm] = 1.0
        for i in range(NDOF):
            h[i] += m * (J[0, i] * ax + J[1, i] * ay)
            for j in range(NDOF):
                M[i, j] += m * (J[0, i] * J[0, j] + J[1, i] * J[1, j]) + inertia[k] * jw[i] * jw[j]
    return O, phi, VO, om


@njit(cache=True)
def cholesky_inverse(A, out):
    n = A.shape[0]
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    # inverse of L
    Li = np.zeros((n, n))
    for i in range(n):
        Li[i, i] = 1.0 / L[i, i]
        for j in range(i):
            s = 0.0
            for k in range(j, i):
                s -= L[i, k] * Li[k, j]
            Li[i, j] = s / L[i, i]
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(max(i, j), n):
                s += Li[k, i] * Li[k, j]
            out[i, j] = s
    return True


@njit(cache=True)
def _matvec(A, x, out):
    n = A.shape[0]
    for i in range(n):
        s = 0.0
        for j in range(n):
            s += A[i, j] * x[j]
        out[i] = s


@njit(cache=True)
def _add_row(C, Jn, Jt, bias, mu, fric, jn, jt, b, m, has_fric):
    if C >= Jn.shape[0]:
        return C
    for i in range(NV):
        Jn[C, i] = jn[i]
        Jt[C, i] = jt[i]
    bias[C] = b
    mu[C] = m
    fric[C] = has_fric
    return C + 1


@njit(cache=True)
def _contact_bias(depth, dt, beta, slop):
    if depth > slop:
        return beta * (depth - slop) / dt
    if depth < 0.0:
        return depth / dt
    return 0.0


@njit(cache=True)
def substep(q, qd, bq, bqd, has_box, box_mass, box_inertia, box_half, targets,
            parent, joint_off, com, mass, inertia, anc,
            kp, kd, tau_lim, qlo, qhi,
            sph_link, sph_local, sph_r, sph_mask,
            rects, rect_flags,
            gravity, dt, mu_ground, mu_box, mu_furn, iters, beta, slop, skin, oneway_depth,
            tau_out):
    n = parent.shape[0]
    nj = kp.shape[0]
    M = np.empty((NDOF, NDOF))
    h = np.empty(NDOF)
    O, phi, VO, om = mass_matrix_and_bias(q, qd, parent, joint_off, com, mass, inertia, anc,
                                          gravity, M, h)

    # stable PD: implicit in position and velocity, with torque clamp
    clamped = np.zeros(nj, dtype=np.bool_)
    tau_fixed = np.zeros(nj)
    Meff = np.empty((NDOF, NDOF))
    Minv = np.empty((NDOF, NDOF))
    rhs = np.empty(NDOF)
    acc = np.empty(NDOF)
    for _ in range(3):
        for i in range(NDOF):
            rhs[i] = -h[i]
            for j in range(NDOF):
                Meff[i, j] = M[i, j]
        for j in range(nj):
            d = 3 + j
            if clamped[j]:
                rhs[d] += tau_fixed[j]
            else:
                Meff[d, d] += dt * kd[j] + dt * dt * kp[j]
                rhs[d] += kp[j] * (targets[j] - q[d] - dt * qd[d]) - kd[j] * qd[d]
        if not cholesky_inverse(Meff, Minv):
            return False
        _matvec(Minv, rhs, acc)
        changed = False
        for j in range(nj):
            d = 3 + j
            if clamped[j]:
                tau_out[j] = tau_fixed[j]
                continue
            vn = qd[d] + dt * acc[d]
            tau = kp[j] * (targets[j] - q[d] - dt * vn) - kd[j] * vn
            tau_out[j] = tau
            if tau > tau_lim[j]:
                clamped[j] = True
                tau_fixed[j] = tau_lim[j]
                changed = True
            elif tau < -tau_lim[j]:
                clamped[j] = True
                tau_fixed[j] = -tau_lim[j]
                changed = True
        if not changed:
            break
    if changed:
        # final solve with every violating joint clamped
        for i in range(NDOF):
            rhs[i] = -h[i]
            for j in range(NDOF):
                Meff[i, j] = M[i, j]
        for j in range(nj):
            d = 3 + j
            if clamped[j]:
                rhs[d] += tau_fixed[j]
                tau_out[j] = tau_fixed[j]
            else:
                Meff[d, d] += dt * kd[j] + dt * dt * kp[j]
                rhs[d] += kp[j] * (targets[j] - q[d] - dt * qd[d]) - kd[j] * qd[d]
        if not cholesky_inverse(Meff, Minv):
            return False
        _matvec(Minv, rhs, acc)

    V = np.empty(NV)
    for i in range(NDOF):
        V[i] = qd[i] + dt * acc[i]
    V[9] = bqd[0]
    V[10] = bqd[1] - dt * gravity
    V[11] = bqd[2]

    # ---- contact rows
    S = sph_link.shape[0]
    R = rects.shape[0]
    cmax = 3 * S + 4 * (1 + R) + 2 * R + 2 * nj + 4
    Jn = np.zeros((cmax, NV))
    Jt = np.zeros((cmax, NV))
    bias = np.zeros(cmax)
    mu = np.zeros(cmax)
    fric = np.zeros(cmax, dtype=np.bool_)
    C = 0
    Jp = np.empty((2, NDOF))
    jn = np.zeros(NV)
    jt = np.zeros(NV)
    cb = np.cos(bq[2])
    sb = np.sin(bq[2])

    for s in range(S):
        k = sph_link[s]
        rx, ry = _rot(phi[k], sph_local[s, 0], sph_local[s, 1])
        px = O[k, 0] + rx
        py = O[k, 1] + ry
        r = sph_r[s]
        mask = sph_mask[s]
        # ground
        if mask & GROUND:
            depth = r - py
            if depth > -skin:
                point_jacobian(k, px, py - r, O, anc, Jp)
                for i in range(NV):
                    jn[i] = 0.0
                    jt[i] = 0.0
                for i in range(NDOF):
                    jn[i] = Jp[1, i]
                    jt[i] = Jp[0, i]
                C = _add_row(C, Jn, Jt, bias, mu, fric, jn, jt,
                             _contact_bias(depth, dt, beta, slop), mu_ground, True)
        # furniture tops (one-way)
        if mask & FURNITURE:
            for ri in range(R):
                if not (rect_flags[ri] & RECT_ONEWAY):
                    continue
                top = rects[ri, 1] + rects[ri, 3]
                if abs(px - rects[ri, 0]) > rects[ri, 2]:
                    continue
                depth = top - (py - r)
                if depth > -skin and depth < oneway_depth:
                    point_jacobian(k, px, py - r, O, anc, Jp)
                    for i in range(NV):
                        jn[i] = 0.0
                        jt[i] = 0.0
                    for i in range(NDOF):
                        jn[i] = Jp[1, i]
                        jt[i] = Jp[0, i]
                    C = _add_row(C, Jn, Jt, bias, mu, fric, jn, jt,
                                 _contact_bias(depth, dt, beta, slop), mu_furn, True)
        # dynamic box
        if has_box and (mask & BOX):
            dxw = px - bq[0]
            dyw = py - bq[1]
            lx = cb * dxw + sb * dyw
            ly = -sb * dxw + cb * dyw
            hx = box_half[0]
            hy = box_half[1]
            cx = min(max(lx, -hx), hx)
            cy = min(max(ly, -hy), hy)
            ex = lx - cx
            ey = ly - cy
            dist = np.sqrt(ex * ex + ey * ey)
            valid = False
            if dist > 1e-12:
                if dist < r + skin:
                    nlx = ex / dist
                    nly = ey / dist
                    depth = r - dist
                    valid = True
            else:
                # centre inside the box: push out through the nearest face
                pen_x = hx - abs(lx)
                pen_y = hy - abs(ly)
                if pen_x < pen_y:
                    nlx = 1.0 if lx >= 0 else -1.0
                    nly = 0.0
                    depth = r + pen_x
                    cx = nlx * hx
                    cy = ly
                else:
                    nlx = 0.0
                    nly = 1.0 if ly >= 0 else -1.0
                    depth = r + pen_y
                    cx = lx
                    cy = nly * hy
                valid = True
            if valid:
                nx = cb * nlx - sb * nly
                ny = sb * nlx + cb * nly
                tx = -ny
                ty = nx
                qx = px - r * nx
                qy = py - r * ny
                point_jacobian(k, qx, qy, O, anc, Jp)
                for i in range(NDOF):
                    jn[i] = nx * Jp[0, i] + ny * Jp[1, i]
                    jt[i] = tx * Jp[0, i] + ty * Jp[1, i]
                # box point velocity: v + w x (p - c)
                bwx = cb * cx - sb * cy
                bwy = sb * cx + cb * cy
                jn[9] = -nx
                jn[10] = -ny
                jn[11] = -(nx * (-bwy) + ny * bwx)
                jt[9] = -tx
                jt[10] = -ty
                jt[11] = -(tx * (-bwy) + ty * bwx)
                C = _add_row(C, Jn, Jt, bias, mu, fric, jn, jt,
                             _contact_bias(depth, dt, beta, slop), mu_box, True)

    if has_box:
        hx = box_half[0]
        hy = box_half[1]
        for ci in range(4):
            sx = -1.0 if ci % 2 == 0 else 1.0
            sy = -1.0 if ci < 2 else 1.0
            ox = cb * (sx * hx) - sb * (sy * hy)
            oy = sb * (sx * hx) + cb * (sy * hy)
            wx = bq[0] + ox
            wy = bq[1] + oy
            for i in range(NV):
                jn[i] = 0.0
                jt[i] = 0.0
            # ground
            depth = -wy
            if depth > -skin:
                jn[9] = 0.0
                jn[10] = 1.0
                jn[11] = ox
                jt[9] = 1.0
                jt[10] = 0.0
                jt[11] = -oy
                C = _add_row(C, Jn, Jt, bias, mu, fric, jn, jt,
                             _contact_bias(depth, dt, beta, slop), mu_box, True)
            for ri in range(R):
                if not (rect_flags[ri] & RECT_SOLID):
                    continue
                rlx = wx - rects[ri, 0]
                rly = wy - rects[ri, 1]
                pen_r = rects[ri, 2] - rlx
                pen_l = rects[ri, 2] + rlx
                pen_t = rects[ri, 3] - rly
                pen_b = rects[ri, 3] + rly
                if pen_r > -skin and pen_l > -skin and pen_t > -skin and pen_b > -skin:
                    # nearest face determines the normal
                    nx = 1.0
                    ny = 0.0
                    depth = pen_r
                    if pen_l < depth:
                        nx, ny, depth = -1.0, 0.0, pen_l
                    if pen_t < depth:
                        nx, ny, depth = 0.0, 1.0, pen_t
                    if pen_b < depth:
                        nx, ny, depth = 0.0, -1.0, pen_b
                    tx = -ny
                    ty = nx
                    jn[9] = nx
                    jn[10] = ny
                    jn[11] = nx * (-oy) + ny * ox
                    jt[9] = tx
                    jt[10] = ty
                    jt[11] = tx * (-oy) + ty * ox
                    C = _add_row(C, Jn, Jt, bias, mu, fric, jn, jt,
                                 _contact_bias(depth, dt, beta, slop), mu_box, True)
        # top corners of solid rects against the box faces
        for ri in range(R):
            if not (rect_flags[ri] & RECT_SOLID):
                continue
            for side in range(2):
                wx = rects[ri, 0] + (rects[ri, 2] if side == 1 else -rects[ri, 2])
                wy = rects[ri, 1] + rects[ri, 3]
                dxw = wx - bq[0]
                dyw = wy - bq[1]
                lx = cb * dxw + sb * dyw
                ly = -sb * dxw + cb * dyw
                pen_x = hx - abs(lx)
                pen_y = hy - abs(ly)
                if pen_x > 0.0 and pen_y > 0.0:
                    if pen_x < pen_y:
                        nlx = 1.0 if lx >= 0 else -1.0
                        nly = 0.0
                        depth = pen_x
                    else:
                        nlx = 0.0
                        nly = 1.0 if ly >= 0 else -1.0
                        depth = pen_y
                    nx = cb * nlx - sb * nly
                    ny = sb * nlx + cb * nly
                    tx = -ny
                    ty = nx
                    for i in range(NV):
                        jn[i] = 0.0
                        jt[i] = 0.0
                    # separation velocity = -(v_box(p)) . n
                    jn[9] = -nx
                    jn[10] = -ny
                    jn[11] = -(nx * (-dyw) + ny * dxw)
                    jt[9] = -tx
                    jt[10] = -ty
                    jt[11] = -(tx * (-dyw) + ty * dxw)
                    C = _add_row(C, Jn, Jt, bias, mu, fric, jn, jt,
                                 _contact_bias(depth, dt, beta, slop), mu_box, True)

    # joint limits as unilateral constraints
    for j in range(nj):
        d = 3 + j
        for i in range(NV):
            jn[i] = 0.0
            jt[i] = 0.0
        gap_lo = q[d] - qlo[j]
        if gap_lo < skin:
            jn[d] = 1.0
            C = _add_row(C, Jn, Jt, bias, mu, fric, jn, jt,
                         _contact_bias(-gap_lo, dt, beta, 0.0), 0.0, False)
            jn[d] = 0.0
        gap_hi = qhi[j] - q[d]
        if gap_hi < skin:
            jn[d] = -1.0
            C = _add_row(C, Jn, Jt, bias, mu, fric, jn, jt,
                         _contact_bias(-gap_hi, dt, beta, 0.0), 0.0, False)
            jn[d] = 0.0

    # ---- projected Gauss-Seidel on impulses
    if C > 0:
        Wn = np.zeros((C, NV))
        Wt = np.zeros((C, NV))
        Kn = np.empty(C)
        Kt = np.empty(C)
        inv_bm = 1.0 / box_mass if has_box else 0.0
        inv_bi = 1.0 / box_inertia if has_box else 0.0
        for c in range(C):
            for i in range(NDOF):
                sn = 0.0
                st = 0.0
                for j in range(NDOF):
                    sn += Minv[i, j] * Jn[c, j]
                    st += Minv[i, j] * Jt[c, j]
                Wn[c, i] = sn
                Wt[c, i] = st
            Wn[c, 9] = inv_bm * Jn[c, 9]
            Wn[c, 10] = inv_bm * Jn[c, 10]
            Wn[c, 11] = inv_bi * Jn[c, 11]
            Wt[c, 9] = inv_bm * Jt[c, 9]
            Wt[c, 10] = inv_bm * Jt[c, 10]
            Wt[c, 11] = inv_bi * Jt[c, 11]
            sn = 0.0
            st = 0.0
            for i in range(NV):
                sn += Jn[c, i] * Wn[c, i]
                st += Jt[c, i] * Wt[c, i]
            Kn[c] = sn if sn > 1e-12 else 1e-12
            Kt[c] = st if st > 1e-12 else 1e-12
        lam_n = np.zeros(C)
        lam_t = np.zeros(C)
        for _ in range(iters):
            for c in range(C):
                vn = 0.0
                for i in range(NV):
                    vn += Jn[c, i] * V[i]
                new = lam_n[c] + (bias[c] - vn) / Kn[c]
                if new < 0.0:
                    new = 0.0
                dl = new - lam_n[c]
                lam_n[c] = new
                if dl != 0.0:
                    for i in range(NV):
                        V[i] += Wn[c, i] * dl
                if fric[c]:
                    vt = 0.0
                    for i in range(NV):
                        vt += Jt[c, i] * V[i]
                    lim = mu[c] * lam_n[c]
                    new = lam_t[c] - vt / Kt[c]
                    if new > lim:
                        new = lim
                    elif new < -lim:
                        new = -lim
                    dl = new - lam_t[c]
                    lam_t[c] = new
                    if dl != 0.0:
                        for i in range(NV):
                            V[i] += Wt[c, i] * dl

    for i in range(NDOF):
        qd[i] = V[i]
        q[i] += dt * V[i]
    if has_box:
        for i in range(3):
            bqd[i] = V[9 + i]
            bq[i] += dt * V[9 + i]
    for j in range(nj):
        d = 3 + j
        if q[d] < qlo[j]:
            q[d] = qlo[j]
            if qd[d] < 0.0:
                qd[d] = 0.0
        elif q[d] > qhi[j]:
            q[d] = qhi[j]
            if qd[d] > 0.0:
                qd[d] = 0.0
    for i in range(NDOF):
        if not np.isfinite(q[i]) or not np.isfinite(qd[i]):
            return False
    for i in range(3):
        if not np.isfinite(bq[i]) or not np.isfinite(bqd[i]):
            return False
    return True


@njit(cache=True)
def character_impulse(q, qd, parent, joint_off, com, mass, inertia, anc, k, px, py, ix, iy):
    """Velocity change of the character for an impulse (ix, iy) at world point (px, py)
    of link k: dqd = M^-1 J^T p."""
    M = np.empty((NDOF, NDOF))
    h = np.empty(NDOF)
    O, phi, VO, om = mass_matrix_and_bias(q, qd, parent, joint_off, com, mass, inertia, anc,
                                          0.0, M, h)
    Minv = np.empty((NDOF, NDOF))
    cholesky_inverse(M, Minv)
    J = np.empty((2, NDOF))
    point_jacobian(k, px, py, O, anc, J)
    gen = np.empty(NDOF)
    for i in range(NDOF):
        gen[i] = J[0, i] * ix + J[1, i] * iy
    out = np.empty(NDOF)
    _matvec(Minv, gen, out)
    return out
