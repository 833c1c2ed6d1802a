"""numba kernels for the per-substep hot path.

Everything here operates on flat numpy arrays; Python-side modules own the
data layout. Elastic passes come in serial and parallel flavors compiled from
the same implementation: constraints inside one color batch touch disjoint
vertex sets, so both produce bitwise-identical results.
"""

import math

import numpy as np
from numba import njit, prange

SQRT3 = math.sqrt(3.0)

# Shared with sdf.py (duplicated as plain ints for numba constant folding).
KIND_SPHERE = 0
KIND_CAPSULE = 1
KIND_ROUNDED_BOX = 2
OP_LEAF = 0
OP_MIN = 1
OP_SMIN = 2

_SDF_STACK = 16
_BVH_STACK = 128


# ---------------------------------------------------------------------------
# integration


@njit(cache=True)
def predict_positions(x, v, inv_mass, ext_force, gravity, dt):
    for i in range(x.shape[0]):
        w = inv_mass[i]
        if w > 0.0:
            for k in range(3):
                a = gravity[k] + w * ext_force[i, k]
                x[i, k] += v[i, k] * dt + dt * dt * a


@njit(cache=True)
def update_velocities(x, x_prev, v, inv_mass, dt, damping, speed_clamp):
    scale = max(0.0, 1.0 - damping * dt)
    inv_dt = 1.0 / dt
    for i in range(x.shape[0]):
        if inv_mass[i] > 0.0:
            vx = (x[i, 0] - x_prev[i, 0]) * inv_dt * scale
            vy = (x[i, 1] - x_prev[i, 1]) * inv_dt * scale
            vz = (x[i, 2] - x_prev[i, 2]) * inv_dt * scale
            if speed_clamp > 0.0:
                speed = math.sqrt(vx * vx + vy * vy + vz * vz)
                if speed > speed_clamp:
                    s = speed_clamp / speed
                    vx *= s
                    vy *= s
                    vz *= s
            v[i, 0] = vx
            v[i, 1] = vy
            v[i, 2] = vz
        else:
            v[i, 0] = 0.0
            v[i, 1] = 0.0
            v[i, 2] = 0.0


@njit(cache=True)
def first_nonfinite(x):
    for i in range(x.shape[0]):
        if not (np.isfinite(x[i, 0]) and np.isfinite(x[i, 1]) and np.isfinite(x[i, 2])):
            return i
    return -1


# ---------------------------------------------------------------------------
# elastic constraints (deviatoric mode 0, hydrostatic mode 1)


def _elastic_pass_impl(x, inv_mass, tets, rest_inv, alpha_tilde, lam,
                       order, bounds, mode, rest_correction):
    degenerate = 0
    for c in range(bounds.shape[0] - 1):
        for q in prange(bounds[c], bounds[c + 1]):
            t = order[q]
            i0 = tets[t, 0]
            i1 = tets[t, 1]
            i2 = tets[t, 2]
            i3 = tets[t, 3]
            x0x = x[i0, 0]
            x0y = x[i0, 1]
            x0z = x[i0, 2]
            d00 = x[i1, 0] - x0x
            d10 = x[i1, 1] - x0y
            d20 = x[i1, 2] - x0z
            d01 = x[i2, 0] - x0x
            d11 = x[i2, 1] - x0y
            d21 = x[i2, 2] - x0z
            d02 = x[i3, 0] - x0x
            d12 = x[i3, 1] - x0y
            d22 = x[i3, 2] - x0z
            b00 = rest_inv[t, 0, 0]
            b01 = rest_inv[t, 0, 1]
            b02 = rest_inv[t, 0, 2]
            b10 = rest_inv[t, 1, 0]
            b11 = rest_inv[t, 1, 1]
            b12 = rest_inv[t, 1, 2]
            b20 = rest_inv[t, 2, 0]
            b21 = rest_inv[t, 2, 1]
            b22 = rest_inv[t, 2, 2]
            f00 = d00 * b00 + d01 * b10 + d02 * b20
            f01 = d00 * b01 + d01 * b11 + d02 * b21
            f02 = d00 * b02 + d01 * b12 + d02 * b22
            f10 = d10 * b00 + d11 * b10 + d12 * b20
            f11 = d10 * b01 + d11 * b11 + d12 * b21
            f12 = d10 * b02 + d11 * b12 + d12 * b22
            f20 = d20 * b00 + d21 * b10 + d22 * b20
            f21 = d20 * b01 + d21 * b11 + d22 * b21
            f22 = d20 * b02 + d21 * b12 + d22 * b22
            if mode == 0:
                fn = math.sqrt(
                    f00 * f00 + f01 * f01 + f02 * f02
                    + f10 * f10 + f11 * f11 + f12 * f12
                    + f20 * f20 + f21 * f21 + f22 * f22
                )
                if fn < 1e-9:
                    degenerate += 1
                    continue
                cval = fn - SQRT3
                s = 1.0 / fn
                g00 = f00 * s
                g01 = f01 * s
                g02 = f02 * s
                g10 = f10 * s
                g11 = f11 * s
                g12 = f12 * s
                g20 = f20 * s
                g21 = f21 * s
                g22 = f22 * s
            else:
                cval = (
                    f00 * (f11 * f22 - f12 * f21)
                    - f01 * (f10 * f22 - f12 * f20)
                    + f02 * (f10 * f21 - f11 * f20)
                ) - 1.0 - rest_correction
                g00 = f11 * f22 - f12 * f21
                g10 = f12 * f20 - f10 * f22
                g20 = f10 * f21 - f11 * f20
                g01 = f21 * f02 - f22 * f01
                g11 = f22 * f00 - f20 * f02
                g21 = f20 * f01 - f21 * f00
                g02 = f01 * f12 - f02 * f11
                g12 = f02 * f10 - f00 * f12
                g22 = f00 * f11 - f01 * f10
            # chain dC/dF through F = D_s B: columns of G B^T are the
            # gradients w.r.t. x1, x2, x3; x0 gets minus their sum.
            p00 = g00 * b00 + g01 * b01 + g02 * b02
            p01 = g00 * b10 + g01 * b11 + g02 * b12
            p02 = g00 * b20 + g01 * b21 + g02 * b22
            p10 = g10 * b00 + g11 * b01 + g12 * b02
            p11 = g10 * b10 + g11 * b11 + g12 * b12
            p12 = g10 * b20 + g11 * b21 + g12 * b22
            p20 = g20 * b00 + g21 * b01 + g22 * b02
            p21 = g20 * b10 + g21 * b11 + g22 * b12
            p22 = g20 * b20 + g21 * b21 + g22 * b22
            q0x = -(p00 + p01 + p02)
            q0y = -(p10 + p11 + p12)
            q0z = -(p20 + p21 + p22)
            w0 = inv_mass[i0]
            w1 = inv_mass[i1]
            w2 = inv_mass[i2]
            w3 = inv_mass[i3]
            at = alpha_tilde[t]
            denom = (
                w0 * (q0x * q0x + q0y * q0y + q0z * q0z)
                + w1 * (p00 * p00 + p10 * p10 + p20 * p20)
                + w2 * (p01 * p01 + p11 * p11 + p21 * p21)
                + w3 * (p02 * p02 + p12 * p12 + p22 * p22)
                + at
            )
            if denom < 1e-12:
                degenerate += 1
                continue
            dlam = (-cval - at * lam[t]) / denom
            lam[t] += dlam
            x[i0, 0] += w0 * dlam * q0x
            x[i0, 1] += w0 * dlam * q0y
            x[i0, 2] += w0 * dlam * q0z
            x[i1, 0] += w1 * dlam * p00
            x[i1, 1] += w1 * dlam * p10
            x[i1, 2] += w1 * dlam * p20
            x[i2, 0] += w2 * dlam * p01
            x[i2, 1] += w2 * dlam * p11
            x[i2, 2] += w2 * dlam * p21
            x[i3, 0] += w3 * dlam * p02
            x[i3, 1] += w3 * dlam * p12
            x[i3, 2] += w3 * dlam * p22
    return degenerate


elastic_pass_serial = njit(cache=True)(_elastic_pass_impl)
elastic_pass_parallel = njit(cache=True, parallel=True)(_elastic_pass_impl)


@njit(cache=True)
def solve_attachments(x, inv_mass, att_vert, att_target, att_alpha_tilde, att_lam,
                      att_active, att_dir):
    for a in range(att_vert.shape[0]):
        if not att_active[a]:
            continue
        i = att_vert[a]
        w = inv_mass[i]
        dx = x[i, 0] - att_target[a, 0]
        dy = x[i, 1] - att_target[a, 1]
        dz = x[i, 2] - att_target[a, 2]
        dist = math.sqrt(dx * dx + dy * dy + dz * dz)
        at = att_alpha_tilde[a]
        denom = w + at
        if denom < 1e-12 or dist < 1e-15:
            continue
        nx = dx / dist
        ny = dy / dist
        nz = dz / dist
        # the force readout needs the projection direction even when the
        # vertex ends exactly on target
        att_dir[a, 0] = nx
        att_dir[a, 1] = ny
        att_dir[a, 2] = nz
        dlam = (-dist - at * att_lam[a]) / denom
        att_lam[a] += dlam
        x[i, 0] += w * dlam * nx
        x[i, 1] += w * dlam * ny
        x[i, 2] += w * dlam * nz


# ---------------------------------------------------------------------------
# SDF evaluation (stack machine over a compiled shape program)


@njit(cache=True, inline="always")
def _leaf_sdf(leaf_kind, leaf_params, leaf_rot, leaf_trans, li, px, py, pz):
    kind = leaf_kind[li]
    dx = px - leaf_trans[li, 0]
    dy = py - leaf_trans[li, 1]
    dz = pz - leaf_trans[li, 2]
    lx = leaf_rot[li, 0, 0] * dx + leaf_rot[li, 0, 1] * dy + leaf_rot[li, 0, 2] * dz
    ly = leaf_rot[li, 1, 0] * dx + leaf_rot[li, 1, 1] * dy + leaf_rot[li, 1, 2] * dz
    lz = leaf_rot[li, 2, 0] * dx + leaf_rot[li, 2, 1] * dy + leaf_rot[li, 2, 2] * dz
    if kind == KIND_SPHERE:
        r = math.sqrt(lx * lx + ly * ly + lz * lz)
        if r < 1e-12:
            gx, gy, gz = 1.0, 0.0, 0.0
        else:
            gx, gy, gz = lx / r, ly / r, lz / r
        d = r - leaf_params[li, 0]
    elif kind == KIND_CAPSULE:
        t = lz
        if t < 0.0:
            t = 0.0
        elif t > leaf_params[li, 1]:
            t = leaf_params[li, 1]
        qx, qy, qz = lx, ly, lz - t
        r = math.sqrt(qx * qx + qy * qy + qz * qz)
        if r < 1e-12:
            gx, gy, gz = 1.0, 0.0, 0.0
        else:
            gx, gy, gz = qx / r, qy / r, qz / r
        d = r - leaf_params[li, 0]
    else:
        rr = leaf_params[li, 3]
        hx = leaf_params[li, 0] - rr
        hy = leaf_params[li, 1] - rr
        hz = leaf_params[li, 2] - rr
        ax = abs(lx) - hx
        ay = abs(ly) - hy
        az = abs(lz) - hz
        sx = 1.0 if lx >= 0.0 else -1.0
        sy = 1.0 if ly >= 0.0 else -1.0
        sz = 1.0 if lz >= 0.0 else -1.0
        ox = ax if ax > 0.0 else 0.0
        oy = ay if ay > 0.0 else 0.0
        oz = az if az > 0.0 else 0.0
        olen = math.sqrt(ox * ox + oy * oy + oz * oz)
        mx = ax
        if ay > mx:
            mx = ay
        if az > mx:
            mx = az
        if olen > 0.0:
            d = olen + (mx if mx < 0.0 else 0.0) - rr
            gx, gy, gz = sx * ox / olen, sy * oy / olen, sz * oz / olen
        else:
            d = mx - rr
            if ax >= ay and ax >= az:
                gx, gy, gz = sx, 0.0, 0.0
            elif ay >= az:
                gx, gy, gz = 0.0, sy, 0.0
            else:
                gx, gy, gz = 0.0, 0.0, sz
    # gradient back to world: rot^T g
    wx = leaf_rot[li, 0, 0] * gx + leaf_rot[li, 1, 0] * gy + leaf_rot[li, 2, 0] * gz
    wy = leaf_rot[li, 0, 1] * gx + leaf_rot[li, 1, 1] * gy + leaf_rot[li, 2, 1] * gz
    wz = leaf_rot[li, 0, 2] * gx + leaf_rot[li, 1, 2] * gy + leaf_rot[li, 2, 2] * gz
    return d, wx, wy, wz


@njit(cache=True)
def eval_sdf(ops, op_smooth, leaf_kind, leaf_params, leaf_rot, leaf_trans, px, py, pz, sd, sg):
    top = 0
    for k in range(ops.shape[0]):
        code = ops[k, 0]
        if code == OP_LEAF:
            li = ops[k, 1]
            d, gx, gy, gz = _leaf_sdf(
                leaf_kind, leaf_params, leaf_rot, leaf_trans, li, px, py, pz
            )
            sd[top] = d
            sg[top, 0] = gx
            sg[top, 1] = gy
            sg[top, 2] = gz
            top += 1
        else:
            d2 = sd[top - 1]
            d1 = sd[top - 2]
            if code == OP_MIN:
                if d2 < d1:
                    sd[top - 2] = d2
                    sg[top - 2, 0] = sg[top - 1, 0]
                    sg[top - 2, 1] = sg[top - 1, 1]
                    sg[top - 2, 2] = sg[top - 1, 2]
            else:
                kk = op_smooth[k]
                h = 0.5 + 0.5 * (d2 - d1) / kk
                if h < 0.0:
                    h = 0.0
                elif h > 1.0:
                    h = 1.0
                sd[top - 2] = d2 * (1.0 - h) + d1 * h - kk * h * (1.0 - h)
                gx = sg[top - 1, 0] * (1.0 - h) + sg[top - 2, 0] * h
                gy = sg[top - 1, 1] * (1.0 - h) + sg[top - 2, 1] * h
                gz = sg[top - 1, 2] * (1.0 - h) + sg[top - 2, 2] * h
                glen = math.sqrt(gx * gx + gy * gy + gz * gz)
                if glen < 1e-12:
                    gx, gy, gz = 1.0, 0.0, 0.0
                else:
                    gx, gy, gz = gx / glen, gy / glen, gz / glen
                sg[top - 2, 0] = gx
                sg[top - 2, 1] = gy
                sg[top - 2, 2] = gz
            top -= 1
    return sd[0], sg[0, 0], sg[0, 1], sg[0, 2]


# ---------------------------------------------------------------------------
# BVH refit and query (preorder layout: children always after parent)


@njit(cache=True)
def refit_bvh(node_left, node_right, node_elem, node_min, node_max,
              elem_nv, elem_vids, x, margin):
    n = node_left.shape[0]
    for i in range(n - 1, -1, -1):
        e = node_elem[i]
        if e >= 0:
            v0 = elem_vids[e, 0]
            lox = x[v0, 0]
            loy = x[v0, 1]
            loz = x[v0, 2]
            hix, hiy, hiz = lox, loy, loz
            for c in range(1, elem_nv[e]):
                vc = elem_vids[e, c]
                if x[vc, 0] < lox:
                    lox = x[vc, 0]
                if x[vc, 1] < loy:
                    loy = x[vc, 1]
                if x[vc, 2] < loz:
                    loz = x[vc, 2]
                if x[vc, 0] > hix:
                    hix = x[vc, 0]
                if x[vc, 1] > hiy:
                    hiy = x[vc, 1]
                if x[vc, 2] > hiz:
                    hiz = x[vc, 2]
            node_min[i, 0] = lox - margin
            node_min[i, 1] = loy - margin
            node_min[i, 2] = loz - margin
            node_max[i, 0] = hix + margin
            node_max[i, 1] = hiy + margin
            node_max[i, 2] = hiz + margin
        else:
            l = node_left[i]
            r = node_right[i]
            for k in range(3):
                node_min[i, k] = min(node_min[l, k], node_min[r, k])
                node_max[i, k] = max(node_max[l, k], node_max[r, k])


@njit(cache=True)
def query_bvh(node_left, node_right, node_elem, node_min, node_max, qmin, qmax, out):
    if node_left.shape[0] == 0:
        return 0
    stack = np.empty(_BVH_STACK, dtype=np.int64)
    stack[0] = 0
    top = 1
    count = 0
    while top > 0:
        top -= 1
        i = stack[top]
        if (
            node_min[i, 0] > qmax[0] or node_max[i, 0] < qmin[0]
            or node_min[i, 1] > qmax[1] or node_max[i, 1] < qmin[1]
            or node_min[i, 2] > qmax[2] or node_max[i, 2] < qmin[2]
        ):
            continue
        e = node_elem[i]
        if e >= 0:
            if count < out.shape[0]:
                out[count] = e
            count += 1
        else:
            # push right first so the left subtree is visited first
            stack[top] = node_right[i]
            top += 1
            stack[top] = node_left[i]
            top += 1
    return count


# ---------------------------------------------------------------------------
# narrow phase: projected gradient over the barycentric simplex


@njit(cache=True)
def _project_simplex3(u0, u1, u2, nv):
    if nv == 1:
        return 1.0, 0.0, 0.0
    if nv == 2:
        # 1-simplex: shift so coordinates sum to 1, then clamp
        tau = (u0 + u1 - 1.0) / 2.0
        b0 = u0 - tau
        if b0 < 0.0:
            b0 = 0.0
        elif b0 > 1.0:
            b0 = 1.0
        return b0, 1.0 - b0, 0.0
    # sort descending (3 elements)
    a, b, c = u0, u1, u2
    if a < b:
        a, b = b, a
    if b < c:
        b, c = c, b
    if a < b:
        a, b = b, a
    css = a - 1.0
    rho = 1
    tau = css
    css += b
    if b - css / 2.0 > 0.0:
        rho = 2
        tau = css / 2.0
    css += c
    if c - css / 3.0 > 0.0:
        rho = 3
        tau = css / 3.0
    b0 = u0 - tau
    b1 = u1 - tau
    b2 = u2 - tau
    if b0 < 0.0:
        b0 = 0.0
    if b1 < 0.0:
        b1 = 0.0
    if b2 < 0.0:
        b2 = 0.0
    return b0, b1, b2


# deterministic start points: centroid, corners, then edge midpoints
_START_B0 = np.array([1.0 / 3.0, 1.0, 0.0, 0.0, 0.5, 0.5, 0.0])
_START_B1 = np.array([1.0 / 3.0, 0.0, 1.0, 0.0, 0.5, 0.0, 0.5])
_START_B2 = np.array([1.0 / 3.0, 0.0, 0.0, 1.0, 0.0, 0.5, 0.5])


@njit(cache=True)
def closest_point_on_element(ex, nv, ops, op_smooth, leaf_kind, leaf_params,
                             leaf_rot, leaf_trans, iterations):
    """Minimize the SDF over the convex hull of up to 3 element vertices.

    Fixed-iteration projected gradient with backtracking step halving,
    restarted from the centroid, corners, and edge midpoints (composite SDFs
    are non-convex over the element). Steps are taken in simplex units along
    the normalized barycentric gradient. Returns (b0, b1, b2, phi, nx, ny, nz,
    converged); converged is False when the cap was hit while still improving.
    """
    sd = np.empty(_SDF_STACK)
    sg = np.empty((_SDF_STACK, 3))
    cx = 0.0
    cy = 0.0
    cz = 0.0
    for i in range(nv):
        cx += ex[i, 0]
        cy += ex[i, 1]
        cz += ex[i, 2]
    cx /= nv
    cy /= nv
    cz /= nv
    diam = 0.0
    for i in range(nv):
        for j in range(i + 1, nv):
            dx = ex[i, 0] - ex[j, 0]
            dy = ex[i, 1] - ex[j, 1]
            dz = ex[i, 2] - ex[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 > diam:
                diam = d2
    diam = math.sqrt(diam)

    best_phi = 1e300
    bb0 = 1.0
    bb1 = 0.0
    bb2 = 0.0
    best_conv = True
    if nv == 1:
        n_starts = 1
    elif nv == 2:
        n_starts = 3  # centroid (midpoint) and both endpoints
    else:
        n_starts = 7
    for s in range(n_starts):
        b0 = _START_B0[s]
        b1 = _START_B1[s]
        b2 = _START_B2[s]
        if nv == 1:
            b0, b1, b2 = 1.0, 0.0, 0.0
        elif nv == 2:
            if s == 0:
                b0, b1, b2 = 0.5, 0.5, 0.0
            elif s == 1:
                b0, b1, b2 = 1.0, 0.0, 0.0
            else:
                b0, b1, b2 = 0.0, 1.0, 0.0
        px = b0 * ex[0, 0] + b1 * ex[1, 0] + b2 * ex[2, 0]
        py = b0 * ex[0, 1] + b1 * ex[1, 1] + b2 * ex[2, 1]
        pz = b0 * ex[0, 2] + b1 * ex[1, 2] + b2 * ex[2, 2]
        phi, gx, gy, gz = eval_sdf(
            ops, op_smooth, leaf_kind, leaf_params, leaf_rot, leaf_trans, px, py, pz, sd, sg
        )
        if phi - diam > best_phi:
            continue  # 1-Lipschitz bound: this start cannot beat the best
        eta = 0.5  # simplex units
        conv = True
        it = 0
        while it < iterations and nv > 1:
            it += 1
            # gradient in barycentric space, relative to the centroid so a
            # uniform shift (normal to the simplex) drops out
            gb0 = gx * (ex[0, 0] - cx) + gy * (ex[0, 1] - cy) + gz * (ex[0, 2] - cz)
            gb1 = gx * (ex[1, 0] - cx) + gy * (ex[1, 1] - cy) + gz * (ex[1, 2] - cz)
            gb2 = gx * (ex[2, 0] - cx) + gy * (ex[2, 1] - cy) + gz * (ex[2, 2] - cz)
            gnorm = math.sqrt(gb0 * gb0 + gb1 * gb1 + gb2 * gb2)
            if gnorm < 1e-14:
                break
            ux = gb0 / gnorm
            uy = gb1 / gnorm
            uz = gb2 / gnorm
            step = eta
            accepted = False
            for _half in range(10):
                t0, t1, t2 = _project_simplex3(b0 - step * ux, b1 - step * uy,
                                               b2 - step * uz, nv)
                tx = t0 * ex[0, 0] + t1 * ex[1, 0] + t2 * ex[2, 0]
                ty = t0 * ex[0, 1] + t1 * ex[1, 1] + t2 * ex[2, 1]
                tz = t0 * ex[0, 2] + t1 * ex[1, 2] + t2 * ex[2, 2]
                tphi, tgx, tgy, tgz = eval_sdf(
                    ops, op_smooth, leaf_kind, leaf_params, leaf_rot, leaf_trans, tx, ty, tz,
                    sd, sg,
                )
                if tphi < phi:
                    b0, b1, b2 = t0, t1, t2
                    px, py, pz = tx, ty, tz
                    phi, gx, gy, gz = tphi, tgx, tgy, tgz
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            eta = min(step * 2.0, 1.0)  # warm-start the next line search
            if step < 1e-4:
                break  # sub-1e-4-of-element movement: below contact tolerances
            if it == iterations:
                conv = False  # still improving at the iteration cap
        if phi < best_phi:
            best_phi = phi
            bb0, bb1, bb2 = b0, b1, b2
            best_conv = conv
    px = bb0 * ex[0, 0] + bb1 * ex[1, 0] + bb2 * ex[2, 0]
    py = bb0 * ex[0, 1] + bb1 * ex[1, 1] + bb2 * ex[2, 1]
    pz = bb0 * ex[0, 2] + bb1 * ex[1, 2] + bb2 * ex[2, 2]
    phi, gx, gy, gz = eval_sdf(
        ops, op_smooth, leaf_kind, leaf_params, leaf_rot, leaf_trans, px, py, pz, sd, sg
    )
    return bb0, bb1, bb2, phi, gx, gy, gz, best_conv


@njit(cache=True)
def narrowphase(candidates, n_candidates, elem_nv, elem_vids, x,
                ops, op_smooth, leaf_kind, leaf_params, leaf_rot, leaf_trans,
                iterations, cull_margin, out_bary, out_phi, out_normal, out_conv):
    ex = np.zeros((3, 3))
    sd = np.empty(_SDF_STACK)
    sg = np.empty((_SDF_STACK, 3))
    for ci in range(n_candidates):
        e = candidates[ci]
        nv = elem_nv[e]
        cx = 0.0
        cy = 0.0
        cz = 0.0
        for i in range(nv):
            vi = elem_vids[e, i]
            ex[i, 0] = x[vi, 0]
            ex[i, 1] = x[vi, 1]
            ex[i, 2] = x[vi, 2]
            cx += ex[i, 0]
            cy += ex[i, 1]
            cz += ex[i, 2]
        cx /= nv
        cy /= nv
        cz /= nv
        # Lipschitz cull: the SDF is 1-Lipschitz, so phi anywhere on the
        # element is at least phi(centroid) minus the element radius.
        if np.isfinite(cull_margin):
            r = 0.0
            for i in range(nv):
                dx = ex[i, 0] - cx
                dy = ex[i, 1] - cy
                dz = ex[i, 2] - cz
                r2 = dx * dx + dy * dy + dz * dz
                if r2 > r:
                    r = r2
            r = math.sqrt(r)
            phi_c, gx, gy, gz = eval_sdf(
                ops, op_smooth, leaf_kind, leaf_params, leaf_rot, leaf_trans, cx, cy, cz,
                sd, sg,
            )
            if phi_c - r > cull_margin:
                inv = 1.0 / nv
                out_bary[ci, 0] = inv
                out_bary[ci, 1] = inv if nv > 1 else 0.0
                out_bary[ci, 2] = inv if nv > 2 else 0.0
                out_phi[ci] = phi_c - r
                out_normal[ci, 0] = gx
                out_normal[ci, 1] = gy
                out_normal[ci, 2] = gz
                out_conv[ci] = True
                continue
        b0, b1, b2, phi, gx, gy, gz, conv = closest_point_on_element(
            ex, nv, ops, op_smooth, leaf_kind, leaf_params, leaf_rot, leaf_trans, iterations
        )
        out_bary[ci, 0] = b0
        out_bary[ci, 1] = b1
        out_bary[ci, 2] = b2
        out_phi[ci] = phi
        out_normal[ci, 0] = gx
        out_normal[ci, 1] = gy
        out_normal[ci, 2] = gz
        out_conv[ci] = conv


# ---------------------------------------------------------------------------
# contact projection with Coulomb friction


@njit(cache=True)
def solve_contacts(x, x_prev, inv_mass, con_nv, con_vids, con_bary,
                   ops, op_smooth, leaf_kind, leaf_params, leaf_rot, leaf_trans,
                   friction_coeff, alpha_tilde, lam_n,
                   acc_normal, acc_tangent, force_accum, inv_dt2):
    """Sequential unilateral projection + position-level friction.

    Re-evaluates the SDF at each contact's current barycentric point, pushes
    along the outward normal with lam_n clamped >= 0, then removes tangential
    drift relative to the previous substep up to the friction cone. Forces on
    the tool (reaction) accumulate into force_accum.
    """
    sd = np.empty(_SDF_STACK)
    sg = np.empty((_SDF_STACK, 3))
    for c in range(con_nv.shape[0]):
        nv = con_nv[c]
        px = 0.0
        py = 0.0
        pz = 0.0
        wsum = 0.0
        for i in range(nv):
            vi = con_vids[c, i]
            b = con_bary[c, i]
            px += b * x[vi, 0]
            py += b * x[vi, 1]
            pz += b * x[vi, 2]
            wsum += inv_mass[vi] * b * b
        phi, nx, ny, nz = eval_sdf(
            ops, op_smooth, leaf_kind, leaf_params, leaf_rot, leaf_trans, px, py, pz, sd, sg
        )
        denom = wsum + alpha_tilde
        if phi >= 0.0 or denom < 1e-12:
            continue
        dlam = (-phi - alpha_tilde * lam_n[c]) / denom
        if lam_n[c] + dlam < 0.0:
            dlam = -lam_n[c]
        lam_n[c] += dlam
        for i in range(nv):
            vi = con_vids[c, i]
            wb = inv_mass[vi] * con_bary[c, i] * dlam
            x[vi, 0] += wb * nx
            x[vi, 1] += wb * ny
            x[vi, 2] += wb * nz
        normal_push = dlam * wsum
        acc_normal[c] += normal_push
        force_accum[0] -= dlam * nx * inv_dt2
        force_accum[1] -= dlam * ny * inv_dt2
        force_accum[2] -= dlam * nz * inv_dt2
        if friction_coeff <= 0.0 or normal_push <= 0.0 or wsum < 1e-12:
            continue
        # tangential displacement of the contact point since substep start
        mx = 0.0
        my = 0.0
        mz = 0.0
        for i in range(nv):
            vi = con_vids[c, i]
            b = con_bary[c, i]
            mx += b * (x[vi, 0] - x_prev[vi, 0])
            my += b * (x[vi, 1] - x_prev[vi, 1])
            mz += b * (x[vi, 2] - x_prev[vi, 2])
        dot = mx * nx + my * ny + mz * nz
        tx = mx - dot * nx
        ty = my - dot * ny
        tz = mz - dot * nz
        tlen = math.sqrt(tx * tx + ty * ty + tz * tz)
        if tlen < 1e-15:
            continue
        cap = friction_coeff * normal_push
        scale = 1.0 if tlen <= cap else cap / tlen
        corr = tlen * scale
        lam_t = corr / wsum
        ux = -tx / tlen
        uy = -ty / tlen
        uz = -tz / tlen
        for i in range(nv):
            vi = con_vids[c, i]
            wb = inv_mass[vi] * con_bary[c, i] * lam_t
            x[vi, 0] += wb * ux
            x[vi, 1] += wb * uy
            x[vi, 2] += wb * uz
        acc_tangent[c] += corr
        force_accum[0] -= lam_t * ux * inv_dt2
        force_accum[1] -= lam_t * uy * inv_dt2
        force_accum[2] -= lam_t * uz * inv_dt2


# ---------------------------------------------------------------------------
# misc helpers used by the engine


@njit(cache=True)
def points_inside_sdf(points, indices, n_indices, ops, op_smooth, leaf_kind,
                      leaf_params, leaf_rot, leaf_trans, threshold, out):
    sd = np.empty(_SDF_STACK)
    sg = np.empty((_SDF_STACK, 3))
    count = 0
    for k in range(n_indices):
        i = indices[k]
        d, _, _, _ = eval_sdf(
            ops, op_smooth, leaf_kind, leaf_params, leaf_rot, leaf_trans,
            points[i, 0], points[i, 1], points[i, 2], sd, sg,
        )
        if d < threshold:
            out[count] = i
            count += 1
    return count


@njit(cache=True)
def greedy_tet_coloring(tets, n_verts):
    """Greedy graph coloring of tets conflicting on shared vertices."""
    n_tets = tets.shape[0]
    counts = np.zeros(n_verts, dtype=np.int64)
    for t in range(n_tets):
        for c in range(4):
            counts[tets[t, c]] += 1
    offs = np.zeros(n_verts + 1, dtype=np.int64)
    for v in range(n_verts):
        offs[v + 1] = offs[v] + counts[v]
    incident = np.zeros(offs[n_verts], dtype=np.int64)
    cursor = offs[:n_verts].copy()
    for t in range(n_tets):
        for c in range(4):
            v = tets[t, c]
            incident[cursor[v]] = t
            cursor[v] += 1
    colors = np.full(n_tets, -1, dtype=np.int64)
    used = np.zeros(4096, dtype=np.int64)
    for t in range(n_tets):
        stamp = t + 1
        for c in range(4):
            v = tets[t, c]
            for q in range(offs[v], offs[v + 1]):
                other = colors[incident[q]]
                if other >= 0:
                    used[other] = stamp
        col = 0
        while used[col] == stamp:
            col += 1
        colors[t] = col
    return colors
