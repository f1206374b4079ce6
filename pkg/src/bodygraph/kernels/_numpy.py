"""Pure-numpy implementations of the hot kernels.

Same contracts as the compiled module in ``_native.pyx``; used when the
extension is unavailable or when BODYGRAPH_PURE=1 is set.
"""

import numpy as np

MIN_DEPTH = 1e-6


def project_radtan(P, fx, fy, cx, cy, k1, k2, p1, p2):
    """Pinhole + radial-tangential projection of camera-frame points.

    Returns (uv (N,2), J (N,2,3), valid (N,)). Rows with depth <= MIN_DEPTH
    are flagged invalid and left zero.
    """
    P = np.ascontiguousarray(P, dtype=np.float64).reshape(-1, 3)
    n = P.shape[0]
    uv = np.zeros((n, 2))
    J = np.zeros((n, 2, 3))
    valid = P[:, 2] > MIN_DEPTH
    if not np.any(valid):
        return uv, J, valid

    X, Y, Z = P[valid, 0], P[valid, 1], P[valid, 2]
    iz = 1.0 / Z
    x, y = X * iz, Y * iz
    r2 = x * x + y * y
    rad = 1.0 + k1 * r2 + k2 * r2 * r2
    drad = k1 + 2.0 * k2 * r2  # d(rad)/d(r2)
    xd = x * rad + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * rad + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    uv[valid, 0] = fx * xd + cx
    uv[valid, 1] = fy * yd + cy

    dxd_dx = rad + 2.0 * x * x * drad + 2.0 * p1 * y + 6.0 * p2 * x
    dxd_dy = 2.0 * x * y * drad + 2.0 * p1 * x + 2.0 * p2 * y
    dyd_dx = 2.0 * x * y * drad + 2.0 * p1 * x + 2.0 * p2 * y
    dyd_dy = rad + 2.0 * y * y * drad + 6.0 * p1 * y + 2.0 * p2 * x

    # chain with d(x,y)/dP = [[1/Z, 0, -X/Z^2], [0, 1/Z, -Y/Z^2]]
    J[valid, 0, 0] = fx * dxd_dx * iz
    J[valid, 0, 1] = fx * dxd_dy * iz
    J[valid, 0, 2] = -fx * (dxd_dx * x + dxd_dy * y) * iz
    J[valid, 1, 0] = fy * dyd_dx * iz
    J[valid, 1, 1] = fy * dyd_dy * iz
    J[valid, 1, 2] = -fy * (dyd_dx * x + dyd_dy * y) * iz
    return uv, J, valid


def project_equidistant(P, fx, fy, cx, cy, k1, k2, k3, k4):
    """Pinhole + equidistant (fisheye) projection; same returns as radtan."""
    P = np.ascontiguousarray(P, dtype=np.float64).reshape(-1, 3)
    n = P.shape[0]
    uv = np.zeros((n, 2))
    J = np.zeros((n, 2, 3))
    valid = P[:, 2] > MIN_DEPTH
    if not np.any(valid):
        return uv, J, valid

    X, Y, Z = P[valid, 0], P[valid, 1], P[valid, 2]
    iz = 1.0 / Z
    x, y = X * iz, Y * iz
    r2 = x * x + y * y
    r = np.sqrt(r2)
    small = r < 1e-8

    th = np.arctan(r)
    th2 = th * th
    poly = 1.0 + th2 * (k1 + th2 * (k2 + th2 * (k3 + th2 * k4)))
    dpoly = 1.0 + th2 * (3.0 * k1 + th2 * (5.0 * k2 + th2 * (7.0 * k3 + th2 * 9.0 * k4)))
    thd = th * poly

    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small, 1.0, thd / np.where(small, 1.0, r))
        dth_dr = 1.0 / (1.0 + r2)
        # g = (ds/dr)/r, finite limit 2*(k1 - 1/3) at r -> 0
        g = np.where(small, 2.0 * (k1 - 1.0 / 3.0),
                     (dpoly * dth_dr * r - thd) / np.where(small, 1.0, r2 * r))

    xd, yd = s * x, s * y
    uv[valid, 0] = fx * xd + cx
    uv[valid, 1] = fy * yd + cy

    dxd_dx = s + x * x * g
    dxd_dy = x * y * g
    dyd_dx = x * y * g
    dyd_dy = s + y * y * g

    J[valid, 0, 0] = fx * dxd_dx * iz
    J[valid, 0, 1] = fx * dxd_dy * iz
    J[valid, 0, 2] = -fx * (dxd_dx * x + dxd_dy * y) * iz
    J[valid, 1, 0] = fy * dyd_dx * iz
    J[valid, 1, 1] = fy * dyd_dy * iz
    J[valid, 1, 2] = -fy * (dyd_dx * x + dyd_dy * y) * iz
    return uv, J, valid


def _rodrigues_batch(v):
    """Rotation matrices for a (B, M, 3) array of axis-angle vectors."""
    shp = v.shape[:-1]
    v = v.reshape(-1, 3)
    angle = np.linalg.norm(v, axis=1)
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    k = v / safe[:, None]
    K = np.zeros((v.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
    K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
    sa = np.sin(angle)[:, None, None]
    ca = (1.0 - np.cos(angle))[:, None, None]
    R = np.eye(3) + sa * K + ca * (K @ K)
    # first-order fallback keeps derivatives smooth near zero
    R_small = np.eye(3) + _skew_batch(v)
    R = np.where(small[:, None, None], R_small, R)
    return R.reshape(shp + (3, 3))


def _skew_batch(v):
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def _right_jacobian_batch(v):
    shp = v.shape[:-1]
    v = v.reshape(-1, 3)
    angle = np.linalg.norm(v, axis=1)
    S = _skew_batch(v)
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    a2 = safe * safe
    c1 = np.where(small, 0.5, (1.0 - np.cos(safe)) / a2)
    c2 = np.where(small, 1.0 / 6.0, (safe - np.sin(safe)) / (a2 * safe))
    J = np.eye(3) - c1[:, None, None] * S + c2[:, None, None] * (S @ S)
    return J.reshape(shp + (3, 3))


def fk_chain(parents, rest, theta, want_jac):
    """Forward kinematics down a joint tree, batched over B samples.

    parents: (J,) int64, parents[0] == -1, parents[j] < j
    rest:    (B, J, 3) rest joint positions
    theta:   (B, J-1, 3) axis-angle rotations of joints 1..J-1 in parent frame
    Returns (pos (B,J,3), Rw (B,J,3,3), Jpos (B,J,3,3*(J-1)) or None).
    Jpos columns follow theta layout; derivatives wrt rest positions are the
    caller's business (chain with d rest/d beta).
    """
    parents = np.asarray(parents, dtype=np.int64)
    rest = np.asarray(rest, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    B, J = rest.shape[0], rest.shape[1]
    nt = 3 * (J - 1)

    Rloc = _rodrigues_batch(theta)  # (B, J-1, 3, 3)
    pos = np.zeros((B, J, 3))
    Rw = np.zeros((B, J, 3, 3))
    pos[:, 0] = rest[:, 0]
    Rw[:, 0] = np.eye(3)

    Jpos = np.zeros((B, J, 3, nt)) if want_jac else None
    # world-frame rotation-axis Jacobians of each joint frame
    A = np.zeros((B, J, 3, nt)) if want_jac else None
    if want_jac:
        Jr = _right_jacobian_batch(theta)  # (B, J-1, 3, 3)

    for j in range(1, J):
        p = parents[j]
        t = rest[:, j] - rest[:, p]  # (B,3)
        rt = np.einsum("bij,bj->bi", Rw[:, p], t)
        pos[:, j] = pos[:, p] + rt
        Rw[:, j] = Rw[:, p] @ Rloc[:, j - 1]
        if want_jac:
            # d(Rw_p t) = A_p d x (Rw_p t) = -[Rw_p t]^x A_p
            Jpos[:, j] = Jpos[:, p] - _skew_batch(rt) @ A[:, p]
            A[:, j] = A[:, p]
            col = 3 * (j - 1)
            A[:, j, :, col:col + 3] += Rw[:, j] @ Jr[:, j - 1]
    return pos, Rw, Jpos


def fk_rest_jacobian(parents, Rw, rest_jac):
    """d(joint positions)/d(shape coeffs) given per-joint frame rotations.

    Rw: (B, J, 3, 3) from fk_chain; rest_jac: (J, 3, K). Returns (B, J, 3, K).
    """
    parents = np.asarray(parents, dtype=np.int64)
    B, J = Rw.shape[0], Rw.shape[1]
    K = rest_jac.shape[2]
    out = np.zeros((B, J, 3, K))
    out[:, 0] = rest_jac[0]
    for j in range(1, J):
        p = parents[j]
        D = rest_jac[j] - rest_jac[p]  # (3,K)
        out[:, j] = out[:, p] + np.einsum("bij,jk->bik", Rw[:, p], D)
    return out


def landmark_normal_equations(pose_off, lm_idx, Jp, Jl, r, w, n_dense, n_lm):
    """Accumulate whitened landmark-reprojection blocks.

    pose_off: (N,) tangent column of the pose block, -1 when constant
    lm_idx:   (N,) landmark index (observations sorted by landmark)
    Jp (N,2,6), Jl (N,2,3), r (N,2): whitened jacobians/residual
    w: (N,) robust IRLS weights
    Returns Hpp (D,D), bp (D,), Hll (L,3,3), bl (L,3), B (N,6,3).
    """
    Hpp = np.zeros((n_dense, n_dense))
    bp = np.zeros(n_dense)
    Hll = np.zeros((n_lm, 3, 3))
    bl = np.zeros((n_lm, 3))

    wj = w[:, None, None]
    Hll_obs = wj * np.einsum("nri,nrj->nij", Jl, Jl)
    bl_obs = w[:, None] * np.einsum("nri,nr->ni", Jl, r)
    np.add.at(Hll, lm_idx, Hll_obs)
    np.add.at(bl, lm_idx, bl_obs)

    B = wj * np.einsum("nri,nrj->nij", Jp, Jl)
    act = pose_off >= 0
    if np.any(act):
        Hp_obs = wj[act] * np.einsum("nri,nrj->nij", Jp[act], Jp[act])
        bp_obs = w[act, None] * np.einsum("nri,nr->ni", Jp[act], r[act])
        offs = pose_off[act]
        for i, o in enumerate(offs):
            Hpp[o:o + 6, o:o + 6] += Hp_obs[i]
            bp[o:o + 6] += bp_obs[i]
    B[~act] = 0.0
    return Hpp, bp, Hll, bl, B


def schur_reduce(Hpp, bp, Hll, bl, B, pose_off, group_ptr, lam):
    """Schur-eliminate landmarks: returns (H_red, b_red, Hll_inv (L,3,3)).

    group_ptr: (L+1,) observation run boundaries per landmark (sorted order).
    Damping lam is applied to the landmark diagonal here; the caller damps
    the dense diagonal itself.
    """
    L = Hll.shape[0]
    H_red = Hpp.copy()
    b_red = bp.copy()
    Hll_d = Hll.copy()
    dg = np.einsum("lii->li", Hll_d)
    dg += lam * np.abs(dg) + 1e-12
    Hll_inv = np.linalg.inv(Hll_d)

    for l in range(L):
        s, e = group_ptr[l], group_ptr[l + 1]
        if s == e:
            continue
        offs = pose_off[s:e]
        act = offs >= 0
        if not np.any(act):
            continue
        Bg = B[s:e][act]          # (k,6,3)
        og = offs[act]
        U = Bg @ Hll_inv[l]       # (k,6,3)
        bterm = U @ bl[l]         # (k,6)
        cross = np.einsum("iab,jcb->iajc", U, Bg)  # (k,6,k,6)
        for i, oi in enumerate(og):
            b_red[oi:oi + 6] -= bterm[i]
            for j, oj in enumerate(og):
                H_red[oi:oi + 6, oj:oj + 6] -= cross[i, :, j, :]
    return H_red, b_red, Hll_inv


def landmark_backsub(Hll_inv, bl, B, pose_off, group_ptr, delta_dense):
    """Solve landmark increments given the dense-step solution."""
    L = bl.shape[0]
    out = np.zeros((L, 3))
    for l in range(L):
        s, e = group_ptr[l], group_ptr[l + 1]
        rhs = bl[l].copy()
        for o in range(s, e):
            po = pose_off[o]
            if po >= 0:
                rhs += B[o].T @ delta_dense[po:po + 6]
        out[l] = -Hll_inv[l] @ rhs
    return out
