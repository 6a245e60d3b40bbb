"""Hot loops: residual/gradient accumulation and coverage rasterization.

Each kernel exists twice, a numba loop (``*_nb``) and a vectorized numpy
version (``*_np``). The public names dispatch on ``_accel.USE_NUMBA``. Both
paths accumulate in a fixed order, so each is deterministic on its own; they
agree with each other to rounding.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# per-observation reprojection + depth terms (L_ba, L_dc)
# --------------------------------------------------------------------------


def _obs_terms_np(R, t, X, fidx, uv, dep, fx, fy, cx, cy, w_ba, w_dc, z_min, clamp):
    n_frames = R.shape[0]
    Rf = R[fidx]
    Xc = np.einsum("mij,mj->mi", Rf, X) + t[fidx]
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    ok = z > z_min
    zs = np.where(ok, z, 1.0)
    ru = fx * x / zs + cx - uv[:, 0]
    rv = fy * y / zs + cy - uv[:, 1]
    ba = np.where(ok, ru * ru + rv * rv, clamp * clamp)
    rd = z - dep
    loss = w_ba * np.sum(ba) + w_dc * np.sum(rd * rd)

    okf = ok.astype(float)
    gc = np.empty_like(Xc)
    gc[:, 0] = 2.0 * w_ba * okf * fx * ru / zs
    gc[:, 1] = 2.0 * w_ba * okf * fy * rv / zs
    gc[:, 2] = -2.0 * w_ba * okf * (fx * x * ru + fy * y * rv) / (zs * zs) + 2.0 * w_dc * rd
    gX = np.einsum("mji,mj->mi", Rf, gc)
    gw = np.cross(Xc, gc)
    gpose = np.empty((n_frames, 6))
    for k in range(3):
        gpose[:, k] = np.bincount(fidx, weights=gw[:, k], minlength=n_frames)
        gpose[:, 3 + k] = np.bincount(fidx, weights=gc[:, k], minlength=n_frames)

    # Gauss-Newton diagonal, used only as a preconditioner
    a = np.zeros((X.shape[0], 3))
    b = np.zeros((X.shape[0], 3))
    a[:, 0] = okf * fx / zs
    a[:, 2] = -okf * fx * x / (zs * zs)
    b[:, 1] = okf * fy / zs
    b[:, 2] = -okf * fy * y / (zs * zs)
    e = np.zeros((X.shape[0], 3))
    e[:, 2] = 1.0
    ja = np.einsum("mi,mij->mj", a, Rf)
    jb = np.einsum("mi,mij->mj", b, Rf)
    je = Rf[:, 2, :]
    dX = 2.0 * w_ba * (ja * ja + jb * jb) + 2.0 * w_dc * je * je
    wa, wb, we = np.cross(Xc, a), np.cross(Xc, b), np.cross(Xc, e)
    dw = 2.0 * w_ba * (wa * wa + wb * wb) + 2.0 * w_dc * we * we
    dr = 2.0 * w_ba * (a * a + b * b) + 2.0 * w_dc * e * e
    dpose = np.empty((n_frames, 6))
    for k in range(3):
        dpose[:, k] = np.bincount(fidx, weights=dw[:, k], minlength=n_frames)
        dpose[:, 3 + k] = np.bincount(fidx, weights=dr[:, k], minlength=n_frames)
    return loss, gX, gpose, dX, dpose


@njit
def _obs_terms_nb(R, t, X, fidx, uv, dep, fx, fy, cx, cy, w_ba, w_dc, z_min, clamp):
    n_frames = R.shape[0]
    M = X.shape[0]
    gX = np.zeros((M, 3))
    dX = np.zeros((M, 3))
    gpose = np.zeros((n_frames, 6))
    dpose = np.zeros((n_frames, 6))
    loss_ba = 0.0
    loss_dc = 0.0
    for m in range(M):
        f = fidx[m]
        xc = np.empty(3)
        for i in range(3):
            xc[i] = R[f, i, 0] * X[m, 0] + R[f, i, 1] * X[m, 1] + R[f, i, 2] * X[m, 2] + t[f, i]
        x = xc[0]
        y = xc[1]
        z = xc[2]
        rd = z - dep[m]
        loss_dc += rd * rd
        gc = np.zeros(3)
        a = np.zeros(3)
        b = np.zeros(3)
        if z > z_min:
            ru = fx * x / z + cx - uv[m, 0]
            rv = fy * y / z + cy - uv[m, 1]
            loss_ba += ru * ru + rv * rv
            gc[0] = 2.0 * w_ba * fx * ru / z
            gc[1] = 2.0 * w_ba * fy * rv / z
            gc[2] = -2.0 * w_ba * (fx * x * ru + fy * y * rv) / (z * z)
            a[0] = fx / z
            a[2] = -fx * x / (z * z)
            b[1] = fy / z
            b[2] = -fy * y / (z * z)
        else:
            loss_ba += clamp * clamp
        gc[2] += 2.0 * w_dc * rd
        for j in range(3):
            gX[m, j] = R[f, 0, j] * gc[0] + R[f, 1, j] * gc[1] + R[f, 2, j] * gc[2]
            ja = a[0] * R[f, 0, j] + a[2] * R[f, 2, j]
            jb = b[1] * R[f, 1, j] + b[2] * R[f, 2, j]
            je = R[f, 2, j]
            dX[m, j] = 2.0 * w_ba * (ja * ja + jb * jb) + 2.0 * w_dc * je * je
        # cross(xc, v) components
        gpose[f, 0] += y * gc[2] - z * gc[1]
        gpose[f, 1] += z * gc[0] - x * gc[2]
        gpose[f, 2] += x * gc[1] - y * gc[0]
        wa0 = y * a[2] - z * a[1]
        wa1 = z * a[0] - x * a[2]
        wa2 = x * a[1] - y * a[0]
        wb0 = y * b[2] - z * b[1]
        wb1 = z * b[0] - x * b[2]
        wb2 = x * b[1] - y * b[0]
        dpose[f, 0] += 2.0 * w_ba * (wa0 * wa0 + wb0 * wb0) + 2.0 * w_dc * y * y
        dpose[f, 1] += 2.0 * w_ba * (wa1 * wa1 + wb1 * wb1) + 2.0 * w_dc * x * x
        dpose[f, 2] += 2.0 * w_ba * (wa2 * wa2 + wb2 * wb2)
        for k in range(3):
            gpose[f, 3 + k] += gc[k]
            dpose[f, 3 + k] += 2.0 * w_ba * (a[k] * a[k] + b[k] * b[k])
        dpose[f, 5] += 2.0 * w_dc
    return w_ba * loss_ba + w_dc * loss_dc, gX, gpose, dX, dpose


def obs_terms(R, t, X, fidx, uv, dep, cam, w_ba, w_dc, z_min, clamp):
    """Weighted L_ba + L_dc over flattened observations.

    Returns ``(loss, grad_X (M,3), grad_pose (F,6), gn_diag_X, gn_diag_pose)``;
    pose gradients are w.r.t. left increments.
    """
    args = (np.ascontiguousarray(R, dtype=np.float64), np.ascontiguousarray(t, dtype=np.float64),
            np.ascontiguousarray(X, dtype=np.float64), np.ascontiguousarray(fidx, dtype=np.int64),
            np.ascontiguousarray(uv, dtype=np.float64), np.ascontiguousarray(dep, dtype=np.float64),
            float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy),
            float(w_ba), float(w_dc), float(z_min), float(clamp))
    fn = _obs_terms_nb if USE_NUMBA else _obs_terms_np
    return fn(*args)


# --------------------------------------------------------------------------
# pairwise reprojection (Stage 1)
# --------------------------------------------------------------------------


def _pair_terms_np(R, t, f1, f2, uv1, d1, uv2, fx, fy, cx, cy, z_min, clamp):
    n_frames = R.shape[0]
    xc1 = np.empty((uv1.shape[0], 3))
    xc1[:, 0] = (uv1[:, 0] - cx) / fx * d1
    xc1[:, 1] = (uv1[:, 1] - cy) / fy * d1
    xc1[:, 2] = d1
    R1, R2 = R[f1], R[f2]
    Xw = np.einsum("mji,mj->mi", R1, xc1 - t[f1])
    xc2 = np.einsum("mij,mj->mi", R2, Xw) + t[f2]
    x, y, z = xc2[:, 0], xc2[:, 1], xc2[:, 2]
    ok = z > z_min
    okf = ok.astype(float)
    zs = np.where(ok, z, 1.0)
    ru = fx * x / zs + cx - uv2[:, 0]
    rv = fy * y / zs + cy - uv2[:, 1]
    sq = np.where(ok, ru * ru + rv * rv, clamp * clamp)
    gc = np.empty_like(xc2)
    gc[:, 0] = 2.0 * okf * fx * ru / zs
    gc[:, 1] = 2.0 * okf * fy * rv / zs
    gc[:, 2] = -2.0 * okf * (fx * x * ru + fy * y * rv) / (zs * zs)
    # gradient expressed in camera-1 frame
    h = np.einsum("mij,mkj,mk->mi", R1, R2, gc)
    g2w = np.cross(xc2, gc)
    g1w = -np.cross(xc1, h)
    gpose = np.zeros((n_frames, 6))
    a = np.zeros_like(xc2)
    b = np.zeros_like(xc2)
    a[:, 0] = okf * fx / zs
    a[:, 2] = -okf * fx * x / (zs * zs)
    b[:, 1] = okf * fy / zs
    b[:, 2] = -okf * fy * y / (zs * zs)
    a1 = np.einsum("mij,mkj,mk->mi", R1, R2, a)
    b1 = np.einsum("mij,mkj,mk->mi", R1, R2, b)
    wa2, wb2 = np.cross(xc2, a), np.cross(xc2, b)
    wa1, wb1 = np.cross(xc1, a1), np.cross(xc1, b1)
    dpose = np.zeros((n_frames, 6))
    for k in range(3):
        gpose[:, k] = (np.bincount(f2, weights=g2w[:, k], minlength=n_frames)
                       + np.bincount(f1, weights=g1w[:, k], minlength=n_frames))
        gpose[:, 3 + k] = (np.bincount(f2, weights=gc[:, k], minlength=n_frames)
                           - np.bincount(f1, weights=h[:, k], minlength=n_frames))
        dpose[:, k] = (np.bincount(f2, weights=wa2[:, k] ** 2 + wb2[:, k] ** 2, minlength=n_frames)
                       + np.bincount(f1, weights=wa1[:, k] ** 2 + wb1[:, k] ** 2, minlength=n_frames))
        dpose[:, 3 + k] = (np.bincount(f2, weights=a[:, k] ** 2 + b[:, k] ** 2, minlength=n_frames)
                           + np.bincount(f1, weights=a1[:, k] ** 2 + b1[:, k] ** 2, minlength=n_frames))
    return np.sum(sq), gpose, 2.0 * dpose, np.sqrt(sq)


@njit
def _pair_terms_nb(R, t, f1, f2, uv1, d1, uv2, fx, fy, cx, cy, z_min, clamp):
    n_frames = R.shape[0]
    M = f1.shape[0]
    gpose = np.zeros((n_frames, 6))
    dpose = np.zeros((n_frames, 6))
    errs = np.empty(M)
    loss = 0.0
    c1 = np.empty(3)
    xw = np.empty(3)
    c2 = np.empty(3)
    gc = np.empty(3)
    h = np.empty(3)
    a = np.empty(3)
    b = np.empty(3)
    a1 = np.empty(3)
    b1 = np.empty(3)
    for m in range(M):
        i1 = f1[m]
        i2 = f2[m]
        c1[0] = (uv1[m, 0] - cx) / fx * d1[m]
        c1[1] = (uv1[m, 1] - cy) / fy * d1[m]
        c1[2] = d1[m]
        for i in range(3):
            xw[i] = (R[i1, 0, i] * (c1[0] - t[i1, 0]) + R[i1, 1, i] * (c1[1] - t[i1, 1])
                     + R[i1, 2, i] * (c1[2] - t[i1, 2]))
        for i in range(3):
            c2[i] = R[i2, i, 0] * xw[0] + R[i2, i, 1] * xw[1] + R[i2, i, 2] * xw[2] + t[i2, i]
        x = c2[0]
        y = c2[1]
        z = c2[2]
        if z <= z_min:
            loss += clamp * clamp
            errs[m] = clamp
            continue
        ru = fx * x / z + cx - uv2[m, 0]
        rv = fy * y / z + cy - uv2[m, 1]
        sq = ru * ru + rv * rv
        loss += sq
        errs[m] = np.sqrt(sq)
        gc[0] = 2.0 * fx * ru / z
        gc[1] = 2.0 * fy * rv / z
        gc[2] = -2.0 * (fx * x * ru + fy * y * rv) / (z * z)
        a[0] = fx / z
        a[1] = 0.0
        a[2] = -fx * x / (z * z)
        b[0] = 0.0
        b[1] = fy / z
        b[2] = -fy * y / (z * z)
        for i in range(3):
            # R1 R2^T v
            s_g = 0.0
            s_a = 0.0
            s_b = 0.0
            for j in range(3):
                r12 = R[i1, i, 0] * R[i2, j, 0] + R[i1, i, 1] * R[i2, j, 1] + R[i1, i, 2] * R[i2, j, 2]
                s_g += r12 * gc[j]
                s_a += r12 * a[j]
                s_b += r12 * b[j]
            h[i] = s_g
            a1[i] = s_a
            b1[i] = s_b
        gpose[i2, 0] += y * gc[2] - z * gc[1]
        gpose[i2, 1] += z * gc[0] - x * gc[2]
        gpose[i2, 2] += x * gc[1] - y * gc[0]
        gpose[i1, 0] -= c1[1] * h[2] - c1[2] * h[1]
        gpose[i1, 1] -= c1[2] * h[0] - c1[0] * h[2]
        gpose[i1, 2] -= c1[0] * h[1] - c1[1] * h[0]
        for k in range(3):
            gpose[i2, 3 + k] += gc[k]
            gpose[i1, 3 + k] -= h[k]
            dpose[i2, 3 + k] += 2.0 * (a[k] * a[k] + b[k] * b[k])
            dpose[i1, 3 + k] += 2.0 * (a1[k] * a1[k] + b1[k] * b1[k])
        w0 = y * a[2] - z * a[1]
        w1 = z * a[0] - x * a[2]
        w2 = x * a[1] - y * a[0]
        v0 = y * b[2] - z * b[1]
        v1 = z * b[0] - x * b[2]
        v2 = x * b[1] - y * b[0]
        dpose[i2, 0] += 2.0 * (w0 * w0 + v0 * v0)
        dpose[i2, 1] += 2.0 * (w1 * w1 + v1 * v1)
        dpose[i2, 2] += 2.0 * (w2 * w2 + v2 * v2)
        w0 = c1[1] * a1[2] - c1[2] * a1[1]
        w1 = c1[2] * a1[0] - c1[0] * a1[2]
        w2 = c1[0] * a1[1] - c1[1] * a1[0]
        v0 = c1[1] * b1[2] - c1[2] * b1[1]
        v1 = c1[2] * b1[0] - c1[0] * b1[2]
        v2 = c1[0] * b1[1] - c1[1] * b1[0]
        dpose[i1, 0] += 2.0 * (w0 * w0 + v0 * v0)
        dpose[i1, 1] += 2.0 * (w1 * w1 + v1 * v1)
        dpose[i1, 2] += 2.0 * (w2 * w2 + v2 * v2)
    return loss, gpose, dpose, errs


def pair_terms(R, t, f1, f2, uv1, d1, uv2, cam, z_min, clamp):
    """Sum over rows of ``|| pi_f2 pi_f1^-1 (uv1, d1) - uv2 ||^2``.

    Returns ``(loss, grad_pose (F,6), gn_diag_pose, per-row error norm)``.
    """
    args = (np.ascontiguousarray(R, dtype=np.float64), np.ascontiguousarray(t, dtype=np.float64),
            np.ascontiguousarray(f1, dtype=np.int64), np.ascontiguousarray(f2, dtype=np.int64),
            np.ascontiguousarray(uv1, dtype=np.float64), np.ascontiguousarray(d1, dtype=np.float64),
            np.ascontiguousarray(uv2, dtype=np.float64),
            float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy), float(z_min), float(clamp))
    fn = _pair_terms_nb if USE_NUMBA else _pair_terms_np
    return fn(*args)


# --------------------------------------------------------------------------
# as-rigid-as-possible
# --------------------------------------------------------------------------


def _arap_np(X, nbr):
    N, T, _ = X.shape
    if T < 2 or nbr.shape[1] == 0 or N == 0:
        return 0.0, np.zeros_like(X)
    diff = X[:, None, :, :] - X[nbr]                # (N, r, T, 3)
    dd = diff[:, :, 1:] - diff[:, :, :-1]           # (N, r, T-1, 3)
    loss = np.sum(dd * dd)
    g = 2.0 * dd
    gdiff = np.zeros_like(diff)
    gdiff[:, :, 1:] += g
    gdiff[:, :, :-1] -= g
    grad = gdiff.sum(axis=1)
    flat = grad.reshape(N, -1)
    contrib = gdiff.reshape(N * nbr.shape[1], -1)
    np.subtract.at(flat, nbr.reshape(-1), contrib)
    return loss, flat.reshape(X.shape)


@njit
def _arap_nb(X, nbr):
    N, T, _ = X.shape
    r = nbr.shape[1]
    grad = np.zeros_like(X)
    loss = 0.0
    for k in range(N):
        for jj in range(r):
            j = nbr[k, jj]
            for t in range(1, T):
                for c in range(3):
                    d = (X[k, t, c] - X[j, t, c]) - (X[k, t - 1, c] - X[j, t - 1, c])
                    loss += d * d
                    g = 2.0 * d
                    grad[k, t, c] += g
                    grad[j, t, c] -= g
                    grad[k, t - 1, c] -= g
                    grad[j, t - 1, c] += g
    return loss, grad


def arap_terms(X, nbr):
    X = np.ascontiguousarray(X, dtype=np.float64)
    nbr = np.ascontiguousarray(nbr, dtype=np.int64)
    if USE_NUMBA:
        return _arap_nb(X, nbr)
    return _arap_np(X, nbr)


# --------------------------------------------------------------------------
# coverage rasterization for track spawning
# --------------------------------------------------------------------------


def _coverage_np(pos, H, W, radius):
    covered = np.zeros((H, W), dtype=bool)
    if pos.shape[0] == 0:
        return covered
    reach = int(np.ceil(radius)) + 1
    d = np.arange(-reach, reach + 1)
    dx, dy = np.meshgrid(d, d)
    base = np.round(pos).astype(np.int64)
    px = base[:, 0, None] + dx.ravel()[None, :]
    py = base[:, 1, None] + dy.ravel()[None, :]
    dist2 = (px - pos[:, 0, None]) ** 2 + (py - pos[:, 1, None]) ** 2
    hit = (dist2 <= radius * radius) & (px >= 0) & (px < W) & (py >= 0) & (py < H)
    covered[py[hit], px[hit]] = True
    return covered


@njit
def _coverage_nb(pos, H, W, radius):
    covered = np.zeros((H, W), dtype=np.bool_)
    r2 = radius * radius
    for m in range(pos.shape[0]):
        x = pos[m, 0]
        y = pos[m, 1]
        x0 = max(0, int(np.floor(x - radius)))
        x1 = min(W - 1, int(np.ceil(x + radius)))
        y0 = max(0, int(np.floor(y - radius)))
        y1 = min(H - 1, int(np.ceil(y + radius)))
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                if (px - x) ** 2 + (py - y) ** 2 <= r2:
                    covered[py, px] = True
    return covered


def coverage(pos, H, W, radius):
    """Boolean (H, W) image: pixel centers within ``radius`` of any position."""
    pos = np.ascontiguousarray(pos, dtype=np.float64).reshape(-1, 2)
    if USE_NUMBA:
        return _coverage_nb(pos, int(H), int(W), float(radius))
    return _coverage_np(pos, int(H), int(W), float(radius))
