import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wtrack.config import PipelineConfig
from wtrack.dyntrack import (DynamicObjective, DynamicTrackSet, build_knn, downsample_static,
                             init_dynamic, interpolate_invisible, loss_arap, loss_ts,
                             optimize_dynamic, propagate_depth, upsample_trajectories,
                             upsample_weights_idw)
from wtrack.errors import NoVisibleCoarseNeighbors, NoVisibleFrames, ZeroRawDepth
from wtrack.geometry import CameraModel, quat_to_rotmat, se3_exp_batch
from wtrack.refine import Observations
from wtrack.solver import ParamBlocks, grad_check
from wtrack.synth import LABEL_DYNAMIC
from wtrack.trackset import TrackSet2D

CAM = CameraModel(100.0, 100.0, 64.0, 48.0)


def knn_brute(P, r):
    n = len(P)
    r = min(r, n - 1)
    out = []
    for i in range(n):
        d = [(np.sum((P[i] - P[j]) ** 2), j) for j in range(n) if j != i]
        out.append([j for _, j in sorted(d)[:r]])
    return np.array(out, dtype=np.int64).reshape(n, r)


@given(st.integers(0, 10_000), st.integers(1, 7), st.booleans())
def test_knn_matches_brute_force(seed, r, lattice):
    rng = np.random.default_rng(seed)
    if lattice:    # many exact ties
        P = rng.integers(0, 3, (15, 3)).astype(float)
    else:
        P = rng.normal(size=(15, 3))
    got = build_knn(P, r)
    ref = knn_brute(P, r)
    if lattice:
        assert all(set(a) == set(b) or np.allclose(np.sort(np.sum((P[a] - P[i]) ** 2, 1)),
                                                   np.sort(np.sum((P[b] - P[i]) ** 2, 1)))
                   for i, (a, b) in enumerate(zip(got, ref)))
    else:
        assert np.array_equal(got, ref)
    assert got.shape == (15, r)
    assert not (got == np.arange(15)[:, None]).any()


def test_knn_caps_r():
    assert build_knn(np.zeros((3, 3)) + np.arange(3)[:, None], 10).shape == (3, 2)
    assert build_knn(np.zeros((1, 3)), 4).shape == (1, 0)


def test_interpolate_invisible():
    X = np.zeros((2, 5, 3))
    X[0, 0] = [1, 2, 3]
    X[0, 2] = [1, 2, 3]
    X[0, 4] = [3, 2, 3]
    X[1, 2] = [5, 5, 5]
    vis = np.array([[1, 0, 1, 0, 1], [0, 0, 1, 0, 0]], bool)
    out = interpolate_invisible(X, vis)
    assert np.allclose(out[0, 1], [1, 2, 3])                     # between identical endpoints
    assert np.allclose(out[0, 3], [2, 2, 3])                     # linear
    assert np.allclose(out[1], [5, 5, 5])                        # constant at the ends
    with pytest.raises(NoVisibleFrames):
        interpolate_invisible(X, np.zeros((2, 5), bool))


def test_init_dynamic_exact_on_noiseless(small_scene):
    scene, gt = small_scene
    ids = np.flatnonzero(gt.labels == LABEL_DYNAMIC)
    ts = TrackSet2D(scene.tracks[ids], scene.visible[ids])
    dyn = init_dynamic(ts, scene.track_depth[ids], gt.quats, gt.trans, scene.cam, 4)
    full = ts.visible.all(axis=1)
    assert full.any()
    assert np.abs(dyn.positions[full] - gt.world[ids][full]).max() < 1e-6
    assert np.abs(dyn.positions[ts.visible] - gt.world[ids][ts.visible]).max() < 1e-6
    assert dyn.knn.shape == (len(ids), 4)


def _dyn(X, r=2):
    return DynamicTrackSet(X, np.ones(X.shape[:2], bool), build_knn(X[:, 0], r))


def test_arap_examples(rng):
    X = rng.normal(size=(10, 1, 3)) + rng.normal(size=(1, 6, 3))   # one translation per frame
    assert loss_arap(_dyn(X)) < 1e-20
    two = np.zeros((2, 2, 3))
    two[1] = [1.0, 0.0, 0.0]
    two[0, 1, 0] = 1.0                                             # point 0 moves +1 in x
    d = DynamicTrackSet(two, np.ones((2, 2), bool), np.array([[1], [0]]))
    assert loss_arap(d) == pytest.approx(2.0)                      # 1 per directed edge


@given(st.integers(0, 10_000))
def test_arap_zero_iff_neighbor_differences_constant(seed):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(8, 1, 3))
    X = base + rng.normal(size=(1, 5, 3))
    d = _dyn(X, 3)
    assert loss_arap(d) < 1e-20
    k, t = rng.integers(8), rng.integers(1, 5)
    X2 = X.copy()
    X2[k, t] += rng.normal(size=3) * 0.1 + 0.01
    assert loss_arap(DynamicTrackSet(X2, d.visible, d.knn)) > 1e-8


def ts_brute(X):
    return sum(np.sum((X[k, t] - X[k, t - 1]) ** 2) for k in range(X.shape[0])
               for t in range(1, X.shape[1]))


def arap_brute(X, knn):
    return sum(np.sum(((X[k, t] - X[j, t]) - (X[k, t - 1] - X[j, t - 1])) ** 2)
               for k in range(X.shape[0]) for j in knn[k] for t in range(1, X.shape[1]))


def test_ts_examples_and_brute_force(rng):
    assert loss_ts(_dyn(np.repeat(rng.normal(size=(4, 1, 3)), 5, axis=1))) == 0.0
    one = np.zeros((1, 2, 3))
    one[0, 1, 0] = 0.5
    assert loss_ts(DynamicTrackSet(one, np.ones((1, 2), bool), np.zeros((1, 0), int))) == 0.25
    X = rng.normal(size=(9, 7, 3))
    d = _dyn(X, 3)
    assert loss_ts(d) == pytest.approx(ts_brute(X), abs=1e-10)
    assert loss_arap(d) == pytest.approx(arap_brute(X, d.knn), abs=1e-10)


def _cube_scene(T=10, vel=(0.02, 0.0, 0.0)):
    g = np.linspace(-0.2, 0.2, 3)
    cube = np.stack(np.meshgrid(g, g, g), -1).reshape(-1, 3) + [0, 0, 3]
    X = cube[:, None] + np.asarray(vel) * np.arange(T)[:, None]
    q, t = se3_exp_batch(np.random.default_rng(0).normal(0, 0.05, (T, 6)))
    q[0], t[0] = [1, 0, 0, 0], 0
    Xc = np.einsum("tij,ntj->nti", quat_to_rotmat(q), X) + t
    uv = np.stack([CAM.fx * Xc[..., 0] / Xc[..., 2] + CAM.cx,
                   CAM.fy * Xc[..., 1] / Xc[..., 2] + CAM.cy], -1)
    return X, Xc[..., 2], q, t, TrackSet2D(uv, np.ones(X.shape[:2], bool))


def test_dynamic_objective_gradients(rng):
    X, dep, q, t, ts = _cube_scene(T=6)
    P = X + rng.normal(0, 0.02, X.shape)
    knn = build_knn(P[:, 0], 4)
    for w in ((1, 1, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1), (1, 1, 100, 10)):
        obj = DynamicObjective(Observations(ts, dep), CAM, knn, *w, clamp=1600.0)
        p = ParamBlocks(q, t, {"traj": P}, np.ones(len(q), bool))
        assert grad_check(obj, p, max_coords=100, rng=1) < 1e-5


def test_rigid_cube_recovered_with_default_weights():
    X, dep, q, t, ts = _cube_scene()
    d0 = init_dynamic(ts, dep, q, t, CAM, 4)
    res = optimize_dynamic(d0, ts, dep, q, t, CAM, PipelineConfig(), 160.0)
    err = np.abs(res.dyn.positions - X).max()
    arap = loss_arap(res.dyn)
    print(f"rigid cube: max error {err:.3g} m, L_arap {arap:.3g}")
    assert err < 1e-4
    assert arap < 1e-8


def test_no_regularizers_keeps_noiseless_init():
    X, dep, q, t, ts = _cube_scene()
    d0 = init_dynamic(ts, dep, q, t, CAM, 4)
    res = optimize_dynamic(d0, ts, dep, q, t, CAM, PipelineConfig(lambda_arap=0, lambda_ts=0), 160.0)
    assert np.abs(res.dyn.positions - d0.positions).max() < 1e-9


def test_depth_noise_is_reduced_on_rigid_object():
    X, dep, q, t, ts = _cube_scene(T=12, vel=(0.005, 0.0, 0.0))
    noisy = dep * (1 + np.random.default_rng(4).normal(0, 0.01, dep.shape))
    d0 = init_dynamic(ts, noisy, q, t, CAM, 4)
    res = optimize_dynamic(d0, ts, noisy, q, t, CAM, PipelineConfig(), 160.0)
    z = np.einsum("tj,ntj->nt", quat_to_rotmat(q)[:, 2], res.dyn.positions) + t[:, 2]
    assert np.mean(np.abs(z - dep)) < np.mean(np.abs(noisy - dep))


# ------------------------------------------------------------ down / up sample

def _grid_set(H=20, W=24, jitter=0.0, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W]
    p = np.stack([xx.ravel(), yy.ravel()], 1).astype(float) + rng.uniform(-jitter, jitter, (H * W, 2))
    T = 3
    pos = np.repeat(p[:, None], T, axis=1) + np.arange(T)[None, :, None] * 0.5
    return TrackSet2D(pos, np.ones((len(p), T), bool))


def test_downsample_examples():
    ts = _grid_set()
    sub, idx = downsample_static(ts, 1)
    assert len(sub) == len(ts) and np.array_equal(idx.retained, np.arange(len(ts)))
    cell = TrackSet2D(np.array([[[3.0, 3.0]], [[4.0, 3.0]], [[3.0, 4.0]], [[4.0, 4.0]]]),
                      np.ones((4, 1), bool))
    sub, idx = downsample_static(cell, 2)
    assert len(sub) == 1 and list(idx.retained) == [0]


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_downsample_matches_brute_force(seed, varpi):
    rng = np.random.default_rng(seed)
    N, T = 60, 3
    pos = rng.uniform(0, 30, (N, T, 2))
    vis = rng.random((N, T)) < 0.6
    vis[np.arange(N), rng.integers(0, T, N)] = True
    ts = TrackSet2D(pos, vis)
    sub, idx = downsample_static(ts, varpi)
    first = {}
    for i in range(N):
        s = int(np.argmax(vis[i]))
        key = (s, round(pos[i, s, 0] / varpi), round(pos[i, s, 1] / varpi))
        first.setdefault(key, i)
        assert idx.retained[idx.group[i]] == first[key]
    assert list(idx.retained) == sorted(first.values())


def test_varpi_one_round_trip_is_identity(rng):
    ts = _grid_set(jitter=0.3)
    dep = rng.uniform(2, 4, ts.visible.shape)
    sub, idx = downsample_static(ts, 1)
    vals = rng.normal(size=(len(sub), 3))
    up, (nn, w) = upsample_trajectories(vals, sub, dep[idx.retained], ts, dep, CAM, 4)
    assert np.abs(up - vals[np.argsort(idx.retained)]).max() < 1e-9


def test_constant_values_upsample_to_constant(rng):
    ts = _grid_set(jitter=0.3)
    dep = rng.uniform(2, 4, ts.visible.shape)
    sub, idx = downsample_static(ts, 4)
    c = np.array([0.3, -1.0, 2.0])
    up, (nn, w) = upsample_trajectories(np.tile(c, (len(sub), 1)), sub, dep[idx.retained], ts, dep,
                                        CAM, 4)
    assert np.allclose(up, c, atol=1e-12)
    assert (w >= 0).all() and np.allclose(w.sum(1), 1)


def test_idw_matches_brute_force(rng):
    ts = _grid_set(jitter=0.4, seed=3)
    dep = rng.uniform(2, 4, ts.visible.shape)
    sub, idx = downsample_static(ts, 3)
    cdep = dep[idx.retained]
    q = CAM.rays(ts.positions[:, 1]) * dep[:, 1, None]
    nn, w = upsample_weights_idw(q[:40], sub, cdep, np.ones(40, int), CAM, 4, 1e-8)
    C = CAM.rays(sub.positions[:, 1]) * cdep[:, 1, None]
    for m in range(40):
        d = np.linalg.norm(C - q[m], axis=1)
        order = np.argsort(d, kind="stable")[:5]
        if d[order[0]] == 0:
            ref = np.zeros(5)
            ref[0] = 1.0
        else:
            ref = 1 / (d[order] + 1e-8)
            ref /= ref.sum()
        got = dict(zip(nn[m], w[m]))
        assert np.allclose([got[j] for j in order], ref, atol=1e-12)


def test_idw_needs_visible_coarse_tracks():
    ts = _grid_set()
    vis = ts.visible.copy()
    vis[:, 2] = False
    vis[:, 0] = True
    coarse = TrackSet2D(ts.positions, vis)
    dep = np.ones(ts.visible.shape)
    with pytest.raises(NoVisibleCoarseNeighbors):
        upsample_weights_idw(np.ones((1, 3)), coarse, dep, np.array([2]), CAM, 4, 1e-8)


# ------------------------------------------------------------ depth propagation

def propagate_brute(raw, uv, d, cam, k, eps=1e-8):
    H, W = raw.shape
    from wtrack.tensorio import bilinear_sample
    raw_at = bilinear_sample(raw, uv)
    keep = raw_at != 0
    uv, d, raw_at = uv[keep], d[keep], raw_at[keep]
    ratio = d / raw_at
    out = np.empty_like(raw)
    Q = cam.rays(uv) * raw_at[:, None]
    for y in range(H):
        for x in range(W):
            img_d = np.hypot(uv[:, 0] - x, uv[:, 1] - y)
            nn = np.argsort(img_d, kind="stable")[:k]
            P = cam.rays(np.array([[x, y]], float))[0] * raw[y, x]
            w = 1 / (np.linalg.norm(Q[nn] - P, axis=1) + eps)
            w /= w.sum()
            out[y, x] = np.sum(w * ratio[nn]) * raw[y, x]
    return out


def test_constant_ratio_propagates_exactly(rng):
    raw = rng.uniform(1, 5, (16, 16))
    uv = rng.uniform(0, 15, (30, 2))
    from wtrack.tensorio import bilinear_sample
    out = propagate_depth(raw, uv, 2.0 * bilinear_sample(raw, uv), CAM, 4)
    assert np.abs(out - 2.0 * raw).max() < 1e-10


def test_single_point_ratio(rng):
    raw = rng.uniform(1, 5, (8, 9))
    uv = np.array([[3.3, 4.1]])
    from wtrack.tensorio import bilinear_sample
    r = 1.7 / bilinear_sample(raw, uv)[0]
    assert np.allclose(propagate_depth(raw, uv, np.array([1.7]), CAM, 4), r * raw, atol=1e-12)


def test_random_ratios_match_brute_force(rng):
    raw = rng.uniform(1, 5, (16, 16))
    uv = rng.uniform(0, 15, (25, 2))
    d = rng.uniform(1, 5, 25)
    assert np.abs(propagate_depth(raw, uv, d, CAM, 4) - propagate_brute(raw, uv, d, CAM, 4)).max() < 1e-10


def test_zero_raw_depth_points_are_excluded(rng):
    raw = rng.uniform(1, 5, (10, 10))
    raw[:, :3] = 0.0
    uv = np.array([[0.0, 2.0], [6.2, 5.5], [8.1, 1.3]])
    d = np.array([9.0, 2.0, 3.0])
    out = propagate_depth(raw, uv, d, CAM, 2)
    assert np.allclose(out, propagate_brute(raw, uv, d, CAM, 2), atol=1e-10)
    with pytest.raises(ZeroRawDepth):
        propagate_depth(np.zeros((4, 4)), uv[:1] * 0.1, d[:1], CAM, 2)
