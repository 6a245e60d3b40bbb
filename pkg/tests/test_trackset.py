from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wtrack.errors import EmptySparseSet, InvalidTracks
from wtrack.synth import LABEL_DYNAMIC
from wtrack.trackset import (TrackSet2D, filter_components, remove_redundant, spawn_new_tracks,
                             split_by_mask, upsample_tracks, upsample_weights)


def flood_fill_keep(img, min_size):
    H, W = img.shape
    seen = np.zeros_like(img)
    out = np.zeros_like(img)
    for y0 in range(H):
        for x0 in range(W):
            if not img[y0, x0] or seen[y0, x0]:
                continue
            comp, q = [], deque([(y0, x0)])
            seen[y0, x0] = True
            while q:
                y, x = q.popleft()
                comp.append((y, x))
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < H and 0 <= xx < W and img[yy, xx] and not seen[yy, xx]:
                        seen[yy, xx] = True
                        q.append((yy, xx))
            if len(comp) > min_size:
                for y, x in comp:
                    out[y, x] = True
    return out


@given(st.integers(0, 10_000), st.floats(0.2, 0.8), st.integers(0, 12))
def test_filter_components_matches_flood_fill(seed, density, min_size):
    img = np.random.default_rng(seed).random((14, 17)) < density
    assert np.array_equal(filter_components(img, min_size), flood_fill_keep(img, min_size))


def test_diagonal_pixels_are_not_connected():
    img = np.eye(6, dtype=bool)
    assert not filter_components(img, 1).any()
    img[0, :] = True
    assert filter_components(img, 5)[0].all()


@given(st.integers(0, 10_000), st.floats(0.5, 5.0))
def test_spawn_matches_brute_force(seed, radius):
    rng = np.random.default_rng(seed)
    N, T, H, W = 8, 3, 12, 16
    pos = rng.uniform([0, 0], [W - 1, H - 1], (N, T, 2))
    vis = rng.random((N, T)) < 0.7
    vis[:, 0] = True
    ts = TrackSet2D(pos, vis)
    t = 1
    got = spawn_new_tracks(t, ts, radius, (H, W))
    yy, xx = np.mgrid[0:H, 0:W]
    ref = np.ones((H, W), bool)
    for p in pos[vis[:, t], t]:
        ref &= (xx - p[0]) ** 2 + (yy - p[1]) ** 2 > radius ** 2
    assert np.array_equal(got, ref)


def test_spawn_on_empty_set_allows_everything():
    empty = TrackSet2D(np.zeros((0, 2, 2)), np.zeros((0, 2), bool))
    assert spawn_new_tracks(1, empty, 2.0, (4, 5)).all()


def _grid_tracks(H, W, s, T=3):
    xs, ys = np.meshgrid(np.arange(0, W, s, dtype=float), np.arange(0, H, s, dtype=float))
    p = np.stack([xs.ravel(), ys.ravel()], 1)
    pos = np.repeat(p[:, None], T, axis=1)
    return pos


def test_remove_redundant_keeps_first_frame_and_drops_covered():
    H, W = 40, 40
    pos = _grid_tracks(H, W, 4)                      # dense first-frame coverage
    vis = np.ones(pos.shape[:2], bool)
    # a late track right on top of a covered pixel, and one in an uncovered hole
    late = np.array([[[0, 0], [8.2, 8.1], [8.2, 8.1]], [[0, 0], [30.0, 30.0], [30.0, 30.0]]])
    late_vis = np.array([[False, True, True], [False, True, True]])
    hole = (np.abs(pos[:, 1, 0] - 30) < 8) & (np.abs(pos[:, 1, 1] - 30) < 8)
    vis[hole, 1:] = False                            # earlier tracks occluded around (30, 30)
    ts = TrackSet2D(np.concatenate([pos, late]), np.concatenate([vis, late_vis]))
    keep = remove_redundant(ts, (H, W), radius=2.0, min_size=50)
    assert keep[:len(pos)].all()
    assert not keep[len(pos)]
    assert keep[len(pos) + 1]
    # the same hole is too small for a stricter component size
    keep = remove_redundant(ts, (H, W), radius=2.0, min_size=10_000)
    assert not keep[len(pos) + 1]


def test_split_by_mask_matches_labels(small_scene):
    scene, gt = small_scene
    static, dynamic = split_by_mask(TrackSet2D(scene.tracks, scene.visible), scene.masks)
    assert set(dynamic.ids) == set(np.flatnonzero(gt.labels == LABEL_DYNAMIC))
    assert len(static) + len(dynamic) == scene.n_tracks
    assert (static.role == 0).all() and (dynamic.role == 1).all()


def test_subset_keeps_ids():
    ts = TrackSet2D(np.zeros((5, 2, 2)), np.ones((5, 2), bool))
    sub = ts.subset(np.array([False, True, False, True, True])).subset([0, 2])
    assert list(sub.ids) == [1, 4]


def test_never_visible_track_rejected():
    with pytest.raises(InvalidTracks):
        TrackSet2D(np.zeros((2, 3, 2)), np.array([[1, 0, 0], [0, 0, 0]], bool))


# ------------------------------------------------------------------ upsampler

def _sparse_from_flow(flow, H, W, s, T=4):
    p = _grid_tracks(H, W, s, 1)[:, 0]
    pos = np.stack([p + flow(p, t) for t in range(T)], axis=1)
    return TrackSet2D(pos, np.ones(pos.shape[:2], bool))


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_upsample_exact_on_affine_flow(seed, s):
    rng = np.random.default_rng(seed)
    H, W = 23, 29
    A = rng.normal(0, 0.05, (4, 2, 2))
    b = rng.normal(0, 2.0, (4, 2))
    A[0], b[0] = 0.0, 0.0

    def flow(p, t):
        return p @ A[t].T + b[t]

    sparse = _sparse_from_flow(flow, H, W, s)
    dense, w = upsample_tracks(sparse, H, W)
    w.check(len(sparse))
    yy, xx = np.mgrid[0:H, 0:W]
    base = np.stack([xx.ravel(), yy.ravel()], 1).astype(float)
    for t in range(4):
        assert np.max(np.abs(dense.positions[:, t] - (base + flow(base, t)))) < 1e-9


def test_upsample_weights_are_convex_inside_hull():
    anchors = _grid_tracks(9, 9, 4, 1)[:, 0]          # 0, 4, 8 on both axes
    w = upsample_weights(anchors, 9, 9)
    assert np.allclose(w.correction, 0)
    assert (w.weights >= 0).all() and np.allclose(w.weights.sum(1), 1)


def test_upsample_reproduces_anchors():
    H, W = 13, 17
    sparse = _sparse_from_flow(lambda p, t: np.sin(p / 5.0) * t, H, W, 4)
    dense, _ = upsample_tracks(sparse, H, W)
    for p, traj in zip(sparse.positions[:, 0], sparse.positions):
        assert np.allclose(dense.positions[int(p[1]) * W + int(p[0])], traj, atol=1e-12)


def test_upsample_errors():
    with pytest.raises(EmptySparseSet):
        upsample_weights(np.zeros((0, 2)), 4, 4)
    with pytest.raises(InvalidTracks):
        upsample_weights(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), 4, 4)
