"""2D track sets: spawning, redundancy filtering, mask split, grid upsampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptySparseSet, InvalidTracks
from .kernels import coverage

ROLE_STATIC = 0
ROLE_DYNAMIC_FG = 1
ROLE_DYNAMIC_BG = 2
ROLE_FILTERED = 3
ROLE_NAMES = {ROLE_STATIC: "static", ROLE_DYNAMIC_FG: "dynamic-foreground",
              ROLE_DYNAMIC_BG: "dynamic-background", ROLE_FILTERED: "filtered"}

_FOUR_CONN = ndimage.generate_binary_structure(2, 1)


@dataclass
class TrackSet2D:
    positions: np.ndarray             # (N, T, 2)
    visible: np.ndarray               # (N, T) bool
    spawn_frame: np.ndarray | None = None
    role: np.ndarray | None = None    # (N,) uint8, see ROLE_*
    ids: np.ndarray | None = None     # indices into the originating set

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.visible = np.asarray(self.visible, dtype=bool)
        n = self.positions.shape[0]
        if self.visible.shape != self.positions.shape[:2]:
            raise InvalidTracks(f"visibility {self.visible.shape} vs positions {self.positions.shape}")
        if self.spawn_frame is None:
            if n and not self.visible.any(axis=1).all():
                bad = int(np.flatnonzero(~self.visible.any(axis=1))[0])
                raise InvalidTracks(f"track {bad} is never visible")
            self.spawn_frame = np.argmax(self.visible, axis=1) if n else np.zeros(0, np.int64)
        self.spawn_frame = np.asarray(self.spawn_frame, dtype=np.int64)
        if self.role is None:
            self.role = np.zeros(n, dtype=np.uint8)
        self.role = np.asarray(self.role, dtype=np.uint8)
        if self.ids is None:
            self.ids = np.arange(n)
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def n_frames(self):
        return self.positions.shape[1]

    def subset(self, sel) -> "TrackSet2D":
        sel = np.asarray(sel)
        if sel.dtype == bool:
            sel = np.flatnonzero(sel)
        return TrackSet2D(self.positions[sel], self.visible[sel], self.spawn_frame[sel],
                          self.role[sel], self.ids[sel])

    def spawn_positions(self):
        return self.positions[np.arange(len(self)), self.spawn_frame]

    def check(self, height, width):
        """Raise :class:`InvalidTracks` if any structural invariant is violated."""
        idx = np.arange(len(self))
        if len(self) and not self.visible[idx, self.spawn_frame].all():
            raise InvalidTracks("track not visible at its spawn frame")
        p = self.positions[self.visible]
        if p.size and ((p[:, 0] < -0.5).any() or (p[:, 0] > width - 0.5).any()
                       or (p[:, 1] < -0.5).any() or (p[:, 1] > height - 0.5).any()):
            raise InvalidTracks("visible position outside the image")


def pixel_index(uv, height, width):
    """Nearest integer pixel (col, row) for float coords, clamped into the frame."""
    uv = np.asarray(uv, dtype=float)
    col = np.clip(np.round(uv[..., 0]).astype(np.int64), 0, width - 1)
    row = np.clip(np.round(uv[..., 1]).astype(np.int64), 0, height - 1)
    return col, row


# --------------------------------------------------------------------------
# spawning and redundancy elimination
# --------------------------------------------------------------------------

def spawn_new_tracks(t, existing: TrackSet2D, radius, shape):
    """Pixels of frame ``t`` farther than ``radius`` from every track visible at ``t``.

    Returns an ``(H, W)`` boolean image.
    """
    H, W = shape
    if len(existing) == 0:
        return np.ones((H, W), dtype=bool)
    pos = existing.positions[existing.visible[:, t], t]
    return ~coverage(pos, H, W, radius)


def filter_components(pixels, min_size):
    """Keep the 4-connected components with strictly more than ``min_size`` pixels."""
    pixels = np.asarray(pixels, dtype=bool)
    labels, n = ndimage.label(pixels, structure=_FOUR_CONN)
    if n == 0:
        return np.zeros_like(pixels)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes > min_size
    keep[0] = False
    return keep[labels]


def remove_redundant(tracks: TrackSet2D, shape, radius, min_size):
    """Boolean keep-mask emulating per-frame spawning on an already-tracked set.

    Tracks spawned on the first frame are kept. A track spawned at ``t >= 1``
    is kept iff its (rounded) spawn pixel lies in a large-enough uncovered
    component, where coverage comes from earlier-spawned kept tracks visible
    at ``t``.
    """
    H, W = shape
    n = len(tracks)
    keep = np.ones(n, dtype=bool)
    if n == 0:
        return keep
    first = int(tracks.spawn_frame.min())
    for t in np.unique(tracks.spawn_frame):
        if t == first:
            continue
        new = np.flatnonzero(tracks.spawn_frame == t)
        older = keep & (tracks.spawn_frame < t) & tracks.visible[:, t]
        covered = coverage(tracks.positions[older, t], H, W, radius)
        allowed = filter_components(~covered, min_size)
        col, row = pixel_index(tracks.positions[new, t], H, W)
        keep[new] = allowed[row, col]
    return keep


def split_by_mask(tracks: TrackSet2D, masks):
    """Partition into (static, dynamic) by the mask value at each spawn pixel."""
    masks = np.asarray(masks, dtype=bool)
    H, W = masks.shape[1:]
    col, row = pixel_index(tracks.spawn_positions(), H, W)
    dyn = masks[tracks.spawn_frame, row, col] if len(tracks) else np.zeros(0, bool)
    static, dynamic = tracks.subset(~dyn), tracks.subset(dyn)
    static.role[:] = ROLE_STATIC
    dynamic.role[:] = ROLE_DYNAMIC_FG
    return static, dynamic


# --------------------------------------------------------------------------
# sparse grid -> dense upsampling
# --------------------------------------------------------------------------

@dataclass
class UpsampleWeights:
    """Per dense pixel: 4 anchor indices, convex weights, zero-sum correction.

    ``weights`` interpolate at the pixel clamped into the anchor grid's hull;
    ``correction`` carries the bilinear extrapolation for pixels outside it
    (all zeros inside the hull).
    """

    index: np.ndarray       # (M, 4) int
    weights: np.ndarray     # (M, 4)
    correction: np.ndarray  # (M, 4)

    def check(self, n_sparse):
        if (self.weights < -1e-12).any():
            raise ValueError("negative weight")
        if not np.allclose(self.weights.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("weights do not sum to 1")
        if not np.allclose(self.correction.sum(axis=1), 0.0, atol=1e-6):
            raise ValueError("correction does not sum to 0")
        if (self.index < 0).any() or (self.index >= n_sparse).any():
            raise ValueError("anchor index out of range")

    @property
    def effective(self):
        return self.weights + self.correction


def _grid_axes(anchor_xy):
    xs = np.unique(anchor_xy[:, 0])
    ys = np.unique(anchor_xy[:, 1])
    if len(xs) * len(ys) != len(anchor_xy) or len(xs) < 2 or len(ys) < 2:
        raise InvalidTracks("sparse anchors do not form a full rectilinear grid of at least 2x2")
    grid = np.full((len(ys), len(xs)), -1, dtype=np.int64)
    ci = np.searchsorted(xs, anchor_xy[:, 0])
    ri = np.searchsorted(ys, anchor_xy[:, 1])
    grid[ri, ci] = np.arange(len(anchor_xy))
    if (grid < 0).any():
        raise InvalidTracks("duplicate anchors in sparse grid")
    return xs, ys, grid


def _bilinear_cell(axis, coord):
    i = np.clip(np.searchsorted(axis, coord, side="right") - 1, 0, len(axis) - 2)
    frac = (coord - axis[i]) / (axis[i + 1] - axis[i])
    return i, frac


def upsample_weights(anchor_xy, height, width):
    """Weights mapping every pixel of an ``height x width`` frame to grid anchors."""
    anchor_xy = np.asarray(anchor_xy, dtype=float)
    if len(anchor_xy) == 0:
        raise EmptySparseSet("no sparse tracks to upsample")
    xs, ys, grid = _grid_axes(anchor_xy)
    py, px = np.mgrid[0:height, 0:width]
    px = px.ravel().astype(float)
    py = py.ravel().astype(float)
    ci, a = _bilinear_cell(xs, px)
    ri, b = _bilinear_cell(ys, py)
    index = np.stack([grid[ri, ci], grid[ri, ci + 1], grid[ri + 1, ci], grid[ri + 1, ci + 1]], axis=1)

    def corner_weights(u, v):
        return np.stack([(1 - u) * (1 - v), u * (1 - v), (1 - u) * v, u * v], axis=1)

    full = corner_weights(a, b)
    convex = corner_weights(np.clip(a, 0, 1), np.clip(b, 0, 1))
    return UpsampleWeights(index=index, weights=convex, correction=full - convex)


def upsample_tracks(sparse: TrackSet2D, height, width):
    """Dense ``H*W`` track set from sparse tracks laid on a grid at one spawn frame.

    Each dense trajectory is the spawn pixel plus the weighted anchor
    displacements, which is exact for flow fields that are bilinear (in
    particular affine) in the spawn-frame pixel coordinates. Dense visibility
    is the AND over the four contributing anchors.
    """
    if len(sparse) == 0:
        raise EmptySparseSet("no sparse tracks to upsample")
    t0 = int(sparse.spawn_frame[0])
    if (sparse.spawn_frame != t0).any():
        raise InvalidTracks("sparse tracks must share one spawn frame")
    anchors = sparse.positions[:, t0]
    w = upsample_weights(anchors, height, width)
    disp = sparse.positions - anchors[:, None, :]                 # (Ns, T, 2)
    eff = w.effective
    flow = np.einsum("mk,mktc->mtc", eff, disp[w.index])
    py, px = np.mgrid[0:height, 0:width]
    base = np.stack([px.ravel(), py.ravel()], axis=1).astype(float)
    dense_pos = base[:, None, :] + flow
    vis = np.all(sparse.visible[w.index], axis=1)
    vis[:, t0] = True
    dense = TrackSet2D(dense_pos, vis, np.full(len(base), t0))
    return dense, w
