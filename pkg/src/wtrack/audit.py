"""Finite-difference audit of every loss term at random parameter states."""
from __future__ import annotations

import numpy as np

from .dyntrack import DynamicObjective, build_knn, init_dynamic
from .geometry import retract_batch
from .refine import Observations, StaticObjective, init_static_anchors
from .solver import ParamBlocks, block_slices, grad_check
from .tensorio import SceneBundle
from .trackset import TrackSet2D, split_by_mask

LOSS_NAMES = ("ba", "dc", "asap", "arap", "ts")


def _sample_coords(params, rng, per_block):
    coords = []
    for sl in block_slices(params).values():
        n = sl.stop - sl.start
        if n:
            coords.append(sl.start + rng.choice(n, min(n, per_block), replace=False))
    return np.sort(np.concatenate(coords))


def random_state(scene: SceneBundle, quats, trans, rng, pose_sigma=0.01, point_sigma=0.02):
    """Perturbed poses plus world points near the back-projected tracks."""
    T = scene.n_frames
    delta = rng.normal(0.0, pose_sigma, size=(T, 6))
    q, t = retract_batch(quats, trans, delta)
    return q, t, point_sigma


def audit_losses(scene: SceneBundle, quats, trans, n_states=50, h=1e-5, per_block=20, seed=0,
                 knn_r=4):
    """Max relative gradient error per loss over ``n_states`` random states.

    ``quats``/``trans`` are a reference trajectory (e.g. ground truth); each
    state perturbs it and scatters points around the reference back-projection.
    """
    rng = np.random.default_rng(seed)
    tracks = TrackSet2D(scene.tracks, scene.visible)
    static, dynamic = split_by_mask(tracks, scene.masks)
    if len(dynamic) < 2:
        dynamic = static
    base_static = init_static_anchors(static, scene.track_depth[static.ids], quats, trans, scene.cam)
    base_dyn = init_dynamic(dynamic, scene.track_depth[dynamic.ids], quats, trans, scene.cam, knn_r)
    obs_s = Observations(static, scene.track_depth[static.ids])
    obs_d = Observations(dynamic, scene.track_depth[dynamic.ids])
    clamp = 10.0 * scene.diagonal
    worst = {k: 0.0 for k in LOSS_NAMES}
    frozen = np.zeros(len(quats), dtype=bool)
    frozen[0] = True
    for _ in range(n_states):
        q, t, sig = random_state(scene, quats, trans, rng)
        A = base_static.anchors + rng.normal(0, sig, base_static.anchors.shape)
        O = rng.normal(0, sig, base_static.offsets.shape)
        # keep offsets away from the L1 kink so central differences are meaningful
        O = np.where(np.abs(O) < 10 * h, np.sign(O + 1e-300) * 10 * h, O)
        sp = ParamBlocks(q, t, {"anchors": A, "offsets": O}, frozen)
        for name, w in (("ba", (1, 0, 0)), ("dc", (0, 1, 0)), ("asap", (0, 0, 1))):
            obj = StaticObjective(obs_s, scene.cam, *w, clamp=clamp, asap_in_loss=True)
            err = grad_check(obj, sp, h=h, coords=_sample_coords(sp, rng, per_block))
            worst[name] = max(worst[name], err)
        X = base_dyn.positions + rng.normal(0, sig, base_dyn.positions.shape)
        knn = build_knn(X[:, 0], knn_r)
        dp = ParamBlocks(q, t, {"traj": X}, np.ones(len(q), dtype=bool))
        for name, w in (("arap", (0, 0, 1, 0)), ("ts", (0, 0, 0, 1))):
            obj = DynamicObjective(obs_d, scene.cam, knn, *w, clamp=clamp)
            err = grad_check(obj, dp, h=h, coords=_sample_coords(dp, rng, per_block))
            worst[name] = max(worst[name], err)
    return worst
