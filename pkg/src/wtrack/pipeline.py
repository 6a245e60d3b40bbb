"""End-to-end driver: tracks -> poses -> background refinement -> dynamic tracks."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .dyntrack import (DynamicTrackSet, downsample_static, init_dynamic, optimize_dynamic,
                       propagate_depth, upsample_trajectories)
from .errors import MissingFile, WtrkError
from .geometry import Z_MIN, quat_to_rotmat
from .metrics import (EvalReport, depth_metrics, flow_metrics, rasterize_min_depth,
                      tracking3d_metrics, traj_metrics)
from .pose_init import estimate_poses, gate_inliers
from .refine import StaticModel, classify_dynamic_background, init_static_anchors, refine_static
from .tensorio import SceneBundle, load_scene, read_tensor, write_tensor
from .trackset import (ROLE_DYNAMIC_BG, ROLE_DYNAMIC_FG, ROLE_FILTERED, ROLE_NAMES, ROLE_STATIC,
                       TrackSet2D, remove_redundant, split_by_mask)

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    quats: np.ndarray
    trans: np.ndarray
    roles: np.ndarray                  # (N,) ROLE_*
    world: np.ndarray | None           # (N, T, 3), NaN for filtered tracks
    stage: int
    losses: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    info: dict = field(default_factory=dict)
    static_ids: np.ndarray | None = None
    stage1_inliers: np.ndarray | None = None     # over static_ids
    static_model: StaticModel | None = None      # over static_ids
    background_moving: np.ndarray | None = None  # over static_ids
    dynamic_ids: np.ndarray | None = None
    dynamic: DynamicTrackSet | None = None
    aligned_depth: np.ndarray | None = None

    def camera_points(self):
        R = quat_to_rotmat(self.quats)
        return np.einsum("tij,ntj->nti", R, self.world) + self.trans[None]


def _scene_digest(scene: SceneBundle):
    h = hashlib.sha256()
    for arr in (scene.tracks, scene.visible, scene.depth, scene.masks, scene.track_depth,
                scene.cam.K):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class _Checkpoints:
    def __init__(self, directory, key, enabled, resume):
        self.dir = Path(directory) if directory is not None else None
        self.key = key
        self.enabled = enabled and self.dir is not None
        self.resume = resume and self.enabled

    def _path(self, name):
        return self.dir / "checkpoints" / f"{name}.npz"

    def load(self, name):
        if not self.resume or not self._path(name).exists():
            return None
        data = dict(np.load(self._path(name), allow_pickle=False))
        if str(data.pop("key")) != self.key:
            log.warning("checkpoint %s does not match inputs/config, recomputing", name)
            return None
        return data

    def save(self, name, **arrays):
        if not self.enabled:
            return
        path = self._path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, key=np.array(self.key), **arrays)
        os.replace(tmp, path)


def _curve(store, name, every):
    rows = store.setdefault(name, [])

    def cb(it, loss):
        if every and it % every == 0:
            rows.append((it, float(loss)))
    return cb


def _max_reproj(model: StaticModel, quats, trans, tracks: TrackSet2D, cam):
    R = quat_to_rotmat(quats)
    ii, tt = np.nonzero(tracks.visible)
    X = model.anchors[ii] + model.offsets[ii, tt]
    Xc = np.einsum("mij,mj->mi", R[tt], X) + trans[tt]
    z = Xc[:, 2]
    zs = np.where(z > Z_MIN, z, 1.0)
    u = cam.fx * Xc[:, 0] / zs + cam.cx
    v = cam.fy * Xc[:, 1] / zs + cam.cy
    err = np.hypot(u - tracks.positions[ii, tt, 0], v - tracks.positions[ii, tt, 1])
    err = np.where(z > Z_MIN, err, np.inf)
    out = np.zeros(len(tracks))
    np.maximum.at(out, ii, err)
    return out


def run_scene(scene: SceneBundle, cfg: PipelineConfig | None = None, *, speedup=True, stage=3,
              threads=1, depth_out=False, gating=True, freeze_offsets=False,
              checkpoint_dir=None, resume=False) -> PipelineResult:
    """Run the stages on an in-memory scene. ``stage`` in {1, 2, 3} stops early."""
    cfg = (cfg or scene.config).validate()
    H, W = scene.height, scene.width
    diag = scene.diagonal
    cam = scene.cam
    timings, losses, curves, warnings, info = {}, {}, {}, [], {}
    ckpt = _Checkpoints(checkpoint_dir, _scene_digest(scene) + cfg.hash() + f"{speedup}{gating}",
                        checkpoint_dir is not None, resume)
    every = cfg.log_every

    t0 = time.perf_counter()
    tracks = TrackSet2D(scene.tracks, scene.visible)
    tracks.check(H, W)
    N, T = tracks.visible.shape
    depths = scene.track_depth
    keep = remove_redundant(tracks, (H, W), cfg.radius, cfg.component_min_size)
    roles = np.full(N, ROLE_FILTERED, dtype=np.uint8)
    static, dynamic = split_by_mask(tracks.subset(keep), scene.masks)
    roles[static.ids] = ROLE_STATIC
    roles[dynamic.ids] = ROLE_DYNAMIC_FG
    sdep = depths[static.ids]
    if speedup and cfg.downsample_varpi > 1:
        coarse, dindex = downsample_static(static, cfg.downsample_varpi)
        coarse_local = dindex.retained
    else:
        coarse, coarse_local = static, np.arange(len(static))
    cdep = sdep[coarse_local]
    info.update(n_tracks=N, n_redundant=int((~keep).sum()), n_static=len(static),
                n_dynamic_fg=len(dynamic), n_coarse=len(coarse))
    timings["prepare"] = time.perf_counter() - t0

    # ---------------- stage 1
    t0 = time.perf_counter()
    ck = ckpt.load("stage1")
    if ck is not None:
        quats, trans, c_inl = ck["quats"], ck["trans"], ck["inliers"].astype(bool)
    else:
        pe = estimate_poses(coarse, cdep, cam, cfg, diag, threads=threads, gating=gating)
        quats, trans, c_inl = pe.quats, pe.trans, pe.inliers
        warnings.extend(pe.warnings)
        curves["stage1"] = [(k, float(v)) for c in pe.clips for k, v in enumerate(c.history)]
        losses["stage1"] = float(sum(c.loss for c in pe.clips))
        ckpt.save("stage1", quats=quats, trans=trans, inliers=c_inl)
    timings["stage1"] = time.perf_counter() - t0
    info["stage1_outliers"] = int((~c_inl).sum())
    s1_inl = np.ones(len(static), dtype=bool)
    s1_inl[coarse_local] = c_inl
    result = PipelineResult(quats, trans, roles, None, 1, losses, curves, timings, warnings, info,
                            static_ids=static.ids, stage1_inliers=s1_inl)
    if stage == 1:
        return result

    # ---------------- stage 2
    t0 = time.perf_counter()
    ck = ckpt.load("stage2")
    if ck is not None:
        quats, trans = ck["quats"], ck["trans"]
        model = StaticModel(ck["anchors"], ck["offsets"])
        s_inl = ck["inliers"].astype(bool)
    else:
        sub = coarse.subset(c_inl)
        sub_dep = cdep[c_inl]
        m0 = init_static_anchors(sub, sub_dep, quats, trans, cam)
        ref = refine_static(m0, quats, trans, sub, sub_dep, cam, cfg, diag,
                            freeze_offsets=freeze_offsets, callback=_curve(curves, "stage2", every))
        quats, trans = ref.quats, ref.trans
        losses["stage2"] = ref.losses
        if len(coarse) != len(static) or not c_inl.all():
            # map the coarse solution onto every static track
            s_inl = np.zeros(len(static), dtype=bool)
            s_inl[coarse_local[c_inl]] = True
            if len(coarse) != len(static):
                values = np.concatenate([ref.model.anchors[:, None, :], ref.model.offsets], axis=1)
                up, _ = upsample_trajectories(values, sub, sub_dep, static, sdep, cam, cfg.knn_r,
                                              cfg.eps_num)
                model = StaticModel(up[:, 0], up[:, 1:] * static.visible[..., None])
                # keep exact coarse values and gate the interpolated ones
                model.anchors[coarse_local[c_inl]] = ref.model.anchors
                model.offsets[coarse_local[c_inl]] = ref.model.offsets
                resid = _max_reproj(model, quats, trans, static, cam)
                s_inl = gate_inliers(resid, cfg.inlier_tau, diag, min_keep=0)
                s_inl[coarse_local[~c_inl]] = False
                s_inl[coarse_local[c_inl]] = True
            else:
                model = StaticModel(np.zeros((len(static), 3)), np.zeros((len(static), T, 3)))
                model.anchors[c_inl] = ref.model.anchors
                model.offsets[c_inl] = ref.model.offsets
        else:
            model, s_inl = ref.model, np.ones(len(static), dtype=bool)
        ckpt.save("stage2", quats=quats, trans=trans, anchors=model.anchors,
                  offsets=model.offsets, inliers=s_inl)
    moving = classify_dynamic_background(model, cfg.epsilon) & s_inl
    timings["stage2"] = time.perf_counter() - t0
    info["background_moving"] = int(moving.sum())
    info["stage2_outliers"] = int((~s_inl).sum())
    roles[static.ids[moving | ~s_inl]] = ROLE_DYNAMIC_BG

    world = np.full((N, T, 3), np.nan)
    st_ok = s_inl & ~moving
    world[static.ids[st_ok]] = model.positions[st_ok]
    result = PipelineResult(quats, trans, roles, world, 2, losses, curves, timings, warnings, info,
                            static_ids=static.ids, stage1_inliers=s1_inl, static_model=model,
                            background_moving=moving)
    if stage == 2:
        return result

    # ---------------- stage 3
    t0 = time.perf_counter()
    dyn_ids = np.concatenate([dynamic.ids, static.ids[moving | ~s_inl]])
    dyn_ids = np.sort(dyn_ids)
    result.dynamic_ids = dyn_ids
    if len(dyn_ids):
        dtr = tracks.subset(dyn_ids)
        ddep = depths[dyn_ids]
        ck = ckpt.load("stage3")
        if ck is not None:
            dyn = DynamicTrackSet(ck["positions"], dtr.visible.copy(), ck["knn"])
        else:
            d0 = init_dynamic(dtr, ddep, quats, trans, cam, cfg.knn_r)
            dres = optimize_dynamic(d0, dtr, ddep, quats, trans, cam, cfg, diag,
                                    callback=_curve(curves, "stage3", every))
            dyn = dres.dyn
            losses["stage3"] = dres.losses
            ckpt.save("stage3", positions=dyn.positions, knn=dyn.knn)
        world[dyn_ids] = dyn.positions
        result.dynamic = dyn
    timings["stage3"] = time.perf_counter() - t0
    result.stage = 3

    if depth_out:
        t0 = time.perf_counter()
        result.aligned_depth = aligned_depth_maps(scene, result, cfg)
        timings["depth"] = time.perf_counter() - t0
    return result


def aligned_depth_maps(scene: SceneBundle, result: PipelineResult, cfg: PipelineConfig):
    Xc = result.camera_points()
    out = np.empty_like(scene.depth)
    for t in range(scene.n_frames):
        sel = scene.visible[:, t] & np.isfinite(Xc[:, t, 2]) & (Xc[:, t, 2] > 0)
        if not sel.any():
            out[t] = scene.depth[t]
            result.warnings.append(f"frame {t}: no tracked points, raw depth kept")
            continue
        out[t] = propagate_depth(scene.depth[t], scene.tracks[sel, t], Xc[sel, t, 2], scene.cam,
                                 cfg.depth_knn_k, cfg.eps_num)
    return out


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

@dataclass
class RunManifest:
    input_dir: str
    output_dir: str
    config_hash: str
    timings: dict
    final_losses: dict
    warnings: list
    stage: int
    outputs: list

    def write(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(asdict(self), fh, indent=2, default=_json_default)
        os.replace(tmp, path)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj))


def poses_to_json(quats, trans):
    R = quat_to_rotmat(quats)
    return {"convention": "world_to_camera", "layout": "3x4 row-major",
            "poses": [np.hstack([r, t[:, None]]).ravel().tolist() for r, t in zip(R, trans)]}


def poses_from_json(path):
    from .geometry import rotmat_to_quat
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{path} not found")
    with open(path) as fh:
        data = json.load(fh)
    M = np.asarray(data["poses"], dtype=float).reshape(-1, 3, 4)
    return rotmat_to_quat(M[:, :, :3]), M[:, :, 3].copy()


def _atomic_json(path, data):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(data, fh, indent=2, default=_json_default)
    os.replace(tmp, path)


def write_outputs(out_dir, scene: SceneBundle, result: PipelineResult, cfg: PipelineConfig,
                  metrics: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = ["poses.json"]
    _atomic_json(out / "poses.json", poses_to_json(result.quats, result.trans))
    if result.world is not None:
        write_tensor(out / "roles.wt", result.roles.astype(np.uint8))
        written.append("roles.wt")
        write_tensor(out / "traj_world.wt", result.world.astype(np.float32))
        write_tensor(out / "traj_cam.wt", result.camera_points().astype(np.float32))
        written += ["traj_world.wt", "traj_cam.wt"]
        groups = {"traj_static.wt": result.roles == ROLE_STATIC,
                  "traj_dynamic.wt": np.isin(result.roles, (ROLE_DYNAMIC_FG, ROLE_DYNAMIC_BG))}
        for name, sel in groups.items():
            if result.stage < 3 and name == "traj_dynamic.wt":
                continue
            if sel.any():
                write_tensor(out / name, result.world[sel].astype(np.float32))
                written.append(name)
            else:
                result.warnings.append(f"{name} not written: no tracks in this group")
    if result.aligned_depth is not None:
        write_tensor(out / "aligned_depth.wt", result.aligned_depth.astype(np.float32))
        written.append("aligned_depth.wt")
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "iteration", "loss"])
        for stage, rows in result.curves.items():
            for it, loss in rows:
                w.writerow([stage, it, repr(loss)])
    written.append("losses.csv")
    counts = {ROLE_NAMES[k]: int((result.roles == k).sum()) for k in ROLE_NAMES}
    report = dict(metrics or {})
    report.update({"stage": result.stage, "config": cfg.to_dict(), "losses": result.losses,
                   "classification": counts, "info": result.info,
                   "loss_curves": {k: [v for _, v in rows] for k, rows in result.curves.items()}})
    _atomic_json(out / "report.json", report)
    written.append("report.json")
    return written


def run_pipeline(input_dir, output_dir, *, speedup=True, depth_out=False, eval_dir=None, stage=3,
                 resume=False, threads=1, checkpoints=True) -> RunManifest:
    scene = load_scene(input_dir)
    cfg = scene.config
    t0 = time.perf_counter()
    result = run_scene(scene, cfg, speedup=speedup, stage=stage, threads=threads,
                       depth_out=depth_out and stage >= 3,
                       checkpoint_dir=output_dir if checkpoints else None, resume=resume)
    result.timings["total"] = time.perf_counter() - t0
    metrics = {}
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = write_outputs(out, scene, result, cfg)
    if eval_dir is not None:
        report, warns = eval_only(out, eval_dir)
        metrics = report.to_dict()
        result.warnings.extend(warns)
        written = write_outputs(out, scene, result, cfg, metrics)
    final = {}
    for k, v in result.losses.items():
        final[k] = v if isinstance(v, dict) else {"total": v}
    manifest = RunManifest(str(input_dir), str(output_dir), cfg.hash(), result.timings, final,
                           result.warnings, result.stage, written + ["manifest.json"])
    manifest.write(out / "manifest.json")
    return manifest


# --------------------------------------------------------------------------
# evaluation against a synthetic ground-truth directory
# --------------------------------------------------------------------------

def eval_only(est_dir, gt_dir):
    """Every metric computable from the files present; returns ``(EvalReport, warnings)``."""
    est_dir, gt_dir = Path(est_dir), Path(gt_dir)
    if not est_dir.is_dir():
        raise MissingFile(f"{est_dir} is not a directory")
    if not gt_dir.is_dir():
        raise MissingFile(f"{gt_dir} is not a directory")
    report = EvalReport()
    warns = []
    meta_path = gt_dir / "gt_meta.json"
    scale = 1.0
    if meta_path.exists():
        with open(meta_path) as fh:
            scale = float(json.load(fh).get("scene_scale", 1.0))

    def opt_tensor(path):
        return read_tensor(path).data if path.exists() else None

    gt_q = gt_t = None
    if (gt_dir / "gt_poses.json").exists():
        gt_q, gt_t = poses_from_json(gt_dir / "gt_poses.json")
    est_q = est_t = None
    if (est_dir / "poses.json").exists():
        est_q, est_t = poses_from_json(est_dir / "poses.json")
    if est_q is not None and gt_q is not None:
        report.ate, report.rte, report.rre = traj_metrics(est_q, est_t, gt_q, gt_t)
    else:
        warns.append("poses missing: trajectory metrics skipped")

    traj_cam = opt_tensor(est_dir / "traj_cam.wt")
    gt_world = opt_tensor(gt_dir / "gt_traj.wt")
    gt_vis = opt_tensor(gt_dir / "gt_visibility.wt")
    est_vis = opt_tensor(gt_dir / "visibility.wt")
    gt_tracks = opt_tensor(gt_dir / "gt_tracks.wt")
    K = opt_tensor(gt_dir / "intrinsics.wt")
    if traj_cam is not None and gt_world is not None and gt_vis is not None and gt_q is not None:
        traj_cam = traj_cam.astype(float)
        R = quat_to_rotmat(gt_q)
        gt_cam = np.einsum("tij,ntj->nti", R, gt_world.astype(float)) + gt_t[None]
        ok = np.isfinite(traj_cam).all(axis=(1, 2))
        ev = est_vis.astype(bool) if est_vis is not None else gt_vis.astype(bool)
        report.aj, report.apd3d, report.oa = tracking3d_metrics(
            traj_cam[ok], ev[ok], gt_cam[ok], gt_vis.astype(bool)[ok], scale)
        if K is not None and gt_tracks is not None:
            fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
            z = traj_cam[..., 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                uv = np.stack([fx * traj_cam[..., 0] / z + cx, fy * traj_cam[..., 1] / z + cy], -1)
            gtt = gt_tracks.astype(float)
            spawn = np.argmax(gt_vis.astype(bool), axis=1)
            n = np.arange(len(gtt))
            est_flow = uv - uv[n, spawn][:, None]
            gt_flow = gtt - gtt[n, spawn][:, None]
            report.epe, report.iou = flow_metrics(est_flow[ok], gt_flow[ok], ev[ok],
                                                  gt_vis.astype(bool)[ok])
            gt_depth = opt_tensor(gt_dir / "gt_depth.wt")
            if gt_depth is not None:
                H, W = gt_depth.shape[1:]
                est_imgs, gt_imgs = [], []
                for t in range(gt_depth.shape[0]):
                    sel = ok & ev[:, t]
                    img = rasterize_min_depth(uv[sel, t], z[sel, t], H, W)
                    est_imgs.append(img)
                    gt_imgs.append(gt_depth[t])
                try:
                    report.abs_rel, report.delta_125 = depth_metrics(np.stack(est_imgs),
                                                                     np.stack(gt_imgs).astype(float))
                except WtrkError as exc:
                    warns.append(f"depth metrics skipped: {exc}")
    else:
        warns.append("trajectories missing: tracking, flow and depth metrics skipped")
    for w in warns:
        log.warning(w)
    return report, warns
