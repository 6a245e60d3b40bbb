import json
import shutil

import numpy as np
import pytest

from wtrack.errors import MissingFile
from wtrack.geometry import quat_to_rotmat
from wtrack.pipeline import (eval_only, poses_from_json, poses_to_json, run_pipeline, run_scene)
from wtrack.tensorio import read_tensor, write_tensor
from wtrack.trackset import ROLE_DYNAMIC_FG, ROLE_FILTERED


@pytest.fixture(scope="module")
def full_run(small_scene_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    manifest = run_pipeline(small_scene_dir, out, eval_dir=small_scene_dir, depth_out=True)
    return out, manifest


def test_outputs_present_and_shaped(full_run, small_scene):
    out, manifest = full_run
    scene, gt = small_scene
    N, T = scene.visible.shape
    for name in ("poses.json", "roles.wt", "traj_world.wt", "traj_cam.wt", "traj_static.wt",
                 "traj_dynamic.wt", "aligned_depth.wt", "losses.csv", "report.json", "manifest.json"):
        assert (out / name).exists(), name
    world = read_tensor(out / "traj_world.wt").data
    assert world.shape == (N, T, 3)
    roles = read_tensor(out / "roles.wt").data
    assert len(roles) == N
    assert np.isfinite(world[roles != ROLE_FILTERED]).all()
    assert read_tensor(out / "aligned_depth.wt").dims == scene.depth.shape
    m = json.loads((out / "manifest.json").read_text())
    assert m["config_hash"] == scene.config.hash()
    assert set(m["timings"]) >= {"stage1", "stage2", "stage3"}


def test_noiseless_report_static_scene(tmp_path):
    from wtrack.synth import SynthConfig, generate, write_synth
    cfg = SynthConfig(n_frames=8, height=64, width=80, n_static=150, seed=5)
    scene, gt = generate(cfg)
    write_synth(tmp_path / "in", scene, gt, cfg)
    run_pipeline(tmp_path / "in", tmp_path / "out", eval_dir=tmp_path / "in")
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    final = rep["losses"][max(k for k in rep["losses"] if k != "stage1")]
    assert rep["ate"] < 1e-4
    assert final["ba"] < 1e-6


def test_noiseless_camera_model_with_mover(full_run):
    out, _ = full_run
    rep = json.loads((out / "report.json").read_text())
    assert rep["ate"] < 1e-4
    assert rep["losses"]["stage2"]["ba"] < 1e-6


def test_dynamic_tracks_all_reported(full_run, small_scene):
    out, _ = full_run
    scene, gt = small_scene
    roles = read_tensor(out / "roles.wt").data
    assert (roles[gt.labels == 1] == ROLE_DYNAMIC_FG).all()
    dyn = read_tensor(out / "traj_dynamic.wt").data
    assert len(dyn) == int(np.isin(roles, (1, 2)).sum())


def test_stage_one_emits_poses_only(small_scene_dir, tmp_path):
    run_pipeline(small_scene_dir, tmp_path, stage=1)
    assert (tmp_path / "poses.json").exists()
    assert not list(tmp_path.glob("traj_*.wt"))


def test_runs_are_bit_identical(small_scene_dir, tmp_path, full_run):
    out, _ = full_run
    run_pipeline(small_scene_dir, tmp_path, depth_out=True, checkpoints=False)
    for p in sorted(out.glob("traj_*.wt")) + [out / "poses.json", out / "roles.wt"]:
        assert p.read_bytes() == (tmp_path / p.name).read_bytes(), p.name


def test_resume_reuses_checkpoints(small_scene_dir, tmp_path):
    run_pipeline(small_scene_dir, tmp_path)
    first = (tmp_path / "traj_world.wt").read_bytes()
    assert list((tmp_path / "checkpoints").glob("*.npz"))
    m = run_pipeline(small_scene_dir, tmp_path, resume=True)
    assert (tmp_path / "traj_world.wt").read_bytes() == first
    assert m.timings["stage2"] < 0.5


def test_poses_json_round_trip(rng):
    from wtrack.geometry import normalize_quat
    q = normalize_quat(rng.normal(size=(5, 4)))
    q[q[:, 0] < 0] *= -1
    t = rng.normal(size=(5, 3))
    data = poses_to_json(q, t)
    assert len(data["poses"][0]) == 12
    p = __import__("pathlib").Path(__file__).parent / "_tmp_poses.json"
    try:
        p.write_text(json.dumps(data))
        q2, t2 = poses_from_json(p)
    finally:
        p.unlink()
    assert np.allclose(quat_to_rotmat(q2), quat_to_rotmat(q)) and np.allclose(t2, t)


def _gt_as_estimate(gt_dir, est_dir):
    est_dir.mkdir()
    shutil.copy(gt_dir / "gt_poses.json", est_dir / "poses.json")
    data = json.loads((est_dir / "poses.json").read_text())
    q, t = poses_from_json(est_dir / "poses.json")
    world = read_tensor(gt_dir / "gt_traj.wt").data.astype(float)
    cam = np.einsum("tij,ntj->nti", quat_to_rotmat(q), world) + t[None]
    write_tensor(est_dir / "traj_cam.wt", cam.astype(np.float32))
    return data


def test_eval_of_ground_truth_is_ideal(small_scene_dir, tmp_path):
    _gt_as_estimate(small_scene_dir, tmp_path / "est")
    rep, warns = eval_only(tmp_path / "est", small_scene_dir)
    assert not warns
    assert rep.ate < 1e-6 and rep.rre < 1e-4
    assert rep.aj == pytest.approx(100) and rep.apd3d == pytest.approx(100) and rep.oa == 100
    assert rep.epe < 1e-3 and rep.iou == 100
    assert rep.abs_rel < 1e-6 and rep.delta_125 == 100


def test_eval_without_poses_skips_trajectory_metrics(small_scene_dir, tmp_path):
    _gt_as_estimate(small_scene_dir, tmp_path / "est")
    (tmp_path / "est" / "poses.json").unlink()
    rep, warns = eval_only(tmp_path / "est", small_scene_dir)
    assert rep.ate is None and any("poses missing" in w for w in warns)
    assert rep.aj is not None and rep.epe is not None


def test_eval_missing_directory(tmp_path, small_scene_dir):
    with pytest.raises(MissingFile):
        eval_only(tmp_path / "nope", small_scene_dir)


def test_in_memory_stages(small_scene):
    scene, gt = small_scene
    r1 = run_scene(scene, stage=1)
    assert r1.world is None and r1.stage == 1
    r2 = run_scene(scene, stage=2)
    assert r2.dynamic is None and r2.stage == 2
    assert np.isnan(r2.world[r2.roles == ROLE_DYNAMIC_FG]).all()
