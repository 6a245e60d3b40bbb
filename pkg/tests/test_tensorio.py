import json
import shutil

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from wtrack.config import PipelineConfig
from wtrack.errors import (BadMagic, DimMismatch, InputError, InvalidConfig, MissingFile,
                           ShapeMismatch, UnsupportedDtype)
from wtrack.tensorio import (MAGIC, SCENE_FILES, bilinear_sample, decode_tensor, encode_tensor,
                             load_scene, read_tensor, write_tensor)


def test_zeros_round_trip(tmp_path):
    p = tmp_path / "z.wt"
    write_tensor(p, np.zeros((2, 3), np.float32))
    tf = read_tensor(p)
    assert tf.dtype == "f32" and tf.dims == (2, 3)
    assert np.array_equal(tf.data, np.zeros((2, 3), np.float32))


def test_header_layout():
    blob = encode_tensor(np.arange(6, dtype=np.uint8).reshape(2, 3))
    assert blob[:8] == MAGIC
    assert blob[8] == 1 and blob[9] == 2
    assert blob[10:18] == bytes([2, 0, 0, 0, 3, 0, 0, 0])
    assert blob[18:] == bytes(range(6))


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.wt"
    p.write_bytes(b"XXXXXXXX" + encode_tensor(np.zeros(2, np.float32))[8:])
    with pytest.raises(BadMagic):
        read_tensor(p)


def test_truncated_payload_is_dim_mismatch():
    blob = encode_tensor(np.ones((4, 4), np.float32))
    with pytest.raises(DimMismatch):
        decode_tensor(blob[:-1])
    with pytest.raises(DimMismatch):
        decode_tensor(blob + b"\0")


def test_unknown_dtype_code():
    blob = bytearray(encode_tensor(np.ones(3, np.float32)))
    blob[8] = 7
    with pytest.raises(UnsupportedDtype):
        decode_tensor(bytes(blob))


def test_rank_and_zero_dims_rejected():
    blob = bytearray(encode_tensor(np.ones(3, np.float32)))
    blob[9] = 5
    with pytest.raises(DimMismatch):
        decode_tensor(bytes(blob))
    with pytest.raises(DimMismatch):
        encode_tensor(np.ones((1, 1, 1, 1, 1), np.float32))
    with pytest.raises(DimMismatch):
        encode_tensor(np.ones((0, 3), np.float32))


def test_float64_needs_explicit_cast():
    with pytest.raises(UnsupportedDtype):
        encode_tensor(np.ones(3))
    with pytest.raises(UnsupportedDtype):
        encode_tensor(np.ones(3, np.int32))


def test_missing_file(tmp_path):
    with pytest.raises(MissingFile):
        read_tensor(tmp_path / "nope.wt")


_shapes = hnp.array_shapes(min_dims=0, max_dims=4, min_side=1, max_side=5)


@given(st.one_of(
    hnp.arrays(np.float32, _shapes, elements=st.floats(width=32, allow_nan=True, allow_infinity=True)),
    hnp.arrays(np.uint8, _shapes)))
def test_round_trip_property(arr):
    tf = decode_tensor(encode_tensor(arr))
    assert tf.dims == arr.shape
    assert tf.data.tobytes() == arr.tobytes()


def test_thousand_random_tensors_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(1000):
        shape = tuple(rng.integers(1, 6, size=rng.integers(0, 5)))
        if rng.random() < 0.5:
            arr = rng.integers(0, 2**32, size=shape, dtype=np.uint64).astype(np.uint32).view(np.float32) \
                if shape else np.float32(rng.normal())
            arr = np.asarray(arr, dtype=np.float32)
        else:
            arr = rng.integers(0, 256, size=shape).astype(np.uint8)
        if i % 50 == 0:
            p = tmp_path / f"t{i}.wt"
            write_tensor(p, arr)
            back = read_tensor(p).data
        else:
            back = decode_tensor(encode_tensor(arr)).data
        assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_bilinear_sample_matches_formula(rng):
    img = rng.normal(size=(7, 9))
    uv = rng.uniform([0, 0], [8, 6], size=(50, 2))
    out = bilinear_sample(img, uv)
    for (u, v), got in zip(uv, out):
        u0, v0 = min(int(u), 7), min(int(v), 5)
        a, b = u - u0, v - v0
        ref = ((1 - a) * (1 - b) * img[v0, u0] + a * (1 - b) * img[v0, u0 + 1]
               + (1 - a) * b * img[v0 + 1, u0] + a * b * img[v0 + 1, u0 + 1])
        assert got == pytest.approx(ref, abs=1e-12)


# -------------------------------------------------------------------- scenes

def test_load_scene_matches_generator(small_scene_dir, small_scene):
    scene, gt = small_scene
    loaded = load_scene(small_scene_dir)
    assert loaded.n_tracks == scene.n_tracks and loaded.n_frames == scene.n_frames
    assert (loaded.height, loaded.width) == (scene.height, scene.width)
    assert np.allclose(loaded.tracks, scene.tracks, atol=1e-4)
    assert np.array_equal(loaded.visible, scene.visible)
    assert np.allclose(loaded.cam.K, scene.cam.K)


def test_config_defaults_and_overrides(tmp_path, small_scene_dir):
    d = tmp_path / "s"
    shutil.copytree(small_scene_dir, d)
    (d / "config.json").write_text(json.dumps({"epsilon": 0.25, "max_iters": 7}))
    cfg = load_scene(d).config
    default = PipelineConfig()
    assert cfg.epsilon == 0.25 and cfg.solver.max_iters == 7
    assert cfg.lambda_asap == default.lambda_asap == 5
    assert (default.stride_s, default.inlier_tau, default.clip_len, default.epsilon) == (4, 0.1, 5, 0.1)
    assert (default.lambda_ba, default.lambda_dc, default.lambda_arap, default.lambda_ts) == (1, 1, 100, 10)
    assert default.component_min_size == 50


@pytest.mark.parametrize("bad", [{"clip_len": 1}, {"lambda_ba": -1}, {"downsample_varpi": 0},
                                 {"knn_r": 0}, {"no_such_key": 3}])
def test_invalid_config(bad):
    with pytest.raises(InvalidConfig):
        PipelineConfig.from_dict(bad)


def test_missing_masks(tmp_path, small_scene_dir):
    d = tmp_path / "s"
    shutil.copytree(small_scene_dir, d)
    (d / "masks.wt").unlink()
    with pytest.raises(MissingFile):
        load_scene(d)


def test_depth_frame_count_mismatch(tmp_path, small_scene_dir):
    d = tmp_path / "s"
    shutil.copytree(small_scene_dir, d)
    depth = read_tensor(d / "depth.wt").data
    write_tensor(d / "depth.wt", depth[:-1])
    with pytest.raises(ShapeMismatch):
        load_scene(d)


def _drop_dim(arr):
    return arr[..., :-1] if arr.shape[-1] > 1 else arr[:-1]


@pytest.mark.parametrize("name", SCENE_FILES)
def test_every_single_field_corruption_rejected(tmp_path, small_scene_dir, name):
    # delete
    d = tmp_path / "del"
    shutil.copytree(small_scene_dir, d)
    (d / name).unlink()
    with pytest.raises(MissingFile):
        load_scene(d)
    # change one dim (config: malformed value instead)
    d = tmp_path / "dim"
    shutil.copytree(small_scene_dir, d)
    if name == "config.json":
        (d / name).write_text('{"clip_len": "five"}')
        expected = InvalidConfig
    else:
        write_tensor(d / name, _drop_dim(read_tensor(d / name).data))
        expected = InputError
    with pytest.raises(expected):
        load_scene(d)
