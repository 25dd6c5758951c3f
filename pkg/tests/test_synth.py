import math

import numpy as np
import pytest

from edgedepth import dgde, synth
from edgedepth.errors import ParseError, UnprojectableInstance
from edgedepth.geometry import Camera, normalize_points

from conftest import CAMERA, make_instance


def test_template_base_keypoints():
    t = synth.make_template("box", n_extra=0, seed=0)
    assert t.n == 10
    h, w, l = t.dims
    corners = t.keypoints[:8]
    assert set(np.abs(corners[:, 0])) == {l / 2.0}
    assert set(np.abs(corners[:, 1])) == {h / 2.0}
    assert set(np.abs(corners[:, 2])) == {w / 2.0}
    # top and bottom centers
    assert {tuple(t.keypoints[8]), tuple(t.keypoints[9])} == {
        (0.0, -h / 2.0, 0.0), (0.0, h / 2.0, 0.0)}


def test_template_73_keypoints():
    t = synth.make_template("car_like", n_extra=63, seed=0)
    assert t.n == 73


def test_template_deterministic():
    a = synth.make_template("car_like", n_extra=20, seed=5)
    b = synth.make_template("car_like", n_extra=20, seed=5)
    assert np.array_equal(a.keypoints, b.keypoints)
    c = synth.make_template("car_like", n_extra=20, seed=6)
    assert not np.array_equal(a.keypoints, c.keypoints)


def test_template_extras_stay_in_box():
    t = synth.make_template("box", n_extra=200, seed=1)
    h, w, l = t.dims
    extras = t.keypoints[10:]
    assert (np.abs(extras[:, 0]) <= l / 2 + 1e-12).all()
    assert (np.abs(extras[:, 1]) <= h / 2 + 1e-12).all()
    assert (np.abs(extras[:, 2]) <= w / 2 + 1e-12).all()


def test_template_validation():
    with pytest.raises(ValueError):
        synth.make_template("sphere", 5)
    with pytest.raises(ValueError):
        synth.make_template("box", 5, dims=(0.0, 1.0, 1.0))


def test_zero_noise_instance_is_clean():
    inst = make_instance(seed=3)
    assert np.array_equal(inst.kp2d, inst.kp2d_clean)
    assert np.array_equal(inst.kp3d, inst.kp3d_clean)
    assert inst.z_star == inst.pose.z_c > 0.0


def test_noise_is_reproducible():
    a = make_instance(seed=3, sigma_px=1.0, p_outlier=0.2)
    b = make_instance(seed=3, sigma_px=1.0, p_outlier=0.2)
    assert np.array_equal(a.kp2d, b.kp2d)
    assert not np.array_equal(a.kp2d, a.kp2d_clean)
    c = make_instance(seed=4, sigma_px=1.0, p_outlier=0.2)
    assert not np.array_equal(a.kp2d, c.kp2d)


def test_outliers_bounded_by_box():
    template = synth.make_template("box", n_extra=30, seed=0)
    noise = synth.NoiseModel(p_outlier=1.0, outlier_px=50.0)
    inst = synth.sample_instance(template, synth.PoseRanges(), CAMERA, noise, seed=9)
    shift = np.abs(inst.kp2d - inst.kp2d_clean)
    assert shift.max() <= 50.0
    assert shift.max() > 1.0  # outliers actually moved


def test_unprojectable_instance():
    template = synth.make_template("box", n_extra=0, seed=0)
    ranges = synth.PoseRanges(z_range=(0.1, 0.2))  # box extends past the camera
    with pytest.raises(UnprojectableInstance):
        synth.sample_instance(template, ranges, CAMERA, synth.NoiseModel(), seed=0)


def test_clean_view_satisfies_projection_residuals():
    for seed in range(50):
        inst = make_instance(seed=seed)
        npx = normalize_points(inst.camera, inst.kp2d_clean)
        c, s_ = math.cos(inst.pose.r_y), math.sin(inst.pose.r_y)
        kp = inst.kp3d_clean
        S = inst.pose.z_c - kp[:, 0] * s_ + kp[:, 2] * c
        X = inst.pose.x_c + kp[:, 0] * c + kp[:, 2] * s_
        Y = inst.pose.y_c + kp[:, 1]
        assert np.abs(npx[:, 0] * S - X).max() < 1e-10
        assert np.abs(npx[:, 1] * S - Y).max() < 1e-10


def test_oracle_sweep_clean_candidates_exact():
    for seed in range(200):
        inst = make_instance(seed=seed, sigma_px=2.0, p_outlier=0.3)
        cands = dgde.generate_candidates(inst, view="clean")
        ok = cands.valid
        assert (np.abs(cands.z[ok] - inst.z_star) / inst.z_star < 1e-9).all()


def test_dataset_round_trip(tmp_path):
    insts = [make_instance(seed=s, sigma_px=1.0, p_outlier=0.1) for s in range(10)]
    path = tmp_path / "data.jsonl"
    synth.write_dataset(path, insts)
    back = synth.read_dataset(path)
    assert len(back) == 10
    for a, b in zip(insts, back):
        assert a.pose.r_y == b.pose.r_y
        assert a.pose.t == b.pose.t
        assert np.array_equal(a.kp2d, b.kp2d)
        assert np.array_equal(a.kp3d, b.kp3d)
        assert np.array_equal(a.kp2d_clean, b.kp2d_clean)
        assert a.z_star == b.z_star
    # write(read(write(x))) is byte-identical
    path2 = tmp_path / "data2.jsonl"
    synth.write_dataset(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_dataset_empty(tmp_path):
    path = tmp_path / "empty.jsonl"
    synth.write_dataset(path, [])
    assert path.read_bytes() == b""
    assert synth.read_dataset(path) == []


def test_dataset_parse_error_names_line(tmp_path):
    insts = [make_instance(seed=s) for s in range(3)]
    path = tmp_path / "trunc.jsonl"
    synth.write_dataset(path, insts)
    lines = path.read_text().splitlines()
    lines[1] = lines[1][: len(lines[1]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as info:
        synth.read_dataset(path)
    assert info.value.line == 2


def test_dataset_rejects_unknown_schema(tmp_path):
    path = tmp_path / "alien.jsonl"
    path.write_text('{"schema": "other", "x": 1}\n')
    with pytest.raises(ParseError):
        synth.read_dataset(path)
