import copy

import numpy as np
import pytest

from miniwm import probes, synth
from miniwm.synth import CameraSpec, SceneValidationError, project_box

from conftest import centred_agent

W, H = 128, 64


def test_static_scene_frames_identical(static_spec):
    s = synth.render_scene(static_spec, synth.standard_rig(2, W, H), 24, 25.0)
    assert s.frames.shape == (24, 2, H, W, 3)
    assert np.array_equal(s.frames, np.broadcast_to(s.frames[:1], s.frames.shape))


def test_render_deterministic(rng):
    spec = synth.sample_scene_spec(rng)
    cams = synth.standard_rig(2, W, H)
    a = synth.render_scene(spec, cams, 24, 25.0)
    b = synth.render_scene(copy.deepcopy(spec), cams, 24, 25.0)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert np.array_equal(a.masks, b.masks)


def test_pixels_in_unit_range(rng):
    for _ in range(3):
        s = synth.render_scene(synth.sample_scene_spec(rng), synth.standard_rig(2, W, H), 24, 25.0)
        assert s.frames.min() >= 0 and s.frames.max() <= 1
        assert s.frames.dtype == np.float32


def test_agent_mask_matches_drawn_colour(static_spec):
    spec = copy.deepcopy(static_spec)
    spec.agents = [centred_agent(category=1)]
    cams = synth.standard_rig(2, W, H)
    s = synth.render_scene(spec, cams, 24, 25.0)
    colour = synth.CATEGORY_RGB[1] * synth.appearance(spec.weather, spec.time_of_day)
    painted = np.all(np.abs(s.frames[0, 0] - colour) < 1e-6, axis=-1)
    mask = s.masks[0, 0] == 2
    assert mask.any()
    assert np.array_equal(mask, painted)
    assert not (s.masks[0, 1] == 2).any()  # rear camera does not see it


def test_mask_inside_projected_box(rng):
    cams = synth.standard_rig(2, W, H)
    checked = 0
    for _ in range(20):
        spec = synth.sample_scene_spec(rng)
        if len(spec.agents) != 1:
            continue
        s = synth.render_scene(spec, cams, 24, 25.0)
        for t in range(0, 24, 6):
            for n in range(2):
                m = s.masks[t, n] > 0
                if not s.box_valid[t, n, 0] or m.sum() < 4:
                    continue
                x1, y1, x2, y2 = s.boxes[t, n, 0] * [W, H, W, H]
                rr, cc = np.nonzero(m)
                inside = (cc + 0.5 >= x1 - 1e-9) & (cc + 0.5 <= x2 + 1e-9) & (rr + 0.5 >= y1 - 1e-9) & (rr + 0.5 <= y2 + 1e-9)
                assert inside.mean() >= 0.95
                checked += 1
    assert checked > 5


def test_too_many_agents_rejected(static_spec):
    spec = copy.deepcopy(static_spec)
    spec.agents = [centred_agent(depth=10.0 + i) for i in range(3)]
    with pytest.raises(synth.TooManyAgentsError):
        synth.render_scene(spec, synth.standard_rig(1, W, H), 24, 25.0, b_max=2)


def test_non_orthonormal_extrinsics_rejected(static_spec):
    cam = synth.make_camera(0.0, W, H)
    cam.extrinsics = cam.extrinsics.copy()
    cam.extrinsics[0, 0] = 1.1
    with pytest.raises(SceneValidationError):
        synth.render_scene(static_spec, [cam], 24, 25.0)


def test_curvature_sign_mirrors_lateral_flow(static_spec):
    cams = synth.standard_rig(2, W, H)
    signs = {}
    for k in (0.06, -0.06):
        spec = copy.deepcopy(static_spec)
        spec.speed = np.full(24, 12.0)
        spec.curvature = np.full(24, k)
        signs[k] = probes.lateral_flow_sign(synth.render_scene(spec, cams, 24, 25.0).frames)
    assert signs[0.06] == 1 and signs[-0.06] == -1


def test_appearance_probe_recovers_every_cell(static_spec):
    cams = synth.standard_rig(1, W, H)
    for w in synth.WEATHERS:
        for tod in synth.TIMES_OF_DAY:
            spec = copy.deepcopy(static_spec)
            spec.weather, spec.time_of_day = w, tod
            s = synth.render_scene(spec, cams, 24, 25.0)
            assert probes.classify_appearance(s.frames) == (w, tod)


# ----------------------------------------------------------- sampling

def test_uniform_grid_cell_frequencies():
    rng = np.random.default_rng(1)
    n = 30_000
    counts = {}
    for _ in range(n):
        s = synth.sample_scene_spec(rng)
        key = (s.country, s.weather, s.time_of_day)
        counts[key] = counts.get(key, 0) + 1
    cells = len(synth.COUNTRIES) * len(synth.WEATHERS) * len(synth.TIMES_OF_DAY)
    assert len(counts) == cells
    p = 1 / cells
    sigma = np.sqrt(n * p * (1 - p))
    assert all(abs(c - n * p) <= 3 * sigma for c in counts.values())


def test_sampler_follows_grid_on_full_specs():
    rng = np.random.default_rng(2)
    w = np.zeros((3, 5, 4))
    w[2, 4, 3] = 1.0
    for _ in range(50):
        s = synth.sample_scene_spec(rng, synth.BalanceGrid(w))
        assert (s.country, s.weather, s.time_of_day) == ("DE", "snow", "night")


def test_sampler_joint_frequencies_full_path():
    rng = np.random.default_rng(3)
    w = np.ones((3, 5, 4))
    w[0] *= 3  # UK three times as likely
    grid = synth.BalanceGrid(w)
    n = 3000
    uk = sum(synth.sample_scene_spec(rng, grid).country == "UK" for _ in range(n))
    p = 3 / 5
    assert abs(uk - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_degenerate_grid_rejected():
    with pytest.raises(SceneValidationError):
        synth.BalanceGrid(np.zeros((3, 5, 4))).probabilities()


def test_clip_stride():
    assert len(synth.drive_clip_starts(10, 1, 5)) <= 2
    starts = synth.drive_clip_starts(100, 24, 30)
    assert starts == [0, 30, 60] and all(b - a >= 30 for a, b in zip(starts, starts[1:]))


def test_sampled_specs_respect_ranges(rng):
    for _ in range(200):
        s = synth.sample_scene_spec(rng)
        assert 0 <= s.speed.min() and s.speed.max() <= 75
        assert np.abs(s.curvature).max() <= 0.1
        assert len(s.agents) <= 8


def test_geofence_splits(rng):
    specs = [synth.sample_scene_spec(rng) for _ in range(50)]
    assert all(synth.split_geofence(s, lambda x, y: False) == "train" for s in specs)
    assert all(synth.split_geofence(s, lambda x, y: True) == "val" for s in specs)


def test_geofence_half_plane_fraction():
    rng = np.random.default_rng(4)
    n = 10_000
    # the map coordinate is uniform on [-1, 1]^2 and is all the fence looks at
    xs = rng.uniform(-1, 1, size=n)
    frac = np.mean(xs > 0)
    assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / n)
    specs = [synth.sample_scene_spec(rng) for _ in range(400)]
    val = [synth.split_geofence(s, lambda x, y: x > 0) for s in specs]
    f = val.count("val") / len(val)
    assert abs(f - 0.5) < 3 * np.sqrt(0.25 / 400)
    assert all((v == "val") == (s.map_xy[0] > 0) for s, v in zip(specs, val))


# ------------------------------------------------------------ project_box

def test_centred_cube_projects_to_centre():
    cam = CameraSpec((64.0, 64.0, 64.0, 32.0), np.eye(4), np.zeros(4), 128, 64)
    box = project_box([0, 0, 64.0], 0.0, [1, 1, 1], cam)  # identity extrinsics: optical axis is +z
    x1, y1, x2, y2 = box
    assert abs((x1 + x2) / 2 - 0.5) < 1e-12 and abs((y1 + y2) / 2 - 0.5) < 1e-12


def test_box_behind_camera_is_none():
    cam = synth.make_camera(0.0, W, H)
    assert project_box([-10.0, 0, 1.0], 0.0, [1, 1, 1], cam) is None
    assert project_box([10.0, 200.0, 1.0], 0.0, [1, 1, 1], cam) is None


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _surface_points(center, yaw, dims, n=40):
    u = np.linspace(-0.5, 0.5, n)
    a, b = np.meshgrid(u, u)
    a, b = a.ravel(), b.ravel()
    pts = []
    for axis in range(3):
        for side in (-0.5, 0.5):
            p = np.zeros((a.size, 3))
            others = [i for i in range(3) if i != axis]
            p[:, axis] = side
            p[:, others[0]], p[:, others[1]] = a, b
            pts.append(p)
    p = np.concatenate(pts) * np.asarray(dims)
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return p @ rot.T + center


def test_project_box_matches_dense_sampling():
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(60):
        ext = np.eye(4)
        ext[:3, :3] = _random_rotation(rng)
        ext[:3, 3] = rng.normal(size=3)
        cam = CameraSpec((rng.uniform(40, 120), rng.uniform(40, 120), rng.uniform(20, 100), rng.uniform(10, 50)),
                         ext, np.zeros(4), 128, 64)
        # place the box in front of the camera
        d = rng.uniform(4, 15)
        dir_cam = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3), 1.0])
        center = cam.rotation.T @ (dir_cam * d - cam.translation)
        yaw, dims = rng.uniform(-np.pi, np.pi), rng.uniform(0.5, 3.0, size=3)
        box = project_box(center, yaw, dims, cam)
        u, v, z = synth.project_points(_surface_points(center, yaw, dims), cam)
        if np.any(z <= 0.5):
            continue
        if u.max() <= 0 or v.max() <= 0 or u.min() >= 128 or v.min() >= 64:
            assert box is None
            continue
        assert box is not None
        ref = np.array([np.clip(u.min(), 0, 128), np.clip(v.min(), 0, 64),
                        np.clip(u.max(), 0, 128), np.clip(v.max(), 0, 64)])
        assert np.abs(np.array(box) * [128, 64, 128, 64] - ref).max() <= 1.0
        checked += 1
    assert checked > 30


def test_corner_on_camera_plane_excluded():
    cam = CameraSpec((50.0, 50.0, 64.0, 32.0), np.eye(4), np.zeros(4), 128, 64)
    # cube spanning z in [0, 2]: four corners on the plane z=0
    box = project_box([0.0, 0.0, 1.0], 0.0, [2.0, 2.0, 2.0], cam)
    assert box is not None and all(np.isfinite(box))


def test_distortion_roundtrip():
    rng = np.random.default_rng(6)
    x, y = rng.uniform(-0.6, 0.6, size=(2, 100))
    k = np.array([0.05, -0.01, 0.002, 0.0])
    xd, yd = synth.distort(x, y, k)
    xu, yu = synth.undistort(xd, yd, k)
    assert np.allclose(xu, x, atol=1e-9) and np.allclose(yu, y, atol=1e-9)


def test_sample_roundtrip_on_disk(tmp_path, rng):
    spec = synth.sample_scene_spec(rng, T_v=8)
    s = synth.render_scene(spec, synth.standard_rig(2, W, H), 8, 25.0)
    synth.write_sample(s, tmp_path / "s")
    back = synth.read_sample(tmp_path / "s")
    assert np.abs(back.frames - s.frames).max() <= 0.5 / 255 + 1e-6
    assert np.array_equal(back.masks, s.masks)
    assert back.spec.to_json() == spec.to_json()
