"""Procedural multi-camera driving scenes with exact ground truth.

The renderer is a 2.5D compositor: a cylindrical sky/skyline panorama that
pans with the ego heading, an ego-locked ground plane carrying the road and
its markings (which scroll with distance travelled), and agents drawn as the
filled convex hull of their projected cuboid corners. Weather and time of day
are applied last as a per-channel multiplicative tint and a brightness
multiplier, so both can be read back from the pixels alone.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

COUNTRIES = ("UK", "US", "DE")
WEATHERS = ("clear", "cloudy", "rain", "fog", "snow")
TIMES_OF_DAY = ("dawn", "day", "dusk", "night")
TRAFFIC_LIGHTS = ("none", "red", "amber", "green")
SPEED_LIMITS_KMH = (30, 50, 70, 100, 130)
MAX_LANES = 4
# mask value = index + 1; 0 is background
CATEGORIES = ("car", "truck", "pedestrian", "cyclist")

# log-space chroma offsets, zero mean per row
WEATHER_LOG_TINT = {
    "clear": (0.15, 0.00, -0.15),
    "cloudy": (0.00, 0.00, 0.00),
    "rain": (-0.15, 0.00, 0.15),
    "fog": (0.10, -0.20, 0.10),
    "snow": (-0.10, 0.20, -0.10),
}
TIME_OF_DAY_BRIGHTNESS = {"dawn": 0.75, "day": 1.0, "dusk": 0.55, "night": 0.32}

SKY_RGB = np.array([0.50, 0.62, 0.80])
SKYLINE_RGB = np.array([0.30, 0.27, 0.36])
GRASS_RGB = np.array([0.30, 0.42, 0.25])
ROAD_RGB = np.array([0.36, 0.36, 0.38])
EDGE_LINE_RGB = np.array([0.82, 0.82, 0.82])
CENTER_LINE_RGB = {
    "UK": np.array([0.82, 0.82, 0.82]),
    "US": np.array([0.82, 0.66, 0.10]),
    "DE": np.array([0.55, 0.76, 0.82]),
}
CATEGORY_RGB = np.array([
    [0.80, 0.12, 0.12],
    [0.12, 0.22, 0.80],
    [0.90, 0.80, 0.12],
    [0.75, 0.12, 0.75],
])
CATEGORY_DIMS = np.array([  # length, width, height in metres
    [4.5, 1.9, 1.5],
    [8.0, 2.5, 3.2],
    [0.6, 0.6, 1.75],
    [1.8, 0.6, 1.7],
])
LIGHT_RGB = {"red": (1.0, 0.35, 0.25), "amber": (1.0, 0.6, 0.05), "green": (0.2, 0.95, 0.4)}

LANE_WIDTH = 3.5
DASH_PERIOD, DASH_LENGTH = 6.0, 3.0
LINE_HALF_WIDTH = 0.12
SKYLINE_HARMONICS = (2, 5, 9)
SKY_BAND_FRACTION = 0.125  # top rows that are always sky (skyline stays below them)
NEAR_PLANE = 0.1


class SceneValidationError(ValueError):
    pass


class TooManyAgentsError(SceneValidationError):
    pass


@dataclass
class CameraSpec:
    intrinsics: tuple  # (fx, fy, cx, cy) in pixels
    extrinsics: np.ndarray  # 4x4 vehicle -> camera
    distortion: np.ndarray  # radial k1..kD
    width: int
    height: int

    def validate(self) -> None:
        fx, fy, cx, cy = self.intrinsics
        if fx <= 0 or fy <= 0:
            raise SceneValidationError(f"focal lengths must be positive, got {fx}, {fy}")
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            raise SceneValidationError(f"principal point ({cx}, {cy}) outside image")
        ext = np.asarray(self.extrinsics, dtype=np.float64)
        if ext.shape != (4, 4):
            raise SceneValidationError("extrinsics must be 4x4")
        rot = ext[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6 or np.linalg.det(rot) < 0:
            raise SceneValidationError("extrinsics rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return np.asarray(self.extrinsics, dtype=np.float64)[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return np.asarray(self.extrinsics, dtype=np.float64)[:3, 3]

    def to_json(self) -> dict:
        return {
            "intrinsics": [float(v) for v in self.intrinsics],
            "extrinsics": np.asarray(self.extrinsics).tolist(),
            "distortion": np.asarray(self.distortion).tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CameraSpec":
        return cls(tuple(d["intrinsics"]), np.array(d["extrinsics"]), np.array(d["distortion"]),
                   int(d["width"]), int(d["height"]))


def make_camera(yaw_deg: float, width: int, height: int, position=(1.5, 0.0, 1.5),
                fov_deg: float = 90.0, distortion: Optional[Sequence[float]] = None,
                n_distortion: int = 4) -> CameraSpec:
    """Level pinhole camera looking along vehicle azimuth `yaw_deg` (left positive)."""
    yaw = np.deg2rad(yaw_deg)
    fx = fy = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    # vehicle frame: x forward, y left, z up; camera frame: x right, y down, z forward
    fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    rot = np.stack([right, down, fwd])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ np.asarray(position, dtype=np.float64)
    dist = np.zeros(n_distortion) if distortion is None else np.asarray(distortion, dtype=np.float64)
    return CameraSpec((fx, fy, width / 2, height / 2), ext, dist, width, height)


RIG_YAWS = {1: (0.0,), 2: (0.0, 180.0), 5: (0.0, 55.0, -55.0, 125.0, -125.0)}


def standard_rig(n_cameras: int, width: int, height: int) -> list[CameraSpec]:
    yaws = RIG_YAWS.get(n_cameras) or tuple(360.0 * i / n_cameras for i in range(n_cameras))
    return [make_camera(y, width, height) for y in yaws]


@dataclass
class AgentTrack:
    centers: np.ndarray  # (T, 3) vehicle frame, metres
    yaw: np.ndarray  # (T,)
    dims: np.ndarray  # (3,) l, w, h
    category: int  # index into CATEGORIES

    def validate(self, n_frames: int) -> None:
        if np.any(np.asarray(self.dims) <= 0):
            raise SceneValidationError("agent dimensions must be positive")
        if len(self.centers) != n_frames or len(self.yaw) != n_frames:
            raise SceneValidationError("agent track length must equal video length")
        if not 0 <= self.category < len(CATEGORIES):
            raise SceneValidationError(f"unknown agent category {self.category}")


@dataclass
class SceneSpec:
    seed: int
    country: str
    weather: str
    time_of_day: str
    lanes: int
    one_way: bool
    crossing: bool
    speed_limit: int  # index into SPEED_LIMITS_KMH
    traffic_light: list  # per-frame state names
    speed: np.ndarray  # (T,) m/s
    curvature: np.ndarray  # (T,) 1/m
    agents: list = field(default_factory=list)
    map_xy: tuple = (0.0, 0.0)

    def validate(self, n_frames: Optional[int] = None, b_max: int = 8) -> None:
        if self.country not in COUNTRIES or self.weather not in WEATHERS or self.time_of_day not in TIMES_OF_DAY:
            raise SceneValidationError("unknown categorical metadata value")
        if not 1 <= self.lanes <= MAX_LANES:
            raise SceneValidationError(f"lane count {self.lanes} outside 1..{MAX_LANES}")
        speed, curv = np.asarray(self.speed), np.asarray(self.curvature)
        if speed.min(initial=0.0) < 0 or speed.max(initial=0.0) > 75:
            raise SceneValidationError("ego speed outside [0, 75] m/s")
        if np.abs(curv).max(initial=0.0) > 0.1:
            raise SceneValidationError("ego curvature outside [-0.1, 0.1] 1/m")
        if len(self.agents) > b_max:
            raise TooManyAgentsError(f"{len(self.agents)} agents exceed B_max={b_max}")
        n = len(speed) if n_frames is None else n_frames
        if len(speed) != n or len(curv) != n or len(self.traffic_light) != n:
            raise SceneValidationError("per-frame sequences must match the video length")
        if any(s not in TRAFFIC_LIGHTS for s in self.traffic_light):
            raise SceneValidationError("unknown traffic light state")
        for a in self.agents:
            a.validate(n)

    def metadata(self) -> dict:
        """Categorical indices for the static metadata fields."""
        return {
            "country": COUNTRIES.index(self.country),
            "weather": WEATHERS.index(self.weather),
            "time_of_day": TIMES_OF_DAY.index(self.time_of_day),
            "lanes": self.lanes - 1,
            "one_way": int(self.one_way),
            "crossing": int(self.crossing),
            "speed_limit": self.speed_limit,
        }

    def to_json(self) -> dict:
        return {
            "seed": self.seed, "country": self.country, "weather": self.weather,
            "time_of_day": self.time_of_day, "lanes": self.lanes, "one_way": self.one_way,
            "crossing": self.crossing, "speed_limit": self.speed_limit,
            "traffic_light": list(self.traffic_light),
            "speed": np.asarray(self.speed).tolist(), "curvature": np.asarray(self.curvature).tolist(),
            "map_xy": list(self.map_xy),
            "agents": [{"centers": a.centers.tolist(), "yaw": np.asarray(a.yaw).tolist(),
                        "dims": np.asarray(a.dims).tolist(), "category": a.category} for a in self.agents],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        agents = [AgentTrack(np.array(a["centers"]), np.array(a["yaw"]), np.array(a["dims"]), a["category"])
                  for a in d["agents"]]
        return cls(d["seed"], d["country"], d["weather"], d["time_of_day"], d["lanes"], d["one_way"],
                   d["crossing"], d["speed_limit"], list(d["traffic_light"]), np.array(d["speed"]),
                   np.array(d["curvature"]), agents, tuple(d["map_xy"]))


@dataclass
class VideoSample:
    frames: np.ndarray  # (T, N, H, W, 3) float32 in [0, 1]
    cameras: list
    timestamps: np.ndarray  # (T,) seconds
    spec: SceneSpec
    masks: np.ndarray  # (T, N, H, W) uint8 category index + 1
    boxes: np.ndarray  # (T, N, A, 4) normalized x1,y1,x2,y2 (zeros when invalid)
    box_valid: np.ndarray  # (T, N, A) bool


# ---------------------------------------------------------------- geometry

def distort(x: np.ndarray, y: np.ndarray, k: np.ndarray):
    r2 = x * x + y * y
    f = np.ones_like(r2)
    p = np.ones_like(r2)
    for ki in np.asarray(k, dtype=np.float64):
        p = p * r2
        f = f + ki * p
    return x * f, y * f


def undistort(xd: np.ndarray, yd: np.ndarray, k: np.ndarray, iters: int = 20):
    if not np.any(k):
        return xd, yd
    x, y = xd.copy(), yd.copy()
    for _ in range(iters):
        r2 = x * x + y * y
        f = np.ones_like(r2)
        p = np.ones_like(r2)
        for ki in k:
            p = p * r2
            f = f + ki * p
        x, y = xd / f, yd / f
    return x, y


def cuboid_corners(center, yaw: float, dims) -> np.ndarray:
    l, w, h = dims
    sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * l / 2
    sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * w / 2
    sz = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * h / 2
    c, s = np.cos(yaw), np.sin(yaw)
    pts = np.stack([c * sx - s * sy, s * sx + c * sy, sz], axis=1)
    return pts + np.asarray(center, dtype=np.float64)


def project_points(points_vehicle: np.ndarray, cam: CameraSpec):
    """Returns (u, v, depth) for points in the vehicle frame."""
    pc = points_vehicle @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):  # points on the camera plane
        x, y = pc[:, 0] / z, pc[:, 1] / z
        xd, yd = distort(x, y, cam.distortion)
    fx, fy, cx, cy = cam.intrinsics
    return fx * xd + cx, fy * yd + cy, z


def project_box(center, yaw: float, dims, cam: CameraSpec) -> Optional[tuple]:
    """Normalized (x1, y1, x2, y2) image box of a cuboid, or None when not visible.

    Corners at or behind the camera plane are dropped from the hull.
    """
    u, v, z = project_points(cuboid_corners(center, yaw, dims), cam)
    keep = z > 0
    if not keep.any():
        return None
    u, v = u[keep], v[keep]
    W, H = cam.width, cam.height
    x1, x2, y1, y2 = u.min(), u.max(), v.min(), v.max()
    if x2 <= 0 or y2 <= 0 or x1 >= W or y1 >= H:
        return None
    x1, x2 = np.clip([x1, x2], 0, W)
    y1, y2 = np.clip([y1, y2], 0, H)
    return (float(x1 / W), float(y1 / H), float(x2 / W), float(y2 / H))


def convex_hull(points: np.ndarray) -> np.ndarray:
    pts = sorted(set(map(tuple, np.round(points, 9))))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])  # counter-clockwise in (u, v)


def fill_convex(hull: np.ndarray, height: int, width: int) -> tuple:
    """Pixel rows/cols whose centres lie inside a convex polygon."""
    if len(hull) < 3:
        return np.empty(0, int), np.empty(0, int)
    c0 = max(int(np.floor(hull[:, 0].min())), 0)
    c1 = min(int(np.ceil(hull[:, 0].max())), width)
    r0 = max(int(np.floor(hull[:, 1].min())), 0)
    r1 = min(int(np.ceil(hull[:, 1].max())), height)
    if c1 <= c0 or r1 <= r0:
        return np.empty(0, int), np.empty(0, int)
    rr, cc = np.mgrid[r0:r1, c0:c1]
    pu, pv = cc + 0.5, rr + 0.5
    inside = np.ones(rr.shape, bool)
    for i in range(len(hull)):
        a, b = hull[i], hull[(i + 1) % len(hull)]
        inside &= (b[0] - a[0]) * (pv - a[1]) - (b[1] - a[1]) * (pu - a[0]) >= 0
    return rr[inside], cc[inside]


# --------------------------------------------------------------- rendering

def ego_motion(spec: SceneSpec, fps: float):
    """Cumulative heading (rad) and distance (m) before each frame."""
    speed = np.asarray(spec.speed, dtype=np.float64)
    curv = np.asarray(spec.curvature, dtype=np.float64)
    dt = 1.0 / fps
    heading = np.concatenate([[0.0], np.cumsum(curv * speed * dt)[:-1]])
    dist = np.concatenate([[0.0], np.cumsum(speed * dt)[:-1]])
    return heading, dist


def appearance(weather: str, time_of_day: str) -> np.ndarray:
    """Per-channel multiplier applied to every rendered pixel."""
    return np.exp(np.array(WEATHER_LOG_TINT[weather])) * TIME_OF_DAY_BRIGHTNESS[time_of_day]


def _skyline_params(seed: int):
    rng = np.random.default_rng([seed, 7])
    amps = rng.uniform(0.02, 0.05, size=len(SKYLINE_HARMONICS))
    phases = rng.uniform(0, 2 * np.pi, size=len(SKYLINE_HARMONICS))
    return amps, phases


def _camera_rays(cam: CameraSpec):
    H, W = cam.height, cam.width
    fx, fy, cx, cy = cam.intrinsics
    vv, uu = np.mgrid[0:H, 0:W] + 0.5
    x, y = undistort((uu - cx) / fx, (vv - cy) / fy, np.asarray(cam.distortion, dtype=np.float64))
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d_veh = d_cam @ cam.rotation  # R^T d
    origin = -cam.rotation.T @ cam.translation
    return d_veh, origin


def _render_background(spec: SceneSpec, cam: CameraSpec, heading: np.ndarray, dist: np.ndarray) -> np.ndarray:
    d, origin = _camera_rays(cam)
    T = len(heading)
    H, W = cam.height, cam.width
    az = np.arctan2(d[..., 1], d[..., 0])
    el = np.arctan2(d[..., 2], np.hypot(d[..., 0], d[..., 1]))
    img = np.empty((T, H, W, 3))
    img[:] = SKY_RGB

    fy, cy = cam.intrinsics[1], cam.intrinsics[3]
    amps, phases = _skyline_params(spec.seed)
    world_az = az[None] + heading[:, None, None]
    sky_h = 0.10 + sum(a * np.sin(k * world_az + p) for k, a, p in zip(SKYLINE_HARMONICS, amps, phases))
    img[(el[None] >= 0) & (el[None] < sky_h)] = SKYLINE_RGB

    ground = d[..., 2] < -1e-6
    s = np.where(ground, -origin[2] / np.where(ground, d[..., 2], -1.0), 0.0)
    gx = origin[0] + s * d[..., 0]
    gy = origin[1] + s * d[..., 1]
    img[:, ground] = GRASS_RGB

    half = spec.lanes * LANE_WIDTH / 2
    road = ground & (np.abs(gy) <= half)
    img[:, road] = ROAD_RGB
    edge = road & (np.abs(np.abs(gy) - (half - 0.2)) < LINE_HALF_WIDTH)
    img[:, edge] = EDGE_LINE_RGB

    center_idx = spec.lanes // 2 if not spec.one_way else -1
    for i in range(1, spec.lanes):
        on_line = road & (np.abs(gy - (-half + i * LANE_WIDTH)) < LINE_HALF_WIDTH)
        if i == center_idx:
            img[:, on_line] = CENTER_LINE_RGB[spec.country]
            continue
        phase = (gx[None] + dist[:, None, None]) % DASH_PERIOD
        dash = on_line[None] & (phase < DASH_LENGTH)
        img[dash] = EDGE_LINE_RGB

    if spec.crossing:
        xc = 15.0 - dist[:, None, None]
        zebra = road[None] & (np.abs(gx[None] - xc) < 2.0) & ((gy[None] % 1.0) < 0.5)
        img[zebra] = EDGE_LINE_RGB
    return img


def render_scene(spec: SceneSpec, cams: Sequence[CameraSpec], T_v: int, fps: float,
                 b_max: int = 8, temporal_factor: int = 8) -> VideoSample:
    """Render a labeled multi-camera video; a pure function of its arguments."""
    if fps <= 0:
        raise SceneValidationError("fps must be positive")
    if T_v % temporal_factor:
        raise SceneValidationError(f"T_v={T_v} not divisible by temporal factor {temporal_factor}")
    spec.validate(T_v, b_max)
    for cam in cams:
        cam.validate()
    heading, dist = ego_motion(spec, fps)
    N = len(cams)
    H, W = cams[0].height, cams[0].width
    frames = np.empty((T_v, N, H, W, 3))
    masks = np.zeros((T_v, N, H, W), np.uint8)
    A = len(spec.agents)
    boxes = np.zeros((T_v, N, A, 4))
    box_valid = np.zeros((T_v, N, A), bool)

    for n, cam in enumerate(cams):
        frames[:, n] = _render_background(spec, cam, heading, dist)
        for t in range(T_v):
            order = []
            for a_idx, ag in enumerate(spec.agents):
                box = project_box(ag.centers[t], ag.yaw[t], ag.dims, cam)
                if box is not None:
                    boxes[t, n, a_idx] = box
                    box_valid[t, n, a_idx] = True
                u, v, z = project_points(cuboid_corners(ag.centers[t], ag.yaw[t], ag.dims), cam)
                if np.all(z > NEAR_PLANE):
                    order.append((float(z.mean()), a_idx, np.stack([u, v], 1)))
            for _, a_idx, uv in sorted(order, key=lambda o: -o[0]):
                rr, cc = fill_convex(convex_hull(uv), H, W)
                cat = spec.agents[a_idx].category
                frames[t, n, rr, cc] = CATEGORY_RGB[cat]
                masks[t, n, rr, cc] = cat + 1
            state = spec.traffic_light[t]
            if n == 0 and state != "none":
                r0, r1 = int(0.30 * H), int(0.30 * H) + max(H // 10, 2)
                c0, c1 = int(0.86 * W), int(0.86 * W) + max(W // 40, 2)
                frames[t, n, r0:r1, c0:c1] = LIGHT_RGB[state]
                masks[t, n, r0:r1, c0:c1] = 0

    frames = np.clip(frames * appearance(spec.weather, spec.time_of_day), 0.0, 1.0).astype(np.float32)
    return VideoSample(frames, list(cams), np.arange(T_v) / fps, spec, masks, boxes, box_valid)


# ---------------------------------------------------------------- sampling

@dataclass
class BalanceGrid:
    """Target joint frequencies over (country, weather, time_of_day)."""
    weights: np.ndarray  # (3, 5, 4)

    @classmethod
    def uniform(cls) -> "BalanceGrid":
        return cls(np.ones((len(COUNTRIES), len(WEATHERS), len(TIMES_OF_DAY))))

    def probabilities(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(COUNTRIES), len(WEATHERS), len(TIMES_OF_DAY)):
            raise SceneValidationError(f"balance grid must have shape (3, 5, 4), got {w.shape}")
        if np.any(w < 0) or not np.isfinite(w).all() or w.sum() <= 0:
            raise SceneValidationError("balance grid needs nonnegative weights with positive total")
        return w / w.sum()


def _sample_agents(rng: np.random.Generator, n_agents: int, T_v: int, fps: float, lanes: int) -> list:
    t = np.arange(T_v) / fps
    agents = []
    half = lanes * LANE_WIDTH / 2
    for _ in range(n_agents):
        cat = int(rng.choice(len(CATEGORIES), p=[0.55, 0.15, 0.15, 0.15]))
        dims = CATEGORY_DIMS[cat].copy()
        if cat >= 2:  # vulnerable road users on the verge
            y = rng.choice([-1, 1]) * (half + rng.uniform(0.8, 2.5))
            v_rel, yaw = rng.uniform(-1.5, 0.0), float(rng.choice([0.0, np.pi]))
        else:
            lane = rng.integers(lanes)
            y = -half + (lane + 0.5) * LANE_WIDTH
            v_rel, yaw = rng.uniform(-3.0, 3.0), 0.0
        x0 = rng.choice([-1, 1], p=[0.3, 0.7]) * rng.uniform(7.0, 35.0)
        centers = np.stack([x0 + v_rel * t, np.full(T_v, y), np.full(T_v, dims[2] / 2)], axis=1)
        agents.append(AgentTrack(centers, np.full(T_v, yaw), dims, cat))
    return agents


def sample_scene_spec(rng: np.random.Generator, balance: Optional[BalanceGrid] = None, *,
                      T_v: int = 24, fps: float = 25.0, b_max: int = 8,
                      max_agents: Optional[int] = None) -> SceneSpec:
    """Draw a scene whose (country, weather, time_of_day) cell follows `balance`."""
    probs = (balance or BalanceGrid.uniform()).probabilities()
    cell = rng.choice(probs.size, p=probs.ravel())
    ci, wi, ti = np.unravel_index(cell, probs.shape)
    lanes = int(rng.integers(1, MAX_LANES + 1))
    v0 = rng.uniform(2.0, 20.0)
    accel = rng.uniform(-1.0, 1.0)
    speed = np.clip(v0 + accel * np.arange(T_v) / fps, 0.0, 75.0)
    if rng.random() < 0.2:
        kappa = 0.0
    else:
        kappa = rng.choice([-1.0, 1.0]) * rng.uniform(0.01, 0.1)
    curvature = np.full(T_v, kappa)
    light = TRAFFIC_LIGHTS[int(rng.integers(len(TRAFFIC_LIGHTS)))]
    lights = [light] * T_v
    if light != "none" and rng.random() < 0.3:
        switch = int(rng.integers(1, T_v))
        lights[switch:] = ["green" if light != "green" else "amber"] * (T_v - switch)
    n_agents = int(rng.integers(0, min(b_max, max_agents if max_agents is not None else 4) + 1))
    spec = SceneSpec(
        seed=int(rng.integers(2**31 - 1)),
        country=COUNTRIES[ci], weather=WEATHERS[wi], time_of_day=TIMES_OF_DAY[ti],
        lanes=lanes, one_way=bool(rng.random() < 0.3), crossing=bool(rng.random() < 0.25),
        speed_limit=int(rng.integers(len(SPEED_LIMITS_KMH))),
        traffic_light=lights, speed=speed, curvature=curvature,
        agents=_sample_agents(rng, n_agents, T_v, fps, lanes),
        map_xy=(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))),
    )
    spec.validate(T_v, b_max)
    return spec


def drive_clip_starts(drive_frames: int, clip_frames: int, min_stride: int) -> list[int]:
    """Start frames of clips extracted from one drive, at least `min_stride` apart."""
    if min_stride < 1:
        raise SceneValidationError("minimum stride must be >= 1")
    return list(range(0, max(drive_frames - clip_frames, -1) + 1, min_stride))


def split_geofence(spec: SceneSpec, fence: Callable[[float, float], bool]) -> str:
    return "val" if fence(*spec.map_xy) else "train"


# ------------------------------------------------------------------- on disk

def write_sample(sample: VideoSample, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    T, N = sample.frames.shape[:2]
    palette = [0, 0, 0] + [int(255 * c) for rgb in CATEGORY_RGB for c in rgb]
    for n in range(N):
        (out_dir / "frames" / f"cam{n}").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks" / f"cam{n}").mkdir(parents=True, exist_ok=True)
        for t in range(T):
            rgb = np.round(sample.frames[t, n] * 255).astype(np.uint8)
            Image.fromarray(rgb).save(out_dir / "frames" / f"cam{n}" / f"{t:04d}.png")
            m = Image.fromarray(sample.masks[t, n], mode="P")
            m.putpalette(palette)
            m.save(out_dir / "masks" / f"cam{n}" / f"{t:04d}.png")
    labels = {
        "spec": sample.spec.to_json(),
        "metadata": sample.spec.metadata(),
        "cameras": [c.to_json() for c in sample.cameras],
        "timestamps": sample.timestamps.tolist(),
        "boxes": sample.boxes.tolist(),
        "box_valid": sample.box_valid.tolist(),
        "categories": list(CATEGORIES),
    }
    (out_dir / "labels.json").write_text(json.dumps(labels))


def read_sample(sample_dir: Path) -> VideoSample:
    sample_dir = Path(sample_dir)
    labels = json.loads((sample_dir / "labels.json").read_text())
    cams = [CameraSpec.from_json(c) for c in labels["cameras"]]
    T = len(labels["timestamps"])
    frames = np.stack([
        np.stack([np.asarray(Image.open(sample_dir / "frames" / f"cam{n}" / f"{t:04d}.png"), np.float32) / 255
                  for n in range(len(cams))]) for t in range(T)])
    masks = np.stack([
        np.stack([np.asarray(Image.open(sample_dir / "masks" / f"cam{n}" / f"{t:04d}.png"))
                  for n in range(len(cams))]) for t in range(T)]).astype(np.uint8)
    boxes = np.array(labels["boxes"], dtype=np.float64).reshape(T, len(cams), -1, 4)
    valid = np.array(labels["box_valid"], dtype=bool).reshape(T, len(cams), -1)
    return VideoSample(frames, cams, np.array(labels["timestamps"]), SceneSpec.from_json(labels["spec"]),
                       masks, boxes, valid)


def read_frames_dir(path: Path) -> np.ndarray:
    """Frames (T, N, H, W, 3) from a `cam{n}/{t:04d}.png` tree (generation outputs)."""
    path = Path(path)
    if (path / "frames").is_dir():
        path = path / "frames"
    cams = sorted(p for p in path.iterdir() if p.is_dir() and p.name.startswith("cam"))
    if not cams:
        raise FileNotFoundError(f"no cam*/ directories under {path}")
    per_cam = [np.stack([np.asarray(Image.open(f), np.float32) / 255 for f in sorted(c.glob("*.png"))])
               for c in cams]
    return np.stack(per_cam, axis=1)


def write_frames_dir(frames: np.ndarray, path: Path) -> None:
    path = Path(path)
    T, N = frames.shape[:2]
    for n in range(N):
        (path / f"cam{n}").mkdir(parents=True, exist_ok=True)
        for t in range(T):
            rgb = np.round(np.clip(frames[t, n], 0, 1) * 255).astype(np.uint8)
            Image.fromarray(rgb).save(path / f"cam{n}" / f"{t:04d}.png")
