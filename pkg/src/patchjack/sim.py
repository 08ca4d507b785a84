"""Deterministic top-down 2D driving environment.

Coordinate conventions (used consistently by the renderer, the patch
projection, and the vehicle model):

* World axes follow screen orientation: x grows to the right, y grows
  *down*.  Heading is measured from +x toward +y, so a positive steering
  angle turns the vehicle toward its driver-side right.
* The camera is agent-centric: the world is rotated by -heading and
  translated so the agent sits at pixel (w/2, 0.7*h) with its forward
  direction pointing up the image, at a fixed scale of ``SCALE`` px/m.
* Signed polyline curvature is reported positive for a *leftward* bend.

Rendering uses a fixed grayscale palette (grass 0.30, road 0.60, lane
edge 0.75, car body 0.85) so that small networks can learn the scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

# Frame geometry
FRAME_W = 64
FRAME_H = 64
STACK_SIZE = 4
SCALE = 1.6  # pixels per meter
ANCHOR_V = 0.7  # agent row as a fraction of frame height

# Palette
GRASS = 0.30
ROAD = 0.60
LANE_EDGE = 0.75
CAR_BODY = 0.85

EDGE_HALF_WIDTH = 0.35  # meters; lane edge band is ~1 px at SCALE
CAR_LENGTH = 4.0
CAR_WIDTH = 2.0

DT = 1.0 / 50.0

# Normalization ranges for the k=5 agent-state properties
POS_RANGE = (-200.0, 200.0)
HEADING_RANGE = (-math.pi, math.pi)
SPEED_RANGE = (0.0, 30.0)

WORLD_MARGIN = 40.0  # bounding-box margin beyond track extent before "done"


@dataclass(frozen=True)
class VehicleParams:
    """Kinematic bicycle constants; defaults give stable lane following."""

    wheelbase: float = 2.5
    steer_max: float = 0.4  # radians
    steer_rate: float = 1.2  # radians/second at full deflection command
    accel_max: float = 8.0  # m/s^2
    brake_max: float = 12.0  # m/s^2
    drag: float = 0.3  # 1/s


DEFAULT_VEHICLE = VehicleParams()


@dataclass(frozen=True)
class Action:
    """Agent action in [0,1]^3: steering change, gas, brake.

    ``steer`` maps internally to [-1, 1] via ``2a - 1``; 0.5 holds the
    current steering angle.
    """

    steer: float = 0.5
    gas: float = 0.0
    brake: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "steer", float(min(1.0, max(0.0, self.steer))))
        object.__setattr__(self, "gas", float(min(1.0, max(0.0, self.gas))))
        object.__setattr__(self, "brake", float(min(1.0, max(0.0, self.brake))))

    def as_array(self):
        return np.array([self.steer, self.gas, self.brake], dtype=np.float32)

    @staticmethod
    def coerce(a) -> "Action":
        if isinstance(a, Action):
            return a
        arr = np.asarray(a, dtype=np.float64).reshape(-1)
        if arr.size != 3:
            raise ValueError(f"action needs 3 components, got {arr.size}")
        return Action(float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(frozen=True)
class AgentState:
    """Vehicle pose and motion state in world coordinates."""

    x: float
    y: float
    heading: float
    speed: float = 0.0
    steering_angle: float = 0.0

    def normalized(self, vehicle: VehicleParams = DEFAULT_VEHICLE):
        """Affine map of the 5 properties into [0,1]^5."""
        return np.array(
            [
                _to_unit(self.x, *POS_RANGE),
                _to_unit(self.y, *POS_RANGE),
                _to_unit(self.heading, *HEADING_RANGE),
                _to_unit(self.speed, *SPEED_RANGE),
                _to_unit(self.steering_angle, -vehicle.steer_max, vehicle.steer_max),
            ]
        )

    @staticmethod
    def from_normalized(delta, vehicle: VehicleParams = DEFAULT_VEHICLE):
        d = np.asarray(delta, dtype=np.float64)
        return AgentState(
            x=_from_unit(d[0], *POS_RANGE),
            y=_from_unit(d[1], *POS_RANGE),
            heading=_from_unit(d[2], *HEADING_RANGE),
            speed=_from_unit(d[3], *SPEED_RANGE),
            steering_angle=_from_unit(d[4], -vehicle.steer_max, vehicle.steer_max),
        )


def _to_unit(v, lo, hi):
    return (v - lo) / (hi - lo)


def _from_unit(u, lo, hi):
    return lo + u * (hi - lo)


def _wrap_angle(a):
    return math.atan2(math.sin(a), math.cos(a))


def agent_step(state: AgentState, action, dt: float = DT,
               vehicle: VehicleParams = DEFAULT_VEHICLE) -> AgentState:
    """Advance the kinematic bicycle model by one step.

    Integration is midpoint/leapfrog style: steering and speed take two
    half-kicks around the pose update, and the position advances along the
    mid-step heading.  With drag disabled this makes a (dt, -dt) pair
    return the initial state to round-off, which sequential Euler does not.
    """
    a = Action.coerce(action)
    u = 2.0 * a.steer - 1.0
    accel = a.gas * vehicle.accel_max - a.brake * vehicle.brake_max

    half = 0.5 * dt
    phi = _clamp(state.steering_angle + u * vehicle.steer_rate * half,
                 -vehicle.steer_max, vehicle.steer_max)
    v = max(0.0, state.speed + (accel - vehicle.drag * state.speed) * half)

    dpsi = (v / vehicle.wheelbase) * math.tan(phi) * dt
    mid_heading = state.heading + 0.5 * dpsi
    x = state.x + v * math.cos(mid_heading) * dt
    y = state.y + v * math.sin(mid_heading) * dt
    heading = _wrap_angle(state.heading + dpsi)

    phi = _clamp(phi + u * vehicle.steer_rate * half,
                 -vehicle.steer_max, vehicle.steer_max)
    v = max(0.0, v + (accel - vehicle.drag * v) * half)

    return AgentState(x=x, y=y, heading=heading, speed=v, steering_angle=phi)


def _clamp(v, lo, hi):
    return min(hi, max(lo, v))


# ---------------------------------------------------------------------------
# Tracks


TRACK_KINDS = ("straight", "left_turn", "right_turn", "loop")


@dataclass(frozen=True)
class TrackSpec:
    """Track geometry: an ordered centerline polyline plus road half-width."""

    centerline: np.ndarray  # (N, 2) world meters
    half_width: float
    scenario_kind: str
    seed: int

    @property
    def segment_count(self) -> int:
        return len(self.centerline) - 1

    def world_bounds(self, margin: float = WORLD_MARGIN):
        lo = self.centerline.min(axis=0) - margin
        hi = self.centerline.max(axis=0) + margin
        return lo, hi

    def start_pose(self) -> AgentState:
        p0, p1 = self.centerline[0], self.centerline[1]
        heading = math.atan2(p1[1] - p0[1], p1[0] - p0[0])
        return AgentState(x=float(p0[0]), y=float(p0[1]), heading=heading)

    @cached_property
    def _segments(self):
        cl = self.centerline
        p0 = cl[:-1].astype(np.float32)
        dvec = (cl[1:] - cl[:-1]).astype(np.float32)
        len2 = np.maximum((dvec * dvec).sum(axis=1), np.float32(1e-12))
        mid = (0.5 * (cl[:-1] + cl[1:])).astype(np.float32)
        seg_len = np.sqrt(len2)
        return p0, dvec, len2, mid, seg_len


def make_scenario(kind: str, seed: int, half_width: float = 4.0,
                  spacing: float = 2.0) -> TrackSpec:
    """Build one of the canonical driving scenarios.

    straight    — 120 m straight run.
    left_turn   — 30 m lead-in, then a 90-degree constant-radius left arc
                  and a short exit straight.
    right_turn  — mirror image of left_turn.
    loop        — closed polyline from a seeded radial spline.
    """
    if kind not in TRACK_KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}, expected one of {TRACK_KINDS}")
    if kind == "straight":
        n = int(120.0 / spacing) + 1
        xs = np.arange(n) * spacing
        pts = np.stack([xs, np.zeros(n)], axis=1)
    elif kind in ("left_turn", "right_turn"):
        # Left is toward -y in this screen-oriented frame.
        sign = -1.0 if kind == "left_turn" else 1.0
        radius = 30.0
        lead = [(i * spacing, 0.0) for i in range(int(30.0 / spacing) + 1)]
        cx, cy = lead[-1][0], sign * radius
        n_arc = int((math.pi / 2) * radius / spacing)
        arc = []
        for i in range(1, n_arc + 1):
            theta = (i / n_arc) * (math.pi / 2)
            arc.append(
                (cx + radius * math.sin(theta), cy - sign * radius * math.cos(theta))
            )
        end_x, end_y = arc[-1]
        tail = [
            (end_x, end_y + sign * i * spacing) for i in range(1, int(20.0 / spacing) + 1)
        ]
        pts = np.array(lead + arc + tail)
    else:  # loop
        rng = np.random.default_rng(seed)
        n_ctrl = 12
        base_radius = 45.0
        radii = base_radius * (1.0 + 0.25 * rng.uniform(-1.0, 1.0, size=n_ctrl))
        # Smooth the control radii so segment spacing stays in bounds.
        radii = (radii + np.roll(radii, 1) + np.roll(radii, -1)) / 3.0
        dense = 720
        angles = np.linspace(0.0, 2.0 * math.pi, dense, endpoint=False)
        ctrl_angles = np.linspace(0.0, 2.0 * math.pi, n_ctrl, endpoint=False)
        r = np.interp(angles, ctrl_angles, radii, period=2.0 * math.pi)
        xy = np.stack([r * np.cos(angles), r * np.sin(angles)], axis=1)
        pts = _resample_closed(xy, spacing)
    return TrackSpec(
        centerline=np.asarray(pts, dtype=np.float64),
        half_width=half_width,
        scenario_kind=kind,
        seed=seed,
    )


def _resample_closed(xy, spacing):
    closed = np.vstack([xy, xy[:1]])
    seg = np.diff(closed, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    total = cum[-1]
    n = max(8, int(round(total / spacing)))
    targets = np.linspace(0.0, total, n + 1)
    out = np.stack(
        [np.interp(targets, cum, closed[:, 0]), np.interp(targets, cum, closed[:, 1])],
        axis=1,
    )
    out[-1] = out[0]  # exact closure
    return out


def polyline_curvature(points):
    """Signed discrete curvature at interior points; positive = left bend."""
    p = np.asarray(points, dtype=np.float64)
    d = np.diff(p, axis=0)
    lengths = np.hypot(d[:, 0], d[:, 1])
    t = d / lengths[:, None]
    cross = t[:-1, 0] * t[1:, 1] - t[:-1, 1] * t[1:, 0]
    dtheta = np.arcsin(np.clip(cross, -1.0, 1.0))
    ds = 0.5 * (lengths[:-1] + lengths[1:])
    # In a y-down frame a leftward bend has a negative z cross product.
    return -dtheta / ds


# ---------------------------------------------------------------------------
# Camera and rasterizer


def world_to_pixel(state: AgentState, points, w: int = FRAME_W, h: int = FRAME_H,
                   scale: float = SCALE):
    """Map world points (N,2) into agent-centric pixel coordinates (N,2).

    Pixel x grows to the driver's right, pixel y up the image is forward;
    the agent anchor sits at (w/2, ANCHOR_V*h).
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    rel = p - np.array([state.x, state.y])
    c, s = math.cos(state.heading), math.sin(state.heading)
    fwd = rel[:, 0] * c + rel[:, 1] * s
    right = -rel[:, 0] * s + rel[:, 1] * c
    px = w / 2.0 + scale * right
    py = ANCHOR_V * h - scale * fwd
    return np.stack([px, py], axis=1)


_GRID_CACHE: dict = {}


def _camera_grid(w, h, scale):
    key = (w, h, scale)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        cols = ((np.arange(w) + 0.5 - w / 2.0) / scale).astype(np.float32)
        rows = ((ANCHOR_V * h - (np.arange(h) + 0.5)) / scale).astype(np.float32)
        right = np.repeat(cols[None, :], h, axis=0).reshape(-1)
        fwd = np.repeat(rows[:, None], w, axis=1).reshape(-1)
        grid = (fwd, right)
        _GRID_CACHE[key] = grid
    return grid


def render_frame(track: TrackSpec, state: AgentState, w: int = FRAME_W,
                 h: int = FRAME_H, scale: float = SCALE):
    """Rasterize the agent-centric grayscale view; returns (h, w) float32."""
    fwd, right = _camera_grid(w, h, scale)
    c, s = np.float32(math.cos(state.heading)), np.float32(math.sin(state.heading))
    wx = np.float32(state.x) + fwd * c - right * s
    wy = np.float32(state.y) + fwd * s + right * c

    # Farthest visible point from the agent anchor, plus a little slack.
    view_radius = math.hypot(w / (2.0 * scale), max(ANCHOR_V, 1 - ANCHOR_V) * h / scale) + 2.0
    d = _distance_to_polyline(track, wx, wy, state, view_radius)
    img = np.full(d.shape, GRASS, dtype=np.float32)
    img[d <= track.half_width] = ROAD
    img[np.abs(d - np.float32(track.half_width)) <= EDGE_HALF_WIDTH] = LANE_EDGE
    # Car body is fixed in the camera frame.
    car = (np.abs(right) <= CAR_WIDTH / 2.0) & (np.abs(fwd) <= CAR_LENGTH / 2.0)
    img[car] = CAR_BODY
    return img.reshape(h, w)


def _distance_to_polyline(track, wx, wy, state, view_radius):
    # Only segments near the view can matter; prefilter by midpoint radius.
    p0, dvec, len2, mid, seg_len = track._segments
    near = (
        np.hypot(mid[:, 0] - np.float32(state.x), mid[:, 1] - np.float32(state.y))
        <= view_radius + seg_len
    )
    if not near.any():
        return np.full(wx.shape, np.inf, dtype=np.float32)
    p0 = p0[near]
    dvec = dvec[near]
    len2 = len2[near]
    qx = wx[:, None] - p0[None, :, 0]
    qy = wy[:, None] - p0[None, :, 1]
    t = (qx * dvec[None, :, 0] + qy * dvec[None, :, 1]) / len2[None, :]
    np.clip(t, 0.0, 1.0, out=t)
    ex = qx - t * dvec[None, :, 0]
    ey = qy - t * dvec[None, :, 1]
    ex *= ex
    ey *= ey
    ex += ey
    return np.sqrt(ex.min(axis=1))


# ---------------------------------------------------------------------------
# Environment


@dataclass(frozen=True)
class RewardInfo:
    step_reward: float
    tiles_visited: int
    done: bool


@dataclass(frozen=True)
class ObservationStack:
    """The last ``c`` grayscale frames, newest last, each in [0, 1]."""

    frames: np.ndarray  # (c, h, w) float32

    @property
    def newest(self):
        return self.frames[-1]

    def push(self, frame) -> "ObservationStack":
        stacked = np.concatenate(
            [self.frames[1:], frame[None].astype(np.float32)], axis=0
        )
        return ObservationStack(frames=stacked)

    @staticmethod
    def filled(frame, size: int = STACK_SIZE) -> "ObservationStack":
        return ObservationStack(
            frames=np.repeat(frame[None].astype(np.float32), size, axis=0)
        )


class DrivingEnv:
    """Seeded reset/step interface over one track.

    The environment itself is fully deterministic; the seed is recorded so
    traces and manifests can reproduce a rollout from (seed, action
    sequence) alone.
    """

    def __init__(self, track: TrackSpec, w: int = FRAME_W, h: int = FRAME_H,
                 stack_size: int = STACK_SIZE, dt: float = DT,
                 vehicle: VehicleParams = DEFAULT_VEHICLE, scale: float = SCALE):
        self.track = track
        self.w = w
        self.h = h
        self.stack_size = stack_size
        self.dt = dt
        self.vehicle = vehicle
        self.scale = scale
        self._seed = 0
        self._state: AgentState | None = None
        self._stack: ObservationStack | None = None
        self._visited: np.ndarray | None = None
        self._tiles = 0

    def seed(self, seed: int):
        self._seed = int(seed)

    @property
    def seed_value(self) -> int:
        return self._seed

    @property
    def state(self) -> AgentState:
        if self._state is None:
            raise RuntimeError("env.reset() must be called before reading state")
        return self._state

    def reset(self):
        return self.reset_from(self.track.start_pose())

    def reset_from(self, state: AgentState):
        """Reset with an explicit starting pose (data collection, posing)."""
        self._state = state
        frame = render_frame(self.track, self._state, self.w, self.h, self.scale)
        self._stack = ObservationStack.filled(frame, self.stack_size)
        self._visited = np.zeros(self.track.segment_count, dtype=bool)
        self._tiles = 0
        # Segments under the car at reset never pay out.
        idx = self._nearest_segment(self._state)
        if idx is not None:
            self._visited[idx] = True
        return self._stack, self._state

    def step(self, action):
        if self._state is None:
            raise RuntimeError("env.step() called before env.reset()")
        self._state = agent_step(self._state, action, self.dt, self.vehicle)
        frame = render_frame(self.track, self._state, self.w, self.h, self.scale)
        self._stack = self._stack.push(frame)

        reward = -0.1
        idx = self._nearest_segment(self._state)
        if idx is not None and not self._visited[idx]:
            self._visited[idx] = True
            self._tiles += 1
            reward += 1000.0 / self.track.segment_count

        lo, hi = self.track.world_bounds()
        out_of_world = not (
            lo[0] <= self._state.x <= hi[0] and lo[1] <= self._state.y <= hi[1]
        )
        done = bool(self._visited.all()) or out_of_world
        return self._stack, RewardInfo(
            step_reward=reward, tiles_visited=self._tiles, done=done
        )

    def _nearest_segment(self, state: AgentState):
        p0, dvec, len2, _mid, _len = self.track._segments
        q = np.array([state.x, state.y], dtype=np.float32) - p0
        t = np.clip((q * dvec).sum(axis=1) / len2, 0.0, 1.0)
        e = q - t[:, None] * dvec
        d = np.hypot(e[:, 0], e[:, 1])
        idx = int(np.argmin(d))
        return idx if d[idx] <= self.track.half_width else None
