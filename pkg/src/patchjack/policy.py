"""The benign driving policy: a small CNN trained by behavior cloning.

The policy maps a stack of grayscale frames to actions in (0,1)^3 and is
deterministic and differentiable end to end.  Its teacher is a scripted
pure-pursuit controller; cloning it yields the fixed white-box policy the
attack assumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import sim
from .sim import Action, AgentState, DrivingEnv, TrackSpec


N_ACTIONS = 3
HIDDEN = 128
CONV1_CH = 8
CONV2_CH = 16
KERNEL = 4
STRIDE = 2


class Policy:
    """CNN policy: two strided conv layers, one hidden dense layer, sigmoid
    outputs."""

    KIND = "policy"

    def __init__(self, params: dict, in_channels: int = sim.STACK_SIZE,
                 frame_hw=(sim.FRAME_H, sim.FRAME_W)):
        self.params = params
        self.in_channels = in_channels
        self.frame_hw = tuple(frame_hw)

    @staticmethod
    def init(seed: int = 0, in_channels: int = sim.STACK_SIZE,
             frame_hw=(sim.FRAME_H, sim.FRAME_W)) -> "Policy":
        rng = np.random.default_rng(seed)
        h, w = frame_hw
        h1 = (h - KERNEL) // STRIDE + 1
        w1 = (w - KERNEL) // STRIDE + 1
        h2 = (h1 - KERNEL) // STRIDE + 1
        w2 = (w1 - KERNEL) // STRIDE + 1
        flat = CONV2_CH * h2 * w2

        def he(shape, fan_in):
            return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(
                np.float32
            )

        params = {
            "conv1.w": ad.tensor(
                he((CONV1_CH, in_channels, KERNEL, KERNEL),
                   in_channels * KERNEL * KERNEL),
                requires_grad=True,
            ),
            "conv1.b": ad.zeros((CONV1_CH,), requires_grad=True),
            "conv2.w": ad.tensor(
                he((CONV2_CH, CONV1_CH, KERNEL, KERNEL),
                   CONV1_CH * KERNEL * KERNEL),
                requires_grad=True,
            ),
            "conv2.b": ad.zeros((CONV2_CH,), requires_grad=True),
            "fc1.w": ad.tensor(he((flat, HIDDEN), flat), requires_grad=True),
            "fc1.b": ad.zeros((HIDDEN,), requires_grad=True),
            "fc2.w": ad.tensor(he((HIDDEN, N_ACTIONS), HIDDEN), requires_grad=True),
            "fc2.b": ad.zeros((N_ACTIONS,), requires_grad=True),
        }
        return Policy(params, in_channels, frame_hw)

    def parameters(self):
        return list(self.params.values())

    def forward(self, obs) -> ad.Tensor:
        """Action tensor for one observation stack (c,h,w) -> (n,)."""
        x = obs.frames if isinstance(obs, sim.ObservationStack) else obs
        t = x if isinstance(x, ad.Tensor) else ad.tensor(np.asarray(x))
        if t.shape != (self.in_channels, *self.frame_hw):
            raise ValueError(
                f"policy expects obs of shape "
                f"{(self.in_channels, *self.frame_hw)}, got {t.shape}"
            )
        batched = ad.reshape(t, (1, *t.shape))
        return ad.reshape(self.forward_batch(batched), (N_ACTIONS,))

    def forward_batch(self, x: ad.Tensor) -> ad.Tensor:
        """(N,c,h,w) -> (N,n), every component in (0,1)."""
        p = self.params
        h = ad.relu(ad.add_channel(ad.conv2d(x, p["conv1.w"], STRIDE), p["conv1.b"]))
        h = ad.relu(ad.add_channel(ad.conv2d(h, p["conv2.w"], STRIDE), p["conv2.b"]))
        n = h.shape[0]
        flat = ad.reshape(h, (n, int(np.prod(h.shape[1:]))))
        d = ad.relu(ad.add_rowvec(ad.matmul(flat, p["fc1.w"]), p["fc1.b"]))
        return ad.sigmoid(ad.add_rowvec(ad.matmul(d, p["fc2.w"]), p["fc2.b"]))

    def act(self, obs) -> Action:
        """Tape-free greedy action for environment rollouts."""
        return Action.coerce(self.forward(obs).data)


# ---------------------------------------------------------------------------
# Scripted expert (pure pursuit + proportional speed control)


LOOKAHEAD_M = 8.0
TARGET_SPEED = 12.0
SPEED_GAIN = 0.5


def scripted_expert(track: TrackSpec, state: AgentState,
                    vehicle: sim.VehicleParams = sim.DEFAULT_VEHICLE,
                    dt: float = sim.DT, lookahead: float = LOOKAHEAD_M,
                    target_speed: float = TARGET_SPEED) -> Action:
    """Steer toward a lookahead point on the centerline; hold target speed."""
    goal = _lookahead_point(track, state, lookahead)
    rel = goal - np.array([state.x, state.y])
    c, s = math.cos(state.heading), math.sin(state.heading)
    fwd = rel[0] * c + rel[1] * s
    right = -rel[0] * s + rel[1] * c
    dist2 = max(fwd * fwd + right * right, 1e-6)
    curvature = 2.0 * right / dist2
    phi_target = _clip(math.atan(curvature * vehicle.wheelbase),
                       -vehicle.steer_max, vehicle.steer_max)
    u = _clip((phi_target - state.steering_angle) / (vehicle.steer_rate * dt),
              -1.0, 1.0)
    v_err = target_speed - state.speed
    gas = _clip(SPEED_GAIN * v_err, 0.0, 1.0)
    brake = _clip(-SPEED_GAIN * v_err, 0.0, 1.0)
    return Action(steer=(u + 1.0) / 2.0, gas=gas, brake=brake)


def _lookahead_point(track: TrackSpec, state: AgentState, lookahead: float):
    cl = track.centerline
    seg = np.diff(cl, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    q = np.array([state.x, state.y]) - cl[:-1]
    len2 = np.maximum((seg * seg).sum(axis=1), 1e-12)
    t = np.clip((q * seg).sum(axis=1) / len2, 0.0, 1.0)
    e = q - t[:, None] * seg
    idx = int(np.argmin(np.hypot(e[:, 0], e[:, 1])))
    s_here = cum[idx] + t[idx] * seg_len[idx]
    s_goal = s_here + lookahead
    closed = np.allclose(cl[0], cl[-1])
    if closed:
        s_goal = s_goal % cum[-1]
    else:
        s_goal = min(s_goal, cum[-1])
    j = int(np.searchsorted(cum, s_goal, side="right") - 1)
    j = min(j, len(seg) - 1)
    frac = (s_goal - cum[j]) / max(seg_len[j], 1e-12)
    return cl[j] + frac * seg[j]


def _clip(v, lo, hi):
    return min(hi, max(lo, v))


# ---------------------------------------------------------------------------
# Behavior cloning


@dataclass
class BCDataset:
    """Per-rollout frame sequences (uint8) with clean expert action labels.

    Observation stacks are reconstructed on the fly from frame indices,
    duplicating the first frame just like the environment does at reset.
    """

    rollouts: list = field(default_factory=list)  # (frames u8 (T,h,w), acts (T,3))
    stack_size: int = sim.STACK_SIZE

    def add_rollout(self, frames_u8, actions):
        self.rollouts.append((frames_u8, actions.astype(np.float32)))

    def __len__(self):
        return sum(len(a) for _, a in self.rollouts)

    def sample_index(self):
        return [(r, t) for r, (_, acts) in enumerate(self.rollouts)
                for t in range(len(acts))]

    def stack_for(self, r: int, t: int):
        frames, _ = self.rollouts[r]
        idx = [max(0, t - k) for k in range(self.stack_size - 1, -1, -1)]
        return frames[idx].astype(np.float32) / 255.0

    def label_for(self, r: int, t: int):
        return self.rollouts[r][1][t]


def collect_expert_dataset(kinds=("straight", "left_turn", "right_turn"),
                           rollouts_per_kind: int = 3, max_steps: int = 220,
                           exploration_noise: float = 0.15, seed: int = 0,
                           start_jitter: float = 1.5) -> BCDataset:
    """Roll out the scripted expert, recording clean labels.

    Executed actions carry exploration noise and rollouts start with a
    jittered pose, so the dataset covers recovery behavior: the cloned
    policy then corrects back to the lane instead of drifting off.
    """
    ds = BCDataset()
    root = np.random.SeedSequence(seed)
    for k, kind in enumerate(kinds):
        for r in range(rollouts_per_kind):
            rng = np.random.default_rng(root.spawn(1)[0])
            track = sim.make_scenario(kind, seed=seed)
            env = DrivingEnv(track)
            env.seed(seed + 1000 * k + r)
            start = track.start_pose()
            if r > 0:  # first rollout per scenario is clean
                lat = rng.uniform(-start_jitter, start_jitter)
                ang = rng.uniform(-0.15, 0.15)
                right = np.array([-math.sin(start.heading), math.cos(start.heading)])
                start = AgentState(
                    x=start.x + lat * right[0], y=start.y + lat * right[1],
                    heading=start.heading + ang,
                )
            stack, state = env.reset_from(start)
            frames, labels = [], []
            for _ in range(max_steps):
                expert = scripted_expert(track, state)
                frames.append(_to_u8(stack.newest))
                labels.append(expert.as_array())
                noisy = expert.as_array() + rng.normal(
                    0.0, exploration_noise, size=3
                )
                stack, info = env.step(Action.coerce(noisy))
                state = env.state
                if info.done:
                    break
            ds.add_rollout(np.stack(frames), np.stack(labels))
    return ds


def _to_u8(frame):
    return np.rint(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def train_bc(dataset: BCDataset, epochs: int = 14, lr: float = 1e-3,
             batch_size: int = 64, seed: int = 0, val_fraction: float = 0.1):
    """Clone the expert by minimizing mean squared action error.

    Returns (policy, history) where history has per-epoch train loss and
    the held-out action MSE of the final parameters.
    """
    if len(dataset) == 0:
        raise ValueError("train_bc: empty dataset")
    policy = Policy.init(seed=seed)
    opt = ad.Adam(policy.parameters(), lr=lr)
    rng = np.random.default_rng(seed + 1)

    index = dataset.sample_index()
    rng.shuffle(index)
    n_val = min(int(len(index) * val_fraction), len(index) - 1)
    val_index, train_index = index[:n_val], index[n_val:]

    history = {"train_loss": [], "val_mse": None}
    for _epoch in range(epochs):
        rng.shuffle(train_index)
        losses = []
        for off in range(0, len(train_index), batch_size):
            chunk = train_index[off : off + batch_size]
            xs = np.stack([dataset.stack_for(r, t) for r, t in chunk])
            ys = np.stack([dataset.label_for(r, t) for r, t in chunk])
            with ad.Tape() as tape:
                pred = policy.forward_batch(ad.tensor(xs))
                err = ad.sub(pred, ad.tensor(ys))
                loss = ad.reduce_mean(ad.mul(err, err))
            tape.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        history["train_loss"].append(float(np.mean(losses)))
    history["val_mse"] = (
        evaluate_bc(policy, dataset, val_index) if val_index else None
    )
    return policy, history


def evaluate_bc(policy: Policy, dataset: BCDataset, index, batch_size: int = 64):
    """Held-out action MSE (no gradients)."""
    total, count = 0.0, 0
    for off in range(0, len(index), batch_size):
        chunk = index[off : off + batch_size]
        xs = np.stack([dataset.stack_for(r, t) for r, t in chunk])
        ys = np.stack([dataset.label_for(r, t) for r, t in chunk])
        pred = policy.forward_batch(ad.tensor(xs)).data
        total += float(((pred - ys) ** 2).sum())
        count += ys.size
    return total / max(count, 1)
