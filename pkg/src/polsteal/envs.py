"""Deterministic toy control tasks observed through heterogeneous affine sensors.

Dynamics run in latent coordinates ``x``; the policy only ever sees the
encoded state ``s = scale * x + offset``. Both tasks have non-positive
rewards, so return ratios are reported in the shifted form against
``r_min``, the mean return of the worst constant-action policy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateDataError, NumericError, ShapeError

ENV_NAMES = ("linear_reach", "damped_spring")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    encode_scale: tuple[float, ...]
    encode_offset: tuple[float, ...]
    init_low: tuple[float, ...]
    init_high: tuple[float, ...]
    dt: float = 0.1
    horizon: int = 200
    # spring constant, damping, feedback gains (damped_spring only)
    kappa: float = 1.0
    damping: float = 0.1
    gain_pos: float = 2.0
    gain_vel: float = 2.0
    # expert: a = -clip(action_limit * tanh(u / band) + slope * u + ripple * g(u) * sin(u / period)),
    # u the feedback signal and g a Gaussian envelope of width ripple_width
    action_limit: float = 0.9
    band: float = 1.0
    slope: float = 0.0
    ripple: float = 0.0
    period: float = 1.0
    ripple_width: float = float("inf")
    # linear_reach: skew-symmetric cross-feedback u_i = x_i + coupling * (x_{i-1} - x_{i+1})
    coupling: float = 0.0
    explore_noise: float = 0.05
    r_min: float | None = None

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise ValueError(f"unknown environment {self.name!r}")
        n, k = self.state_dim, self.action_dim
        if self.name == "linear_reach" and n != k:
            raise ShapeError("linear_reach needs state_dim == action_dim")
        if self.name == "damped_spring" and n != 2 * k:
            raise ShapeError("damped_spring needs state_dim == 2 * action_dim")
        for key in ("encode_scale", "encode_offset", "init_low", "init_high"):
            vals = tuple(float(v) for v in getattr(self, key))
            if len(vals) != n:
                raise ShapeError(f"{key} must have {n} entries")
            object.__setattr__(self, key, vals)
        if any(s == 0 for s in self.encode_scale):
            raise ValueError("encode_scale components must be non-zero")
        if any(lo >= hi for lo, hi in zip(self.init_low, self.init_high)):
            raise ValueError("init_low must be below init_high")
        if not 0 <= self.action_limit <= 1 or self.band <= 0 or self.period <= 0 or not self.ripple_width > 0:
            raise ValueError("need 0 <= action_limit <= 1 and positive band, period, ripple_width")
        if self.dt <= 0 or self.horizon < 1:
            raise ValueError("dt must be positive and horizon >= 1")

    @property
    def scale(self):
        return np.asarray(self.encode_scale)

    @property
    def offset(self):
        return np.asarray(self.encode_offset)

    def encode(self, x):
        return self.scale * x + self.offset

    def decode(self, s):
        return (np.asarray(s, dtype=np.float64) - self.offset) / self.scale


DEFAULTS = {
    "linear_reach": dict(
        state_dim=4,
        action_dim=4,
        encode_scale=(2e-5, 2e-3, 2e-2, 0.2),
        encode_offset=(0.004, -0.3, 1.5, -12.0),
        init_low=(-40.0,) * 4,
        init_high=(40.0,) * 4,
        action_limit=0.0,
        slope=0.05,
        ripple=0.3,
        period=1.5,
        ripple_width=17.0,
        explore_noise=0.2,
    ),
    "damped_spring": dict(
        state_dim=8,
        action_dim=4,
        encode_scale=(0.002, 0.02, 0.1, 0.3, 0.5, 0.8, 1.2, 3.0),
        encode_offset=(0.01, -0.2, 1.0, -2.0, 5.0, -3.0, 10.0, -20.0),
        init_low=(-6.0,) * 8,
        init_high=(6.0,) * 8,
        gain_pos=1.0,
        gain_vel=3.0,
        action_limit=0.0,
        slope=0.3,
        ripple=0.3,
        period=0.25,
        ripple_width=2.7,
        explore_noise=0.2,
    ),
}


def make_env(name, r_min_episodes=100, **overrides) -> EnvSpec:
    """Build an environment from defaults plus overrides and measure ``r_min``."""
    if name not in DEFAULTS:
        raise ValueError(f"unknown environment {name!r}")
    params = dict(DEFAULTS[name])
    params.update(overrides)
    spec = EnvSpec(name=name, **params)
    if spec.r_min is None:
        spec = replace(spec, r_min=worst_constant_return(spec, r_min_episodes))
    return spec


def _as_rows(spec: EnvSpec, arr, width, what):
    arr = np.asarray(arr, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != width:
        raise ShapeError(f"{what} must have width {width}, got {arr.shape}")
    return arr, single


def latent_step(spec: EnvSpec, x, a):
    """One step in latent coordinates; returns (x_next, reward) for row batches."""
    dt = spec.dt
    if spec.name == "linear_reach":
        x_next = x + dt * a
        reward = -np.linalg.norm(x_next, axis=1)
    else:
        pos, vel = x[:, 0::2], x[:, 1::2]
        vel = vel + dt * (a - spec.kappa * pos - spec.damping * vel)
        pos = pos + dt * vel
        x_next = np.empty_like(x)
        x_next[:, 0::2], x_next[:, 1::2] = pos, vel
        reward = -(np.sum(pos**2, axis=1) + 0.1 * np.sum(a**2, axis=1))
    return x_next, reward


def env_step(spec: EnvSpec, state, action):
    """Advance encoded state(s) by one step; action is clipped to [-1, 1]."""
    s, single = _as_rows(spec, state, spec.state_dim, "state")
    a, _ = _as_rows(spec, action, spec.action_dim, "action")
    if not np.all(np.isfinite(s)):
        raise NumericError("non-finite state")
    a = np.clip(a, -1.0, 1.0)
    x_next, reward = latent_step(spec, spec.decode(s), a)
    s_next = spec.encode(x_next)
    if not (np.all(np.isfinite(s_next)) and np.all(np.isfinite(reward))):
        raise NumericError("non-finite transition")
    if single:
        return s_next[0], float(reward[0])
    return s_next, reward


def expert_latent(spec: EnvSpec, x):
    if spec.name == "linear_reach":
        u = x
        if spec.coupling and x.shape[1] > 1:
            u = x + spec.coupling * (np.roll(x, 1, axis=1) - np.roll(x, -1, axis=1))
    else:
        u = spec.gain_pos * x[:, 0::2] + spec.gain_vel * x[:, 1::2]
    wiggle = spec.ripple * np.sin(u / spec.period)
    if np.isfinite(spec.ripple_width):
        wiggle = wiggle * np.exp(-0.5 * (u / spec.ripple_width) ** 2)
    a = spec.action_limit * np.tanh(u / spec.band) + spec.slope * u + wiggle
    return -np.clip(a, -1.0, 1.0)


def expert_action(spec: EnvSpec, state):
    """Analytic feedback controller acting on the encoded state."""
    s, single = _as_rows(spec, state, spec.state_dim, "state")
    a = expert_latent(spec, spec.decode(s))
    return a[0] if single else a


def expert_policy(spec: EnvSpec):
    return lambda s: expert_action(spec, s)


def zero_policy(spec: EnvSpec):
    return lambda s: np.zeros((np.atleast_2d(s).shape[0], spec.action_dim))


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    ret: float = field(init=False)

    def __post_init__(self):
        self.ret = float(np.sum(self.rewards))


def rollout(spec: EnvSpec, policy, episodes: int, seed, noise=0.0, keep=True):
    """Run ``episodes`` episodes of ``spec.horizon`` steps from the uniform start box.

    ``policy`` maps a (m, n) batch of encoded states to (m, k) actions.
    ``noise`` adds uniform exploration noise with that standard deviation
    to the executed action; recorded actions are the policy's own. Returns
    (mean return, list of trajectories).
    """
    if episodes < 1:
        raise ValueError("episodes must be positive")
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(spec.init_low), np.asarray(spec.init_high)
    x = rng.uniform(lo, hi, size=(episodes, spec.state_dim))
    n, k, T = spec.state_dim, spec.action_dim, spec.horizon
    states = np.empty((T + 1, episodes, n))
    actions = np.empty((T, episodes, k))
    rewards = np.empty((T, episodes))
    half = np.sqrt(3.0) * noise
    for t in range(T):
        s = spec.encode(x)
        states[t] = s
        a = np.asarray(policy(s), dtype=np.float64)
        if a.shape != (episodes, k):
            raise ShapeError(f"policy returned shape {a.shape}, expected {(episodes, k)}")
        a = np.clip(a, -1.0, 1.0)
        actions[t] = a
        executed = a
        if noise > 0:
            executed = np.clip(a + rng.uniform(-half, half, size=a.shape), -1.0, 1.0)
        x, r = latent_step(spec, x, executed)
        rewards[t] = r
    states[T] = spec.encode(x)
    if not np.all(np.isfinite(states)):
        raise NumericError("rollout diverged")
    trajs = []
    if keep:
        trajs = [Trajectory(states[:, e], actions[:, e], rewards[:, e]) for e in range(episodes)]
    return float(rewards.sum(axis=0).mean()), trajs


def passive_return(spec: EnvSpec, episodes=100, seed=0) -> float:
    """Mean return of the all-zero action policy."""
    ret, _ = rollout(spec, zero_policy(spec), episodes, seed, keep=False)
    return ret


def constant_policy(spec: EnvSpec, action):
    a = np.asarray(action, dtype=np.float64)
    return lambda s: np.broadcast_to(a, (np.atleast_2d(s).shape[0], spec.action_dim))


def worst_constant_return(spec: EnvSpec, episodes=100, seed=0) -> float:
    """Lowest mean return over constant-action policies.

    Both tasks have linear dynamics and convex per-step costs, so the
    return is concave in a constant action and its minimum over the
    action box sits at a vertex; the vertices are searched exhaustively.
    """
    k = spec.action_dim
    if k > 12:
        raise ValueError("vertex search is limited to action_dim <= 12")
    worst = np.inf
    for bits in range(2**k):
        a = np.array([1.0 if bits >> j & 1 else -1.0 for j in range(k)])
        ret, _ = rollout(spec, constant_policy(spec, a), episodes, seed, keep=False)
        worst = min(worst, ret)
    return float(worst)


def return_ratio(attacker_return, victim_return, r_min=None) -> float:
    """R_a / R_v, or (R_a - R_min) / (R_v - R_min) when ``r_min`` is given."""
    if r_min is None:
        den = victim_return
        num = attacker_return
    else:
        den = victim_return - r_min
        num = attacker_return - r_min
    if den == 0:
        raise DegenerateDataError("return ratio denominator is zero")
    return float(num / den)


def write_trajectories_csv(trajs, path) -> None:
    """Rows: episode, t, state..., action..., reward (terminal state omitted)."""
    n = trajs[0].states.shape[1]
    k = trajs[0].actions.shape[1]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "t"] + [f"s{i}" for i in range(n)] + [f"a{j}" for j in range(k)] + ["reward"])
        for e, tr in enumerate(trajs):
            for t in range(len(tr.rewards)):
                w.writerow([e, t] + [repr(float(v)) for v in tr.states[t]] + [repr(float(v)) for v in tr.actions[t]] + [repr(float(tr.rewards[t]))])
