"""Victim construction, the budget-metered black-box oracle, and the range defense."""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import TransferDataset
from .dist import ReferenceStats, fit_reference, load_reference, save_reference
from .envs import EnvSpec, expert_policy, return_ratio, rollout
from .errors import BudgetExhaustedError, BuildError, ShapeError
from .nn import MlpModel, TrainConfig, init_mlp, load_model, mlp_forward, save_model, train_split, validation_loss

EVAL_EPISODES = 8
# deployed policies answer in single precision; saturated outputs round to exactly +-1
ACTION_DTYPE = np.float32


def victim_answer(model: MlpModel, states) -> np.ndarray:
    a = np.clip(mlp_forward(model, states), -1.0, 1.0)
    return a.astype(ACTION_DTYPE).astype(np.float64)


@dataclass
class VictimBundle:
    policy: MlpModel
    ref: ReferenceStats
    env: EnvSpec
    victim_return: float
    victim_return_std: float
    expert_return: float

    def act(self, states):
        return victim_answer(self.policy, states)


def policy_of(model: MlpModel):
    """Wrap a network as a rollout policy with actions clipped to [-1, 1]."""
    return lambda s: np.clip(mlp_forward(model, s), -1.0, 1.0)


def evaluate_policy(env: EnvSpec, policy, seed, episodes=EVAL_EPISODES):
    """(mean return, std of per-episode returns) over ``episodes`` noise-free episodes."""
    mean, trajs = rollout(env, policy, episodes, seed)
    returns = np.array([t.ret for t in trajs])
    return mean, float(returns.std())


def collect_expert_data(env: EnvSpec, trajectories: int, seed, noise=None):
    """Expert rollouts with exploration noise; labels are the noise-free expert actions."""
    noise = env.explore_noise if noise is None else noise
    _, trajs = rollout(env, expert_policy(env), trajectories, seed, noise=noise)
    visited = np.concatenate([t.states for t in trajs])
    states = np.concatenate([t.states[:-1] for t in trajs])
    actions = np.concatenate([t.actions for t in trajs])
    return TransferDataset(states, actions), visited


def train_victim(
    env: EnvSpec,
    trajectories: int,
    cfg: TrainConfig,
    seed: int,
    hidden=(256, 256),
    target_loss=1e-3,
    eval_seed=None,
    competence=0.9,
) -> VictimBundle:
    """Clone the analytic expert into a tanh-output MLP and measure it.

    The network's input normalization is set from the visited-state
    statistics. Training stops once validation Huber loss drops below
    ``target_loss`` or after ``cfg.epochs`` epochs.
    """
    rng = np.random.default_rng([seed, 11])
    data, visited = collect_expert_data(env, trajectories, rng)
    ref = fit_reference(visited)
    model = init_mlp((env.state_dim, *hidden, env.action_dim), rng, "relu", "tanh")
    model.input_shift = ref.mu_star.copy()
    model.input_scale = ref.sigma_star.copy()
    train, val = data.split(cfg.val_fraction, rng)
    chunk = TrainConfig(**{**asdict(cfg), "epochs": 5})
    done = 0
    while done < cfg.epochs:
        model = train_split(train, val, model, chunk, rng).model
        done += chunk.epochs
        if validation_loss(model, val) < target_loss:
            break
    eval_seed = seed + 1 if eval_seed is None else eval_seed
    v_ret, v_std = evaluate_policy(env, lambda s: victim_answer(model, s), eval_seed)
    e_ret, _ = evaluate_policy(env, expert_policy(env), eval_seed)
    ratio = return_ratio(v_ret, e_ret, env.r_min)
    if ratio < competence:
        raise BuildError(
            f"victim return {v_ret:.4f} reaches only {ratio:.3f} of expert return {e_ret:.4f} "
            f"(return floor {env.r_min:.4f})"
        )
    return VictimBundle(model, ref, env, v_ret, v_std, e_ret)


def save_bundle(bundle: VictimBundle, directory) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "model": d / "victim_model.json",
        "reference": d / "reference.txt",
        "env": d / "env.json",
        "returns": d / "returns.json",
    }
    save_model(bundle.policy, paths["model"])
    save_reference(bundle.ref, paths["reference"])
    paths["env"].write_text(json.dumps(asdict(bundle.env), indent=1))
    paths["returns"].write_text(
        json.dumps(
            {
                "victim_return": bundle.victim_return,
                "victim_return_std": bundle.victim_return_std,
                "expert_return": bundle.expert_return,
            },
            indent=1,
        )
    )
    return {k: str(v) for k, v in paths.items()}


def load_bundle(directory) -> VictimBundle:
    d = Path(directory)
    if not (d / "victim_model.json").exists():
        raise FileNotFoundError(f"no victim bundle in {d}")
    env = EnvSpec(**json.loads((d / "env.json").read_text()))
    ret = json.loads((d / "returns.json").read_text())
    return VictimBundle(
        load_model(d / "victim_model.json"),
        load_reference(d / "reference.txt"),
        env,
        ret["victim_return"],
        ret["victim_return_std"],
        ret["expert_return"],
    )


@dataclass
class BudgetLedger:
    """Victim-query bookkeeping; ``charge`` is an atomic check-and-increment."""

    total: int
    reserved: int = 0
    consumed: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.total < 1 or not 0 <= self.reserved < self.total:
            raise ValueError("need total >= 1 and 0 <= reserved < total")

    @property
    def remaining(self):
        return self.total - self.consumed

    def charge(self, m: int) -> None:
        with self._lock:
            if self.consumed + m > self.total:
                raise BudgetExhaustedError(
                    f"query of {m} exceeds budget ({self.consumed} of {self.total} used)"
                )
            self.consumed += m


class Oracle:
    """Black-box access to a victim policy, metered by a ledger.

    With ``defense=(lo, hi)`` any state having a component outside the
    closed box gets a uniform random action instead of the policy's answer.
    """

    def __init__(self, policy: MlpModel, ledger: BudgetLedger, defense=None, defense_seed=0):
        self.policy = policy
        self.ledger = ledger
        self.defense = None
        if defense is not None:
            lo, hi = defense
            self.defense = (np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64))
        self._defense_rng = np.random.default_rng([defense_seed, 29])

    @property
    def state_dim(self):
        return self.policy.input_dim

    @property
    def action_dim(self):
        return self.policy.output_dim

    def query(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        if s.ndim == 1 and s.size == 0:
            s = s.reshape(0, self.state_dim)
        if s.ndim != 2 or s.shape[1] != self.state_dim:
            raise ShapeError(f"queries must be rows of width {self.state_dim}")
        self.ledger.charge(s.shape[0])
        if s.shape[0] == 0:
            return np.zeros((0, self.action_dim))
        actions = victim_answer(self.policy, s)
        if self.defense is not None:
            lo, hi = self.defense
            bad = np.any((s < lo) | (s > hi), axis=1)
            nbad = int(bad.sum())
            if nbad:
                actions[bad] = self._defense_rng.uniform(-1.0, 1.0, size=(nbad, self.action_dim))
        return actions


def metered_query(oracle: Oracle, states) -> np.ndarray:
    return oracle.query(states)


def make_oracle(bundle: VictimBundle, total, reserved=0, defense=False, defense_seed=0) -> Oracle:
    ledger = BudgetLedger(int(total), int(reserved))
    box = (bundle.ref.lo, bundle.ref.hi) if defense else None
    return Oracle(bundle.policy, ledger, box, defense_seed)


def score_policy(bundle: VictimBundle, model: MlpModel, seed, episodes=EVAL_EPISODES):
    """(attacker return, victim return, shifted return ratio) on the same evaluation episodes."""
    ra, _ = evaluate_policy(bundle.env, policy_of(model), seed, episodes)
    rv, _ = evaluate_policy(bundle.env, bundle.act, seed, episodes)
    return ra, rv, return_ratio(ra, rv, bundle.env.r_min)
