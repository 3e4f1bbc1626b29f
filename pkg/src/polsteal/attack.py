"""Stealthy Imitation: reward-guided estimation of the victim's state distribution.

Each iteration queries the victim on states drawn from the current
Gaussian estimate, scores the estimate with a freshly trained evaluator,
clones the victim into the attacker policy, trains a discriminator between
victim and attacker answers, and re-fits the estimate with the
discriminator's proxy rewards as sample weights. After the exploration
budget is spent, the attacker is retrained from scratch on the
best-scoring estimate.

The attack only touches the victim through :class:`~polsteal.victim.Oracle`;
reference statistics are passed in for reporting KL divergence and never
feed back into the loop.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import TransferDataset, prune_data
from .dist import (
    GaussianEstimate,
    ReferenceStats,
    dist_refine,
    dist_refine_full,
    kl,
    proxy_reward,
    sample,
)
from .errors import BudgetExhaustedError, DegenerateDataError
from .nn import (
    MlpModel,
    TrainConfig,
    fit,
    huber_loss,
    init_mlp,
    mlp_forward,
    renormalize,
    train_reward,
    train_split,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    total_budget: int = 2_000_000
    reserved_budget: int = 200_000
    base_budget: int = 20_000
    # attacker-side batch; None ties it to the current victim batch b_c
    attacker_budget: int | None = None
    epochs_per_iter: int = 1
    family: str = "diagonal"
    init_mu: tuple[float, ...] | None = None
    init_sigma: tuple[float, ...] | None = None
    fixed_evaluator_budget: bool = True
    use_reward_model: bool = True
    prune: bool = True
    dynamic_bc_budget: bool = True
    reward_steps: int = 400
    reward_hidden: tuple[int, ...] = (256,)
    policy_hidden: tuple[int, ...] = (256, 256)
    learning_rate: float = 1e-3
    batch_size: int = 1024
    final_patience: int = 20
    final_max_epochs: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.reserved_budget < self.total_budget:
            raise ValueError("need 0 <= reserved_budget < total_budget")
        if not 1 <= self.base_budget <= self.total_budget - self.reserved_budget:
            raise ValueError("base_budget must fit in the exploration budget")
        if self.family not in ("diagonal", "full"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.epochs_per_iter < 1:
            raise ValueError("epochs_per_iter must be positive")

    def train_cfg(self, epochs, seed, patience=None) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=epochs,
            early_stop_patience=patience,
            seed=seed,
        )


@dataclass
class IterationRecord:
    index: int
    consumed: int
    mu: list[float]
    sigma: list[float]
    eval_loss: float
    kl: float
    b_c: int
    bc_demand: int
    warning: str | None = None


@dataclass
class AttackReport:
    label: str
    seed: int
    initial_kl: float
    iterations: list[IterationRecord] = field(default_factory=list)
    selected_index: int = -1
    selected_mu: list[float] = field(default_factory=list)
    selected_sigma: list[float] = field(default_factory=list)
    selected_loss: float = -math.inf
    selected_kl: float = math.nan
    consumed: int = 0
    total_budget: int = 0
    final_dataset_size: int = 0
    final_epochs: int = 0
    attacker_return: float = math.nan
    victim_return: float = math.nan
    r_min: float | None = None
    return_ratio: float = math.nan
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def delta_kl(self) -> float:
        from .analysis import delta_kl

        return delta_kl(self.initial_kl, self.selected_kl)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.iterations:
            d["delta_kl_percent"] = self.delta_kl
        return d

    def write(self, directory, include_timing=True) -> dict:
        """Write ``report.json`` and ``iterations.csv``; returns the paths."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        doc = self.to_dict()
        if not include_timing:
            doc.pop("wall_clock")
        (out / "report.json").write_text(json.dumps(doc, indent=1, default=_jsonable))
        write_iterations_csv(self, out / "iterations.csv")
        return {"report": str(out / "report.json"), "iterations": str(out / "iterations.csv")}


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o)}")


def fmt(x) -> str:
    """17 significant digits so values round-trip through CSV."""
    return format(float(x), ".17g")


def write_iterations_csv(report: AttackReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "consumed_budget", "kl", "eval_loss", "sigma_mean", "b_c", "selected_flag"])
        for rec in report.iterations:
            w.writerow(
                [
                    rec.index,
                    rec.consumed,
                    fmt(rec.kl),
                    fmt(rec.eval_loss),
                    fmt(np.mean(rec.sigma)),
                    rec.b_c,
                    int(rec.index == report.selected_index),
                ]
            )


def _rng(seed, *labels):
    return np.random.default_rng([seed, *labels])


def query_action(policy, est: GaussianEstimate, b: int, rng, val_fraction=0.1) -> TransferDataset:
    """Sample ``b`` states from ``est``, label them with ``policy``, attach a 90/10 split.

    ``policy`` is an :class:`Oracle` (metered) or any callable on state rows.
    """
    states = sample(est, int(b), rng)
    if hasattr(policy, "query"):
        actions = policy.query(states)
    else:
        actions = np.asarray(policy(states), dtype=np.float64)
    return TransferDataset(states, actions).with_split(rng, val_fraction)


def _policy_net(n, k, hidden, rng, est: GaussianEstimate) -> MlpModel:
    model = init_mlp((n, *hidden, k), rng, "relu", "tanh")
    return renormalize(model, est.mu, est.scales)


def _reward_net(n, k, hidden, rng, est: GaussianEstimate) -> MlpModel:
    model = init_mlp((n + k, *hidden, 1), rng, "tanh", "sigmoid")
    return _renorm_reward(model, est, k)


def _renorm_reward(model: MlpModel, est: GaussianEstimate, k) -> MlpModel:
    return renormalize(model, np.concatenate([est.mu, np.zeros(k)]), np.concatenate([est.scales, np.ones(k)]))


def distribution_evaluate(d_v: TransferDataset, evaluator: MlpModel, demand: int, cfg: TrainConfig, rng=None) -> float:
    """Train ``evaluator`` on ``demand`` pairs of ``d_v`` and return its validation loss."""
    if len(d_v) < demand:
        raise ValueError(f"evaluator needs {demand} pairs, dataset has {len(d_v)}")
    return fit(d_v, evaluator, demand, cfg, rng).val_loss


def _estimate(family, mu, spread) -> GaussianEstimate:
    if family == "diagonal":
        return GaussianEstimate.diagonal(mu, spread)
    return GaussianEstimate.full(mu, spread)


def initial_estimate(cfg: AttackConfig, n: int) -> GaussianEstimate:
    mu = np.zeros(n) if cfg.init_mu is None else np.asarray(cfg.init_mu, dtype=np.float64)
    sigma = np.ones(n) if cfg.init_sigma is None else np.asarray(cfg.init_sigma, dtype=np.float64)
    if cfg.family == "diagonal":
        return GaussianEstimate.diagonal(mu, sigma)
    return GaussianEstimate.full(mu, np.diag(sigma**2))


def per_pair_huber(model: MlpModel, d: TransferDataset) -> np.ndarray:
    """Huber loss of each pair, averaged over action components."""
    diff = np.abs(mlp_forward(model, d.states) - d.actions)
    per = np.where(diff < 1.0, 0.5 * diff * diff, diff - 0.5)
    return per.mean(axis=1)


def _demand(b_v, sigma_bar, available, floor):
    return int(min(available, max(floor, round(b_v * sigma_bar))))


class StealthyImitation:
    """Stateful attack run; :meth:`run` executes the whole procedure."""

    def __init__(self, oracle, ref: ReferenceStats | None, cfg: AttackConfig, label="stealthy_imitation"):
        self.oracle = oracle
        self.ref = ref
        self.cfg = cfg
        self.n = oracle.state_dim
        self.k = oracle.action_dim
        self.report = AttackReport(label=label, seed=cfg.seed, initial_kl=math.nan, total_budget=cfg.total_budget)
        self.report.config = asdict(cfg)
        self.d_tilde: TransferDataset | None = None
        self.policy: MlpModel | None = None
        self.iter_policy: MlpModel | None = None

    def _kl(self, est):
        if self.ref is None:
            return math.nan
        return kl(self.ref.estimate("diagonal"), est)

    def explore(self):
        """Steps I-IV until the exploration budget is spent."""
        cfg, n, k = self.cfg, self.n, self.k
        seed = cfg.seed
        b_v = cfg.base_budget
        ledger = self.oracle.ledger
        est = initial_estimate(cfg, n)
        self.report.initial_kl = self._kl(est)
        init_rng = _rng(seed, 1)
        pi_a = _policy_net(n, k, cfg.policy_hidden, init_rng, est)
        reward = _reward_net(n, k, cfg.reward_hidden, init_rng, est)
        b_c = b_v
        best = -math.inf
        floor = max(int(math.ceil(2 / 0.1)), 2)
        i = 0
        while True:
            rng = _rng(seed, 2, i)
            sigma_bar = float(np.mean(est.scales))
            try:
                d_v = query_action(self.oracle, est, b_c, rng)
            except BudgetExhaustedError as exc:
                self.report.notes.append(f"iteration {i}: {exc}")
                break
            # evaluator: fresh network every iteration
            ev_demand = b_v if cfg.fixed_evaluator_budget else len(d_v)
            ev_demand = min(ev_demand, len(d_v))
            evaluator = _policy_net(n, k, cfg.policy_hidden, rng, est)
            loss = distribution_evaluate(d_v, evaluator, ev_demand, cfg.train_cfg(cfg.epochs_per_iter, 0), rng)
            rec = IterationRecord(
                index=i,
                consumed=ledger.consumed,
                mu=est.mu.tolist(),
                sigma=est.scales.tolist(),
                eval_loss=loss,
                kl=self._kl(est),
                b_c=b_c,
                bc_demand=0,
            )
            if loss > best:
                best = loss
                self.d_tilde = d_v
                self.report.selected_index = i
                self.report.selected_mu = est.mu.tolist()
                self.report.selected_sigma = est.scales.tolist()
                self.report.selected_loss = loss
                self.report.selected_kl = rec.kl
                self._selected_est = est
            # behavioral cloning of the persistent attacker policy
            if cfg.dynamic_bc_budget:
                demand = _demand(b_v, sigma_bar, len(d_v), floor)
            else:
                demand = min(b_v, len(d_v))
            rec.bc_demand = demand
            pi_a = renormalize(pi_a, est.mu, est.scales)
            pi_a = fit(d_v, pi_a, demand, cfg.train_cfg(cfg.epochs_per_iter, 0), rng).model
            # discriminator and refinement
            sub = d_v.sample(demand, rng)
            _, val = sub.split(0.1, rng)
            if cfg.prune:
                val = prune_data(val)
            new_est = None
            try:
                if cfg.use_reward_model:
                    b_a = cfg.attacker_budget or b_c
                    d_a = query_action(lambda s: np.clip(mlp_forward(pi_a, s), -1.0, 1.0), est, b_a, rng)
                    reward = _renorm_reward(reward, est, k)
                    reward = train_reward(
                        d_a, d_v, reward, demand, cfg.reward_steps, cfg.learning_rate, cfg.batch_size, rng, cfg.prune
                    )
                if len(val) == 0:
                    raise DegenerateDataError("pruning emptied the validation split")
                if cfg.use_reward_model:
                    weights = proxy_reward(reward, val.states, val.actions)
                else:
                    weights = per_pair_huber(pi_a, val)
                if cfg.family == "diagonal":
                    mu, sig = dist_refine(val.states, weights)
                    new_est = GaussianEstimate.diagonal(mu, sig)
                else:
                    mu, cov = dist_refine_full(val.states, weights)
                    new_est = GaussianEstimate.full(mu, cov)
            except DegenerateDataError as exc:
                rec.warning = f"refinement skipped: {exc}"
                log.info("iteration %d: %s", i, rec.warning)
            self.report.iterations.append(rec)
            if new_est is not None:
                est = new_est
            b_c = max(b_v, int(round(b_v * float(np.mean(est.scales)))))
            i += 1
            if ledger.consumed + b_c >= cfg.total_budget - cfg.reserved_budget:
                break
        self.iter_policy = pi_a
        return self.report

    def final_retrain(self):
        """Spend the remaining budget at the selected estimate and retrain from scratch."""
        cfg = self.cfg
        rng = _rng(cfg.seed, 3)
        est = self._selected_est
        remaining = self.oracle.ledger.remaining
        parts = [TransferDataset(self.d_tilde.states, self.d_tilde.actions)]
        if remaining > 0:
            parts.append(query_action(self.oracle, est, remaining, rng))
        data = TransferDataset.concat(*parts)
        self.policy, epochs = train_final(data, est, cfg, rng)
        self.report.final_dataset_size = len(data)
        self.report.final_epochs = epochs
        self.report.consumed = self.oracle.ledger.consumed
        return self.policy

    def run(self):
        t0 = time.perf_counter()
        self.explore()
        if self.d_tilde is None:
            raise DegenerateDataError("no iteration completed; budget too small")
        self.final_retrain()
        self.report.wall_clock = time.perf_counter() - t0
        return self.report, self.policy


def train_final(data: TransferDataset, est: GaussianEstimate, cfg: AttackConfig, rng):
    """Fresh attacker trained with early stopping; returns (model, epochs run)."""
    model = _policy_net(data.state_dim, data.action_dim, cfg.policy_hidden, rng, est)
    train, val = data.split(0.1, rng)
    res = train_split(train, val, model, cfg.train_cfg(cfg.final_max_epochs, 0, cfg.final_patience), rng)
    return res.model, res.epochs_run


def stealthy_imitation(oracle, ref: ReferenceStats | None, cfg: AttackConfig):
    """Run the full attack; returns (AttackReport, attacker policy)."""
    return StealthyImitation(oracle, ref, cfg).run()


def final_retrain(d_tilde: TransferDataset, oracle, est: GaussianEstimate, cfg: AttackConfig):
    """Stand-alone final stage: top up ``d_tilde`` with the remaining budget and retrain."""
    rng = _rng(cfg.seed, 3)
    remaining = oracle.ledger.remaining
    parts = [TransferDataset(d_tilde.states, d_tilde.actions)]
    if remaining > 0:
        parts.append(query_action(oracle, est, remaining, rng))
    data = TransferDataset.concat(*parts)
    model, _ = train_final(data, est, cfg, rng)
    return model


def steal_from(oracle, est: GaussianEstimate, cfg: AttackConfig, label, budget=None):
    """Spend the whole budget at one fixed distribution and train the attacker on it."""
    t0 = time.perf_counter()
    rng = _rng(cfg.seed, 4)
    budget = oracle.ledger.remaining if budget is None else int(budget)
    data = query_action(oracle, est, budget, rng)
    model, epochs = train_final(TransferDataset(data.states, data.actions), est, cfg, rng)
    report = AttackReport(label=label, seed=cfg.seed, initial_kl=math.nan, total_budget=oracle.ledger.total)
    report.config = asdict(cfg)
    report.consumed = oracle.ledger.consumed
    report.final_dataset_size = len(data)
    report.final_epochs = epochs
    report.selected_mu = est.mu.tolist()
    report.selected_sigma = est.scales.tolist()
    report.wall_clock = time.perf_counter() - t0
    return report, model


def random_baseline(oracle, scale: float, cfg: AttackConfig, ref: ReferenceStats | None = None):
    """All queries from N(0, scale^2 I)."""
    n = oracle.state_dim
    est = GaussianEstimate.diagonal(np.zeros(n), np.full(n, float(scale)))
    report, model = steal_from(oracle, est, cfg, f"random{scale:g}")
    if ref is not None:
        report.selected_kl = kl(ref.estimate("diagonal"), est)
    return report, model


def reference_fit_steal(oracle, ref: ReferenceStats, cfg: AttackConfig, family="diagonal"):
    """All queries from the defender's own Gaussian fit of the visited states."""
    est = ref.estimate(family)
    report, model = steal_from(oracle, est, cfg, f"reffit_{family}")
    report.selected_kl = 0.0 if family == "diagonal" else kl(ref.estimate("diagonal"), est)
    return report, model
