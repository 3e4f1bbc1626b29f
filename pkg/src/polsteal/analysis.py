"""Rank correlation between evaluator loss and KL, robustness sweeps, and defense metrics.

These harnesses query the victim directly rather than through a metered
oracle: they measure properties of the method, not an attack, and their
outputs are tagged ``analytical`` to keep the two apart.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .attack import AttackConfig, fmt, train_final
from .data import TransferDataset
from .dist import GaussianEstimate, kl, sample
from .errors import DegenerateDataError, ShapeError
from .nn import TrainConfig, fit, init_mlp, renormalize
from .victim import VictimBundle, score_policy


def spearman(xs, ys):
    """Spearman's rho with average ranks for ties and a two-sided t-approximation p-value."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ShapeError("xs and ys must be 1-d sequences of equal length")
    m = x.size
    if m < 4:
        raise DegenerateDataError("need at least four pairs")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateDataError("rank correlation is undefined for a constant sequence")
    rx = stats.rankdata(x) - (m + 1) / 2.0
    ry = stats.rankdata(y) - (m + 1) / 2.0
    rho = float(rx @ ry / math.sqrt((rx @ rx) * (ry @ ry)))
    rho = min(1.0, max(-1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((m - 2) / (1.0 - rho * rho))
    p = float(2.0 * stats.t.sf(abs(t), m - 2))
    return rho, p


def delta_kl(initial_kl, final_kl) -> float:
    """Percentage change of KL over an attack; negative means convergence."""
    if initial_kl == 0:
        raise DegenerateDataError("initial KL is zero")
    if initial_kl < 0:
        raise ValueError("initial KL must be positive")
    return 100.0 * (final_kl / initial_kl - 1.0)


@dataclass(frozen=True)
class CorrelationRecord:
    z: tuple[float, ...]
    kl: float
    eval_loss: float

    def __post_init__(self):
        if self.kl < 0:
            raise ValueError("kl must be non-negative")


@dataclass(frozen=True)
class CorrelationConfig:
    count: int = 200
    points_per_dist: int = 10_000
    z_max: float = 4.0
    hidden: tuple[int, ...] = (256, 256)
    batch_size: int = 1024
    learning_rate: float = 1e-3
    epochs: int = 1

    def __post_init__(self):
        if self.count < 4 or self.points_per_dist < 10:
            raise ValueError("need count >= 4 and points_per_dist >= 10")


@dataclass
class CorrelationResult:
    records: list[CorrelationRecord]
    rho: float
    p_value: float
    config: dict = field(default_factory=dict)
    seed: int = 0

    def summary(self) -> dict:
        return {
            "experiment": "correlation",
            "mode": "analytical",
            "rho": self.rho,
            "p_value": self.p_value,
            "count": len(self.records),
            "seed": self.seed,
            "config": self.config,
        }


def _evaluator_loss(act, est: GaussianEstimate, cc: CorrelationConfig, rng) -> float:
    states = sample(est, cc.points_per_dist, rng)
    data = TransferDataset(states, act(states))
    n, k = data.state_dim, data.action_dim
    model = renormalize(init_mlp((n, *cc.hidden, k), rng, "relu", "tanh"), est.mu, est.scales)
    cfg = TrainConfig(learning_rate=cc.learning_rate, batch_size=cc.batch_size, epochs=cc.epochs)
    return fit(data, model, len(data), cfg, rng).val_loss


def correlation_experiment(victim: VictimBundle, cc: CorrelationConfig = CorrelationConfig(), seed=0, act=None):
    """Loss of a one-epoch evaluator on N(mu* + z sigma*, sigma*^2) against the KL of that estimate.

    ``z`` has components uniform on [0, z_max] with random signs. ``act``
    overrides the victim's answer function (used for null-model checks).
    """
    act = victim.act if act is None else act
    ref = victim.ref
    p = ref.estimate("diagonal")
    records = []
    for i in range(cc.count):
        rng = np.random.default_rng([seed, 41, i])
        z = rng.uniform(0.0, cc.z_max, ref.dim) * rng.choice([-1.0, 1.0], ref.dim)
        est = GaussianEstimate.diagonal(ref.mu_star + z * ref.sigma_star, ref.sigma_star)
        loss = _evaluator_loss(act, est, cc, rng)
        records.append(CorrelationRecord(tuple(z.tolist()), kl(p, est), loss))
    rho, pval = spearman([r.eval_loss for r in records], [r.kl for r in records])
    return CorrelationResult(records, rho, pval, asdict(cc), seed)


@dataclass(frozen=True)
class SweepPoint:
    kind: str
    value: float
    rr: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sigma_scale", "mu_shift"):
            raise ValueError(f"unknown sweep kind {self.kind!r}")
        if self.kind == "sigma_scale" and not self.value > 0:
            raise ValueError("sigma_scale points need a positive value")


def sweep_estimate(ref, kind, value, rng) -> GaussianEstimate:
    if kind == "sigma_scale":
        if not value > 0:
            raise ValueError("lambda must be positive")
        return GaussianEstimate.diagonal(ref.mu_star, value * ref.sigma_star)
    signs = rng.choice([-1.0, 1.0], ref.dim)
    return GaussianEstimate.diagonal(ref.mu_star + value * signs * ref.sigma_star, ref.sigma_star)


def steal_at(victim: VictimBundle, est: GaussianEstimate, queries, cfg: AttackConfig, rng, eval_seed):
    """Train an attacker on ``queries`` victim answers drawn from ``est`` and score it."""
    states = sample(est, int(queries), rng)
    data = TransferDataset(states, victim.act(states))
    model, _ = train_final(data, est, cfg, rng)
    return score_policy(victim, model, eval_seed)


def robustness_sweep(victim: VictimBundle, lambdas, zs, queries, cfg: AttackConfig, seed=0, eval_seed=None):
    """Return ratio under scaled spreads (lambda) and shifted means (z) of the reference fit."""
    if any(not lam > 0 for lam in lambdas):
        raise ValueError("lambda values must be positive")
    eval_seed = seed + 1000 if eval_seed is None else eval_seed
    points = []
    for j, (kind, value) in enumerate([("sigma_scale", v) for v in lambdas] + [("mu_shift", v) for v in zs]):
        rng = np.random.default_rng([seed, 43, j])
        est = sweep_estimate(victim.ref, kind, float(value), rng)
        _, _, rr = steal_at(victim, est, queries, cfg, rng, eval_seed)
        points.append(SweepPoint(kind, float(value), rr, seed))
    return points


def write_correlation_csv(result: CorrelationResult, path) -> None:
    n = len(result.records[0].z) if result.records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{i}" for i in range(n)] + ["kl", "eval_loss"])
        for r in result.records:
            w.writerow([fmt(v) for v in r.z] + [fmt(r.kl), fmt(r.eval_loss)])


def write_sweep_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "value", "rr", "seed"])
        for p in points:
            w.writerow([p.kind, fmt(p.value), fmt(p.rr), p.seed])


def write_summary(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
