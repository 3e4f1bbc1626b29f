import csv
import math

import numpy as np
import pytest

from polsteal import attack as attack_mod
from polsteal.attack import (
    AttackConfig,
    StealthyImitation,
    distribution_evaluate,
    final_retrain,
    initial_estimate,
    per_pair_huber,
    query_action,
    random_baseline,
    reference_fit_steal,
    stealthy_imitation,
)
from polsteal.data import TransferDataset
from polsteal.dist import GaussianEstimate, kl
from polsteal.errors import BudgetExhaustedError
from polsteal.nn import TrainConfig, huber_loss, init_mlp, mlp_forward
from polsteal.victim import BudgetLedger, make_oracle


def tiny(**kw):
    base = dict(
        total_budget=12_000,
        reserved_budget=2_000,
        base_budget=1_000,
        policy_hidden=(16, 16),
        reward_hidden=(16,),
        reward_steps=20,
        batch_size=128,
        final_max_epochs=4,
        final_patience=2,
        seed=5,
    )
    base.update(kw)
    return AttackConfig(**base)


class Counting:
    def __init__(self, oracle):
        self.oracle, self.seen = oracle, 0
        self.ledger = oracle.ledger
        self.state_dim, self.action_dim = oracle.state_dim, oracle.action_dim

    def query(self, states):
        out = self.oracle.query(states)
        self.seen += len(states)
        return out


class Saturated:
    """Fake victim that always answers +1, so pruning removes everything."""

    def __init__(self, n, total):
        self.state_dim, self.action_dim = n, n
        self.ledger = BudgetLedger(total)

    def query(self, states):
        self.ledger.charge(len(states))
        return np.ones((len(states), self.action_dim))


def shifted(victim, **kw):
    ref = victim.ref
    return tiny(init_mu=tuple(ref.mu_star + 3 * ref.sigma_star), init_sigma=tuple(ref.sigma_star), **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        tiny(reserved_budget=12_000)
    with pytest.raises(ValueError):
        tiny(base_budget=20_000)
    with pytest.raises(ValueError):
        tiny(family="mixture")
    with pytest.raises(ValueError):
        tiny(epochs_per_iter=0)


def test_initial_estimate_defaults():
    est = initial_estimate(tiny(), 3)
    np.testing.assert_array_equal(est.mu, np.zeros(3))
    np.testing.assert_array_equal(est.sigma, np.ones(3))
    assert initial_estimate(tiny(family="full"), 3).family == "full"


def test_shifted_init_has_kl_four_and_a_half(small_victim):
    cfg = shifted(small_victim)
    est = initial_estimate(cfg, 4)
    assert kl(small_victim.ref.estimate(), est) == pytest.approx(4.5, abs=1e-9)


def test_query_action_attaches_split(rng):
    est = GaussianEstimate.diagonal(np.zeros(2), np.ones(2))
    d = query_action(lambda s: s[:, :1], est, 50, rng)
    assert len(d) == 50 and len(d.val_index) == 5
    np.testing.assert_array_equal(d.actions[:, 0], d.states[:, 0])


def test_per_pair_huber_averages_to_batch_loss(rng):
    model = init_mlp((3, 5, 2), rng, "relu", "tanh")
    d = TransferDataset(rng.normal(size=(40, 3)), rng.uniform(-1, 1, size=(40, 2)) * 3)
    per = per_pair_huber(model, d)
    assert per.shape == (40,)
    assert per.mean() == pytest.approx(huber_loss(mlp_forward(model, d.states), d.actions)[0], rel=1e-12)


def test_distribution_evaluate_checks_demand(rng):
    d = TransferDataset(rng.normal(size=(10, 2)), rng.normal(size=(10, 1)))
    with pytest.raises(ValueError):
        distribution_evaluate(d, init_mlp((2, 4, 1), rng), 11, TrainConfig())


def test_budget_exactness_and_metering(small_victim):
    cfg = tiny()
    oracle = Counting(make_oracle(small_victim, cfg.total_budget, cfg.reserved_budget))
    report, _ = stealthy_imitation(oracle, small_victim.ref, cfg)
    assert report.consumed == oracle.seen == oracle.ledger.consumed == cfg.total_budget
    last = report.iterations[-1]
    assert last.consumed <= cfg.total_budget - cfg.reserved_budget
    selected = report.iterations[report.selected_index]
    assert report.final_dataset_size == selected.b_c + cfg.total_budget - last.consumed


def test_dynamic_budget_law_and_stop_rule(small_victim):
    cfg = shifted(small_victim)
    oracle = make_oracle(small_victim, cfg.total_budget, cfg.reserved_budget)
    run = StealthyImitation(oracle, small_victim.ref, cfg)
    report = run.explore()
    b_v = cfg.base_budget
    recs = report.iterations
    assert recs[0].b_c == b_v
    for rec in recs[1:]:
        assert rec.b_c == max(b_v, round(b_v * float(np.mean(rec.sigma))))
    for rec in recs:
        sigma_bar = float(np.mean(rec.sigma))
        assert rec.bc_demand == min(rec.b_c, max(20, round(b_v * sigma_bar)))
    # each record stores the ledger after that iteration's query
    assert [r.consumed for r in recs] == list(np.cumsum([r.b_c for r in recs]))
    # the loop only continues while the next batch fits in the exploration budget
    for rec, nxt in zip(recs, recs[1:]):
        assert rec.consumed + nxt.b_c < cfg.total_budget - cfg.reserved_budget
    assert oracle.ledger.consumed <= cfg.total_budget - cfg.reserved_budget


def test_selection_is_first_maximum(small_victim):
    cfg = shifted(small_victim)
    report, _ = stealthy_imitation(make_oracle(small_victim, cfg.total_budget, cfg.reserved_budget), small_victim.ref, cfg)
    losses = [r.eval_loss for r in report.iterations]
    assert report.selected_index == int(np.argmax(losses))
    sel = report.iterations[report.selected_index]
    assert report.selected_kl == sel.kl
    assert report.selected_mu == sel.mu
    assert report.initial_kl == pytest.approx(4.5, abs=1e-9)


def test_determinism(small_victim, tmp_path):
    cfg = shifted(small_victim)
    paths = []
    for k in range(2):
        report, model = stealthy_imitation(make_oracle(small_victim, cfg.total_budget, cfg.reserved_budget), small_victim.ref, cfg)
        paths.append(report.write(tmp_path / str(k), include_timing=False))
    a = open(paths[0]["iterations"]).read()
    assert a == open(paths[1]["iterations"]).read()
    assert open(paths[0]["report"]).read() == open(paths[1]["report"]).read()


def test_iterations_csv_columns(small_victim, tmp_path):
    cfg = tiny()
    report, _ = stealthy_imitation(make_oracle(small_victim, cfg.total_budget, cfg.reserved_budget), small_victim.ref, cfg)
    paths = report.write(tmp_path)
    rows = list(csv.DictReader(open(paths["iterations"])))
    assert list(rows[0]) == ["iter", "consumed_budget", "kl", "eval_loss", "sigma_mean", "b_c", "selected_flag"]
    assert sum(int(r["selected_flag"]) for r in rows) == 1
    assert float(rows[0]["kl"]) == report.iterations[0].kl


@pytest.mark.parametrize(
    "flags",
    [
        dict(fixed_evaluator_budget=False),
        dict(use_reward_model=False),
        dict(prune=False),
        dict(dynamic_bc_budget=False),
        dict(family="full"),
        dict(epochs_per_iter=2),
    ],
)
def test_variants_run_within_budget(small_victim, flags):
    cfg = shifted(small_victim, **flags)
    oracle = make_oracle(small_victim, cfg.total_budget, cfg.reserved_budget)
    report, model = stealthy_imitation(oracle, small_victim.ref, cfg)
    assert oracle.ledger.consumed == cfg.total_budget
    assert all(math.isfinite(r.kl) for r in report.iterations)
    if flags.get("dynamic_bc_budget") is False:
        assert all(r.bc_demand == min(cfg.base_budget, r.b_c) for r in report.iterations)


def test_reward_model_flag_skips_discriminator(small_victim, monkeypatch):
    calls = []
    real = attack_mod.train_reward
    monkeypatch.setattr(attack_mod, "train_reward", lambda *a, **k: calls.append(1) or real(*a, **k))
    cfg = tiny(use_reward_model=False)
    stealthy_imitation(make_oracle(small_victim, cfg.total_budget, cfg.reserved_budget), None, cfg)
    assert calls == []
    cfg = tiny()
    stealthy_imitation(make_oracle(small_victim, cfg.total_budget, cfg.reserved_budget), None, cfg)
    assert calls


def test_fully_pruned_iterations_keep_estimate():
    cfg = tiny()
    report, _ = stealthy_imitation(Saturated(2, cfg.total_budget), None, cfg)
    assert all(r.warning and "refinement skipped" in r.warning for r in report.iterations)
    assert all(r.mu == [0.0, 0.0] and r.sigma == [1.0, 1.0] for r in report.iterations)
    assert math.isnan(report.iterations[0].kl)


def test_budget_exhausted_mid_run_exits_cleanly(small_victim):
    cfg = tiny()
    oracle = make_oracle(small_victim, cfg.total_budget, cfg.reserved_budget)
    oracle.ledger.consumed = cfg.total_budget - 1500
    run = StealthyImitation(oracle, small_victim.ref, cfg)
    report = run.explore()
    assert len(report.iterations) == 1
    with pytest.raises(BudgetExhaustedError):
        oracle.query(np.zeros((501, 4)))


def test_final_retrain_beats_iteration_policy(small_victim):
    cfg = shifted(small_victim, final_max_epochs=30, final_patience=5)
    oracle = make_oracle(small_victim, cfg.total_budget, cfg.reserved_budget)
    run = StealthyImitation(oracle, small_victim.ref, cfg)
    run.explore()
    final = run.final_retrain()
    probe = query_action(small_victim.act, run._selected_est, 4000, np.random.default_rng(0))
    loss = lambda m: huber_loss(mlp_forward(m, probe.states), probe.actions)[0]  # noqa: E731
    assert loss(final) < loss(run.iter_policy)


def test_standalone_final_retrain_spends_remaining(small_victim):
    cfg = tiny()
    oracle = make_oracle(small_victim, 3000)
    est = small_victim.ref.estimate()
    d = query_action(oracle, est, 1000, np.random.default_rng(0))
    model = final_retrain(d, oracle, est, cfg)
    assert oracle.ledger.remaining == 0
    assert model.layer_dims == (4, 16, 16, 4)


def test_baselines_spend_whole_budget(small_victim):
    cfg = tiny()
    for scale in (1.0, 10.0, 100.0):
        oracle = make_oracle(small_victim, cfg.total_budget)
        report, _ = random_baseline(oracle, scale, cfg, small_victim.ref)
        assert report.consumed == cfg.total_budget == report.final_dataset_size
        assert report.selected_sigma == [scale] * 4
        assert report.selected_kl > 0
    report, _ = reference_fit_steal(make_oracle(small_victim, cfg.total_budget), small_victim.ref, cfg)
    assert report.selected_kl == 0.0
    report, _ = reference_fit_steal(make_oracle(small_victim, cfg.total_budget), small_victim.ref, cfg, "full")
    assert report.selected_kl >= 0.0
