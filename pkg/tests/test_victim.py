import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polsteal.envs import make_env
from polsteal.errors import BudgetExhaustedError, BuildError, ShapeError
from polsteal.nn import TrainConfig, mlp_forward
from polsteal.victim import (
    ACTION_DTYPE,
    BudgetLedger,
    Oracle,
    collect_expert_data,
    load_bundle,
    make_oracle,
    save_bundle,
    score_policy,
    train_victim,
    victim_answer,
)


class Counting:
    """Instrumented wrapper: records every batch that reaches the victim."""

    def __init__(self, oracle):
        self.oracle = oracle
        self.seen = 0

    def query(self, states):
        out = self.oracle.query(states)
        self.seen += len(np.atleast_2d(states))
        return out


def test_ledger_charges_and_refuses():
    led = BudgetLedger(10, 2)
    led.charge(4)
    led.charge(6)
    assert led.remaining == 0
    with pytest.raises(BudgetExhaustedError):
        led.charge(1)
    assert led.consumed == 10
    with pytest.raises(ValueError):
        BudgetLedger(5, 5)


@given(st.lists(st.integers(0, 40), max_size=30), st.integers(1, 300))
def test_ledger_never_exceeds_total(requests, total):
    led = BudgetLedger(total)
    served = 0
    for m in requests:
        try:
            led.charge(m)
            served += m
        except BudgetExhaustedError:
            pass
    assert led.consumed == served <= total


def test_ledger_is_atomic_under_threads():
    led = BudgetLedger(1000)
    ok = []

    def worker():
        for _ in range(200):
            try:
                led.charge(3)
                ok.append(3)
            except BudgetExhaustedError:
                pass

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert led.consumed == sum(ok) <= 1000


def test_oracle_meters_exactly(small_victim):
    oracle = make_oracle(small_victim, 100)
    counted = Counting(oracle)
    rng = np.random.default_rng(0)
    for m in (1, 17, 0, 40):
        counted.query(rng.normal(size=(m, 4)))
    assert oracle.ledger.consumed == counted.seen == 58
    with pytest.raises(BudgetExhaustedError):
        counted.query(rng.normal(size=(43, 4)))
    assert oracle.ledger.consumed == 58
    with pytest.raises(ShapeError):
        oracle.query(np.zeros((2, 3)))


def test_answers_are_single_precision_and_in_range(small_victim):
    s = np.random.default_rng(1).normal(size=(500, 4)) * 1e3
    a = small_victim.act(s)
    assert np.all(np.abs(a) <= 1)
    np.testing.assert_array_equal(a, a.astype(ACTION_DTYPE))
    np.testing.assert_array_equal(a, victim_answer(small_victim.policy, s))
    # far outside the visited region the tanh head saturates to exactly one
    assert np.any(np.abs(a) == 1.0)
    close = np.clip(mlp_forward(small_victim.policy, s), -1, 1)
    assert np.max(np.abs(a - close)) < 1e-7


def test_defense_is_exact_in_range(small_victim):
    ref = small_victim.ref
    rng = np.random.default_rng(2)
    probes = rng.uniform(ref.lo, ref.hi, size=(10_000, 4))
    plain = make_oracle(small_victim, 10**5).query(probes)
    guarded = make_oracle(small_victim, 10**5, defense=True, defense_seed=3).query(probes)
    np.testing.assert_array_equal(plain, guarded)


def test_defense_randomizes_out_of_range(small_victim):
    ref = small_victim.ref
    far = ref.hi + 5 * ref.sigma_star + np.zeros((2000, 4))
    out = make_oracle(small_victim, 10**5, defense=True, defense_seed=3).query(far)
    assert np.all(np.abs(out) <= 1)
    assert np.std(out) > 0.4  # uniform on [-1, 1] has std 0.577
    again = make_oracle(small_victim, 10**5, defense=True, defense_seed=3).query(far)
    np.testing.assert_array_equal(out, again)


def test_defense_boundary_is_inclusive(small_victim):
    ref = small_victim.ref
    edge = np.vstack([ref.lo, ref.hi])
    a = make_oracle(small_victim, 10, defense=True).query(edge)
    np.testing.assert_array_equal(a, small_victim.act(edge))


def test_collect_expert_data_labels_are_noise_free():
    env = make_env("linear_reach", r_min_episodes=2)
    data, visited = collect_expert_data(env, 3, 0, noise=0.5)
    from polsteal.envs import expert_action

    np.testing.assert_allclose(data.actions, expert_action(env, data.states))
    assert len(visited) == 3 * (env.horizon + 1)
    assert len(data) == 3 * env.horizon


def test_reference_comes_from_visited_states(small_victim):
    ref = small_victim.ref
    np.testing.assert_array_equal(small_victim.policy.input_shift, ref.mu_star)
    assert ref.sample_count == 12 * (small_victim.env.horizon + 1)


def test_competence_check():
    env = make_env("linear_reach", r_min_episodes=2)
    with pytest.raises(BuildError):
        train_victim(env, 2, TrainConfig(epochs=0), seed=0, hidden=(4,), competence=0.99)


def test_bundle_round_trip(small_victim, tmp_path):
    save_bundle(small_victim, tmp_path / "v")
    back = load_bundle(tmp_path / "v")
    s = np.random.default_rng(0).normal(size=(50, 4))
    np.testing.assert_array_equal(back.act(s), small_victim.act(s))
    assert back.env == small_victim.env
    assert back.victim_return == small_victim.victim_return
    with pytest.raises(FileNotFoundError):
        load_bundle(tmp_path / "missing")


def test_victim_scores_itself_at_one(small_victim):
    _, _, rr = score_policy(small_victim, small_victim.policy, seed=4)
    assert rr == pytest.approx(1.0, abs=1e-3)
