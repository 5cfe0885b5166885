"""Aggregation rules: hand simulations, invariants, and state hygiene.

The quadratic single-point client (gradient w - m) makes every round
traceable on paper, so most expected values here are written down exactly.
"""

import numpy as np
import pytest

from dropfed.aggregation import (
    ALGORITHMS,
    fedavg_round,
    init_state,
    memory_footprint,
    mifa_round,
    mimic_round,
    play_round,
    scaffold_round,
)
from dropfed.errors import ConfigError, IntegrityError
from dropfed.local_trainer import LocalConfig
from dropfed.objectives import ClientDataset, QuadraticObjective


def point_client(m, client_id=0):
    """Quadratic objective on the single point m, so grad(w) = w - m."""
    m = np.atleast_1d(np.asarray(m, dtype=np.float64))
    return QuadraticObjective(
        ClientDataset(m[None, :], np.array([0]), client_id=client_id)
    )


def rng_factory(salt):
    return lambda i: np.random.default_rng((salt, i))


FULL_CFG = LocalConfig(steps=1, lr=0.1, batch_size=1)


# ---------------------------------------------------------------------------
# init and validation


def test_init_state_validation():
    with pytest.raises(ConfigError):
        init_state("adam", np.zeros(2), 3)
    with pytest.raises(ConfigError):
        init_state("fedavg", np.zeros(2), 0)
    with pytest.raises(ConfigError):
        init_state("mimic", np.zeros(2), 3, correction_site="edge")
    st = init_state("scaffold", np.zeros(2), 3)
    np.testing.assert_array_equal(st.server_variate, np.zeros(2))
    assert init_state("fedavg", np.zeros(2), 3).server_variate is None
    assert set(ALGORITHMS) == {"fedavg", "fedprox", "mifa", "mimic", "scaffold"}


def test_play_round_checks_objective_count():
    st = init_state("fedavg", np.zeros(1), 3)
    objs = [point_client(0.0)] * 2
    with pytest.raises(ConfigError):
        play_round(st, objs, [0], FULL_CFG, 0.1, rng_factory(0))


# ---------------------------------------------------------------------------
# shared update law


def test_update_law_is_exact():
    # w_{t+1} = w_t - eta * v, bit for bit, for every algorithm.
    objs = [point_client(1.0, 0), point_client(-2.0, 1)]
    for algo in ALGORITHMS:
        st = init_state(algo, np.array([0.3]), 2)
        res = play_round(st, objs, [0, 1], FULL_CFG, 0.37, rng_factory(1), full_batch=True)
        np.testing.assert_array_equal(res.state.w, st.w - 0.37 * res.v)
        assert res.state.round_index == 1


def test_full_participation_single_step_gives_population_gradient():
    # K = 1 full batch: v must equal the average full gradient exactly.
    objs = [point_client(1.0, 0), point_client(3.0, 1), point_client(-1.0, 2)]
    w0 = np.array([0.5])
    want = np.mean([o.grad(w0) for o in objs], axis=0)
    for algo in ALGORITHMS:
        st = init_state(algo, w0, 3)
        res = play_round(st, objs, [0, 1, 2], FULL_CFG, 0.1, rng_factory(2), full_batch=True)
        np.testing.assert_allclose(res.v, want, atol=1e-15)


def test_empty_round_is_a_no_op_on_the_model():
    objs = [point_client(1.0, 0), point_client(-1.0, 1)]
    for algo in ALGORITHMS:
        st = init_state(algo, np.array([0.7]), 2)
        res = play_round(st, objs, [], FULL_CFG, 0.5, rng_factory(3))
        np.testing.assert_array_equal(res.v, [0.0])
        assert res.uploads == {}
        np.testing.assert_array_equal(res.state.w, st.w)
        assert res.state.round_index == 1
        assert res.state.w is not st.w  # fresh array, not an alias


def test_rounds_do_not_mutate_input_state():
    objs = [point_client(2.0, 0), point_client(-2.0, 1)]
    for algo in ALGORITHMS:
        st = init_state(algo, np.array([1.0]), 2)
        # Prime one round so memory exists, then snapshot and replay.
        st = play_round(st, objs, [0, 1], FULL_CFG, 0.1, rng_factory(4), full_batch=True).state
        w_before = st.w.copy()
        mem_before = {k: v.copy() for k, v in st.memory.items()}
        cor_before = {k: v.copy() for k, v in st.corrections.items()}
        var_before = {k: v.copy() for k, v in st.client_variates.items()}
        res1 = play_round(st, objs, [0], FULL_CFG, 0.1, rng_factory(5), full_batch=True)
        res2 = play_round(st, objs, [0], FULL_CFG, 0.1, rng_factory(5), full_batch=True)
        np.testing.assert_array_equal(st.w, w_before)
        for k in mem_before:
            np.testing.assert_array_equal(st.memory[k], mem_before[k])
        for k in cor_before:
            np.testing.assert_array_equal(st.corrections[k], cor_before[k])
        for k in var_before:
            np.testing.assert_array_equal(st.client_variates[k], var_before[k])
        # Replaying the identical round is bit-identical.
        np.testing.assert_array_equal(res1.state.w, res2.state.w)
        np.testing.assert_array_equal(res1.v, res2.v)


# ---------------------------------------------------------------------------
# mimic


def test_mimic_hand_simulation():
    # Clients at +1 and -1, w0 = 0.  Round 0 (both): uploads -1 and +1,
    # v = 0, corrections become (+1, -1), w stays 0.  Round 1 (client 0
    # only): upload -1, shifted by +1 gives v = 0 again, exactly the
    # population gradient at w = 0.
    objs = [point_client(1.0, 0), point_client(-1.0, 1)]
    st = init_state("mimic", np.array([0.0]), 2)
    r0 = play_round(st, objs, [0, 1], FULL_CFG, 0.5, rng_factory(6), full_batch=True)
    np.testing.assert_array_equal(r0.v, [0.0])
    np.testing.assert_array_equal(r0.state.corrections[0], [1.0])
    np.testing.assert_array_equal(r0.state.corrections[1], [-1.0])
    assert r0.state.correction_round == {0: 0, 1: 0}
    r1 = play_round(r0.state, objs, [0], FULL_CFG, 0.5, rng_factory(7), full_batch=True)
    np.testing.assert_array_equal(r1.uploads[0], [-1.0])
    np.testing.assert_array_equal(r1.v, [0.0])
    # Absent client keeps its old correction and stamp.
    np.testing.assert_array_equal(r1.state.corrections[1], [-1.0])
    assert r1.state.correction_round == {0: 1, 1: 0}


def test_mimic_correction_identity_and_mean_preservation():
    rng = np.random.default_rng(8)
    dim, n = 4, 6
    st = init_state("mimic", rng.normal(size=dim), n)
    # Seed corrections by a full round of random uploads.
    uploads = {i: rng.normal(size=dim) for i in range(n)}
    st = mimic_round(st, uploads, 0.1).state
    for _ in range(20):
        ids = sorted(rng.choice(n, size=rng.integers(1, n + 1), replace=False).tolist())
        uploads = {i: rng.normal(size=dim) for i in ids}
        before = np.mean([st.corrections[i] for i in ids], axis=0)
        res = mimic_round(st, uploads, 0.1)
        for i in ids:
            # v - upload_i - correction_i = 0 after the write.
            np.testing.assert_allclose(
                res.v - uploads[i] - res.state.corrections[i], 0.0, atol=1e-12
            )
        after = np.mean([res.state.corrections[i] for i in ids], axis=0)
        np.testing.assert_allclose(after, before, atol=1e-10)
        st = res.state


def test_mimic_first_round_matches_fedavg():
    rng = np.random.default_rng(9)
    uploads = {i: rng.normal(size=3) for i in range(5)}
    v_avg = fedavg_round(init_state("fedavg", np.zeros(3), 5), uploads, 0.2)
    v_mim = mimic_round(init_state("mimic", np.zeros(3), 5), uploads, 0.2)
    np.testing.assert_array_equal(v_avg.v, v_mim.v)
    np.testing.assert_array_equal(v_avg.state.w, v_mim.state.w)


def test_mimic_exact_on_quadratics_any_schedule():
    # After the first full round, the shifted average equals the population
    # gradient no matter who participates: corrections carry each absent
    # client's offset, and quadratic gradients are affine in w.
    rng = np.random.default_rng(10)
    means = rng.normal(size=(5, 2)) * 3
    objs = [point_client(means[i], i) for i in range(5)]
    st = init_state("mimic", rng.normal(size=2), 5)
    res = play_round(st, objs, list(range(5)), FULL_CFG, 0.3, rng_factory(11), full_batch=True)
    for t in range(1, 15):
        active = sorted(rng.choice(5, size=rng.integers(1, 6), replace=False).tolist())
        res = play_round(res.state, objs, active, FULL_CFG, 0.3, rng_factory(11 + t), full_batch=True)
        want = np.mean([o.grad(res.state.w + 0.3 * res.v) for o in objs], axis=0)
        np.testing.assert_allclose(res.v, want, atol=1e-12)


def test_mimic_correction_site_is_cosmetic():
    objs = [point_client(1.0, 0), point_client(-1.0, 1), point_client(2.0, 2)]
    on_server = init_state("mimic", np.zeros(1), 3, correction_site="server")
    on_client = init_state("mimic", np.zeros(1), 3, correction_site="client")
    schedule = [[0, 1, 2], [0], [2, 1], [1], [0, 2]]
    for t, active in enumerate(schedule):
        on_server = play_round(on_server, objs, active, FULL_CFG, 0.2, rng_factory(t), full_batch=True).state
        on_client = play_round(on_client, objs, active, FULL_CFG, 0.2, rng_factory(t), full_batch=True).state
    np.testing.assert_array_equal(on_server.w, on_client.w)
    assert memory_footprint(on_server) == {"server": 3, "client": 0}
    assert memory_footprint(on_client) == {"server": 0, "client": 3}


# ---------------------------------------------------------------------------
# mifa


def test_mifa_hand_simulation():
    # Means 1 and 3, eta = 0.5, K = 1 full batch from w0 = 0.
    #   t=0 both:  buffer = (-1, -3),    v = -2,     w -> 1
    #   t=1 {0}:   buffer = (0, -3),     v = -1.5,   w -> 1.75
    #   t=2 {1}:   buffer = (0, -1.25),  v = -0.625, w -> 2.0625
    objs = [point_client(1.0, 0), point_client(3.0, 1)]
    st = init_state("mifa", np.array([0.0]), 2)
    r0 = play_round(st, objs, [0, 1], FULL_CFG, 0.5, rng_factory(20), full_batch=True)
    np.testing.assert_allclose(r0.v, [-2.0])
    np.testing.assert_allclose(r0.state.w, [1.0])
    assert r0.state.memory_round == {0: 0, 1: 0}
    r1 = play_round(r0.state, objs, [0], FULL_CFG, 0.5, rng_factory(21), full_batch=True)
    np.testing.assert_allclose(r1.v, [-1.5])
    np.testing.assert_allclose(r1.state.w, [1.75])
    assert r1.state.memory_round == {0: 1, 1: 0}
    np.testing.assert_allclose(r1.state.memory[1], [-3.0])  # untouched stale entry
    r2 = play_round(r1.state, objs, [1], FULL_CFG, 0.5, rng_factory(22), full_batch=True)
    np.testing.assert_allclose(r2.v, [-0.625])
    np.testing.assert_allclose(r2.state.w, [2.0625])
    assert r2.state.memory_round == {0: 1, 1: 2}


def test_mifa_requires_warm_memory():
    objs = [point_client(1.0, 0), point_client(-1.0, 1)]
    st = init_state("mifa", np.zeros(1), 2)
    with pytest.raises(IntegrityError, match=r"\[1\]"):
        play_round(st, objs, [0], FULL_CFG, 0.1, rng_factory(23), full_batch=True)


def test_mifa_round_averages_all_buffers():
    st = init_state("mifa", np.zeros(2), 3)
    first = {i: np.full(2, float(i)) for i in range(3)}  # 0, 1, 2 -> mean 1
    res = mifa_round(st, first, 1.0)
    np.testing.assert_array_equal(res.v, [1.0, 1.0])
    update = {1: np.full(2, 7.0)}  # buffers now 0, 7, 2 -> mean 3
    res = mifa_round(res.state, update, 1.0)
    np.testing.assert_array_equal(res.v, [3.0, 3.0])


# ---------------------------------------------------------------------------
# scaffold


def test_scaffold_matches_fedavg_under_full_participation():
    # With every client present each round the variate shifts cancel in the
    # average, for both variate styles.
    rng = np.random.default_rng(24)
    means = rng.normal(size=(4, 2))
    objs = [point_client(means[i], i) for i in range(4)]
    cfg = LocalConfig(steps=1, lr=0.1, batch_size=1)
    for literal in (False, True):
        sc = init_state("scaffold", np.zeros(2), 4)
        fa = init_state("fedavg", np.zeros(2), 4)
        for t in range(6):
            sc = play_round(sc, objs, [0, 1, 2, 3], cfg, 0.3, rng_factory(t),
                            scaffold_literal=literal, full_batch=True).state
            fa = play_round(fa, objs, [0, 1, 2, 3], cfg, 0.3, rng_factory(t),
                            full_batch=True).state
        np.testing.assert_allclose(sc.w, fa.w, atol=1e-12)


def test_scaffold_variate_bookkeeping():
    objs = [point_client(1.0, 0), point_client(3.0, 1)]
    st = init_state("scaffold", np.array([0.0]), 2)
    res = play_round(st, objs, [0, 1], FULL_CFG, 0.5, rng_factory(25), full_batch=True)
    # K = 1 full batch: each client's variate is its full gradient at w0,
    # and the server variate is their mean over N.
    np.testing.assert_allclose(res.state.client_variates[0], [-1.0])
    np.testing.assert_allclose(res.state.client_variates[1], [-3.0])
    np.testing.assert_allclose(res.state.server_variate, [-2.0])
    assert memory_footprint(res.state) == {"server": 1, "client": 2}
    # Partial round: only the participant's variate moves; the server
    # variate absorbs 1/N of the change.
    r1 = play_round(res.state, objs, [0], FULL_CFG, 0.5, rng_factory(26), full_batch=True)
    np.testing.assert_allclose(r1.state.client_variates[1], [-3.0])
    g0_new = objs[0].grad(res.state.w)  # raw gradient, variate shift removed
    np.testing.assert_allclose(r1.state.client_variates[0], g0_new)
    np.testing.assert_allclose(
        r1.state.server_variate, np.array([-2.0]) + (g0_new - np.array([-1.0])) / 2
    )


def test_scaffold_literal_anchor_leaves_variates_alone():
    objs = [point_client(1.0, 0), point_client(-1.0, 1)]
    st = init_state("scaffold", np.zeros(1), 2)
    res = scaffold_round(st, objs, [0, 1], FULL_CFG, 0.2, rng_factory(27),
                         literal_anchor=True, full_batch=True)
    assert res.state.client_variates == {}
    np.testing.assert_array_equal(res.state.server_variate, st.server_variate)
    assert len(res.uploads) == 2


def test_scaffold_drift_correction_pulls_toward_population_descent():
    # Two very different clients, many local steps.  Plain averaging drifts
    # toward whoever is active; the variate correction keeps the partial
    # round close to what a full round would do.
    objs = [point_client(4.0, 0), point_client(-4.0, 1)]
    cfg = LocalConfig(steps=8, lr=0.05, batch_size=1)
    st = init_state("scaffold", np.zeros(1), 2)
    st = play_round(st, objs, [0, 1], cfg, 0.4, rng_factory(28), full_batch=True).state
    only0 = play_round(st, objs, [0], cfg, 0.4, rng_factory(29), full_batch=True)
    fa = init_state("fedavg", st.w.copy(), 2)
    fa_only0 = play_round(fa, objs, [0], cfg, 0.4, rng_factory(29), full_batch=True)
    # Population gradient at st.w is just st.w (means cancel).
    pop = float(st.w[0])
    assert abs(float(only0.v[0]) - pop) < abs(float(fa_only0.v[0]) - pop)


# ---------------------------------------------------------------------------
# memory footprints


def test_memory_footprint_by_algorithm():
    assert memory_footprint(init_state("fedavg", np.zeros(1), 5)) == {"server": 0, "client": 0}
    assert memory_footprint(init_state("fedprox", np.zeros(1), 5)) == {"server": 0, "client": 0}
    objs = [point_client(float(i), i) for i in range(3)]
    for algo, want in [("mimic", {"server": 3, "client": 0}), ("mifa", {"server": 3, "client": 0})]:
        st = init_state(algo, np.zeros(1), 3)
        st = play_round(st, objs, [0, 1, 2], FULL_CFG, 0.1, rng_factory(30), full_batch=True).state
        assert memory_footprint(st) == want
