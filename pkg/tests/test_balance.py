import csv
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from turbotrain.balance import (
    BALANCED,
    FREE,
    BalanceSchedule,
    StepRecord,
    TrainConfig,
    TrainingDiverged,
    batch_losses,
    conflict_delta,
    diagnose_conflicts,
    hybrid_combine,
    parse_balance,
    suppress_conflict,
    train_run,
    train_step,
    write_step_log,
)
from turbotrain.gradcore import Graph, backward
from turbotrain.model import DET_PREFIX, PRED_PREFIX, SceneTensors, bind, head_names, init_params, shared_names
from turbotrain.optim import AdamW, OptimizerConfig
from turbotrain.scene import derive_seed
from conftest import MINI
from oracles import naive_dot


def _random_pair(rng):
    dim = int(rng.integers(1, 4097))
    a = rng.normal(size=dim) * 10 ** rng.uniform(-2, 2)
    b = rng.normal(size=dim) * 10 ** rng.uniform(-2, 2)
    if dim > 1 and rng.uniform() < 0.5:
        # pull toward a strong conflict or agreement so both branches get exercised
        b = b + rng.choice([-1.0, 1.0]) * a * float(np.linalg.norm(b) / np.linalg.norm(a))
    return a, b


def test_surgery_exactness_on_random_pairs():
    rng = np.random.default_rng(51)
    t0 = time.perf_counter()
    n_conflict = 0
    for _ in range(1000):
        gi, gj = _random_pair(rng)
        out = suppress_conflict(gi, gj)
        delta = float(np.dot(gi, gj))
        if delta >= 0:
            assert np.array_equal(out, gi + gj)
        else:
            n_conflict += 1
            nn = float(np.dot(gj, gj))
            assert abs(float(np.dot(out, gj)) - nn) <= 1e-9 * nn
            alt = (gi - (delta / nn) * gj) + gj
            assert np.max(np.abs(out - alt)) <= 1e-12 * max(1.0, np.max(np.abs(out)))
    assert time.perf_counter() - t0 < 5.0
    assert 200 < n_conflict < 800


def test_conflict_delta_examples_and_oracle():
    assert conflict_delta(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    assert conflict_delta(np.array([1.0, 0.0]), np.array([-1.0, 1.0])) == -1.0
    rng = np.random.default_rng(52)
    for _ in range(200):
        n = int(rng.integers(1, 500))
        # integer-valued vectors: every partial sum is exact, so any order agrees
        a, b = rng.integers(-1000, 1000, n).astype(float), rng.integers(-1000, 1000, n).astype(float)
        assert conflict_delta(a, b) == naive_dot(a, b)
    with pytest.raises(ValueError):
        conflict_delta(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        conflict_delta(np.ones((2, 2)), np.ones((2, 2)))


def test_suppress_examples():
    assert np.array_equal(suppress_conflict(np.array([1.0, 0.0]), np.array([1.0, 0.0])), [2.0, 0.0])
    assert np.array_equal(suppress_conflict(np.array([1.0, 0.0]), np.array([0.0, 1.0])), [1.0, 1.0])
    assert np.allclose(suppress_conflict(np.array([1.0, 0.0]), np.array([-1.0, 1.0])), [-0.5, 1.5], atol=1e-15)


def test_vanishing_partner_is_non_conflicting():
    gi = np.array([1e3, -2e3])
    gj = np.array([-1e-8, 0.0])  # |gj|^2 = 1e-16 < floor, delta < 0
    assert np.array_equal(suppress_conflict(gi, gj), gi + gj)


def test_symmetric_variant():
    gi, gj = np.array([1.0, 0.0]), np.array([-1.0, 1.0])
    out = suppress_conflict(gi, gj, symmetric=True)
    # each projected off the other, then summed
    pi = gi - (-1.0 / 2.0) * gj
    pj = gj - (-1.0 / 1.0) * gi
    assert np.allclose(out, pi + pj, atol=1e-15)
    assert np.array_equal(suppress_conflict(gi, -gj, symmetric=True), gi - gj)


_vec = st.lists(st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False), min_size=1, max_size=16)


@settings(max_examples=300, deadline=None)
@given(_vec, st.data(), st.floats(1e-3, 1e3))
def test_positive_homogeneity(a, data, c):
    b = data.draw(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=len(a), max_size=len(a)))
    gi, gj = np.array(a), np.array(b)
    lhs = suppress_conflict(c * gi, c * gj)
    rhs = c * suppress_conflict(gi, gj)
    scale = max(1.0, float(np.max(np.abs(rhs))), c * float(np.max(np.abs(gi)) + np.max(np.abs(gj))))
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * scale


@settings(max_examples=300, deadline=None)
@given(_vec, st.data())
def test_alignment_property(a, data):
    b = data.draw(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=len(a), max_size=len(a)))
    gi, gj = np.array(a), np.array(b)
    delta, nn = float(np.dot(gi, gj)), float(np.dot(gj, gj))
    out = suppress_conflict(gi, gj)
    if delta < 0 and nn >= 1e-12:
        err = abs(float(np.dot(out, gj)) - nn)
        assert err <= 1e-9 * (nn + abs(delta) + np.linalg.norm(out) * np.linalg.norm(gj))


@pytest.mark.parametrize("n,m", [(2000, 1000), (0, 1), (3, 2)])
def test_schedule_phase_sequence_exhaustive(n, m):
    t0 = time.perf_counter()
    s = BalanceSchedule(n, m)
    seq = []
    for _ in range(3 * (n + m)):
        seq.append(s.phase)
        s = s.advance()
    assert time.perf_counter() - t0 < 1.0
    for c in range(3):
        block = seq[c * (n + m):(c + 1) * (n + m)]
        assert block == [FREE] * n + [BALANCED] * m
    # any window of n+m consecutive steps
    for start in range(0, 2 * (n + m) + 1, max(1, (n + m) // 7)):
        window = seq[start:start + n + m]
        assert window.count(FREE) == n and window.count(BALANCED) == m


def test_schedule_examples_and_validation():
    s = BalanceSchedule(2, 1)
    g1, g2 = np.array([1.0, 0.0]), np.array([-1.0, 1.0])
    outs = []
    for _ in range(3):
        out, s = hybrid_combine(s, g1, g2)
        outs.append(out)
    assert np.array_equal(outs[0], [0.0, 1.0]) and np.array_equal(outs[1], [0.0, 1.0])
    assert np.allclose(outs[2], [-0.5, 1.5])
    assert s.step == 3
    assert [BalanceSchedule(1, 2, k).cycle_pos for k in range(6)] == [0, 1, 2, 0, 1, 2]
    assert all(BalanceSchedule(0, 3, k).phase == BALANCED for k in range(9))
    for bad in ((-1, 1), (1, -1), (0, 0)):
        with pytest.raises(ValueError):
            BalanceSchedule(*bad)
    with pytest.raises(ValueError):
        hybrid_combine(BalanceSchedule(1, 0), np.ones(2), np.ones(3))


def test_parse_balance():
    assert parse_balance("2000,1000") == (2000, 1000)
    assert parse_balance(" 3 , 2") == (3, 2)
    for bad in ("3", "a,b", "0,0", "1,2,3", "-1,2"):
        with pytest.raises(ValueError):
            parse_balance(bad)


# ---------------------------------------------------------------- training


def _plain_training(scenes, params, tcfg):
    """Reference joint training written from scratch: summed loss, AdamW."""
    params = {k: np.array(v) for k, v in params.items()}
    n_batches = math.ceil(len(scenes) / tcfg.batch_size)
    opt = AdamW(params, tcfg.optimizer, total_steps=tcfg.epochs * n_batches)
    rng = np.random.default_rng(derive_seed(tcfg.seed, 3))
    for _ in range(tcfg.epochs):
        order = rng.permutation(len(scenes))
        for b in range(n_batches):
            idx = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
            g = Graph()
            pn = bind(g, params)
            ld, lp = batch_losses(g, pn, [scenes[i] for i in idx], MINI)
            gm = backward(g, g.add(ld, lp))
            opt.step({k: gm[pn[k]] for k in params})
    return params


def test_all_free_schedule_equals_plain_training_bitwise(mini_scenes):
    init = init_params(MINI, 3)
    tcfg = TrainConfig(epochs=2, batch_size=2, seed=4)
    ref = _plain_training(mini_scenes, init, tcfg)
    total = 2 * 2
    for balance in (None, (total, 0)):
        got, recs = train_run(mini_scenes, init, MINI, TrainConfig(2, 2, tcfg.optimizer, balance, False, 4))
        assert all(r.phase == FREE for r in recs)
        assert all(np.array_equal(got[k], ref[k]) for k in ref)


def test_train_run_does_not_mutate_input(mini_scenes):
    init = init_params(MINI, 3)
    copy = {k: v.copy() for k, v in init.items()}
    train_run(mini_scenes[:2], init, MINI, TrainConfig(epochs=1, batch_size=2, balance=(0, 1)))
    assert all(np.array_equal(init[k], copy[k]) for k in init)


def _task_grads(params, batch):
    g = Graph()
    pn = bind(g, params)
    ld, lp = batch_losses(g, pn, batch, MINI)
    return pn, backward(g, ld), backward(g, lp)


def test_balanced_step_combines_shared_and_isolates_heads(mini_scenes):
    hits = {"conflict": 0, "agree": 0}
    for k in range(12):
        rng = np.random.default_rng(k)
        params = {n: v + rng.normal(scale=0.1, size=v.shape) for n, v in init_params(MINI, k).items()}
        batch = [mini_scenes[k % 4], mini_scenes[(k + 1) % 4]]
        grads, rec, nxt = train_step(params, batch, MINI, BalanceSchedule(0, 1))
        assert rec.phase == BALANCED and nxt.step == 1
        pn, gd, gp = _task_grads(params, batch)
        shared = shared_names(params)
        g_det = np.concatenate([gd[pn[n]].ravel() for n in shared])
        g_pred = np.concatenate([gp[pn[n]].ravel() for n in shared])
        combined = np.concatenate([grads[n].ravel() for n in shared])
        delta = naive_dot(g_det, g_pred)
        nn = naive_dot(g_pred, g_pred)
        assert rec.delta == pytest.approx(delta, rel=1e-9, abs=1e-15)
        if delta < 0:
            hits["conflict"] += 1
            assert abs(naive_dot(combined, g_pred) - nn) <= 1e-9 * nn
            assert abs(rec.combined_dot_pred - nn) <= 1e-9 * nn
        else:
            hits["agree"] += 1
            # same as plain training on this step
            free, _, _ = train_step(params, batch, MINI, BalanceSchedule(1, 0))
            assert all(np.allclose(grads[n], free[n], rtol=1e-12, atol=1e-15) for n in shared)
        for n in head_names(params, DET_PREFIX):
            assert np.array_equal(grads[n], gd[pn[n]])
        for n in head_names(params, PRED_PREFIX):
            assert np.array_equal(grads[n], gp[pn[n]])
    assert hits["conflict"] > 0 and hits["agree"] > 0


def test_step_log_alignment_over_a_run(mini_scenes, tmp_path):
    _, recs = train_run(mini_scenes, init_params(MINI, 5), MINI, TrainConfig(epochs=3, batch_size=1, balance=(1, 2)))
    assert [r.step for r in recs] == list(range(12))
    assert [r.phase for r in recs[:6]] == [FREE, BALANCED, BALANCED] * 2
    for r in recs:
        if r.phase == BALANCED and r.delta < 0:
            assert abs(r.combined_dot_pred - r.norm_pred ** 2) <= 1e-9 * r.norm_pred ** 2
        if r.phase == FREE:
            assert r.delta is None
    write_step_log(tmp_path / "steps.csv", recs)
    rows = list(csv.DictReader(open(tmp_path / "steps.csv")))
    assert len(rows) == 12 and rows[0]["phase"] == FREE and rows[0]["delta"] == ""
    assert float(rows[1]["loss_det"]) == recs[1].loss_det


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_record(mini_scenes):
    st = next(s for s in mini_scenes if len(s.pos_cells) > 1)
    bad = SceneTensors(st.scene_id, st.feats, st.occupied, st.frame_points, st.pos_cells,
                       np.full_like(st.box_targets, 1e308), st.traj_targets)
    with pytest.raises(TrainingDiverged) as exc:
        train_run([bad], init_params(MINI, 0), MINI, TrainConfig(epochs=1, batch_size=1))
    assert exc.value.record.step == 0
    assert not math.isfinite(exc.value.record.loss_det)


def test_diagnose_conflicts(mini_scenes):
    params = init_params(MINI, 6)
    before = {k: v.copy() for k, v in params.items()}
    recs = diagnose_conflicts(params, mini_scenes, MINI, steps=10, batch_size=2)
    assert len(recs) == 10
    assert all(np.array_equal(before[k], params[k]) for k in params)
    for r in recs:
        assert r.phase == "diagnose"
        assert all(math.isfinite(v) for v in (r.delta, r.norm_det, r.norm_pred, r.cosine))
        assert -1.0 <= r.cosine <= 1.0
        assert np.sign(r.cosine) == np.sign(r.delta)
    with pytest.raises(ValueError):
        diagnose_conflicts(params, [], MINI, 1)


def test_train_config_validation(mini_scenes):
    with pytest.raises(ValueError):
        train_run(mini_scenes, init_params(MINI, 0), MINI, TrainConfig(balance=(0, 0)))
    with pytest.raises(ValueError):
        train_run([], init_params(MINI, 0), MINI, TrainConfig())
    with pytest.raises(ValueError):
        train_run(mini_scenes, init_params(MINI, 0), MINI, TrainConfig(batch_size=0))
    assert StepRecord(0, FREE, None, None, None, None, 1.0, 2.0).csv_row()["delta"] == ""
