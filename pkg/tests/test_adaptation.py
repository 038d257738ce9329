from __future__ import annotations

import numpy as np
import pytest

import lifecomp.adaptation as adaptation
from lifecomp.adaptation import (
    AdaptationStrategy,
    FisherFactors,
    ReplayBuffer,
    adapt_epoch,
    er_adapt_epoch,
    ewc_adapt_epoch,
    kfac_estimate,
    nft_adapt_epoch,
    store_task_memory,
)
from lifecomp.composition import (
    ComponentSet,
    GatingStructure,
    LinearStructure,
    OrderingStructure,
    TaskModel,
    batch_loss,
)
from lifecomp.numerics import Param, Tape

from conftest import finite_difference, grad_close


def make_linear(d=4, k=3, seed=0):
    rng = np.random.default_rng(seed)
    comps = ComponentSet("linear", d)
    for _ in range(k):
        comps.add_random(rng)
    s = LinearStructure(list(range(k)), init=rng.normal(size=k))
    model = TaskModel(tid=0, structure=s, loss_kind="mse")
    x = rng.normal(size=(8, d))
    y = rng.normal(size=8)
    return comps, model, x, y


def make_deep(k=3, dh=6, d=5, seed=0, structure="ordering", depths=None,
              fixed_order=None, tid=0):
    rng = np.random.default_rng(seed)
    depths = depths or k
    comps = ComponentSet("layer", dh)
    for _ in range(k):
        comps.add_random(rng)
    if fixed_order is not None:
        s = OrderingStructure(list(range(k)), depths=depths, fixed_order=fixed_order)
    elif structure == "ordering":
        s = OrderingStructure(list(range(k)), depths=depths,
                              logits=rng.normal(size=(k, depths)))
    else:
        s = GatingStructure(list(range(k)), depths=depths, hidden=dh, rng=rng)
    model = TaskModel(
        tid=tid, structure=s, loss_kind="binary-xent", e_kind="train",
        e_w=Param(rng.normal(scale=0.3, size=(dh, d))),
        e_b=Param(np.zeros(dh)),
        d_w=Param(rng.normal(scale=0.3, size=(1, dh))),
        d_b=Param(np.zeros(1)),
    )
    x = rng.normal(size=(10, d))
    y = rng.integers(0, 2, 10).astype(float)
    return comps, model, x, y


class TestReplayBuffer:
    def test_stores_exact_count_of_distinct_samples(self):
        rng = np.random.default_rng(0)
        buf = ReplayBuffer()
        x = np.arange(100, dtype=float)[:, None]
        y = np.arange(100, dtype=float)
        buf.store(3, x, y, 32, rng)
        xs, ys = buf.get(3)
        assert xs.shape[0] == 32
        assert len(np.unique(xs)) == 32  # without replacement

    def test_small_training_set_stores_all_with_warning(self):
        buf = ReplayBuffer()
        x = np.zeros((3, 2))
        y = np.zeros(3)
        with pytest.warns(UserWarning):
            buf.store(0, x, y, 5, np.random.default_rng(0))
        assert buf.get(0)[0].shape[0] == 3

    def test_write_once(self):
        buf = ReplayBuffer()
        buf.store(0, np.zeros((4, 2)), np.zeros(4), 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            buf.store(0, np.zeros((4, 2)), np.zeros(4), 2, np.random.default_rng(0))

    def test_contents_immutable(self):
        buf = ReplayBuffer()
        buf.store(0, np.ones((4, 2)), np.ones(4), 2, np.random.default_rng(0))
        before = buf.fingerprint()
        xs, _ = buf.get(0)
        with pytest.raises((ValueError, RuntimeError)):
            xs[0, 0] = 99.0
        assert buf.fingerprint() == before


class TestErEpoch:
    def test_visitation_covers_union_exactly_once(self):
        """Enumeration oracle: with 2 tasks, n_m=2, batch 2 (seed 19) the
        epoch must visit current-train union buffer exactly once, and the
        step count must match the hand-computed batch count."""
        comps, model0, _, _ = make_linear(seed=19)
        _, model1, _, _ = make_linear(seed=20)
        model1.tid = 1
        d = comps.dim
        # distinct tags in the first coordinate let us recover identity
        cur_x = np.zeros((4, d)); cur_x[:, 0] = [1, 2, 3, 4]
        cur_y = np.zeros(4)
        buf_x = np.zeros((2, d)); buf_x[:, 0] = [10, 11]
        buf_y = np.zeros(2)
        buf = ReplayBuffer()
        buf.store(0, buf_x, buf_y, 2, np.random.default_rng(19))
        visited = []
        orig = adaptation._component_step

        def spy(comps_, model_, xb, yb, *a, **kw):
            visited.extend(xb[:, 0].tolist())
            return orig(comps_, model_, xb, yb, *a, **kw)

        adaptation._component_step = spy
        try:
            steps = er_adapt_epoch(comps, {0: model0, 1: model1}, buf,
                                   tid=1, x=cur_x, y=cur_y, lr=0.01,
                                   batch_size=2, rng=np.random.default_rng(19))
        finally:
            adaptation._component_step = orig
        # 4 current samples -> 2 batches, 2 buffered -> 1 batch
        assert steps == 3
        assert sorted(visited) == [1, 2, 3, 4, 10, 11]

    def test_empty_buffer_matches_nft_bit_exactly(self):
        comps_a, model_a, x, y = make_linear(seed=5)
        comps_b, model_b, _, _ = make_linear(seed=5)
        er_adapt_epoch(comps_a, {0: model_a}, ReplayBuffer(), 0, x, y,
                       lr=0.05, batch_size=3, rng=np.random.default_rng(7))
        nft_adapt_epoch(comps_b, model_b, x, y, lr=0.05, batch_size=3,
                        rng=np.random.default_rng(7))
        assert comps_a.fingerprint() == comps_b.fingerprint()

    def test_empty_union_warns_and_is_noop(self):
        comps, model, _, _ = make_linear(seed=1)
        before = comps.fingerprint()
        with pytest.warns(UserWarning):
            steps = er_adapt_epoch(comps, {0: model}, ReplayBuffer(), 0,
                                   np.zeros((0, comps.dim)), np.zeros(0),
                                   lr=0.1)
        assert steps == 0
        assert comps.fingerprint() == before

    def test_zero_rate_is_noop(self):
        comps, model, x, y = make_linear(seed=2)
        before = comps.fingerprint()
        nft_adapt_epoch(comps, model, x, y, lr=0.0)
        assert comps.fingerprint() == before

    def test_structure_untouched_by_adaptation(self):
        comps, model, x, y = make_deep(seed=3)
        psi_before = model.structure.logits.value.copy()
        nft_adapt_epoch(comps, model, x, y, lr=0.05,
                        rng=np.random.default_rng(0))
        assert np.array_equal(model.structure.logits.value, psi_before)


class TestKfac:
    def test_single_layer_single_sample_input_moment_exact(self):
        # k=1, depth=1, one sample: A equals the outer product of the input
        comps, model, _, _ = make_deep(k=1, dh=4, d=4, seed=0,
                                       fixed_order=(0,), depths=1)
        model.e_kind = "identity"
        x = np.random.default_rng(1).normal(size=(1, 4))
        factors = kfac_estimate(comps, model, x, np.array([1.0]))
        A, _ = factors[0]
        assert np.max(np.abs(A - np.outer(x[0], x[0]))) < 1e-12

    def test_unvisited_component_gets_zero_factors(self):
        # hard ordering never routes through component 1
        comps, model, x, y = make_deep(k=2, seed=4, fixed_order=(0, 0))
        factors = kfac_estimate(comps, model, x, y)
        A1, B1 = factors[1]
        assert np.all(A1 == 0.0) and np.all(B1 == 0.0)

    @pytest.mark.parametrize("structure", ["ordering", "gating"])
    def test_factors_psd_over_seeds(self, structure):
        for seed in range(10):
            comps, model, x, y = make_deep(seed=seed, structure=structure)
            for A, B in kfac_estimate(comps, model, x, y).values():
                assert np.min(np.linalg.eigvalsh(A)) >= -1e-10
                assert np.min(np.linalg.eigvalsh(B)) >= -1e-10

    def test_linear_factors_psd(self):
        for seed in range(10):
            comps, model, x, y = make_linear(seed=seed)
            for A, B in kfac_estimate(comps, model, x, y).values():
                assert np.min(np.linalg.eigvalsh(A)) >= -1e-10
                assert B[0, 0] >= 0.0

    def test_empty_batch_rejected(self):
        comps, model, x, y = make_deep(seed=0)
        with pytest.raises(ValueError):
            kfac_estimate(comps, model, x[:0], y[:0])


class TestEwc:
    def _stored_factors(self, seed=23, tasks=2):
        comps, model0, x0, y0 = make_deep(seed=seed)
        ff = FisherFactors()
        models = {0: model0}
        data = {0: (x0, y0)}
        for t in range(tasks):
            _, m, x, y = make_deep(seed=seed + t, tid=t)
            m.structure.comp_ids = list(range(comps.k))
            models[t], data[t] = m, (x, y)
            ff.add_task(t, kfac_estimate(comps, m, x, y), comps)
            # drift the weights so the penalty is non-trivial
            for w in comps.weights:
                w.value += 0.01 * np.random.default_rng(seed + t).normal(size=w.value.shape)
        return comps, ff

    def test_penalty_gradient_matches_dense_oracle(self):
        """Random 2-task case (seed 23): the penalty gradient must equal the
        explicit sum A_i W_i B_i minus the anchor, computed by independent
        dense multiplication."""
        comps, ff = self._stored_factors(seed=23)
        grads = ff.penalty_grads(comps)
        for cid, g in grads.items():
            expect = np.zeros_like(g)
            for t in ff.per_task:
                A, B = ff.per_task[t][cid]
                W = comps.weights[cid].value
                Wt = ff.snapshots[t][cid]
                expect = expect + A @ W @ B - A @ Wt @ B
            assert np.max(np.abs(g - expect)) < 1e-10

    def test_penalty_zero_at_anchor(self):
        comps, model, x, y = make_deep(seed=6)
        ff = FisherFactors()
        ff.add_task(0, kfac_estimate(comps, model, x, y), comps)
        assert ff.penalty_value(comps, lam=1e-3) == 0.0
        for g in ff.penalty_grads(comps).values():
            assert np.max(np.abs(g)) < 1e-12

    def test_penalty_nonnegative_and_gradient_matches_value(self):
        comps, ff = self._stored_factors(seed=31)
        lam = 1e-3
        assert ff.penalty_value(comps, lam) >= 0.0
        params = list(comps.weights)

        def value():
            return ff.penalty_value(comps, lam)

        num = finite_difference(value, params)
        grads = ff.penalty_grads(comps)
        for p, n in zip(params, num):
            cid = comps.weights.index(p)
            assert grad_close(lam * grads[cid], n, rtol=1e-5, atol=1e-9)

    def test_lambda_zero_matches_nft_bit_exactly(self):
        comps_a, model_a, x, y = make_deep(seed=8)
        comps_b, model_b, _, _ = make_deep(seed=8)
        ff = FisherFactors()
        ff.add_task(0, kfac_estimate(comps_a, model_a, x, y), comps_a)
        # reset weights so both runs start identical
        for wa, wb in zip(comps_a.weights, comps_b.weights):
            wa.value = wb.value.copy()
        for ba, bb in zip(comps_a.biases, comps_b.biases):
            ba.value = bb.value.copy()
        ewc_adapt_epoch(comps_a, model_a, ff, x, y, lr=0.05, lam=0.0,
                        rng=np.random.default_rng(3))
        nft_adapt_epoch(comps_b, model_b, x, y, lr=0.05,
                        rng=np.random.default_rng(3))
        assert comps_a.fingerprint() == comps_b.fingerprint()

    def test_negative_lambda_rejected(self):
        comps, model, x, y = make_deep(seed=9)
        with pytest.raises(ValueError):
            ewc_adapt_epoch(comps, model, FisherFactors(), x, y, lr=0.1, lam=-1.0)

    def test_penalty_pulls_toward_anchor(self):
        comps, model, x, y = make_deep(seed=10)
        ff = FisherFactors()
        ff.add_task(0, kfac_estimate(comps, model, x, y), comps)
        for w in comps.weights:
            w.value += 0.1
        before = ff.penalty_value(comps, lam=1.0)
        # pure penalty descent (no data term): step along -grad
        for _ in range(20):
            grads = ff.penalty_grads(comps)
            for cid, g in grads.items():
                comps.weights[cid].value -= 0.5 * g
        assert ff.penalty_value(comps, lam=1.0) < before


class TestStrategyState:
    def test_nft_stores_nothing(self):
        comps, model, x, y = make_linear(seed=1)
        s = AdaptationStrategy("nft")
        store_task_memory(s, comps, model, 0, x, y, np.random.default_rng(0))
        assert len(s.buffer) == 0 and not s.factors.per_task

    def test_er_store_contract(self):
        comps, model, x, y = make_linear(seed=1)
        s = AdaptationStrategy("er", n_m=4)
        store_task_memory(s, comps, model, 0, x, y, np.random.default_rng(0))
        assert s.buffer.get(0)[0].shape[0] == 4

    def test_ewc_anchor_matches_direct_recomputation(self):
        comps, model, x, y = make_deep(seed=11)
        s = AdaptationStrategy("ewc")
        store_task_memory(s, comps, model, 0, x, y, np.random.default_rng(0))
        for cid, (A, B) in s.factors.per_task[0].items():
            expect = A @ s.factors.snapshots[0][cid] @ B
            assert np.max(np.abs(s.factors.anchor[cid] - expect)) < 1e-12

    def test_fm_leaves_components_bit_identical(self):
        comps, model, x, y = make_deep(seed=12)
        s = AdaptationStrategy("fm")
        before = comps.fingerprint()
        adapt_epoch(s, comps, {0: model}, 0, x, y, lr=0.1,
                    rng=np.random.default_rng(0))
        assert comps.fingerprint() == before

    def test_unknown_tag_rejected(self):
        with pytest.raises(ValueError):
            AdaptationStrategy("dropall")


class TestCandidateAlternation:
    def test_two_steps_per_batch_and_candidate_isolation(self):
        comps, model, x, y = make_deep(k=3, seed=13)
        cand = comps.add_random(np.random.default_rng(1))
        model.structure.add_component(cand)
        masked_snapshots = []
        orig = adaptation._component_step

        def spy(comps_, model_, xb, yb, lr, mask, *a, **kw):
            before = comps_.weights[cand].value.copy()
            orig(comps_, model_, xb, yb, lr, mask, *a, **kw)
            if mask == cand:
                masked_snapshots.append(
                    np.array_equal(before, comps_.weights[cand].value))

        adaptation._component_step = spy
        try:
            steps = nft_adapt_epoch(comps, model, x, y, lr=0.05, batch_size=5,
                                    rng=np.random.default_rng(2), candidate=cand)
        finally:
            adaptation._component_step = orig
        assert steps == 4  # 2 batches x (unmasked + masked)
        # the masked steps must never move the candidate
        assert masked_snapshots and all(masked_snapshots)


class TestConvergence:
    def test_nft_loss_decreases_on_separable_task(self):
        rng = np.random.default_rng(29)
        d = 4
        comps = ComponentSet("linear", d)
        for _ in range(2):
            comps.add_random(rng)
        s = LinearStructure([0, 1], init=rng.normal(size=2))
        model = TaskModel(tid=0, structure=s, loss_kind="binary-xent")
        w_true = rng.normal(size=d)
        x = rng.normal(size=(64, d))
        y = (x @ w_true > 0).astype(float)

        def loss():
            return float(batch_loss(Tape(), comps, model, x, y).value)

        before = loss()
        for _ in range(10):
            nft_adapt_epoch(comps, model, x, y, lr=0.5, batch_size=16,
                            rng=np.random.default_rng(29))
        assert loss() < before
