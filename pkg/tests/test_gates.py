import math

import numpy as np
import pytest

from retainkv.gates import (
    GateParams,
    ModelShape,
    cap_loss_global,
    cap_loss_global_grad,
    cap_loss_per_head,
    gate_forward,
    gate_forward_batch,
    init_gate_params,
    load_gates,
    quality_loss,
    save_gates,
    total_loss,
)

SHAPE = ModelShape(layers=2, heads=2, head_dim=4, gate_hidden=6, seq_len=16, vocab=12)


@pytest.fixture
def params(rng):
    return init_gate_params(SHAPE, d_in=8, rng=rng)


class TestGateForward:
    def test_zero_readout_gives_sigmoid_of_bias(self, params):
        params.wg[:] = 0.0
        for x in (np.zeros(8), np.ones(8), np.linspace(-3, 3, 8)):
            beta = gate_forward(x, 0, 0, params)
            assert beta == pytest.approx(0.999999984770020487, abs=1e-15)

    def test_large_negative_bias_clamps_to_zero(self, params):
        params.wg[:] = 0.0
        params.bg -= 800.0
        assert gate_forward(np.ones(8), 1, 1, params) == 0.0

    def test_matches_independent_reimplementation(self, rng, params):
        def oracle(x, l, h):
            hidden = [math.tanh(sum(params.w1[l, h][i, j] * x[j] for j in range(8))
                                + params.b1[l, h][i]) for i in range(6)]
            proj = [sum(params.w2[l, h][i, j] * hidden[j] for j in range(6))
                    + params.b2[l, h][i] for i in range(6)]
            u = sum(params.wg[i] * proj[i] for i in range(6)) + float(params.bg)
            return 1.0 / (1.0 + math.exp(-u))

        for _ in range(20):
            x = rng.normal(size=8)
            l, h = int(rng.integers(0, 2)), int(rng.integers(0, 2))
            assert gate_forward(x, l, h, params) == pytest.approx(oracle(x, l, h), rel=1e-12)

    def test_batch_matches_scalar(self, rng, params):
        xs = rng.normal(size=(5, 8))
        batch = gate_forward_batch(xs, 1, 0, params)
        for i in range(5):
            assert batch[i] == pytest.approx(gate_forward(xs[i], 1, 0, params), rel=1e-14)

    def test_heads_differ_only_through_projection(self, rng, params):
        x = rng.normal(size=8)
        params.w1[0, 1] = params.w1[0, 0]
        params.b1[0, 1] = params.b1[0, 0]
        params.w2[0, 1] = params.w2[0, 0]
        params.b2[0, 1] = params.b2[0, 0]
        assert gate_forward(x, 0, 0, params) == gate_forward(x, 0, 1, params)

    def test_init_invariant_all_betas_above_point999(self, rng, params):
        xs = rng.normal(size=(64, 8))
        for l in range(2):
            for h in range(2):
                assert np.all(gate_forward_batch(xs, l, h, params) > 0.999)


class TestQualityLoss:
    def test_equal_logits_one_hot_teacher(self):
        logits = np.array([[30.0, 0.0, 0.0], [0.0, 30.0, 0.0]])
        loss = quality_loss(logits, logits, [0, 1])
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_kl_term_vanishes_when_equal(self, rng):
        logits = rng.normal(size=(4, 6))
        targets = rng.integers(0, 6, size=4)
        loss = quality_loss(logits, logits, targets)
        # loss reduces to the pure NLL of the shared distribution
        log_q = logits - logits.max(1, keepdims=True)
        log_q = log_q - np.log(np.exp(log_q).sum(1, keepdims=True))
        nll = -log_q[np.arange(4), targets].mean()
        assert loss == pytest.approx(nll, rel=1e-12)

    def test_matches_direct_oracle(self, rng):
        for _ in range(20):
            p_logits = rng.normal(size=(2, 3))
            q_logits = rng.normal(size=(2, 3))
            targets = rng.integers(0, 3, size=2)

            def dist(z):
                e = [math.exp(v) for v in z]
                s = sum(e)
                return [v / s for v in e]

            want = 0.0
            for t in range(2):
                p = dist(p_logits[t])
                q = dist(q_logits[t])
                want += sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
                want += -math.log(q[targets[t]])
            want /= 2
            got = quality_loss(p_logits, q_logits, targets)
            assert got == pytest.approx(want, rel=1e-10)

    def test_nonfinite_rejected(self):
        bad = np.array([[np.inf, 0.0]])
        with pytest.raises(ValueError):
            quality_loss(bad, bad, [0])


class TestCapLoss:
    def test_all_zero_beta_costs_head_count(self):
        # each step contributes exactly one unit per head via the age-0 term
        betas = np.zeros((4, 5))
        assert cap_loss_global(betas, m_global=4.0) == 0.0
        assert cap_loss_global(betas, m_global=3.0) == pytest.approx(5.0)
        assert cap_loss_per_head(betas, 1.0) == 0.0

    def test_all_one_beta_worked_example(self):
        betas = np.ones((1, 3))
        # per-step masses 1, 2, 3 against budget 2
        assert cap_loss_global(betas, m_global=2.0) == pytest.approx(1.0)

    def test_infinite_budget_is_free(self, rng):
        betas = rng.random((4, 8))
        assert cap_loss_global(betas, m_global=np.inf) == 0.0

    def test_per_head_equals_global_for_one_head(self, rng):
        betas = rng.random((1, 6))
        assert cap_loss_per_head(betas, 2.0) == pytest.approx(cap_loss_global(betas, 2.0))

    def test_per_head_only_counts_over_budget_heads(self):
        betas = np.stack([np.ones(4), np.zeros(4)])
        # head 0 masses 1,2,3,4; head 1 masses all 1
        want = sum(max(0.0, m - 2.0) for m in (1, 2, 3, 4))
        assert cap_loss_per_head(betas, 2.0) == pytest.approx(want)

    def test_under_budget_is_zero(self, rng):
        betas = 0.1 * rng.random((2, 6))
        assert cap_loss_per_head(betas, 6.0) == 0.0
        assert cap_loss_global(betas, 12.0) == 0.0

    def test_grad_matches_finite_differences(self, rng):
        from retainkv.numerics import finite_diff_grad

        betas = rng.uniform(0.2, 0.95, size=(2, 5))
        m = 3.0
        _, grad = cap_loss_global_grad(betas, m)

        def f(flat):
            return cap_loss_global(flat.reshape(2, 5), m)

        fd = finite_diff_grad(f, betas.ravel()).reshape(2, 5)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)


class TestTotalLoss:
    def test_weighted_sum(self):
        assert total_loss(2.0, 3.0, 0.5) == pytest.approx(3.5)

    def test_zero_cap(self):
        assert total_loss(1.25, 0.0, 1.0) == 1.25

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            total_loss(1.0, 1.0, -0.1)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng, params):
        path = tmp_path / "gates.ckpt"
        save_gates(path, params)
        loaded = load_gates(path)
        for name, arr in params.tensors().items():
            assert np.array_equal(arr, loaded.tensors()[name]), name
        assert loaded.tied == params.tied
        assert loaded.activation == "tanh"
        assert loaded.gate_input == params.gate_input

    def test_round_trip_untied(self, tmp_path, rng):
        params = init_gate_params(SHAPE, d_in=8, rng=rng, tied=False, gate_input="kv")
        path = tmp_path / "untied.ckpt"
        save_gates(path, params)
        loaded = load_gates(path)
        assert not loaded.tied
        assert loaded.gate_input == "kv"
        assert np.array_equal(loaded.wg, params.wg)
        assert np.array_equal(loaded.bg, params.bg)

    def test_save_is_byte_deterministic(self, tmp_path, rng, params):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_gates(p1, params)
        save_gates(p2, params)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTAGATE" + b"\x00" * 32)
        with pytest.raises(ValueError):
            load_gates(path)
