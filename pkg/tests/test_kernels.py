import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsa.kernels import (
    LOG_GATE_FLOOR,
    ChunkSpec,
    GateSide,
    KernelInput,
    abc_fwd,
    abc_recurrent,
    abc_two_pass,
    abc_write_strengths,
    abc_write_strengths_bwd,
    chunk_cumsum,
    final_state,
    gla_chunkwise_bwd,
    gla_chunkwise_fwd,
    gla_recurrent,
    gsa_bwd,
    gsa_fwd,
    gsa_recurrent,
    gsa_recurrent_bwd,
    la_recurrent,
    link_bwd,
    link_fwd,
    retnet_style_decay,
    softmax_attention_ref,
)
from gsa.tensor import ConfigError, DimensionError, Rng, cumsum, softmax_rows


def inputs(seed, T=12, d=4, m=3, dv=None, gate_low=0.5):
    return KernelInput.random(Rng.for_stream(seed, 99), T, d, dv or d, m, gate_low=gate_low)


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        a = f()
        x[i] = old - h
        b = f()
        x[i] = old
        g[i] = (a - b) / (2 * h)
    return g


def rel(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


class TestTypes:
    def test_chunk_spec_defaults(self):
        assert ChunkSpec().chunk_size == 64
        assert ChunkSpec(64).sub_chunk_size == 16
        assert ChunkSpec(8).sub_chunk_size == 8
        assert ChunkSpec(24).sub_chunk_size == 8

    def test_chunk_spec_validation(self):
        with pytest.raises(ConfigError):
            ChunkSpec(0)
        with pytest.raises(ConfigError):
            ChunkSpec(8, 3)

    def test_chunk_bounds_ragged(self):
        assert list(ChunkSpec(4).bounds(10)) == [(0, 4), (4, 8), (8, 10)]

    def test_kernel_input_validation(self):
        x = inputs(0)
        with pytest.raises(DimensionError):
            KernelInput(x.q, x.k[:5], x.v, x.log_gate)
        with pytest.raises(ConfigError):
            KernelInput(x.q, x.k, x.v, -x.log_gate + 0.1)


class TestSoftmaxReference:
    def test_single_token(self):
        x = inputs(1, T=1)
        assert np.allclose(softmax_attention_ref(x.q, x.k, x.v), x.v, atol=1e-15)

    def test_causality(self):
        x = inputs(2, T=6)
        o = softmax_attention_ref(x.q, x.k, x.v)
        k, v = x.k.copy(), x.v.copy()
        k[-1] += 3.0
        v[-1] -= 2.0
        assert np.array_equal(softmax_attention_ref(x.q, k, v)[:-1], o[:-1])

    def test_per_position_loop(self):
        rng = Rng(11)
        q, k, v = rng.normal((3, 2)), rng.normal((3, 2)), rng.normal((3, 2))
        ref = np.zeros((3, 2))
        for t in range(3):
            s = np.array([q[t] @ k[j] / np.sqrt(2) for j in range(t + 1)])
            w = np.exp(s - s.max())
            ref[t] = (w / w.sum()) @ v[:t + 1]
        out = softmax_attention_ref(q, k, v)
        assert np.max(np.abs(out - ref) / np.abs(ref)) <= 1e-12


class TestLinearAttention:
    def test_single_step(self):
        x = inputs(3, T=1)
        o, _ = la_recurrent(x.q, x.k, x.v)
        assert np.allclose(o[0], (x.k[0] @ x.q[0]) * x.v[0], rtol=1e-15)

    def test_zero_query(self):
        x = inputs(3)
        o, _ = la_recurrent(np.zeros_like(x.q), x.k, x.v)
        assert not o.any()

    def test_masked_parallel_form(self):
        x = inputs(5, T=8)
        o, _ = la_recurrent(x.q, x.k, x.v)
        ref = np.tril(x.q @ x.k.T) @ x.v
        assert np.abs(o - ref).max() <= 1e-12


class TestGla:
    @pytest.mark.parametrize("side", list(GateSide))
    def test_unit_gates_reduce_to_la(self, side):
        x = inputs(6)
        width = x.k.shape[1] if side is GateSide.KEY else x.v.shape[1]
        o, _ = gla_recurrent(x.q, x.k, x.v, np.zeros((12, width)), side)
        ref, _ = la_recurrent(x.q, x.k, x.v)
        assert np.abs(o - ref).max() <= 1e-12

    def test_memoryless(self):
        x = inputs(7)
        o, _ = gla_recurrent(x.q, x.k, x.v, np.full((12, 4), -1e4), GateSide.KEY)
        ref = np.sum(x.q * x.k, axis=1, keepdims=True) * x.v
        assert np.abs(o - ref).max() <= 1e-12

    @pytest.mark.parametrize("side", list(GateSide))
    def test_unrolled_sum(self, side):
        x = inputs(8, T=6, dv=5)
        rng = Rng(8)
        width = 4 if side is GateSide.KEY else 5
        g = np.log(rng.uniform((6, width), 0.3, 1.0))
        o, _ = gla_recurrent(x.q, x.k, x.v, g, side)
        for t in range(6):
            S = np.zeros((4, 5))
            for i in range(t + 1):
                decay = np.exp(g[i + 1:t + 1].sum(0))
                outer = np.outer(x.k[i], x.v[i])
                S += decay[:, None] * outer if side is GateSide.KEY else outer * decay[None, :]
            assert np.abs(o[t] - S.T @ x.q[t]).max() <= 1e-12

    def test_gate_width_mismatch(self):
        x = inputs(9)
        with pytest.raises(DimensionError):
            gla_recurrent(x.q, x.k, x.v, np.zeros((12, 7)), GateSide.KEY)
        with pytest.raises(DimensionError):
            gla_chunkwise_fwd(x.q, x.k, x.v, np.zeros((12, 7)), GateSide.VALUE, ChunkSpec(4))


class TestChunkCumsum:
    def test_single_chunk_is_global(self):
        g = np.log(Rng(1).uniform((10, 3), 0.2, 1.0))
        assert np.array_equal(chunk_cumsum(g, ChunkSpec(16)), np.cumsum(g, 0))

    def test_unit_gates(self):
        assert not chunk_cumsum(np.zeros((9, 2)), ChunkSpec(4)).any()

    def test_loop_oracle(self):
        g = np.log(Rng(2).uniform((12, 3), 0.2, 1.0))
        out = chunk_cumsum(g, ChunkSpec(4))
        ref = np.zeros_like(g)
        for t in range(12):
            acc = np.zeros(3)
            for j in range(t - t % 4, t + 1):
                acc = acc + g[j]
            ref[t] = acc
        assert np.array_equal(out, ref)


class TestGlaChunkwise:
    @pytest.mark.parametrize("side", list(GateSide))
    @pytest.mark.parametrize("T,C,tol", [(16, 1, 1e-12), (16, 16, 1e-12), (37, 8, 1e-11), (37, 3, 1e-11),
                                         (50, 32, 1e-11)])
    def test_matches_recurrent(self, side, T, C, tol):
        rng = Rng.for_stream(T, C)
        q, k, v = rng.normal((T, 4)), rng.normal((T, 4)), rng.normal((T, 5))
        g = np.log(rng.uniform((T, 4 if side is GateSide.KEY else 5), 0.4, 1.0))
        o, states = gla_chunkwise_fwd(q, k, v, g, side, ChunkSpec(C))
        ref, S = gla_recurrent(q, k, v, g, side)
        assert np.abs(o - ref).max() <= tol
        assert np.abs(states[-1] - S).max() <= tol

    def test_sub_chunk_choice_is_irrelevant(self):
        rng = Rng(4)
        q, k, v = rng.normal((40, 4)), rng.normal((40, 4)), rng.normal((40, 4))
        g = np.log(rng.uniform((40, 4), 0.3, 1.0))
        outs = [gla_chunkwise_fwd(q, k, v, g, GateSide.KEY, ChunkSpec(16, c))[0] for c in (1, 2, 4, 8, 16)]
        for o in outs[1:]:
            assert np.abs(o - outs[0]).max() <= 1e-12

    def test_long_chunk_strong_decay_stays_finite(self):
        # cumulative log gates reach about -60 * 64 inside one chunk
        rng = Rng(5)
        q, k, v = rng.normal((64, 4)), rng.normal((64, 4)), rng.normal((64, 4))
        g = np.full((64, 4), -60.0)
        o, _ = gla_chunkwise_fwd(q, k, v, g, GateSide.KEY, ChunkSpec(64))
        ref, _ = gla_recurrent(q, k, v, g, GateSide.KEY)
        assert np.all(np.isfinite(o))
        assert np.abs(o - ref).max() <= 1e-12

    def test_initial_state_continues_a_sequence(self):
        rng = Rng(6)
        q, k, v = rng.normal((20, 3)), rng.normal((20, 3)), rng.normal((20, 3))
        g = np.log(rng.uniform((20, 3), 0.5, 1.0))
        full, _ = gla_chunkwise_fwd(q, k, v, g, GateSide.VALUE, ChunkSpec(4))
        first, st = gla_chunkwise_fwd(q[:8], k[:8], v[:8], g[:8], GateSide.VALUE, ChunkSpec(4))
        second, _ = gla_chunkwise_fwd(q[8:], k[8:], v[8:], g[8:], GateSide.VALUE, ChunkSpec(4), initial_state=st[-1])
        assert np.abs(np.concatenate([first, second]) - full).max() <= 1e-12

    def test_batched_equals_looped(self):
        rng = Rng(7)
        q, k, v = rng.normal((2, 3, 10, 4)), rng.normal((2, 3, 10, 4)), rng.normal((2, 3, 10, 4))
        g = np.log(rng.uniform((2, 3, 10, 4), 0.5, 1.0))
        o, _ = gla_chunkwise_fwd(q, k, v, g, GateSide.KEY, ChunkSpec(4))
        for i in np.ndindex(2, 3):
            ref, _ = gla_recurrent(q[i], k[i], v[i], g[i], GateSide.KEY)
            assert np.abs(o[i] - ref).max() <= 1e-12

    @pytest.mark.parametrize("side", list(GateSide))
    def test_backward_zero_upstream(self, side):
        rng = Rng(8)
        q, k, v = rng.normal((9, 3)), rng.normal((9, 3)), rng.normal((9, 3))
        g = np.log(rng.uniform((9, 3), 0.5, 1.0))
        grads = gla_chunkwise_bwd(q, k, v, g, np.zeros((9, 3)), side, ChunkSpec(4))
        assert all(not a.any() for a in grads)

    @pytest.mark.parametrize("side", list(GateSide))
    @pytest.mark.parametrize("C", [1, 4, 16, 5])
    def test_backward_finite_differences(self, side, C):
        rng = Rng.for_stream(9, C)
        T = 16
        q, k, v = rng.normal((T, 4)), rng.normal((T, 4)), rng.normal((T, 3))
        g = np.log(rng.uniform((T, 4 if side is GateSide.KEY else 3), 0.4, 1.0))
        w = rng.normal((T, 3))
        spec = ChunkSpec(C)

        def f():
            return float((gla_chunkwise_fwd(q, k, v, g, side, spec)[0] * w).sum())

        dq, dk, dv, part = gla_chunkwise_bwd(q, k, v, g, w, side, spec)
        dg = cumsum(part, reversed=True)
        for analytic, x in ((dq, q), (dk, k), (dv, v), (dg, g)):
            assert rel(analytic, fd_grad(f, x)) <= 1e-5

    def test_backward_unit_gates_match_parallel_la(self):
        rng = Rng(10)
        T = 10
        q, k, v, w = rng.normal((T, 4)), rng.normal((T, 4)), rng.normal((T, 3)), rng.normal((T, 3))
        dq, dk, dv, _ = gla_chunkwise_bwd(q, k, v, np.zeros((T, 4)), w, GateSide.KEY, ChunkSpec(4))
        # O = tril(Q K^T) V
        dP = np.tril(w @ v.T)
        assert np.abs(dq - dP @ k).max() <= 1e-12
        assert np.abs(dk - dP.T @ q).max() <= 1e-12
        assert np.abs(dv - np.tril(q @ k.T).T @ w).max() <= 1e-12

    def test_causality(self):
        rng = Rng(11)
        q, k, v = rng.normal((12, 3)), rng.normal((12, 3)), rng.normal((12, 3))
        g = np.log(rng.uniform((12, 3), 0.5, 1.0))
        o, _ = gla_chunkwise_fwd(q, k, v, g, GateSide.VALUE, ChunkSpec(4))
        k2, g2 = k.copy(), g.copy()
        k2[7] += 1.0
        g2[7] -= 0.3
        o2, _ = gla_chunkwise_fwd(q, k2, v, g2, GateSide.VALUE, ChunkSpec(4))
        assert np.array_equal(o[:7], o2[:7])


class TestAbc:
    def test_first_write_is_full(self):
        phi = abc_write_strengths(Rng(1).normal((10, 4)) * 20)
        assert np.array_equal(phi[0], np.ones(4))

    def test_constant_pre_gate(self):
        phi = abc_write_strengths(np.full((6, 2), 0.7))
        ref = 1.0 / np.arange(1, 7)[:, None]
        assert np.abs(phi - ref).max() <= 1e-15

    def test_direct_evaluation(self):
        pre = Rng(2).normal((10, 4))
        e = np.exp(pre)
        ref = e / np.cumsum(e, 0)
        assert np.max(np.abs(abc_write_strengths(pre) - ref) / ref) <= 1e-12

    def test_extreme_pre_gates_are_stable(self):
        pre = np.array([[0.0], [800.0], [-800.0], [900.0]])
        phi = abc_write_strengths(pre)
        assert np.all(np.isfinite(phi))
        assert phi[1, 0] == pytest.approx(1.0)

    def test_write_strength_backward(self):
        rng = Rng(3)
        pre, w = rng.normal((9, 3)), rng.normal((9, 3))

        def f():
            return float((abc_write_strengths(pre) * w).sum())

        dpre = abc_write_strengths_bwd(pre, abc_write_strengths(pre), w)
        assert rel(dpre, fd_grad(f, pre)) <= 1e-8

    def test_first_step_memory_copies_the_key(self):
        x = inputs(4, T=1, m=5)
        phi = abc_write_strengths(Rng(4).normal((1, 5)))
        o = abc_recurrent(x.q, x.k, x.v, phi)
        # every slot holds k1 and v1, so the read returns v1 whatever the scores
        assert np.abs(o[0] - x.v[0]).max() <= 1e-15

    def test_single_slot(self):
        x = inputs(5, T=8, m=1)
        phi = abc_write_strengths(Rng(5).normal((8, 1)))
        o = abc_recurrent(x.q, x.k, x.v, phi)
        assert np.abs(o - np.cumsum(phi * x.v, 0)).max() <= 1e-13

    def test_two_pass(self):
        x = inputs(6, T=8)
        phi = abc_write_strengths(Rng(6).normal((8, 3)))
        assert np.abs(abc_two_pass(x.q, x.k, x.v, phi) - abc_recurrent(x.q, x.k, x.v, phi)).max() <= 1e-12

    def test_chunkwise(self):
        x = inputs(7, T=37)
        phi = abc_write_strengths(Rng(7).normal((37, 3)))
        o, _ = abc_fwd(x.q, x.k, x.v, phi, ChunkSpec(8))
        assert np.abs(o - abc_recurrent(x.q, x.k, x.v, phi)).max() <= 1e-11

    def test_slot_scores_normalised(self):
        x = inputs(8, T=8)
        phi = abc_write_strengths(Rng(8).normal((8, 3)))
        ok, _ = la_recurrent(x.q, x.k, phi)
        p = softmax_rows(ok)
        assert np.all(np.abs(p.sum(-1) - 1) <= 8 * np.finfo(float).eps)


class TestGsa:
    def test_single_token(self):
        x = inputs(1, T=1)
        o, _ = gsa_fwd(x.q, x.k, x.v, x.log_gate, spec=ChunkSpec(4))
        a = np.exp(x.log_gate[0])
        K, V = np.outer(1 - a, x.k[0]), np.outer(1 - a, x.v[0])
        assert np.abs(o[0] - V.T @ softmax_rows((K @ x.q[0])[None])[0]).max() <= 1e-15

    def test_single_slot(self):
        x = inputs(2, T=10, m=1)
        o, state = gsa_recurrent(x.q, x.k, x.v, x.log_gate)
        a = np.exp(x.log_gate)
        V = np.zeros(4)
        for t in range(10):
            V = a[t] * V + (1 - a[t]) * x.v[t]
            assert np.array_equal(o[t], V)
        assert np.array_equal(state.v_mem[0], V)

    def test_vanishing_gates_return_current_value(self):
        x = inputs(3)
        g = np.full_like(x.log_gate, -1e3)
        o, _ = gsa_recurrent(x.q, x.k, x.v, g)
        assert np.abs(o - x.v).max() <= 1e-9
        oc, _ = gsa_fwd(x.q, x.k, x.v, g, spec=ChunkSpec(4))
        assert np.abs(oc - x.v).max() <= 1e-9

    @pytest.mark.parametrize("C", [1, 4, 12])
    def test_chunk_size_invariance(self, C):
        x = inputs(4)
        ref, _ = gsa_recurrent(*x.astuple()[:4])
        o, _ = gsa_fwd(*x.astuple()[:4], spec=ChunkSpec(C))
        assert np.abs(o - ref).max() <= 1e-11

    @pytest.mark.parametrize("link", ["softmax", "swish", "relu", "relu2", "identity"])
    def test_links_match_recurrent(self, link):
        x = inputs(5, T=21)
        ref, _ = gsa_recurrent(*x.astuple()[:4], link=link)
        o, _ = gsa_fwd(*x.astuple()[:4], spec=ChunkSpec(8), link=link)
        assert np.abs(o - ref).max() <= 1e-11

    def test_unknown_link(self):
        x = inputs(5)
        with pytest.raises(ConfigError):
            gsa_fwd(*x.astuple()[:4], link="tanh")

    def test_final_state(self):
        x = inputs(6, T=19)
        _, st = gsa_recurrent(*x.astuple()[:4])
        _, saved = gsa_fwd(*x.astuple()[:4], spec=ChunkSpec(8))
        fs = final_state(saved)
        assert np.abs(fs.k_mem - st.k_mem).max() <= 1e-12
        assert np.abs(fs.v_mem - st.v_mem).max() <= 1e-12

    def test_gate_free_identity_link_is_two_la_passes(self):
        x = inputs(7, T=9, m=4)
        write = Rng(7).normal((9, 4))
        o, _ = gsa_fwd(x.q, x.k, x.v, np.zeros((9, 4)), write, ChunkSpec(4), link="identity")
        ok, _ = la_recurrent(x.q, x.k, write)
        ref, _ = la_recurrent(ok, write, x.v)
        assert np.abs(o - ref).max() <= 1e-12

    def test_write_replaced_by_keys(self):
        # m = d, unit gates, write strengths = k: composition of two LA passes
        x = inputs(8, T=9, m=4)
        o, _ = gsa_fwd(x.q, x.k, x.v, np.zeros((9, 4)), x.k, ChunkSpec(4), link="identity")
        ok, _ = la_recurrent(x.q, x.k, x.k)
        ref, _ = la_recurrent(ok, x.k, x.v)
        assert np.abs(o - ref).max() <= 1e-12

    def test_bounded_state(self):
        rng = Rng(9)
        T = 300
        q, k, v = rng.uniform((T, 4), -1, 1), rng.uniform((T, 4), -1, 1), rng.uniform((T, 4), -1, 1)
        g = np.log(rng.uniform((T, 3), 0.01, 1.0))
        _, st = gsa_recurrent(q, k, v, g)
        _, saved = gsa_fwd(q, k, v, g, spec=ChunkSpec(16))
        assert np.abs(st.k_mem).max() <= 1 and np.abs(st.v_mem).max() <= 1
        assert np.abs(saved.states_k).max() <= 1 + 1e-12 and np.abs(saved.states_v).max() <= 1 + 1e-12

    def test_log_gate_floor(self):
        x = inputs(10)
        a, _ = gsa_recurrent(x.q, x.k, x.v, np.full_like(x.log_gate, -1e6))
        b, _ = gsa_recurrent(x.q, x.k, x.v, np.full_like(x.log_gate, LOG_GATE_FLOOR))
        assert np.array_equal(a, b)

    def test_causality(self):
        x = inputs(11, T=16)
        o, _ = gsa_fwd(*x.astuple()[:4], spec=ChunkSpec(4))
        q, g = x.q.copy(), x.log_gate.copy()
        q[9] += 1.0
        g[9] *= 0.5
        o2, _ = gsa_fwd(q, x.k, x.v, g, spec=ChunkSpec(4))
        assert np.array_equal(o[:9], o2[:9])

    def test_backward_zero_upstream(self):
        x = inputs(12)
        _, saved = gsa_fwd(*x.astuple()[:4], spec=ChunkSpec(4))
        g = gsa_bwd(*x.astuple()[:4], np.zeros((12, 4)), saved, spec=ChunkSpec(4))
        assert not any(a.any() for a in (g.dq, g.dk, g.dv, g.dlog_gate))

    @pytest.mark.parametrize("link", ["softmax", "swish", "relu2", "identity"])
    def test_backward_finite_differences(self, link):
        x = inputs(13, T=16, d=4, m=3)
        q, k, v, g, _ = x.astuple()
        w = Rng(13).normal((16, 4))
        spec = ChunkSpec(4)

        def f():
            return float((gsa_fwd(q, k, v, g, spec=spec, link=link)[0] * w).sum())

        _, saved = gsa_fwd(q, k, v, g, spec=spec, link=link)
        gr = gsa_bwd(q, k, v, g, w, saved, spec=spec, link=link)
        for analytic, t in ((gr.dq, q), (gr.dk, k), (gr.dv, v), (gr.dlog_gate, g)):
            assert rel(analytic, fd_grad(f, t)) <= 1e-4

    def test_backward_free_write_strengths(self):
        x = inputs(14, T=10)
        q, k, v, g, _ = x.astuple()
        write = Rng(14).uniform((10, 3), 0.1, 1.0)
        w = Rng(15).normal((10, 4))
        spec = ChunkSpec(4)

        def f():
            return float((gsa_fwd(q, k, v, g, write, spec)[0] * w).sum())

        _, saved = gsa_fwd(q, k, v, g, write, spec)
        gr = gsa_bwd(q, k, v, g, w, saved, write, spec)
        assert rel(gr.dwrite, fd_grad(f, write)) <= 1e-6
        assert rel(gr.dlog_gate, fd_grad(f, g)) <= 1e-6

    def test_clamped_gates_get_no_gradient(self):
        x = inputs(16)
        g = x.log_gate.copy()
        g[3] = -100.0
        _, saved = gsa_fwd(x.q, x.k, x.v, g, spec=ChunkSpec(4))
        gr = gsa_bwd(x.q, x.k, x.v, g, np.ones((12, 4)), saved, spec=ChunkSpec(4))
        assert not gr.dlog_gate[3].any()

    def test_recompute_is_bitwise_identical(self):
        x = inputs(17, T=40)
        w = Rng(17).normal((40, 4))
        spec = ChunkSpec(8)
        _, saved = gsa_fwd(*x.astuple()[:4], spec=spec)
        _, lean = gsa_fwd(*x.astuple()[:4], spec=spec, keep_states=False)
        a = gsa_bwd(*x.astuple()[:4], w, saved, spec=spec)
        b = gsa_bwd(*x.astuple()[:4], w, lean, spec=spec, recompute=True)
        for n in ("dq", "dk", "dv", "dlog_gate"):
            assert np.array_equal(getattr(a, n), getattr(b, n))
        assert lean.nbytes() < saved.nbytes()

    def test_bptt_agrees_with_chunkwise_backward(self):
        x = inputs(18, T=30)
        w = Rng(18).normal((30, 4))
        dq, dk, dv, dg, _ = gsa_recurrent_bwd(*x.astuple()[:4], w, segment=7)
        _, saved = gsa_fwd(*x.astuple()[:4], spec=ChunkSpec(8))
        gr = gsa_bwd(*x.astuple()[:4], w, saved, spec=ChunkSpec(8))
        for a, b in ((dq, gr.dq), (dk, gr.dk), (dv, gr.dv), (dg, gr.dlog_gate)):
            assert np.abs(a - b).max() <= 1e-11

    def test_saved_mismatch(self):
        x = inputs(19)
        _, saved = gsa_fwd(*x.astuple()[:4])
        y = inputs(19, T=5)
        with pytest.raises(ValueError):
            gsa_bwd(*y.astuple()[:4], np.ones((5, 4)), saved)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 40), st.sampled_from([1, 2, 3, 8, 16]), st.integers(0, 10_000))
    def test_form_equivalence_property(self, T, C, seed):
        x = inputs(seed, T=T)
        ref, _ = gsa_recurrent(*x.astuple()[:4])
        o, _ = gsa_fwd(*x.astuple()[:4], spec=ChunkSpec(C))
        assert np.abs(o - ref).max() <= 1e-11


class TestLinks:
    @pytest.mark.parametrize("link", ["softmax", "swish", "relu", "relu2", "identity"])
    def test_backward(self, link):
        x = Rng(1).normal((3, 5))
        w = Rng(2).normal((3, 5))
        y = link_fwd(link, x)

        def f():
            return float((link_fwd(link, x) * w).sum())

        assert rel(link_bwd(link, x, y, w), fd_grad(f, x, 1e-6)) <= 1e-7


class TestRetnetDecay:
    def test_two_step_hand_expansion(self):
        rng = Rng(3)
        q, k, v = rng.normal((2, 3)), rng.normal((2, 3)), rng.normal((2, 3))
        o = retnet_style_decay(q, k, v, 0.5)
        ref = (0.5 * np.outer(k[0], v[0]) + np.outer(k[1], v[1])).T @ q[1]
        assert np.abs(o[1] - ref).max() <= 1e-15

    def test_near_one_limit_is_la(self):
        x = inputs(4, T=8)
        o = retnet_style_decay(x.q, x.k, x.v, 1 - 1e-15)
        ref, _ = la_recurrent(x.q, x.k, x.v)
        assert np.abs(o - ref).max() <= 1e-12

    def test_equals_constant_gate_gla(self):
        x = inputs(5, T=8)
        o = retnet_style_decay(x.q, x.k, x.v, 0.8)
        ref, _ = gla_recurrent(x.q, x.k, x.v, np.full((8, 4), np.log(0.8)), GateSide.KEY)
        assert np.abs(o - ref).max() <= 1e-12

    @pytest.mark.parametrize("gamma", [0.0, 1.0, -0.5, 1.5])
    def test_out_of_range(self, gamma):
        x = inputs(5, T=3)
        with pytest.raises(ConfigError):
            retnet_style_decay(x.q, x.k, x.v, gamma)
