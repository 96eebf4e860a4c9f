"""Layer contracts: lookup semantics, recurrence algebra, subsampling arithmetic."""
import numpy as np
import pytest

from rnnt_kit.layers import (
    START,
    Blstm,
    Conv2dLayer,
    Embedding,
    LstmCell,
    LstmState,
    SubsampleSpec,
    format_subsample,
    group_frames,
    maxpool_time,
    parse_subsample,
    uniform_init,
)
from rnnt_kit.tensor import Tensor, finite_difference_error, flip, make_rng


class TestEmbedding:
    def test_start_token_embeds_to_zeros(self):
        emb = Embedding(5, 3, make_rng(0))
        np.testing.assert_array_equal(emb.lookup(START).data, np.zeros(3))

    def test_identity_table_returns_basis_vector(self):
        emb = Embedding(4, 4, make_rng(0))
        emb.weight.data[:] = np.eye(4)
        np.testing.assert_array_equal(emb.lookup(2).data, np.eye(4)[2])

    def test_lookup_is_exact_row(self):
        emb = Embedding(8, 6, make_rng(1))
        np.testing.assert_array_equal(emb.lookup(5).data, emb.weight.data[5])

    def test_out_of_range_rejected(self):
        emb = Embedding(4, 2, make_rng(2))
        for bad in (-2, 4):
            with pytest.raises(ValueError):
                emb.lookup(bad)

    def test_sequence_lookup_matches_single_and_has_gradient(self):
        emb = Embedding(6, 3, make_rng(3))
        seq = emb.lookup_sequence([START, 2, 5, 2])
        np.testing.assert_array_equal(seq.data[0], np.zeros(3))
        np.testing.assert_array_equal(seq.data[1], emb.weight.data[2])
        err = finite_difference_error(
            lambda: (emb.lookup_sequence([START, 2, 5, 2]).tanh()
                     * emb.lookup_sequence([START, 2, 5, 2])).sum(),
            [emb.weight])
        assert err <= 1e-4


class TestLstm:
    def test_zero_weights_force_zero_output(self):
        cell = LstmCell(3, 4, make_rng(0))
        for p in (cell.wx, cell.wh, cell.b):
            p.data[:] = 0.0
        h, state = cell.step(cell.initial_state(), Tensor(np.ones(3)))
        np.testing.assert_allclose(h.data, np.zeros(4), atol=1e-15)
        np.testing.assert_allclose(state.c.data, np.zeros(4), atol=1e-15)

    def test_step_gradcheck_over_weights_input_and_state(self):
        rng = make_rng(1)
        cell = LstmCell(2, 3, rng)
        x1 = Tensor(rng.standard_normal(2), requires_grad=True)
        x2 = Tensor(rng.standard_normal(2), requires_grad=True)
        h0 = Tensor(rng.standard_normal(3), requires_grad=True)
        c0 = Tensor(rng.standard_normal(3), requires_grad=True)

        def loss():
            h, st = cell.step(LstmState(h=h0, c=c0), x1)
            h2, st2 = cell.step(st, x2)
            return (h * h).sum() + (h2 * h2).sum() + (st2.c * st2.c).sum()

        wrt = [cell.wx, cell.wh, cell.b, x1, x2, h0, c0]
        assert finite_difference_error(loss, wrt) <= 1e-4

    def test_cell_state_grows_monotonically_with_saturated_gates(self):
        # Hand-set gate configuration: forget and input gates pinned open,
        # positive candidate, so the cell accumulates a fixed increment.
        cell = LstmCell(1, 1, make_rng(2))
        cell.wx.data[:] = 0.0
        cell.wh.data[:] = 0.0
        cell.b.data[:] = [20.0, 20.0, 2.0, 0.0]  # i, f, g, o pre-activations
        state = cell.initial_state()
        cs = []
        for _ in range(5):
            _, state = cell.step(state, Tensor(np.zeros(1)))
            cs.append(float(state.c.data[0]))
        diffs = np.diff(cs)
        assert np.all(diffs > 0.9)  # each step adds tanh(2) within saturation slack

    def test_fused_sequence_equals_threaded_steps(self):
        rng = make_rng(3)
        cell = LstmCell(3, 4, rng)
        xs = rng.standard_normal((6, 3))
        fused = cell.sequence(Tensor(xs))
        state = cell.initial_state()
        rows = []
        for t in range(6):
            h, state = cell.step(state, Tensor(xs[t]))
            rows.append(h.data)
        np.testing.assert_allclose(fused.data, np.stack(rows), atol=1e-12)

    def test_fused_sequence_gradcheck(self):
        rng = make_rng(4)
        cell = LstmCell(2, 3, rng)
        xs = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        wrt = [xs, cell.wx, cell.wh, cell.b]
        err = finite_difference_error(
            lambda: (cell.sequence(xs) * cell.sequence(xs).tanh()).sum(), wrt)
        assert err <= 1e-4


class TestBlstm:
    def test_single_frame_concatenates_both_passes(self):
        rng = make_rng(5)
        net = Blstm(3, 2, rng)
        x = rng.standard_normal((1, 3))
        out = net.forward(Tensor(x))
        hf, _ = net.fwd.step(net.fwd.initial_state(), Tensor(x[0]))
        hb, _ = net.bwd.step(net.bwd.initial_state(), Tensor(x[0]))
        np.testing.assert_allclose(out.data[0], np.concatenate([hf.data, hb.data]),
                                   atol=1e-12)

    def test_time_reversal_with_mirrored_weights_swaps_halves(self):
        rng = make_rng(6)
        net = Blstm(3, 2, rng)
        mirrored = Blstm(3, 2, rng)
        mirrored.fwd, mirrored.bwd = net.bwd, net.fwd
        x = Tensor(rng.standard_normal((5, 3)))
        out = net.forward(x).data
        out_mirrored = flip(mirrored.forward(flip(x, axis=0)), axis=0).data
        swapped = np.concatenate([out[:, 2:], out[:, :2]], axis=1)
        np.testing.assert_allclose(out_mirrored, swapped, atol=1e-12)

    def test_gradcheck(self):
        rng = make_rng(7)
        net = Blstm(2, 2, rng)
        xs = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        wrt = [xs, net.fwd.wx, net.fwd.wh, net.fwd.b, net.bwd.wx, net.bwd.wh, net.bwd.b]
        err = finite_difference_error(
            lambda: (net.forward(xs) * net.forward(xs)).sum(), wrt)
        assert err <= 1e-4

    def test_empty_sequence_rejected(self):
        net = Blstm(2, 2, make_rng(8))
        with pytest.raises(ValueError):
            net.forward(Tensor(np.zeros((0, 2))))


class TestFrameGrouping:
    def test_exact_division(self):
        out = group_frames(Tensor(np.arange(8.0).reshape(4, 2)), 2)
        assert out.shape == (2, 4)
        np.testing.assert_array_equal(out.data[0], [0, 1, 2, 3])

    def test_final_window_zero_padded(self):
        out = group_frames(Tensor(np.ones((5, 2))), 2)
        assert out.shape == (3, 4)
        np.testing.assert_array_equal(out.data[2], [1, 1, 0, 0])

    def test_group_below_two_rejected(self):
        with pytest.raises(ValueError):
            group_frames(Tensor(np.ones((4, 2))), 1)

    def test_gradient_flows_through_grouping(self):
        rng = make_rng(9)
        xs = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
        err = finite_difference_error(
            lambda: (group_frames(xs, 2) * group_frames(xs, 2)).sum(), [xs])
        assert err <= 1e-4


class TestConv:
    def test_identity_kernel_preserves_input(self):
        conv = Conv2dLayer(1, 1, make_rng(10))
        conv.kernel.data[:] = 0.0
        conv.kernel.data[0, 0, 2, 2] = 1.0  # center tap for (2, 3) same-padding
        conv.bias.data[:] = 0.0
        x = make_rng(11).standard_normal((7, 5, 1))
        out = conv.forward(Tensor(x))
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_constant_input_pooled_preserves_values(self):
        x = Tensor(np.full((7, 4, 2), 3.5))
        out = maxpool_time(x, 2)
        assert out.shape == (4, 4, 2)
        np.testing.assert_allclose(out.data, np.full((4, 4, 2), 3.5))

    def test_pool_one_is_identity(self):
        x = Tensor(np.ones((5, 3, 1)))
        assert maxpool_time(x, 1) is x

    def test_conv_and_pool_gradcheck(self):
        rng = make_rng(12)
        conv = Conv2dLayer(1, 2, rng)
        x = Tensor(rng.standard_normal((8, 6, 1)), requires_grad=True)

        def loss():
            y = maxpool_time(conv.forward(x), 2)
            return (y * y.tanh()).sum()

        assert finite_difference_error(loss, [x, conv.kernel, conv.bias]) <= 1e-4

    def test_maxpool_gradient_routes_to_first_maximum(self):
        x = Tensor(np.array([[[1.0]], [[1.0]]]), requires_grad=True)
        out = maxpool_time(x, 2)
        out.backward(np.ones_like(out.data))
        np.testing.assert_array_equal(x.grad[:, 0, 0], [1.0, 0.0])


TABLE_CONFIGS = [
    ("MP2@2", 2),
    ("Py2@3", 2),
    ("MP2@2+Py2@3", 4),
    ("MP2@1-2", 4),
    ("Py2@1-2", 4),
    ("Py2@2-3", 4),
    ("Py2@3-4", 4),
    ("Py2@4-5", 4),
    ("MP2@2+Py3@3", 6),
    ("MP2@2+Py2@2-3", 8),
    ("MP2@1-2+Py2@3", 8),
    ("Py2@1-3", 8),
]


class TestSubsampleGrammar:
    @pytest.mark.parametrize("text,total", TABLE_CONFIGS)
    def test_named_configs_parse_and_round_trip(self, text, total):
        spec = parse_subsample(text)
        assert spec.total() == total
        assert format_subsample(spec) == text
        assert parse_subsample(format_subsample(spec)) == spec

    @pytest.mark.parametrize("text,total", TABLE_CONFIGS)
    def test_stage_lengths_compose(self, text, total):
        spec = parse_subsample(text)
        T = 100
        for _, p in sorted(spec.cnn_pool):
            T = -(-T // p)
        for _, p in sorted(spec.pyramid):
            T = -(-T // p)
        assert spec.output_length(100) == T

    def test_known_lengths(self):
        assert parse_subsample("Py2@2-3").output_length(100) == 25
        assert parse_subsample("MP2@2+Py3@3").output_length(100) == 17
        assert parse_subsample("Py2@2-3").output_length(10) == 3

    def test_empty_spec(self):
        spec = parse_subsample("none")
        assert spec.total() == 1 and spec.output_length(33) == 33
        assert format_subsample(spec) == "none"

    @pytest.mark.parametrize("bad", ["XX2@1", "MP1@2", "MP2@0", "MP2@3-2",
                                     "MP2@1+MP3@1", "MP2", "Py@2"])
    def test_malformed_rejected(self, bad):
        with pytest.raises(ValueError):
            parse_subsample(bad)


def test_uniform_init_respects_scale():
    w = uniform_init(make_rng(13), (50, 50), scale=0.05)
    assert w.requires_grad
    assert np.all(np.abs(w.data) <= 0.05)
