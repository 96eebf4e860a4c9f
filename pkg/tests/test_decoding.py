"""Decoding semantics: greedy/beam equivalences, merging exactness, CER."""
import numpy as np
import pytest

from decode_oracle import best_sequence, exhaustive_prefix_masses
from rnnt_kit.decoding import (
    CerReport,
    DecodeOpts,
    beam_search,
    cer,
    edit_distance,
    greedy_decode,
    read_hypotheses,
    score_corpus,
    write_hypotheses,
    write_nbest,
)
from rnnt_kit.errors import DataError
from rnnt_kit.model import Model, ModelConfig
from rnnt_kit.tensor import make_rng


def tiny_model(seed, vocab_size=4, scale=1.0):
    """A small random model; init spread scaled up so decisions are not flat."""
    config = ModelConfig(vocab_size=vocab_size, feat_dim=4, stack_left=0,
                         stack_right=0, frame_skip=1, cnn_layers=0,
                         cnn_channels=1, blstm_layers=1, blstm_hidden=3,
                         subsample="none", pred_layers=1, pred_hidden=3,
                         embed_dim=2, joint_hidden=3, dropout=0.0)
    model = Model(config, seed=seed)
    for p in model.parameters().values():
        p.data = p.data * scale / 0.05
    return model


class TestGreedy:
    def test_blank_dominant_model_emits_nothing(self):
        model = tiny_model(seed=1, scale=0.0)
        model.joint.b_out.data[0] = 5.0  # blank wins everywhere
        out = greedy_decode(model, make_rng(0).standard_normal((4, 4)))
        assert out.size == 0

    def test_hand_crafted_lattice_emits_single_symbol(self):
        # Bias class 2 so strongly that it is emitted once; after the
        # prediction state moves off START, blank wins again.
        model = tiny_model(seed=2, scale=0.0)
        model.joint.b_out.data[:] = [0.0, -5.0, 3.0, -5.0]
        model.joint.w_pred.data[:] = 0.0
        model.embedding.weight.data[:] = 0.0
        out = greedy_decode(model, make_rng(1).standard_normal((2, 4)), max_emit=1)
        np.testing.assert_array_equal(out, [2, 2])

    def test_emission_cap_bounds_output(self):
        model = tiny_model(seed=3, scale=0.0)
        model.joint.b_out.data[:] = [-5.0, -5.0, 3.0, -5.0]  # class 2 always wins
        out = greedy_decode(model, make_rng(2).standard_normal((3, 4)), max_emit=4)
        assert out.size == 3 * 4

    @pytest.mark.parametrize("seed", range(10))
    def test_greedy_equals_beam_width_one(self, seed):
        model = tiny_model(seed=seed, vocab_size=5, scale=0.6)
        feats = make_rng(seed, stream=1).standard_normal((5, 4))
        greedy = greedy_decode(model, feats, max_emit=6)
        opts = DecodeOpts(beam=1, lm_weight=0.0, length_reward=0.0, max_emit=6)
        top = beam_search(model, feats, opts)[0]
        np.testing.assert_array_equal(greedy, np.array(top.tokens, dtype=np.int64))


class TestBeamExactness:
    @pytest.mark.parametrize("seed", range(8))
    def test_exhaustive_beam_matches_path_enumeration(self, seed):
        # A beam wide enough to hold every reachable prefix prunes nothing,
        # so the top hypothesis must be the true argmax and every surviving
        # merged mass must equal the enumerated path sum.
        rng = make_rng(seed, stream=2)
        K = int(rng.integers(2, 5))
        T = int(rng.integers(1, 4))
        model = tiny_model(seed=100 + seed, vocab_size=K, scale=0.8)
        feats = rng.standard_normal((T, 4))
        max_emit = 2
        n_prefixes = sum((K - 1) ** length for length in range(T * max_emit + 1))
        masses = exhaustive_prefix_masses(model, feats, max_emit=max_emit)
        best_prefix, best_mass = best_sequence(masses)

        opts = DecodeOpts(beam=2 * n_prefixes, max_emit=max_emit)
        hyps = beam_search(model, feats, opts)
        assert hyps[0].tokens == best_prefix
        assert hyps[0].log_p == pytest.approx(best_mass, abs=1e-8)
        # merged masses are exact for every surviving prefix
        for h in hyps:
            assert h.log_p == pytest.approx(masses[h.tokens], abs=1e-8)

    def test_beam_monotonicity(self):
        for seed in range(6):
            model = tiny_model(seed=200 + seed, vocab_size=4, scale=0.7)
            feats = make_rng(seed, stream=3).standard_normal((4, 4))
            best = [beam_search(model, feats, DecodeOpts(beam=b, max_emit=3))[0]
                    .score(DecodeOpts(beam=b, max_emit=3))
                    for b in (1, 2, 3, 5, 8)]
            assert all(b2 >= b1 - 1e-12 for b1, b2 in zip(best, best[1:]))

    def test_deterministic_ordering(self):
        model = tiny_model(seed=300, vocab_size=4, scale=0.7)
        feats = make_rng(4, stream=4).standard_normal((3, 4))
        a = beam_search(model, feats, DecodeOpts(beam=4, max_emit=3))
        b = beam_search(model, feats, DecodeOpts(beam=4, max_emit=3))
        assert [h.tokens for h in a] == [h.tokens for h in b]
        scores = [h.score(DecodeOpts(beam=4, max_emit=3)) for h in a]
        assert scores == sorted(scores, reverse=True)


class TestFusionAndTemperature:
    def test_zero_lm_weight_ignores_scorer(self):
        model = tiny_model(seed=400, vocab_size=4, scale=0.7)
        feats = make_rng(5, stream=5).standard_normal((4, 4))
        calls = []

        def noisy_scorer(prefix, k):
            calls.append((prefix, k))
            return -123.0

        with_lm = beam_search(model, feats, DecodeOpts(beam=4, lm_weight=0.0,
                                                       max_emit=3), noisy_scorer)
        without = beam_search(model, feats, DecodeOpts(beam=4, max_emit=3))
        assert [h.tokens for h in with_lm] == [h.tokens for h in without]
        assert [h.log_p for h in with_lm] == [h.log_p for h in without]
        assert not calls  # fusion off: scorer never consulted

    def test_lm_reward_promotes_a_sequence(self):
        # The fusion term is added per emitted symbol at emission time, so a
        # scorer that strongly rewards one continuation must promote exactly
        # that sequence to the top.
        model = tiny_model(seed=401, vocab_size=4, scale=0.4)
        feats = make_rng(6, stream=5).standard_normal((3, 4))
        base = beam_search(model, feats, DecodeOpts(beam=8, max_emit=2))
        target = next(h.tokens for h in base if len(h.tokens) > 0)

        def scorer(prefix, k):
            want = target[len(prefix)] if len(prefix) < len(target) else None
            return 5.0 if k == want else -50.0

        opts = DecodeOpts(beam=8, lm_weight=1.0, max_emit=2)
        fused = beam_search(model, feats, opts, scorer)
        assert fused[0].tokens == target
        top = fused[0]
        assert top.score(opts) == pytest.approx(top.log_p + 5.0 * len(target))

    def test_temperature_keeps_beam1_argmax_path(self):
        model = tiny_model(seed=402, vocab_size=5, scale=0.7)
        feats = make_rng(7, stream=5).standard_normal((4, 4))
        base = greedy_decode(model, feats, temperature=1.0)
        for tau in (0.3, 2.0, 10.0):
            np.testing.assert_array_equal(greedy_decode(model, feats, temperature=tau),
                                          base)

    def test_invalid_opts_rejected(self):
        for bad in (DecodeOpts(beam=0), DecodeOpts(temperature=0.0),
                    DecodeOpts(max_emit=0), DecodeOpts(nbest=0)):
            with pytest.raises(ValueError):
                bad.validate()


class TestCer:
    def test_identical_sequences(self):
        assert cer("abc", "abc") == 0.0

    def test_single_substitution(self):
        assert cer("abc", "axc") == pytest.approx(1 / 3)

    def test_empty_hypothesis_counts_deletions(self):
        assert cer("ab", "") == 1.0

    def test_can_exceed_one(self):
        assert cer("a", "xyz") > 1.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            cer("", "abc")

    def test_edit_distance_symmetry_and_triangle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b, c = ("".join(rng.choice(list("abc"), rng.integers(0, 6)))
                       for _ in range(3))
            assert edit_distance(a, b) == edit_distance(b, a)
            assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


class TestScoringFiles:
    def test_hypothesis_file_round_trip(self, tmp_path):
        p = tmp_path / "hyp.txt"
        write_hypotheses(p, [("u1", "abc", -1.5), ("u2", "", -0.25)])
        got = read_hypotheses(p)
        assert got == {"u1": "abc", "u2": ""}

    def test_nbest_has_rank_column(self, tmp_path):
        p = tmp_path / "nbest.txt"
        write_nbest(p, [("u1", 1, "ab", -1.0), ("u1", 2, "a", -2.0)])
        lines = p.read_text().splitlines()
        assert lines[0].split("\t") == ["u1", "1", "ab", "-1.000000"]

    def test_corpus_scoring(self):
        report = score_corpus({"u1": "abc", "u2": "ab"},
                              {"u1": "abc", "u2": "xb"})
        assert isinstance(report, CerReport)
        assert report.total_edits == 1 and report.total_ref_len == 5
        assert report.corpus_cer == pytest.approx(0.2)

    def test_unknown_utterance_rejected(self):
        with pytest.raises(DataError):
            score_corpus({"u1": "a"}, {"zz": "a"})
