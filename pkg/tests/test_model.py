"""Model assembly, checkpoint round-trips, and prediction-network transplant."""
import numpy as np
import pytest

from rnnt_kit.errors import DataError
from rnnt_kit.model import Checkpoint, Model, ModelConfig, init_prediction_from_lm
from rnnt_kit.tensor import log_sum_exp, make_rng, no_grad


def desk_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=14, feat_dim=8, stack_left=0, stack_right=0,
                frame_skip=2, cnn_layers=1, cnn_channels=2, blstm_layers=2,
                blstm_hidden=4, subsample="MP2@1", pred_layers=1, pred_hidden=4,
                embed_dim=3, joint_hidden=4, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


PAPER_CONFIG = ModelConfig(vocab_size=6812, feat_dim=40, stack_left=3,
                           stack_right=3, frame_skip=2, cnn_layers=2,
                           cnn_channels=32, blstm_layers=5, blstm_hidden=256,
                           subsample="Py2@2-3", pred_layers=2, pred_hidden=512,
                           embed_dim=256, joint_hidden=512, dropout=0.2)


class TestBuild:
    def test_full_scale_config_constructs_and_contracts_time(self):
        model = Model(PAPER_CONFIG, seed=1)
        assert model.encoder_output_length(100) == 25
        assert model.encoder_dim == 512

    def test_full_scale_parameter_count_is_pinned(self):
        # Regression pin: architecture changes must be deliberate.
        model = Model(PAPER_CONFIG, seed=1)
        assert model.num_params == 36_748_636

    def test_same_seed_builds_identical_tables(self):
        a = Model(desk_config(), seed=7)
        b = Model(desk_config(), seed=7)
        for name, p in a.parameters().items():
            np.testing.assert_array_equal(p.data, b.parameters()[name].data)

    def test_different_seed_differs(self):
        a = Model(desk_config(), seed=7)
        b = Model(desk_config(), seed=8)
        assert any(not np.array_equal(p.data, b.parameters()[n].data)
                   for n, p in a.parameters().items())

    def test_invalid_subsample_for_depth_rejected(self):
        with pytest.raises(ValueError):
            Model(desk_config(subsample="Py2@5"), seed=0)

    def test_bad_dropout_rejected(self):
        with pytest.raises(ValueError):
            Model(desk_config(dropout=1.0), seed=0)


class TestEncode:
    def test_single_frame_without_subsampling(self):
        model = Model(desk_config(subsample="none", cnn_layers=0), seed=2)
        out = model.encode(np.zeros((1, 8)))
        assert out.shape == (1, 8)

    def test_ceiling_contraction(self):
        model = Model(desk_config(cnn_layers=0, subsample="Py2@1-2"), seed=2)
        assert model.encode(make_rng(0).standard_normal((10, 8))).shape[0] == 3
        assert model.encoder_output_length(10) == 3

    def test_eval_forward_is_deterministic(self):
        model = Model(desk_config(), seed=3)
        feats = make_rng(1).standard_normal((9, 8))
        with no_grad():
            a = model.encode(feats).data
            b = model.encode(feats).data
        np.testing.assert_array_equal(a, b)

    def test_empty_input_rejected(self):
        model = Model(desk_config(), seed=3)
        with pytest.raises(ValueError):
            model.encode(np.zeros((0, 8)))

    def test_wrong_feature_dim_rejected(self):
        model = Model(desk_config(), seed=3)
        with pytest.raises(ValueError):
            model.encode(np.zeros((4, 5)))


class TestPredict:
    def test_start_output_is_shared_across_calls(self):
        model = Model(desk_config(), seed=4)
        from rnnt_kit.layers import START
        with no_grad():
            h1, _ = model.predict_step(START)
            h2, _ = model.predict_step(START)
        np.testing.assert_array_equal(h1.data, h2.data)

    def test_feeding_blank_is_a_caller_bug(self):
        model = Model(desk_config(), seed=4)
        with pytest.raises(ValueError):
            model.predict_step(0)

    def test_incremental_equals_whole_sequence(self):
        model = Model(desk_config(), seed=5)
        labels = [3, 7]
        whole = model.predict_outputs(labels).data
        from rnnt_kit.layers import START
        with no_grad():
            states = None
            rows = []
            for token in [START, 3, 7]:
                h, states = model.predict_step(token, states)
                rows.append(h.data)
        np.testing.assert_allclose(whole, np.stack(rows), atol=1e-12)


class TestLatticeComposition:
    def test_composed_lattice_is_normalized_per_node(self):
        model = Model(desk_config(), seed=6)
        feats = make_rng(2).standard_normal((7, 8))
        z = model.log_prob_lattice(model.encode(feats), model.predict_outputs([2, 3]))
        node_mass = log_sum_exp(z.data, axis=2)
        assert np.max(np.abs(node_mass)) <= 1e-6

    def test_utterance_loss_is_finite_positive(self):
        model = Model(desk_config(), seed=6)
        feats = make_rng(3).standard_normal((7, 8))
        loss = model.utterance_loss(feats, [2, 3])
        assert np.isfinite(loss.data) and loss.item() > 0


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        model = Model(desk_config(), seed=8)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        model.to_checkpoint({"epoch": "3", "best_val_loss": "1.25"}).save(p1)
        ckpt = Checkpoint.load(p1)
        ckpt.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_restores_weights_exactly(self, tmp_path):
        model = Model(desk_config(), seed=9)
        path = tmp_path / "m.ckpt"
        model.to_checkpoint().save(path)
        other = Model(desk_config(), seed=1234)
        other.load_state(Checkpoint.load(path))
        for name, p in model.parameters().items():
            np.testing.assert_array_equal(
                p.data.astype(np.float32), other.parameters()[name].data.astype(np.float32))

    def test_rebuild_from_checkpoint_meta(self, tmp_path):
        model = Model(desk_config(), seed=10)
        path = tmp_path / "m.ckpt"
        model.to_checkpoint().save(path)
        rebuilt = Model.from_checkpoint(Checkpoint.load(path))
        assert rebuilt.config == model.config
        feats = make_rng(4).standard_normal((6, 8))
        with no_grad():
            a = Model.from_checkpoint(Checkpoint.load(path)).encode(feats).data
            b = rebuilt.encode(feats).data
        np.testing.assert_array_equal(a, b)

    def test_shape_mismatch_names_offending_tensor(self, tmp_path):
        model = Model(desk_config(), seed=11)
        ckpt = model.to_checkpoint()
        ckpt.tensors["joint.w_out"] = ckpt.tensors["joint.w_out"][:, :3]
        with pytest.raises(DataError, match="joint.w_out"):
            model.load_state(ckpt)

    def test_not_a_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"garbage")
        with pytest.raises(DataError):
            Checkpoint.load(path)


class TestLmInit:
    def _lm_checkpoint(self, model: Model) -> Checkpoint:
        tensors = {name: (p.data + 0.5).astype("<f4")
                   for name, p in model.parameters().items()
                   if name.startswith("pred.")}
        tensors["lm_head.w"] = np.zeros((4, 14), dtype="<f4")
        return Checkpoint(tensors=tensors, meta={})

    def test_copy_semantics_bit_exact(self):
        model = Model(desk_config(), seed=12)
        lm_ckpt = self._lm_checkpoint(model)
        before_joint = model.joint.w_out.data.copy()
        init_prediction_from_lm(model, lm_ckpt)
        for name, p in model.parameters().items():
            if name.startswith("pred."):
                np.testing.assert_array_equal(p.data.astype(np.float32),
                                              lm_ckpt.tensors[name])
        np.testing.assert_array_equal(model.joint.w_out.data, before_joint)

    def test_mismatched_width_names_tensor(self):
        model = Model(desk_config(), seed=13)
        wide = Model(desk_config(pred_hidden=6), seed=13)
        lm_ckpt = self._lm_checkpoint(wide)
        with pytest.raises(DataError, match="pred.lstm0.wx"):
            init_prediction_from_lm(model, lm_ckpt)
