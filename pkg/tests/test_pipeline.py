import numpy as np
import pytest
import torch

from cxr_sslx import data as data_mod
from cxr_sslx.checkpoint import (STAGE_EXTERNAL, STAGE_FINETUNED, STAGE_SSL,
                                 load_checkpoint)
from cxr_sslx.config import TrainConfig
from cxr_sslx.errors import CheckpointError, ConfigError, DataError
from cxr_sslx.pipeline import (ClassifierModel, EpochLog, aggregate_last_k,
                               attach_classifier, backbone_envelope_from,
                               classifier_from_envelope, format_epoch_log,
                               parse_epoch_logs, run_finetune,
                               run_ssl_pretraining, to_model_input)
from cxr_sslx.ssl_core import ParameterSet

from _synth import write_blob_corpus


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline_blobs")
    write_blob_corpus(root, n_per_class=8, image_size=32, seed=3)
    manifest = data_mod.scan_dataset(root)
    return data_mod.split(manifest, 0.8, seed=1)


def tiny_cfg(**overrides):
    base = dict(backbone="tiny8", mlp_hidden=16, projection_size=8,
                view_size=32, finetune_image_size=32, batch_size=8,
                ssl_epochs=2, finetune_epochs=2, seed=77,
                init_mode="ssl_only")
    base.update(overrides)
    return TrainConfig(**base)


class TestRunSslPretraining:
    def test_smoke_contract(self, corpus):
        envelope, losses = run_ssl_pretraining(tiny_cfg(), corpus)
        assert envelope.stage == STAGE_SSL
        assert envelope.epoch == 2
        assert len(losses) == 2
        assert all(np.isfinite(v) for v in losses)
        names = envelope.blobs.names()
        assert any(n.startswith("online.encoder.backbone.") for n in names)
        assert any(n.startswith("online.encoder.projector.") for n in names)
        assert any(n.startswith("online.predictor.") for n in names)
        assert any(n.startswith("target.") for n in names)
        assert any(n.startswith("optim.") for n in names)
        assert envelope.blobs.all_finite()

    def test_default_epoch_and_batch_settings(self):
        config = TrainConfig()
        assert config.ssl_epochs == 40
        assert config.batch_size == 256

    def test_deterministic_given_seed(self, corpus):
        a, losses_a = run_ssl_pretraining(tiny_cfg(), corpus)
        b, losses_b = run_ssl_pretraining(tiny_cfg(), corpus)
        assert a.blobs.bit_equal(b.blobs)
        assert losses_a == losses_b

    def test_labels_cannot_influence_training(self, corpus):
        relabeled = data_mod.DatasetManifest(records=tuple(
            data_mod.SampleRecord(path=r.path, class_label="junk",
                                  split=r.split)
            for r in corpus.records))
        a, _ = run_ssl_pretraining(tiny_cfg(), corpus)
        b, _ = run_ssl_pretraining(tiny_cfg(), relabeled)
        assert a.blobs.bit_equal(b.blobs)

    def test_wrong_init_mode_rejected(self, corpus):
        with pytest.raises(ConfigError, match="init_mode"):
            run_ssl_pretraining(tiny_cfg(init_mode="scratch"), corpus)

    def test_transfer_mode_requires_weights(self, corpus):
        with pytest.raises(ConfigError, match="backbone weights"):
            run_ssl_pretraining(tiny_cfg(init_mode="transfer_ssl"), corpus)

    def test_resume_matches_uninterrupted_run(self, corpus):
        straight, _ = run_ssl_pretraining(tiny_cfg(ssl_epochs=2), corpus)
        half, _ = run_ssl_pretraining(tiny_cfg(ssl_epochs=1), corpus)
        resumed, losses = run_ssl_pretraining(tiny_cfg(ssl_epochs=2), corpus,
                                              resume_from=half)
        assert len(losses) == 1
        assert resumed.blobs.bit_equal(straight.blobs)

    def test_loss_trajectory_moves(self, corpus):
        _, losses = run_ssl_pretraining(tiny_cfg(ssl_epochs=3), corpus)
        assert len(set(losses)) > 1


class TestAttachClassifier:
    def test_logits_shape(self, corpus):
        envelope, _ = run_ssl_pretraining(tiny_cfg(), corpus)
        model = attach_classifier(envelope, num_classes=4)
        x = torch.randn(5, 3, 32, 32)
        model.eval()
        assert model(x).shape == (5, 4)

    def test_backbone_weights_transferred(self, corpus):
        envelope, _ = run_ssl_pretraining(tiny_cfg(), corpus)
        model = attach_classifier(envelope, num_classes=4)
        got = ParameterSet.from_module(model.backbone)
        want = envelope.blobs.subset("online.encoder.backbone.")
        assert got.bit_equal(want)

    def test_head_init_reproducible(self, corpus):
        envelope, _ = run_ssl_pretraining(tiny_cfg(), corpus)
        a = attach_classifier(envelope, num_classes=4)
        b = attach_classifier(envelope, num_classes=4)
        assert ParameterSet.from_module(a.head).bit_equal(
            ParameterSet.from_module(b.head))

    def test_projector_and_predictor_discarded(self, corpus):
        envelope, _ = run_ssl_pretraining(tiny_cfg(), corpus)
        model = attach_classifier(envelope, num_classes=4)
        names = [n for n, _ in model.named_parameters()]
        assert all("projector" not in n and "predictor" not in n for n in names)

    def test_mismatched_backbone_rejected(self, corpus):
        envelope, _ = run_ssl_pretraining(tiny_cfg(), corpus)
        wrong = tiny_cfg(backbone="tiny")  # wider architecture
        with pytest.raises(CheckpointError, match="shape|blob"):
            attach_classifier(envelope, num_classes=4, config=wrong)

    def test_scratch_needs_config(self):
        with pytest.raises(ConfigError, match="config"):
            attach_classifier(None, num_classes=4)


class TestRunFinetune:
    def test_epochs_logged_with_reports(self, corpus):
        logs, envelope = run_finetune(tiny_cfg(init_mode="scratch"), corpus)
        assert len(logs) == 2
        assert [log.epoch for log in logs] == [1, 2]
        assert envelope.stage == STAGE_FINETUNED
        assert tuple(envelope.config.class_names) == corpus.classes
        for log in logs:
            assert np.isfinite(log.train_loss)
            assert log.eval.confusion.total == len(corpus.by_split("test"))

    def test_default_epoch_count(self):
        assert TrainConfig().finetune_epochs == 30

    def test_separable_toy_set_reaches_high_accuracy(self, tmp_path):
        write_blob_corpus(tmp_path, n_per_class=12, image_size=32, seed=5)
        manifest = data_mod.split(data_mod.scan_dataset(tmp_path), 0.8, seed=1)
        config = tiny_cfg(init_mode="scratch", finetune_epochs=15,
                          learning_rate=0.02)
        logs, _ = run_finetune(config, manifest)
        assert logs[-1].eval.acc > 0.9

    def test_deterministic(self, corpus):
        config = tiny_cfg(init_mode="scratch")
        logs_a, env_a = run_finetune(config, corpus)
        logs_b, env_b = run_finetune(config, corpus)
        assert env_a.blobs.bit_equal(env_b.blobs)
        for la, lb in zip(logs_a, logs_b):
            assert la.train_loss == lb.train_loss
            assert la.eval.scalars() == lb.eval.scalars()
            assert np.array_equal(la.eval.confusion.counts,
                                  lb.eval.confusion.counts)

    def test_resume_matches_uninterrupted_run(self, corpus):
        straight, env_s = run_finetune(tiny_cfg(init_mode="scratch",
                                                finetune_epochs=2), corpus)
        _, half = run_finetune(tiny_cfg(init_mode="scratch",
                                        finetune_epochs=1), corpus)
        resumed_logs, env_r = run_finetune(tiny_cfg(init_mode="scratch",
                                                    finetune_epochs=2), corpus,
                                           resume_from=half)
        assert len(resumed_logs) == 1
        assert env_r.blobs.bit_equal(env_s.blobs)
        assert resumed_logs[0].eval.scalars() == straight[-1].eval.scalars()

    def test_init_from_ssl_checkpoint(self, corpus):
        ssl_env, _ = run_ssl_pretraining(tiny_cfg(), corpus)
        logs, envelope = run_finetune(tiny_cfg(), corpus, init=ssl_env)
        assert len(logs) == 2
        assert envelope.blobs.all_finite()

    def test_label_fraction_subsamples_train(self, corpus, monkeypatch):
        seen = {}
        original = data_mod.stratified_subsample

        def spy(manifest, fraction, seed):
            result = original(manifest, fraction, seed)
            seen["n_train"] = len(result.by_split("train"))
            return result

        monkeypatch.setattr("cxr_sslx.pipeline.stratified_subsample", spy)
        run_finetune(tiny_cfg(init_mode="scratch", label_fraction=0.5), corpus)
        assert seen["n_train"] == 12  # floor(0.5 * 25) per-class balanced

    def test_all_backbone_parameters_move(self, corpus):
        config = tiny_cfg(init_mode="scratch", finetune_epochs=1)
        model_before = attach_classifier(None, 4, config)
        before = ParameterSet.from_module(model_before.backbone)
        _, envelope = run_finetune(config, corpus)
        after = envelope.blobs.subset("backbone.")
        changed = sum(
            not np.array_equal(before.blobs[n], after.blobs[n])
            for n in before.names()
            if np.issubdtype(before.blobs[n].dtype, np.floating))
        total_float = sum(1 for n in before.names()
                          if np.issubdtype(before.blobs[n].dtype, np.floating))
        assert changed == total_float  # full fine-tuning, not a frozen probe


class TestAggregateLastK:
    @staticmethod
    def _log(epoch, value):
        from cxr_sslx.metrics import evaluate_predictions
        report = evaluate_predictions([0, 1], [0, 1], [0.9, 0.1])
        report = type(report)(confusion=report.confusion, sen=value, spe=value,
                              hm=value, auc=value, acc=value,
                              positive_class=report.positive_class)
        return EpochLog(epoch=epoch, train_loss=value, eval=report)

    def test_constant_series(self):
        logs = [self._log(i, 0.9) for i in range(1, 13)]
        out = aggregate_last_k(logs, 10)
        assert out["acc"] == (pytest.approx(0.9), pytest.approx(0.0))

    def test_two_point_population_variance(self):
        logs = [self._log(1, 0.0), self._log(2, 1.0)]
        mean, var = aggregate_last_k(logs, 2)["acc"]
        assert mean == pytest.approx(0.5)
        assert var == pytest.approx(0.25)

    def test_k_larger_than_logs_rejected(self):
        logs = [self._log(1, 0.5)]
        with pytest.raises(ValueError, match="exceeds"):
            aggregate_last_k(logs, 2)

    def test_only_last_k_used(self):
        logs = [self._log(1, 0.0)] + [self._log(i, 1.0) for i in range(2, 5)]
        mean, var = aggregate_last_k(logs, 3)["acc"]
        assert mean == 1.0 and var == 0.0

    def test_accepts_parsed_dict_rows(self):
        rows = [{"epoch": 1, "loss": 0.5, "acc": 0.8},
                {"epoch": 2, "loss": 0.4, "acc": 0.9}]
        out = aggregate_last_k(rows, 2)
        assert out["acc"][0] == pytest.approx(0.85)


class TestCheckpointFlow:
    def test_finetuned_envelope_round_trips_through_disk(self, corpus, tmp_path):
        config = tiny_cfg(init_mode="scratch")
        logs, envelope = run_finetune(config, corpus)
        path = tmp_path / "ft.ckpt"
        envelope.save(path)
        loaded = load_checkpoint(path)
        model = classifier_from_envelope(loaded)
        images = np.random.default_rng(0).random((4, 32, 32)).astype(np.float32)
        original = classifier_from_envelope(envelope)
        with torch.no_grad():
            a = original(to_model_input(images, config))
            b = model(to_model_input(images, config))
        assert torch.allclose(a, b)

    def test_backbone_extraction_from_stages(self, corpus):
        ssl_env, _ = run_ssl_pretraining(tiny_cfg(), corpus)
        ext = backbone_envelope_from(ssl_env)
        assert ext.stage == STAGE_EXTERNAL
        assert ext.blobs.bit_equal(ssl_env.blobs.subset("online.encoder.backbone."))
        _, ft_env = run_finetune(tiny_cfg(init_mode="scratch"), corpus)
        ext2 = backbone_envelope_from(ft_env)
        assert ext2.blobs.bit_equal(ft_env.blobs.subset("backbone."))
        # and the extracted envelope feeds pre-training
        envelope, _ = run_ssl_pretraining(tiny_cfg(init_mode="transfer_ssl"),
                                          corpus, backbone_weights=ext)
        assert envelope.blobs.all_finite()

    def test_bare_model_extraction_requires_config(self, corpus):
        config = tiny_cfg(init_mode="scratch")
        model = attach_classifier(None, 4, config)
        with pytest.raises(ConfigError):
            backbone_envelope_from(model)
        env = backbone_envelope_from(model, config)
        assert env.stage == STAGE_EXTERNAL


class TestEpochLogFormat:
    def test_round_trip(self, corpus):
        logs, _ = run_finetune(tiny_cfg(init_mode="scratch"), corpus)
        text = "\n".join(format_epoch_log(log) for log in logs)
        rows = parse_epoch_logs(text)
        assert len(rows) == len(logs)
        for row, log in zip(rows, logs):
            assert row["epoch"] == log.epoch
            assert row["loss"] == pytest.approx(log.train_loss, abs=1e-6)
            assert row["acc"] == pytest.approx(log.eval.acc, abs=1e-6)

    def test_line_shape(self):
        from cxr_sslx.metrics import evaluate_predictions
        report = evaluate_predictions([0, 1], [0, 1], [0.9, 0.1])
        line = format_epoch_log(EpochLog(epoch=3, train_loss=0.25, eval=report))
        assert line.startswith("epoch=3\tloss=0.250000\t")
        assert "auc=" in line and "hm=" in line
