import json
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
import pytest

import detadapt.trainer as trainer
from detadapt.detector import DetLoss
from detadapt.errors import CheckpointMismatchError, ConfigError, DataError, NumericalError
from detadapt.tensorcore import BatchNorm2d, Tensor, load_checkpoint, save_checkpoint
from detadapt.toydomains import MANIFEST_NAME, DatasetManifest, compute_domain_stats, save_stats
from detadapt.trainer import (
    LOSS_COLUMNS,
    Mode,
    TrainConfig,
    UnlabeledStream,
    _Sampler,
    ablate,
    adaptation_label,
    detector_state,
    evaluate_checkpoint,
    parse_subset,
    run_pipeline,
    subset_label,
    train,
)


@dataclass(frozen=True)
class GuardedRecord:
    image: str

    @property
    def boxes(self):
        raise AssertionError("target annotations were read")


def _guarded(manifest: DatasetManifest) -> DatasetManifest:
    return DatasetManifest(manifest.split, [GuardedRecord(r.image) for r in manifest.records], manifest.root)


@pytest.fixture
def make_config(tiny_config, tiny_datasets):
    def _make(**overrides):
        paths = {name: str(m.root / MANIFEST_NAME) for name, m in tiny_datasets.items()}
        base = dict(
            mode=Mode.BASELINE,
            iterations=4,
            batch_size=2,
            target_batch_size=2,
            decay_at=2,
            lr=0.01,
            checkpoint_every=2,
            log_every=2,
            eval_batch_size=4,
            seed=5,
            detector=tiny_config,
            **paths,
        )
        base.update(overrides)
        return TrainConfig(**base)

    return _make


class TestTrainConfig:
    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="magic")

    def test_decay_point_inside_run(self):
        with pytest.raises(ConfigError):
            TrainConfig(iterations=10, decay_at=20)

    def test_learning_rate_schedule(self):
        config = TrainConfig(iterations=10, decay_at=5, lr=0.1, lr_decay=0.1)
        assert config.learning_rate(5) == 0.1
        assert config.learning_rate(6) == pytest.approx(0.01)

    def test_empty_level_set_does_not_adapt(self):
        assert not TrainConfig(mode=Mode.FEATURE_ALIGN, levels=()).adapts
        assert TrainConfig(mode=Mode.FEATURE_ALIGN).adapts
        assert not TrainConfig(mode=Mode.TRANSLATE_ONLY).adapts

    def test_single_image_batches_need_room_for_pooled_discriminators(self):
        with pytest.raises(ConfigError, match="D5"):
            TrainConfig(mode=Mode.FEATURE_ALIGN, levels=(5,), batch_size=1, target_batch_size=1)
        with pytest.raises(ConfigError, match="target_batch_size"):
            TrainConfig(mode=Mode.FEATURE_ALIGN, levels=(5,), batch_size=2, target_batch_size=1)
        TrainConfig(mode=Mode.FEATURE_ALIGN, levels=(3, 4), batch_size=1, target_batch_size=1)
        TrainConfig(mode=Mode.BASELINE, batch_size=1)

    def test_single_image_batch_on_smallest_images(self, tiny_config):
        small = replace(tiny_config, image_size=16)
        with pytest.raises(ConfigError, match="last backbone stage"):
            TrainConfig(batch_size=1, detector=small)

    def test_adaptation_labels(self):
        assert adaptation_label(TrainConfig()) == "none"
        assert adaptation_label(TrainConfig(mode=Mode.FEATURE_ALIGN, levels=(3, 4))) == "feature alignment (D3+D4)"
        assert adaptation_label(TrainConfig(mode=Mode.FEATURE_ALIGN, levels=())) == "none"
        assert "syn2real" in adaptation_label(TrainConfig(mode=Mode.COMBINED_SYN2REAL))


class TestSampling:
    def test_epoch_visits_every_index_once(self, rng):
        sampler = _Sampler(5, 2, rng)
        seen = sampler.next_indices() + sampler.next_indices() + sampler.next_indices()[:1]
        assert sorted(seen) == [0, 1, 2, 3, 4]

    def test_unlabeled_stream_reads_paths_only(self, tiny_datasets, rng):
        stream = UnlabeledStream.from_manifest(_guarded(tiny_datasets["target_train"]), 3, rng)
        indices, images = stream.next()
        assert images.shape == (3, 3, 32, 32)
        assert len(indices) == 3

    def test_subset_labels(self):
        assert subset_label(()) == "none"
        assert subset_label((4, 3)) == "3+4"
        assert parse_subset("3+4+5") == (3, 4, 5)
        assert parse_subset("{}") == ()
        with pytest.raises(ConfigError):
            parse_subset("3+x")


class TestTrain:
    def test_loss_log_columns_and_objective(self, make_config, tiny_datasets, tmp_path):
        config = make_config(mode=Mode.FEATURE_ALIGN, lam=0.5)
        train(config, tiny_datasets["source_train"], tiny_datasets["target_train"], tmp_path)
        log = pd.read_csv(tmp_path / "loss_log.csv")
        assert list(log.columns) == LOSS_COLUMNS
        assert list(log["iteration"]) == [1, 2, 3, 4]
        rebuilt = log["l_class"] + log["l_box"] - 0.5 * (log["l_d3"] + log["l_d4"] + log["l_d5"])
        np.testing.assert_allclose(log["eq1_total"], rebuilt, atol=1e-5)
        assert (log[["l_d3", "l_d4", "l_d5"]] > 0).all().all()

    def test_baseline_has_no_domain_terms(self, make_config, tiny_datasets, tmp_path):
        result = train(make_config(), tiny_datasets["source_train"], None, tmp_path)
        assert result.discriminators is None
        log = pd.read_csv(tmp_path / "loss_log.csv")
        assert (log[["l_d3", "l_d4", "l_d5"]] == 0).all().all()
        np.testing.assert_allclose(log["eq1_total"], log["l_class"] + log["l_box"], atol=1e-6)

    def test_checkpoints_written(self, make_config, tiny_datasets, tmp_path):
        result = train(make_config(), tiny_datasets["source_train"], None, tmp_path)
        assert (tmp_path / "iter_000002.ckpt").exists()
        assert (tmp_path / "iter_000004.ckpt").exists()
        assert result.checkpoint == tmp_path / "final.ckpt"
        names = load_checkpoint(result.checkpoint)
        assert all(name.startswith("detector.") for name in names)

    def test_adapting_checkpoint_keeps_discriminators(self, make_config, tiny_datasets, tmp_path):
        config = make_config(mode=Mode.FEATURE_ALIGN, levels=(4,))
        result = train(config, tiny_datasets["source_train"], tiny_datasets["target_train"], tmp_path)
        state = load_checkpoint(result.checkpoint)
        assert any(name.startswith("discriminators.d4.") for name in state)
        assert set(detector_state(state)) == set(result.model.state_dict())

    def test_same_seed_same_bytes(self, make_config, tiny_datasets, tmp_path):
        config = make_config(mode=Mode.FEATURE_ALIGN)
        for run in ("a", "b"):
            train(config, tiny_datasets["source_train"], tiny_datasets["target_train"], tmp_path / run)
        for name in ("loss_log.csv", "final.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_zero_lambda_matches_baseline_detector(self, make_config, tiny_datasets):
        baseline = train(make_config(iterations=3), tiny_datasets["source_train"])
        aligned = train(
            make_config(iterations=3, mode=Mode.FEATURE_ALIGN, lam=0.0),
            tiny_datasets["source_train"],
            tiny_datasets["target_train"],
        )
        assert [r.l_class for r in baseline.losses] == [r.l_class for r in aligned.losses]
        base_params = dict(baseline.model.named_parameters())
        for name, param in aligned.model.named_parameters():
            np.testing.assert_allclose(param.data, base_params[name].data, atol=1e-7, err_msg=name)
        base_buffers = dict(baseline.model.named_buffers())
        for name, buffer in aligned.model.named_buffers():
            np.testing.assert_allclose(buffer, base_buffers[name], atol=1e-7, err_msg=name)
        images = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32)
        _, base_head = baseline.model(images)
        _, aligned_head = aligned.model(images)
        for base_logits, aligned_logits in zip(base_head.class_logits, aligned_head.class_logits):
            np.testing.assert_allclose(aligned_logits.data, base_logits.data, atol=1e-6)

    def test_target_pass_leaves_running_statistics_alone(self, make_config, tiny_datasets):
        baseline = train(make_config(iterations=2), tiny_datasets["source_train"])
        aligned = train(
            make_config(iterations=2, mode=Mode.FEATURE_ALIGN, lam=0.5),
            tiny_datasets["source_train"],
            tiny_datasets["target_train"],
        )
        base_updates = [m.stats.updates for m in baseline.model.modules() if isinstance(m, BatchNorm2d)]
        aligned_updates = [m.stats.updates for m in aligned.model.modules() if isinstance(m, BatchNorm2d)]
        assert base_updates and aligned_updates == base_updates

    def test_target_annotations_are_never_read(self, make_config, tiny_datasets):
        config = make_config(mode=Mode.FEATURE_ALIGN, iterations=2)
        result = train(config, tiny_datasets["source_train"], _guarded(tiny_datasets["target_train"]))
        assert len(result.losses) == 2
        assert result.losses[-1].l_d3 > 0

    def test_adapting_mode_needs_target(self, make_config, tiny_datasets):
        with pytest.raises(ConfigError):
            train(make_config(mode=Mode.FEATURE_ALIGN), tiny_datasets["source_train"], None)

    def test_nonfinite_loss_stops_with_dump(self, make_config, tiny_datasets, tmp_path, monkeypatch):
        monkeypatch.setattr(trainer, "detection_loss", lambda *args: DetLoss(Tensor(float("nan")), Tensor(0.0)))
        with pytest.raises(NumericalError) as info:
            train(make_config(), tiny_datasets["source_train"], None, tmp_path)
        dump = json.loads((tmp_path / "nonfinite_dump.json").read_text())
        assert dump["iteration"] == 1
        assert dump["seed"] == 5
        assert len(dump["source_images"]) == 2
        assert info.value.dump["iteration"] == 1

    def test_best_checkpoint_selection(self, make_config, tiny_datasets, tmp_path):
        result = train(
            make_config(), tiny_datasets["source_train"], out_dir=tmp_path,
            selection_manifest=tiny_datasets["source_test"],
        )
        sweep = pd.read_csv(tmp_path / "checkpoint_metrics.csv")
        assert list(sweep["iteration"]) == [2, 4]
        assert result.best_iteration in (2, 4)
        assert result.best_map == pytest.approx(sweep["map"].max())
        assert (tmp_path / "best.ckpt").exists()


class TestCheckpointEvaluation:
    def test_repeatable(self, make_config, tiny_datasets, tiny_config, tmp_path):
        result = train(make_config(), tiny_datasets["source_train"], None, tmp_path)
        first = evaluate_checkpoint(result.checkpoint, tiny_datasets["source_test"], tiny_config)
        second = evaluate_checkpoint(result.checkpoint, tiny_datasets["source_test"], tiny_config)
        assert first == second

    def test_renamed_parameter_is_reported(self, make_config, tiny_datasets, tiny_config, tmp_path):
        result = train(make_config(), tiny_datasets["source_train"], None, tmp_path)
        state = load_checkpoint(result.checkpoint)
        state["detector.head.renamed"] = state.pop("detector.neck.lateral3.weight")
        broken = save_checkpoint(state, tmp_path / "broken.ckpt")
        with pytest.raises(CheckpointMismatchError) as info:
            evaluate_checkpoint(broken, tiny_datasets["source_test"], tiny_config)
        assert "neck.lateral3.weight" in info.value.missing
        assert "head.renamed" in info.value.unexpected

    def test_missing_checkpoint(self, tiny_datasets, tiny_config, tmp_path):
        with pytest.raises(FileNotFoundError):
            evaluate_checkpoint(tmp_path / "none.ckpt", tiny_datasets["source_test"], tiny_config)


class TestPipelines:
    def test_feature_alignment_ignores_broken_target_annotations(self, make_config, tiny_datasets, tmp_path):
        target = tiny_datasets["target_train"]
        broken = tmp_path / "target_images.jsonl"
        broken.write_text(
            "".join(
                json.dumps({"image": str(path.resolve()), "boxes": [{"class": "cat", "x1": -5}]}) + "\n"
                for path in target.image_paths()
            )
        )
        config = make_config(mode=Mode.FEATURE_ALIGN, target_train=str(broken), select_best=False)
        run_pipeline(config, tmp_path / "run")
        assert json.loads((tmp_path / "run" / "run.json").read_text())["mode"] == "feature_align"

    def test_baseline_run_writes_outputs(self, make_config, tmp_path):
        metrics = run_pipeline(make_config(select_best=False), tmp_path / "run")
        run = json.loads((tmp_path / "run" / "run.json").read_text())
        assert run["mode"] == "baseline"
        assert run["adaptation"] == "none"
        assert run["map"] == pytest.approx(metrics.map_score)
        assert run["source_map"] is not None
        for name in ("metrics.csv", "metrics.json", "source_metrics.csv", "loss_log.csv", "final.ckpt"):
            assert (tmp_path / "run" / name).exists()

    def test_oracle_trains_on_target_labels(self, make_config, tmp_path):
        run_pipeline(make_config(mode=Mode.ORACLE, select_best=False), tmp_path)
        assert json.loads((tmp_path / "run.json").read_text())["adaptation"] == "target labels"

    def test_translation_needs_stats(self, make_config, tmp_path):
        with pytest.raises(DataError):
            run_pipeline(make_config(mode=Mode.TRANSLATE_ONLY, translation="real2syn"), tmp_path)

    def test_combined_mode_with_stats(self, make_config, tiny_datasets, tmp_path):
        source = tiny_datasets["source_train"]
        save_stats(compute_domain_stats(source), source.root / "stats.json")
        config = make_config(mode=Mode.COMBINED_REAL2SYN, levels=(3,), select_best=False)
        run_pipeline(config, tmp_path)
        run = json.loads((tmp_path / "run.json").read_text())
        assert run["levels"] == [3]
        assert run["adaptation"] == "image translation (real2syn) + feature alignment (D3)"

    def test_missing_manifest_key(self, make_config, tmp_path):
        with pytest.raises(ConfigError):
            run_pipeline(make_config(target_test=""), tmp_path)


class TestAblation:
    def test_empty_subset_row_equals_baseline(self, make_config, tmp_path):
        table = ablate(make_config(mode=Mode.FEATURE_ALIGN), [(), (3,)], tmp_path / "sweep")
        baseline = run_pipeline(make_config(), tmp_path / "baseline")
        assert list(table["subset"]) == ["none", "3"]
        assert table["map"].iloc[0] == pytest.approx(baseline.map_score, abs=1e-12)
        written = pd.read_csv(tmp_path / "sweep" / "ablation.csv")
        assert list(written.columns) == ["subset", "map"]

    def test_seeds_are_averaged(self, make_config, tmp_path):
        table = ablate(make_config(mode=Mode.FEATURE_ALIGN, select_best=False), [(4,)], tmp_path, seeds=[1, 2])
        per_seed = [json.loads((tmp_path / "subset_4" / f"seed_{s}" / "run.json").read_text())["map"] for s in (1, 2)]
        assert table["map"].iloc[0] == pytest.approx(np.mean(per_seed))

    def test_needs_subsets(self, make_config, tmp_path):
        with pytest.raises(ConfigError):
            ablate(make_config(mode=Mode.FEATURE_ALIGN), [], tmp_path)

    def test_needs_feature_alignment_mode(self, make_config, tmp_path):
        with pytest.raises(ConfigError):
            ablate(make_config(), [(3,)], tmp_path)


