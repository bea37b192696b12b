"""Tests for per-image classifier training, evaluation, and feature extraction."""

import numpy as np
import pytest
import torch
from torch import nn

from pecad.data import SynthConfig, synth_generate_with_truth
from pecad.errors import (
    ConfigError,
    DataError,
    IncompatibleCheckpointError,
    UndefinedAUCError,
)
from pecad.image_level import (
    ImageSet,
    TrainConfig,
    evaluate_image_level,
    extract_exam_features,
    initialize_from_checkpoint,
    lesion_size_image_sets,
    load_exam_features,
    pe_image_sets,
    predict_image_logits,
    save_exam_features,
    train_image_classifier,
)
from pecad.models import BackboneConfig, build_backbone, save_checkpoint
from pecad.preprocess import PreprocConfig

MINI_X = BackboneConfig(family="xception", scale="mini")
MINI_R = BackboneConfig(family="residual", scale="mini")
PREP32 = PreprocConfig(out_size=32)


def synth_sets(n_exams, seed, **overrides):
    overrides.setdefault("slices_per_exam_range", (4, 6))
    cfg = SynthConfig(n_exams=n_exams, image_size=48, **overrides)
    return synth_generate_with_truth(cfg, seed=seed)


class FirstPixelModule(nn.Module):
    """Logit = value of the first pixel; lets tests encode labels in images."""

    def forward(self, x):
        return x[:, 0, 0, 0]


class ConstantModule(nn.Module):
    def forward(self, x):
        return torch.full((x.shape[0],), 0.25)


def sets_with_pixel_labels(labels_per_exam):
    sets = []
    for i, labels in enumerate(labels_per_exam):
        labels = np.asarray(labels, dtype=np.uint8)
        rng = np.random.default_rng(100 + i)
        images = rng.normal(size=(labels.size, 3, 8, 8)).astype(np.float32)
        images[:, 0, 0, 0] = labels.astype(np.float32)
        sets.append(ImageSet(exam_id=f"e{i:03d}", images=images, labels=labels))
    return sets


class TestTrainConfig:
    def test_defaults_are_valid(self):
        cfg = TrainConfig(epochs=3)
        assert cfg.init == "random"
        assert cfg.lr == pytest.approx(1e-3)
        assert cfg.batch_size == 32
        assert cfg.patience == 3

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epochs": 0},
            {"epochs": 3, "lr": 0.0},
            {"epochs": 3, "lr": -1e-3},
            {"epochs": 3, "batch_size": 0},
            {"epochs": 3, "patience": 0},
            {"epochs": 3, "val_fraction": 0.0},
            {"epochs": 3, "val_fraction": 1.0},
        ],
    )
    def test_invalid_values_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestEvaluate:
    def test_oracle_logits_give_auc_one(self):
        sets = sets_with_pixel_labels([[0, 1, 0, 1], [1, 1, 0], [0, 0, 1]])
        assert evaluate_image_level(FirstPixelModule(), sets) == 1.0

    def test_constant_model_scores_half_by_tie_handling(self):
        sets = sets_with_pixel_labels([[0, 1, 0, 1], [1, 0]])
        assert evaluate_image_level(ConstantModule(), sets) == 0.5

    def test_single_class_is_undefined(self):
        sets = sets_with_pixel_labels([[1, 1, 1], [1, 1]])
        with pytest.raises(UndefinedAUCError):
            evaluate_image_level(FirstPixelModule(), sets)

    def test_empty_input_is_a_data_error(self):
        with pytest.raises(DataError):
            evaluate_image_level(FirstPixelModule(), [])

    def test_untrained_model_scores_near_half_on_balanced_noise(self):
        # Null behaviour: a freshly seeded backbone on unstructured, balanced
        # data should land inside [0.4, 0.6] (≈ ±3.9 sd of the rank-sum null
        # for n=500), checked across several seeds.
        labels = np.array([0, 1] * 250, dtype=np.uint8)
        for seed in (0, 1, 2):
            rng = np.random.default_rng(seed)
            images = rng.normal(size=(500, 3, 16, 16)).astype(np.float32)
            sets = [ImageSet(exam_id="noise", images=images, labels=labels)]
            handle = build_backbone(MINI_X, seed=seed)
            auc = evaluate_image_level(handle, sets)
            assert 0.4 <= auc <= 0.6


class TestDataPlumbing:
    def test_pe_sets_mirror_per_image_labels(self):
        exams = synth_sets(6, seed=5)
        sets = pe_image_sets(exams, PREP32)
        assert len(sets) == 6
        for exam, s in zip(exams, sets):
            assert s.exam_id == exam.volume.exam_id
            n = exam.volume.voxels.shape[0]
            assert s.images.shape == (n, 3, 32, 32)
            assert s.images.dtype == np.float32
            assert np.array_equal(s.labels, exam.record.image_labels)

    def test_lesion_size_labels_follow_median_area_rule(self):
        exams = synth_sets(20, seed=9, lesion_probability=0.9)
        sets = lesion_size_image_sets(exams, PREP32)
        areas, labels = [], []
        for exam, s in zip(exams, sets):
            n = exam.volume.voxels.shape[0]
            per_slice = np.zeros(n)
            for lesion in exam.truth.lesions:
                for i, (y0, y1, x0, x1) in lesion.slice_boxes.items():
                    per_slice[i] += (y1 - y0) * (x1 - x0)
            areas.append(per_slice)
            labels.append(s.labels)
        flat_areas = np.concatenate(areas)
        threshold = np.median(flat_areas[flat_areas > 0])
        expected = (flat_areas > threshold).astype(np.uint8)
        got = np.concatenate(labels)
        assert np.array_equal(got, expected)
        assert got.min() == 0 and got.max() == 1

    def test_lesion_free_corpus_cannot_define_the_source_task(self):
        exams = synth_sets(4, seed=2, lesion_probability=0.0)
        with pytest.raises(DataError):
            lesion_size_image_sets(exams, PREP32)


class TestTraining:
    def test_learns_separable_synthetic_data(self):
        exams = synth_sets(80, seed=21)
        sets = pe_image_sets(exams, PREP32)
        handle = build_backbone(MINI_X, seed=0)
        cfg = TrainConfig(epochs=5, seed=0)
        handle, history = train_image_classifier(sets, handle, cfg)
        assert max(history.val_auc) >= 0.90
        assert history.best_epoch == int(np.argmax(history.val_auc))

    def test_same_config_and_seed_give_bit_identical_checkpoints(self, tmp_path):
        exams = synth_sets(10, seed=3)
        sets = pe_image_sets(exams, PREP32)
        cfg = TrainConfig(epochs=2, seed=4)
        paths = []
        histories = []
        for run in range(2):
            handle = build_backbone(MINI_R, seed=7)
            path = tmp_path / f"run{run}.f64"
            _, history = train_image_classifier(sets, handle, cfg, checkpoint_path=path)
            paths.append(path)
            histories.append(history)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        assert histories[0].train_loss == histories[1].train_loss
        assert histories[0].val_auc == histories[1].val_auc
        assert histories[0].best_epoch == histories[1].best_epoch

    def test_history_lengths_match_epochs_run(self):
        sets = sets_with_pixel_labels([[0, 1]] * 6)
        handle = build_backbone(MINI_R, seed=0)
        cfg = TrainConfig(epochs=3, seed=0, batch_size=4)
        _, history = train_image_classifier(sets, handle, cfg)
        assert len(history.train_loss) == len(history.val_auc) == history.epochs_run
        assert history.epochs_run <= 3
        assert 0 <= history.best_epoch < history.epochs_run

    def test_early_stopping_halts_on_plateaued_validation(self):
        # Labels carry no signal, so validation AUC cannot trend upward; with
        # patience 1 the loop must stop long before the epoch budget.
        rng = np.random.default_rng(0)
        train = []
        for i in range(6):
            images = rng.normal(size=(4, 3, 16, 16)).astype(np.float32)
            labels = np.array([0, 1, 0, 1], dtype=np.uint8)
            train.append(ImageSet(exam_id=f"t{i}", images=images, labels=labels))
        val = [
            ImageSet(
                exam_id="v0",
                images=rng.normal(size=(8, 3, 16, 16)).astype(np.float32),
                labels=np.array([0, 1] * 4, dtype=np.uint8),
            )
        ]
        handle = build_backbone(MINI_R, seed=1)
        cfg = TrainConfig(epochs=40, seed=1, patience=1, batch_size=8)
        _, history = train_image_classifier(train, handle, cfg, val_sets=val)
        assert history.epochs_run < 20

    def test_empty_training_input_is_a_data_error(self):
        handle = build_backbone(MINI_R, seed=0)
        with pytest.raises(DataError):
            train_image_classifier([], handle, TrainConfig(epochs=1))

    def test_checkpoint_init_copies_backbone_and_refreshes_head(self, tmp_path):
        source = build_backbone(MINI_R, seed=1)
        path = tmp_path / "source.f64"
        save_checkpoint(source, path)
        target = build_backbone(MINI_R, seed=2)
        initialize_from_checkpoint(target, path)
        src_state = source.module.state_dict()
        for name, value in target.module.state_dict().items():
            if name.startswith("head."):
                assert not torch.equal(value, src_state[name])
            else:
                assert torch.equal(value, src_state[name])

    def test_checkpoint_init_from_wrong_family_is_rejected(self, tmp_path):
        source = build_backbone(MINI_R, seed=1)
        path = tmp_path / "source.f64"
        save_checkpoint(source, path)
        target = build_backbone(MINI_X, seed=1)
        sets = sets_with_pixel_labels([[0, 1]] * 4)
        cfg = TrainConfig(epochs=1, init=str(path))
        with pytest.raises(IncompatibleCheckpointError):
            train_image_classifier(sets, target, cfg)

    def test_pretraining_then_finetuning_runs_end_to_end(self, tmp_path):
        source_exams = synth_sets(12, seed=31, lesion_probability=0.9)
        source_sets = lesion_size_image_sets(source_exams, PREP32)
        src = build_backbone(MINI_R, seed=5)
        ckpt = tmp_path / "pretrained.f64"
        train_image_classifier(
            source_sets, src, TrainConfig(epochs=1, seed=5), checkpoint_path=ckpt
        )
        target_exams = synth_sets(8, seed=32)
        target_sets = pe_image_sets(target_exams, PREP32)
        tgt = build_backbone(MINI_R, seed=6)
        _, history = train_image_classifier(
            target_sets, tgt, TrainConfig(epochs=1, seed=6, init=str(ckpt))
        )
        assert history.epochs_run == 1


class TestFeatureExtraction:
    def test_shape_and_agreement_with_direct_forward(self):
        exams = synth_sets(1, seed=11, slices_per_exam_range=(7, 7))
        prep = pe_image_sets(exams, PREP32)[0]
        handle = build_backbone(MINI_R, seed=0)
        feats = extract_exam_features(handle, prep.images)
        assert feats.shape == (7, 64)
        assert feats.dtype == np.float32
        handle.module.eval()
        with torch.no_grad():
            direct = handle.module.features(torch.from_numpy(prep.images)).numpy()
        assert np.array_equal(feats, direct)
        with torch.no_grad():
            row3 = handle.module.features(torch.from_numpy(prep.images[3:4])).numpy()[0]
        np.testing.assert_allclose(feats[3], row3, rtol=1e-5, atol=1e-6)

    def test_logits_are_linear_in_extracted_features(self):
        rng = np.random.default_rng(0)
        images = rng.normal(size=(5, 3, 32, 32)).astype(np.float32)
        handle = build_backbone(MINI_X, seed=3)
        feats = extract_exam_features(handle, images)
        logits = predict_image_logits(handle, images)
        head = handle.module.head
        expected = feats @ head.weight.detach().numpy().T + head.bias.detach().numpy()
        np.testing.assert_allclose(logits, expected[:, 0], rtol=1e-5, atol=1e-6)

    def test_round_trip_is_lossless_and_sidecar_is_complete(self, tmp_path):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(9, 64)).astype(np.float32)
        path = save_exam_features(feats, "exam-aa", "fp123", tmp_path)
        assert path.name == "feat_exam-aa.f32"
        loaded, meta = load_exam_features(tmp_path, "exam-aa")
        assert np.array_equal(loaded, feats)
        assert meta["exam_id"] == "exam-aa"
        assert meta["n_slices"] == 9
        assert meta["feature_dim"] == 64
        assert meta["model_fingerprint"] == "fp123"

    def test_truncated_payload_is_rejected(self, tmp_path):
        feats = np.zeros((4, 8), dtype=np.float32)
        path = save_exam_features(feats, "exam-bb", "fp", tmp_path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(DataError):
            load_exam_features(tmp_path, "exam-bb")
