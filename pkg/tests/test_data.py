"""Tests for exam records, volume storage, manifests, splits, and the
synthetic chest-CT generator.

Split behaviour is checked with direct set algebra on exam ids; generator
label semantics are checked by recomputing each flag from the generator's own
ground-truth geometry, which the public API exposes alongside every exam.
"""

from __future__ import annotations

import json

import numpy as np
import pytest

from pecad.data import (
    HU_MAX,
    HU_MIN,
    LABEL_NAMES,
    DatasetManifest,
    ExamLabels,
    ExamRecord,
    HuVolume,
    SplitSpec,
    SynthConfig,
    load_exam,
    read_labels_csv,
    save_dataset,
    save_exam,
    split_dataset,
    synth_generate,
    synth_generate_with_truth,
    validate_labels,
    write_labels_csv,
)
from pecad.errors import (
    CorruptVolumeError,
    DegenerateConfigError,
    IngestError,
    LabelValidationError,
    SplitError,
)


def make_volume(exam_id="e1", n=4, size=16, fill=-500):
    voxels = np.full((n, size, size), fill, dtype=np.int16)
    return HuVolume(exam_id=exam_id, voxels=voxels)


def make_record(exam_id="e1", n=4, **flags):
    labels = ExamLabels(**flags)
    image_labels = np.zeros(n, dtype=np.uint8)
    if not flags.get("negative_exam_for_pe", 0):
        image_labels[: max(1, n // 2)] = 1
    return ExamRecord(exam_id=exam_id, labels=labels, image_labels=image_labels)


class TestExamLabels:
    def test_label_order_is_stable(self):
        assert LABEL_NAMES == (
            "negative_exam_for_pe",
            "indeterminate",
            "leftsided_pe",
            "rightsided_pe",
            "central_pe",
            "rv_lv_ratio_gte_1",
            "rv_lv_ratio_lt_1",
            "chronic_pe",
            "acute_and_chronic_pe",
        )

    def test_array_round_trip(self):
        labels = ExamLabels(leftsided_pe=1, rv_lv_ratio_lt_1=1)
        arr = labels.to_array()
        assert arr.tolist() == [0, 0, 1, 0, 0, 0, 1, 0, 0]
        assert ExamLabels.from_array(arr) == labels

    def test_dict_round_trip(self):
        labels = ExamLabels(negative_exam_for_pe=1, indeterminate=1)
        assert ExamLabels.from_dict(labels.to_dict()) == labels

    def test_rejects_non_binary_values(self):
        with pytest.raises(LabelValidationError):
            ExamLabels(chronic_pe=2)
        with pytest.raises(LabelValidationError):
            ExamLabels.from_array(np.array([0, 0, 0, 0, 0, 0, 0, 0, -1]))


class TestValidateLabels:
    def test_clean_negative_exam(self):
        record = make_record(negative_exam_for_pe=1)
        assert validate_labels(record) == []

    def test_clean_positive_exam(self):
        record = make_record(rightsided_pe=1, rv_lv_ratio_gte_1=1, chronic_pe=1)
        assert validate_labels(record) == []

    def test_rv_lv_flags_are_exclusive(self):
        record = make_record(leftsided_pe=1, rv_lv_ratio_gte_1=1, rv_lv_ratio_lt_1=1)
        assert validate_labels(record) == ["rv_lv_exclusive"]

    def test_chronicity_flags_are_exclusive(self):
        record = make_record(central_pe=1, chronic_pe=1, acute_and_chronic_pe=1)
        assert validate_labels(record) == ["chronicity_exclusive"]

    def test_negative_exam_excludes_laterality(self):
        record = make_record(negative_exam_for_pe=1, leftsided_pe=1)
        assert validate_labels(record) == ["negative_excludes_laterality"]

    def test_multiple_violations_all_reported(self):
        record = make_record(
            negative_exam_for_pe=1,
            central_pe=1,
            rv_lv_ratio_gte_1=1,
            rv_lv_ratio_lt_1=1,
            chronic_pe=1,
            acute_and_chronic_pe=1,
        )
        assert validate_labels(record) == [
            "rv_lv_exclusive",
            "chronicity_exclusive",
            "negative_excludes_laterality",
        ]


class TestHuVolume:
    def test_clamps_to_hounsfield_domain(self):
        raw = np.array([[[-5000, -1024], [3071, 32000]]] * 2, dtype=np.int32)
        vol = HuVolume(exam_id="e1", voxels=np.repeat(np.repeat(raw, 4, axis=1), 4, axis=2))
        assert int(vol.voxels.min()) == HU_MIN
        assert int(vol.voxels.max()) == HU_MAX
        assert vol.voxels.dtype == np.int16

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            HuVolume(exam_id="e1", voxels=np.zeros((4, 16), dtype=np.int16))
        with pytest.raises(ValueError):
            HuVolume(exam_id="e1", voxels=np.zeros((0, 16, 16), dtype=np.int16))
        with pytest.raises(ValueError):
            HuVolume(exam_id="e1", voxels=np.zeros((4, 4, 16), dtype=np.int16))


class TestExamRecordConstruction:
    def test_rejects_non_binary_image_labels(self):
        with pytest.raises(ValueError):
            ExamRecord(
                exam_id="e1",
                labels=ExamLabels(),
                image_labels=np.array([0, 1, 2], dtype=np.int64),
            )


class TestExamIO:
    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        voxels = rng.integers(HU_MIN, HU_MAX, size=(5, 16, 16)).astype(np.int16)
        vol = HuVolume(exam_id="rt1", voxels=voxels)
        rec = make_record(exam_id="rt1", n=5, rightsided_pe=1, rv_lv_ratio_lt_1=1)
        exam_dir = tmp_path / "rt1"
        save_exam(vol, rec, exam_dir)
        vol2, rec2 = load_exam(exam_dir)
        assert np.array_equal(vol.voxels, vol2.voxels)
        assert vol2.voxels.dtype == np.int16
        assert rec2.labels == rec.labels
        assert np.array_equal(rec2.image_labels, rec.image_labels)
        assert rec2.exam_id == "rt1"

    def test_volume_bytes_are_little_endian_int16(self, tmp_path):
        vol = make_volume(exam_id="le1", n=2, size=8, fill=-513)
        save_exam(vol, make_record(exam_id="le1", n=2, negative_exam_for_pe=1), tmp_path / "le1")
        raw = (tmp_path / "le1" / "volume.i16").read_bytes()
        decoded = np.frombuffer(raw, dtype="<i2").reshape(2, 8, 8)
        assert np.array_equal(decoded, vol.voxels)

    def test_missing_directory_is_ingest_error(self, tmp_path):
        with pytest.raises(IngestError):
            load_exam(tmp_path / "nope")

    def test_missing_volume_file_is_ingest_error(self, tmp_path):
        vol = make_volume(exam_id="m1")
        save_exam(vol, make_record(exam_id="m1", negative_exam_for_pe=1), tmp_path / "m1")
        (tmp_path / "m1" / "volume.i16").unlink()
        with pytest.raises(IngestError):
            load_exam(tmp_path / "m1")

    def test_truncated_volume_is_corrupt(self, tmp_path):
        vol = make_volume(exam_id="t1")
        save_exam(vol, make_record(exam_id="t1", negative_exam_for_pe=1), tmp_path / "t1")
        blob = (tmp_path / "t1" / "volume.i16").read_bytes()
        (tmp_path / "t1" / "volume.i16").write_bytes(blob[:-7])
        with pytest.raises(CorruptVolumeError):
            load_exam(tmp_path / "t1")

    def test_invalid_labels_on_disk_name_the_rule(self, tmp_path):
        vol = make_volume(exam_id="bad1")
        save_exam(vol, make_record(exam_id="bad1", negative_exam_for_pe=1), tmp_path / "bad1")
        meta_path = tmp_path / "bad1" / "meta.json"
        meta = json.loads(meta_path.read_text())
        meta["labels"]["rv_lv_ratio_gte_1"] = 1
        meta["labels"]["rv_lv_ratio_lt_1"] = 1
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(LabelValidationError, match="rv_lv_exclusive"):
            load_exam(tmp_path / "bad1")

    def test_save_refuses_invalid_record_and_writes_nothing(self, tmp_path):
        vol = make_volume(exam_id="x1")
        bad = make_record(exam_id="x1", rv_lv_ratio_gte_1=1, rv_lv_ratio_lt_1=1)
        with pytest.raises(LabelValidationError):
            save_exam(vol, bad, tmp_path / "x1")
        assert not (tmp_path / "x1").exists()

    def test_save_rejects_mismatched_ids_and_lengths(self, tmp_path):
        vol = make_volume(exam_id="a", n=4)
        rec = make_record(exam_id="b", n=4, negative_exam_for_pe=1)
        with pytest.raises(ValueError):
            save_exam(vol, rec, tmp_path / "a")
        rec2 = make_record(exam_id="a", n=3, negative_exam_for_pe=1)
        with pytest.raises(ValueError):
            save_exam(vol, rec2, tmp_path / "a")


class TestManifestAndLabelsCsv:
    def test_manifest_round_trip(self, tmp_path):
        manifest = DatasetManifest(entries=[("e2", "exams/e2"), ("e1", "exams/e1")])
        path = tmp_path / "manifest.csv"
        manifest.save(path)
        text = path.read_text()
        assert text.splitlines()[0] == "exam_id,path"
        loaded = DatasetManifest.load(path)
        assert sorted(loaded.entries) == sorted(manifest.entries)
        assert loaded.base == tmp_path

    def test_fingerprint_ignores_row_order_but_not_content(self):
        a = DatasetManifest(entries=[("e1", "p1"), ("e2", "p2")])
        b = DatasetManifest(entries=[("e2", "p2"), ("e1", "p1")])
        c = DatasetManifest(entries=[("e1", "p1"), ("e2", "other")])
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != c.fingerprint()

    def test_duplicate_exam_ids_rejected(self):
        with pytest.raises(ValueError):
            DatasetManifest(entries=[("e1", "p1"), ("e1", "p2")])

    def test_labels_csv_round_trip(self, tmp_path):
        rows = {
            "e1": ExamLabels(negative_exam_for_pe=1),
            "e2": ExamLabels(leftsided_pe=1, rv_lv_ratio_gte_1=1),
        }
        path = tmp_path / "exam_labels.csv"
        write_labels_csv(rows, path)
        header = path.read_text().splitlines()[0]
        assert header == "exam_id," + ",".join(LABEL_NAMES)
        assert read_labels_csv(path) == rows


class TestSplitDataset:
    def make_manifest(self, n):
        return DatasetManifest(entries=[(f"e{i:03d}", f"exams/e{i:03d}") for i in range(n)])

    def test_sizes_partition_and_disjointness(self):
        manifest = self.make_manifest(20)
        train, test = split_dataset(manifest, SplitSpec(seed=11, n_test=6))
        train_ids = {e for e, _ in train.entries}
        test_ids = {e for e, _ in test.entries}
        assert len(test_ids) == 6
        assert len(train_ids) == 14
        assert train_ids & test_ids == set()
        assert train_ids | test_ids == {e for e, _ in manifest.entries}

    def test_same_seed_reproduces_split(self):
        manifest = self.make_manifest(30)
        t1 = split_dataset(manifest, SplitSpec(seed=7, n_test=10))
        t2 = split_dataset(manifest, SplitSpec(seed=7, n_test=10))
        assert t1[0].entries == t2[0].entries
        assert t1[1].entries == t2[1].entries

    def test_different_seeds_differ(self):
        manifest = self.make_manifest(30)
        _, test_a = split_dataset(manifest, SplitSpec(seed=1, n_test=10))
        _, test_b = split_dataset(manifest, SplitSpec(seed=2, n_test=10))
        assert {e for e, _ in test_a.entries} != {e for e, _ in test_b.entries}

    def test_split_ignores_manifest_row_order(self):
        manifest = self.make_manifest(25)
        shuffled = DatasetManifest(entries=list(reversed(manifest.entries)))
        _, test_a = split_dataset(manifest, SplitSpec(seed=3, n_test=8))
        _, test_b = split_dataset(shuffled, SplitSpec(seed=3, n_test=8))
        assert {e for e, _ in test_a.entries} == {e for e, _ in test_b.entries}

    def test_degenerate_splits_rejected(self):
        manifest = self.make_manifest(10)
        with pytest.raises(SplitError):
            split_dataset(manifest, SplitSpec(seed=0, n_test=0))
        with pytest.raises(SplitError):
            split_dataset(manifest, SplitSpec(seed=0, n_test=10))
        with pytest.raises(SplitError):
            split_dataset(manifest, SplitSpec(seed=0, n_test=11))


class TestSynthGenerate:
    CFG = SynthConfig(n_exams=40, slices_per_exam_range=(4, 7), image_size=48)

    def test_shapes_and_domain(self):
        exams = synth_generate(self.CFG, seed=100)
        assert len(exams) == 40
        for vol, rec in exams:
            n, h, w = vol.voxels.shape
            assert 4 <= n <= 7
            assert (h, w) == (48, 48)
            assert vol.voxels.dtype == np.int16
            assert vol.voxels.min() >= HU_MIN
            assert vol.voxels.max() <= HU_MAX
            assert rec.image_labels.shape == (n,)
            assert rec.exam_id == vol.exam_id

    def test_same_seed_is_bit_identical(self):
        a = synth_generate(self.CFG, seed=42)
        b = synth_generate(self.CFG, seed=42)
        for (va, ra), (vb, rb) in zip(a, b):
            assert va.exam_id == vb.exam_id
            assert np.array_equal(va.voxels, vb.voxels)
            assert ra.labels == rb.labels
            assert np.array_equal(ra.image_labels, rb.image_labels)

    def test_different_seeds_differ(self):
        a = synth_generate(self.CFG, seed=42)
        b = synth_generate(self.CFG, seed=43)
        assert any(not np.array_equal(va.voxels, vb.voxels) for (va, _), (vb, _) in zip(a, b))

    def test_every_exam_satisfies_label_rules(self):
        cfg = SynthConfig(n_exams=200, slices_per_exam_range=(3, 6), image_size=32)
        for _, rec in synth_generate(cfg, seed=9):
            assert validate_labels(rec) == []
            negative = rec.labels.negative_exam_for_pe
            assert negative == int(rec.image_labels.sum() == 0)

    def test_both_exam_polarities_and_all_labels_occur(self):
        cfg = SynthConfig(n_exams=300, slices_per_exam_range=(3, 6), image_size=32)
        stacked = np.stack([rec.labels.to_array() for _, rec in synth_generate(cfg, seed=17)])
        # Every one of the nine labels should take both values somewhere in a
        # large sample, otherwise downstream per-label AUCs are undefined.
        assert (stacked.max(axis=0) == 1).all()
        assert (stacked.min(axis=0) == 0).all()

    def test_image_labels_match_lesion_slices_exactly(self):
        exams = synth_generate_with_truth(self.CFG, seed=23)
        for exam in exams:
            lesion_slices = set()
            for lesion in exam.truth.lesions:
                lesion_slices.update(lesion.slice_boxes.keys())
            expected = np.zeros(exam.volume.n_slices, dtype=np.uint8)
            expected[sorted(lesion_slices)] = 1
            assert np.array_equal(exam.record.image_labels, expected)

    def test_laterality_recomputed_from_truth_geometry(self):
        exams = synth_generate_with_truth(SynthConfig(n_exams=120, image_size=48), seed=31)
        seen = set()
        for exam in exams:
            labels = exam.record.labels
            if labels.negative_exam_for_pe:
                assert labels.leftsided_pe == labels.rightsided_pe == labels.central_pe == 0
                continue
            lo, hi = exam.truth.lung_span_x
            t1 = lo + (hi - lo) / 3.0
            t2 = lo + 2.0 * (hi - lo) / 3.0
            for lesion in exam.truth.lesions:
                x = lesion.center[2]
                zone = "left" if x < t1 else ("central" if x < t2 else "right")
                assert zone == exam.truth.zone
            flag = {
                "left": labels.leftsided_pe,
                "central": labels.central_pe,
                "right": labels.rightsided_pe,
            }[exam.truth.zone]
            assert flag == 1
            assert labels.leftsided_pe + labels.central_pe + labels.rightsided_pe == 1
            seen.add(exam.truth.zone)
        assert seen == {"left", "central", "right"}

    def test_rv_flags_complementary_on_positives_only(self):
        for _, rec in synth_generate(SynthConfig(n_exams=150, image_size=32), seed=12):
            labels = rec.labels
            if labels.negative_exam_for_pe:
                assert labels.rv_lv_ratio_gte_1 == 0
                assert labels.rv_lv_ratio_lt_1 == 0
                assert labels.chronic_pe == 0
                assert labels.acute_and_chronic_pe == 0
            else:
                assert labels.rv_lv_ratio_gte_1 + labels.rv_lv_ratio_lt_1 == 1

    def test_lesions_are_hyperdense_against_lung(self):
        exams = synth_generate_with_truth(self.CFG, seed=77)
        for exam in exams:
            for lesion in exam.truth.lesions:
                for i, (y0, y1, x0, x1) in lesion.slice_boxes.items():
                    patch = exam.volume.voxels[i, y0:y1, x0:x1]
                    # Lung parenchyma sits far below -400 HU; an embolus
                    # patch must contain clearly denser material.
                    assert patch.max() > -100

    def test_lesion_free_lung_interior_stays_dark(self):
        exams = synth_generate_with_truth(self.CFG, seed=78)
        negatives = [e for e in exams if e.record.labels.negative_exam_for_pe == 1]
        assert negatives, "expected some negative exams at the default lesion rate"
        for exam in negatives:
            if exam.record.labels.indeterminate:
                continue  # artifact overlays may brighten lung pixels
            y0, y1, x0, x1 = exam.truth.lung_box
            core = exam.volume.voxels[:, (y0 + y1) // 2 - 2 : (y0 + y1) // 2 + 2, x0 + 2 : x0 + 6]
            assert core.mean() < -400

    def test_degenerate_intensity_config_rejected(self):
        cfg = SynthConfig(lesion_intensity_range=(-850.0, -780.0), lung_hu_range=(-900.0, -750.0))
        with pytest.raises(DegenerateConfigError):
            synth_generate(cfg, seed=1)

    def test_invalid_config_values_rejected(self):
        with pytest.raises(DegenerateConfigError):
            synth_generate(SynthConfig(n_exams=0), seed=1)
        with pytest.raises(DegenerateConfigError):
            synth_generate(SynthConfig(slices_per_exam_range=(5, 3)), seed=1)
        with pytest.raises(DegenerateConfigError):
            synth_generate(SynthConfig(image_size=16), seed=1)
        with pytest.raises(DegenerateConfigError):
            synth_generate(SynthConfig(lesion_probability=1.5), seed=1)


class TestSaveDataset:
    def test_writes_manifest_labels_and_exams(self, tmp_path):
        cfg = SynthConfig(n_exams=6, slices_per_exam_range=(3, 4), image_size=32)
        exams = synth_generate(cfg, seed=3)
        manifest = save_dataset(exams, tmp_path)
        assert (tmp_path / "manifest.csv").exists()
        assert (tmp_path / "exam_labels.csv").exists()
        assert len(manifest.entries) == 6
        labels = read_labels_csv(tmp_path / "exam_labels.csv")
        for vol, rec in exams:
            reloaded_vol, reloaded_rec = load_exam(tmp_path / dict(manifest.entries)[vol.exam_id])
            assert np.array_equal(reloaded_vol.voxels, vol.voxels)
            assert labels[vol.exam_id] == rec.labels
        reloaded = DatasetManifest.load(tmp_path / "manifest.csv")
        assert reloaded.fingerprint() == manifest.fingerprint()
