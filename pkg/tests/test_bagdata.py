"""Tests for the synthetic data generator, the binary bag format, and
manifest handling.

The generator's core promise is checked directly: both classes carry
identical marginal signal counts, and only the co-location of coarse and
fine signal tokens differs.
"""

import numpy as np
import pytest

from marble.bagdata import (BAG_MAGIC, DatasetIndex, GeneratedSlide,
                            ManifestRecord, SynthSpec, _ancestor0,
                            generate_dataset, generate_slide, load_manifest,
                            read_bag, signal_directions, write_bag,
                            write_manifest)
from marble.errors import ConfigError, FormatError
from marble.metrics import SurvivalRecord


class TestSynthSpec:

    def test_defaults_valid(self):
        SynthSpec()

    @pytest.mark.parametrize("kwargs", [
        {"noise": 0.0}, {"amplitude": -1.0}, {"censor_rate": 1.0},
        {"task": "regression"}, {"levels": 0},
        {"positive_pairs": 0}, {"positive_pairs": 4},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            SynthSpec(**kwargs)


class TestSignalDirections:

    def test_orthonormal_and_seed_stable(self):
        spec = SynthSpec(seed=42)
        a, b = signal_directions(spec)
        assert np.linalg.norm(a) == pytest.approx(1.0)
        assert np.linalg.norm(b) == pytest.approx(1.0)
        assert abs(float(a @ b)) < 1e-12
        a2, b2 = signal_directions(SynthSpec(seed=42))
        np.testing.assert_array_equal(a, a2)
        np.testing.assert_array_equal(b, b2)

    def test_seed_changes_directions(self):
        a, _ = signal_directions(SynthSpec(seed=1))
        b, _ = signal_directions(SynthSpec(seed=2))
        assert not np.allclose(a, b)


class TestGenerateSlide:

    def test_marginal_counts_match_across_classes(self):
        spec = SynthSpec(seed=3)
        rng = np.random.default_rng(0)
        for label in (0, 1):
            _, info = generate_slide(spec, label, rng)
            assert len(info.coarse_signal_idx) == spec.planted_coarse
            assert len(info.fine_signal_idx) == spec.planted_fine
            assert info.pair_count == (spec.positive_pairs if label else 0)

    def test_colocation_is_the_only_difference(self):
        spec = SynthSpec(seed=4)
        rng = np.random.default_rng(1)
        for label in (0, 1):
            bag, info = generate_slide(spec, label, rng)
            anc = _ancestor0(bag.levels, 1)
            pairs = sum(1 for i in info.fine_signal_idx
                        if anc[i] in info.coarse_signal_idx)
            assert pairs == info.pair_count

    def test_signal_actually_planted(self):
        spec = SynthSpec(seed=5, amplitude=5.0)
        rng = np.random.default_rng(2)
        bag, info = generate_slide(spec, 1, rng)
        s_coarse, s_fine = signal_directions(spec)
        proj = bag.levels[0].embeddings @ s_coarse
        top = set(np.argsort(proj)[-spec.planted_coarse:].tolist())
        assert top == set(info.coarse_signal_idx)
        proj_f = bag.levels[1].embeddings @ s_fine
        top_f = set(np.argsort(proj_f)[-spec.planted_fine:].tolist())
        assert top_f == set(info.fine_signal_idx)

    def test_decoys_sit_under_unsignalled_parents(self):
        spec = SynthSpec(seed=6)
        rng = np.random.default_rng(3)
        bag, info = generate_slide(spec, 0, rng)
        anc = _ancestor0(bag.levels, 1)
        for i in info.fine_signal_idx:
            assert anc[i] not in info.coarse_signal_idx

    def test_embeddings_are_float32_clean(self):
        spec = SynthSpec(seed=7)
        rng = np.random.default_rng(4)
        bag, _ = generate_slide(spec, 1, rng)
        for lv in bag.levels:
            np.testing.assert_array_equal(
                lv.embeddings, lv.embeddings.astype(np.float32))

    def test_too_small_grid_raises(self):
        # every coarse cell is signalled, so no parent can host a decoy
        spec = SynthSpec(seed=8, coarse_rows=2, coarse_cols=2,
                         planted_coarse=4, planted_fine=3)
        rng = np.random.default_rng(5)
        with pytest.raises(ConfigError):
            generate_slide(spec, 0, rng)


class TestGenerateDataset:

    def test_classification_balanced_and_deterministic(self):
        spec = SynthSpec(n_slides=40, seed=9)
        slides = generate_dataset(spec)
        labels = [s.label for s in slides]
        assert sum(labels) == 20
        again = generate_dataset(SynthSpec(n_slides=40, seed=9))
        for a, b in zip(slides, again):
            assert a.label == b.label
            for la, lb in zip(a.bag.levels, b.bag.levels):
                np.testing.assert_array_equal(la.embeddings, lb.embeddings)

    def test_survival_times_positive_and_pair_counts_in_range(self):
        spec = SynthSpec(n_slides=60, seed=10, task="survival")
        slides = generate_dataset(spec)
        for s in slides:
            assert s.record.time > 0
            assert 0 <= s.info.pair_count <= 3
        assert any(s.record.event for s in slides)
        assert any(not s.record.event for s in slides)

    def test_higher_pair_count_means_earlier_events(self):
        spec = SynthSpec(n_slides=400, seed=11, task="survival",
                         censor_rate=0.0)
        slides = generate_dataset(spec)
        lo = [s.record.time for s in slides if s.info.pair_count == 0]
        hi = [s.record.time for s in slides if s.info.pair_count == 3]
        assert np.median(hi) < np.median(lo)


class TestBagFormat:

    def _bag(self, seed=0):
        spec = SynthSpec(seed=seed)
        rng = np.random.default_rng(seed)
        bag, _ = generate_slide(spec, 1, rng)
        return bag

    def test_round_trip_bit_exact(self, tmp_path):
        bag = self._bag(12)
        path = str(tmp_path / "x.bag")
        write_bag(bag, path)
        loaded = read_bag(path)
        assert loaded.n_levels == bag.n_levels
        for a, b in zip(bag.levels, loaded.levels):
            np.testing.assert_array_equal(a.embeddings, b.embeddings)
            np.testing.assert_array_equal(a.coords, b.coords)
            if a.parents is None:
                assert b.parents is None
            else:
                np.testing.assert_array_equal(a.parents, b.parents)
            assert a.ratio == b.ratio

    def test_magic_checked(self, tmp_path):
        path = str(tmp_path / "x.bag")
        write_bag(self._bag(13), path)
        blob = bytearray(open(path, "rb").read())
        blob[:4] = b"NOPE"
        open(path, "wb").write(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            read_bag(path)

    def test_truncation_reported_with_offset(self, tmp_path):
        path = str(tmp_path / "x.bag")
        write_bag(self._bag(14), path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-10])
        with pytest.raises(FormatError, match="truncated at offset"):
            read_bag(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = str(tmp_path / "x.bag")
        write_bag(self._bag(15), path)
        with open(path, "ab") as fh:
            fh.write(b"\x00\x00")
        with pytest.raises(FormatError, match="trailing"):
            read_bag(path)

    def test_parent_out_of_range_rejected(self, tmp_path):
        bag = self._bag(16)
        bag.levels[1].parents = bag.levels[1].parents.copy()
        bag.levels[1].parents[0] = 10 ** 6
        path = str(tmp_path / "x.bag")
        write_bag(bag, path)
        with pytest.raises(FormatError, match="parent index"):
            read_bag(path)

    def test_fuzz_never_crashes(self, tmp_path):
        # random corruptions must raise FormatError, never anything else
        path = str(tmp_path / "x.bag")
        write_bag(self._bag(17), path)
        blob = open(path, "rb").read()
        rng = np.random.default_rng(18)
        for _ in range(100):
            corrupt = bytearray(blob)
            mode = rng.integers(3)
            if mode == 0:
                corrupt = corrupt[:rng.integers(len(blob))]
            elif mode == 1:
                pos = int(rng.integers(len(corrupt)))
                corrupt[pos] = int(rng.integers(256))
            else:
                corrupt += bytes(rng.integers(0, 256, size=5, dtype=np.uint8))
            open(path, "wb").write(bytes(corrupt))
            try:
                read_bag(path)
            except FormatError:
                pass


class TestManifest:

    def _index(self, tmp_path, task="classification", n=10, with_split=True):
        records = []
        for i in range(n):
            split = ("train" if i < 6 else "val" if i < 8 else "test") \
                if with_split else None
            if task == "classification":
                records.append(ManifestRecord(f"s{i}", f"s{i}.bag",
                                              label=i % 2, split=split))
            else:
                records.append(ManifestRecord(
                    f"s{i}", f"s{i}.bag",
                    record=SurvivalRecord(float(i + 1), i % 3 != 0),
                    split=split))
        return DatasetIndex(task=task, records=records)

    @pytest.mark.parametrize("task", ["classification", "survival"])
    def test_round_trip(self, tmp_path, task):
        index = self._index(tmp_path, task)
        path = str(tmp_path / "manifest.csv")
        write_manifest(path, index)
        loaded = load_manifest(path)
        assert loaded.task == task
        for a, b in zip(index.records, loaded.records):
            assert (a.slide_id, a.path, a.split) == (b.slide_id, b.path,
                                                     b.split)
            if task == "classification":
                assert a.label == b.label
            else:
                assert a.record.time == b.record.time
                assert a.record.event == b.record.event

    def test_missing_split_assigned_deterministically(self, tmp_path):
        index = self._index(tmp_path, n=20, with_split=False)
        path = str(tmp_path / "manifest.csv")
        write_manifest(path, index)
        a = load_manifest(path, split_seed=5)
        b = load_manifest(path, split_seed=5)
        assert [r.split for r in a.records] == [r.split for r in b.records]
        counts = {s: len(a.split_records(s)) for s in ("train", "val", "test")}
        assert counts == {"train": 16, "val": 2, "test": 2}

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("a,x.bag,0\na,y.bag,1\n")
        with pytest.raises(FormatError, match="duplicate"):
            load_manifest(str(path))

    def test_mixed_tasks_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("a,x.bag,0\nb,y.bag,1.5,1\n")
        with pytest.raises(FormatError, match="mixed"):
            load_manifest(str(path))

    def test_bad_field_count_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("a,x.bag\n")
        with pytest.raises(FormatError, match="line 1"):
            load_manifest(str(path))

    def test_comments_and_blanks_skipped(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("# header\n\na,x.bag,0,train\n")
        loaded = load_manifest(str(path))
        assert len(loaded.records) == 1

    def test_empty_manifest_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("# nothing\n")
        with pytest.raises(FormatError, match="no records"):
            load_manifest(str(path))
