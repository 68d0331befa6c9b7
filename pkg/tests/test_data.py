"""Manifest, split, word-vector, and triplet-sampling contracts."""

from __future__ import annotations

import numpy as np
import pytest

from doodlerank import data
from doodlerank import synthetic


def _write_manifest(tmp_path, rows):
    path = tmp_path / "manifest.tsv"
    path.write_text("\n".join([data.MANIFEST_HEADER] + rows) + "\n", encoding="utf-8")
    return path


class TestManifest:
    def test_two_line_manifest(self, tmp_path):
        path = _write_manifest(tmp_path, [
            "photo\tp1\timg/p1.png\tcat",
            "sketch\ts1\timg/s1.png\tcat",
        ])
        corpus = data.load_manifest(path)
        assert len(corpus.photos) == 1 and len(corpus.sketches) == 1
        assert corpus.classes == ("cat",)
        assert corpus.photos[0].path == tmp_path / "img/p1.png"

    def test_unknown_modality(self, tmp_path):
        path = _write_manifest(tmp_path, ["painting\tp1\ta.png\tcat"])
        with pytest.raises(data.UnknownModalityError):
            data.load_manifest(path)

    def test_duplicate_id(self, tmp_path):
        path = _write_manifest(tmp_path, [
            "photo\tp1\ta.png\tcat",
            "photo\tp1\tb.png\tdog",
        ])
        with pytest.raises(data.DuplicateIdError):
            data.load_manifest(path)

    def test_same_id_across_modalities_allowed(self, tmp_path):
        path = _write_manifest(tmp_path, [
            "photo\tx\ta.png\tcat",
            "sketch\tx\tb.png\tcat",
        ])
        corpus = data.load_manifest(path)
        assert len(corpus.photos) == len(corpus.sketches) == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            data.load_manifest(tmp_path / "nope.tsv")

    def test_roundtrip_equality(self, tmp_path):
        rows = [
            "photo\tp1\timg/p1.png\tcat",
            "photo\tp2\timg/p2.png\tdog",
            "sketch\ts1\timg/s1.png\tcat",
        ]
        path = _write_manifest(tmp_path, rows)
        corpus = data.load_manifest(path)
        out = tmp_path / "out.tsv"
        data.write_manifest(out, corpus)
        assert data.load_manifest(out) == corpus

    def test_class_missing_from_semantics_names_it(self, tmp_path):
        table = data.SemanticTable({"cat": np.ones(3, dtype=np.float32)}, dim=3, source="t")
        with pytest.raises(data.MissingSemanticsError) as exc:
            table.require(["cat", "zebra"])
        assert "zebra" in str(exc.value)

    def test_110_class_manifest(self, tmp_path):
        rows = []
        for spec in synthetic.shape_catalog(110):
            rows.append(f"photo\t{spec.name}-p\ta.png\t{spec.name}")
        path = _write_manifest(tmp_path, rows)
        corpus = data.load_manifest(path)
        assert len(corpus.classes) == 110


def _corpus(n_classes=6, photos_per=2, sketches_per=2):
    names = [f"c{i}" for i in range(n_classes)]
    photos = [data.Record(f"{c}-p{j}", data.Path(f"/x/{c}p{j}.png"), c) for c in names for j in range(photos_per)]
    sketches = [data.Record(f"{c}-s{j}", data.Path(f"/x/{c}s{j}.png"), c) for c in names for j in range(sketches_per)]
    return data.Corpus.from_records(photos, sketches)


class TestSplit:
    def test_sizes_110_to_80_30(self):
        corpus = _corpus(110, 1, 1)
        split = data.make_split(corpus, n_unseen=30, seed=0)
        assert len(split.seen) == 80 and len(split.unseen) == 30

    def test_n_unseen_bounds(self):
        corpus = _corpus(5)
        with pytest.raises(data.SplitError):
            data.make_split(corpus, n_unseen=5, seed=0)
        with pytest.raises(data.SplitError):
            data.make_split(corpus, n_unseen=0, seed=0)

    def test_same_seed_identical(self):
        corpus = _corpus(20)
        a = data.make_split(corpus, 6, seed=42)
        b = data.make_split(corpus, 6, seed=42)
        assert a.seen == b.seen and a.unseen == b.unseen

    def test_forced_classes(self):
        corpus = _corpus(10)
        split = data.make_split(corpus, 3, seed=1, force_seen=["c0"], force_unseen=["c9"])
        assert "c0" in split.seen and "c9" in split.unseen
        with pytest.raises(data.SplitError):
            data.make_split(corpus, 3, seed=1, force_seen=["c1"], force_unseen=["c1"])
        with pytest.raises(data.SplitError):
            data.make_split(corpus, 1, seed=1, force_unseen=["c1", "c2"])

    @pytest.mark.parametrize("seed", range(25))
    def test_invariants_over_seeds(self, seed):
        corpus = _corpus(12, 2, 1)
        split = data.make_split(corpus, 4, seed=seed)
        seen, unseen = set(split.seen), set(split.unseen)
        assert not seen & unseen
        assert seen | unseen == set(corpus.classes)
        # induced record sets obey the set-difference definition
        assert set(split.photos_unseen) == set(corpus.photos) - set(split.photos_seen)
        assert set(split.sketches_unseen) == set(corpus.sketches) - set(split.sketches_seen)
        assert all(r.cls in unseen for r in split.sketches_unseen)

    def test_split_file_roundtrip(self, tmp_path):
        corpus = _corpus(9)
        split = data.make_split(corpus, 3, seed=7)
        path = tmp_path / "split.tsv"
        data.write_split(path, split)
        loaded = data.load_split(path, corpus)
        assert loaded.seen == split.seen and loaded.unseen == split.unseen
        assert path.read_text().startswith("class\tpartition\n")

    def test_validation_requires_photos(self):
        names = ["a", "b"]
        photos = [data.Record("a-p", data.Path("/x/a.png"), "a")]
        sketches = [data.Record(f"{c}-s", data.Path(f"/x/{c}.png"), c) for c in names]
        corpus = data.Corpus.from_records(photos, sketches)
        split = data.ZeroShotSplit.from_classes(corpus, ["a", "b"], [])
        with pytest.raises(data.SplitError) as exc:
            data.validate_split_for_training(split)
        assert "b" in str(exc.value)


class TestWordVectors:
    def _write(self, tmp_path, lines, header=None):
        path = tmp_path / "vecs.txt"
        body = ([header] if header else []) + lines
        path.write_text("\n".join(body) + "\n", encoding="utf-8")
        return path

    def test_basic_parse(self, tmp_path):
        vec = " ".join(str(0.1 * i) for i in range(300))
        path = self._write(tmp_path, [f"cat {vec}"])
        table = data.load_word_vectors(path, ["cat"])
        assert table["cat"].shape == (300,)
        np.testing.assert_allclose(table["cat"][1], 0.1, rtol=1e-6)

    def test_header_line_skipped(self, tmp_path):
        vec = " ".join(["0.5"] * 300)
        path = self._write(tmp_path, [f"cat {vec}"], header="1 300")
        table = data.load_word_vectors(path, ["cat"])
        assert "cat" in table

    def test_multiword_fallback_is_token_mean(self, tmp_path):
        v1 = np.arange(300, dtype=np.float64) * 0.01
        v2 = np.ones(300) * 2.0
        lines = [
            "flying " + " ".join(f"{v:.6f}" for v in v1),
            "bird " + " ".join(f"{v:.6f}" for v in v2),
        ]
        path = self._write(tmp_path, lines)
        table = data.load_word_vectors(path, ["flying-bird"])
        want = (np.array([float(f"{v:.6f}") for v in v1], dtype=np.float32)
                + np.array([float(f"{v:.6f}") for v in v2], dtype=np.float32)) / 2
        np.testing.assert_allclose(table["flying-bird"], want, rtol=1e-6)

    def test_separator_normalisation(self, tmp_path):
        vec = " ".join(["1.0"] * 300)
        path = self._write(tmp_path, [f"ice_cream {vec}"])
        table = data.load_word_vectors(path, ["ice-cream"])
        assert "ice-cream" in table

    def test_missing_class_is_structured_error(self, tmp_path):
        vec = " ".join(["1.0"] * 300)
        path = self._write(tmp_path, [f"cat {vec}"])
        with pytest.raises(data.MissingSemanticsError) as exc:
            data.load_word_vectors(path, ["cat", "qworble"])
        assert "qworble" in str(exc.value)

    def test_wrong_float_count_rejected(self, tmp_path):
        path = self._write(tmp_path, ["cat 1.0 2.0 3.0"])
        with pytest.raises(ValueError):
            data.load_word_vectors(path, ["cat"])

    def test_write_then_load(self, tmp_path):
        rng = np.random.default_rng(0)
        vectors = {"cat": rng.random(300).astype(np.float32), "dog": rng.random(300).astype(np.float32)}
        path = tmp_path / "out.txt"
        data.write_word_vectors(path, vectors)
        table = data.load_word_vectors(path, ["cat", "dog"])
        np.testing.assert_allclose(table["cat"], vectors["cat"], atol=5e-7)


class TestSampler:
    def _setup(self, n_classes=3, cosines=None, temperature=1.0):
        corpus = _corpus(n_classes, photos_per=3, sketches_per=2)
        split = data.ZeroShotSplit.from_classes(corpus, corpus.classes, [])
        if cosines is None:
            vecs = {c: np.random.default_rng(i).standard_normal(300).astype(np.float32)
                    for i, c in enumerate(corpus.classes)}
        else:
            # place c1, c2 at chosen cosines to c0 in a 2-D plane lifted to 300-D
            vecs = {"c0": np.zeros(300, dtype=np.float32)}
            vecs["c0"][0] = 1.0
            for name, cos in cosines.items():
                v = np.zeros(300, dtype=np.float32)
                v[0] = cos
                v[1 if name == "c1" else 2] = np.sqrt(1 - cos**2)
                vecs[name] = v
        table = data.SemanticTable(vecs, dim=300, source="test")
        return data.TripletSampler(split, table, temperature=temperature, rng=np.random.default_rng(0))

    def test_two_classes_negative_forced(self):
        sampler = self._setup(n_classes=2)
        anchors, negatives = sampler.sample_class_pairs(50)
        for a, n in zip(anchors, negatives):
            assert a != n

    def test_negative_never_matches_anchor(self):
        sampler = self._setup(n_classes=5)
        anchors, negatives = sampler.sample_class_pairs(10_000)
        assert all(a != n for a, n in zip(anchors, negatives))

    def test_high_temperature_approaches_uniform(self):
        sampler = self._setup(n_classes=4, temperature=1e6)
        rng = np.random.default_rng(1)
        sampler.rng = rng
        anchors, negatives = sampler.sample_class_pairs(30_000)
        counts = {}
        for a, n in zip(anchors, negatives):
            if a == "c0":
                counts[n] = counts.get(n, 0) + 1
        total = sum(counts.values())
        for c in ("c1", "c2", "c3"):
            assert counts[c] / total == pytest.approx(1 / 3, abs=0.03)

    def test_softmax_probability_matches_hand_oracle(self):
        # cos(c0,c1)=0.9, cos(c0,c2)=0.1, tau=1 -> P(c1) = e^.9/(e^.9+e^.1)
        sampler = self._setup(n_classes=3, cosines={"c1": 0.9, "c2": 0.1}, temperature=1.0)
        want = np.exp(0.9) / (np.exp(0.9) + np.exp(0.1))
        assert want == pytest.approx(0.690, abs=5e-4)
        i = sampler.classes.index("c0")
        j = sampler.classes.index("c1")
        assert sampler._neg_probs[i][j] == pytest.approx(want, rel=1e-6)

    def test_empirical_frequencies_within_3_sigma(self):
        sampler = self._setup(n_classes=3, cosines={"c1": 0.9, "c2": 0.1}, temperature=1.0)
        n = 100_000
        anchors, negatives = sampler.sample_class_pairs(n)
        hits = sum(1 for a, m in zip(anchors, negatives) if a == "c0" and m == "c1")
        trials = sum(1 for a in anchors if a == "c0")
        p = np.exp(0.9) / (np.exp(0.9) + np.exp(0.1))
        sigma = np.sqrt(p * (1 - p) / trials)
        assert abs(hits / trials - p) < 3 * sigma

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError):
            self._setup(temperature=0.0)
