"""Dataset tests: generation determinism, box tightness against a rasterization
oracle, nested splits, and COCO-style persistence round trips."""

import json

import numpy as np
import pytest

from semidet.data import (
    AnnotatedImage,
    SyntheticConfig,
    gen_synthetic,
    load_annotations,
    read_ppm,
    save_annotations,
    split_protocol,
    write_ppm,
)
from semidet.errors import ConfigError, DataError
from semidet.geometry import Box


class TestGenSynthetic:
    def test_empty_request(self):
        assert gen_synthetic(0, 0) == []

    def test_deterministic_byte_identical(self):
        a = gen_synthetic(42, 8)
        b = gen_synthetic(42, 8)
        for ia, ib in zip(a, b):
            assert np.array_equal(ia.image, ib.image)
            assert ia.gt == ib.gt

    def test_counts_and_bounds(self):
        cfg = SyntheticConfig()
        items = gen_synthetic(3, 20, cfg)
        for it in items:
            assert 1 <= len(it.gt) <= 4
            for box, cls in it.gt:
                assert 0 <= cls < cfg.classes
                assert 0 <= box.x1 < box.x2 <= cfg.width
                assert 0 <= box.y1 < box.y2 <= cfg.height

    def test_box_tightness_oracle(self):
        """Rasterize each gt box and measure the shape-colored fill fraction.

        Squares fill their box almost completely, circles pi/4 of it; a
        triangle can cover at most half of its tight box, so its bound is
        lower. Background pixels are noisy, shape pixels are one flat color.
        """
        items = gen_synthetic(17, 40)
        bounds = {0: 0.65, 1: 0.85, 2: 0.40}
        fractions = {0: [], 1: [], 2: []}
        for it in items:
            for box, cls in it.gt:
                patch = it.image[int(box.y1) : int(box.y2), int(box.x1) : int(box.x2)]
                colors, counts = np.unique(
                    patch.reshape(-1, 3), axis=0, return_counts=True
                )
                frac = counts.max() / patch.shape[0] / patch.shape[1]
                fractions[cls].append(frac)
                assert frac >= bounds[cls], (cls, frac)
        # circles and squares clear the 60% bar; triangles cannot (max 50%)
        assert min(fractions[0]) >= 0.6
        assert min(fractions[1]) >= 0.6
        assert max(fractions[2]) <= 0.58

    def test_edges_are_tight(self):
        """Every edge row/column of a gt box must contain shape pixels."""
        items = gen_synthetic(23, 25)
        for it in items:
            for box, cls in it.gt:
                patch = it.image[int(box.y1) : int(box.y2), int(box.x1) : int(box.x2)]
                colors, counts = np.unique(patch.reshape(-1, 3), axis=0, return_counts=True)
                shape_color = colors[counts.argmax()]
                hit = (patch == shape_color).all(axis=2)
                assert hit[0].any() and hit[-1].any()
                assert hit[:, 0].any() and hit[:, -1].any()


class TestSplitProtocol:
    def test_fraction_one(self):
        items = gen_synthetic(1, 10)
        split = split_protocol(items, 1.0, fold_seed=0)
        assert len(split.labeled) == 10 and split.unlabeled == []

    def test_arithmetic(self):
        items = gen_synthetic(1, 1000, SyntheticConfig(width=32, height=32))
        split = split_protocol(items, 0.1, fold_seed=2)
        assert len(split.labeled) == 100
        assert len(split.unlabeled) == 900

    def test_bad_fraction(self):
        items = gen_synthetic(1, 4)
        for frac in (0.0, -0.2, 1.5):
            with pytest.raises(ConfigError):
                split_protocol(items, frac, 0)

    def test_disjoint_and_deterministic(self):
        items = gen_synthetic(5, 60)
        for fold in range(4):
            s1 = split_protocol(items, 0.25, fold)
            s2 = split_protocol(items, 0.25, fold)
            ids1 = {im.id for im in s1.labeled}
            assert ids1 == {im.id for im in s2.labeled}
            assert ids1.isdisjoint({im.id for im in s1.unlabeled})
            assert len(ids1 | {im.id for im in s1.unlabeled}) == 60

    def test_folds_differ(self):
        items = gen_synthetic(5, 200)
        a = {im.id for im in split_protocol(items, 0.1, 1).labeled}
        b = {im.id for im in split_protocol(items, 0.1, 2).labeled}
        assert a != b

    def test_nested_fractions(self):
        items = gen_synthetic(5, 200)
        for fold in range(3):
            prev: set = set()
            for frac in (0.02, 0.05, 0.1, 0.5, 1.0):
                cur = {im.id for im in split_protocol(items, frac, fold).labeled}
                assert prev <= cur
                prev = cur


class TestPersistence:
    def test_ppm_roundtrip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (20, 30, 3), dtype=np.uint8)
        path = tmp_path / "x.ppm"
        write_ppm(img, path)
        assert np.array_equal(read_ppm(path), img)

    def test_save_load_roundtrip(self, tmp_path):
        items = gen_synthetic(9, 6)
        path = tmp_path / "ann.json"
        save_annotations(items, path)
        loaded = load_annotations(path)
        assert len(loaded.items) == len(items)
        for a, b in zip(items, loaded.items):
            assert a.id == b.id
            assert np.array_equal(a.image, b.image)
            assert len(a.gt) == len(b.gt)
            for (ba, ca), (bb, cb) in zip(a.gt, b.gt):
                assert ca == cb
                assert np.allclose(ba.astuple(), bb.astuple(), atol=1e-6)

    def test_roundtrip_idempotent(self, tmp_path):
        items = gen_synthetic(9, 3)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_annotations(items, p1)
        save_annotations(load_annotations(p1).items, p2)
        d1 = json.loads(p1.read_text())
        d2 = json.loads(p2.read_text())
        assert d1["annotations"] == d2["annotations"]
        assert d1["categories"] == d2["categories"]

    def test_xywh_xyxy_conversion(self, tmp_path):
        item = AnnotatedImage(
            image=np.zeros((32, 32, 3), dtype=np.uint8), gt=[(Box(5, 5, 15, 15), 1)], id=0
        )
        path = tmp_path / "one.json"
        save_annotations([item], path)
        doc = json.loads(path.read_text())
        assert doc["annotations"][0]["bbox"] == [5.0, 5.0, 10.0, 10.0]
        loaded = load_annotations(path)
        assert loaded.items[0].gt[0][0] == Box(5, 5, 15, 15)

    def test_bad_bbox_names_annotation(self, tmp_path):
        items = gen_synthetic(9, 1)
        path = tmp_path / "ann.json"
        save_annotations(items, path)
        doc = json.loads(path.read_text())
        doc["annotations"][0]["bbox"] = [10, 10, 0, 5]
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError, match="id=1"):
            load_annotations(path)

    def test_missing_image_file(self, tmp_path):
        items = gen_synthetic(9, 1)
        path = tmp_path / "ann.json"
        save_annotations(items, path)
        (tmp_path / "images" / "000000.ppm").unlink()
        with pytest.raises(DataError, match="000000"):
            load_annotations(path)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(DataError, match="malformed JSON"):
            load_annotations(path)
