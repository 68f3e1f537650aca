import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from geoevents import autoencoder as ae
from geoevents import imagecoherence as ic
from geoevents import textures as tx
from geoevents.core_types import DEFAULT_REGION, DetectorConfig, EventCandidate, make_tweet

SMALL = DetectorConfig(crop_size=8, crops_per_image=40, ae_epochs=2)


def box(x0, y0, x1, y1):
    return ic.PersonBox(x0, y0, x1, y1)


class TestUnionArea:
    def test_disjoint_boxes_add(self):
        assert ic.union_area([box(0, 0, 0.1, 0.5), box(0.5, 0.5, 1, 0.6)]) == \
            pytest.approx(0.05 + 0.05, abs=1e-15)

    def test_overlap_counted_once(self):
        assert ic.union_area([box(0, 0, 0.5, 0.5), box(0.25, 0.25, 0.75, 0.75)]) == \
            pytest.approx(0.25 + 0.25 - 0.0625, abs=1e-15)

    def test_nested_and_empty(self):
        assert ic.union_area([box(0, 0, 1, 1), box(0.2, 0.2, 0.3, 0.3)]) == pytest.approx(1.0)
        assert ic.union_area([]) == 0.0


_coord = st.integers(0, 20).map(lambda v: v / 20)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(_coord, _coord, _coord, _coord), max_size=6))
def test_union_area_matches_raster(raw):
    boxes = [box(min(a, c), min(b, d), max(a, c), max(b, d)) for a, b, c, d in raw]
    # boxes sit on a 1/20 grid, so a 20x20 raster is exact
    grid = np.zeros((20, 20), bool)
    for bx in boxes:
        grid[round(bx.x0 * 20):round(bx.x1 * 20), round(bx.y0 * 20):round(bx.y1 * 20)] = True
    assert ic.union_area(boxes) == pytest.approx(grid.sum() / 400, abs=1e-12)


class TestHumanFilter:
    def ann(self, *boxes):
        return ic.HumanAnnotation("i", tuple(boxes))

    def test_union_over_forty_percent_rejected(self):
        # three boxes of 0.15 each, total union 0.45, none over the single limit
        a = self.ann(box(0, 0, 0.3, 0.5), box(0.3, 0, 0.6, 0.5), box(0.6, 0, 0.9, 0.5))
        assert ic.union_area(a.person_boxes) == pytest.approx(0.45)
        assert ic.is_human_image(a)

    def test_single_box_quarter_rejected(self):
        assert ic.is_human_image(self.ann(box(0, 0, 0.5, 0.5)))

    def test_no_boxes_retained(self):
        assert not ic.is_human_image(self.ann())

    def test_thresholds_are_inclusive(self):
        assert ic.is_human_image(self.ann(box(0, 0, 0.5, 0.4)))  # exactly 0.20
        assert not ic.is_human_image(self.ann(box(0, 0, 0.5, 0.38)))
        # two boxes of 0.19 each: union 0.38 stays below the total limit
        assert not ic.is_human_image(self.ann(box(0, 0, 0.5, 0.38), box(0.5, 0, 1.0, 0.38)))
        # union of exactly 0.40 from boxes below the single limit
        four = self.ann(*(box(0.25 * k, 0, 0.25 * (k + 1), 0.4) for k in range(4)))
        assert ic.union_area(four.person_boxes) == pytest.approx(0.40, abs=1e-15)
        assert ic.is_human_image(four)

    def test_overlapping_boxes_use_union(self):
        # areas sum to 0.54 but the union is only 0.36
        a = self.ann(box(0, 0, 0.6, 0.3), box(0, 0.3, 0.6, 0.6), box(0, 0.15, 0.6, 0.45))
        assert ic.union_area(a.person_boxes) == pytest.approx(0.36)
        assert not ic.is_human_image(a)

    def test_missing_annotation_kept_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            kept = ic.filter_human_images(["a", "b"], {"b": self.ann(box(0, 0, 1, 1))},
                                          DetectorConfig())
        assert kept == ["a"] and "no human annotation" in caplog.text

    def test_box_validation(self):
        with pytest.raises(ValueError):
            box(0, 0, 1.2, 0.5)
        with pytest.raises(ValueError):
            box(0.5, 0, 0.2, 0.5)

    def test_annotations_round_trip(self, tmp_path):
        anns = [ic.HumanAnnotation("x", (box(0.1, 0.1, 0.2, 0.3),)), ic.HumanAnnotation("y")]
        p = tmp_path / "a.jsonl"
        ic.write_annotations(p, anns)
        assert ic.read_annotations(p) == {"x": anns[0], "y": anns[1]}

    def test_bad_annotation_line(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text('{"image_id": "x"}\n{"boxes": []}\n')
        with pytest.raises(ValueError, match=":2:"):
            ic.read_annotations(p)


class TestImages:
    def test_png_round_trip(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255.0
        ic.save_image(tmp_path / "a.png", px)
        np.testing.assert_allclose(ic.load_image(tmp_path / "a.png"), px, atol=1e-12)

    def test_ppm_and_grayscale(self, tmp_path):
        Image.fromarray(np.full((4, 4, 3), 51, np.uint8)).save(tmp_path / "a.ppm")
        np.testing.assert_allclose(ic.load_image(tmp_path / "a.ppm"), 0.2)
        Image.fromarray(np.full((4, 4), 255, np.uint8), "L").save(tmp_path / "g.png")
        g = ic.load_image(tmp_path / "g.png")
        assert g.shape == (4, 4, 3) and np.all(g == 1.0)

    def test_store_resolves_relative_refs(self, tmp_path):
        (tmp_path / "images").mkdir()
        ic.save_image(tmp_path / "images" / "im1.png", np.zeros((3, 3, 3)))
        store = ic.ImageStore(tmp_path)
        assert store.register("images/im1.png") == "im1"
        assert store.get("im1").shape == (3, 3, 3)
        assert store.get("unknown") is None

    def test_unreadable_image_is_none(self, tmp_path, caplog):
        (tmp_path / "bad.png").write_bytes(b"not a png")
        store = ic.ImageStore(tmp_path)
        store.register("bad.png")
        with caplog.at_level(logging.WARNING):
            assert store.get("bad") is None


class TestCrops:
    def test_exact_size_image_gives_identical_crops(self):
        img = np.random.default_rng(0).random((32, 32, 3))
        crops = ic.generate_crops(img, 5, 32, seed=0, image_id="a")
        assert len(crops) == 5
        for c in crops:
            assert np.array_equal(c.pixels, img)

    def test_crops_match_their_offsets(self):
        img = np.random.default_rng(1).random((64, 64, 3))
        arr = ic.crop_array(img, 500, 32, seed=3, image_id="img")
        rng = np.random.default_rng([3, ic.stable_hash("img")])
        offs = ic.crop_offsets((64, 64), 500, 32, rng)
        assert arr.shape == (500, 32, 32, 3)
        assert offs.min() >= 0 and offs.max() <= 32
        for k in (0, 250, 499):
            r, c = offs[k]
            assert np.array_equal(arr[k], img[r:r + 32, c:c + 32])

    def test_deterministic_per_image_id(self):
        img = np.random.default_rng(2).random((40, 48, 3))
        a = ic.crop_array(img, 20, 8, 1, "x")
        assert np.array_equal(a, ic.crop_array(img, 20, 8, 1, "x"))
        assert not np.array_equal(a, ic.crop_array(img, 20, 8, 1, "y"))

    def test_small_image_skipped(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert ic.generate_crops(np.zeros((16, 40, 3)), 5, 32, 0, "tiny") == []
        assert "tiny" in caplog.text

    def test_values_clamped(self):
        arr = ic.crop_array(np.full((8, 8, 3), 1.7), 2, 8, 0)
        assert arr.max() == 1.0


class TestSplitPartition:
    @pytest.mark.parametrize("k,train", [(3, 2), (4, 2), (5, 3), (6, 4), (9, 6)])
    def test_floor_rule(self, k, train):
        p = ic.split_partition([f"i{j}" for j in range(k)])
        assert len(p.train_images) == train and len(p.test_images) == k - train

    def test_two_images_bypass(self):
        assert ic.split_partition(["a", "b"]) is None

    def test_disjoint_and_deterministic(self):
        ids = [f"i{j}" for j in range(7)]
        p = ic.split_partition(ids, seed=4)
        assert not set(p.train_images) & set(p.test_images)
        assert set(p.train_images) | set(p.test_images) == set(ids)
        assert p == ic.split_partition(ids, seed=4)

    def test_partition_rejects_overlap(self):
        with pytest.raises(ValueError):
            ic.CropPartition(("a",), ("a",), 5)


@settings(max_examples=40)
@given(st.integers(3, 30), st.integers(0, 1000))
def test_partition_sides_non_empty(k, seed):
    p = ic.split_partition([f"i{j}" for j in range(k)], seed=seed)
    assert p.train_images and p.test_images
    assert len(p.train_images) == int(np.floor(2 * k / 3 + 1e-9))


class TestReport:
    def test_identical_distributions_give_one(self):
        r = ic.report_from_errors([1.0, 2.0, 3.0], [3.0, 1.0, 2.0])
        assert r.R_mean == 1.0 and r.verdict == "accept"

    def test_two_and_a_half_rejects(self):
        r = ic.report_from_errors([0.02, 0.02], [0.05, 0.05])
        assert r.R_mean == pytest.approx(2.5, rel=1e-12) and r.verdict == "reject"

    def test_flip_exactly_at_threshold(self):
        assert ic.report_from_errors([2.0], [3.0]).verdict == "reject"
        below = ic.report_from_errors([2.0], [np.nextafter(3.0, 0.0)])
        assert below.R_mean < 1.5 and below.verdict == "accept"

    def test_zero_training_error_is_degenerate_accept(self):
        r = ic.report_from_errors([0.0, 0.0], [0.0])
        assert r.degenerate and r.verdict == "accept" and r.R_mean is None

    def test_median_and_variance_ratios(self):
        r = ic.report_from_errors([1.0, 2.0, 6.0], [2.0, 4.0, 12.0])
        assert r.R_median == pytest.approx(2.0) and r.R_variance == pytest.approx(4.0)

    def test_negative_errors_rejected(self):
        with pytest.raises(ValueError):
            ic.REStats.of([1.0, -0.5])


@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=30),
       st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=30))
def test_ratio_identity(train, test):
    r = ic.report_from_errors(train, test)
    assert r.R_mean * r.train.mean == pytest.approx(r.test.mean, rel=1e-12)
    assert (r.verdict == "reject") == (r.R_mean >= 1.5)


class TestCoherenceRatio:
    def test_uses_model_errors_per_side(self):
        rng = np.random.default_rng(0)
        crops = {k: rng.random((4, 8, 8, 3)) for k in "abc"}
        part = ic.CropPartition(("a", "b"), ("c",), 4)
        m = ae.init(0, crop_size=8)
        r = ic.coherence_ratio(m, part, crops)
        train = np.concatenate([ae.reconstruction_errors(m, crops[k]) for k in "ab"])
        test = ae.reconstruction_errors(m, crops["c"])
        assert r.R_mean == pytest.approx(test.mean() / train.mean(), rel=1e-12)
        assert r.images_used == 3

    def test_score_images_small_config(self):
        rng = np.random.default_rng(1)
        imgs = {f"i{k}": im for k, im in enumerate(tx.coherent_images(3, 16, rng))}
        r = ic.score_images(imgs, SMALL)
        assert r is not None and r.R_mean > 0 and len(r.train_images) == 2
        assert r == ic.score_images(imgs, SMALL)

    def test_score_images_needs_three_usable(self):
        imgs = {"a": np.zeros((16, 16, 3)), "b": np.zeros((16, 16, 3)), "c": np.zeros((4, 4, 3))}
        assert ic.score_images(imgs, SMALL) is None


def tweet(i, text, images=()):
    return make_tweet(f"t{i}", i, 40.7, -74.0, text, list(images))


def candidate(tweets, top=(("fire", 3),)):
    return EventCandidate("c", 0, DEFAULT_REGION, tuple(tweets), top)


class TestSelectAndAnalyze:
    def store(self, n, size=16, seed=0):
        rng = np.random.default_rng(seed)
        return ic.ImageStore(arrays={f"im{k}": im for k, im in
                                     enumerate(tx.coherent_images(n, size, rng))})

    def test_images_need_a_top_keyword(self):
        tweets = [tweet(0, "#fire here", ["p/im0.png"]), tweet(1, "#flood", ["p/im1.png"])]
        assert ic.select_images(candidate(tweets), self.store(2), {}, SMALL) == ["im0"]

    def test_order_by_time_then_id(self):
        tweets = [tweet(5, "#fire", ["im2.png"]), tweet(1, "#fire", ["im1.png", "im0.png"])]
        assert ic.select_images(candidate(tweets), self.store(3), {}, SMALL) == \
            ["im0", "im1", "im2"]

    def test_two_images_bypass(self):
        tweets = [tweet(k, "#fire", [f"im{k}.png"]) for k in range(2)]
        a = ic.analyze_candidate(candidate(tweets), self.store(2), {}, SMALL)
        assert a.verdict == "bypass" and a.keep and a.report is None

    def test_no_images_bypass(self):
        a = ic.analyze_candidate(candidate([tweet(0, "#fire")]), self.store(0), {}, SMALL)
        assert a.verdict == "bypass" and a.keep

    def test_human_images_do_not_count(self):
        tweets = [tweet(k, "#fire", [f"im{k}.png"]) for k in range(3)]
        anns = {"im2": ic.HumanAnnotation("im2", (box(0, 0, 0.6, 0.6),))}
        a = ic.analyze_candidate(candidate(tweets), self.store(3), anns, SMALL)
        assert a.verdict == "bypass"

    def test_three_images_scored_and_cached(self):
        tweets = [tweet(k, "#fire", [f"im{k}.png"]) for k in range(3)]
        cache = {}
        a = ic.analyze_candidate(candidate(tweets), self.store(3), {}, SMALL, cache)
        assert a.verdict in ("accept", "reject") and a.report is not None
        assert a.keep == (a.report.R_mean < 1.5)
        assert ic.analyze_candidate(candidate(tweets), self.store(3), {}, SMALL, cache) is a

    def test_divergence_fails_open(self, monkeypatch):
        def boom(*args, **kw):
            raise ae.TrainingDivergedError("nan")
        monkeypatch.setattr(ic, "score_images", boom)
        tweets = [tweet(k, "#fire", [f"im{k}.png"]) for k in range(3)]
        a = ic.analyze_candidate(candidate(tweets), self.store(3), {}, SMALL)
        assert a.keep and a.degraded and a.verdict == "accept"
