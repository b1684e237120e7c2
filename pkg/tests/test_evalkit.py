import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from changecap.evalkit import (bleu4, buckets_csv, confusion_offdiag_check, format_tables,
                               parse_change_type, peak_pixel, pointing_game, score_run,
                               upsample_bilinear)
from changecap.scenegen import BBox, ChangeType, GenConfig, generate_pairs

from oracles import bilinear_dense, bleu_cases, pointing_dense


def toks(s):
    return s.split()


class TestBleu:
    def test_identical_is_one(self):
        assert bleu4(toks("the cube moved away"), [toks("the cube moved away")]) == 1.0

    def test_disjoint_is_zero(self):
        assert bleu4(toks("a b c d"), [toks("w x y z")]) == 0.0

    def test_worked_example(self):
        got = bleu4(toks("the cube changed to yellow"), [toks("the large cube changed to yellow")])
        assert got == pytest.approx(np.exp(1 - 6 / 5) * (0.75 * 2 / 3 * 0.5) ** 0.25, abs=1e-12)

    @pytest.mark.parametrize("case", range(10))
    def test_hand_enumerated_cases(self, case):
        cand, refs, expected = bleu_cases()[case]
        assert bleu4(cand, refs) == pytest.approx(expected, abs=1e-6)

    def test_empty_inputs(self):
        with pytest.raises(ValueError):
            bleu4(toks("the cube"), [])
        with pytest.raises(ValueError):
            bleu4([], [toks("the cube")])

    @given(st.permutations([0, 1, 2]), st.integers(0, 2))
    @settings(max_examples=30, deadline=None)
    def test_reference_order_and_duplicates(self, perm, dup):
        refs = [toks("the large cube changed to yellow"), toks("the cube turned yellow"),
                toks("the big cube became yellow now")]
        cand = toks("the cube changed to yellow")
        base = bleu4(cand, refs)
        shuffled = [refs[i] for i in perm] + [refs[dup]]
        assert bleu4(cand, shuffled) == base

    @given(st.lists(st.sampled_from(["the", "cube", "red", "moved", "is", "gone"]), min_size=1,
                    max_size=12))
    @settings(max_examples=60, deadline=None)
    def test_range(self, cand):
        v = bleu4(cand, [toks("the red cube is gone"), toks("the cube moved")])
        assert 0.0 <= v <= 1.0


class TestParseChangeType:
    @pytest.mark.parametrize("caption,expected", [
        ("no change was made.", ChangeType.DISTRACTOR),
        ("the scene is the same as before.", ChangeType.DISTRACTOR),
        ("the two scenes seem identical.", ChangeType.DISTRACTOR),
        ("the small rubber sphere is no longer there.", ChangeType.DROP),
        ("the cube is gone.", ChangeType.DROP),
        ("the red object has been newly placed.", ChangeType.ADD),
        ("the cylinder changed its location.", ChangeType.MOVE),
        ("the cube is in a different location.", ChangeType.MOVE),
        ("the cube turned metal", ChangeType.TEXTURE),
        ("the large sphere became rubber", ChangeType.TEXTURE),
        ("the cube changed to yellow", ChangeType.COLOR),
        ("the small object turned cyan", ChangeType.COLOR),
    ])
    def test_templates(self, caption, expected):
        assert parse_change_type(caption) is expected

    def test_unparsed_flag(self):
        assert parse_change_type("blah blah", with_flag=True) == (ChangeType.DISTRACTOR, False)
        assert parse_change_type("", with_flag=True) == (ChangeType.DISTRACTOR, False)
        assert parse_change_type("no change was made.", with_flag=True) == \
            (ChangeType.DISTRACTOR, True)

    def test_material_of_referent_does_not_confuse_color(self):
        assert parse_change_type("the metal cube changed to red") is ChangeType.COLOR
        assert parse_change_type("the red cube changed to metal") is ChangeType.TEXTURE

    def test_relation_words_do_not_trigger_move(self):
        cap = "the large blue rubber sphere to the left of the red object is missing."
        assert parse_change_type(cap) is ChangeType.DROP

    @given(st.text(max_size=60))
    @settings(max_examples=100, deadline=None)
    def test_total(self, text):
        assert parse_change_type(text) in tuple(ChangeType)

    def test_generated_set_round_trips(self):
        for pair in generate_pairs(GenConfig(num_scenes=400), seed=5, images=False):
            for cap in pair.captions:
                assert parse_change_type(cap) is pair.change_type


class TestPointing:
    def test_two_by_two_example(self):
        att = [[1.0, 2.0], [3.0, 4.0]]
        assert peak_pixel(att, 8) == (7, 7)
        assert np.allclose(upsample_bilinear(att, 8, 8), bilinear_dense(att, 8), atol=1e-12)
        assert pointing_game(att, [BBox(6, 6, 8, 8)], 8)
        assert not pointing_game(att, [BBox(0, 0, 4, 4)], 8)

    def test_delta_at_box_centre_hits(self):
        att = np.zeros((64, 64))
        att[30, 40] = 1.0
        assert pointing_game(att, [BBox(35, 25, 45, 35)], 64)

    def test_corner_mass_misses(self):
        att = np.zeros((8, 8))
        att[0, 0] = 5.0
        assert not pointing_game(att, [BBox(30, 30, 40, 40)], 64)

    def test_ties_prefer_first_row_major(self):
        att = np.ones((4, 4))
        assert peak_pixel(att, 16) == (0, 0)

    def test_hundred_random_maps_match_dense_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            h = int(rng.integers(2, 9))
            att = rng.random((h, h))
            x0, y0 = rng.uniform(0, 48, size=2)
            boxes = [BBox(x0, y0, x0 + rng.uniform(4, 16), y0 + rng.uniform(4, 16))]
            dense = bilinear_dense(att.tolist(), 64)
            assert np.allclose(upsample_bilinear(att, 64, 64), dense, rtol=0, atol=1e-12)
            assert pointing_game(att, boxes, 64) == pointing_dense(att.tolist(), boxes, 64)

    def test_affine_rescaling_keeps_hit(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            att = rng.random((8, 8))
            box = [BBox(10, 10, 30, 30)]
            a, b = rng.uniform(0.1, 10), rng.uniform(-5, 5)
            assert pointing_game(att, box, 64) == pointing_game(a * att + b, box, 64)

    def test_errors(self):
        with pytest.raises(ValueError):
            pointing_game(np.ones((2, 2)), [], 8)
        with pytest.raises(ValueError):
            pointing_game(np.array([[np.nan, 1.0], [0.0, 0.0]]), [BBox(0, 0, 2, 2)], 8)


@pytest.fixture(scope="module")
def small_split():
    return [p for p in generate_pairs(GenConfig(num_scenes=60), seed=2, images=False)]


def perfect_prediction(pair, size=64):
    rec = {"id": pair.id, "caption": pair.captions[0], "att_before": None, "att_after": None}
    if pair.bboxes:
        maps = {}
        for tag in ("before", "after"):
            m = np.zeros((size, size))
            boxes = [b for b in pair.bboxes if b.image == tag]
            if boxes:
                b = boxes[0]
                m[int((b.y_min + b.y_max) / 2), int((b.x_min + b.x_max) / 2)] = 1.0
            maps[tag] = m.tolist()
        rec["att_before"], rec["att_after"] = maps["before"], maps["after"]
    return rec


class TestScoreRun:
    def test_perfect_predictions(self, small_split):
        report = score_run([perfect_prediction(p) for p in small_split], small_split)
        assert report["total"]["change_type_accuracy"] == 1.0
        assert report["total"]["bleu4"] == 1.0
        assert report["scene_change"]["pointing"] == 1.0
        m = np.array(report["confusion"]["matrix"])
        assert np.array_equal(m, np.diag(np.diag(m)))

    def test_all_distractor_predictions(self, small_split):
        preds = [{"id": p.id, "caption": "no change was made."} for p in small_split]
        report = score_run(preds, small_split)
        share = sum(p.change_type is ChangeType.DISTRACTOR for p in small_split) / len(small_split)
        assert report["total"]["change_type_accuracy"] == pytest.approx(share)
        assert report["scene_change"]["pointing"] is None
        assert all(confusion_offdiag_check(report).values())

    def test_confusion_rows_sum_to_gold_counts(self, small_split):
        rng = np.random.default_rng(0)
        caps = ["no change was made.", "the cube moved.", "the cube turned red", "junk"]
        preds = [{"id": p.id, "caption": caps[rng.integers(4)]} for p in small_split]
        report = score_run(preds, small_split)
        m = np.array(report["confusion"]["matrix"])
        for i, label in enumerate(report["confusion"]["labels"]):
            assert m[i].sum() == sum(p.change_type.value == label for p in small_split)
        assert report["unparsed"] == sum(p["caption"] == "junk" for p in preds)

    def test_totals_are_weighted_means(self, small_split):
        rng = np.random.default_rng(3)
        preds = [{"id": p.id, "caption": p.captions[rng.integers(3)] if rng.random() < 0.6
                  else "the cube moved."} for p in small_split]
        report = score_run(preds, small_split)
        for key in ("bleu4", "change_type_accuracy"):
            per = report["per_type"].values()
            weighted = sum(v[key] * v["n"] for v in per) / sum(v["n"] for v in per)
            assert report["total"][key] == pytest.approx(weighted, abs=1e-12)

    def test_buckets_partition_the_split(self, small_split):
        preds = [{"id": p.id, "caption": p.captions[0]} for p in small_split]
        report = score_run(preds, small_split)
        ids = [i for b in report["difficulty_buckets"] for i in b["ids"]]
        assert len(report["difficulty_buckets"]) == 5
        assert sorted(ids + report["excluded_from_buckets"]) == sorted(p.id for p in small_split)
        assert len(ids) == len(set(ids))
        edges = [(b["iou_min"], b["iou_max"]) for b in report["difficulty_buckets"]]
        assert all(edges[k][1] <= edges[k + 1][0] for k in range(4))

    def test_missing_ids_are_listed(self, small_split):
        preds = [{"id": p.id, "caption": "no change was made."} for p in small_split[1:]]
        with pytest.raises(KeyError, match=small_split[0].id):
            score_run(preds, small_split)

    def test_outputs_render(self, small_split):
        preds = [{"id": p.id, "caption": p.captions[0]} for p in small_split]
        report = score_run(preds, small_split)
        json.dumps(report)
        assert "Confusion" in format_tables(report)
        assert buckets_csv(report).count("\n") == 6

    def test_single_map_scored_against_both_images(self, small_split):
        pair = next(p for p in small_split if p.change_type is ChangeType.MOVE)
        rec = perfect_prediction(pair)
        rec["att_after"] = rec["att_before"]     # one shared map misses the moved copy
        report = score_run([rec], [pair])
        assert report["scene_change"]["pointing"] == 0.0
