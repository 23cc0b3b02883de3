import copy
import json
import logging

import numpy as np
import pytest

from sglayout.errors import ParseError, UnknownVocab
from sglayout.ingest import (annotation_mask, ingest_annotations, parse_annotations,
                             patches_from_annotations, scenes_from_annotations)
from sglayout.scenegraph import BuildConfig, Kind


def square(x, y, s):
    return [x, y, x + s, y, x + s, y + s, x, y + s]


FIXTURE = {
    "images": [{"id": 1, "width": 100, "height": 80}],
    "categories": [{"id": 18, "name": "dog"}, {"id": 149, "name": "grass"}],
    "annotations": [
        {"id": 5, "image_id": 1, "category_id": 18, "bbox": [10, 20, 30, 40], "iscrowd": 0,
         "segmentation": [[10, 20, 40, 20, 40, 60, 10, 60]]},
    ],
}


def scene_doc():
    """One image holding three large objects."""
    return {
        "images": [{"id": 3, "width": 64, "height": 64}],
        "categories": [{"id": 18, "name": "dog"}, {"id": 3, "name": "car"},
                       {"id": 149, "name": "grass"}],
        "annotations": [
            {"id": 1, "image_id": 3, "category_id": 18, "bbox": [4, 4, 20, 20],
             "segmentation": [square(4, 4, 20)]},
            {"id": 2, "image_id": 3, "category_id": 3, "bbox": [36, 8, 20, 16],
             "segmentation": [[36, 8, 56, 8, 56, 24, 36, 24]]},
            {"id": 3, "image_id": 3, "category_id": 149, "bbox": [0, 40, 64, 24],
             "segmentation": [[0, 40, 64, 40, 64, 64, 0, 64]]},
        ],
    }


def test_minimal_fixture_counts_and_box_conversion():
    aset = parse_annotations(FIXTURE)
    assert aset.counts == (1, 1)
    assert aset.annotations[0].bbox.as_tuple() == (10, 20, 40, 60)
    assert aset.categories[18].kind is Kind.THING and aset.categories[149].kind is Kind.STUFF
    assert len(aset.vocabulary()) == 2


def test_explicit_stuff_ids():
    aset = parse_annotations(FIXTURE, stuff_ids=[18])
    assert aset.categories[18].kind is Kind.STUFF and aset.categories[149].kind is Kind.THING


def test_rle_and_crowd_are_skipped_with_warning(caplog):
    doc = copy.deepcopy(FIXTURE)
    doc["annotations"].append({"id": 6, "image_id": 1, "category_id": 18, "bbox": [0, 0, 5, 5],
                               "segmentation": {"counts": "abc", "size": [80, 100]}})
    with caplog.at_level(logging.WARNING):
        aset = parse_annotations(doc)
    assert aset.skipped_crowd == 1 and aset.counts == (1, 1)
    assert any("skipped 1" in r.message for r in caplog.records)
    doc["annotations"][-1] = dict(doc["annotations"][0], id=7, iscrowd=1)
    assert parse_annotations(doc).skipped_crowd == 1


def test_zero_size_box_skipped():
    doc = copy.deepcopy(FIXTURE)
    doc["annotations"].append(dict(doc["annotations"][0], id=9, bbox=[3, 3, 0, 5]))
    aset = parse_annotations(doc)
    assert aset.skipped_degenerate == 1 and aset.counts == (1, 1)


@pytest.mark.parametrize("mutate, where", [
    (lambda d: d.pop("images"), "images"),
    (lambda d: d["annotations"][0].update(bbox=[1, 2, 3]), "annotations[0].bbox"),
    (lambda d: d["annotations"][0].update(segmentation=[[1, 2, 3]]), "annotations[0].segmentation[0]"),
    (lambda d: d["annotations"][0].update(image_id=99), "annotations[0]"),
    (lambda d: d["categories"][0].pop("name"), "categories[0]"),
    (lambda d: d["images"][0].update(width="wide"), "images[0].width"),
])
def test_malformed_documents(mutate, where):
    doc = copy.deepcopy(FIXTURE)
    mutate(doc)
    with pytest.raises(ParseError, match=where.replace("[", r"\[").replace("]", r"\]")):
        parse_annotations(doc)


def test_unknown_category_id():
    doc = copy.deepcopy(FIXTURE)
    doc["annotations"][0]["category_id"] = 7
    with pytest.raises(UnknownVocab):
        parse_annotations(doc)


def test_ingest_from_file(tmp_path):
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(FIXTURE))
    assert ingest_annotations(path).counts == (1, 1)
    path.write_text("{ broken")
    with pytest.raises(ParseError, match="line 1"):
        ingest_annotations(path)


def test_annotation_mask_is_polygon_area():
    ann = parse_annotations(FIXTURE).annotations[0]
    mask = annotation_mask(ann, 100, 80)
    assert mask.sum() == 30 * 40
    ys, xs = np.nonzero(mask)
    assert (xs.min(), ys.min(), xs.max(), ys.max()) == (10, 20, 39, 59)


def test_scenes_from_annotations():
    aset = parse_annotations(scene_doc())
    samples = scenes_from_annotations(aset, BuildConfig(min_objects=3, max_objects=8), augment=True)
    assert len(samples) == 1
    s = samples[0]
    assert [o.category for o in s.graph.objects] == ["dog", "car", "grass"]
    assert s.gt_eps.shape == (3, 10) and s.gt_masks.shape == (3, 16, 16)
    assert np.all((s.gt_eps >= 0) & (s.gt_eps <= 1))
    # grass is stuff: trivial points of its normalized box
    np.testing.assert_allclose(s.gt_eps[2], [0, 52 / 64, 0.5, 40 / 64, 1, 52 / 64, 0.5, 1, 0.5, 52 / 64])
    again = scenes_from_annotations(aset, BuildConfig(min_objects=3, max_objects=8), augment=True)
    assert again[0].graph == s.graph
    assert scenes_from_annotations(aset, BuildConfig(min_objects=4)) == []


def test_patches_from_annotations():
    aset = parse_annotations(scene_doc())
    patches = patches_from_annotations(aset)
    assert [r.category for r, _ in patches] == ["dog", "car"]   # grass is not a retrieval class
    rec, crop = patches[0]
    assert crop.shape == (20, 20) and crop.all()
    m = 9 / 19   # lower median of 20 tied edge pixels, over a 19-pixel span
    np.testing.assert_allclose(rec.descriptor, [0, m, m, 0, 1, m, m, 1, 0.5, 0.5])
    assert rec.image_size == (64, 64) and rec.bbox_dims == (20 / 64, 20 / 64)
    assert patches_from_annotations(aset, categories=["car"])[0][0].patch_id == 2
