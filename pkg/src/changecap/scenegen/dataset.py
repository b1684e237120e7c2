"""Assembling before/after pairs into a dataset on disk.

Every "before" scene yields two pairs: a DISTRACTOR (camera jitter only) and
one scene change (jitter plus a single edit).  Each scene index draws from
its own counter-based random stream, so pairs can be generated in any order.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from ..kvconfig import ConfigError, to_kv
from .captions import generate_captions
from .config import GenConfig
from .render import (BBox, CameraJitter, all_visible, box_iou, jitter_camera,
                     project_bbox, read_pnm, render, to_uint8, write_ppm)
from .scene import (SCENE_CHANGES, ChangeRecord, ChangeType, GenerationError, Scene,
                    apply_change, balanced_types, sample_scene)

MANIFEST = "manifest.jsonl"

# random-stream tags
_TYPES, _SCENE, _SPLIT = 1, 2, 3


@dataclass
class SamplePair:
    id: str
    split: str
    scene_index: int
    change: ChangeRecord
    captions: list
    bboxes: list
    jitter: CameraJitter
    scene_before: Scene
    scene_after: Scene
    difficulty_iou: float | None = None
    before: np.ndarray | None = field(default=None, repr=False)   # uint8 (H, W, 3)
    after: np.ndarray | None = field(default=None, repr=False)

    @property
    def change_type(self):
        return self.change.change_type

    def to_json(self):
        return {
            "id": self.id, "split": self.split, "scene_index": self.scene_index,
            "change": self.change.to_json(), "captions": list(self.captions),
            "bboxes": [b.to_json() for b in self.bboxes], "jitter": self.jitter.to_json(),
            "scene_before": self.scene_before.to_json(), "scene_after": self.scene_after.to_json(),
            "difficulty_iou": self.difficulty_iou,
            "before_image": f"{self.id}_before.ppm", "after_image": f"{self.id}_after.ppm",
        }

    @classmethod
    def from_json(cls, d):
        return cls(id=d["id"], split=d["split"], scene_index=d["scene_index"],
                   change=ChangeRecord.from_json(d["change"]), captions=list(d["captions"]),
                   bboxes=[BBox.from_json(b) for b in d["bboxes"]],
                   jitter=CameraJitter.from_json(d["jitter"]),
                   scene_before=Scene.from_json(d["scene_before"]),
                   scene_after=Scene.from_json(d["scene_after"]),
                   difficulty_iou=d["difficulty_iou"])


def target_bboxes(record, before, after, jitter, cfg):
    """Boxes of the changed object: both images for COLOR/TEXTURE/MOVE, one for ADD/DROP."""
    ctype = record.change_type
    oid = record.target_object_id
    identity = CameraJitter.identity(cfg)
    boxes = []
    if ctype in (ChangeType.COLOR, ChangeType.TEXTURE, ChangeType.MOVE, ChangeType.DROP):
        boxes.append(project_bbox(before.by_id(oid), identity, cfg, "before"))
    if ctype in (ChangeType.COLOR, ChangeType.TEXTURE, ChangeType.MOVE, ChangeType.ADD):
        boxes.append(project_bbox(after.by_id(oid), jitter, cfg, "after"))
    return boxes


def mean_box_iou(box_pairs):
    if not box_pairs:
        return None
    return float(np.mean([box_iou(a, b) for a, b in box_pairs]))


def viewpoint_difficulty(pair, cfg):
    """Mean IoU of unchanged objects' boxes across the pair; ``None`` when undefined."""
    identity = CameraJitter.identity(cfg)
    shared = sorted(set(pair.scene_before.ids()) & set(pair.scene_after.ids()))
    pairs = []
    for oid in shared:
        if oid == pair.change.target_object_id:
            continue
        pairs.append((project_bbox(pair.scene_before.by_id(oid), identity, cfg, "before"),
                      project_bbox(pair.scene_after.by_id(oid), pair.jitter, cfg, "after")))
    return mean_box_iou(pairs)


def split_counts(cfg):
    n = cfg.num_scenes
    n_val = int(round(n * cfg.split_val))
    n_test = int(round(n * cfg.split_test))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigError(f"split fractions leave an empty split for num_scenes={n}")
    return n_train, n_val, n_test


def assign_splits(cfg, seed):
    n_train, n_val, _ = split_counts(cfg)
    order = np.random.default_rng((seed, _SPLIT)).permutation(cfg.num_scenes)
    splits = np.empty(cfg.num_scenes, dtype=object)
    splits[order[:n_train]] = "train"
    splits[order[n_train:n_train + n_val]] = "val"
    splits[order[n_train + n_val:]] = "test"
    return list(splits)


def _valid_jitter(rng, scene, cfg):
    for _ in range(cfg.jitter_attempts):
        jit = jitter_camera(rng, cfg)
        if all_visible(scene, jit, cfg):
            return jit
    raise GenerationError("could not find a jitter keeping every object in frame")


def generate_scene_pairs(index, change_type, cfg, seed, split="train", images=True):
    """The DISTRACTOR pair and the ``change_type`` pair for one "before" scene."""
    rng = np.random.default_rng((seed, _SCENE, index))
    for _ in range(cfg.scene_attempts):
        try:
            before = sample_scene(rng, cfg, seed=index)
            after, record = apply_change(before, change_type, rng, cfg)
            jit_d = _valid_jitter(rng, before, cfg)
            jit_c = _valid_jitter(rng, after, cfg)
            caps_d = generate_captions(ChangeRecord(ChangeType.DISTRACTOR), before, before, rng,
                                       cfg.captions_per_pair)
            caps_c = generate_captions(record, before, after, rng, cfg.captions_per_pair)
            boxes_c = target_bboxes(record, before, after, jit_c, cfg)
        except GenerationError:
            continue
        break
    else:
        raise GenerationError(f"scene {index}: gave up after {cfg.scene_attempts} attempts")

    identity = CameraJitter.identity(cfg)
    out = []
    for tag, scene_after, rec, jit, caps, boxes in (
            ("d", before, ChangeRecord(ChangeType.DISTRACTOR), jit_d, caps_d, []),
            ("c", after, record, jit_c, caps_c, boxes_c)):
        pair = SamplePair(id=f"{index:06d}{tag}", split=split, scene_index=index, change=rec,
                          captions=caps, bboxes=boxes, jitter=jit, scene_before=before,
                          scene_after=scene_after)
        pair.difficulty_iou = viewpoint_difficulty(pair, cfg)
        if images:
            pair.before = to_uint8(render(before, identity, cfg))
            pair.after = to_uint8(render(scene_after, jit, cfg))
        out.append(pair)
    return out


def generate_pairs(cfg, seed, images=True):
    """Yield all ``2 * num_scenes`` pairs in scene order."""
    types = balanced_types(cfg.num_scenes, SCENE_CHANGES, np.random.default_rng((seed, _TYPES)))
    splits = assign_splits(cfg, seed)
    for i in range(cfg.num_scenes):
        yield from generate_scene_pairs(i, types[i], cfg, seed, splits[i], images)


def manifest_line(pair):
    return json.dumps(pair.to_json(), sort_keys=True)


def build_dataset(cfg, seed, out_dir, force=False):
    """Write pixmaps, ``manifest.jsonl`` and ``gen.cfg`` into ``out_dir``; returns the manifest path."""
    cfg.validate()
    split_counts(cfg)
    out_dir = os.fspath(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir):
        if not force:
            raise FileExistsError(f"{out_dir} is not empty (use force to overwrite)")
        shutil.rmtree(out_dir)
    tmp = out_dir.rstrip("/") + ".partial"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(os.path.join(tmp, "images"))
    with open(os.path.join(tmp, MANIFEST), "w", encoding="utf-8") as fh:
        for pair in generate_pairs(cfg, seed):
            write_ppm(os.path.join(tmp, "images", f"{pair.id}_before.ppm"), pair.before)
            write_ppm(os.path.join(tmp, "images", f"{pair.id}_after.ppm"), pair.after)
            fh.write(manifest_line(pair) + "\n")
    with open(os.path.join(tmp, "gen.cfg"), "w", encoding="utf-8") as fh:
        fh.write(f"# seed = {seed}\n" + to_kv(cfg))
    if os.path.isdir(out_dir):
        os.rmdir(out_dir)
    os.replace(tmp, out_dir)
    return os.path.join(out_dir, MANIFEST)


def load_manifest(data_dir, images=False, splits=None):
    pairs = []
    with open(os.path.join(data_dir, MANIFEST), encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            if splits is not None and d["split"] not in splits:
                continue
            pair = SamplePair.from_json(d)
            if images:
                pair.before = read_pnm(os.path.join(data_dir, "images", d["before_image"]))
                pair.after = read_pnm(os.path.join(data_dir, "images", d["after_image"]))
            pairs.append(pair)
    return pairs


def load_dataset_config(data_dir):
    from ..kvconfig import load_kv
    return load_kv(GenConfig, os.path.join(data_dir, "gen.cfg"))
