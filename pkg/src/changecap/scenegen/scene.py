"""Symbolic scenes, single-edit scene changes and balanced change-type sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

SHAPES = ("cube", "sphere", "cylinder")
COLORS = ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow")
MATERIALS = ("rubber", "metal")
SIZES = ("small", "large")
ATTRIBUTES = ("size", "color", "material", "shape")

MIN_OBJECTS, MAX_OBJECTS = 3, 8


class GenerationError(RuntimeError):
    """A random draw could not be completed; the caller should resample."""


class ChangeType(str, Enum):
    COLOR = "COLOR"
    TEXTURE = "TEXTURE"
    ADD = "ADD"
    DROP = "DROP"
    MOVE = "MOVE"
    DISTRACTOR = "DISTRACTOR"


SCENE_CHANGES = (ChangeType.COLOR, ChangeType.TEXTURE, ChangeType.ADD,
                 ChangeType.DROP, ChangeType.MOVE)
ALL_TYPES = SCENE_CHANGES + (ChangeType.DISTRACTOR,)


@dataclass(frozen=True)
class SceneObject:
    id: int
    shape: str
    color: str
    material: str
    size: str
    x: float
    y: float

    def __post_init__(self):
        if (self.shape not in SHAPES or self.color not in COLORS
                or self.material not in MATERIALS or self.size not in SIZES):
            raise ValueError(f"attribute outside vocabulary: {self}")

    @property
    def position(self):
        return (self.x, self.y)

    def attrs(self):
        return {a: getattr(self, a) for a in ATTRIBUTES}

    def to_json(self):
        return {"id": self.id, "shape": self.shape, "color": self.color,
                "material": self.material, "size": self.size, "x": self.x, "y": self.y}

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class Scene:
    objects: tuple
    seed: int = 0

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        if not MIN_OBJECTS <= len(ids) <= MAX_OBJECTS:
            raise ValueError(f"scene must hold {MIN_OBJECTS}..{MAX_OBJECTS} objects, got {len(ids)}")

    def by_id(self, oid):
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def ids(self):
        return [o.id for o in self.objects]

    def to_json(self):
        return {"seed": self.seed, "objects": [o.to_json() for o in self.objects]}

    @classmethod
    def from_json(cls, d):
        return cls(tuple(SceneObject.from_json(o) for o in d["objects"]), d.get("seed", 0))


@dataclass
class ChangeRecord:
    change_type: ChangeType
    target_object_id: int | None = None
    old_value: object = None
    new_value: object = None

    def __post_init__(self):
        self.change_type = ChangeType(self.change_type)
        if (self.change_type is ChangeType.DISTRACTOR) != (self.target_object_id is None):
            raise ValueError("DISTRACTOR records carry no target; every other type needs one")

    def to_json(self):
        def enc(v):
            return list(v) if isinstance(v, tuple) else v
        return {"change_type": self.change_type.value, "target_object_id": self.target_object_id,
                "old_value": enc(self.old_value), "new_value": enc(self.new_value)}

    @classmethod
    def from_json(cls, d):
        def dec(v):
            return tuple(v) if isinstance(v, list) else v
        return cls(d["change_type"], d["target_object_id"], dec(d["old_value"]), dec(d["new_value"]))


def object_radius(size, cfg):
    """Radius of the circle circumscribing any silhouette of this size."""
    side = cfg.large_side if size == "large" else cfg.small_side
    return side / 2.0 * math.sqrt(2.0)


def _fits(x, y, size, others, cfg):
    r = object_radius(size, cfg)
    for o in others:
        if math.hypot(x - o.x, y - o.y) < r + object_radius(o.size, cfg):
            return False
    return True


def _free_position(rng, size, others, cfg, accept=None):
    lo, hi = cfg.margin, 1.0 - cfg.margin
    for _ in range(cfg.placement_attempts):
        x, y = (float(v) for v in rng.uniform(lo, hi, size=2))
        if _fits(x, y, size, others, cfg) and (accept is None or accept(x, y)):
            return x, y
    return None


def _random_attrs(rng):
    return dict(shape=SHAPES[rng.integers(len(SHAPES))], color=COLORS[rng.integers(len(COLORS))],
                material=MATERIALS[rng.integers(len(MATERIALS))], size=SIZES[rng.integers(len(SIZES))])


def sample_scene(rng, cfg, seed=0):
    """Random non-overlapping scene with ``min_objects..max_objects`` objects."""
    for _ in range(cfg.scene_attempts):
        count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        objects = []
        for oid in range(count):
            attrs = _random_attrs(rng)
            pos = _free_position(rng, attrs["size"], objects, cfg)
            if pos is None:
                break
            objects.append(SceneObject(id=oid, x=pos[0], y=pos[1], **attrs))
        else:
            return Scene(tuple(objects), seed)
    raise GenerationError(f"could not place {cfg.min_objects}..{cfg.max_objects} objects "
                          f"after {cfg.scene_attempts} attempts")


def overlap_violations(scene, cfg):
    objs = scene.objects
    bad = 0
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            a, b = objs[i], objs[j]
            if math.hypot(a.x - b.x, a.y - b.y) < object_radius(a.size, cfg) + object_radius(b.size, cfg):
                bad += 1
    return bad


def apply_change(scene, change_type, rng, cfg):
    """Return ``(after_scene, record)`` differing from ``scene`` by one edit."""
    change_type = ChangeType(change_type)
    objs = list(scene.objects)
    if change_type is ChangeType.DISTRACTOR:
        return scene, ChangeRecord(change_type)
    if change_type is ChangeType.ADD:
        if len(objs) >= MAX_OBJECTS:
            raise GenerationError("scene is full; cannot ADD")
        attrs = _random_attrs(rng)
        pos = _free_position(rng, attrs["size"], objs, cfg)
        if pos is None:
            raise GenerationError("no free space for ADD")
        new = SceneObject(id=max(o.id for o in objs) + 1, x=pos[0], y=pos[1], **attrs)
        return (Scene(tuple(objs + [new]), scene.seed),
                ChangeRecord(change_type, new.id, None, new.position))
    if not objs:
        raise GenerationError(f"{change_type.value} needs at least one object")
    k = int(rng.integers(len(objs)))
    target = objs[k]
    if change_type is ChangeType.COLOR:
        choices = [c for c in COLORS if c != target.color]
        new_color = choices[rng.integers(len(choices))]
        objs[k] = replace(target, color=new_color)
        return Scene(tuple(objs), scene.seed), ChangeRecord(change_type, target.id, target.color, new_color)
    if change_type is ChangeType.TEXTURE:
        new_mat = "metal" if target.material == "rubber" else "rubber"
        objs[k] = replace(target, material=new_mat)
        return Scene(tuple(objs), scene.seed), ChangeRecord(change_type, target.id, target.material, new_mat)
    if change_type is ChangeType.DROP:
        if len(objs) <= MIN_OBJECTS:
            raise GenerationError("dropping would leave too few objects")
        del objs[k]
        return Scene(tuple(objs), scene.seed), ChangeRecord(change_type, target.id, target.position, None)
    if change_type is ChangeType.MOVE:
        floor = cfg.move_floor * object_radius("large", cfg)
        others = objs[:k] + objs[k + 1:]
        pos = _free_position(rng, target.size, others, cfg,
                             accept=lambda x, y: math.hypot(x - target.x, y - target.y) >= floor)
        if pos is None:
            raise GenerationError("no free destination for MOVE")
        objs[k] = replace(target, x=pos[0], y=pos[1])
        return Scene(tuple(objs), scene.seed), ChangeRecord(change_type, target.id, target.position, pos)
    raise ValueError(change_type)


def diff_scenes(before, after):
    """List every symbolic difference as ``(kind, object_id, field)`` tuples."""
    out = []
    b_ids, a_ids = set(before.ids()), set(after.ids())
    for oid in sorted(b_ids - a_ids):
        out.append(("removed", oid, None))
    for oid in sorted(a_ids - b_ids):
        out.append(("added", oid, None))
    for oid in sorted(b_ids & a_ids):
        ob, oa = before.by_id(oid), after.by_id(oid)
        for attr in ATTRIBUTES:
            if getattr(ob, attr) != getattr(oa, attr):
                out.append(("attribute", oid, attr))
        if ob.position != oa.position:
            out.append(("position", oid, None))
    return out


def balanced_types(n, types, rng):
    """``n`` draws from ``types`` whose per-type counts differ by at most one."""
    types = list(types)
    out = []
    while len(out) < n:
        out.extend(types[i] for i in rng.permutation(len(types)))
    return out[:n]


@dataclass
class TypeSampler:
    """Streaming balanced sampler: a fresh permutation of ``types`` per block."""

    types: tuple
    rng: np.random.Generator
    _queue: list = field(default_factory=list)

    def __call__(self):
        if not self._queue:
            self._queue = [self.types[i] for i in self.rng.permutation(len(self.types))]
        return self._queue.pop(0)
