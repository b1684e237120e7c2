"""Template captions: a referring expression for the changed object plus a change phrase."""

from __future__ import annotations

import itertools
import re

from .scene import (ATTRIBUTES, COLORS, MATERIALS, SHAPES, SIZES, ChangeType,
                    GenerationError)

TEMPLATES = {
    ChangeType.COLOR: ("{ref} changed to {new}", "{ref} turned {new}", "{ref} became {new}"),
    ChangeType.TEXTURE: ("{ref} changed to {new}", "{ref} turned {new}", "{ref} became {new}"),
    ChangeType.ADD: ("{ref} has appeared.", "{ref} has been newly placed.", "{ref} has been added."),
    ChangeType.DROP: ("{ref} has disappeared.", "{ref} is missing.", "{ref} is gone.",
                      "{ref} is no longer there."),
    ChangeType.MOVE: ("{ref} moved.", "{ref} is in a different location.",
                      "{ref} changed its location."),
    ChangeType.DISTRACTOR: ("no change was made.", "the scene is the same as before.",
                            "the two scenes seem identical."),
}

RELATIONS = {
    "left": "to the left of",
    "right": "to the right of",
    "front": "in front of",
    "behind": "behind",
}

_ATTR_WORDS = {w: "size" for w in SIZES}
_ATTR_WORDS.update({w: "color" for w in COLORS})
_ATTR_WORDS.update({w: "material" for w in MATERIALS})
_NOUNS = set(SHAPES) | {"object"}


def tokenize(caption):
    return re.findall(r"[a-z]+", caption.lower())


def relation_holds(rel, obj, landmark):
    if rel == "left":
        return obj.x < landmark.x
    if rel == "right":
        return obj.x > landmark.x
    if rel == "front":
        return obj.y > landmark.y
    return obj.y < landmark.y


def _matching(scene, target, attrs):
    return [o for o in scene.objects if all(getattr(o, a) == getattr(target, a) for a in attrs)]


def minimal_attributes(target, scene):
    """Smallest attribute subset singling out ``target``; ``None`` if even all four fail.

    Subsets are tried by size, then in (size, color, material, shape) order.
    """
    for k in range(1, len(ATTRIBUTES) + 1):
        for subset in itertools.combinations(ATTRIBUTES, k):
            if len(_matching(scene, target, subset)) == 1:
                return subset
    return None


def _phrase(obj, attrs):
    words = [getattr(obj, a) for a in ("size", "color", "material") if a in attrs]
    words.append(obj.shape if "shape" in attrs else "object")
    return "the " + " ".join(words)


def referring_expression(target, scene):
    attrs = minimal_attributes(target, scene)
    if attrs is not None:
        return _phrase(target, attrs)
    # identical twins: full description plus one spatial relation to a unique landmark
    twins = _matching(scene, target, ATTRIBUTES)
    for landmark in scene.objects:
        if landmark.id == target.id:
            continue
        lm_attrs = minimal_attributes(landmark, scene)
        if lm_attrs is None:
            continue
        for rel in RELATIONS:
            hits = [o for o in twins if relation_holds(rel, o, landmark)]
            if len(hits) == 1 and hits[0].id == target.id:
                return f"{_phrase(target, ATTRIBUTES)} {RELATIONS[rel]} {_phrase(landmark, lm_attrs)}"
    raise GenerationError(f"object {target.id} cannot be referred to unambiguously")


def _change_fields(record, before, after):
    ctype = record.change_type
    if ctype is ChangeType.DISTRACTOR:
        return {}
    if ctype is ChangeType.ADD:
        ref = referring_expression(after.by_id(record.target_object_id), after)
    else:
        ref = referring_expression(before.by_id(record.target_object_id), before)
    return {"ref": ref, "new": record.new_value}


def generate_captions(record, before, after, rng, k=1):
    """``k`` captions built from distinct templates (fewer if the type has fewer)."""
    fields = _change_fields(record, before, after)
    templates = TEMPLATES[record.change_type]
    picks = rng.choice(len(templates), size=min(k, len(templates)), replace=False)
    return [templates[i].format(**fields) for i in picks]


def generate_caption(record, before, after, rng):
    return generate_captions(record, before, after, rng, k=1)[0]


def _parse_phrase(tokens, pos):
    if pos >= len(tokens) or tokens[pos] != "the":
        return None, pos
    pos += 1
    attrs = {}
    while pos < len(tokens) and tokens[pos] in _ATTR_WORDS:
        attrs[_ATTR_WORDS[tokens[pos]]] = tokens[pos]
        pos += 1
    if pos >= len(tokens) or tokens[pos] not in _NOUNS:
        return None, pos
    if tokens[pos] != "object":
        attrs["shape"] = tokens[pos]
    return attrs, pos + 1


def _parse_relation(tokens, pos):
    for rel, phrase in RELATIONS.items():
        words = phrase.split()
        if tokens[pos:pos + len(words)] == words:
            return rel, pos + len(words)
    return None, pos


def resolve_referent(caption, scene):
    """Objects of ``scene`` matched by the referring expression opening ``caption``."""
    tokens = tokenize(caption)
    attrs, pos = _parse_phrase(tokens, 0)
    if attrs is None:
        return []
    found = [o for o in scene.objects if all(getattr(o, a) == v for a, v in attrs.items())]
    rel, pos = _parse_relation(tokens, pos)
    if rel is None:
        return found
    lm_attrs, _ = _parse_phrase(tokens, pos)
    if lm_attrs is None:
        return []
    landmarks = [o for o in scene.objects if all(getattr(o, a) == v for a, v in lm_attrs.items())]
    if len(landmarks) != 1:
        return []
    return [o for o in found if o.id != landmarks[0].id and relation_holds(rel, o, landmarks[0])]
