"""Caption and localisation metrics: BLEU-4, change-type parsing, Pointing Game, reports."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter

import numpy as np

from .scenegen.captions import tokenize
from .scenegen.scene import ALL_TYPES, COLORS, MATERIALS, SCENE_CHANGES, ChangeType

TYPE_ORDER = ALL_TYPES  # COLOR, TEXTURE, ADD, DROP, MOVE, DISTRACTOR
SHORT = {ChangeType.COLOR: "C", ChangeType.TEXTURE: "T", ChangeType.ADD: "A",
         ChangeType.DROP: "D", ChangeType.MOVE: "M", ChangeType.DISTRACTOR: "DI"}
NUM_BUCKETS = 5


# ---------------------------------------------------------------------- BLEU

def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate, references):
    """Sentence BLEU-4 with clipped counts, closest-reference brevity penalty, no smoothing."""
    if not references:
        raise ValueError("bleu4 needs at least one reference")
    if not candidate:
        raise ValueError("bleu4 needs a non-empty candidate")
    log_sum = 0.0
    for n in range(1, 5):
        cand = _ngrams(candidate, n)
        total = sum(cand.values())
        if total == 0:
            return 0.0
        max_ref = Counter()
        for ref in references:
            for gram, cnt in _ngrams(ref, n).items():
                if cnt > max_ref[gram]:
                    max_ref[gram] = cnt
        clipped = sum(min(cnt, max_ref[gram]) for gram, cnt in cand.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / 4.0)


# ------------------------------------------------------------ type parsing

_COLOR_WORDS = set(COLORS)
_MATERIAL_WORDS = set(MATERIALS)


def _has(tokens, phrase):
    words = phrase.split()
    k = len(words)
    return any(tokens[i:i + k] == words for i in range(len(tokens) - k + 1))


def parse_change_type(caption, with_flag=False):
    """Map a caption onto a change type by keyword rules over the template grammar.

    Unmatched captions fall back to DISTRACTOR; ``with_flag`` additionally
    returns whether any rule fired.
    """
    tokens = tokenize(caption) if isinstance(caption, str) else list(caption)

    def done(ctype, parsed=True):
        return (ctype, parsed) if with_flag else ctype

    if _has(tokens, "no change") or _has(tokens, "same as before") or "identical" in tokens:
        return done(ChangeType.DISTRACTOR)
    if "disappeared" in tokens or "missing" in tokens or "gone" in tokens \
            or _has(tokens, "no longer"):
        return done(ChangeType.DROP)
    if "appeared" in tokens or "added" in tokens or _has(tokens, "newly placed"):
        return done(ChangeType.ADD)
    if "moved" in tokens or _has(tokens, "different location") \
            or _has(tokens, "changed its location"):
        return done(ChangeType.MOVE)
    for i, tok in enumerate(tokens):
        if tok == "changed" and i + 2 < len(tokens) and tokens[i + 1] == "to":
            new = tokens[i + 2]
        elif tok in ("turned", "became") and i + 1 < len(tokens):
            new = tokens[i + 1]
        else:
            continue
        if new in _COLOR_WORDS:
            return done(ChangeType.COLOR)
        if new in _MATERIAL_WORDS:
            return done(ChangeType.TEXTURE)
    return done(ChangeType.DISTRACTOR, False)


# ------------------------------------------------------------ pointing game

def upsample_bilinear(att, height, width):
    """Bilinear resize of a 2-D map with corner-aligned sampling grids."""
    att = np.asarray(att, dtype=np.float64)
    h, w = att.shape

    def axis_weights(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis_weights(h, height)
    c0, c1, fc = axis_weights(w, width)
    top = att[r0][:, c0] * (1 - fc) + att[r0][:, c1] * fc
    bottom = att[r1][:, c0] * (1 - fc) + att[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def peak_pixel(att, image_size):
    up = upsample_bilinear(att, image_size, image_size)
    idx = int(np.argmax(up))  # first maximum in row-major order
    return divmod(idx, image_size)


def pointing_game(att, boxes, image_size):
    """Whether the peak of the upsampled map falls inside any of ``boxes``."""
    if not boxes:
        raise ValueError("pointing game needs at least one box")
    att = np.asarray(att, dtype=np.float64)
    if not np.all(np.isfinite(att)):
        raise ValueError("attention map contains non-finite values")
    row, col = peak_pixel(att, image_size)
    return any(b.contains_pixel(row, col) for b in boxes)


def pair_pointing_hit(pred, pair, image_size):
    """Hit only if every image that has boxes is hit by its own map; ``None`` when unscored."""
    if not pair.bboxes or pred.get("att_before") is None:
        return None
    hit = True
    for tag, key in (("before", "att_before"), ("after", "att_after")):
        boxes = [b for b in pair.bboxes if b.image == tag]
        if boxes:
            hit = hit and pointing_game(np.asarray(pred[key])[0] if np.ndim(pred[key]) == 3
                                        else pred[key], boxes, image_size)
    return hit


# ---------------------------------------------------------------- reports

def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _score_rows(rows):
    """Aggregate per-sample rows into accuracy/BLEU/pointing summaries."""
    out = {"n": len(rows)}
    out["bleu4"] = _mean([r["bleu4"] for r in rows])
    out["change_type_accuracy"] = _mean([float(r["pred_type"] == r["gold_type"]) for r in rows])
    scored = [r["pointing"] for r in rows if r["pointing"] is not None]
    out["pointing"] = float(np.mean(scored)) if scored else None
    out["pointing_n"] = len(scored)
    return out


def score_run(predictions, pairs, image_size=64):
    """Evaluate ``predictions`` (dicts with ``id`` and ``caption``) against ``pairs``."""
    by_id = {p["id"]: p for p in predictions}
    missing = sorted(p.id for p in pairs if p.id not in by_id)
    if missing:
        raise KeyError(f"predictions missing for {len(missing)} pairs: {missing[:10]}")
    gold_ids = {p.id for p in pairs}
    extra = sorted(set(by_id) - gold_ids)
    if extra:
        raise KeyError(f"predictions for unknown pairs: {extra[:10]}")

    rows = []
    for pair in pairs:
        pred = by_id[pair.id]
        cand = tokenize(pred["caption"])
        refs = [tokenize(c) for c in pair.captions]
        ptype, parsed = parse_change_type(cand, with_flag=True)
        rows.append({
            "id": pair.id, "gold_type": pair.change_type, "pred_type": ptype, "parsed": parsed,
            "bleu4": bleu4(cand, refs) if cand else 0.0,
            "pointing": pair_pointing_hit(pred, pair, image_size),
            "difficulty": pair.difficulty_iou,
        })

    report = {"total": _score_rows(rows)}
    report["scene_change"] = _score_rows([r for r in rows if r["gold_type"] is not ChangeType.DISTRACTOR])
    report["distractor"] = _score_rows([r for r in rows if r["gold_type"] is ChangeType.DISTRACTOR])
    report["per_type"] = {t.value: _score_rows([r for r in rows if r["gold_type"] is t])
                          for t in TYPE_ORDER}
    labels = [t.value for t in TYPE_ORDER]
    index = {t: i for i, t in enumerate(TYPE_ORDER)}
    matrix = np.zeros((len(labels), len(labels)), dtype=int)
    for r in rows:
        matrix[index[r["gold_type"]], index[r["pred_type"]]] += 1
    report["confusion"] = {"labels": labels, "matrix": matrix.tolist()}
    report["unparsed"] = sum(1 for r in rows if not r["parsed"])

    ranked = sorted((r for r in rows if r["difficulty"] is not None),
                    key=lambda r: (r["difficulty"], r["id"]))
    buckets = []
    for chunk in np.array_split(np.arange(len(ranked)), NUM_BUCKETS):
        members = [ranked[i] for i in chunk]
        entry = _score_rows(members)
        entry["iou_min"] = members[0]["difficulty"] if members else None
        entry["iou_max"] = members[-1]["difficulty"] if members else None
        entry["ids"] = [m["id"] for m in members]
        buckets.append(entry)
    report["difficulty_buckets"] = buckets
    report["excluded_from_buckets"] = sorted(r["id"] for r in rows if r["difficulty"] is None)
    return report


def confusion_offdiag_check(report):
    """For each scene-change type, whether DISTRACTOR is its largest off-diagonal column."""
    labels = report["confusion"]["labels"]
    m = np.asarray(report["confusion"]["matrix"])
    di = labels.index(ChangeType.DISTRACTOR.value)
    out = {}
    for t in SCENE_CHANGES:
        i = labels.index(t.value)
        off = [(m[i, j], labels[j]) for j in range(len(labels)) if j != i]
        best = max(v for v, _ in off)
        out[t.value] = bool(best == 0 or m[i, di] == best)
    return out


def format_tables(report):
    """Plain-text tables laid out like the captioning and pointing result tables."""
    buf = io.StringIO()

    def pct(v):
        return "   -  " if v is None else f"{100 * v:6.2f}"

    buf.write("            Total  SceneChg  Distractor\n")
    buf.write("BLEU-4    " + " ".join(pct(report[k]["bleu4"]) + "  " for k in
                                      ("total", "scene_change", "distractor")) + "\n")
    buf.write("TypeAcc   " + " ".join(pct(report[k]["change_type_accuracy"]) + "  " for k in
                                      ("total", "scene_change", "distractor")) + "\n\n")
    buf.write("            " + "  ".join(f"{SHORT[t]:>6}" for t in TYPE_ORDER) + "\n")
    for key, label in (("bleu4", "BLEU-4"), ("change_type_accuracy", "TypeAcc"),
                       ("pointing", "Pointing")):
        buf.write(f"{label:<10}" + "  ".join(pct(report["per_type"][t.value][key])
                                             for t in TYPE_ORDER) + "\n")
    buf.write(f"\nPointing total (scene changes): {pct(report['scene_change']['pointing'])}\n\n")
    buf.write("Confusion (rows gold, cols predicted)\n")
    labels = report["confusion"]["labels"]
    buf.write("      " + " ".join(f"{SHORT[ChangeType(l)]:>5}" for l in labels) + "\n")
    for l, row in zip(labels, report["confusion"]["matrix"]):
        buf.write(f"{SHORT[ChangeType(l)]:>5} " + " ".join(f"{v:5d}" for v in row) + "\n")
    return buf.getvalue()


def buckets_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bucket", "iou_min", "iou_max", "n", "bleu4", "change_type_accuracy", "pointing"])
    for k, b in enumerate(report["difficulty_buckets"], start=1):
        writer.writerow([k, b["iou_min"], b["iou_max"], b["n"], b["bleu4"],
                         b["change_type_accuracy"], b["pointing"]])
    return buf.getvalue()
