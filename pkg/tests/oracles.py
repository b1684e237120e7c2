"""Independent reference computations shared by unit and acceptance tests."""

import math

import numpy as np


def _w(s):
    return s.split()


# (candidate, references, expected) with every expected value derived by hand
# from listed n-gram matches: precisions p1..p4, candidate length c and the
# closest reference length r (shorter wins ties).
BLEU_CASES = [
    # p = 5/5, 3/4, 2/3, 1/2; c=5, r=6
    ("the cube changed to yellow", ["the large cube changed to yellow"],
     math.exp(1 - 6 / 5) * (1 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25),
    ("no change was made", ["no change was made"], 1.0),
    ("a b c d", ["e f g h"], 0.0),
    # two tokens: no trigrams or 4-grams at all
    ("the cube", ["the cube moved"], 0.0),
    # clipped unigrams 3/5, bigrams 2/4, trigrams 1/3, no matching 4-gram
    ("the cube the cube moved", ["the cube moved", "the large cube moved"], 0.0),
    # all precisions 1; closest reference length 5 against c=4
    ("the small cube moved", ["the small cube moved away now", "the small cube has moved"],
     math.exp(1 - 5 / 4)),
    # lengths 4 and 6 tie around c=5; the shorter one makes BP = 1
    ("the red cube is gone", ["the red cube is", "the red cube is gone now"], 1.0),
    # p = 5/6, 3/5, 2/4, 1/3; c=6 > r=5
    ("the large red cube has moved", ["the large red cube moved"], (1 / 12) ** 0.25),
    # duplicated references change nothing
    ("the cube changed to yellow", ["the large cube changed to yellow"] * 2,
     math.exp(1 - 6 / 5) * (1 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25),
    # p = 4/5, 3/4, 2/3, 1/2; c = r = 5
    ("the cube and the sphere", ["the cube and the cube"], (1 / 5) ** 0.25),
]


def bleu_cases():
    return [(_w(c), [_w(r) for r in refs], v) for c, refs, v in BLEU_CASES]


def bilinear_dense(att, size):
    """Corner-aligned bilinear resize evaluated pixel by pixel with scalar arithmetic."""
    h, w = len(att), len(att[0])
    out = np.zeros((size, size))
    for r in range(size):
        y = r * (h - 1) / (size - 1) if size > 1 else 0.0
        y0 = min(int(math.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for c in range(size):
            x = c * (w - 1) / (size - 1) if size > 1 else 0.0
            x0 = min(int(math.floor(x)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            out[r, c] = ((1 - fy) * ((1 - fx) * att[y0][x0] + fx * att[y0][x1])
                         + fy * ((1 - fx) * att[y1][x0] + fx * att[y1][x1]))
    return out


def pointing_dense(att, boxes, size):
    """Pointing-game hit using the dense oracle and a first-maximum scan."""
    up = bilinear_dense(att, size)
    best, where = -math.inf, (0, 0)
    for r in range(size):
        for c in range(size):
            if up[r, c] > best:
                best, where = up[r, c], (r, c)
    r, c = where
    return any(b.x_min <= c + 0.5 <= b.x_max and b.y_min <= r + 0.5 <= b.y_max for b in boxes)


def _conv_same_loops(x, k, b):
    """3x3 zero-padded cross-correlation of one (C, H, W) grid with scalar loops."""
    c_in, h, w = x.shape
    c_out, _, ks, _ = k.shape
    p = ks // 2
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for r in range(h):
            for c in range(w):
                acc = b[o]
                for ci in range(c_in):
                    for i in range(ks):
                        for j in range(ks):
                            rr, cc = r + i - p, c + j - p
                            if 0 <= rr < h and 0 <= cc < w:
                                acc += k[o, ci, i, j] * x[ci, rr, cc]
                out[o, r, c] = acc
    return out


def dual_attention_loops(x_bef, x_aft, k1, b1, k2, b2):
    """Per-sample loop version of the dual localiser: maps and pooled vectors."""
    maps, pooled = [], []
    for xb, xa in zip(x_bef, x_aft):
        diff = xa - xb
        row_maps, row_pool = [], []
        for x in (xb, xa):
            h = np.maximum(_conv_same_loops(np.concatenate([x, diff]), k1, b1), 0.0)
            z = _conv_same_loops(h, k2, b2)[0]
            a = np.vectorize(lambda v: 1.0 / (1.0 + math.exp(-v)))(z)
            row_maps.append(a)
            row_pool.append(np.array([sum(a[r, c] * x[ch, r, c] for r in range(x.shape[1])
                                          for c in range(x.shape[2])) for ch in range(x.shape[0])]))
        maps.append(row_maps)
        pooled.append(row_pool)
    return maps, pooled


def adam_trace(x, grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam with bias correction, one step per gradient."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def primitive_cases(seed=11):
    """``name -> (fn, leaves)`` covering every differentiable primitive.

    Inputs are random normals, so ReLU kinks and pooling ties have
    probability zero of landing inside a finite-difference step.
    """
    from changecap.numkernel import functional as F
    from changecap.numkernel.gradcheck import leaf

    rng = np.random.default_rng(seed)
    a = leaf(rng.normal(size=(2, 3, 4, 4)))
    b = leaf(rng.normal(size=(2, 3, 4, 4)))
    m = leaf(rng.normal(size=(2, 1, 4, 4)))
    v = leaf(rng.normal(size=(5, 3)))
    w = leaf(rng.normal(size=(4, 3)))
    bias = leaf(rng.normal(size=4))
    pos = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
    k = leaf(rng.normal(size=(2, 3, 3, 3)))
    kb = leaf(rng.normal(size=2))
    x_l = leaf(rng.normal(size=(2, 3)))
    h_l = leaf(rng.normal(size=(2, 4)))
    c_l = leaf(rng.normal(size=(2, 4)))
    w_ih = leaf(rng.normal(0, 0.5, size=(16, 3)))
    w_hh = leaf(rng.normal(0, 0.5, size=(16, 4)))
    b_l = leaf(rng.normal(size=16))
    logits = leaf(rng.normal(size=(2, 3, 5)))
    return {
        "add": (lambda: F.add(a, b), [a, b]),
        "sub": (lambda: F.sub(a, b), [a, b]),
        "mul": (lambda: F.mul(a, b), [a, b]),
        "matmul": (lambda: F.matmul(v, F.reshape(w, (3, 4))), [v, w]),
        "linear": (lambda: F.linear(v, w, bias), [v, w, bias]),
        "reshape": (lambda: F.reshape(a, (6, 16)), [a]),
        "concat": (lambda: F.concat([a, b], axis=1), [a, b]),
        "stack": (lambda: F.stack([a, b], axis=1), [a, b]),
        "getitem": (lambda: F.getitem(a, (slice(None), 1)), [a]),
        "embedding": (lambda: F.embedding(v, [0, 2, 2, 4]), [v]),
        "sum": (lambda: F.sum(a, axis=1), [a]),
        "mean": (lambda: F.mean(a, axis=(2, 3)), [a]),
        "relu": (lambda: F.relu(a), [a]),
        "sigmoid": (lambda: F.sigmoid(a), [a]),
        "tanh": (lambda: F.tanh(a), [a]),
        "softmax": (lambda: F.softmax(v, axis=1), [v]),
        "log_softmax": (lambda: F.log_softmax(v, axis=0), [v]),
        "abs": (lambda: F.abs(a), [a]),
        "log": (lambda: F.log(pos), [pos]),
        "entropy": (lambda: F.entropy(v, axis=1), [v]),
        "conv2d": (lambda: F.conv2d(a, k, kb, padding=1), [a, k, kb]),
        "conv2d_strided": (lambda: F.conv2d(a, k, kb, padding=1, stride=2), [a, k, kb]),
        "max_pool2d": (lambda: F.max_pool2d(a, 2), [a]),
        "avg_pool2d": (lambda: F.avg_pool2d(a, 2), [a]),
        "global_max_pool": (lambda: F.global_max_pool(a), [a]),
        "spatial_pool": (lambda: F.spatial_pool(m, a), [m, a]),
        "weighted_sum": (lambda: F.weighted_sum(m.reshape(2, 16), a.reshape(2, 16, 3)), [m, a]),
        "lstm_step": (lambda: F.concat(list(F.lstm_step(x_l, h_l, c_l, w_ih, w_hh, b_l)), axis=1),
                      [x_l, h_l, c_l, w_ih, w_hh, b_l]),
        "cross_entropy": (lambda: F.cross_entropy(logits, [[1, 2, 0], [3, 0, 0]], pad_index=0),
                          [logits]),
    }
