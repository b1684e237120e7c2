"""Dual Attention localiser, Dynamic Speaker, frozen encoder and the training loss.

All functions are batched: feature grids are (N, C, H, W), pooled vectors
are (N, C) and token arrays are (N, T) integer matrices padded with
``PAD``.  Parameters live in a flat ``dict[str, Tensor]`` so checkpoints
and optimizers can treat every model the same way.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .kvconfig import ConfigError
from .numkernel import functional as F
from .numkernel.tensor import Tensor, no_tape
from .scenegen.captions import tokenize

PAD, BOS, EOS = 0, 1, 2
RESERVED = ("<pad>", "<bos>", "<eos>")
ENCODER_SEED = 1303
ENCODER_HIDDEN = 24
DEFAULT_LAMBDA_L1 = 2.5e-3
DEFAULT_LAMBDA_ENT = 1e-4


# ---------------------------------------------------------------- vocabulary

class Vocabulary:
    """Bijective word <-> index map with reserved ``<pad>``, ``<bos>``, ``<eos>``."""

    def __init__(self, words):
        extra = sorted(set(words) - set(RESERVED))
        self.itos = list(RESERVED) + extra
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def build(cls, captions):
        words = set()
        for cap in captions:
            words.update(tokenize(cap))
        return cls(words)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def covers(self, caption):
        return all(w in self.stoi for w in tokenize(caption))

    def encode(self, caption):
        """``[BOS, w_1, ..., w_n, EOS]``; unknown words raise ``KeyError``."""
        words = tokenize(caption)
        missing = [w for w in words if w not in self.stoi]
        if missing:
            raise KeyError(f"words outside the vocabulary: {missing}")
        return [BOS] + [self.stoi[w] for w in words] + [EOS]

    def decode(self, ids):
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.itos[i])
        return " ".join(words)

    def to_json(self):
        return list(self.itos)

    @classmethod
    def from_json(cls, itos):
        if tuple(itos[:3]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        vocab = cls(itos[3:])
        if vocab.itos != list(itos):
            raise ValueError("vocabulary words must be unique and sorted")
        return vocab


def pad_batch(seqs, pad=PAD):
    """Stack variable-length token lists into an (N, T_max) array."""
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


# ------------------------------------------------------------------ encoder

class FrozenEncoder:
    """Two strided ReLU convolutions with fixed random weights.

    Maps (N, S, S, 3) images to (N, C, S/8, S/8) grids.  The weights come from
    a named seed and are never exposed to an optimizer.
    """

    def __init__(self, channels=32, image_size=64, seed=ENCODER_SEED):
        if image_size % 8:
            raise ConfigError("image_size must be divisible by 8")
        self.channels = channels
        self.image_size = image_size
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.k1 = rng.normal(0.0, np.sqrt(2.0 / (3 * 25)), size=(ENCODER_HIDDEN, 3, 5, 5))
        self.b1 = rng.normal(0.0, 0.1, size=ENCODER_HIDDEN)
        self.k2 = rng.normal(0.0, np.sqrt(2.0 / (ENCODER_HIDDEN * 9)),
                             size=(channels, ENCODER_HIDDEN, 3, 3))
        self.b2 = rng.normal(0.0, 0.1, size=channels)

    @property
    def grid(self):
        return self.image_size // 8

    def encode(self, images, batch=256):
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (self.image_size, self.image_size, 3):
            raise ValueError(f"encoder expects (N, {self.image_size}, {self.image_size}, 3) "
                             f"images, got {images.shape}")
        x = images.astype(np.float64)
        if images.dtype == np.uint8:
            x /= 255.0
        x = x.transpose(0, 3, 1, 2)
        out = []
        with no_tape():
            for start in range(0, len(x), batch):
                h = F.relu(F.conv2d(x[start:start + batch], self.k1, self.b1, padding=2, stride=4))
                h = F.relu(F.conv2d(h, self.k2, self.b2, padding=1, stride=2))
                out.append(h.data)
        return np.concatenate(out, axis=0)

    def fingerprint(self):
        h = hashlib.sha256()
        for arr in (self.k1, self.b1, self.k2, self.b2):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# ----------------------------------------------------------- configuration

@dataclass
class ModelConfig:
    """Sizes shared by DUDA and the baselines."""

    kind: str = "duda"
    channels: int = 32          # C, feature channels
    grid: int = 8               # H = W of the feature grid
    att_channels: int = 32      # F, hidden channels of the attention convs
    d_hidden: int = 128         # D_h, both LSTMs
    d_embed: int = 64           # D_e, word embeddings
    d_latent: int = 128         # D_v, dynamic-attention input projection
    max_len: int = 20           # longest generated caption, in words
    conv_width1: int = 16       # baseline conv stack widths
    conv_width2: int = 32

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and v <= 0:
                raise ConfigError(f"{f.name} must be positive")

    def to_json(self):
        return asdict(self)


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(rng, shape, fan_in, name):
    return Tensor(uniform_init(rng, shape, fan_in), requires_grad=True, name=name)


def _zeros(shape, name):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def init_dual_attention(cfg, rng):
    c, f = cfg.channels, cfg.att_channels
    return {
        "att.conv1.k": _param(rng, (f, 2 * c, 3, 3), 2 * c * 9, "att.conv1.k"),
        "att.conv1.b": _zeros((f,), "att.conv1.b"),
        "att.conv2.k": _param(rng, (1, f, 3, 3), f * 9, "att.conv2.k"),
        "att.conv2.b": _zeros((1,), "att.conv2.b"),
    }


def init_lstm(prefix, d_in, d_h, rng):
    return {
        f"{prefix}.w_ih": _param(rng, (4 * d_h, d_in), d_h, f"{prefix}.w_ih"),
        f"{prefix}.w_hh": _param(rng, (4 * d_h, d_h), d_h, f"{prefix}.w_hh"),
        f"{prefix}.b": _zeros((4 * d_h,), f"{prefix}.b"),
    }


def init_word_output(cfg, vocab_size, rng):
    return {
        "embed": Tensor(rng.normal(0.0, 0.1, size=(vocab_size, cfg.d_embed)), requires_grad=True,
                        name="embed"),
        "out.w": _param(rng, (vocab_size, cfg.d_hidden), cfg.d_hidden, "out.w"),
        "out.b": _zeros((vocab_size,), "out.b"),
    }


def init_speaker(cfg, vocab_size, rng):
    c, dh = cfg.channels, cfg.d_hidden
    params = {
        "dyn.w": _param(rng, (cfg.d_latent, 3 * c), 3 * c, "dyn.w"),
        "dyn.b": _zeros((cfg.d_latent,), "dyn.b"),
        "dyn.alpha.w": _param(rng, (3, dh), dh, "dyn.alpha.w"),
        "dyn.alpha.b": _zeros((3,), "dyn.alpha.b"),
    }
    params.update(init_lstm("dyn.lstm", cfg.d_latent + dh, dh, rng))
    params.update(init_lstm("cap.lstm", cfg.d_embed + c, dh, rng))
    params.update(init_word_output(cfg, vocab_size, rng))
    return params


# ------------------------------------------------------------ dual attention

@dataclass
class AttentionOutputs:
    a_bef: Tensor    # (N, 1, H, W)
    a_aft: Tensor
    l_bef: Tensor    # (N, C)
    l_diff: Tensor
    l_aft: Tensor


def attention_map(x, params):
    """``sigmoid(conv_2(relu(conv_1(x))))`` with the shared attention weights."""
    h = F.relu(F.conv2d(x, params["att.conv1.k"], params["att.conv1.b"], padding=1))
    return F.sigmoid(F.conv2d(h, params["att.conv2.k"], params["att.conv2.b"], padding=1))


def dual_attention(x_bef, x_aft, params):
    """Localise the change separately in both images and pool their features."""
    x_bef, x_aft = F.as_tensor(x_bef), F.as_tensor(x_aft)
    if x_bef.shape != x_aft.shape or x_bef.ndim != 4:
        raise F.ShapeError(f"dual_attention: grids {x_bef.shape} and {x_aft.shape} must match "
                           "and be (N, C, H, W)")
    n = x_bef.shape[0]
    x_diff = F.sub(x_aft, x_bef)
    both = F.concat([F.concat([x_bef, x_diff], axis=1), F.concat([x_aft, x_diff], axis=1)], axis=0)
    maps = attention_map(both, params)      # both branches in one conv pass
    a_bef = F.getitem(maps, slice(0, n))
    a_aft = F.getitem(maps, slice(n, 2 * n))
    l_bef = F.spatial_pool(a_bef, x_bef)
    l_aft = F.spatial_pool(a_aft, x_aft)
    return AttentionOutputs(a_bef, a_aft, l_bef, F.sub(l_aft, l_bef), l_aft)


# ----------------------------------------------------------- dynamic speaker

@dataclass
class SpeakerContext:
    """Per-caption quantities the speaker reuses at every step."""

    latent: Tensor   # v = relu(W_d1 [l_bef; l_diff; l_aft] + b_d1), (N, D_v)
    pooled: Tensor   # (N, 3, C) stacked l_bef, l_diff, l_aft


def speaker_context(att, params):
    cat = F.concat([att.l_bef, att.l_diff, att.l_aft], axis=1)
    latent = F.relu(F.linear(cat, params["dyn.w"], params["dyn.b"]))
    return SpeakerContext(latent, F.stack([att.l_bef, att.l_diff, att.l_aft], axis=1))


def dynamic_step(ctx, h_c_prev, state, params):
    """One dynamic-attention update; returns ``(alpha_logits, alpha, l_dyn, state)``."""
    h_d, c_d = state
    u = F.concat([ctx.latent, h_c_prev], axis=1)
    h_d, c_d = F.lstm_step(u, h_d, c_d, params["dyn.lstm.w_ih"], params["dyn.lstm.w_hh"],
                           params["dyn.lstm.b"])
    logits = F.linear(h_d, params["dyn.alpha.w"], params["dyn.alpha.b"])
    alpha = F.softmax(logits, axis=1)
    return logits, alpha, F.weighted_sum(alpha, ctx.pooled), (h_d, c_d)


def _zero_state(n, d):
    return Tensor(np.zeros((n, d))), Tensor(np.zeros((n, d)))


def _caption_step(prev_tokens, visual, state, params):
    emb = F.embedding(params["embed"], prev_tokens)
    h, c = F.lstm_step(F.concat([emb, visual], axis=1), state[0], state[1],
                       params["cap.lstm.w_ih"], params["cap.lstm.w_hh"], params["cap.lstm.b"])
    return F.linear(h, params["out.w"], params["out.b"]), (h, c)


@dataclass
class SpeakerOutput:
    logits: Tensor         # (N, T-1, V)
    alpha_logits: Tensor   # (N, T-1, 3)
    alpha: Tensor          # (N, T-1, 3)


def _check_tokens(tokens, vocab_size):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise ValueError(f"targets must be (N, T>=2) token arrays, got shape {tokens.shape}")
    if np.any(tokens[:, 0] != BOS):
        raise ValueError("every target must begin with <bos>")
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise IndexError(f"token index outside the vocabulary of size {vocab_size}")
    return tokens


def speaker_forward(att, tokens, params):
    """Teacher-forced Dynamic Speaker: step t reads ground-truth token t-1."""
    d_h = params["cap.lstm.w_hh"].shape[1]
    tokens = _check_tokens(tokens, params["embed"].shape[0])
    n, t_len = tokens.shape
    ctx = speaker_context(att, params)
    dyn_state = _zero_state(n, d_h)
    cap_state = _zero_state(n, d_h)
    h_c = cap_state[0]
    logits, alpha_logits, alphas = [], [], []
    for t in range(t_len - 1):
        a_logit, alpha, l_dyn, dyn_state = dynamic_step(ctx, h_c, dyn_state, params)
        step_logits, cap_state = _caption_step(tokens[:, t], l_dyn, cap_state, params)
        h_c = cap_state[0]
        logits.append(step_logits)
        alpha_logits.append(a_logit)
        alphas.append(alpha)
    return SpeakerOutput(F.stack(logits, axis=1), F.stack(alpha_logits, axis=1),
                         F.stack(alphas, axis=1))


def greedy_loop(n, max_len, step):
    """Shared greedy decoder.

    ``step(prev_tokens) -> (logits ndarray (n, V), extra ndarray or None)``
    is called until every row has produced ``EOS`` or ``max_len`` words.
    ``<pad>`` and ``<bos>`` are never emitted; ties go to the lowest index.
    """
    prev = np.full(n, BOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    words = [[] for _ in range(n)]
    extras = [[] for _ in range(n)]
    for _ in range(max_len + 1):
        logits, extra = step(prev)
        logits = np.array(logits, dtype=np.float64)
        logits[:, PAD] = -np.inf
        logits[:, BOS] = -np.inf
        nxt = np.argmax(logits, axis=1)
        for i in range(n):
            if done[i]:
                continue
            if nxt[i] == EOS or len(words[i]) == max_len:
                done[i] = True
                continue
            words[i].append(int(nxt[i]))
            if extra is not None:
                extras[i].append(np.array(extra[i]))
        if done.all():
            break
        prev = nxt
    return words, extras


def decode_greedy(att, params, max_len):
    """Greedy captions plus the alpha row recorded for every emitted word."""
    d_h = params["cap.lstm.w_hh"].shape[1]
    with no_tape():
        n = att.l_bef.shape[0]
        ctx = speaker_context(att, params)
        box = {"dyn": _zero_state(n, d_h), "cap": _zero_state(n, d_h)}

        def step(prev):
            _, alpha, l_dyn, box["dyn"] = dynamic_step(ctx, box["cap"][0], box["dyn"], params)
            logits, box["cap"] = _caption_step(prev, l_dyn, box["cap"], params)
            return logits.data, alpha.data

        return greedy_loop(n, max_len, step)


# --------------------------------------------------------------------- loss

@dataclass
class LossParts:
    total: Tensor
    xe: float          # summed cross-entropy divided by batch size
    l1: float
    entropy: float
    tokens: int        # non-pad target positions


def compute_loss(logits, targets, a_bef=None, a_aft=None, alpha_logits=None,
                 lambda_l1=DEFAULT_LAMBDA_L1, lambda_ent=DEFAULT_LAMBDA_ENT):
    """``XE + lambda_l1 * L1 - lambda_ent * H(alpha)``.

    ``targets`` is (N, T-1) (the caption shifted by one); XE is summed over
    tokens and averaged over the batch, L1 is the batch mean of
    ``sum|a_bef| + sum|a_aft|`` and the entropy term is the mean over
    non-pad steps.  Missing attention inputs drop their terms; a single
    shared map is passed as ``a_bef`` with ``a_aft=None``.
    """
    if lambda_l1 < 0 or lambda_ent < 0:
        raise ConfigError("regularisation weights must be non-negative")
    targets = np.asarray(targets, dtype=np.int64)
    n = targets.shape[0]
    xe = F.mul(F.cross_entropy(logits, targets, PAD), 1.0 / n)
    total = xe
    l1_val = ent_val = 0.0
    if a_bef is not None and lambda_l1 > 0:
        l1 = F.sum(F.abs(a_bef))
        if a_aft is not None:
            l1 = F.add(l1, F.sum(F.abs(a_aft)))
        l1 = F.mul(l1, 1.0 / n)
        l1_val = float(l1.data)
        total = F.add(total, F.mul(l1, lambda_l1))
    if alpha_logits is not None and lambda_ent > 0:
        mask = (targets != PAD).astype(np.float64)
        ent = F.mul(F.sum(F.mul(F.entropy(alpha_logits, axis=-1), mask)), 1.0 / mask.sum())
        ent_val = float(ent.data)
        total = F.sub(total, F.mul(ent, lambda_ent))
    return LossParts(total, float(xe.data), l1_val, ent_val, int((targets != PAD).sum()))


def alpha_entropy(alpha_logits, targets):
    """Mean entropy of the alpha distributions over non-pad steps (for inspection)."""
    mask = (np.asarray(targets) != PAD).astype(np.float64)
    ent = F.entropy(alpha_logits, axis=-1).data
    return float((ent * mask).sum() / mask.sum())
