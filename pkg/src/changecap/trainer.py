"""Deterministic training, validation, checkpointing and prediction."""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import pixel_difference
from .duda import (DEFAULT_LAMBDA_ENT, DEFAULT_LAMBDA_L1, FrozenEncoder, ModelConfig, Vocabulary,
                   pad_batch)
from .kvconfig import ConfigError, load_kv
from .models import MODEL_KINDS, Batch, Captioner
from .numkernel import Adam, Tape, backward, clip_grad_norm, no_tape
from .scenegen.dataset import load_dataset_config, load_manifest

SPLITS = ("train", "val", "test")
CHECKPOINT = "model.ckpt"
_SHUFFLE_STREAM = 29


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Optimisation and model-size settings; loadable from a key=value file."""

    model: str = "duda"
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    lambda_l1: float = DEFAULT_LAMBDA_L1
    lambda_ent: float = DEFAULT_LAMBDA_ENT
    seed: int = 0
    max_len: int = 20
    clip_norm: float = 5.0
    channels: int = 32
    att_channels: int = 32
    d_hidden: int = 128
    d_embed: int = 64
    d_latent: int = 128
    conv_width1: int = 16
    conv_width2: int = 32

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size <= 0 or self.lr <= 0 or self.max_len <= 0 or self.clip_norm <= 0:
            raise ConfigError("batch_size, lr, max_len and clip_norm must be positive")
        if self.lambda_l1 < 0 or self.lambda_ent < 0:
            raise ConfigError("regularisation weights must be non-negative")

    def model_config(self, grid):
        return ModelConfig(kind=self.model, channels=self.channels, grid=grid,
                           att_channels=self.att_channels, d_hidden=self.d_hidden,
                           d_embed=self.d_embed, d_latent=self.d_latent, max_len=self.max_len,
                           conv_width1=self.conv_width1, conv_width2=self.conv_width2)

    def to_json(self):
        return asdict(self)


def load_train_config(path, **overrides):
    return load_kv(TrainConfig, path, **overrides)


# ------------------------------------------------------------------- data

@dataclass
class FeatureSet:
    """Encoder grids for every pair of a dataset, aligned with ``pairs``."""

    pairs: list
    x_bef: np.ndarray
    x_aft: np.ndarray
    pix: np.ndarray
    image_size: int
    encoder_fingerprint: str

    def indices(self, split):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return np.array([i for i, p in enumerate(self.pairs) if p.split == split], dtype=np.int64)

    def batch(self, idx, tokens=None):
        return Batch(self.x_bef[idx], self.x_aft[idx], tokens, self.pix[idx])


def encode_pairs(pairs, encoder):
    """Run the frozen encoder over ``pairs`` (which must carry images)."""
    before = np.stack([p.before for p in pairs])
    after = np.stack([p.after for p in pairs])
    return FeatureSet(pairs, encoder.encode(before), encoder.encode(after),
                      pixel_difference(before, after, encoder.grid), encoder.image_size,
                      encoder.fingerprint())


_FEATURE_CACHE = {}


def load_features(data_dir, channels=32, use_cache=True):
    """Load a generated dataset and encode it; results are memoised per process."""
    data_dir = os.path.abspath(os.fspath(data_dir))
    manifest = os.path.join(data_dir, "manifest.jsonl")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    st = os.stat(manifest)
    key = (data_dir, st.st_size, st.st_mtime_ns, channels)
    if use_cache and key in _FEATURE_CACHE:
        return _FEATURE_CACHE[key]
    gen_cfg = load_dataset_config(data_dir)
    encoder = FrozenEncoder(channels=channels, image_size=gen_cfg.image_size)
    feats = encode_pairs(load_manifest(data_dir, images=True), encoder)
    if use_cache:
        _FEATURE_CACHE[key] = feats
    return feats


# ---------------------------------------------------------------- logging

@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)   # one dict per finished epoch, numbered from 1
    best_epoch: int = 0
    best_val_loss: float | None = None
    checkpoint: str | None = None

    def to_json(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: Captioner
    log: TrainLog


def _tokens_for(vocab, pairs, choice=None):
    seqs = []
    for k, p in enumerate(pairs):
        cap = p.captions[0 if choice is None else choice[k] % len(p.captions)]
        seqs.append(vocab.encode(cap))
    return pad_batch(seqs)


def validation_loss(model, feats, idx, batch=256):
    """Cross-entropy per target token over every reference of every pair in ``idx``."""
    total, count = 0.0, 0
    rows, seqs = [], []
    for i in idx:
        for cap in feats.pairs[i].captions:
            if model.vocab.covers(cap):
                rows.append(i)
                seqs.append(model.vocab.encode(cap))
    if not rows:
        return None
    rows = np.array(rows)
    with no_tape():
        for s in range(0, len(rows), batch):
            tokens = pad_batch(seqs[s:s + batch])
            parts = model.loss(feats.batch(rows[s:s + batch], tokens), 0.0, 0.0)
            total += parts.xe * len(tokens)
            count += parts.tokens
    return total / count


def train_step(model, opt, batch, cfg):
    opt.zero_grad()
    with Tape() as tape:
        parts = model.loss(batch, cfg.lambda_l1, cfg.lambda_ent)
    if not np.isfinite(parts.total.data):
        raise TrainingError(f"non-finite loss (xe={parts.xe}, l1={parts.l1}, "
                            f"entropy={parts.entropy}); lower lr or check inputs")
    backward(parts.total, tape)
    norm = clip_grad_norm(model.parameters(), cfg.clip_norm)
    opt.step()
    return parts, norm


def checkpoint_meta(cfg, feats, epoch, val_loss):
    return {"train": cfg.to_json(), "epoch": epoch, "val_loss": val_loss,
            "encoder": {"fingerprint": feats.encoder_fingerprint, "image_size": feats.image_size}}


def train(cfg, feats, out_dir=None, progress=None):
    """Train ``cfg.model`` on the train split, keeping the best validation checkpoint."""
    cfg.validate()
    train_idx, val_idx = feats.indices("train"), feats.indices("val")
    if len(train_idx) == 0:
        raise TrainingError("the dataset has no training pairs")
    vocab = Vocabulary.build(c for i in train_idx for c in feats.pairs[i].captions)
    model = Captioner(cfg.model_config(feats.x_bef.shape[-1]), vocab, cfg.seed)
    encoder_hash = feats.encoder_fingerprint
    opt = Adam(model.parameters(), lr=cfg.lr)
    log = TrainLog()
    ckpt = os.path.join(out_dir, CHECKPOINT) if out_dir is not None else None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    best = None
    if cfg.epochs == 0:
        log.best_val_loss = validation_loss(model, feats, val_idx)
        if ckpt:
            model.save(ckpt, **checkpoint_meta(cfg, feats, 0, log.best_val_loss))
            log.checkpoint = ckpt
        return TrainResult(model, log)

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        rng = np.random.default_rng((cfg.seed, _SHUFFLE_STREAM, epoch))
        order = train_idx[rng.permutation(len(train_idx))]
        choice = rng.integers(0, 1 << 30, size=len(order))
        loss_sum = xe_sum = 0.0
        tok_sum = steps = 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            tokens = _tokens_for(vocab, [feats.pairs[i] for i in idx], choice[s:s + len(idx)])
            parts, _ = train_step(model, opt, feats.batch(idx, tokens), cfg)
            loss_sum += float(parts.total.data)
            xe_sum += parts.xe * len(idx)
            tok_sum += parts.tokens
            steps += 1
        val = validation_loss(model, feats, val_idx)
        entry = {"epoch": epoch, "train_loss": loss_sum / steps, "train_xe_per_token": xe_sum / tok_sum,
                 "val_loss": val, "seconds": time.perf_counter() - start, "checkpoint": None}
        score = val if val is not None else entry["train_xe_per_token"]
        if best is None or score < best:
            best = score
            log.best_epoch, log.best_val_loss = epoch, val
            best_arrays = {k: v.copy() for k, v in model.arrays().items()}
            if ckpt:
                model.save(ckpt, **checkpoint_meta(cfg, feats, epoch, val))
                entry["checkpoint"] = ckpt
        log.epochs.append(entry)
        if progress is not None:
            progress(entry)

    if feats.encoder_fingerprint != encoder_hash:
        raise TrainingError("frozen encoder weights changed during training")
    model.load_arrays(best_arrays)
    log.checkpoint = ckpt
    return TrainResult(model, log)


# ------------------------------------------------------------- prediction

def predict_split(model, feats, split, path=None, batch=256):
    """Greedy predictions for every pair of ``split``; optionally written as JSON lines."""
    idx = feats.indices(split)
    records = []
    for s in range(0, len(idx), batch):
        rows = idx[s:s + batch]
        for i, rec in zip(rows, model.predict(feats.batch(rows))):
            records.append({"id": feats.pairs[i].id, "model": model.kind, **rec})
    if path is not None:
        write_predictions(path, records)
    return records


def write_predictions(path, records):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_predictions(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            rec = json.loads(line)
            if not isinstance(rec.get("id"), str) or not isinstance(rec.get("caption"), str):
                raise ValueError(f"{path}:{lineno}: prediction needs string 'id' and 'caption'")
            out.append(rec)
    return out


# --------------------------------------------------------------- overfit

def overfit(kind, feats, idx, steps=500, lr=1e-3, seed=0, target=0.05, **sizes):
    """Fit ``captions[0]`` of the pairs ``idx`` as one full batch.

    Returns ``(model, per-token XE history)``; stops early once the
    per-token cross-entropy drops below ``target``.
    """
    cfg = TrainConfig(model=kind, lr=lr, seed=seed, **sizes)
    pairs = [feats.pairs[i] for i in idx]
    vocab = Vocabulary.build(p.captions[0] for p in pairs)
    model = Captioner(cfg.model_config(feats.x_bef.shape[-1]), vocab, seed)
    opt = Adam(model.parameters(), lr=lr)
    batch = feats.batch(np.asarray(idx), _tokens_for(vocab, pairs))
    history = []
    for _ in range(steps):
        parts, _ = train_step(model, opt, batch, cfg)
        history.append(parts.xe * len(idx) / parts.tokens)
        if history[-1] < target:
            break
    return model, history
