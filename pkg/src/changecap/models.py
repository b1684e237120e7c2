"""One interface over DUDA and the four baselines, plus checkpoint I/O."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import baselines as B
from . import duda as D
from .numkernel.checkpoint import load_checkpoint, save_checkpoint
from .numkernel.tensor import Tensor, no_tape

MODEL_KINDS = ("duda",) + tuple(k.value for k in B.BaselineKind)
ATTENTION_KINDS = ("duda", B.BaselineKind.ATT.value, B.BaselineKind.DUAL_ATT.value)
_INIT_STREAM = 17


@dataclass
class Batch:
    x_bef: np.ndarray            # (N, C, H, W) encoder grids
    x_aft: np.ndarray
    tokens: np.ndarray | None    # (N, T) padded targets starting with <bos>
    pix: np.ndarray | None = None


@dataclass
class ForwardOutput:
    logits: Tensor
    a_bef: Tensor | None
    a_aft: Tensor | None
    alpha_logits: Tensor | None


class Captioner:
    """A change captioner of any supported kind with its parameters."""

    def __init__(self, cfg, vocab, seed=0):
        if cfg.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {cfg.kind!r}; choose from {MODEL_KINDS}")
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        rng = np.random.default_rng((seed, _INIT_STREAM))
        if cfg.kind == "duda":
            self.params = D.init_dual_attention(cfg, rng)
            self.params.update(D.init_speaker(cfg, len(vocab), rng))
        else:
            self.params = B.init_baseline(cfg.kind, cfg, len(vocab), rng)

    @property
    def kind(self):
        return self.cfg.kind

    @property
    def needs_pixels(self):
        return self.kind == B.BaselineKind.PIX_DIFF.value

    @property
    def has_attention(self):
        return self.kind in ATTENTION_KINDS

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def forward(self, batch):
        if self.kind == "duda":
            att = D.dual_attention(batch.x_bef, batch.x_aft, self.params)
            out = D.speaker_forward(att, batch.tokens, self.params)
            return ForwardOutput(out.logits, att.a_bef, att.a_aft, out.alpha_logits)
        logits, att = B.baseline_forward(self.kind, batch.x_bef, batch.x_aft, self.params,
                                         batch.tokens, batch.pix)
        if att is None:
            return ForwardOutput(logits, None, None, None)
        return ForwardOutput(logits, att.a_bef, att.a_aft, None)

    def loss(self, batch, lambda_l1=D.DEFAULT_LAMBDA_L1, lambda_ent=D.DEFAULT_LAMBDA_ENT):
        out = self.forward(batch)
        # a single attention map shared by both images is penalised once
        a_aft = None if out.a_aft is out.a_bef else out.a_aft
        return D.compute_loss(out.logits, batch.tokens[:, 1:], out.a_bef, a_aft,
                              out.alpha_logits, lambda_l1, lambda_ent)

    def predict(self, batch, max_len=None):
        """Greedy captions with alpha rows and attention maps (when the model has them)."""
        max_len = self.cfg.max_len if max_len is None else max_len
        with no_tape():
            if self.kind == "duda":
                att = D.dual_attention(batch.x_bef, batch.x_aft, self.params)
                words, alphas = D.decode_greedy(att, self.params, max_len)
            else:
                ctx = B.baseline_context(self.kind, batch.x_bef, batch.x_aft, self.params, batch.pix)
                att = ctx.attention
                words = B.decode_plain(ctx.vector, self.params, max_len)
                alphas = None
        records = []
        for i, w in enumerate(words):
            rec = {"tokens": [self.vocab.itos[t] for t in w], "caption": self.vocab.decode(w),
                   "alpha": None, "att_before": None, "att_after": None}
            if alphas is not None:
                rec["alpha"] = [row.tolist() for row in alphas[i]]
            if att is not None:
                rec["att_before"] = att.a_bef.data[i, 0].tolist()
                rec["att_after"] = att.a_aft.data[i, 0].tolist()
            records.append(rec)
        return records

    # ------------------------------------------------------------ persistence

    def arrays(self):
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays):
        if set(arrays) != set(self.params):
            raise ValueError(f"checkpoint parameters {sorted(set(arrays) ^ set(self.params))} "
                             f"do not match a {self.kind} model")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    def save(self, path, **meta):
        meta = dict(meta, model=self.cfg.to_json(), vocab=self.vocab.to_json())
        save_checkpoint(path, self.arrays(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        cfg = D.ModelConfig(**meta["model"])
        model = cls(cfg, D.Vocabulary.from_json(meta["vocab"]))
        model.load_arrays(arrays)
        return model, meta
