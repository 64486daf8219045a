"""Sequence encoders producing per-step user representations, plus the
logit/loss primitives every objective in the package is built from."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .validation import ConfigError, DataError, TrainingError, check_choice, check_interval, check_positive_int

CHECKPOINT_VERSION = 1
ENCODER_KINDS = ("self_attention", "mean_pool")


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 50
    dropout_rate: float = 0.2
    encoder_kind: str = "self_attention"
    share_embeddings: bool = True
    dtype: str = "float32"

    def validate(self) -> "EncoderConfig":
        check_positive_int(self.d_model, "d_model")
        check_positive_int(self.n_layers, "n_layers")
        check_positive_int(self.n_heads, "n_heads")
        check_positive_int(self.max_len, "max_len")
        check_interval(self.dropout_rate, "dropout_rate", 0.0, 1.0, closed_high=False)
        check_choice(self.encoder_kind, "encoder_kind", ENCODER_KINDS)
        check_choice(self.dtype, "dtype", ("float32", "float64"))
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        return self

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


# --------------------------------------------------------------------------
# scalar / array primitives


def sigmoid(x):
    """Logistic function, stable for large ``|x|`` (no overflow warnings)."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out[()] if out.ndim == 0 else out


def bce_loss(logit, label):
    """Binary cross entropy on a logit; ``label`` may be soft (in [0, 1]).

    Uses ``max(x, 0) - x*y + log(1 + exp(-|x|))``, which equals
    ``-y log s(x) - (1-y) log(1-s(x))`` without forming the logs of
    saturated probabilities.
    """
    x = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return out[()] if out.ndim == 0 else out


def bce_with_logits(logits: torch.Tensor, labels) -> torch.Tensor:
    """Elementwise torch counterpart of :func:`bce_loss`."""
    if not torch.is_tensor(labels):
        labels = torch.full_like(logits, float(labels))
    return logits.clamp(min=0) - logits * labels + torch.log1p(torch.exp(-logits.abs()))


def score(user_rep, item: int, params) -> float:
    """Inner product between a user representation and an item's output vector."""
    table = params.output_table() if isinstance(params, SequenceEncoder) else params
    vec = table[item]
    if torch.is_tensor(vec):
        vec = vec.detach().cpu().numpy()
    return float(np.dot(np.asarray(user_rep, dtype=np.float64), np.asarray(vec, dtype=np.float64)))


def pad_sequences(seqs, max_len: int, width: int | None = None) -> np.ndarray:
    """Left-pad (right-align) sequences, keeping at most the last ``max_len`` items."""
    if width is None:
        width = max((min(len(s), max_len) for s in seqs), default=1) or 1
    width = min(width, max_len)
    out = np.zeros((len(seqs), width), dtype=np.int64)
    for r, s in enumerate(seqs):
        s = s[-width:]
        if len(s):
            out[r, width - len(s):] = s
    return out


# --------------------------------------------------------------------------
# modules


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model, n_heads, dropout_rate):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout_rate)

    def forward(self, x, allowed):
        b, t, d = x.shape

        def heads(z):
            return z.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        att = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        att = att.masked_fill(~allowed[:, None], float("-inf"))
        att = self.dropout(torch.softmax(att, dim=-1))
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, d_model, dropout_rate):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_model)
        self.fc2 = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout_rate)

    def forward(self, x):
        return self.dropout(self.fc2(self.dropout(torch.relu(self.fc1(x)))))


class Block(nn.Module):
    def __init__(self, d_model, n_heads, dropout_rate):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d_model, eps=1e-8)
        self.attn = CausalSelfAttention(d_model, n_heads, dropout_rate)
        self.ffn_norm = nn.LayerNorm(d_model, eps=1e-8)
        self.ffn = FeedForward(d_model, dropout_rate)
        self.dropout = nn.Dropout(dropout_rate)

    def forward(self, x, allowed, valid):
        x = x + self.dropout(self.attn(self.attn_norm(x), allowed))
        x = x + self.ffn(self.ffn_norm(x))
        return x * valid


class SequenceEncoder(nn.Module):
    """Maps left-padded item sequences to per-step representations.

    ``forward`` returns ``(values, valid_mask)`` with ``values[b, t]`` the
    user representation after consuming items up to step ``t``.  Position
    indices count from the first non-padding item, so the amount of
    left padding never changes a valid output.
    """

    def __init__(self, item_count: int, cfg: EncoderConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = (cfg or EncoderConfig()).validate()
        self.cfg = cfg
        self.item_count = item_count
        d = cfg.d_model
        self.item_emb = nn.Embedding(item_count + 1, d, padding_idx=0)
        self.out_emb = None if cfg.share_embeddings else nn.Embedding(item_count + 1, d, padding_idx=0)
        self.emb_dropout = nn.Dropout(cfg.dropout_rate)
        if cfg.encoder_kind == "self_attention":
            self.pos_emb = nn.Embedding(cfg.max_len, d)
            self.blocks = nn.ModuleList(
                Block(d, cfg.n_heads, cfg.dropout_rate) for _ in range(cfg.n_layers)
            )
            self.final_norm = nn.LayerNorm(d, eps=1e-8)
        self.reset_parameters(seed)
        self.to(cfg.torch_dtype)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("emb.weight"):
                    nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=g)
                elif "norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("weight"):
                    nn.init.xavier_uniform_(p, generator=g)
                else:
                    p.zero_()
            self.zero_padding_rows()

    def zero_padding_rows(self) -> None:
        with torch.no_grad():
            self.item_emb.weight[0].zero_()
            if self.out_emb is not None:
                self.out_emb.weight[0].zero_()

    def output_table(self) -> torch.Tensor:
        return (self.out_emb or self.item_emb).weight

    def _check_items(self, items: torch.Tensor) -> None:
        if items.numel() and (int(items.min()) < 0 or int(items.max()) > self.item_count):
            raise DataError(f"item index outside [0, {self.item_count}]")

    def forward(self, seqs):
        seqs = torch.as_tensor(seqs, dtype=torch.long)
        self._check_items(seqs)
        valid = seqs > 0
        validf = valid.unsqueeze(-1).to(self.item_emb.weight.dtype)
        x = self.item_emb(seqs)
        if self.cfg.encoder_kind == "mean_pool":
            x = self.emb_dropout(x) * validf
            counts = validf.cumsum(dim=1).clamp(min=1.0)
            return x.cumsum(dim=1) / counts, valid

        x = x * math.sqrt(self.cfg.d_model)
        pos = (valid.long().cumsum(dim=1) - 1).clamp(min=0)
        x = self.emb_dropout(x + self.pos_emb(pos)) * validf
        t = seqs.shape[1]
        causal = torch.tril(torch.ones(t, t, dtype=torch.bool))
        allowed = causal[None] & valid[:, None, :]
        # padding query rows attend to themselves only; their output is zeroed
        allowed = allowed | (torch.eye(t, dtype=torch.bool)[None] & ~valid[:, :, None])
        for block in self.blocks:
            x = block(x, allowed, validf)
        return self.final_norm(x) * validf, valid

    def score_items(self, reps: torch.Tensor, items) -> torch.Tensor:
        """Logits for ``items`` (shape ``reps.shape[:-1] + (k,)``) or matching shape."""
        items = torch.as_tensor(items, dtype=torch.long)
        self._check_items(items)
        emb = self.output_table()[items]
        if emb.dim() == reps.dim() + 1:
            return (reps.unsqueeze(-2) * emb).sum(-1)
        return (reps * emb).sum(-1)

    def last_representation(self, seqs) -> torch.Tensor:
        values, _ = self(seqs)
        return values[:, -1]


def build_encoder(item_count: int, cfg: EncoderConfig | None = None, seed: int = 0) -> SequenceEncoder:
    return SequenceEncoder(item_count, cfg, seed)


def encode(params: SequenceEncoder, batch):
    """Alias of ``params(batch)``: ``(values, valid_mask)``."""
    return params(batch)


def compute_gradients(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Backpropagate ``loss`` into ``model`` and return the gradients by name.

    Gradients on the padding embedding rows are forced to zero.  Raises
    ``TrainingError`` naming the first parameter with a non-finite gradient.
    """
    model.zero_grad(set_to_none=True)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        if name.endswith("emb.weight") and name != "pos_emb.weight":
            p.grad[0].zero_()
        if not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        grads[name] = p.grad
    return grads


# --------------------------------------------------------------------------
# checkpoints


def state_arrays(model: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def save_checkpoint(path, student: SequenceEncoder, teacher: nn.Module | None = None, meta=None) -> None:
    """Write every parameter array (with shape/dtype) to an ``.npz`` archive.

    Teacher arrays carry a ``teacher.`` prefix.  Round-trips bit-exactly.
    """
    arrays = state_arrays(student)
    if teacher is not None:
        arrays.update(state_arrays(teacher, "teacher."))
    header = {
        "version": CHECKPOINT_VERSION,
        "item_count": student.item_count,
        "encoder": asdict(student.cfg),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "meta": meta or {},
    }
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(student, teacher_or_None, header)``."""
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    for k, shape in header["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise DataError(f"{path}: shape mismatch for {k}")
    cfg = EncoderConfig(**header["encoder"])
    student = SequenceEncoder(header["item_count"], cfg)
    student.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items() if not k.startswith("teacher.")})
    teacher = None
    t_state = {k[len("teacher."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("teacher.")}
    if t_state:
        teacher = SequenceEncoder(header["item_count"], cfg)
        teacher.load_state_dict(t_state)
        teacher.requires_grad_(False)
    return student, teacher, header
