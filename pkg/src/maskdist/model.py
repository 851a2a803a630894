"""Categorical token predictor shared by teacher, generator, and auxiliary.

A small pre-LN transformer over an extended vocabulary: ids 0..V-1 are
image tokens, id V is the mask token, id V+1 is the null-condition row.
Class conditioning is injected by adding a condition embedding to every
position; the unconditional branch uses the null-condition row. The output
projection maps to exactly V logits: the mask token is never predicted.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from maskdist import tensor as T
from maskdist._kernels import softmax_rows

NULL_CONDITION = -1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int  # V image tokens
    seq_len: int
    n_classes: int
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def null_cond_id(self) -> int:
        return self.vocab_size + 1

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "seq_len": self.seq_len,
            "n_classes": self.n_classes,
            "d_model": self.d_model,
            "n_blocks": self.n_blocks,
            "n_heads": self.n_heads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class EmbeddingPerturbation:
    """Variance-preserving Gaussian noise mixed into token embeddings:
    e_hat = sqrt(1 - sigma^2) * e + sigma * noise."""

    sigma: float
    noise: np.ndarray  # (B, L, d) iid standard normal


class ModelParams:
    """Named parameter arrays plus a per-tensor trainable flag."""

    def __init__(self, config: ModelConfig, arrays: dict[str, T.Array],
                 trainable: dict[str, bool]):
        self.config = config
        self.arrays = arrays
        self.trainable = trainable
        self._sync_flags()

    def _sync_flags(self):
        for name, arr in self.arrays.items():
            arr.requires_grad = self.trainable[name]

    def set_trainable(self, name: str, flag: bool):
        self.trainable[name] = flag
        self.arrays[name].requires_grad = flag

    def freeze_all(self):
        for name in self.trainable:
            self.set_trainable(name, False)

    def freeze_embeddings(self):
        """Freeze every lookup table (token, condition, positional)."""
        for name in ("tok_emb", "cond_emb", "pos_emb"):
            self.set_trainable(name, False)

    def trainable_items(self):
        return [(n, a) for n, a in sorted(self.arrays.items()) if self.trainable[n]]

    def zero_grads(self):
        for arr in self.arrays.values():
            arr.zero_grad()

    def copy(self) -> "ModelParams":
        arrays = {n: T.Array(a.data.copy(), a.requires_grad) for n, a in self.arrays.items()}
        return ModelParams(self.config, arrays, dict(self.trainable))

    def numpy_arrays(self) -> dict[str, np.ndarray]:
        return {n: a.data for n, a in self.arrays.items()}

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(self.arrays[name].data.tobytes())
        return h.hexdigest()


def init_params(config: ModelConfig, rng: np.random.Generator,
                init_std: float = 0.02) -> ModelParams:
    d = config.d_model
    hidden = 4 * d

    def norm(shape):
        return rng.normal(0.0, init_std, size=shape)

    arrays: dict[str, np.ndarray] = {
        "tok_emb": norm((config.vocab_size + 2, d)),
        "cond_emb": norm((config.n_classes, d)),
        "pos_emb": norm((config.seq_len, d)),
    }
    for b in range(config.n_blocks):
        p = f"blocks.{b}."
        arrays[p + "ln1.gain"] = np.ones(d)
        arrays[p + "ln1.bias"] = np.zeros(d)
        arrays[p + "attn.wq"] = norm((d, d))
        arrays[p + "attn.wk"] = norm((d, d))
        arrays[p + "attn.wv"] = norm((d, d))
        arrays[p + "attn.wo"] = norm((d, d))
        arrays[p + "attn.bo"] = np.zeros(d)
        arrays[p + "ln2.gain"] = np.ones(d)
        arrays[p + "ln2.bias"] = np.zeros(d)
        arrays[p + "mlp.w1"] = norm((d, hidden))
        arrays[p + "mlp.b1"] = np.zeros(hidden)
        arrays[p + "mlp.w2"] = norm((hidden, d))
        arrays[p + "mlp.b2"] = np.zeros(d)
    arrays["ln_f.gain"] = np.ones(d)
    arrays["ln_f.bias"] = np.zeros(d)
    arrays["head.w"] = norm((d, config.vocab_size))
    arrays["head.b"] = np.zeros(config.vocab_size)

    wrapped = {n: T.Array(a, requires_grad=True) for n, a in arrays.items()}
    return ModelParams(config, wrapped, {n: True for n in wrapped})


def _normalize_cond(cond, batch: int, n_classes: int) -> np.ndarray:
    """Accept an int class id, None, or a per-sample array (-1 = null)."""
    if cond is None:
        ids = np.full(batch, NULL_CONDITION, dtype=np.int64)
    elif np.isscalar(cond):
        ids = np.full(batch, int(cond), dtype=np.int64)
    else:
        ids = np.ascontiguousarray(cond, dtype=np.int64)
    if ids.shape != (batch,):
        raise ValueError(f"condition batch {ids.shape} does not match {batch}")
    if np.any((ids < NULL_CONDITION) | (ids >= n_classes)):
        raise ValueError("condition id out of range")
    return ids


def forward(params: ModelParams, seqs: np.ndarray, cond=None,
            perturb: EmbeddingPerturbation | None = None) -> T.Array:
    """Joint network pass over a (B, L) batch of token ids -> (B, L, V)
    logits. Records on the active tape when trainable params require grad."""
    cfg = params.config
    seqs = np.ascontiguousarray(seqs, dtype=np.int64)
    if seqs.ndim == 1:
        seqs = seqs[None, :]
    B, L = seqs.shape
    if L != cfg.seq_len:
        raise ValueError(f"sequence length {L} does not match model {cfg.seq_len}")
    if np.any((seqs < 0) | (seqs > cfg.null_cond_id)):
        raise ValueError("token id out of range")
    cond_ids = _normalize_cond(cond, B, cfg.n_classes)

    a = params.arrays
    d = cfg.d_model
    heads = cfg.n_heads
    dh = d // heads

    x = T.gather_rows(a["tok_emb"], seqs)  # (B, L, d)
    if perturb is not None and perturb.sigma > 0.0:
        if perturb.noise.shape != (B, L, d):
            raise ValueError("perturbation noise shape mismatch")
        keep = math.sqrt(1.0 - perturb.sigma**2)
        x = T.add(T.scale(x, keep), T.constant(perturb.sigma * perturb.noise))
    x = T.add(x, T.repeat_leading(a["pos_emb"], B))

    # condition vector: class row where conditioned, null-condition row otherwise
    is_class = (cond_ids != NULL_CONDITION).astype(np.float64)[:, None]
    class_vec = T.gather_rows(a["cond_emb"], np.maximum(cond_ids, 0))
    null_vec = T.gather_rows(a["tok_emb"], np.full(B, cfg.null_cond_id, dtype=np.int64))
    cond_vec = T.add(
        T.mul(class_vec, T.constant(np.broadcast_to(is_class, (B, d)).copy())),
        T.mul(null_vec, T.constant(np.broadcast_to(1.0 - is_class, (B, d)).copy())),
    )
    x = T.add(x, T.repeat_axis(T.reshape(cond_vec, (B, 1, d)), 1, L))

    def split_heads(t):
        return T.transpose(T.reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    for b in range(cfg.n_blocks):
        p = f"blocks.{b}."
        h = T.layer_norm(x, a[p + "ln1.gain"], a[p + "ln1.bias"])
        q = split_heads(T.matmul(h, a[p + "attn.wq"]))
        k = split_heads(T.matmul(h, a[p + "attn.wk"]))
        v = split_heads(T.matmul(h, a[p + "attn.wv"]))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        ctx = T.matmul(T.softmax(scores), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
        x = T.add(x, T.add(T.matmul(ctx, a[p + "attn.wo"]), a[p + "attn.bo"]))

        h = T.layer_norm(x, a[p + "ln2.gain"], a[p + "ln2.bias"])
        h = T.gelu(T.add(T.matmul(h, a[p + "mlp.w1"]), a[p + "mlp.b1"]))
        x = T.add(x, T.add(T.matmul(h, a[p + "mlp.w2"]), a[p + "mlp.b2"]))

    x = T.layer_norm(x, a["ln_f.gain"], a["ln_f.bias"])
    return T.add(T.matmul(x, a["head.w"]), a["head.b"])  # (B, L, V)


def predict_logits(params: ModelParams, seqs: np.ndarray, cond=None,
                   perturb: EmbeddingPerturbation | None = None) -> np.ndarray:
    """Inference-mode logits as a plain (B, L, V) array (no tape)."""
    return forward(params, seqs, cond, perturb).data


def softmax_temperature(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax over the last axis; rows sum to 1."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    v = logits.shape[-1]
    rows = np.ascontiguousarray(logits.reshape(-1, v) / tau)
    return softmax_rows(rows).reshape(logits.shape)


def cfg_combine(z_cond: np.ndarray, z_uncond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: z_uncond + scale * (z_cond - z_uncond).

    scale 1 and 0 return the conditional/unconditional branch exactly."""
    if z_cond.shape != z_uncond.shape:
        raise ValueError(f"cfg shapes {z_cond.shape} and {z_uncond.shape} differ")
    if scale == 1.0:
        return z_cond.copy()
    if scale == 0.0:
        return z_uncond.copy()
    return z_uncond + scale * (z_cond - z_uncond)


def apply_top_k(logits: np.ndarray, k: int | None) -> np.ndarray:
    """Restrict each row to its k largest logits (the rest get zero
    probability after softmax); k=None disables."""
    if k is None or k >= logits.shape[-1]:
        return logits
    if k < 1:
        raise ValueError("top_k must be >= 1")
    v = logits.shape[-1]
    rows = logits.reshape(-1, v)
    out = np.full_like(rows, -np.inf)
    top = np.argpartition(rows, v - k, axis=1)[:, v - k:]
    np.put_along_axis(out, top, np.take_along_axis(rows, top, axis=1), axis=1)
    return out.reshape(logits.shape)


class NetworkPredictor:
    """Samplers see models through this thin handle: ``logits_batch`` maps
    a batch of token sequences and one condition to (B, L, V) logits."""

    def __init__(self, params: ModelParams):
        self.params = params

    @property
    def vocab_size(self) -> int:
        return self.params.config.vocab_size

    @property
    def seq_len(self) -> int:
        return self.params.config.seq_len

    def logits_batch(self, seqs: np.ndarray, cond) -> np.ndarray:
        return predict_logits(self.params, seqs, cond)
