"""Masked-token pre-training of the multi-step teacher.

Each iteration draws (class, sequence) pairs, masks every position
independently at a schedule-determined ratio for a per-sample uniform
timestep, and minimizes cross-entropy over the masked positions only.
The condition is dropped (replaced by the null-condition row) at a fixed
rate so classifier-free guidance has an unconditional branch to use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from maskdist import tensor as T
from maskdist.datasets import SyntheticDataset
from maskdist.diffusion import MaskSchedule, mask_ratio
from maskdist.model import NULL_CONDITION, ModelConfig, ModelParams, forward, init_params
from maskdist.optim import Adam, Ema
from maskdist.rng import StreamHub


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    cond_dropout: float = 0.1
    schedule: str = "arccos"
    seed: int = 0
    ema_rate: float = 0.9999
    warmup_steps: int = 100
    log_every: int = 50

    def __post_init__(self):
        if min(self.iterations, self.batch_size) <= 0 or self.lr <= 0:
            raise ValueError("iterations, batch size, and lr must be positive")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("condition dropout must lie in [0, 1]")


def mdm_loss(logits: T.Array, x0: np.ndarray, x_t: np.ndarray, mask_id: int) -> T.Array:
    """Mean negative log-likelihood of the original tokens over the masked
    positions of x_t; zero when nothing is masked."""
    x0 = np.asarray(x0, dtype=np.int64)
    x_t = np.asarray(x_t, dtype=np.int64)
    if x0.ndim == 1:
        x0, x_t = x0[None, :], x_t[None, :]
    unmasked = x_t != mask_id
    if np.any(x_t[unmasked] != x0[unmasked]):
        raise ValueError("x_t disagrees with x0 at an unmasked position")
    masked_flat = np.flatnonzero(~unmasked.reshape(-1))
    if masked_flat.size == 0:
        return T.constant(0.0)
    B, L, V = logits.shape
    flat = T.reshape(logits, (B * L, V))
    rows = T.gather_rows(flat, masked_flat)
    picked = T.gather_cols(T.log_softmax(rows), x0.reshape(-1)[masked_flat])
    return T.scale(T.sum_all(picked), -1.0 / masked_flat.size)


def mask_ratio_rows(schedule: MaskSchedule, t: np.ndarray) -> np.ndarray:
    return np.array([mask_ratio(schedule, float(v)) for v in t])


def apply_condition_dropout(classes: np.ndarray, p_drop: float,
                            rng: np.random.Generator) -> np.ndarray:
    """Replace each class id with the null condition at rate p_drop."""
    cond = np.asarray(classes, dtype=np.int64).copy()
    cond[rng.random(cond.shape[0]) < p_drop] = NULL_CONDITION
    return cond


def forward_mask_rows(x0: np.ndarray, ratios: np.ndarray, rng: np.random.Generator,
                      mask_id: int) -> np.ndarray:
    """Batched forward masking with a per-row ratio."""
    out = np.asarray(x0, dtype=np.int64).copy()
    out[rng.random(out.shape) < ratios[:, None]] = mask_id
    return out


@dataclass
class TeacherResult:
    params: ModelParams
    ema: ModelParams
    history: list = field(default_factory=list)


def train_teacher(dataset: SyntheticDataset, cfg: TrainConfig,
                  model_cfg: ModelConfig | None = None,
                  progress=None) -> TeacherResult:
    if model_cfg is None:
        model_cfg = ModelConfig(
            vocab_size=dataset.vocab_size,
            seq_len=dataset.seq_len,
            n_classes=dataset.n_classes,
        )
    hub = StreamHub(cfg.seed)
    params = init_params(model_cfg, hub.stream("model_init"))
    opt = Adam(params, cfg.lr, warmup_steps=cfg.warmup_steps)
    ema = Ema(params, cfg.ema_rate)
    schedule = MaskSchedule(cfg.schedule)
    data_rng = hub.stream("teacher.data")
    mask_rng = hub.stream("teacher.mask")
    mask_id = model_cfg.mask_id

    history = []
    for it in range(cfg.iterations):
        classes, x0 = dataset.sample_batch(cfg.batch_size, data_rng)
        cond = apply_condition_dropout(classes, cfg.cond_dropout, data_rng)
        t = mask_rng.random(cfg.batch_size)
        x_t = forward_mask_rows(x0, mask_ratio_rows(schedule, t), mask_rng, mask_id)

        try:
            with T.Tape() as tape:
                logits = forward(params, x_t, cond)
                loss = mdm_loss(logits, x0, x_t, mask_id)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise T.CheckError("loss is not finite")
            if loss.requires_grad:
                params.zero_grads()
                tape.backward(loss)
                opt.step()
        except T.CheckError as err:
            raise TrainingDiverged(
                f"teacher training diverged at iteration {it}: {err}"
            ) from err
        ema.update(params)
        n_masked = int((x_t == mask_id).sum())
        history.append({"iter": it, "loss": loss_val, "masked": n_masked})
        if progress is not None and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            progress(it, loss_val)

    return TeacherResult(params, ema.as_params(params), history)
