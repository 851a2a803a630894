"""One-step distillation of a multi-step teacher.

Per iteration the generator maps a randomized initial sequence to logits,
tokens are sampled from those logits, remasked at a random ratio, and the
teacher and auxiliary models are evaluated on the remasked state. The
generator descends the token-level divergence through a surrogate loss:
the closed-form divergence gradient g (a constant) dotted with the live
generator logits, so backward produces exactly g * d(logits)/d(params).
The auxiliary model then fits the generator's current output tokens with
the masked cross-entropy loss at a fresh ratio.

Nothing backpropagates through sampling or remasking: g is computed from
plain probabilities, and only the generator's (or auxiliary's) own pass
runs on a tape.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from maskdist import tensor as T
from maskdist.diffusion import MaskSchedule, sample_categorical
from maskdist.divergence import DivergenceSpec, token_gradient
from maskdist.model import (
    EmbeddingPerturbation,
    ModelParams,
    cfg_combine,
    forward,
    predict_logits,
    softmax_temperature,
)
from maskdist.optim import Adam, Ema
from maskdist.rng import StreamHub
from maskdist.teacher import TrainingDiverged, forward_mask_rows, mask_ratio_rows, mdm_loss


@dataclass(frozen=True)
class InitStrategy:
    """Hybrid token initialization: a fixed fraction of mask tokens, the
    rest uniform image tokens, plus optional Gaussian embedding noise."""

    mask_ratio: float = 0.6
    sigma: float = 0.0
    placement: str = "exact_count"

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("init mask ratio must lie in [0, 1]")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("init sigma must lie in [0, 1]")
        if self.placement not in ("exact_count", "bernoulli"):
            raise ValueError(f"unknown placement {self.placement!r}")


def sample_init(strategy: InitStrategy, batch: int, seq_len: int, vocab_size: int,
                d_model: int, rng: np.random.Generator):
    """Draw (batch, L) initial sequences and the embedding perturbation."""
    mask_id = vocab_size
    seqs = rng.integers(0, vocab_size, size=(batch, seq_len))
    if strategy.placement == "exact_count":
        count = int(round(strategy.mask_ratio * seq_len))
        if count > 0:
            order = rng.random((batch, seq_len)).argsort(axis=1)
            rows = np.repeat(np.arange(batch), count)
            seqs[rows, order[:, :count].reshape(-1)] = mask_id
    else:
        seqs[rng.random((batch, seq_len)) < strategy.mask_ratio] = mask_id
    perturb = None
    if strategy.sigma > 0.0:
        noise = rng.standard_normal((batch, seq_len, d_model))
        perturb = EmbeddingPerturbation(strategy.sigma, noise)
    return seqs.astype(np.int64), perturb


@dataclass(frozen=True)
class LossWeight:
    """Iteration weight: constant 1, or the DMD-style normalizer
    1 / (mean |p_aux - p_teacher| at the generated tokens + delta)."""

    mode: str = "constant"
    delta: float = 1e-3

    def __post_init__(self):
        if self.mode not in ("constant", "dmd_normalizer"):
            raise ValueError(f"unknown loss weight mode {self.mode!r}")
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")


def loss_weight(weight: LossWeight, p_aux_sel: np.ndarray,
                p_teacher_sel: np.ndarray) -> float:
    if weight.mode == "constant":
        return 1.0
    gap = float(np.mean(np.abs(np.asarray(p_aux_sel) - np.asarray(p_teacher_sel))))
    return 1.0 / (gap + weight.delta)


@dataclass
class DistillConfig:
    iterations: int = 3000
    batch_size: int = 32
    lr_generator: float = 1e-4
    lr_auxiliary: float = 1e-4
    divergence: DivergenceSpec = field(default_factory=DivergenceSpec.fkl)
    init: InitStrategy = field(default_factory=InitStrategy)
    weight: LossWeight = field(default_factory=LossWeight)
    cfg_scale: float = 2.0
    schedule: str = "arccos"
    seed: int = 0
    ema_rate: float = 0.9999
    warmup_steps: int = 100
    log_every: int = 50
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if min(self.iterations, self.batch_size) <= 0:
            raise ValueError("iterations and batch size must be positive")


@dataclass
class StepInfo:
    loss: float
    weight: float
    t_mean: float
    masked_mean: float
    entropy: float
    grad_grid: np.ndarray | None = None  # the frozen g actually dotted with z


class DistillState:
    """Generator, auxiliary, frozen teacher, EMA, optimizers, RNG streams."""

    def __init__(self, teacher: ModelParams, cfg: DistillConfig):
        self.cfg = cfg
        self.phi = teacher.copy()
        self.phi.freeze_all()
        self.theta = teacher.copy()
        self.psi = teacher.copy()
        for p in (self.theta, self.psi):
            for name in p.trainable:
                p.set_trainable(name, True)
            p.freeze_embeddings()
        self.opt_theta = Adam(self.theta, cfg.lr_generator, warmup_steps=cfg.warmup_steps)
        self.opt_psi = Adam(self.psi, cfg.lr_auxiliary, warmup_steps=cfg.warmup_steps)
        self.ema = Ema(self.theta, cfg.ema_rate)
        self.schedule = MaskSchedule(cfg.schedule)
        self.hub = StreamHub(cfg.seed)
        self.iteration = 0
        self.skipped_generator = 0
        self.skipped_auxiliary = 0
        self.last_tokens: np.ndarray | None = None
        self.last_cond: np.ndarray | None = None
        self.last_gen_info: StepInfo | None = None
        self.teacher_hash = self.phi.state_hash()

    def check_teacher_frozen(self):
        if self.phi.state_hash() != self.teacher_hash:
            raise RuntimeError("teacher parameters changed during distillation")


def surrogate_loss(z_theta: T.Array, grad_coeff: np.ndarray) -> T.Array:
    """sum(freeze(g) * z): backward yields exactly g * dz/dparams."""
    return T.sum_all(T.mul(T.constant(grad_coeff), z_theta))


def _assert_no_foreign_grads(state: DistillState):
    for params in (state.phi, state.psi):
        for arr in params.arrays.values():
            if arr.grad is not None:
                raise RuntimeError("gradient leaked into a frozen model")
    for name in ("tok_emb", "cond_emb", "pos_emb"):
        if state.theta.arrays[name].grad is not None:
            raise RuntimeError("gradient leaked into a frozen embedding table")


def generator_step(state: DistillState, cond: np.ndarray,
                   div: DivergenceSpec | None = None,
                   weight: LossWeight | None = None,
                   rng: np.random.Generator | None = None) -> float | None:
    """One generator update; returns the surrogate loss, or None when the
    remasked state had no masked positions (update skipped)."""
    cfg = state.cfg
    div = div or cfg.divergence
    weight = weight or cfg.weight
    rng = rng if rng is not None else state.hub.stream("distill.generator")
    mask_id = state.theta.config.mask_id
    cond = np.ascontiguousarray(cond, dtype=np.int64)
    B = cond.shape[0]

    x_init, perturb = sample_init(
        cfg.init, B, state.theta.config.seq_len, state.theta.config.vocab_size,
        state.theta.config.d_model, rng)

    with T.Tape() as tape:
        z_theta = forward(state.theta, x_init, cond, perturb)
    probs_theta = softmax_temperature(z_theta.data, 1.0)
    x_tokens = sample_categorical(probs_theta, rng)

    t = rng.random(B)
    ratios = mask_ratio_rows(state.schedule, t)
    x_tilde = forward_mask_rows(x_tokens, ratios, rng, mask_id)
    masked = x_tilde == mask_id
    n_masked = masked.sum(axis=1)

    state.last_tokens = x_tokens
    state.last_cond = cond

    if not n_masked.any():
        state.skipped_generator += 1
        state.last_gen_info = None
        return None

    z_teacher = predict_logits(state.phi, x_tilde, cond)
    if cfg.cfg_scale != 1.0:
        z_uncond = predict_logits(state.phi, x_tilde, None)
        z_teacher = cfg_combine(z_teacher, z_uncond, cfg.cfg_scale)
    p_teacher = softmax_temperature(z_teacher, 1.0)
    p_aux = softmax_temperature(predict_logits(state.psi, x_tilde, cond), 1.0)

    g = token_gradient(div, p_teacher, p_aux)
    g *= masked[:, :, None]

    p_aux_tok = np.take_along_axis(p_aux, x_tokens[:, :, None], axis=2)[:, :, 0]
    p_tea_tok = np.take_along_axis(p_teacher, x_tokens[:, :, None], axis=2)[:, :, 0]
    coeff = np.zeros(B)
    weights = []
    for b in range(B):
        if n_masked[b] == 0:
            continue
        w = loss_weight(weight, p_aux_tok[b, masked[b]], p_tea_tok[b, masked[b]])
        weights.append(w)
        coeff[b] = w / (n_masked[b] * B)
    g *= coeff[:, None, None]

    with tape:  # resume recording so the surrogate joins z_theta's graph
        loss = surrogate_loss(z_theta, g)
    state.theta.zero_grads()
    tape.backward(loss)
    _assert_no_foreign_grads(state)
    state.opt_theta.step()
    state.theta.zero_grads()

    row_entropy = -(probs_theta * np.log(np.maximum(probs_theta, 1e-12))).sum(axis=2)
    state.last_gen_info = StepInfo(
        loss=loss.item(),
        weight=float(np.mean(weights)),
        t_mean=float(t.mean()),
        masked_mean=float(n_masked.mean()),
        entropy=float(row_entropy.mean()),
        grad_grid=g,
    )
    return loss.item()


def auxiliary_step(state: DistillState, cond: np.ndarray | None = None,
                   rng: np.random.Generator | None = None) -> float | None:
    """Fit the auxiliary model to the generator's latest tokens at a fresh
    masking ratio; the generator and teacher are untouched."""
    if state.last_tokens is None:
        raise RuntimeError("auxiliary_step needs a preceding generator pass")
    cfg = state.cfg
    rng = rng if rng is not None else state.hub.stream("distill.auxiliary")
    cond = state.last_cond if cond is None else np.ascontiguousarray(cond, dtype=np.int64)
    mask_id = state.psi.config.mask_id
    x_tokens = state.last_tokens

    t = rng.random(x_tokens.shape[0])
    x_tilde = forward_mask_rows(x_tokens, mask_ratio_rows(state.schedule, t), rng, mask_id)
    if not np.any(x_tilde == mask_id):
        state.skipped_auxiliary += 1
        return None

    with T.Tape() as tape:
        logits = forward(state.psi, x_tilde, cond)
        loss = mdm_loss(logits, x_tokens, x_tilde, mask_id)
    state.psi.zero_grads()
    tape.backward(loss)
    state.opt_psi.step()
    state.psi.zero_grads()
    return loss.item()


def one_step_sample(params: ModelParams, init: InitStrategy, cond, n: int,
                    rng: np.random.Generator, tau: float = 1.0) -> np.ndarray:
    """Generate n sequences in a single pass from randomized initial states."""
    cfg = params.config
    if np.isscalar(cond) or cond is None:
        cond_ids = np.full(n, -1 if cond is None else int(cond), dtype=np.int64)
    else:
        cond_ids = np.ascontiguousarray(cond, dtype=np.int64)
    x_init, perturb = sample_init(init, n, cfg.seq_len, cfg.vocab_size,
                                  cfg.d_model, rng)
    logits = predict_logits(params, x_init, cond_ids, perturb)
    return sample_categorical(softmax_temperature(logits, tau), rng)


@dataclass
class DistillResult:
    generator: ModelParams
    ema: ModelParams
    auxiliary: ModelParams
    metrics: list = field(default_factory=list)
    state: DistillState | None = None


def run_distillation(teacher: ModelParams, cfg: DistillConfig,
                     n_classes: int | None = None,
                     checkpoint_fn=None, progress=None,
                     state: DistillState | None = None) -> DistillResult:
    """Alternate generator and auxiliary updates for cfg.iterations.

    checkpoint_fn(state, metrics) is invoked every cfg.checkpoint_every
    iterations (when set); a CheckError/non-finite loss aborts with
    TrainingDiverged, leaving the last periodic checkpoint as the
    last-good state.
    """
    if state is None:
        state = DistillState(teacher, cfg)
    C = n_classes if n_classes is not None else teacher.config.n_classes
    cond_rng = state.hub.stream("distill.cond")
    metrics = []

    while state.iteration < cfg.iterations:
        it = state.iteration
        cond = cond_rng.integers(0, C, size=cfg.batch_size).astype(np.int64)
        started = time.perf_counter()
        try:
            gen_loss = generator_step(state, cond)
            aux_loss = auxiliary_step(state)
            for val in (gen_loss, aux_loss):
                if val is not None and not np.isfinite(val):
                    raise T.CheckError("loss is not finite")
        except T.CheckError as err:
            raise TrainingDiverged(
                f"distillation diverged at iteration {it}: {err}"
            ) from err
        state.ema.update(state.theta)
        state.iteration += 1
        wall_ms = (time.perf_counter() - started) * 1000.0
        info = state.last_gen_info
        metrics.append({
            "iter": it,
            "surrogate_loss": float("nan") if gen_loss is None else gen_loss,
            "aux_loss": float("nan") if aux_loss is None else aux_loss,
            "w_t": info.weight if info else float("nan"),
            "t": info.t_mean if info else float("nan"),
            "L_M": info.masked_mean if info else float("nan"),
            "entropy_estimate": info.entropy if info else float("nan"),
            "wall_ms": wall_ms,
        })
        if progress is not None and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            progress(it, metrics[-1])
        if checkpoint_fn is not None and cfg.checkpoint_every > 0 \
                and state.iteration % cfg.checkpoint_every == 0:
            checkpoint_fn(state, metrics)

    state.check_teacher_frozen()
    return DistillResult(
        generator=state.theta,
        ema=state.ema.as_params(state.theta),
        auxiliary=state.psi,
        metrics=metrics,
        state=state,
    )
