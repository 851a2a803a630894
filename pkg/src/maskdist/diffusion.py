"""Absorbing-state forward process and multi-step reverse samplers.

The forward process masks each position independently with probability
r_t. The stochastic reverse step replaces each masked position with a
draw from the model's token distribution with probability
(r_t - r_s) / r_t, leaving it masked otherwise; unmasked positions are
never touched. The fixed-count sampler instead unmasks a
schedule-determined number of positions per step, chosen uniformly at
random (confidence-greedy selection is deliberately not offered).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from maskdist._kernels import categorical_rows
from maskdist.model import apply_top_k, cfg_combine, softmax_temperature

SCHEDULE_KINDS = ("linear", "cosine", "arccos")


@dataclass(frozen=True)
class MaskSchedule:
    """Monotone map t -> r_t on [0,1] with r_0 = 0 and r_1 = 1.

    Closed forms (pinned conventions, mirroring common schedules):
      linear: r_t = t
      cosine: r_t = 1 - cos(pi t / 2)
      arccos: r_t = (2/pi) * arccos(1 - t)
    """

    kind: str = "arccos"

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def __call__(self, t: float) -> float:
        return mask_ratio(self, t)


def mask_ratio(schedule: MaskSchedule, t: float) -> float:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"timestep {t} outside [0, 1]")
    if schedule.kind == "linear":
        return float(t)
    if schedule.kind == "cosine":
        return float(1.0 - np.cos(np.pi * t / 2.0))
    return float(2.0 / np.pi * np.arccos(1.0 - t))


def forward_mask(x0: np.ndarray, r_t: float, rng: np.random.Generator,
                 mask_id: int) -> np.ndarray:
    """Independently mask each position with probability r_t."""
    if not 0.0 <= r_t <= 1.0:
        raise ValueError(f"mask ratio {r_t} outside [0, 1]")
    x0 = np.asarray(x0, dtype=np.int64)
    if np.any(x0 == mask_id):
        raise ValueError("forward_mask input already contains mask tokens")
    out = x0.copy()
    out[rng.random(x0.shape) < r_t] = mask_id
    return out


def reverse_step(x_t: np.ndarray, probs: np.ndarray, r_t: float, r_s: float,
                 rng: np.random.Generator, mask_id: int) -> np.ndarray:
    """One stochastic transition t -> s; probs rows give each position's
    token distribution (only masked rows are consulted)."""
    if not 0.0 <= r_s < r_t <= 1.0:
        raise ValueError(f"need 0 <= r_s < r_t <= 1, got r_s={r_s}, r_t={r_t}")
    x_t = np.asarray(x_t, dtype=np.int64)
    flat = x_t.reshape(-1)
    masked = np.flatnonzero(flat == mask_id)
    out = flat.copy()
    if masked.size:
        replace = rng.random(masked.size) < (r_t - r_s) / r_t
        chosen = masked[replace]
        if chosen.size:
            rows = np.ascontiguousarray(probs.reshape(-1, probs.shape[-1])[chosen])
            out[chosen] = categorical_rows(rows, np.ascontiguousarray(rng.random(chosen.size)))
    return out.reshape(x_t.shape)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent draw per row of a (..., V) probability array."""
    v = probs.shape[-1]
    rows = np.ascontiguousarray(probs.reshape(-1, v))
    u = np.ascontiguousarray(rng.random(rows.shape[0]))
    return categorical_rows(rows, u).reshape(probs.shape[:-1])


def timesteps(steps: int) -> np.ndarray:
    """Uniform reverse-time grid t_k = 1 - k/N for k = 0..N."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return 1.0 - np.arange(steps + 1) / steps


def fixed_count_plan(seq_len: int, steps: int, schedule: MaskSchedule) -> list[int]:
    """Number of positions to unmask at each of the N steps.

    The cumulative target entering step k is round(L * (1 - r_{t_k}));
    every step unmasks at least one position when enough remain, and the
    final step always completes the sequence.
    """
    ts = timesteps(steps)
    targets = [int(round(seq_len * (1.0 - mask_ratio(schedule, t)))) for t in ts]
    plan = []
    unmasked = 0
    for k in range(steps):
        remaining = seq_len - unmasked
        reserve = steps - 1 - k
        lo = 1 if remaining > reserve else 0
        hi = max(lo, remaining - reserve)
        m = int(np.clip(targets[k + 1] - unmasked, lo, hi))
        if k == steps - 1:
            m = remaining
        plan.append(m)
        unmasked += m
    return plan


def model_probs(model, x: np.ndarray, cond, tau: float, cfg_scale: float,
                top_k: int | None) -> np.ndarray:
    """Guided, temperature-scaled token distributions for a batch of states."""
    z = model.logits_batch(x, cond)
    if cfg_scale != 1.0 and cond is not None:
        z = cfg_combine(z, model.logits_batch(x, None), cfg_scale)
    return softmax_temperature(apply_top_k(z, top_k), tau)


def sample_multistep(model, cond, schedule: MaskSchedule, steps: int,
                     rng: np.random.Generator, mode: str = "stochastic",
                     tau: float | None = None, cfg_scale: float = 1.0,
                     top_k: int | None = None, batch: int = 1) -> np.ndarray:
    """Run the reverse process from all-mask to a fully unmasked batch.

    mode "stochastic" uses the (r_t - r_s)/r_t replacement law; mode
    "fixed_count" is the heuristic parallel sampler (defaults to
    temperature 1.3 when tau is not given, per its usual operating point).
    """
    if mode not in ("stochastic", "fixed_count"):
        raise ValueError(f"unknown sampler mode {mode!r}")
    if tau is None:
        tau = 1.3 if mode == "fixed_count" else 1.0
    L = model.seq_len
    mask_id = model.vocab_size
    x = np.full((batch, L), mask_id, dtype=np.int64)
    ts = timesteps(steps)

    if mode == "stochastic":
        for k in range(steps):
            probs = model_probs(model, x, cond, tau, cfg_scale, top_k)
            r_t = mask_ratio(schedule, ts[k])
            r_s = mask_ratio(schedule, ts[k + 1])
            x = reverse_step(x, probs, r_t, r_s, rng, mask_id)
        return x

    plan = fixed_count_plan(L, steps, schedule)
    for m in plan:
        if m == 0:
            continue
        probs = model_probs(model, x, cond, tau, cfg_scale, top_k)
        for b in range(batch):
            masked = np.flatnonzero(x[b] == mask_id)
            chosen = rng.choice(masked, size=m, replace=False)
            rows = np.ascontiguousarray(probs[b, chosen])
            x[b, chosen] = categorical_rows(rows, np.ascontiguousarray(rng.random(m)))
    return x
