"""Exact enumeration oracles and distribution metrics.

Joint distributions over [V]^L are stored as dense flat tables (capped at
10^6 entries); anything larger falls back to sample statistics. The
enumeration of the multi-step reverse chain walks the partially-masked
state space exactly, using the same replacement law and fixed-count plan
as the samplers.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from maskdist.datasets import EXACT_JOINT_CAP, all_sequences, encode_sequences
from maskdist.diffusion import (
    MaskSchedule,
    fixed_count_plan,
    mask_ratio,
    model_probs,
    sample_multistep,
    timesteps,
)
from maskdist.distill import InitStrategy, one_step_sample, sample_init
from maskdist.model import (
    ModelParams,
    NetworkPredictor,
    predict_logits,
    softmax_temperature,
)
from maskdist.rng import StreamHub

ENUM_WORK_CAP = 5_000_000


@dataclass
class ExactJoint:
    """Dense distribution over [V]^L, flat big-endian indexing."""

    probs: np.ndarray
    seq_len: int
    vocab_size: int

    def __post_init__(self):
        expected = self.vocab_size**self.seq_len
        if self.probs.shape != (expected,):
            raise ValueError(f"joint table must have {expected} entries")
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("joint table does not sum to 1")

    @classmethod
    def from_flat(cls, probs, seq_len, vocab_size):
        return cls(np.asarray(probs, dtype=np.float64), seq_len, vocab_size)

    @classmethod
    def from_samples(cls, samples: np.ndarray, vocab_size: int) -> "ExactJoint":
        samples = np.asarray(samples, dtype=np.int64)
        n, L = samples.shape
        counts = np.bincount(
            encode_sequences(samples, vocab_size), minlength=vocab_size**L
        ).astype(np.float64)
        return cls(counts / n, L, vocab_size)

    def marginals(self) -> np.ndarray:
        cube = self.probs.reshape((self.vocab_size,) * self.seq_len)
        return np.stack([
            cube.sum(axis=tuple(j for j in range(self.seq_len) if j != i))
            for i in range(self.seq_len)
        ])

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-(p * np.log(p)).sum())


def tv_distance(p: ExactJoint, q: ExactJoint) -> float:
    """Total variation: half the L1 distance over a shared support."""
    if (p.seq_len, p.vocab_size) != (q.seq_len, q.vocab_size):
        raise ValueError("joint tables live on different supports")
    return float(0.5 * np.abs(p.probs - q.probs).sum())


class TabularTeacher:
    """Exact posterior teacher backed by per-class joint tables.

    For a partially masked state, the predicted distribution at each
    masked position is the true posterior over the consistent sequences;
    unmasked positions get a point mass on their token. Exposes the same
    ``logits_batch`` surface as a network-backed predictor, so samplers
    and enumerators cannot tell the difference.
    """

    def __init__(self, class_joints: np.ndarray, seq_len: int, vocab_size: int,
                 class_prior: np.ndarray | None = None):
        self.joints = np.asarray(class_joints, dtype=np.float64)
        self.seq_len = seq_len
        self.vocab_size = vocab_size
        n_classes = self.joints.shape[0]
        self.prior = (np.full(n_classes, 1.0 / n_classes)
                      if class_prior is None else np.asarray(class_prior))
        self._seq_table = all_sequences(seq_len, vocab_size)
        self._cache: dict = {}

    @classmethod
    def from_dataset(cls, dataset) -> "TabularTeacher":
        joints = np.stack([dataset.exact_joint(c) for c in range(dataset.n_classes)])
        return cls(joints, dataset.seq_len, dataset.vocab_size)

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    def _joint_for(self, cond) -> np.ndarray:
        if cond is None:
            return self.prior @ self.joints
        return self.joints[int(cond)]

    def posterior_rows(self, x_t: np.ndarray, cond) -> np.ndarray:
        """(L, V) conditional distribution table for one masked state."""
        x_t = np.asarray(x_t, dtype=np.int64)
        key = (x_t.tobytes(), None if cond is None else int(cond))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        joint = self._joint_for(cond)
        unmasked = x_t != self.mask_id
        consistent = np.all(self._seq_table[:, unmasked] == x_t[unmasked], axis=1)
        weights = joint * consistent
        total = weights.sum()
        rows = np.empty((self.seq_len, self.vocab_size))
        if total <= 0.0:
            rows[:] = 1.0 / self.vocab_size
        else:
            weights = weights / total
            for i in range(self.seq_len):
                if unmasked[i]:
                    rows[i] = 0.0
                    rows[i, x_t[i]] = 1.0
                else:
                    rows[i] = np.bincount(
                        self._seq_table[:, i], weights=weights,
                        minlength=self.vocab_size,
                    )
        self._cache[key] = rows
        return rows

    def logits_batch(self, seqs: np.ndarray, cond) -> np.ndarray:
        seqs = np.asarray(seqs, dtype=np.int64)
        if seqs.ndim == 1:
            seqs = seqs[None, :]
        # states repeat heavily during sampling; evaluate unique rows once
        uniq, inverse = np.unique(seqs, axis=0, return_inverse=True)
        rows = np.stack([
            np.log(np.maximum(self.posterior_rows(u, cond), 1e-300)) for u in uniq
        ])
        return rows[inverse]


def enumerate_multistep(model, cond, schedule: MaskSchedule, steps: int,
                        mode: str = "stochastic", tau: float | None = None,
                        cfg_scale: float = 1.0, top_k: int | None = None) -> ExactJoint:
    """Exact law of the multi-step sampler by dynamic programming over
    partially masked states. Raises when the state tree would exceed the
    work cap (use Monte Carlo sampling instead at that point)."""
    if mode not in ("stochastic", "fixed_count"):
        raise ValueError(f"unknown sampler mode {mode!r}")
    if tau is None:
        tau = 1.3 if mode == "fixed_count" else 1.0
    L, V = model.seq_len, model.vocab_size
    if V**L > EXACT_JOINT_CAP:
        raise ValueError(
            f"V^L = {V**L} exceeds the enumeration cap; use Monte Carlo")
    mask_id = V
    ts = timesteps(steps)
    plan = fixed_count_plan(L, steps, schedule) if mode == "fixed_count" else None

    states: dict[tuple, float] = {(mask_id,) * L: 1.0}
    for k in range(steps):
        batch = np.array(sorted(states), dtype=np.int64)
        if mode == "stochastic":
            r_t = mask_ratio(schedule, float(ts[k]))
            r_s = mask_ratio(schedule, float(ts[k + 1]))
            rho = (r_t - r_s) / r_t
        else:
            rho = None
            if plan[k] == 0:
                continue
        work = 0
        for state in states:
            m = sum(1 for v in state if v == mask_id)
            work += (V + 1) ** m if mode == "stochastic" else math.comb(m, plan[k]) * V ** plan[k]
        if work > ENUM_WORK_CAP:
            raise ValueError(
                f"enumeration step {k} needs {work} expansions (cap "
                f"{ENUM_WORK_CAP}); use Monte Carlo")
        probs = model_probs(model, batch, cond, tau, cfg_scale, top_k)
        nxt: dict[tuple, float] = {}
        for row, state in enumerate(map(tuple, batch)):
            w = states[state]
            masked = [i for i, v in enumerate(state) if v == mask_id]
            if not masked:
                nxt[state] = nxt.get(state, 0.0) + w
                continue
            if mode == "stochastic":
                # per masked position: stay masked w.p. 1-rho, else draw a token
                options = []
                for i in masked:
                    opts = [(mask_id, 1.0 - rho)] if rho < 1.0 else []
                    opts += [(v, rho * probs[row, i, v]) for v in range(V)
                             if probs[row, i, v] > 0.0]
                    options.append(opts)
                for combo in itertools.product(*options):
                    child = list(state)
                    cw = w
                    for i, (tok, pw) in zip(masked, combo):
                        child[i] = tok
                        cw *= pw
                    if cw > 0.0:
                        key = tuple(child)
                        nxt[key] = nxt.get(key, 0.0) + cw
            else:
                m_k = plan[k]
                subsets = list(itertools.combinations(masked, m_k))
                sub_w = w / len(subsets)
                for subset in subsets:
                    fills = [[(v, probs[row, i, v]) for v in range(V)
                              if probs[row, i, v] > 0.0] for i in subset]
                    for combo in itertools.product(*fills):
                        child = list(state)
                        cw = sub_w
                        for i, (tok, pw) in zip(subset, combo):
                            child[i] = tok
                            cw *= pw
                        if cw > 0.0:
                            key = tuple(child)
                            nxt[key] = nxt.get(key, 0.0) + cw
        states = nxt

    flat = np.zeros(V**L)
    for state, w in states.items():
        if mask_id in state:
            raise RuntimeError("enumeration finished with masked positions")
        flat[int(encode_sequences(np.array(state), V))] += w
    return ExactJoint(flat, L, V)


def student_onestep_joint(generator: ModelParams, init: InitStrategy, cond,
                          n_init: int, rng: np.random.Generator,
                          tau: float = 1.0) -> ExactJoint:
    """Student's one-step output law: exact per initial state (a product of
    token distributions), Monte Carlo over n_init initial states."""
    cfg = generator.config
    L, V = cfg.seq_len, cfg.vocab_size
    if V**L > EXACT_JOINT_CAP:
        raise ValueError(f"V^L = {V**L} exceeds the enumeration cap")
    cond_ids = np.full(n_init, -1 if cond is None else int(cond), dtype=np.int64)
    x_init, perturb = sample_init(init, n_init, L, V, cfg.d_model, rng)
    probs = softmax_temperature(predict_logits(generator, x_init, cond_ids, perturb), tau)
    flat = np.zeros(V**L)
    for b in range(n_init):
        prod = probs[b, 0]
        for i in range(1, L):
            prod = (prod[:, None] * probs[b, i][None, :]).reshape(-1)
        flat += prod
    return ExactJoint(flat / n_init, L, V)


def support_histogram(prob_rows: np.ndarray, threshold: float = 0.001) -> np.ndarray:
    """Histogram over positions of how many vocabulary entries exceed the
    threshold; entry c counts rows with support size c."""
    rows = np.asarray(prob_rows, dtype=np.float64).reshape(-1, prob_rows.shape[-1])
    counts = (rows > threshold).sum(axis=1)
    return np.bincount(counts, minlength=rows.shape[1] + 1)


# ------------------------------------------------------------ sample metrics


def empirical_marginals(samples: np.ndarray, vocab_size: int) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.int64)
    n, L = samples.shape
    out = np.empty((L, vocab_size))
    for i in range(L):
        out[i] = np.bincount(samples[:, i], minlength=vocab_size) / n
    return out


def marginal_tv(marg_a: np.ndarray, marg_b: np.ndarray) -> np.ndarray:
    """Per-position total variation between two (L, V) marginal tables."""
    return 0.5 * np.abs(marg_a - marg_b).sum(axis=1)


def pair_cooccurrence(samples: np.ndarray, vocab_size: int) -> np.ndarray:
    """Empirical (L, L, V, V) pairwise joint tables (upper triangle)."""
    samples = np.asarray(samples, dtype=np.int64)
    n, L = samples.shape
    out = np.zeros((L, L, vocab_size, vocab_size))
    for i in range(L):
        for j in range(i + 1, L):
            flat = samples[:, i] * vocab_size + samples[:, j]
            out[i, j] = np.bincount(flat, minlength=vocab_size**2).reshape(
                vocab_size, vocab_size) / n
    return out


def cooccurrence_frobenius(co_a: np.ndarray, co_b: np.ndarray) -> float:
    """Mean Frobenius distance between pairwise joints over position pairs."""
    L = co_a.shape[0]
    errs = [np.linalg.norm(co_a[i, j] - co_b[i, j])
            for i in range(L) for j in range(i + 1, L)]
    return float(np.mean(errs)) if errs else 0.0


def entropy_marginal_sum(samples: np.ndarray, vocab_size: int) -> float:
    """Sum over positions of the empirical marginal entropy (nats); a
    stable stand-in for joint sample entropy at desk scale."""
    marg = empirical_marginals(samples, vocab_size)
    p = np.maximum(marg, 1e-300)
    return float(-(marg * np.log(p)).sum())


def entropy_plugin(samples: np.ndarray) -> float:
    """Plug-in entropy of the empirical distribution over whole sequences."""
    _, counts = np.unique(np.asarray(samples), axis=0, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


# -------------------------------------------------------------- diagnostics


def diagnostics(teacher, dataset, schedule: MaskSchedule, teacher_steps: int,
                n_samples: int, temperature_grid, n_init: int, seed: int,
                cfg_scale: float = 1.0, student: ModelParams | None = None,
                student_init: InitStrategy | None = None,
                sampler_mode: str = "stochastic"):
    """Distribution diagnostics for a teacher and optionally a one-step
    student: per-position marginal TV, pairwise co-occurrence error, sample
    entropy, support histograms, and a temperature sweep.

    Returns (report dict, grid rows) where grid rows are flat
    (axis, value, ...) records for plotting.
    """
    if isinstance(teacher, ModelParams):
        teacher_handle = NetworkPredictor(teacher)
    else:
        teacher_handle = teacher
    hub = StreamHub(seed)
    L, V = teacher_handle.seq_len, teacher_handle.vocab_size
    all_mask = np.full(L, V, dtype=np.int64)

    report: dict = {"classes": {}, "settings": {
        "teacher_steps": teacher_steps, "n_samples": n_samples,
        "temperature_grid": list(map(float, temperature_grid)),
        "sampler_mode": sampler_mode, "cfg_scale": cfg_scale,
    }}
    grid_rows: list[dict] = []

    for c in range(dataset.n_classes):
        rng = hub.stream(f"diag.class{c}")
        t_samples = sample_multistep(
            teacher_handle, c, schedule, teacher_steps, rng,
            mode=sampler_mode, cfg_scale=cfg_scale, batch=n_samples,
            tau=1.0 if sampler_mode == "stochastic" else None)
        t_marg = empirical_marginals(t_samples, V)
        data_marg = dataset.marginals(c)
        t_tv = marginal_tv(t_marg, data_marg)
        t_co = pair_cooccurrence(t_samples, V)
        data_co = np.zeros_like(t_co)
        for i in range(L):
            for j in range(i + 1, L):
                data_co[i, j] = dataset.pair_joint(c, i, j)
        t_rows = softmax_temperature(
            teacher_handle.logits_batch(all_mask[None, :], c)[0], 1.0)
        entry: dict = {"teacher": {
            "marginal_tv_to_data_mean": float(t_tv.mean()),
            "marginal_tv_to_data_max": float(t_tv.max()),
            "cooccurrence_frobenius_to_data": cooccurrence_frobenius(t_co, data_co),
            "entropy_marginal_sum": entropy_marginal_sum(t_samples, V),
            "support_histogram": support_histogram(t_rows).tolist(),
        }}

        if student is not None:
            init = student_init if student_init is not None else InitStrategy()
            s_logits = predict_logits(
                student,
                sample_init(init, n_init, L, V, student.config.d_model,
                            hub.stream(f"diag.init{c}"))[0],
                np.full(n_init, c, dtype=np.int64))
            entry["student"] = {
                "support_histogram": support_histogram(
                    softmax_temperature(s_logits, 1.0)).tolist(),
                "temperatures": {},
            }
            for tau in temperature_grid:
                s_samples = one_step_sample(
                    student, init, c, n_samples, hub.stream(f"diag.s{c}.{tau}"), tau=tau)
                s_marg = empirical_marginals(s_samples, V)
                stats = {
                    "marginal_tv_to_teacher_mean": float(
                        marginal_tv(s_marg, t_marg).mean()),
                    "entropy_marginal_sum": entropy_marginal_sum(s_samples, V),
                    "cooccurrence_frobenius_to_teacher": cooccurrence_frobenius(
                        pair_cooccurrence(s_samples, V), t_co),
                }
                entry["student"]["temperatures"][repr(float(tau))] = stats
                grid_rows.append({
                    "axis": "temperature", "value": float(tau), "class": c,
                    "tv": stats["marginal_tv_to_teacher_mean"],
                    "entropy": stats["entropy_marginal_sum"],
                })
        report["classes"][str(c)] = entry

    agg: dict = {
        "teacher_marginal_tv_to_data_mean": float(np.mean([
            e["teacher"]["marginal_tv_to_data_mean"]
            for e in report["classes"].values()])),
        "teacher_marginal_tv_to_data_max": float(np.max([
            e["teacher"]["marginal_tv_to_data_max"]
            for e in report["classes"].values()])),
    }
    report["aggregate"] = agg
    return report, grid_rows
