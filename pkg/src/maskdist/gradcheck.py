"""Finite-difference verification of every closed-form divergence gradient.

The oracle perturbs student logits, pushes them through the temperature-1
softmax, and differences the divergence value; the closed forms must match
within a relative tolerance and sum to zero (softmax tangent space).
"""

from __future__ import annotations

import numpy as np

from maskdist.divergence import (
    DivergenceSpec,
    alpha_generator,
    jensen_shannon_generator,
    squared_hellinger_generator,
    token_gradient,
)
from maskdist.model import softmax_temperature


def fd_logit_gradient(spec: DivergenceSpec, p_teacher: np.ndarray,
                      z_student: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of div_value(softmax(z)) wrt z."""
    from maskdist.divergence import div_value

    V = z_student.shape[0]
    plus = np.broadcast_to(z_student, (V, V)).copy()
    plus[np.arange(V), np.arange(V)] += h
    minus = np.broadcast_to(z_student, (V, V)).copy()
    minus[np.arange(V), np.arange(V)] -= h
    pt = np.broadcast_to(p_teacher, (V, V))
    up = div_value(spec, pt, softmax_temperature(plus, 1.0))
    down = div_value(spec, pt, softmax_temperature(minus, 1.0))
    return (up - down) / (2.0 * h)


def default_specs() -> list[DivergenceSpec]:
    return [
        DivergenceSpec.fkl(),
        DivergenceSpec.rkl(),
        DivergenceSpec.jeffrey(-0.2),
        DivergenceSpec.jeffrey(0.0),
        DivergenceSpec.jeffrey(0.5),
        DivergenceSpec.jeffrey(1.0),
        DivergenceSpec.fdiv(jensen_shannon_generator()),
        DivergenceSpec.fdiv(squared_hellinger_generator()),
        DivergenceSpec.fdiv(alpha_generator(0.5)),
    ]


def run_suite(n_pairs: int = 200, vocab_sizes=(2, 8, 32), seed: int = 0,
              rel_tol: float = 1e-6, zero_sum_tol: float = 1e-10,
              specs: list[DivergenceSpec] | None = None) -> list[dict]:
    """One row per (divergence, V): worst relative FD error, worst gradient
    component sum, and a pass flag at the given tolerances."""
    rng = np.random.default_rng(seed)
    rows = []
    for spec in specs or default_specs():
        for V in vocab_sizes:
            worst_rel = 0.0
            worst_sum = 0.0
            for _ in range(n_pairs):
                z_teacher = rng.normal(0.0, 2.0, size=V)
                z_student = rng.normal(0.0, 2.0, size=V)
                p_teacher = softmax_temperature(z_teacher, 1.0)
                p_student = softmax_temperature(z_student, 1.0)
                grad = token_gradient(spec, p_teacher, p_student)
                fd = fd_logit_gradient(spec, p_teacher, z_student)
                rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
                worst_rel = max(worst_rel, rel)
                worst_sum = max(worst_sum, abs(grad.sum()))
            rows.append({
                "divergence": spec.describe(),
                "vocab": V,
                "max_rel_err": worst_rel,
                "max_grad_sum": worst_sum,
                "ok": worst_rel <= rel_tol and worst_sum <= zero_sum_tol,
            })
    return rows
