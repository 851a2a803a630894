"""Token-level divergences and their closed-form logit gradients.

All gradients are taken with respect to the *student* logits, with the
teacher distribution held constant. Closed forms:

  FKL:  grad_j = q_j - p_j
  RKL:  grad_j = q_j * (log(q_j / p_j) - RKL(q || p))
  f-divergence D_f = sum_k q_k f(p_k / q_k):
        grad_j = q_j * (h_j - sum_k q_k h_k),  h = f(u) - u f'(u)

with p the teacher row, q the student row. Every gradient lives in the
softmax tangent space, so its components sum to zero.

Probabilities are floored at EPS inside logs and ratios; the same floor
is used by the finite-difference oracles in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from maskdist.tensor import CheckError, _checked

EPS = 1e-12
U_FLOOR = 1e-12
U_CEIL = 1e12


@dataclass(frozen=True)
class FGenerator:
    """Convex generator f with f(1) = 0, plus its derivative."""

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    fprime: Callable[[np.ndarray], np.ndarray]


def _fkl_gen() -> FGenerator:
    return FGenerator("fkl", lambda u: u * np.log(u), lambda u: np.log(u) + 1.0)


def _rkl_gen() -> FGenerator:
    return FGenerator("rkl", lambda u: -np.log(u), lambda u: -1.0 / u)


def jeffrey_generator(beta: float) -> FGenerator:
    def f(u):
        return ((1.0 - beta) * u - beta) * np.log(u)

    def fprime(u):
        return (1.0 - beta) * np.log(u) + (1.0 - beta) - beta / u

    return FGenerator(f"jeffrey[{beta}]", f, fprime)


def alpha_generator(alpha: float) -> FGenerator:
    if alpha in (0.0, 1.0):
        raise ValueError("alpha-divergence requires alpha outside {0, 1}")
    c = 1.0 / (alpha * (alpha - 1.0))

    def f(u):
        return c * (u ** (1.0 - alpha) - (1.0 - alpha) * u - alpha)

    def fprime(u):
        return (1.0 - u**-alpha) / alpha

    return FGenerator(f"alpha[{alpha}]", f, fprime)


def jensen_shannon_generator() -> FGenerator:
    def f(u):
        return -(u + 1.0) * np.log((1.0 + u) / 2.0) + u * np.log(u)

    def fprime(u):
        return np.log(2.0 * u / (1.0 + u))

    return FGenerator("jensen_shannon", f, fprime)


def squared_hellinger_generator() -> FGenerator:
    return FGenerator(
        "squared_hellinger",
        lambda u: (np.sqrt(u) - 1.0) ** 2,
        lambda u: 1.0 - 1.0 / np.sqrt(u),
    )


GENERATORS: dict[str, Callable[..., FGenerator]] = {
    "fkl": _fkl_gen,
    "rkl": _rkl_gen,
    "jeffrey": jeffrey_generator,
    "alpha": alpha_generator,
    "jensen_shannon": jensen_shannon_generator,
    "squared_hellinger": squared_hellinger_generator,
}


@dataclass(frozen=True)
class DivergenceSpec:
    """Which divergence drives distillation: fkl, rkl, jeffrey(beta), or a
    generic f-divergence given by a generator."""

    kind: str
    beta: float = 0.0
    generator: FGenerator | None = None

    @classmethod
    def fkl(cls):
        return cls("fkl")

    @classmethod
    def rkl(cls):
        return cls("rkl")

    @classmethod
    def jeffrey(cls, beta: float):
        return cls("jeffrey", beta=float(beta))

    @classmethod
    def fdiv(cls, generator: FGenerator):
        return cls("fdiv", generator=generator)

    def describe(self) -> str:
        if self.kind == "jeffrey":
            return f"jeffrey[{self.beta}]"
        if self.kind == "fdiv":
            return f"fdiv[{self.generator.name}]"
        return self.kind


def _validate_pair(p_teacher: np.ndarray, p_student: np.ndarray):
    if p_teacher.shape != p_student.shape:
        raise ValueError("teacher/student probability shapes differ")
    for name, p in (("teacher", p_teacher), ("student", p_student)):
        if np.any(p < -1e-12):
            raise ValueError(f"{name} probabilities contain negative entries")
        sums = p.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-8):
            raise ValueError(f"{name} probabilities do not sum to 1")


def _floored(p: np.ndarray) -> np.ndarray:
    return np.maximum(p, EPS)


def _ratio(p_teacher: np.ndarray, p_student: np.ndarray) -> np.ndarray:
    u = _floored(p_teacher) / _floored(p_student)
    if _checked() and (np.any(u >= U_CEIL) or np.any(u <= U_FLOOR)):
        raise CheckError("probability ratio beyond floor/ceiling")
    return u


def div_value(spec: DivergenceSpec, p_teacher: np.ndarray,
              p_student: np.ndarray) -> float | np.ndarray:
    """Divergence per row of a (..., V) pair; scalar for single rows."""
    p_teacher = np.asarray(p_teacher, dtype=np.float64)
    p_student = np.asarray(p_student, dtype=np.float64)
    _validate_pair(p_teacher, p_student)
    log_ratio = np.log(_floored(p_teacher)) - np.log(_floored(p_student))
    fkl = (p_teacher * log_ratio).sum(axis=-1)
    rkl = -(p_student * log_ratio).sum(axis=-1)
    if spec.kind == "fkl":
        out = fkl
    elif spec.kind == "rkl":
        out = rkl
    elif spec.kind == "jeffrey":
        out = (1.0 - spec.beta) * fkl + spec.beta * rkl
    elif spec.kind == "fdiv":
        u = _ratio(p_teacher, p_student)
        out = (p_student * spec.generator.f(u)).sum(axis=-1)
    else:
        raise ValueError(f"unknown divergence kind {spec.kind!r}")
    return float(out) if out.ndim == 0 else out


def fkl_grad(p_teacher: np.ndarray, p_student: np.ndarray) -> np.ndarray:
    """d FKL / d student-logits = p_student - p_teacher."""
    return np.asarray(p_student, dtype=np.float64) - np.asarray(p_teacher, dtype=np.float64)


def rkl_grad(p_teacher: np.ndarray, p_student: np.ndarray) -> np.ndarray:
    """d RKL / d student-logits = q * (log(q/p) - RKL)."""
    q = np.asarray(p_student, dtype=np.float64)
    log_ratio = np.log(_floored(q)) - np.log(_floored(np.asarray(p_teacher, dtype=np.float64)))
    rkl = (q * log_ratio).sum(axis=-1, keepdims=True)
    return q * (log_ratio - rkl)


def jeffrey_grad(beta: float, p_teacher: np.ndarray, p_student: np.ndarray) -> np.ndarray:
    """Linear interpolation (and extrapolation) between FKL and RKL grads."""
    return (1.0 - beta) * fkl_grad(p_teacher, p_student) + beta * rkl_grad(
        p_teacher, p_student
    )


def fdiv_grad(generator: FGenerator, p_teacher: np.ndarray,
              p_student: np.ndarray) -> np.ndarray:
    """Closed-form f-divergence gradient via h = f(u) - u f'(u)."""
    q = np.asarray(p_student, dtype=np.float64)
    u = _ratio(np.asarray(p_teacher, dtype=np.float64), q)
    h = generator.f(u) - u * generator.fprime(u)
    inner = (q * h).sum(axis=-1, keepdims=True)
    return q * (h - inner)


def token_gradient(spec: DivergenceSpec, p_teacher: np.ndarray,
                   p_student: np.ndarray) -> np.ndarray:
    """Gradient of the chosen divergence wrt student logits, rowwise."""
    if spec.kind == "fkl":
        return fkl_grad(p_teacher, p_student)
    if spec.kind == "rkl":
        return rkl_grad(p_teacher, p_student)
    if spec.kind == "jeffrey":
        return jeffrey_grad(spec.beta, p_teacher, p_student)
    if spec.kind == "fdiv":
        return fdiv_grad(spec.generator, p_teacher, p_student)
    raise ValueError(f"unknown divergence kind {spec.kind!r}")
