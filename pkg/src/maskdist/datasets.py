"""Synthetic discrete datasets with enumerable ground truth.

Three kinds, all seeded-procedural (regenerated on demand, never stored):

  tabular       explicit per-class joint table over [V]^L (small L only);
                the delta variant puts all mass on one sequence per class
  markov_chain  class-specific first-order chain: initial distribution
                plus transition matrix, exact marginals/pairs in closed form
  patterned     class template sequence; each position independently keeps
                its template token or resamples uniformly at a noise rate
"""

from __future__ import annotations

import json

import numpy as np

EXACT_JOINT_CAP = 1_000_000

KINDS = ("tabular", "markov_chain", "patterned")


def all_sequences(seq_len: int, vocab_size: int) -> np.ndarray:
    """(V^L, L) table of every sequence, big-endian in position 0."""
    n = vocab_size**seq_len
    if n > EXACT_JOINT_CAP:
        raise ValueError(f"V^L = {n} exceeds enumeration cap {EXACT_JOINT_CAP}")
    grids = np.indices((vocab_size,) * seq_len).reshape(seq_len, n).T
    return np.ascontiguousarray(grids, dtype=np.int64)


def encode_sequences(seqs: np.ndarray, vocab_size: int) -> np.ndarray:
    """Flat joint-table index of each (.., L) sequence."""
    seqs = np.asarray(seqs, dtype=np.int64)
    L = seqs.shape[-1]
    weights = vocab_size ** np.arange(L - 1, -1, -1, dtype=np.int64)
    return seqs @ weights


class SyntheticDataset:
    def __init__(self, kind: str, seq_len: int, vocab_size: int, n_classes: int,
                 seed: int, params: dict | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown dataset kind {kind!r}")
        self.kind = kind
        self.seq_len = seq_len
        self.vocab_size = vocab_size
        self.n_classes = n_classes
        self.seed = int(seed)
        self.params = dict(params or {})
        self._generate()

    # ------------------------------------------------------------- factories

    @classmethod
    def tabular(cls, seq_len, vocab_size, n_classes, seed, sharpness: float = 1.5):
        return cls("tabular", seq_len, vocab_size, n_classes, seed,
                   {"sharpness": sharpness})

    @classmethod
    def tabular_delta(cls, seq_len, vocab_size, n_classes, seed):
        """One fixed sequence per class (a delta distribution)."""
        return cls("tabular", seq_len, vocab_size, n_classes, seed, {"delta": True})

    @classmethod
    def markov_chain(cls, seq_len, vocab_size, n_classes, seed,
                     concentration: float = 0.3):
        return cls("markov_chain", seq_len, vocab_size, n_classes, seed,
                   {"concentration": concentration})

    @classmethod
    def patterned(cls, seq_len, vocab_size, n_classes, seed, noise_rate: float = 0.1):
        return cls("patterned", seq_len, vocab_size, n_classes, seed,
                   {"noise_rate": noise_rate})

    # ------------------------------------------------------------ generation

    def _generate(self):
        gen = np.random.Generator(np.random.Philox(
            key=np.array([np.uint64(self.seed), np.uint64(0xD5)], dtype=np.uint64)))
        L, V, C = self.seq_len, self.vocab_size, self.n_classes
        if self.kind == "tabular":
            n = V**L
            if n > EXACT_JOINT_CAP:
                raise ValueError("tabular dataset needs a small V^L")
            tables = np.empty((C, n))
            if self.params.get("delta"):
                for c in range(C):
                    tables[c] = 0.0
                    tables[c, gen.integers(0, n)] = 1.0
            else:
                sharpness = float(self.params.get("sharpness", 1.5))
                logits = gen.normal(0.0, sharpness, size=(C, n))
                tables = np.exp(logits - logits.max(axis=1, keepdims=True))
                tables /= tables.sum(axis=1, keepdims=True)
            self._tables = tables
        elif self.kind == "markov_chain":
            conc = float(self.params.get("concentration", 0.3))
            self._initial = gen.dirichlet(np.full(V, conc), size=C)
            self._transition = np.stack(
                [gen.dirichlet(np.full(V, conc), size=V) for _ in range(C)]
            )
        else:  # patterned
            self._templates = gen.integers(0, V, size=(C, L))
            self._noise = float(self.params.get("noise_rate", 0.1))

    # -------------------------------------------------------------- sampling

    def sample(self, class_id: int, n: int, rng: np.random.Generator) -> np.ndarray:
        L, V = self.seq_len, self.vocab_size
        if self.kind == "tabular":
            flat = rng.choice(self._tables.shape[1], size=n, p=self._tables[class_id])
            return all_sequences(L, V)[flat]
        if self.kind == "markov_chain":
            out = np.empty((n, L), dtype=np.int64)
            cdf0 = np.cumsum(self._initial[class_id])
            cdf0[-1] = 1.0
            out[:, 0] = np.searchsorted(cdf0, rng.random(n), side="right")
            cdf = np.cumsum(self._transition[class_id], axis=1)
            cdf[:, -1] = 1.0
            for i in range(1, L):
                u = rng.random(n)
                rows = cdf[out[:, i - 1]]
                out[:, i] = (rows > u[:, None]).argmax(axis=1)
            return out
        tpl = self._templates[class_id]
        out = np.broadcast_to(tpl, (n, L)).copy()
        resample = rng.random((n, L)) < self._noise
        out[resample] = rng.integers(0, V, size=int(resample.sum()))
        return out

    def sample_batch(self, n: int, rng: np.random.Generator):
        """Uniform class draw plus a sequence per draw -> (classes, seqs)."""
        classes = rng.integers(0, self.n_classes, size=n)
        seqs = np.empty((n, self.seq_len), dtype=np.int64)
        for c in np.unique(classes):
            sel = classes == c
            seqs[sel] = self.sample(int(c), int(sel.sum()), rng)
        return classes.astype(np.int64), seqs

    # ------------------------------------------------------------ exact laws

    def _position_rows(self, class_id: int) -> np.ndarray:
        """Patterned kind: independent per-position distributions (L, V)."""
        L, V = self.seq_len, self.vocab_size
        rows = np.full((L, V), self._noise / V)
        rows[np.arange(L), self._templates[class_id]] += 1.0 - self._noise
        return rows

    def exact_joint(self, class_id: int) -> np.ndarray:
        """Flat (V^L,) joint table; big-endian position order."""
        L, V = self.seq_len, self.vocab_size
        if V**L > EXACT_JOINT_CAP:
            raise ValueError("joint enumeration exceeds the V^L cap")
        if self.kind == "tabular":
            return self._tables[class_id].copy()
        if self.kind == "markov_chain":
            flat = self._initial[class_id].copy()
            T = self._transition[class_id]
            for _ in range(1, L):
                last = np.arange(flat.size) % V  # trailing token of each prefix
                flat = (flat[:, None] * T[last]).reshape(-1)
            return flat
        rows = self._position_rows(class_id)
        flat = rows[0]
        for i in range(1, L):
            flat = (flat[:, None] * rows[i][None, :]).reshape(-1)
        return flat

    def marginals(self, class_id: int) -> np.ndarray:
        """Exact per-position marginals (L, V)."""
        L, V = self.seq_len, self.vocab_size
        if self.kind == "markov_chain":
            out = np.empty((L, V))
            mu = self._initial[class_id]
            out[0] = mu
            for i in range(1, L):
                mu = mu @ self._transition[class_id]
                out[i] = mu
            return out
        if self.kind == "patterned":
            return self._position_rows(class_id)
        joint = self.exact_joint(class_id).reshape((V,) * L)
        return np.stack(
            [joint.sum(axis=tuple(j for j in range(L) if j != i)) for i in range(L)]
        )

    def pair_joint(self, class_id: int, i: int, j: int) -> np.ndarray:
        """Exact joint of positions i < j as a (V, V) table."""
        if not 0 <= i < j < self.seq_len:
            raise ValueError("need 0 <= i < j < L")
        V = self.vocab_size
        if self.kind == "markov_chain":
            mu = self._initial[class_id]
            T = self._transition[class_id]
            for _ in range(i):
                mu = mu @ T
            step = np.linalg.matrix_power(T, j - i)
            return mu[:, None] * step
        if self.kind == "patterned":
            rows = self._position_rows(class_id)
            return np.outer(rows[i], rows[j])
        L = self.seq_len
        joint = self.exact_joint(class_id).reshape((V,) * L)
        axes = tuple(k for k in range(L) if k not in (i, j))
        return joint.sum(axis=axes)

    # ---------------------------------------------------------- serialization

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "seq_len": self.seq_len,
                "vocab_size": self.vocab_size,
                "n_classes": self.n_classes,
                "seed": self.seed,
                "params": self.params,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SyntheticDataset":
        d = json.loads(text)
        return cls(d["kind"], d["seq_len"], d["vocab_size"], d["n_classes"],
                   d["seed"], d.get("params"))
