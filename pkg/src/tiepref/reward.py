"""Reward parameterizations ``r_psi(prompt, response)`` with exact parameter gradients.

Every model works on batches: ``scores(prompt_ids, features)`` returns one score
per row and ``backward(prompt_ids, features, upstream)`` returns
``sum_i upstream[i] * d score_i / d psi`` as a flat vector.  Single-input
helpers (``score``, ``score_gradient``, ``delta``) are thin wrappers.

Responses are vectors over {0, 1, 2, 3}; tabular variants address them by the
base-4 index ``sum_k features[k] * 4**k``.
"""

from __future__ import annotations

import math
import os
from abc import ABC, abstractmethod

import numpy as np
from scipy.special import logsumexp

from .dataset import N_LEVELS, ComparisonRecord, PreferenceDataset
from .errors import DomainError, InvalidParameterError, RecordParseError, ValidationError
from .rng import substream

DENSE_LIMIT = 1 << 22
TRUTH_LOW, TRUTH_HIGH = -2.0, 2.0


def _as_batch(prompt_ids, features) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(prompt_ids, dtype=np.int64).reshape(-1)
    f = np.asarray(features)
    if f.ndim == 1:
        f = f.reshape(1, -1)
    if len(p) != len(f):
        raise DomainError(f"{len(p)} prompt ids but {len(f)} responses")
    return p, f


def response_index(features: np.ndarray) -> np.ndarray:
    """Base-4 index of each response row."""
    f = np.asarray(features, dtype=np.int64)
    powers = N_LEVELS ** np.arange(f.shape[1], dtype=np.int64)
    return f @ powers


def one_hot_features(features: np.ndarray) -> np.ndarray:
    """One-hot of every (position, value) cell: shape (B, 4 * dimension)."""
    f = np.asarray(features, dtype=np.int64)
    b, n = f.shape
    out = np.zeros((b, N_LEVELS * n))
    out[np.arange(b)[:, None], N_LEVELS * np.arange(n) + f] = 1.0
    return out


class RewardModel(ABC):
    kind: str = "abstract"

    def __init__(self, n_prompts: int, dimension: int):
        if n_prompts < 1 or dimension < 1:
            raise InvalidParameterError("n_prompts and dimension must be >= 1")
        self.n_prompts = int(n_prompts)
        self.dimension = int(dimension)

    # parameters ---------------------------------------------------------

    @property
    def n_params(self) -> int:
        return len(self.get_params())

    @abstractmethod
    def get_params(self) -> np.ndarray:
        """Copy of the flat parameter vector."""

    @abstractmethod
    def set_params(self, psi: np.ndarray) -> None:
        ...

    def _check_psi(self, psi) -> np.ndarray:
        psi = np.asarray(psi, dtype=np.float64).reshape(-1)
        if len(psi) != self.n_params:
            raise ValidationError(f"expected {self.n_params} parameters, got {len(psi)}")
        if not np.all(np.isfinite(psi)):
            raise ValidationError("parameters must be finite")
        return psi

    # evaluation ---------------------------------------------------------

    def _check_domain(self, prompt_ids: np.ndarray, features: np.ndarray) -> None:
        if features.shape[1] != self.dimension:
            raise DomainError(f"response length {features.shape[1]} != model dimension {self.dimension}")
        if features.size and (features.min() < 0 or features.max() >= N_LEVELS):
            raise DomainError(f"features must lie in 0..{N_LEVELS - 1}")
        if prompt_ids.size and prompt_ids.min() < 0:
            raise DomainError("prompt ids must be non-negative")

    @abstractmethod
    def scores(self, prompt_ids, features) -> np.ndarray:
        ...

    @abstractmethod
    def backward(self, prompt_ids, features, upstream) -> np.ndarray:
        ...

    def score(self, prompt_id: int, features) -> float:
        return float(self.scores([prompt_id], [list(features)])[0])

    def score_gradient(self, prompt_id: int, features) -> np.ndarray:
        return self.backward([prompt_id], [list(features)], np.ones(1))

    def deltas(self, dataset: PreferenceDataset) -> np.ndarray:
        """Strength ``r(x, a) - r(x, b)`` for every record."""
        return self.scores(dataset.prompt_ids, dataset.response_a) - self.scores(
            dataset.prompt_ids, dataset.response_b)

    def delta_backward(self, dataset: PreferenceDataset, upstream) -> np.ndarray:
        upstream = np.asarray(upstream, dtype=np.float64)
        return (self.backward(dataset.prompt_ids, dataset.response_a, upstream)
                - self.backward(dataset.prompt_ids, dataset.response_b, upstream))

    def pair_deltas(self, prompt_ids, features_a, features_b):
        """Strengths for a batch of pairs plus a context for :meth:`pair_backward`."""
        p = np.asarray(prompt_ids, dtype=np.int64).reshape(-1)
        return self.scores(p, features_a) - self.scores(p, features_b), (p, features_a, features_b)

    def pair_backward(self, ctx, upstream) -> np.ndarray:
        """``sum_i upstream[i] * d delta_i / d psi`` for the pairs behind ``ctx``."""
        p, a, b = ctx
        g = np.asarray(upstream, dtype=np.float64)
        return self.backward(np.concatenate([p, p]), np.vstack([a, b]), np.concatenate([g, -g]))

    def delta(self, record: ComparisonRecord) -> float:
        return self.score(record.prompt_id, record.response_a) - self.score(record.prompt_id, record.response_b)

    def checkpoint_meta(self) -> dict:
        return {"n_prompts": self.n_prompts, "dimension": self.dimension}

    def copy(self) -> "RewardModel":
        import copy
        return copy.deepcopy(self)


class TabularReward(RewardModel):
    """A lookup table over (prompt, response); unset cells score 0.

    Small grids are held densely and every cell is a parameter.  Grids beyond
    ``DENSE_LIMIT`` cells are only supported read-only, with entries produced
    on demand by ``source(prompt_id, index)`` and cached.
    """

    kind = "tabular"

    def __init__(self, n_prompts: int, dimension: int, values=None, source=None):
        super().__init__(n_prompts, dimension)
        self.n_responses = N_LEVELS ** self.dimension
        self._source = source
        self._cache: dict[tuple[int, int], float] = {}
        if source is not None:
            self.table = None
            return
        if self.n_prompts * self.n_responses > DENSE_LIMIT:
            raise InvalidParameterError("grid too large for a dense table; pass a source")
        shape = (self.n_prompts, self.n_responses)
        self.table = np.zeros(shape) if values is None else np.array(values, dtype=np.float64).reshape(shape)
        if not np.all(np.isfinite(self.table)):
            raise ValidationError("table values must be finite")

    @classmethod
    def from_mapping(cls, mapping: dict, n_prompts: int, dimension: int) -> "TabularReward":
        model = cls(n_prompts, dimension)
        for (p, feats), v in mapping.items():
            idx = int(response_index(np.asarray([feats]))[0])
            model._check_key(np.array([p]), np.asarray([feats]))
            model.table[p, idx] = float(v)
        return model

    @property
    def lazy(self) -> bool:
        return self.table is None

    def _check_key(self, prompt_ids, features):
        self._check_domain(prompt_ids, features)
        if prompt_ids.size and prompt_ids.max() >= self.n_prompts:
            raise DomainError(f"prompt id outside the table (n_prompts={self.n_prompts})")

    def get_params(self) -> np.ndarray:
        if self.lazy:
            raise InvalidParameterError("a lazily materialized table has no parameter vector")
        return self.table.reshape(-1).copy()

    def set_params(self, psi) -> None:
        self.table = self._check_psi(psi).reshape(self.n_prompts, self.n_responses).copy()

    def _lookup(self, prompt_ids, idx) -> np.ndarray:
        if not self.lazy:
            return self.table[prompt_ids, idx]
        out = np.empty(len(idx))
        for i, key in enumerate(zip(prompt_ids.tolist(), idx.tolist())):
            if key not in self._cache:
                self._cache[key] = float(self._source(*key))
            out[i] = self._cache[key]
        return out

    def scores(self, prompt_ids, features) -> np.ndarray:
        p, f = _as_batch(prompt_ids, features)
        self._check_key(p, f)
        return self._lookup(p, response_index(f))

    def backward(self, prompt_ids, features, upstream) -> np.ndarray:
        if self.lazy:
            raise InvalidParameterError("a lazily materialized table has no parameter vector")
        p, f = _as_batch(prompt_ids, features)
        self._check_key(p, f)
        grad = np.zeros_like(self.table)
        np.add.at(grad, (p, response_index(f)), np.asarray(upstream, dtype=np.float64))
        return grad.reshape(-1)


class LinearReward(RewardModel):
    """Additive reward: one weight per (position, value) cell plus a per-prompt offset."""

    kind = "linear"

    def __init__(self, n_prompts: int, dimension: int, weights=None, offsets=None):
        super().__init__(n_prompts, dimension)
        self.weights = np.zeros(N_LEVELS * self.dimension) if weights is None else np.array(weights, float)
        self.offsets = np.zeros(self.n_prompts) if offsets is None else np.array(offsets, float)
        if self.weights.shape != (N_LEVELS * self.dimension,) or self.offsets.shape != (self.n_prompts,):
            raise ValidationError("weights/offsets have the wrong shape")

    def encode(self, prompt_ids, features) -> np.ndarray:
        p, f = _as_batch(prompt_ids, features)
        self._check_domain(p, f)
        if p.size and p.max() >= self.n_prompts:
            raise DomainError(f"prompt id outside [0, {self.n_prompts})")
        onehot_p = np.zeros((len(p), self.n_prompts))
        onehot_p[np.arange(len(p)), p] = 1.0
        return np.hstack([one_hot_features(f), onehot_p])

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.weights, self.offsets])

    def set_params(self, psi) -> None:
        psi = self._check_psi(psi)
        k = len(self.weights)
        self.weights, self.offsets = psi[:k].copy(), psi[k:].copy()

    def scores(self, prompt_ids, features) -> np.ndarray:
        return self.encode(prompt_ids, features) @ self.get_params()

    def backward(self, prompt_ids, features, upstream) -> np.ndarray:
        return self.encode(prompt_ids, features).T @ np.asarray(upstream, dtype=np.float64)


class MlpReward(RewardModel):
    """One hidden tanh layer over the one-hot of (features, prompt_id mod n_hash).

    Parameters flatten as ``[W1 (hidden x inputs), b1, w2, b2]``.
    """

    kind = "mlp"

    def __init__(self, n_prompts: int, dimension: int, hidden: int = 64, n_hash: int | None = None,
                 seed: int = 0, init_scale: float = 0.1):
        super().__init__(n_prompts, dimension)
        if hidden < 1:
            raise InvalidParameterError(f"hidden width must be >= 1, got {hidden}")
        self.hidden = int(hidden)
        self.n_hash = int(n_hash) if n_hash is not None else self.n_prompts
        if self.n_hash < 1:
            raise InvalidParameterError("n_hash must be >= 1")
        self.n_inputs = N_LEVELS * self.dimension + self.n_hash
        rng = substream(seed, "init")
        self.set_params(rng.uniform(-init_scale, init_scale, size=self._size()))

    def _size(self) -> int:
        return self.hidden * self.n_inputs + 2 * self.hidden + 1

    @property
    def n_params(self) -> int:
        return self._size()

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.w1.reshape(-1), self.b1, self.w2, [self.b2]])

    def set_params(self, psi) -> None:
        psi = self._check_psi(psi)
        h, d = self.hidden, self.n_inputs
        self.w1 = psi[: h * d].reshape(h, d).copy()
        self.b1 = psi[h * d: h * d + h].copy()
        self.w2 = psi[h * d + h: h * d + 2 * h].copy()
        self.b2 = float(psi[-1])

    def encode(self, prompt_ids, features) -> np.ndarray:
        p, f = _as_batch(prompt_ids, features)
        self._check_domain(p, f)
        onehot_p = np.zeros((len(p), self.n_hash))
        onehot_p[np.arange(len(p)), p % self.n_hash] = 1.0
        return np.hstack([one_hot_features(f), onehot_p])

    def _forward(self, x):
        h = np.tanh(x @ self.w1.T + self.b1)
        return h, h @ self.w2 + self.b2

    def scores(self, prompt_ids, features) -> np.ndarray:
        return self._forward(self.encode(prompt_ids, features))[1]

    def backward(self, prompt_ids, features, upstream) -> np.ndarray:
        x = self.encode(prompt_ids, features)
        h, _ = self._forward(x)
        g = np.asarray(upstream, dtype=np.float64)
        gh = np.outer(g, self.w2) * (1.0 - h * h)
        return np.concatenate([(gh.T @ x).reshape(-1), gh.sum(axis=0), h.T @ g, [g.sum()]])

    def pair_deltas(self, prompt_ids, features_a, features_b):
        p = np.asarray(prompt_ids, dtype=np.int64).reshape(-1)
        x = np.vstack([self.encode(p, features_a), self.encode(p, features_b)])
        h, s = self._forward(x)
        n = len(p)
        return s[:n] - s[n:], (x, h)

    def pair_backward(self, ctx, upstream) -> np.ndarray:
        x, h = ctx
        g = np.asarray(upstream, dtype=np.float64)
        g = np.concatenate([g, -g])
        gh = np.outer(g, self.w2) * (1.0 - h * h)
        return np.concatenate([(gh.T @ x).reshape(-1), gh.sum(axis=0), h.T @ g, [g.sum()]])

    def checkpoint_meta(self) -> dict:
        return {**super().checkpoint_meta(), "hidden": self.hidden, "n_hash": self.n_hash}


class PolicyLogRatioReward(RewardModel):
    """Implicit reward ``beta * (log pi(y|x) - log pi_ref(y|x))`` over tabular policies.

    The partition term ``beta * log Z(x)`` is dropped: it is constant per
    prompt and vanishes from every strength.  Only the policy table is
    trainable; the reference table is frozen.  Both tables must be normalized
    per prompt when supplied.  Gradient steps leave the policy unnormalized,
    which does not change any strength; :meth:`renormalize` restores it.
    """

    kind = "policy"

    def __init__(self, beta: float, policy_logprob, reference_logprob, norm_tol: float = 1e-9):
        policy = np.array(policy_logprob, dtype=np.float64)
        reference = np.array(reference_logprob, dtype=np.float64)
        if policy.ndim != 2 or policy.shape != reference.shape:
            raise ValidationError("policy and reference tables must share a 2-d shape (prompts, responses)")
        n_resp = policy.shape[1]
        dimension = round(math.log(n_resp, N_LEVELS)) if n_resp > 1 else 0
        if N_LEVELS ** dimension != n_resp:
            raise ValidationError(f"response axis must have 4**dimension entries, got {n_resp}")
        super().__init__(policy.shape[0], dimension)
        if not (beta > 0 and math.isfinite(beta)):
            raise InvalidParameterError(f"beta must be positive, got {beta}")
        for name, table in (("policy", policy), ("reference", reference)):
            if not np.all(np.isfinite(table)):
                raise ValidationError(f"{name} log-probabilities must be finite")
            if np.max(np.abs(logsumexp(table, axis=1))) > norm_tol:
                raise ValidationError(f"{name} log-probabilities are not normalized per prompt")
        self.beta = float(beta)
        self.policy = policy
        self.reference = reference

    @classmethod
    def from_logits(cls, beta: float, policy_logits, reference_logits) -> "PolicyLogRatioReward":
        def norm(t):
            t = np.asarray(t, dtype=np.float64)
            return t - logsumexp(t, axis=1, keepdims=True)
        return cls(beta, norm(policy_logits), norm(reference_logits))

    def renormalize(self) -> None:
        self.policy = self.policy - logsumexp(self.policy, axis=1, keepdims=True)

    def get_params(self) -> np.ndarray:
        return self.policy.reshape(-1).copy()

    def set_params(self, psi) -> None:
        self.policy = self._check_psi(psi).reshape(self.policy.shape).copy()

    def _index(self, prompt_ids, features):
        p, f = _as_batch(prompt_ids, features)
        self._check_domain(p, f)
        if p.size and p.max() >= self.n_prompts:
            raise DomainError(f"prompt id outside [0, {self.n_prompts})")
        return p, response_index(f)

    def scores(self, prompt_ids, features) -> np.ndarray:
        p, idx = self._index(prompt_ids, features)
        return self.beta * (self.policy[p, idx] - self.reference[p, idx])

    def backward(self, prompt_ids, features, upstream) -> np.ndarray:
        p, idx = self._index(prompt_ids, features)
        grad = np.zeros_like(self.policy)
        np.add.at(grad, (p, idx), self.beta * np.asarray(upstream, dtype=np.float64))
        return grad.reshape(-1)

    def checkpoint_meta(self) -> dict:
        return {**super().checkpoint_meta(), "beta": self.beta}


# --- module-level operations ------------------------------------------------

def score(model: RewardModel, prompt_id: int, features) -> float:
    return model.score(prompt_id, features)


def delta(model: RewardModel, record: ComparisonRecord) -> float:
    return model.delta(record)


def score_gradient(model: RewardModel, prompt_id: int, features) -> np.ndarray:
    return model.score_gradient(prompt_id, features)


def random_ground_truth(kind: str, dimension: int, n_prompts: int, seed: int) -> RewardModel:
    """Random ground-truth reward with entries i.i.d. uniform on [-2, 2].

    ``kind="tabular"`` fills the whole (prompt, response) grid when it fits in
    ``DENSE_LIMIT`` cells and otherwise draws each cell on first use from its
    own substream.  ``kind="linear"`` draws the additive weights instead.
    """
    if kind == "tabular":
        n_resp = N_LEVELS ** dimension
        if n_prompts * n_resp <= DENSE_LIMIT:
            values = substream(seed, "truth").uniform(TRUTH_LOW, TRUTH_HIGH, size=(n_prompts, n_resp))
            return TabularReward(n_prompts, dimension, values=values)

        def source(p: int, idx: int) -> float:
            return substream(seed, "truth", p, idx).uniform(TRUTH_LOW, TRUTH_HIGH)

        return TabularReward(n_prompts, dimension, source=source)
    if kind == "linear":
        rng = substream(seed, "truth")
        return LinearReward(n_prompts, dimension,
                            weights=rng.uniform(TRUTH_LOW, TRUTH_HIGH, size=N_LEVELS * dimension),
                            offsets=np.zeros(n_prompts))
    raise ValueError(f"unknown ground-truth kind {kind!r}")


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(model: RewardModel, path: str | os.PathLike) -> None:
    """Flat text: ``#meta kind=.. dim=..`` header, then one parameter per line.

    The policy variant appends its frozen reference table after the
    parameters (``frozen=`` in the header counts those lines).
    """
    psi = model.get_params()
    meta = {"kind": model.kind, "dim": len(psi), **model.checkpoint_meta()}
    extra = []
    if isinstance(model, PolicyLogRatioReward):
        extra = model.reference.reshape(-1).tolist()
        meta["frozen"] = len(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("#meta " + " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}"
                                     for k, v in meta.items()) + "\n")
        for v in list(psi.tolist()) + extra:
            fh.write(repr(float(v)) + "\n")


def load_checkpoint(path: str | os.PathLike) -> RewardModel:
    from .dataset import parse_meta_line

    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise RecordParseError("empty checkpoint", 1)
    meta = parse_meta_line(lines[0], 1)
    try:
        values = np.array([float(v) for v in lines[1:] if v.strip()])
    except ValueError as exc:
        raise RecordParseError(f"bad parameter value: {exc}") from None
    kind = meta.get("kind")
    dim = int(meta.get("dim", -1))
    frozen = int(meta.get("frozen", 0))
    if len(values) != dim + frozen:
        raise ValidationError(f"checkpoint declares {dim + frozen} values but holds {len(values)}")
    n_prompts, dimension = int(meta["n_prompts"]), int(meta["dimension"])
    if kind == "tabular":
        model = TabularReward(n_prompts, dimension)
    elif kind == "linear":
        model = LinearReward(n_prompts, dimension)
    elif kind == "mlp":
        model = MlpReward(n_prompts, dimension, hidden=int(meta["hidden"]), n_hash=int(meta["n_hash"]))
    elif kind == "policy":
        shape = (n_prompts, N_LEVELS ** dimension)
        ref = values[dim:].reshape(shape)
        model = PolicyLogRatioReward(float(meta["beta"]), ref, ref)
    else:
        raise ValidationError(f"unknown checkpoint kind {kind!r}")
    if model.n_params != dim:
        raise ValidationError(f"{kind} model of this shape has {model.n_params} parameters, checkpoint has {dim}")
    model.set_params(values[:dim])
    return model
