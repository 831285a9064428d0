"""Preference data with three-way labels, synthetic generation, tie breaking, and I/O.

A :class:`PreferenceDataset` is stored column-wise (numpy arrays) so losses can
be evaluated in one vectorized pass; iterating over it yields
:class:`ComparisonRecord` objects.

File format: a header line ``#meta seed=.. theta=.. dimension=.. n_records=.. n_ties=..``
followed by one JSON object per record with keys ``prompt_id``,
``response_a``, ``response_b`` and ``label`` (``first`` / ``second`` / ``tie``).
"""

from __future__ import annotations

import enum
import io
import json
import os
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .errors import GenerationError, RecordParseError, ValidationError
from .prefcore import TieModelParams, as_params, btt_tie_prob, btt_win_prob
from .rng import substream

N_LEVELS = 4  # each feature takes a value in {0, 1, 2, 3}


class PreferenceLabel(enum.Enum):
    FIRST = "first"
    SECOND = "second"
    TIE = "tie"

    @property
    def code(self) -> int:
        return _LABEL_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "PreferenceLabel":
        return _CODE_LABELS[int(code)]


FIRST, SECOND, TIE = 0, 1, 2
_LABEL_CODES = {PreferenceLabel.FIRST: FIRST, PreferenceLabel.SECOND: SECOND, PreferenceLabel.TIE: TIE}
_CODE_LABELS = {v: k for k, v in _LABEL_CODES.items()}


def _check_features(features: Sequence[int]) -> tuple[int, ...]:
    feats = tuple(int(f) for f in features)
    if not feats:
        raise ValidationError("response must have at least one feature")
    if any(f < 0 or f >= N_LEVELS for f in feats):
        raise ValidationError(f"features must lie in 0..{N_LEVELS - 1}, got {feats}")
    return feats


@dataclass(frozen=True)
class ComparisonRecord:
    prompt_id: int
    response_a: tuple[int, ...]
    response_b: tuple[int, ...]
    label: PreferenceLabel

    def __post_init__(self):
        if self.prompt_id < 0:
            raise ValidationError(f"prompt_id must be non-negative, got {self.prompt_id}")
        a = _check_features(self.response_a)
        b = _check_features(self.response_b)
        if len(a) != len(b):
            raise ValidationError("responses of one record must have equal length")
        if a == b:
            raise ValidationError(f"record compares a response with itself: {a}")
        object.__setattr__(self, "response_a", a)
        object.__setattr__(self, "response_b", b)
        object.__setattr__(self, "label", PreferenceLabel(self.label))

    def swapped(self) -> "ComparisonRecord":
        label = {PreferenceLabel.FIRST: PreferenceLabel.SECOND,
                 PreferenceLabel.SECOND: PreferenceLabel.FIRST}.get(self.label, self.label)
        return ComparisonRecord(self.prompt_id, self.response_b, self.response_a, label)


@dataclass(eq=False)
class PreferenceDataset:
    prompt_ids: np.ndarray
    response_a: np.ndarray
    response_b: np.ndarray
    labels: np.ndarray
    dimension: int
    seed: int | None = None
    theta: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prompt_ids = np.asarray(self.prompt_ids, dtype=np.int64).reshape(-1)
        n = len(self.prompt_ids)
        self.response_a = np.asarray(self.response_a, dtype=np.int8).reshape(n, self.dimension)
        self.response_b = np.asarray(self.response_b, dtype=np.int8).reshape(n, self.dimension)
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        self.validate()

    def validate(self) -> None:
        n = len(self.prompt_ids)
        if self.dimension < 1:
            raise ValidationError(f"dimension must be >= 1, got {self.dimension}")
        if len(self.labels) != n:
            raise ValidationError("labels and prompts differ in length")
        if n == 0:
            return
        if self.prompt_ids.min() < 0:
            raise ValidationError("prompt ids must be non-negative")
        for arr in (self.response_a, self.response_b):
            if arr.min() < 0 or arr.max() >= N_LEVELS:
                raise ValidationError(f"features must lie in 0..{N_LEVELS - 1}")
        if np.any(np.all(self.response_a == self.response_b, axis=1)):
            raise ValidationError("a record compares a response with itself")
        if self.labels.min() < FIRST or self.labels.max() > TIE:
            raise ValidationError("unknown label code")

    @classmethod
    def from_records(cls, records: Iterable[ComparisonRecord], dimension: int | None = None,
                     seed: int | None = None, theta: float | None = None) -> "PreferenceDataset":
        records = list(records)
        if dimension is None:
            if not records:
                raise ValidationError("dimension is required for an empty dataset")
            dimension = len(records[0].response_a)
        for i, r in enumerate(records):
            if len(r.response_a) != dimension:
                raise ValidationError(f"record {i} has dimension {len(r.response_a)}, expected {dimension}")
        return cls(
            prompt_ids=[r.prompt_id for r in records],
            response_a=np.array([r.response_a for r in records], dtype=np.int8).reshape(-1, dimension),
            response_b=np.array([r.response_b for r in records], dtype=np.int8).reshape(-1, dimension),
            labels=[r.label.code for r in records],
            dimension=dimension,
            seed=seed,
            theta=theta,
        )

    @classmethod
    def empty(cls, dimension: int, **meta) -> "PreferenceDataset":
        return cls(np.zeros(0), np.zeros((0, dimension)), np.zeros((0, dimension)), np.zeros(0),
                   dimension=dimension, **meta)

    def __len__(self) -> int:
        return len(self.prompt_ids)

    def __iter__(self) -> Iterator[ComparisonRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def record(self, i: int) -> ComparisonRecord:
        return ComparisonRecord(
            int(self.prompt_ids[i]),
            tuple(int(v) for v in self.response_a[i]),
            tuple(int(v) for v in self.response_b[i]),
            PreferenceLabel.from_code(self.labels[i]),
        )

    @property
    def records(self) -> list[ComparisonRecord]:
        return list(self)

    @property
    def n_ties(self) -> int:
        return int(np.count_nonzero(self.labels == TIE))

    @property
    def n_decided(self) -> int:
        return len(self) - self.n_ties

    @property
    def has_ties(self) -> bool:
        return self.n_ties > 0

    def subset(self, index) -> "PreferenceDataset":
        return PreferenceDataset(
            self.prompt_ids[index], self.response_a[index], self.response_b[index], self.labels[index],
            dimension=self.dimension, seed=self.seed, theta=self.theta,
        )

    def decided(self) -> "PreferenceDataset":
        """Records with a winner (the BT part of a tied dataset)."""
        return self.subset(self.labels != TIE)

    def tied(self) -> "PreferenceDataset":
        return self.subset(self.labels == TIE)

    def metadata(self) -> dict:
        return {
            "seed": self.seed,
            "theta": self.theta,
            "dimension": self.dimension,
            "n_records": len(self),
            "n_ties": self.n_ties,
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, PreferenceDataset):
            return NotImplemented
        return (
            self.dimension == other.dimension
            and self.seed == other.seed
            and self.theta == other.theta
            and np.array_equal(self.prompt_ids, other.prompt_ids)
            and np.array_equal(self.response_a, other.response_a)
            and np.array_equal(self.response_b, other.response_b)
            and np.array_equal(self.labels, other.labels)
        )


def concat(datasets: Sequence[PreferenceDataset]) -> PreferenceDataset:
    """Join datasets in order; metadata is taken from the first one."""
    if not datasets:
        raise ValueError("nothing to concatenate")
    first = datasets[0]
    if any(d.dimension != first.dimension for d in datasets):
        raise ValidationError("cannot concatenate datasets of different dimension")
    return PreferenceDataset(
        np.concatenate([d.prompt_ids for d in datasets]),
        np.concatenate([d.response_a for d in datasets]),
        np.concatenate([d.response_b for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        dimension=first.dimension, seed=first.seed, theta=first.theta,
    )


# --- labeling -------------------------------------------------------------

def labels_from_uniform(r_a, r_b, params: TieModelParams | float, u) -> np.ndarray:
    """Map uniforms ``u`` to label codes with thresholds in the order win, lose, tie."""
    params = as_params(params)
    p_win = np.asarray(btt_win_prob(r_a, r_b, params))
    p_lose = np.asarray(btt_win_prob(r_b, r_a, params))
    u = np.asarray(u)
    out = np.full(np.shape(u), TIE, dtype=np.int8)
    out[u < p_win + p_lose] = SECOND
    out[u < p_win] = FIRST
    if not params.has_ties:
        # p_win + p_lose can round just below 1
        out[out == TIE] = SECOND
    return out


def sample_label(r_a: float, r_b: float, params: TieModelParams | float,
                 rng: np.random.Generator) -> PreferenceLabel:
    params = as_params(params)
    return PreferenceLabel.from_code(labels_from_uniform(r_a, r_b, params, rng.random()))


def break_ties(dataset: PreferenceDataset, rng: np.random.Generator) -> PreferenceDataset:
    """Resolve every tie by a fair coin, in record order; decided records are untouched."""
    labels = dataset.labels.copy()
    tie_idx = np.flatnonzero(labels == TIE)
    if len(tie_idx):
        coin = rng.random(len(tie_idx)) < 0.5
        labels[tie_idx] = np.where(coin, FIRST, SECOND)
    return PreferenceDataset(
        dataset.prompt_ids.copy(), dataset.response_a.copy(), dataset.response_b.copy(), labels,
        dimension=dataset.dimension, seed=dataset.seed, theta=dataset.theta,
    )


def relabel_by_reward(dataset: PreferenceDataset, reward) -> PreferenceDataset:
    """Give every record the more probable decided label under ``reward`` (no noise)."""
    delta = reward.scores(dataset.prompt_ids, dataset.response_a) - reward.scores(
        dataset.prompt_ids, dataset.response_b)
    labels = np.where(delta >= 0, FIRST, SECOND)
    return PreferenceDataset(
        dataset.prompt_ids.copy(), dataset.response_a.copy(), dataset.response_b.copy(), labels,
        dimension=dataset.dimension, seed=dataset.seed, theta=dataset.theta,
    )


# --- generation -----------------------------------------------------------

def draw_pairs(rng: np.random.Generator, k: int, dimension: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``k`` pairs of distinct responses uniformly from {0..3}^dimension."""
    if dimension < 1:
        raise GenerationError(f"dimension {dimension} leaves no distinct pairs to draw")
    a = rng.integers(0, N_LEVELS, size=(k, dimension), dtype=np.int8)
    b = rng.integers(0, N_LEVELS, size=(k, dimension), dtype=np.int8)
    same = np.flatnonzero(np.all(a == b, axis=1))
    while len(same):
        b[same] = rng.integers(0, N_LEVELS, size=(len(same), dimension), dtype=np.int8)
        same = same[np.all(a[same] == b[same], axis=1)]
    return a, b


def generate_synthetic(n_prompts: int, pairs_per_prompt: int, dimension: int, reward,
                       params: TieModelParams | float, seed: int,
                       prompts: Iterable[int] | None = None) -> PreferenceDataset:
    """Sample a BTT-labeled dataset from a ground-truth ``reward``.

    Each prompt draws its pairs and labels from its own substreams, so
    generating a subset of ``prompts`` and concatenating in prompt order gives
    the same records as one full run.
    """
    params = as_params(params)
    if n_prompts < 1 or pairs_per_prompt < 1:
        raise GenerationError("n_prompts and pairs_per_prompt must be >= 1")
    if dimension < 1:
        raise GenerationError(f"dimension {dimension} leaves no distinct pairs to draw")
    prompt_list = list(range(n_prompts)) if prompts is None else sorted(prompts)
    if any(p < 0 or p >= n_prompts for p in prompt_list):
        raise GenerationError("prompt ids must lie in [0, n_prompts)")

    shards = []
    for p in prompt_list:
        a, b = draw_pairs(substream(seed, "pairs", p), pairs_per_prompt, dimension)
        pid = np.full(pairs_per_prompt, p, dtype=np.int64)
        u = substream(seed, "labels", p).random(pairs_per_prompt)
        labels = labels_from_uniform(reward.scores(pid, a), reward.scores(pid, b), params, u)
        shards.append(PreferenceDataset(pid, a, b, labels, dimension=dimension, seed=seed,
                                        theta=params.theta))
    if not shards:
        return PreferenceDataset.empty(dimension, seed=seed, theta=params.theta)
    return concat(shards)


# --- serialization --------------------------------------------------------

def _fmt_meta(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _header(dataset: PreferenceDataset) -> str:
    return "#meta " + " ".join(f"{k}={_fmt_meta(v)}" for k, v in dataset.metadata().items())


def parse_meta_line(line: str, line_number: int = 1) -> dict[str, str]:
    if not line.startswith("#meta"):
        raise RecordParseError("missing '#meta' header", line_number)
    meta = {}
    for token in line[len("#meta"):].split():
        key, sep, value = token.partition("=")
        if not sep or not key:
            raise RecordParseError(f"malformed header token {token!r}", line_number)
        meta[key] = value
    return meta


def write_records(dataset: PreferenceDataset, destination: str | os.PathLike | IO[str]) -> None:
    if isinstance(destination, (str, os.PathLike)):
        with open(destination, "w", encoding="utf-8", newline="\n") as fh:
            write_records(dataset, fh)
        return
    destination.write(_header(dataset) + "\n")
    labels = [PreferenceLabel.from_code(c).value for c in range(3)]
    a_rows = dataset.response_a.tolist()
    b_rows = dataset.response_b.tolist()
    for pid, a, b, lab in zip(dataset.prompt_ids.tolist(), a_rows, b_rows, dataset.labels.tolist()):
        obj = {"prompt_id": pid, "response_a": a, "response_b": b, "label": labels[lab]}
        destination.write(json.dumps(obj, separators=(",", ":")) + "\n")


def _opt_int(v: str):
    return None if v == "none" else int(v)


def _opt_float(v: str):
    return None if v == "none" else float(v)


def read_records(source: str | os.PathLike | IO[str]) -> PreferenceDataset:
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return read_records(fh)
    lines = source.read().splitlines()
    if not lines:
        raise RecordParseError("empty file", 1)
    meta = parse_meta_line(lines[0], 1)
    try:
        dimension = int(meta["dimension"])
        seed = _opt_int(meta.get("seed", "none"))
        theta = _opt_float(meta.get("theta", "none"))
    except (KeyError, ValueError) as exc:
        raise RecordParseError(f"bad header field: {exc}", 1) from None

    pids, rows_a, rows_b, labels = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordParseError(f"malformed record: {exc.msg}", lineno) from None
        if not isinstance(obj, dict) or set(obj) != {"prompt_id", "response_a", "response_b", "label"}:
            raise RecordParseError("record must have exactly keys prompt_id, response_a, response_b, label",
                                   lineno)
        try:
            label = PreferenceLabel(obj["label"])
        except ValueError:
            raise RecordParseError(f"unknown label {obj['label']!r}", lineno) from None
        a, b = obj["response_a"], obj["response_b"]
        if not (isinstance(a, list) and isinstance(b, list)):
            raise RecordParseError("responses must be lists of integers", lineno)
        if len(a) != dimension or len(b) != dimension:
            raise ValidationError(f"line {lineno}: response length differs from dimension {dimension}")
        try:
            rec = ComparisonRecord(int(obj["prompt_id"]), a, b, label)
        except (TypeError, ValueError) as exc:
            raise RecordParseError(str(exc), lineno) from None
        pids.append(rec.prompt_id)
        rows_a.append(rec.response_a)
        rows_b.append(rec.response_b)
        labels.append(label.code)

    ds = PreferenceDataset(pids, np.array(rows_a, dtype=np.int8).reshape(-1, dimension),
                           np.array(rows_b, dtype=np.int8).reshape(-1, dimension), labels,
                           dimension=dimension, seed=seed, theta=theta)
    for key, actual in (("n_records", len(ds)), ("n_ties", ds.n_ties)):
        if key in meta and int(meta[key]) != actual:
            raise ValidationError(f"header {key}={meta[key]} but file holds {actual}")
    return ds


def dumps(dataset: PreferenceDataset) -> str:
    buf = io.StringIO()
    write_records(dataset, buf)
    return buf.getvalue()
