"""Desk-scale experiments: the BT-vs-BTT bias gap, bias curves, and evaluation metrics."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import FIRST, SECOND, TIE, PreferenceDataset, break_ties, draw_pairs, generate_synthetic
from .errors import InvalidParameterError, TrainingError, UndefinedMetricError
from .prefcore import (
    TieModelParams,
    as_params,
    bias_bound,
    bias_ratio_at_zero,
    bias_term,
    btt_tie_prob,
    btt_win_prob,
    collapsed_win_prob,
)
from .reward import MlpReward, RewardModel, random_ground_truth
from .rng import substream
from .train import LossKind, TrainConfig, train

BIAS_GAP_COLUMNS = ("theta", "mean_abs_bias_bt", "mean_abs_bias_btt", "gap", "n_eval_pairs", "seed")
CURVE_COLUMNS = ("delta_r_star", "theta", "bias", "bias_ratio")
DEFAULT_CURVE_RANGE = (-0.6, 2.94)


@dataclass
class GenConfig:
    n_prompts: int = 4
    pairs_per_prompt: int = 5000
    dimension: int = 1
    n_eval_pairs: int = 4000
    truth_kind: str = "tabular"
    hidden: int = 64


def default_bias_gap_train_config(seed: int = 0) -> TrainConfig:
    """Training settings used for the bias-gap runs (loss kind is set per model)."""
    return TrainConfig(loss_kind=LossKind.BT, learning_rate=1e-2, batch_size=64, max_epochs=20,
                       convergence=0.0, seed=seed, lr_schedule="linear")


@dataclass
class BiasGapResult:
    theta: float
    mean_abs_bias_bt: float
    mean_abs_bias_btt: float
    gap: float
    n_eval_pairs: int
    seed: int
    reports: dict = field(default_factory=dict, repr=False, compare=False)

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in BIAS_GAP_COLUMNS)


# --- metrics ----------------------------------------------------------------

def eval_accuracy(model: RewardModel, dataset: PreferenceDataset) -> tuple[float, int]:
    """Fraction of decided records whose winner the model scores higher.

    Ties in the data are filtered out; their count is returned alongside the
    accuracy.  A model that scores both responses equally earns half credit.
    """
    decided = dataset.labels != TIE
    n_filtered = int(np.count_nonzero(~decided))
    if not np.any(decided):
        raise UndefinedMetricError("no decided records to score")
    ds = dataset.subset(decided)
    delta = model.deltas(ds)
    oriented = np.where(ds.labels == FIRST, delta, -delta)
    credit = np.where(oriented > 0, 1.0, np.where(oriented == 0, 0.5, 0.0))
    return float(credit.mean()), n_filtered


def eval_mean_abs_bias(model: RewardModel, truth: RewardModel, pairs) -> float:
    """Mean ``|delta_model - delta_truth|`` over ``pairs = (prompt_ids, responses_a, responses_b)``."""
    return float(np.mean(_abs_bias(model, truth, pairs)))


def _abs_bias(model, truth, pairs) -> np.ndarray:
    prompt_ids, a, b = pairs
    if len(prompt_ids) == 0:
        raise UndefinedMetricError("no evaluation pairs")
    dm = model.scores(prompt_ids, a) - model.scores(prompt_ids, b)
    dt = truth.scores(prompt_ids, a) - truth.scores(prompt_ids, b)
    return np.abs(dm - dt)


def draw_eval_pairs(n_pairs: int, n_prompts: int, dimension: int, seed: int):
    rng = substream(seed, "eval")
    prompt_ids = rng.integers(0, n_prompts, size=n_pairs)
    a, b = draw_pairs(rng, n_pairs, dimension)
    return prompt_ids, a, b


# --- bias-gap experiment ---------------------------------------------------

def run_bias_gap_single(theta: float, gen: GenConfig, train_config: TrainConfig,
                        seed: int) -> BiasGapResult:
    params = as_params(theta)
    if not params.has_ties:
        raise InvalidParameterError("the bias-gap experiment needs theta > 1 so that ties occur")
    truth = random_ground_truth(gen.truth_kind, gen.dimension, gen.n_prompts, seed)
    tied = generate_synthetic(gen.n_prompts, gen.pairs_per_prompt, gen.dimension, truth, params, seed)
    untied = break_ties(tied, substream(seed, "ties"))

    fits = {}
    for kind, data in ((LossKind.BTT, tied), (LossKind.BT, untied)):
        model = MlpReward(gen.n_prompts, gen.dimension, hidden=gen.hidden, seed=seed)
        cfg = replace(train_config, loss_kind=kind, theta=params.theta if kind is LossKind.BTT else None,
                      seed=seed)
        try:
            fits[kind] = train(model, data, cfg)
        except TrainingError as exc:
            raise TrainingError(f"theta={params.theta}, loss={kind.value}: {exc}") from exc

    pairs = draw_eval_pairs(gen.n_eval_pairs, gen.n_prompts, gen.dimension, seed)
    err_bt = _abs_bias(fits[LossKind.BT][0], truth, pairs)
    err_btt = _abs_bias(fits[LossKind.BTT][0], truth, pairs)
    return BiasGapResult(
        theta=params.theta,
        mean_abs_bias_bt=float(err_bt.mean()),
        mean_abs_bias_btt=float(err_btt.mean()),
        gap=float(np.mean(err_bt - err_btt)),
        n_eval_pairs=gen.n_eval_pairs,
        seed=seed,
        reports={k.value: fits[k][1] for k in fits},
    )


def run_bias_gap(thetas: Sequence[float], gen: GenConfig | None = None,
                 train_config: TrainConfig | None = None, seed: int = 0) -> list[BiasGapResult]:
    """Fit BTT on tied data and BT on tie-broken data for each theta; compare both to the truth.

    The ground truth, the data seed, and the network initialization are shared
    across thetas, so rows differ only in the tie propensity.
    """
    gen = gen or GenConfig()
    train_config = train_config or default_bias_gap_train_config(seed)
    return [run_bias_gap_single(t, gen, train_config, seed) for t in thetas]


def format_bias_gap_csv(results: Sequence[BiasGapResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BIAS_GAP_COLUMNS)
    for r in results:
        w.writerow([repr(r.theta), repr(r.mean_abs_bias_bt), repr(r.mean_abs_bias_btt), repr(r.gap),
                    r.n_eval_pairs, r.seed])
    return buf.getvalue()


# --- bias curves -------------------------------------------------------------

def emit_bias_curves(thetas: Sequence[float], range_lo: float = DEFAULT_CURVE_RANGE[0],
                     range_hi: float = DEFAULT_CURVE_RANGE[1], n_points: int = 200) -> list[tuple]:
    """Rows ``(delta_r_star, theta, bias, bias_ratio)`` for plotting the bias curves.

    Zero is added to the grid when it falls inside the range; its ratio is the
    analytic limit ``-((theta - 1) / (theta + 1))**2``.
    """
    if not (np.isfinite(range_lo) and np.isfinite(range_hi)) or range_lo >= range_hi:
        raise InvalidParameterError(f"invalid range [{range_lo}, {range_hi}]")
    if n_points < 2:
        raise InvalidParameterError("n_points must be >= 2")
    grid = np.linspace(range_lo, range_hi, n_points)
    if range_lo <= 0.0 <= range_hi and not np.any(grid == 0.0):
        grid = np.sort(np.append(grid, 0.0))
    rows = []
    for theta in thetas:
        params = as_params(theta)
        bias = np.asarray(bias_term(grid, params))
        for x, b in zip(grid.tolist(), bias.tolist()):
            ratio = bias_ratio_at_zero(params) if x == 0.0 else b / x
            rows.append((x, params.theta, b + 0.0, ratio + 0.0))
    return rows


def format_curve_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for row in rows:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


# --- exact-expectation instance ----------------------------------------------

def exact_expectation_dataset(truth_values: Sequence[float], params: TieModelParams | float,
                              outcome: str = "collapsed",
                              layout: str = "shared") -> tuple[PreferenceDataset, np.ndarray]:
    """Records and weights whose weighted loss equals the population loss exactly.

    Responses ``(0,), (1,), ...`` carry the true rewards ``truth_values`` and
    every ordered pair is equally likely.  With ``outcome="collapsed"`` each
    pair contributes a first-wins record weighted by the tie-split win
    probability and a second-wins record weighted by its complement (the
    tie-broken distribution); ``outcome="btt"`` weights first, second and tie
    records by the three BTT probabilities.

    ``layout="shared"`` puts all responses under prompt 0.  A reward model then
    has one score per response, and with three or more responses it usually
    cannot reproduce the tie-split win probability on every pair at once.
    ``layout="per_pair"`` gives each unordered pair its own prompt, so a
    tabular model over ``n_pairs`` prompts can match every pair exactly.
    """
    params = as_params(params)
    r = np.asarray(truth_values, dtype=np.float64)
    k = len(r)
    if not 2 <= k <= 4:
        raise InvalidParameterError("between 2 and 4 responses are supported")
    if layout not in ("shared", "per_pair"):
        raise ValueError(f"unknown layout {layout!r}")
    unordered = [(i, j) for i in range(k) for j in range(i + 1, k)]
    pairs = [(i, j) for i in range(k) for j in range(k) if i != j]
    pair_w = 1.0 / len(pairs)
    pids, a_rows, b_rows, labels, weights = [], [], [], [], []
    for i, j in pairs:
        if outcome == "collapsed":
            q = collapsed_win_prob(r[i], r[j], params)
            outcomes = ((FIRST, q), (SECOND, 1.0 - q))
        elif outcome == "btt":
            outcomes = ((FIRST, btt_win_prob(r[i], r[j], params)),
                        (SECOND, btt_win_prob(r[j], r[i], params)),
                        (TIE, btt_tie_prob(r[i], r[j], params)))
        else:
            raise ValueError(f"unknown outcome model {outcome!r}")
        pid = 0 if layout == "shared" else unordered.index((min(i, j), max(i, j)))
        for label, p in outcomes:
            pids.append(pid)
            a_rows.append((i,))
            b_rows.append((j,))
            labels.append(label)
            weights.append(pair_w * p)
    ds = PreferenceDataset(pids, a_rows, b_rows, labels, dimension=1, theta=params.theta)
    return ds, np.asarray(weights)


def pairwise_strengths(model: RewardModel, dataset: PreferenceDataset) -> dict:
    """Model strength for each distinct (prompt, a, b) triple of ``dataset``."""
    out = {}
    delta = model.deltas(dataset)
    for i, rec in enumerate(dataset):
        out[(rec.prompt_id, rec.response_a, rec.response_b)] = float(delta[i])
    return out


def write_csv(text: str, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)

