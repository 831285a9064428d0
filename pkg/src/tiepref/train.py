"""Negative log-likelihoods (BT, BTT, bias-corrected BT), their gradients, RMSprop, and training.

Losses are means over records (optionally weighted).  All three reduce to a
per-record function of the strength ``delta = r(x, a) - r(x, b)`` and the
label, so each model only has to backpropagate ``d loss / d delta``.

Bias correction comes in two directions:

``forward`` (default)
    The model strength stands for the tie-free strength; the BT likelihood is
    evaluated at ``forward_bias_map(delta)``, the strength BT data actually
    carry.  Its optimum is the unbiased strength.
``inverse``
    Solve ``forward_bias_map(s) == delta`` by bisection and evaluate the BT
    likelihood at ``s``.  Its optimum is ``forward_bias_map`` applied twice,
    i.e. it attenuates further.

The offset ``g(delta) - delta`` is held constant in the gradient unless
``detach_offset`` is False.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import FIRST, TIE, PreferenceDataset
from .errors import InvalidDatasetError, InvalidParameterError, TrainingError, ValidationError
from .prefcore import (
    TieModelParams,
    as_params,
    forward_bias_map,
    forward_bias_map_derivative,
    invert_bias_map,
    sigmoid,
)
from .reward import RewardModel
from .rng import substream


class LossKind(str, enum.Enum):
    BT = "bt"
    BTT = "btt"
    CORRECTED = "corrected"


CORRECTIONS = ("forward", "inverse")
INVERT_SOLVE_TOL = 1e-15
LR_SCHEDULES = ("constant", "linear")


@dataclass
class TrainConfig:
    loss_kind: LossKind = LossKind.BT
    theta: float | None = None
    learning_rate: float = 1e-3
    batch_size: int = 64
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    max_epochs: int = 100
    convergence: float = 1e-6
    seed: int = 0
    detach_offset: bool = True
    correction: str = "forward"
    lr_schedule: str = "constant"

    def __post_init__(self):
        self.loss_kind = LossKind(self.loss_kind)
        if self.loss_kind is not LossKind.BT and self.theta is None:
            raise InvalidParameterError(f"loss {self.loss_kind.value} needs theta")
        if self.theta is not None:
            self.theta = as_params(self.theta).theta
        if not self.learning_rate >= 0:
            raise InvalidParameterError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidParameterError("batch_size and max_epochs must be >= 1")
        if not 0 < self.rmsprop_decay < 1:
            raise InvalidParameterError("rmsprop_decay must lie in (0, 1)")
        if not self.rmsprop_epsilon > 0:
            raise InvalidParameterError("rmsprop_epsilon must be positive")
        if self.convergence < 0:
            raise InvalidParameterError("convergence threshold must be non-negative")
        if self.correction not in CORRECTIONS:
            raise InvalidParameterError(f"correction must be one of {CORRECTIONS}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise InvalidParameterError(f"lr_schedule must be one of {LR_SCHEDULES}")

    def epoch_learning_rate(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; ``linear`` decays to 0 over ``max_epochs``."""
        if self.lr_schedule == "linear":
            return self.learning_rate * (1.0 - (epoch - 1) / self.max_epochs)
        return self.learning_rate

    @property
    def params(self) -> TieModelParams:
        return TieModelParams(1.0 if self.theta is None else self.theta)


# --- per-record terms -------------------------------------------------------

def _orient(labels: np.ndarray) -> np.ndarray:
    return np.where(labels == FIRST, 1.0, -1.0)


def bt_terms(delta: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``-log sigmoid(winner - loser)`` and its derivative in ``delta``."""
    s = _orient(labels)
    return np.logaddexp(0.0, -s * delta), -s * sigmoid(-s * delta)


def btt_terms(delta: np.ndarray, labels: np.ndarray, theta: float) -> tuple[np.ndarray, np.ndarray]:
    log_t = math.log(theta)
    tie = labels == TIE
    s = _orient(labels)
    loss = np.logaddexp(0.0, log_t - s * delta)
    grad = -s * sigmoid(log_t - s * delta)
    if np.any(tie):
        d = delta[tie]
        loss[tie] = (-math.log(theta * theta - 1.0) - d
                     + np.logaddexp(d, log_t) + np.logaddexp(d + log_t, 0.0))
        grad[tie] = -1.0 + sigmoid(d - log_t) + sigmoid(d + log_t)
    return loss, grad


def corrected_terms(delta: np.ndarray, labels: np.ndarray, params: TieModelParams,
                    correction: str = "forward", detach_offset: bool = True):
    if correction == "forward":
        shifted = np.asarray(forward_bias_map(delta, params))
    else:
        # solve near machine precision so the loss is smooth in delta
        shifted = np.asarray(invert_bias_map(delta, params, tol=INVERT_SOLVE_TOL))
    loss, grad = bt_terms(shifted, labels)
    if not detach_offset and params.has_ties:
        if correction == "forward":
            grad = grad * np.asarray(forward_bias_map_derivative(delta, params))
        else:
            grad = grad / np.asarray(forward_bias_map_derivative(shifted, params))
    return loss, grad


def check_compatible(kind: LossKind, labels: np.ndarray, params: TieModelParams) -> None:
    has_ties = bool(np.any(labels == TIE))
    if kind is not LossKind.BTT and has_ties:
        raise InvalidDatasetError(f"loss '{kind.value}' cannot use tied records; break ties or use 'btt'")
    if kind is LossKind.BTT and has_ties and not params.has_ties:
        raise InvalidDatasetError("theta = 1 gives tied records zero probability (infinite loss)")


def record_terms(kind: LossKind | str, delta, labels, params: TieModelParams | float | None = None,
                 correction: str = "forward", detach_offset: bool = True):
    kind = LossKind(kind)
    params = as_params(1.0 if params is None else params)
    delta = np.asarray(delta, dtype=np.float64)
    labels = np.asarray(labels)
    check_compatible(kind, labels, params)
    if kind is LossKind.BT:
        return bt_terms(delta, labels)
    if kind is LossKind.BTT:
        return btt_terms(delta, labels, params.theta)
    return corrected_terms(delta, labels, params, correction, detach_offset)


def _normalized_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValidationError("weights must be non-negative, one per record, with positive sum")
    return w / w.sum()


def loss_and_gradient(kind: LossKind | str, model: RewardModel, params, batch: PreferenceDataset,
                      weights=None, correction: str = "forward", detach_offset: bool = True,
                      need_grad: bool = True):
    """Weighted-mean loss over ``batch`` and its gradient in the model parameters."""
    if len(batch) == 0:
        raise InvalidDatasetError("empty dataset")
    w = _normalized_weights(weights, len(batch))
    delta, ctx = model.pair_deltas(batch.prompt_ids, batch.response_a, batch.response_b)
    terms, dterms = record_terms(kind, delta, batch.labels, params, correction, detach_offset)
    # centered on the first term: exact when all terms agree (e.g. log 2 at the zero model)
    loss = float(terms[0] + np.dot(w, terms - terms[0]))
    if not need_grad:
        return loss, None
    return loss, model.pair_backward(ctx, w * dterms)


def nll_bt(model: RewardModel, dataset: PreferenceDataset, weights=None) -> float:
    return loss_and_gradient(LossKind.BT, model, None, dataset, weights, need_grad=False)[0]


def nll_btt(model: RewardModel, params: TieModelParams | float, dataset: PreferenceDataset,
            weights=None) -> float:
    return loss_and_gradient(LossKind.BTT, model, params, dataset, weights, need_grad=False)[0]


def nll_bias_corrected(model: RewardModel, params: TieModelParams | float, dataset: PreferenceDataset,
                       weights=None, correction: str = "forward") -> float:
    return loss_and_gradient(LossKind.CORRECTED, model, params, dataset, weights,
                             correction=correction, need_grad=False)[0]


def loss_gradient(loss_kind: LossKind | str, model: RewardModel, params, batch: PreferenceDataset,
                  weights=None, correction: str = "forward", detach_offset: bool = True) -> np.ndarray:
    return loss_and_gradient(loss_kind, model, params, batch, weights, correction, detach_offset)[1]


# --- optimizer --------------------------------------------------------------

def rmsprop_step(psi: np.ndarray, grad: np.ndarray, state: np.ndarray | None,
                 config: TrainConfig, learning_rate: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One RMSprop update; ``state`` is the running mean of squared gradients."""
    psi = np.asarray(psi, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if state is None:
        state = np.zeros_like(psi)
    if psi.shape != grad.shape or psi.shape != np.shape(state):
        raise ValueError(f"shape mismatch: psi {psi.shape}, grad {grad.shape}, state {np.shape(state)}")
    decay = config.rmsprop_decay
    v = decay * state + (1.0 - decay) * grad * grad
    lr = config.learning_rate if learning_rate is None else learning_rate
    return psi - lr * grad / (np.sqrt(v) + config.rmsprop_epsilon), v


# --- training loop ----------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    loss: float
    grad_norm: float
    wall_ms: float


@dataclass
class TrainingReport:
    loss_kind: str
    epochs: list[EpochStats] = field(default_factory=list)
    initial_loss: float = float("nan")
    stop_reason: str = ""
    n_steps: int = 0

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].loss if self.epochs else self.initial_loss

    def to_csv(self) -> str:
        """Machine-readable trajectory.  Wall time is left out so reruns compare byte-for-byte."""
        lines = [f"# loss_kind={self.loss_kind} stop_reason={self.stop_reason} steps={self.n_steps}",
                 "epoch,loss,grad_norm",
                 f"0,{self.initial_loss!r},nan"]
        lines += [f"{e.epoch},{e.loss!r},{e.grad_norm!r}" for e in self.epochs]
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        rows = [f"{'epoch':>6} {'loss':>14} {'grad-norm':>12} {'wall-ms':>10}"]
        rows += [f"{e.epoch:>6d} {e.loss:>14.8f} {e.grad_norm:>12.4e} {e.wall_ms:>10.1f}" for e in self.epochs]
        rows.append(f"stop: {self.stop_reason} after {self.n_steps} steps")
        return "\n".join(rows)


def train(model: RewardModel, dataset: PreferenceDataset, config: TrainConfig,
          weights=None) -> tuple[RewardModel, TrainingReport]:
    """Minibatch RMSprop on the configured loss; updates ``model`` in place.

    Each epoch visits the records in an order drawn from the ``shuffle``
    substream of ``config.seed``; the last batch may be short.  After each
    epoch the full-data loss is recorded, and training stops once its relative
    change falls below ``config.convergence``.
    """
    params = config.params
    kind = config.loss_kind
    check_compatible(kind, dataset.labels, params)
    if len(dataset) == 0:
        raise InvalidDatasetError("empty dataset")
    w_all = None if weights is None else np.asarray(weights, dtype=np.float64)

    def full(need_grad=True):
        return loss_and_gradient(kind, model, params, dataset, w_all, config.correction,
                                 config.detach_offset, need_grad)

    report = TrainingReport(kind.value, initial_loss=full(need_grad=False)[0])
    psi = model.get_params()
    state = None
    prev = report.initial_loss
    n = len(dataset)
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = substream(config.seed, "shuffle", epoch).permutation(n)
        lr = config.epoch_learning_rate(epoch)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = _take(dataset, idx)
            bw = None if w_all is None else w_all[idx]
            _, grad = loss_and_gradient(kind, model, params, batch, bw, config.correction,
                                        config.detach_offset)
            psi, state = rmsprop_step(psi, grad, state, config, lr)
            if not np.all(np.isfinite(psi)):
                raise TrainingError("parameters became non-finite", epoch)
            model.set_params(psi)
            report.n_steps += 1
        loss, grad = full()
        if not math.isfinite(loss):
            raise TrainingError("loss is NaN or infinite", epoch)
        report.epochs.append(EpochStats(epoch, loss, float(np.linalg.norm(grad)),
                                        1e3 * (time.perf_counter() - t0)))
        if abs(prev - loss) <= config.convergence * max(abs(prev), 1e-300):
            report.stop_reason = "converged"
            return model, report
        prev = loss
    report.stop_reason = "max_epochs"
    return model, report


def _take(dataset: PreferenceDataset, idx: np.ndarray) -> PreferenceDataset:
    # skips re-validation; rows come from an already validated dataset
    batch = object.__new__(PreferenceDataset)
    batch.prompt_ids = dataset.prompt_ids[idx]
    batch.response_a = dataset.response_a[idx]
    batch.response_b = dataset.response_b[idx]
    batch.labels = dataset.labels[idx]
    batch.dimension = dataset.dimension
    batch.seed, batch.theta, batch.extra = dataset.seed, dataset.theta, {}
    return batch


def minimize_full_batch(model: RewardModel, dataset: PreferenceDataset, loss_kind: LossKind | str,
                        params=None, weights=None, learning_rate: float = 1.0, grad_tol: float = 1e-12,
                        max_iter: int = 200_000, correction: str = "forward",
                        detach_offset: bool = True) -> tuple[RewardModel, int]:
    """Plain full-batch gradient descent until the gradient's max-norm is below ``grad_tol``.

    Used on small exact-expectation instances where the stationary point is
    known in closed form.  With a detached offset the iteration targets the
    stationary point of the per-step loss, which is what minibatch training
    converges to as well.
    """
    psi = model.get_params()
    for it in range(1, max_iter + 1):
        _, grad = loss_and_gradient(loss_kind, model, params, dataset, weights, correction, detach_offset)
        if np.max(np.abs(grad)) < grad_tol:
            return model, it
        psi = psi - learning_rate * grad
        model.set_params(psi)
    raise TrainingError(f"gradient norm still {np.max(np.abs(grad)):.3e} after {max_iter} iterations")
