"""Evaluation metric, position-weighted log loss, and the naive baseline.

Average accuracy of a prediction sequence of length T is
``AA = sum_i A(i) * L(i) / T`` where A(i) is the cumulative accuracy over
the first i predictions and L(i) indicates a correct i-th prediction.
A single wrong prediction at position i therefore costs
``(1 + sum_{j>i} 1/j) / T``, which is the closed form behind the
per-position loss weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

PROB_EPS = 1e-12  # clamp before log; float64 sigmoid can saturate to exact 1.0


@dataclass
class EvalReport:
    maa: float
    first_prediction_accuracy: float
    per_position_accuracy: np.ndarray  # index 0 = first predicted position
    n_sessions: int

    def serialize(self):
        positions = ",".join(f"{v:.6f}" for v in self.per_position_accuracy)
        return (f"maa={self.maa:.6f}\n"
                f"first_prediction_accuracy={self.first_prediction_accuracy:.6f}\n"
                f"per_position_accuracy={positions}\n"
                f"n_sessions={self.n_sessions}\n")

    @classmethod
    def parse(cls, text):
        fields = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            fields[key] = value
        return cls(
            maa=float(fields["maa"]),
            first_prediction_accuracy=float(fields["first_prediction_accuracy"]),
            per_position_accuracy=np.array(
                [float(v) for v in fields["per_position_accuracy"].split(",") if v]),
            n_sessions=int(fields["n_sessions"]),
        )


@dataclass
class PositionWeights:
    t: int
    w: np.ndarray  # normalized to sum 1, strictly decreasing


def average_accuracy(truth, pred):
    """AA for one session; exact formula, in [0, 1].

    The division by T happens once on the accumulated sum, so an
    all-correct sequence scores exactly 1.0 in float arithmetic.
    """
    n = len(truth)
    if n == 0 or n != len(pred):
        raise ContractError(f"need equal nonzero lengths, got {n} and {len(pred)}")
    total = 0.0
    correct = 0
    for i in range(n):
        if bool(truth[i]) == bool(pred[i]):
            correct += 1
            total += correct / (i + 1)
    return total / n


def mean_average_accuracy(pairs):
    """EvalReport over (truth, pred) pairs; MAA is the unweighted session mean.

    per_position_accuracy[i] is computed over the sessions long enough to
    have prediction position i+1.
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError("mean_average_accuracy needs at least one session")
    max_t = max(len(truth) for truth, _ in pairs)
    hits = np.zeros(max_t)
    counts = np.zeros(max_t)
    aa_sum = 0.0
    for truth, pred in pairs:
        aa_sum += average_accuracy(truth, pred)
        for i in range(len(truth)):
            counts[i] += 1
            if bool(truth[i]) == bool(pred[i]):
                hits[i] += 1
    per_position = hits / counts
    return EvalReport(
        maa=aa_sum / len(pairs),
        first_prediction_accuracy=per_position[0],
        per_position_accuracy=per_position,
        n_sessions=len(pairs),
    )


def position_weights(t):
    """Per-position weights proportional to the AA drop of a lone error there.

    Raw drop at position i (1-based): (1 + sum_{j=i+1}^{T} 1/j) / T.
    Returned weights are normalized to sum to 1.
    """
    if t < 1:
        raise ContractError(f"sequence length must be >= 1, got {t}")
    tail = 0.0
    drops = np.empty(t)
    for i in range(t, 0, -1):
        drops[i - 1] = (1.0 + tail) / t
        tail += 1.0 / i
    return PositionWeights(t=t, w=drops / drops.sum())


def raw_position_drops(t):
    """Unnormalized AA drops, useful for checking against the metric itself."""
    if t < 1:
        raise ContractError(f"sequence length must be >= 1, got {t}")
    tail = 0.0
    drops = np.empty(t)
    for i in range(t, 0, -1):
        drops[i - 1] = (1.0 + tail) / t
        tail += 1.0 / i
    return drops


def weighted_log_loss(probs, truth, weights, mask):
    """Masked, per-position-weighted binary cross entropy, averaged over sessions.

    probs: time-major list of rank-1 prob tensors (or ndarray [T, batch]),
    truth/weights/mask: float arrays [T, batch].  Probabilities are clamped
    to [PROB_EPS, 1 - PROB_EPS] before the log.  Differentiable when probs
    carry gradients.
    """
    steps = [p if isinstance(p, Tensor) else Tensor(p) for p in probs]
    truth = np.asarray(truth, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if truth.shape != weights.shape or truth.shape != mask.shape \
            or len(steps) != truth.shape[0]:
        raise ContractError("probs, truth, weights and mask must agree on [T, batch]")
    if not steps:
        raise ContractError("weighted_log_loss needs at least one step")
    batch = steps[0].shape[0]
    total = None
    for t, p in enumerate(steps):
        if p.shape != (batch,):
            raise ContractError(f"step {t} has shape {tuple(p.shape)}, expected ({batch},)")
        y = truth[t]
        w = Tensor(weights[t] * mask[t])
        p_c = T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
        one_minus = T.clamp(T.sub(Tensor(np.ones(batch)), p), PROB_EPS, 1.0 - PROB_EPS)
        nll = T.sub(Tensor(np.zeros(batch)),
                    T.add(T.mul(Tensor(y), T.log(p_c)),
                          T.mul(Tensor(1.0 - y), T.log(one_minus))))
        term = T.total_sum(T.mul(nll, w))
        total = term if total is None else T.add(total, term)
    return T.mul_scalar(total, 1.0 / batch)


def loss_weight_matrix(second_lengths, max_t):
    """[T, batch] matrix of normalized position weights, zero on padding."""
    out = np.zeros((max_t, len(second_lengths)))
    for b, length in enumerate(second_lengths):
        out[:length, b] = position_weights(int(length)).w
    return out


def baseline_predict(session):
    """Propagate the last observed skip flag across the whole second half."""
    if not session.first_tracks:
        raise ContractError("baseline needs a nonempty first half")
    t = len(session.second_tracks)
    return np.full(t, bool(session.last_first_half_skip2))
