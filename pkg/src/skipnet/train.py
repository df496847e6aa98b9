"""Training loop: Adam with gradient clipping, plateau-based early stopping,
evaluation hooks, and bit-exact checkpoint/resume."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics as M
from . import model as mdl
from .checkpoint import load_checkpoint, save_checkpoint  # re-exported  # noqa: F401
from .data import Batch, make_batches
from .errors import ContractError, TrainingError
from .metrics import loss_weight_matrix, mean_average_accuracy, weighted_log_loss
from .tensor import Tape, backward, mul_scalar


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 3       # epochs without val-loss improvement before stopping
    min_delta: float = 1e-4
    clip_norm: float = 5.0
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.beta1, self.beta2, self.eps,
               self.batch_size, self.max_epochs, self.min_delta, self.clip_norm,
               self.workers) <= 0 or self.patience < 1:
            raise ContractError("all training parameters must be positive, patience >= 1")

    def to_json_dict(self):
        return {"learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "batch_size": self.batch_size,
                "max_epochs": self.max_epochs, "patience": self.patience,
                "min_delta": self.min_delta, "clip_norm": self.clip_norm,
                "workers": self.workers, "seed": self.seed}


@dataclass
class AdamState:
    m: dict  # parameter name -> first-moment array
    v: dict  # parameter name -> second-moment array
    step: int = 0


def init_adam_state(params):
    named = params.named_tensors()
    return AdamState(m={k: np.zeros_like(t.data) for k, t in named.items()},
                     v={k: np.zeros_like(t.data) for k, t in named.items()},
                     step=0)


def collect_grads(params):
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in params.named_tensors().items()}


def adam_step(params, grads, state, cfg):
    """Bias-corrected Adam update after global-norm clipping.

    The shared FC appears once in the named tensors, so it is updated
    exactly once no matter how many paths contributed gradient.
    """
    named = params.named_tensors()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    scale = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    for name, tensor in named.items():
        g = grads[name] * scale
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        tensor.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return params, state


def batch_loss(params, batch):
    """Weighted log loss of one forward pass (differentiable inside a tape)."""
    output = mdl.forward(params, batch)
    weights = loss_weight_matrix(batch.second_lengths, batch.second_mask.shape[0])
    return weighted_log_loss(output.probs, batch.labels, weights, output.mask)


def _batch_rows(batch, idx):
    labels = None if batch.labels is None else batch.labels[:, idx]
    return Batch(
        session_ids=[batch.session_ids[i] for i in idx],
        first_tracks=batch.first_tracks[:, idx],
        first_interactions=batch.first_interactions[:, idx],
        second_tracks=batch.second_tracks[:, idx],
        first_mask=batch.first_mask[:, idx],
        second_mask=batch.second_mask[:, idx],
        labels=labels,
        last_first_half_skip2=batch.last_first_half_skip2[idx],
        first_lengths=batch.first_lengths[idx],
        second_lengths=batch.second_lengths[idx],
    )


def _accumulate_batch_grads(params, batch, workers):
    """Forward/backward one batch; returns its mean loss.

    With several workers the batch splits into disjoint row groups, each
    worker builds its own tape against the read-only parameters, and the
    main thread (single writer) sums the per-worker gradients in worker
    order.
    """
    if workers <= 1 or batch.size < 2:
        tape = Tape()
        with tape:
            loss = batch_loss(params, batch)
        backward(tape, loss)
        return loss.item()

    groups = [idx for idx in np.array_split(np.arange(batch.size), workers) if len(idx)]

    def work(idx):
        micro = _batch_rows(batch, idx)
        tape = Tape()
        with tape:
            loss = mul_scalar(batch_loss(params, micro), len(idx) / batch.size)
        return loss.item(), backward(tape, loss, into={})

    with ThreadPoolExecutor(max_workers=len(groups)) as pool:
        results = list(pool.map(work, groups))
    total = 0.0
    for loss_value, grad_dict in results:
        total += loss_value
        for tensor, g in grad_dict.items():
            tensor.accumulate_grad(g)
    return total


def train_epoch(params, state, batches, cfg):
    """One pass over the batches: forward, weighted loss, backward, Adam step."""
    if not batches:
        raise ContractError("train_epoch needs at least one batch")
    total, count = 0.0, 0
    for batch in batches:
        params.zero_grad()
        loss_value = _accumulate_batch_grads(params, batch, cfg.workers)
        adam_step(params, collect_grads(params), state, cfg)
        total += loss_value * batch.size
        count += batch.size
    return params, state, total / count


def early_stop(history, cfg):
    """('continue' | 'stop', best_epoch): stop after `patience` consecutive
    epochs whose improvement over the best seen is not strictly greater
    than min_delta.  best_epoch is the 1-based argmin of the history."""
    if not history:
        raise ContractError("early_stop needs a nonempty history")
    best = history[0]
    stale = 0
    for value in history[1:]:
        if best - value > cfg.min_delta:
            stale = 0
            best = value
        else:
            stale += 1
    decision = "stop" if stale >= cfg.patience else "continue"
    return decision, int(np.argmin(history)) + 1


def _forward_batches(params, batches):
    """Yields (batch, output) without recording gradients."""
    for batch in batches:
        yield batch, mdl.forward(params, batch)


def evaluate_loss(params, batches):
    total, count = 0.0, 0
    for batch, output in _forward_batches(params, batches):
        weights = loss_weight_matrix(batch.second_lengths, batch.second_mask.shape[0])
        loss = weighted_log_loss(output.probs, batch.labels, weights, output.mask)
        total += loss.item() * batch.size
        count += batch.size
    return total / count


def _model_pairs(params, sessions, batches):
    pairs = []
    i = 0
    for batch, output in _forward_batches(params, batches):
        preds = mdl.predictions_per_session(output, batch.second_lengths)
        for pred in preds:
            pairs.append((sessions[i].labels, pred))
            i += 1
    return pairs


def evaluate(params, sessions, tracks, schema, batch_size=256):
    """(model report, baseline report) on labeled sessions.

    The sessions/tracks must already carry the same normalization the
    model was trained with.
    """
    if not sessions:
        raise ContractError("evaluate needs at least one session")
    if any(s.labels is None for s in sessions):
        raise ContractError("evaluate needs labeled sessions")
    batches = make_batches(sessions, tracks, schema, batch_size)
    model_report = mean_average_accuracy(_model_pairs(params, sessions, batches))
    baseline_report = mean_average_accuracy(
        [(s.labels, M.baseline_predict(s)) for s in sessions])
    return model_report, baseline_report


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_maa: float
    val_first_acc: float
    seconds: float

    def log_line(self):
        return (f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_loss:.6f}\t"
                f"{self.val_maa:.6f}\t{self.val_first_acc:.6f}\t{self.seconds:.3f}")


@dataclass
class TrainResult:
    params: mdl.ModelParams          # parameters at the last completed epoch
    best_params: mdl.ModelParams     # parameters at the best validation epoch
    adam: AdamState
    history: list                    # EpochStats per completed epoch
    val_losses: list
    best_epoch: int
    stopped_epoch: int


def epoch_seed(seed, epoch):
    """Deterministic per-epoch shuffling seed (resume-safe)."""
    return int(np.random.SeedSequence(entropy=[seed, 104729, epoch]).generate_state(1)[0])


def run_training(params, adam, train_sessions, val_sessions, tracks, schema, cfg,
                 start_epoch=0, val_losses=None, epoch_hook=None):
    """Drive epochs with early stopping; deterministic given (params, cfg, data).

    Resuming with the same inputs, ``start_epoch`` and prior ``val_losses``
    reproduces the uninterrupted run exactly: batch order is a pure
    function of (seed, epoch).  ``epoch_hook(stats, params, adam,
    val_losses, improved)`` runs after every epoch.
    """
    if not train_sessions or not val_sessions:
        raise ContractError("training needs nonempty train and validation splits")
    val_batches = make_batches(val_sessions, tracks, schema, cfg.batch_size)
    val_losses = list(val_losses or [])
    history = []
    best_val = min(val_losses) if val_losses else float("inf")
    best_params = None
    best_epoch = int(np.argmin(val_losses)) + 1 if val_losses else 0
    epoch = start_epoch

    for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
        t0 = time.time()
        batches = make_batches(train_sessions, tracks, schema, cfg.batch_size,
                               seed=epoch_seed(cfg.seed, epoch))
        params, adam, train_loss = train_epoch(params, adam, batches, cfg)
        val_loss = evaluate_loss(params, val_batches)
        pairs = _model_pairs(params, val_sessions, val_batches)
        val_report = mean_average_accuracy(pairs)
        stats = EpochStats(epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                           val_maa=val_report.maa,
                           val_first_acc=val_report.first_prediction_accuracy,
                           seconds=time.time() - t0)
        history.append(stats)
        val_losses.append(val_loss)
        improved = val_loss < best_val
        if improved:
            best_val = val_loss
            best_epoch = epoch
            best_params = mdl.clone_params(params)
        if epoch_hook is not None:
            epoch_hook(stats, params, adam, val_losses, improved)
        decision, _ = early_stop(val_losses, cfg)
        if decision == "stop":
            break

    return TrainResult(params=params,
                       best_params=best_params if best_params is not None else params,
                       adam=adam, history=history, val_losses=val_losses,
                       best_epoch=best_epoch, stopped_epoch=epoch)
