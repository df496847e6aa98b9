"""The skip-prediction architecture.

Pipeline: per-track and per-interaction FC transforms -> two BiLSTMs
summarizing the session into a fixed vector -> encoder BiLSTM producing
the decoder's initial states -> three-stage decoder whose final LSTM
consumes its own previous probability output (the actual last observed
skip for the first predicted track).  One FC layer, applied to
concat(track representation, session vector), is shared between encoder
and decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ContractError, DimensionError, SchemaError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    track_feat_dim: int
    interaction_feat_dim: int
    track_fc_dim: int = 64
    interaction_fc_dim: int = 64
    sessrep_hidden: int = 64
    enc_fc_dim: int = 128
    enc_hidden: int = 128
    dec_final_hidden: int = 128
    hard_feedback: bool = False  # feed thresholded 0/1 instead of the probability
    seed: int = 0

    def __post_init__(self):
        for name in ("track_feat_dim", "interaction_feat_dim", "track_fc_dim",
                     "interaction_fc_dim", "sessrep_hidden", "enc_fc_dim",
                     "enc_hidden", "dec_final_hidden"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")

    @property
    def session_vector_dim(self):
        return 4 * self.sessrep_hidden

    def to_json_dict(self):
        return {"track_feat_dim": self.track_feat_dim,
                "interaction_feat_dim": self.interaction_feat_dim,
                "track_fc_dim": self.track_fc_dim,
                "interaction_fc_dim": self.interaction_fc_dim,
                "sessrep_hidden": self.sessrep_hidden,
                "enc_fc_dim": self.enc_fc_dim,
                "enc_hidden": self.enc_hidden,
                "dec_final_hidden": self.dec_final_hidden,
                "hard_feedback": self.hard_feedback,
                "seed": self.seed}

    @classmethod
    def from_json_dict(cls, raw):
        return cls(**raw)


def config_for_schema(schema, **overrides):
    """ModelConfig with input widths derived from a feature schema."""
    return ModelConfig(
        track_feat_dim=schema.track_width,
        interaction_feat_dim=schema.interaction_width + schema.session_meta_width,
        **overrides,
    )


@dataclass
class ModelParams:
    """All learnable weights; shared_fc is one object used by both encoder
    and decoder paths, so it owns exactly one gradient accumulator."""
    config: ModelConfig
    track_fc: L.DenseLayer
    interaction_fc: L.DenseLayer
    sess_bilstm_a: L.BiLstm       # first-half behavior path
    sess_bilstm_b: L.BiLstm       # all-tracks content path
    shared_fc: L.DenseLayer
    enc_bilstm: L.BiLstm
    dec_bilstm: L.BiLstm
    dec_lstm: L.LstmCell
    out_fc: L.DenseLayer

    def named_tensors(self):
        pairs = []
        pairs += L.dense_tensors("track_fc", self.track_fc)
        pairs += L.dense_tensors("interaction_fc", self.interaction_fc)
        pairs += L.bilstm_tensors("sess_bilstm_a", self.sess_bilstm_a)
        pairs += L.bilstm_tensors("sess_bilstm_b", self.sess_bilstm_b)
        pairs += L.dense_tensors("shared_fc", self.shared_fc)
        pairs += L.bilstm_tensors("enc_bilstm", self.enc_bilstm)
        pairs += L.bilstm_tensors("dec_bilstm", self.dec_bilstm)
        pairs += L.lstm_tensors("dec_lstm", self.dec_lstm)
        pairs += L.dense_tensors("out_fc", self.out_fc)
        return dict(pairs)

    def tensors(self):
        return list(self.named_tensors().values())

    def zero_grad(self):
        for t in self.tensors():
            t.zero_grad()


def params_from_tensors(config, named):
    """Rebuild ModelParams from a name -> Tensor mapping (checkpoint loading)."""
    def dense(prefix, activation):
        return L.DenseLayer(weight=named[f"{prefix}.weight"], bias=named[f"{prefix}.bias"],
                            activation=activation)

    def cell(prefix, hidden):
        return L.LstmCell(w_input=named[f"{prefix}.w_input"],
                          w_hidden=named[f"{prefix}.w_hidden"],
                          bias=named[f"{prefix}.bias"], hidden_size=hidden)

    def bilstm(prefix, hidden):
        return L.BiLstm(forward_cell=cell(f"{prefix}.fwd", hidden),
                        backward_cell=cell(f"{prefix}.bwd", hidden))

    c = config
    return ModelParams(
        config=c,
        track_fc=dense("track_fc", "relu"),
        interaction_fc=dense("interaction_fc", "relu"),
        sess_bilstm_a=bilstm("sess_bilstm_a", c.sessrep_hidden),
        sess_bilstm_b=bilstm("sess_bilstm_b", c.sessrep_hidden),
        shared_fc=dense("shared_fc", "relu"),
        enc_bilstm=bilstm("enc_bilstm", c.enc_hidden),
        dec_bilstm=bilstm("dec_bilstm", c.enc_hidden),
        dec_lstm=cell("dec_lstm", c.dec_final_hidden),
        out_fc=dense("out_fc", "sigmoid"),
    )


def clone_params(params):
    """Deep copy of all weights (used to snapshot the best epoch)."""
    named = {name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
             for name, t in params.named_tensors().items()}
    return params_from_tensors(params.config, named)


def init_model_params(config):
    """Deterministic Glorot initialization in a fixed layer order."""
    rng = np.random.default_rng(config.seed)
    c = config
    sess_vec = c.session_vector_dim
    return ModelParams(
        config=c,
        track_fc=L.init_dense(rng, c.track_feat_dim, c.track_fc_dim, "relu"),
        interaction_fc=L.init_dense(rng, c.interaction_feat_dim, c.interaction_fc_dim, "relu"),
        sess_bilstm_a=L.init_bilstm(rng, c.track_fc_dim + c.interaction_fc_dim, c.sessrep_hidden),
        sess_bilstm_b=L.init_bilstm(rng, c.track_fc_dim, c.sessrep_hidden),
        shared_fc=L.init_dense(rng, c.track_fc_dim + sess_vec, c.enc_fc_dim, "relu"),
        enc_bilstm=L.init_bilstm(rng, c.enc_fc_dim, c.enc_hidden),
        dec_bilstm=L.init_bilstm(rng, c.enc_fc_dim, c.enc_hidden),
        dec_lstm=L.init_lstm_cell(rng, 2 * c.enc_hidden + 1, c.dec_final_hidden),
        out_fc=L.init_dense(rng, c.dec_final_hidden, 1, "sigmoid"),
    )


@dataclass
class ForwardOutput:
    probs: list                # time-major rank-1 prob tensors, one per position
    mask: np.ndarray           # [T2, batch] validity mask

    def prob_matrix(self):
        return np.stack([p.data for p in self.probs]) if self.probs \
            else np.zeros_like(self.mask)


def _steps(array):
    """Time-major ndarray [T, b, d] -> list of constant [b, d] tensors."""
    return [Tensor(array[t]) for t in range(array.shape[0])]


def _mask_list(mask):
    return [mask[t] for t in range(mask.shape[0])]


def transform_base(params, batch):
    """Shared FC transforms of raw features for both halves.

    Track features of both halves pass through the one track FC; first-half
    interaction vectors (session metadata already appended) pass through
    the interaction FC.  Both with ReLU.
    """
    c = params.config
    if batch.first_tracks.shape[2] != c.track_feat_dim \
            or batch.second_tracks.shape[2] != c.track_feat_dim:
        raise SchemaError(f"track feature width {batch.first_tracks.shape[2]} does not "
                          f"match model config {c.track_feat_dim}")
    if batch.first_interactions.shape[2] != c.interaction_feat_dim:
        raise SchemaError(f"interaction feature width {batch.first_interactions.shape[2]} "
                          f"does not match model config {c.interaction_feat_dim}")
    track_first = [L.dense_forward(params.track_fc, x) for x in _steps(batch.first_tracks)]
    track_second = [L.dense_forward(params.track_fc, x) for x in _steps(batch.second_tracks)]
    inter = [L.dense_forward(params.interaction_fc, x)
             for x in _steps(batch.first_interactions)]
    return track_first, track_second, inter


def session_vector(params, track_first, track_second, inter, first_mask, second_mask):
    """Fixed-width session summary from the two BiLSTM paths.

    Path A reads concat(track, interaction) over the first half; path B
    reads the full track sequence (first then second half).  Each path is
    summarized by concat(final forward h, final backward h).
    """
    if not track_first or not track_second:
        raise ContractError("session_vector needs nonempty halves")
    xs_a = [T.concat(tr, it, axis=1) for tr, it in zip(track_first, inter)]
    _, fwd_a, bwd_a = L.bilstm_run(params.sess_bilstm_a, xs_a, _mask_list(first_mask))
    xs_b = track_first + track_second
    mask_b = _mask_list(first_mask) + _mask_list(second_mask)
    _, fwd_b, bwd_b = L.bilstm_run(params.sess_bilstm_b, xs_b, mask_b)
    summary_a = T.concat(fwd_a.h, bwd_a.h, axis=1)
    summary_b = T.concat(fwd_b.h, bwd_b.h, axis=1)
    return T.concat(summary_a, summary_b, axis=1)


def encode(params, track_first, sess_vec, first_mask):
    """Encoder: shared FC over concat(track, session vector), then a BiLSTM;
    returns both directional final states for the decoder handoff."""
    xs = [L.dense_forward(params.shared_fc, T.concat(tr, sess_vec, axis=1))
          for tr in track_first]
    _, final_fwd, final_bwd = L.bilstm_run(params.enc_bilstm, xs, _mask_list(first_mask))
    return final_fwd, final_bwd


def decode(params, track_second, sess_vec, enc_states, last_first_half_skip2, second_mask):
    """Decoder stages: shared FC -> BiLSTM seeded with encoder states ->
    strictly sequential LSTM fed with the previous prediction.

    The feedback input is the model's own probability output (the actual
    skip flag of the last observed track for the first step); with
    hard_feedback the thresholded 0/1 value is fed instead, detached from
    the gradient path.
    """
    final_fwd, final_bwd = enc_states
    c = params.config
    if final_fwd.h.shape[1] != c.enc_hidden:
        raise DimensionError("encoder state width does not match decoder BiLSTM")
    last = np.asarray(last_first_half_skip2, dtype=np.float64)
    batch = track_second[0].shape[0]
    if last.shape != (batch,):
        raise ContractError(f"last_first_half_skip2 must have shape ({batch},)")

    stage1 = [L.dense_forward(params.shared_fc, T.concat(tr, sess_vec, axis=1))
              for tr in track_second]

    fwd_out, _ = L.lstm_run(params.dec_bilstm.forward_cell, stage1, final_fwd,
                            _mask_list(second_mask))
    bwd_out_rev, _ = L.lstm_run(params.dec_bilstm.backward_cell, list(reversed(stage1)),
                                final_bwd, list(reversed(_mask_list(second_mask))))
    bwd_out = list(reversed(bwd_out_rev))
    stage2 = [T.concat(f, b, axis=1) for f, b in zip(fwd_out, bwd_out)]

    state = L.zero_state(batch, c.dec_final_hidden)
    prev = Tensor(last.reshape(-1, 1))
    probs = []
    for step in stage2:
        x_t = T.concat(step, prev, axis=1)
        state = L.lstm_step(params.dec_lstm, x_t, state)
        p_col = L.dense_forward(params.out_fc, state.h)
        probs.append(T.as_vector(p_col))
        if c.hard_feedback:
            prev = Tensor((p_col.data >= 0.5).astype(np.float64))
        else:
            prev = p_col
    return ForwardOutput(probs=probs, mask=second_mask.copy())


def forward(params, batch):
    """Full forward pass over one padded batch."""
    track_first, track_second, inter = transform_base(params, batch)
    sess_vec = session_vector(params, track_first, track_second, inter,
                              batch.first_mask, batch.second_mask)
    enc_states = encode(params, track_first, sess_vec, batch.first_mask)
    return decode(params, track_second, sess_vec, enc_states,
                  batch.last_first_half_skip2, batch.second_mask)


def predict(probs):
    """Probabilities to boolean skip decisions; ties at 0.5 predict a skip."""
    if isinstance(probs, ForwardOutput):
        return probs.prob_matrix() >= 0.5
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    return arr >= 0.5


def predictions_per_session(output, second_lengths):
    """Trim the padded [T2, batch] decision matrix back to per-session arrays."""
    decisions = predict(output)
    return [decisions[:int(n), j] for j, n in enumerate(second_lengths)]
