"""Independent straight-line reference implementation of the forward pass.

Pure numpy, one session at a time, explicit loops, no imports from the
package's tensor/layer/model code.  Used as the forward-pass oracle and as
the independent numeric evaluator for full-model gradient checks (with a
numba-compiled twin for the many evaluations finite differences need).
"""

import math

import numba
import numpy as np


def _sig(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _relu(x):
    return np.maximum(x, 0.0)


def _dense(named, prefix, x, activation):
    out = x @ named[f"{prefix}.weight"] + named[f"{prefix}.bias"]
    if activation == "relu":
        return _relu(out)
    if activation == "sigmoid":
        return _sig(out)
    return out


def _lstm_cell_step(named, prefix, x, h, c, hidden):
    gates = x @ named[f"{prefix}.w_input"] + h @ named[f"{prefix}.w_hidden"] \
        + named[f"{prefix}.bias"]
    i = _sig(gates[0:hidden])
    f = _sig(gates[hidden:2 * hidden])
    g = np.tanh(gates[2 * hidden:3 * hidden])
    o = _sig(gates[3 * hidden:4 * hidden])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def _lstm_seq(named, prefix, xs, hidden, h0=None, c0=None):
    h = np.zeros(hidden) if h0 is None else h0.copy()
    c = np.zeros(hidden) if c0 is None else c0.copy()
    outs = []
    for x in xs:
        h, c = _lstm_cell_step(named, prefix, x, h, c, hidden)
        outs.append(h)
    return outs, h, c


def _bilstm(named, prefix, xs, hidden, init=None):
    """Returns per-step [fwd || bwd] outputs plus both final (h, c) states.

    init, when given, is ((h_f, c_f), (h_b, c_b)) seeding the two
    directions (the encoder-to-decoder handoff)."""
    (hf0, cf0), (hb0, cb0) = init if init is not None else ((None, None), (None, None))
    fwd, hf, cf = _lstm_seq(named, f"{prefix}.fwd", xs, hidden, hf0, cf0)
    bwd_rev, hb, cb = _lstm_seq(named, f"{prefix}.bwd", list(reversed(xs)), hidden, hb0, cb0)
    bwd = list(reversed(bwd_rev))
    outs = [np.concatenate([f, b]) for f, b in zip(fwd, bwd)]
    return outs, (hf, cf), (hb, cb)


def session_inputs(session, tracks):
    """Raw per-session model inputs from an (already normalized) dataset."""
    track_first = np.stack([tracks.vector(t) for t in session.first_tracks])
    track_second = np.stack([tracks.vector(t) for t in session.second_tracks])
    inter = np.stack([np.concatenate([row, session.session_meta])
                      for row in session.first_interactions])
    return {"track_first": track_first, "track_second": track_second,
            "interactions": inter, "last_skip": float(session.last_first_half_skip2)}


def reference_probs(named, cfg, inputs):
    """Forward pass for one session; returns the per-position probabilities."""
    sh = cfg.sessrep_hidden
    eh = cfg.enc_hidden
    dh = cfg.dec_final_hidden

    track_first = [_dense(named, "track_fc", x, "relu") for x in inputs["track_first"]]
    track_second = [_dense(named, "track_fc", x, "relu") for x in inputs["track_second"]]
    inter = [_dense(named, "interaction_fc", x, "relu") for x in inputs["interactions"]]

    xs_a = [np.concatenate([t, i]) for t, i in zip(track_first, inter)]
    _, (hfa, _), (hba, _) = _bilstm(named, "sess_bilstm_a", xs_a, sh)
    xs_b = track_first + track_second
    _, (hfb, _), (hbb, _) = _bilstm(named, "sess_bilstm_b", xs_b, sh)
    sess_vec = np.concatenate([hfa, hba, hfb, hbb])

    enc_in = [_dense(named, "shared_fc", np.concatenate([t, sess_vec]), "relu")
              for t in track_first]
    _, enc_fwd, enc_bwd = _bilstm(named, "enc_bilstm", enc_in, eh)

    dec_in = [_dense(named, "shared_fc", np.concatenate([t, sess_vec]), "relu")
              for t in track_second]
    stage2, _, _ = _bilstm(named, "dec_bilstm", dec_in, eh, init=(enc_fwd, enc_bwd))

    h = np.zeros(dh)
    c = np.zeros(dh)
    prev = inputs["last_skip"]
    probs = []
    for step in stage2:
        x = np.concatenate([step, [prev]])
        h, c = _lstm_cell_step(named, "dec_lstm", x, h, c, dh)
        p = float(_dense(named, "out_fc", h, "sigmoid")[0])
        probs.append(p)
        prev = (1.0 if p >= 0.5 else 0.0) if cfg.hard_feedback else p
    return np.array(probs)


def reference_weighted_loss(named, cfg, sessions_inputs, labels):
    """Mean weighted log loss over sessions, all math independent of the package."""
    total = 0.0
    for inputs, y in zip(sessions_inputs, labels):
        p = reference_probs(named, cfg, inputs)
        t = len(y)
        drops = np.array([(1.0 + sum(1.0 / j for j in range(i + 1, t + 1))) / t
                          for i in range(1, t + 1)])
        w = drops / drops.sum()
        p = np.clip(p, 1e-12, 1 - 1e-12)
        y = np.asarray(y, dtype=float)
        total += float(np.sum(w * (-(y * np.log(p) + (1 - y) * np.log(1 - p)))))
    return total / len(labels)


# ---------------------------------------------------------------------------
# batched variant for gradient checks: same math, rows stacked per length
# group and gate activations fused, optionally in extended precision so the
# central-difference quotient is not cancellation-limited.
# ---------------------------------------------------------------------------

def _sig_b(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _dense_b(named, prefix, x, activation):
    out = x @ named[f"{prefix}.weight"] + named[f"{prefix}.bias"]
    if activation == "relu":
        return np.maximum(out, 0.0)
    if activation == "sigmoid":
        return _sig_b(out)
    return out


def _cell_b(named, prefix, x, h, c, hidden):
    gates = x @ named[f"{prefix}.w_input"] + h @ named[f"{prefix}.w_hidden"] \
        + named[f"{prefix}.bias"]
    act = _sig_b(gates)
    g = np.tanh(gates[:, 2 * hidden:3 * hidden])
    c_new = act[:, hidden:2 * hidden] * c + act[:, :hidden] * g
    h_new = act[:, 3 * hidden:] * np.tanh(c_new)
    return h_new, c_new


def _seq_b(named, prefix, xs, hidden, init=None):
    b = xs[0].shape[0]
    h = np.zeros((b, hidden), dtype=xs[0].dtype) if init is None else init[0].copy()
    c = np.zeros((b, hidden), dtype=xs[0].dtype) if init is None else init[1].copy()
    outs = []
    for x in xs:
        h, c = _cell_b(named, prefix, x, h, c, hidden)
        outs.append(h)
    return outs, (h, c)


def _bilstm_b(named, prefix, xs, hidden, init=None):
    fwd_init, bwd_init = init if init is not None else (None, None)
    fwd, f_state = _seq_b(named, f"{prefix}.fwd", xs, hidden, fwd_init)
    bwd_rev, b_state = _seq_b(named, f"{prefix}.bwd", list(reversed(xs)), hidden, bwd_init)
    bwd = list(reversed(bwd_rev))
    return [np.hstack([f, b]) for f, b in zip(fwd, bwd)], f_state, b_state


def _group_probs(named, cfg, group):
    """Forward for sessions of one (H, T) shape, stacked along the batch axis."""
    tf_raw = np.stack([g["track_first"] for g in group], axis=1)    # [H, b, d]
    ts_raw = np.stack([g["track_second"] for g in group], axis=1)   # [T, b, d]
    it_raw = np.stack([g["interactions"] for g in group], axis=1)
    last = np.array([g["last_skip"] for g in group], dtype=tf_raw.dtype)

    track_first = [_dense_b(named, "track_fc", x, "relu") for x in tf_raw]
    track_second = [_dense_b(named, "track_fc", x, "relu") for x in ts_raw]
    inter = [_dense_b(named, "interaction_fc", x, "relu") for x in it_raw]

    xs_a = [np.hstack([t, i]) for t, i in zip(track_first, inter)]
    _, (hfa, _), (hba, _) = _bilstm_b(named, "sess_bilstm_a", xs_a, cfg.sessrep_hidden)
    _, (hfb, _), (hbb, _) = _bilstm_b(named, "sess_bilstm_b", track_first + track_second,
                                      cfg.sessrep_hidden)
    sess_vec = np.hstack([hfa, hba, hfb, hbb])

    enc_in = [_dense_b(named, "shared_fc", np.hstack([t, sess_vec]), "relu")
              for t in track_first]
    _, enc_fwd, enc_bwd = _bilstm_b(named, "enc_bilstm", enc_in, cfg.enc_hidden)
    dec_in = [_dense_b(named, "shared_fc", np.hstack([t, sess_vec]), "relu")
              for t in track_second]
    stage2, _, _ = _bilstm_b(named, "dec_bilstm", dec_in, cfg.enc_hidden,
                             init=(enc_fwd, enc_bwd))

    b = tf_raw.shape[1]
    h = np.zeros((b, cfg.dec_final_hidden), dtype=tf_raw.dtype)
    c = h.copy()
    prev = last
    probs = []
    for step in stage2:
        h, c = _cell_b(named, "dec_lstm", np.hstack([step, prev[:, None]]), h, c,
                       cfg.dec_final_hidden)
        p = _dense_b(named, "out_fc", h, "sigmoid")[:, 0]
        probs.append(p)
        prev = (p >= 0.5).astype(p.dtype) if cfg.hard_feedback else p
    return np.stack(probs)  # [T, b]


def reference_batch_loss(named, cfg, sessions_inputs, labels, dtype=np.float64):
    """Mean weighted log loss, rows grouped by session shape; numerically
    identical math to reference_weighted_loss at the group's dtype."""
    named = {k: np.asarray(v, dtype=dtype) for k, v in named.items()}
    inputs = [{k: (np.asarray(v, dtype=dtype) if isinstance(v, np.ndarray) else v)
               for k, v in s.items()} for s in sessions_inputs]
    groups = {}
    for i, s in enumerate(inputs):
        key = (s["track_first"].shape[0], s["track_second"].shape[0])
        groups.setdefault(key, []).append(i)

    total = dtype(0.0)
    for (_, t), indices in groups.items():
        probs = _group_probs(named, cfg, [inputs[i] for i in indices])
        drops = np.array([(1.0 + sum(1.0 / j for j in range(i + 1, t + 1))) / t
                          for i in range(1, t + 1)], dtype=dtype)
        w = drops / drops.sum()
        p = np.clip(probs, 1e-12, 1 - 1e-12)
        for col, i in enumerate(indices):
            y = np.asarray(labels[i], dtype=dtype)
            pc = p[:, col]
            total += np.sum(w * (-(y * np.log(pc) + (1 - y) * np.log(1 - pc))))
    return total / len(labels)


# ---------------------------------------------------------------------------
# numba twin of the batched forward: same straight-line math compiled to
# native code, fast enough to run the thousands of evaluations a full-model
# finite-difference sweep needs.  Restricted to equal-length sessions.
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _sig_nb(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            v = x[i, j]
            if v >= 0.0:
                out[i, j] = 1.0 / (1.0 + math.exp(-v))
            else:
                e = math.exp(v)
                out[i, j] = e / (1.0 + e)
    return out


@numba.njit(cache=True)
def _dense_relu_nb(x, w, b):
    out = x @ w
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            v = out[i, j] + b[j]
            out[i, j] = v if v > 0.0 else 0.0
    return out


@numba.njit(cache=True)
def _cell_nb(x, h, c, wi, wh, b):
    hidden = wh.shape[0]
    gates = x @ wi + h @ wh
    for r in range(gates.shape[0]):
        for j in range(gates.shape[1]):
            gates[r, j] += b[j]
    act = _sig_nb(gates)
    h_new = np.empty_like(h)
    c_new = np.empty_like(c)
    for r in range(h.shape[0]):
        for j in range(hidden):
            g = math.tanh(gates[r, 2 * hidden + j])
            cv = act[r, hidden + j] * c[r, j] + act[r, j] * g
            c_new[r, j] = cv
            h_new[r, j] = act[r, 3 * hidden + j] * math.tanh(cv)
    return h_new, c_new


@numba.njit(cache=True)
def _bilstm_nb(xs, wi_f, wh_f, b_f, wi_b, wh_b, b_b, h0f, c0f, h0b, c0b):
    steps, batch, _ = xs.shape
    hidden = wh_f.shape[0]
    outs = np.empty((steps, batch, 2 * hidden))
    h, c = h0f.copy(), c0f.copy()
    for t in range(steps):
        h, c = _cell_nb(xs[t], h, c, wi_f, wh_f, b_f)
        outs[t, :, :hidden] = h
    hf, cf = h, c
    h, c = h0b.copy(), c0b.copy()
    for t in range(steps - 1, -1, -1):
        h, c = _cell_nb(xs[t], h, c, wi_b, wh_b, b_b)
        outs[t, :, hidden:] = h
    return outs, hf, cf, h, c


@numba.njit(cache=True)
def _forward_nb(track_first, track_second, inter, last_skip,
                w_track, b_track, w_inter, b_inter,
                a_wi_f, a_wh_f, a_b_f, a_wi_b, a_wh_b, a_b_b,
                s_wi_f, s_wh_f, s_b_f, s_wi_b, s_wh_b, s_b_b,
                w_shared, b_shared,
                e_wi_f, e_wh_f, e_b_f, e_wi_b, e_wh_b, e_b_b,
                d_wi_f, d_wh_f, d_b_f, d_wi_b, d_wh_b, d_b_b,
                l_wi, l_wh, l_b, w_out, b_out, hard_feedback):
    h_steps, batch, _ = track_first.shape
    t_steps = track_second.shape[0]
    d_fc = w_track.shape[1]
    i_fc = w_inter.shape[1]
    sess_h = a_wh_f.shape[0]
    enc_h = e_wh_f.shape[0]
    dec_h = l_wh.shape[0]

    tf = np.empty((h_steps, batch, d_fc))
    ts = np.empty((t_steps, batch, d_fc))
    it = np.empty((h_steps, batch, i_fc))
    for t in range(h_steps):
        tf[t] = _dense_relu_nb(track_first[t], w_track, b_track)
        it[t] = _dense_relu_nb(inter[t], w_inter, b_inter)
    for t in range(t_steps):
        ts[t] = _dense_relu_nb(track_second[t], w_track, b_track)

    xa = np.empty((h_steps, batch, d_fc + i_fc))
    for t in range(h_steps):
        xa[t, :, :d_fc] = tf[t]
        xa[t, :, d_fc:] = it[t]
    zeros = np.zeros((batch, sess_h))
    _, hfa, _, hba, _ = _bilstm_nb(xa, a_wi_f, a_wh_f, a_b_f, a_wi_b, a_wh_b, a_b_b,
                                   zeros, zeros, zeros, zeros)
    xb = np.empty((h_steps + t_steps, batch, d_fc))
    xb[:h_steps] = tf
    xb[h_steps:] = ts
    _, hfb, _, hbb, _ = _bilstm_nb(xb, s_wi_f, s_wh_f, s_b_f, s_wi_b, s_wh_b, s_b_b,
                                   zeros, zeros, zeros, zeros)
    sv = np.empty((batch, 4 * sess_h))
    sv[:, :sess_h] = hfa
    sv[:, sess_h:2 * sess_h] = hba
    sv[:, 2 * sess_h:3 * sess_h] = hfb
    sv[:, 3 * sess_h:] = hbb

    enc_w = w_shared.shape[1]
    enc_in = np.empty((h_steps, batch, enc_w))
    cat = np.empty((batch, d_fc + 4 * sess_h))
    for t in range(h_steps):
        cat[:, :d_fc] = tf[t]
        cat[:, d_fc:] = sv
        enc_in[t] = _dense_relu_nb(cat, w_shared, b_shared)
    ez = np.zeros((batch, enc_h))
    _, ehf, ecf, ehb, ecb = _bilstm_nb(enc_in, e_wi_f, e_wh_f, e_b_f,
                                       e_wi_b, e_wh_b, e_b_b, ez, ez, ez, ez)

    dec_in = np.empty((t_steps, batch, enc_w))
    for t in range(t_steps):
        cat[:, :d_fc] = ts[t]
        cat[:, d_fc:] = sv
        dec_in[t] = _dense_relu_nb(cat, w_shared, b_shared)
    stage2, _, _, _, _ = _bilstm_nb(dec_in, d_wi_f, d_wh_f, d_b_f,
                                    d_wi_b, d_wh_b, d_b_b, ehf, ecf, ehb, ecb)

    h = np.zeros((batch, dec_h))
    c = np.zeros((batch, dec_h))
    prev = last_skip.copy()
    probs = np.empty((t_steps, batch))
    x3 = np.empty((batch, 2 * enc_h + 1))
    for t in range(t_steps):
        x3[:, :2 * enc_h] = stage2[t]
        x3[:, 2 * enc_h] = prev
        h, c = _cell_nb(x3, h, c, l_wi, l_wh, l_b)
        out = h @ w_out
        for r in range(batch):
            v = out[r, 0] + b_out[0]
            p = 1.0 / (1.0 + math.exp(-v)) if v >= 0.0 else \
                math.exp(v) / (1.0 + math.exp(v))
            probs[t, r] = p
            prev[r] = (1.0 if p >= 0.5 else 0.0) if hard_feedback else p
    return probs


_NB_PARAM_ORDER = (
    "track_fc.weight", "track_fc.bias", "interaction_fc.weight", "interaction_fc.bias",
    "sess_bilstm_a.fwd.w_input", "sess_bilstm_a.fwd.w_hidden", "sess_bilstm_a.fwd.bias",
    "sess_bilstm_a.bwd.w_input", "sess_bilstm_a.bwd.w_hidden", "sess_bilstm_a.bwd.bias",
    "sess_bilstm_b.fwd.w_input", "sess_bilstm_b.fwd.w_hidden", "sess_bilstm_b.fwd.bias",
    "sess_bilstm_b.bwd.w_input", "sess_bilstm_b.bwd.w_hidden", "sess_bilstm_b.bwd.bias",
    "shared_fc.weight", "shared_fc.bias",
    "enc_bilstm.fwd.w_input", "enc_bilstm.fwd.w_hidden", "enc_bilstm.fwd.bias",
    "enc_bilstm.bwd.w_input", "enc_bilstm.bwd.w_hidden", "enc_bilstm.bwd.bias",
    "dec_bilstm.fwd.w_input", "dec_bilstm.fwd.w_hidden", "dec_bilstm.fwd.bias",
    "dec_bilstm.bwd.w_input", "dec_bilstm.bwd.w_hidden", "dec_bilstm.bwd.bias",
    "dec_lstm.w_input", "dec_lstm.w_hidden", "dec_lstm.bias",
    "out_fc.weight", "out_fc.bias",
)


def fast_batch_loss(named, cfg, sessions_inputs, labels):
    """Closure evaluating the compiled loss on the *current* contents of the
    ``named`` arrays (they are mutated in place by grad_check sweeps).
    Sessions must share one (first half, second half) shape."""
    shapes = {(s["track_first"].shape[0], s["track_second"].shape[0])
              for s in sessions_inputs}
    if len(shapes) != 1:
        raise ValueError("fast_batch_loss needs equal-length sessions")
    track_first = np.stack([s["track_first"] for s in sessions_inputs], axis=1)
    track_second = np.stack([s["track_second"] for s in sessions_inputs], axis=1)
    inter = np.stack([s["interactions"] for s in sessions_inputs], axis=1)
    last = np.array([s["last_skip"] for s in sessions_inputs])
    arrays = tuple(np.ascontiguousarray(named[k]) for k in _NB_PARAM_ORDER)
    t = track_second.shape[0]
    drops = np.array([(1.0 + sum(1.0 / j for j in range(i + 1, t + 1))) / t
                      for i in range(1, t + 1)])
    w = drops / drops.sum()
    y = np.stack([np.asarray(l, dtype=float) for l in labels], axis=1)
    hard = bool(cfg.hard_feedback)

    def evaluate():
        probs = _forward_nb(track_first, track_second, inter, last.copy(),
                            *arrays, hard)
        p = np.clip(probs, 1e-12, 1 - 1e-12)
        per_session = (w[:, None] * (-(y * np.log(p) + (1 - y) * np.log(1 - p)))).sum(axis=0)
        return float(per_session.mean())

    return evaluate
