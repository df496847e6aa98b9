"""Calibrated synthetic session generator with planted, learnable structure.

Ground truth is a logistic model with known parameters: per-position base
logits (calibrated so marginal skip rates match the published per-position
profile), a per-user propensity, a linear effect of one designated track
feature, and persistence of the previous skip.  Because the generative
parameters are known, an exact sequential Bayes predictor is available as
a yardstick for trained models.

Skip flags nest by construction: skip_1 implies skip_2 implies skip_3, and
not_skipped is the exact complement of skip_3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Session, SessionDataset, TrackTable, default_schema
from .errors import CalibrationError, ContractError

# Published marginals used as calibration targets.
LENGTH_PERCENT = (8.8, 7.7, 6.7, 5.9, 5.2, 4.5, 4.0, 3.5, 3.1, 2.8, 47.7)  # lengths 10..20
OVERALL_RATES = {"skip_1": 0.4152, "skip_2": 0.5089, "skip_3": 0.6386, "not_skipped": 0.3441}
SKIP2_BY_POSITION = (37.4, 46.7, 49.4, 51.6, 52.4, 53.2, 53.1, 53.0, 52.1, 50.3,
                     50.7, 51.3, 51.7, 52.2, 52.5, 53.0, 53.3, 53.5, 53.6, 53.6)

# Conditional gate probabilities chosen so the overall skip_1/skip_3 rates
# land on their published values given the skip_2 rate:
#   P(skip_1) = P(gate) * P(skip_2),  P(skip_3) = P(skip_2) + P(gate) * (1 - P(skip_2)).
SKIP1_GATE = OVERALL_RATES["skip_1"] / OVERALL_RATES["skip_2"]
SKIP3_GATE = (OVERALL_RATES["skip_3"] - OVERALL_RATES["skip_2"]) / (1.0 - OVERALL_RATES["skip_2"])

# P(feature | skip_2), P(feature | not skip_2) for auxiliary interactions.
INTERACTION_RATES = {
    "seek_fwd": (0.32, 0.08),
    "seek_back": (0.05, 0.12),
    "short_pause": (0.10, 0.18),
    "long_pause": (0.04, 0.09),
}
DEFAULT_INTERACTION_RATE = (0.20, 0.10)
REASON_PROBS = {
    True: np.array([0.15, 0.55, 0.10, 0.20]),   # skipped: mostly forward-button
    False: np.array([0.60, 0.15, 0.10, 0.15]),  # played: mostly track-done
}
PREMIUM_RATE = 0.7

# Base position logits for the default generator parameters (persistence 1.0,
# feature effect 1.0, user propensity std 0.5), produced by calibrate() so the
# generated per-position skip rates reproduce SKIP2_BY_POSITION.
DEFAULT_BASE_LOGITS = (
    -0.64241777, -0.54270897, -0.49829075, -0.41014294, -0.39052617,
    -0.35530641, -0.36516235, -0.37248129, -0.41844656, -0.50709586,
    -0.46787452, -0.43930549, -0.42384442, -0.40266544, -0.38821342,
    -0.36578043, -0.35862236, -0.34835965, -0.34457958, -0.34694519,
)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_scalar(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def _log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = -np.log1p(np.exp(-x[pos]))
    out[~pos] = x[~pos] - np.log1p(np.exp(x[~pos]))
    return out


@dataclass(frozen=True)
class GenConfig:
    """Generator parameters; defaults are calibrated to the published marginals."""
    n_sessions: int = 10000
    length_probs: tuple = tuple(np.array(LENGTH_PERCENT) / sum(LENGTH_PERCENT))
    base_position_logits: tuple = DEFAULT_BASE_LOGITS
    persistence: float = 1.0          # weight of the previous track's skip_2
    feature_effect: float = 1.0       # weight of the designated track feature
    user_propensity_std: float = 0.5
    skip1_gate: float = SKIP1_GATE    # P(skip_1 | skip_2)
    skip3_gate: float = SKIP3_GATE    # P(extra skip_3 | not skip_2)
    seed: int = 0

    def __post_init__(self):
        if len(self.length_probs) != 11 or abs(sum(self.length_probs) - 1.0) > 1e-9:
            raise ContractError("length_probs must be 11 probabilities summing to 1")
        if len(self.base_position_logits) != 20:
            raise ContractError("base_position_logits must cover positions 1..20")
        if self.user_propensity_std < 0:
            raise ContractError("user_propensity_std must be >= 0")
        if self.seed < 0:
            raise ContractError("seed must be non-negative")

    def to_json_dict(self):
        return {"n_sessions": self.n_sessions,
                "length_probs": list(self.length_probs),
                "base_position_logits": list(self.base_position_logits),
                "persistence": self.persistence,
                "feature_effect": self.feature_effect,
                "user_propensity_std": self.user_propensity_std,
                "skip1_gate": self.skip1_gate,
                "skip3_gate": self.skip3_gate,
                "seed": self.seed}


def _session_rng(seed, index):
    # counter-based stream per session: output is independent of generation order
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=[seed, index])))


def sample_length(cfg, rng):
    """Inverse-CDF draw of the session length, in [10, 20]."""
    u = rng.random()
    cum = 0.0
    for i, p in enumerate(cfg.length_probs):
        cum += p
        if u < cum:
            return 10 + i
    return 20


def generate_session(cfg, rng, schema, session_index=0):
    """One synthetic session with skip labels for every position.

    Returns (session, track_ids, track_vectors); first-half rows carry all
    interaction features, the second half only the skip labels.
    """
    base = np.asarray(cfg.base_position_logits)
    length = sample_length(cfg, rng)
    half = math.ceil(length / 2)
    u = rng.normal() * cfg.user_propensity_std

    n_num = len(schema.track_numeric)
    numerics = rng.standard_normal((length, n_num))
    cats = [rng.integers(0, card, size=length) for _, card in schema.track_categorical]

    chain_u = rng.random(length)
    skip2 = np.zeros(length, dtype=bool)
    prev = 0.0
    for t in range(length):
        x_t = numerics[t, 0] if n_num else 0.0
        p = _sigmoid_scalar(base[t] + u + cfg.feature_effect * x_t + cfg.persistence * prev)
        skip2[t] = chain_u[t] < p
        prev = float(skip2[t])

    skip1 = skip2[:half] & (rng.random(half) < cfg.skip1_gate)
    skip3 = skip2[:half] | (rng.random(half) < cfg.skip3_gate)

    aux_names = [n for n in schema.interaction_boolean
                 if n not in ("skip_1", "skip_2", "skip_3", "not_skipped")]
    aux_u = rng.random((half, len(aux_names))) if aux_names else np.zeros((half, 0))
    inter_numeric = rng.standard_normal((half, len(schema.interaction_numeric))) \
        if schema.interaction_numeric else np.zeros((half, 0))
    cat_u = rng.random((half, len(schema.interaction_categorical)))

    hour = float(rng.integers(0, 24))
    premium = 1.0 if rng.random() < PREMIUM_RATE else 0.0
    meta_numeric, meta_boolean = [], []
    for name in schema.session_meta_numeric:
        meta_numeric.append(hour if name == "hour_of_day" else float(rng.standard_normal()))
    for name in schema.session_meta_boolean:
        meta_boolean.append(premium if name == "premium" else float(rng.random() < 0.5))
    meta_cats = [int(rng.integers(0, card)) for _, card in schema.session_meta_categorical]
    meta = schema.encode_session_meta(meta_numeric, meta_boolean, meta_cats)

    inter_rows = []
    for t in range(half):
        s = bool(skip2[t])
        booleans = []
        aux_i = 0
        for name in schema.interaction_boolean:
            if name == "skip_1":
                booleans.append(float(skip1[t]))
            elif name == "skip_2":
                booleans.append(float(skip2[t]))
            elif name == "skip_3":
                booleans.append(float(skip3[t]))
            elif name == "not_skipped":
                booleans.append(float(not skip3[t]))
            else:
                on, off = INTERACTION_RATES.get(name, DEFAULT_INTERACTION_RATE)
                booleans.append(float(aux_u[t, aux_i] < (on if s else off)))
                aux_i += 1
        cat_vals = []
        for j, (name, card) in enumerate(schema.interaction_categorical):
            if name == "hist_user_behavior_reason_start" and card == len(REASON_PROBS[True]):
                probs = REASON_PROBS[s]
            else:
                probs = np.full(card, 1.0 / card)
            cat_vals.append(min(int(np.searchsorted(np.cumsum(probs), cat_u[t, j])), card - 1))
        numeric_vals = inter_numeric[t] + (1.0 if s else 0.0)
        inter_rows.append(schema.encode_interaction(numeric_vals, booleans, cat_vals))

    track_ids = [f"t{session_index}_{t + 1}" for t in range(length)]
    vectors = np.zeros((length, schema.track_width))
    vectors[:, :n_num] = numerics
    offset = n_num
    for (_, card), values in zip(schema.track_categorical, cats):
        vectors[np.arange(length), offset + values] = 1.0
        offset += card
    session = Session(
        session_id=f"s{session_index}",
        first_tracks=track_ids[:half],
        first_interactions=np.asarray(inter_rows),
        second_tracks=track_ids[half:],
        labels=skip2[half:].copy(),
        session_meta=meta,
        last_first_half_skip2=bool(skip2[half - 1]),
    )
    return session, track_ids, vectors


def generate_dataset(cfg, schema=None):
    """Deterministic labeled dataset for (seed, config); per-session RNG streams."""
    schema = schema or default_schema()
    sessions, all_ids, all_vectors = [], [], []
    for i in range(cfg.n_sessions):
        rng = _session_rng(cfg.seed, i)
        session, ids, vectors = generate_session(cfg, rng, schema, session_index=i)
        sessions.append(session)
        all_ids.extend(ids)
        all_vectors.extend(vectors)
    matrix = np.asarray(all_vectors) if all_vectors else np.zeros((0, schema.track_width))
    tracks = TrackTable.from_rows(schema, all_ids, matrix)
    return SessionDataset(sessions=sessions, tracks=tracks, schema=schema)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class GenReport:
    """Empirical marginals of a generated dataset and deviations from targets."""
    n_sessions: int
    length_freqs: np.ndarray            # lengths 10..20
    per_position_skip2: np.ndarray      # positions 1..20 (nan where unobserved)
    overall_skip2: float
    skip1_rate: float                   # measured on first halves
    skip3_rate: float
    not_skipped_rate: float
    max_length_dev: float
    max_position_dev: float
    overall_skip2_dev: float

    def serialize(self):
        lines = [f"n_sessions={self.n_sessions}",
                 "length_freqs=" + ",".join(f"{v:.6f}" for v in self.length_freqs),
                 "per_position_skip2=" + ",".join(f"{v:.6f}" for v in self.per_position_skip2),
                 f"overall_skip2={self.overall_skip2:.6f}",
                 f"skip1_rate={self.skip1_rate:.6f}",
                 f"skip3_rate={self.skip3_rate:.6f}",
                 f"not_skipped_rate={self.not_skipped_rate:.6f}",
                 f"max_length_dev={self.max_length_dev:.6f}",
                 f"max_position_dev={self.max_position_dev:.6f}",
                 f"overall_skip2_dev={self.overall_skip2_dev:.6f}"]
        return "\n".join(lines) + "\n"


def _skip2_matrix(dataset):
    """(values, mask) arrays [n_sessions, 20] of skip_2 over all positions."""
    schema = dataset.schema
    slot = schema.interaction_slot("skip_2")
    n = len(dataset.sessions)
    values = np.zeros((n, 20))
    mask = np.zeros((n, 20), dtype=bool)
    for i, s in enumerate(dataset.sessions):
        h = len(s.first_tracks)
        values[i, :h] = s.first_interactions[:, slot]
        mask[i, :h] = True
        if s.labels is not None:
            t = len(s.second_tracks)
            values[i, h:h + t] = s.labels
            mask[i, h:h + t] = True
    return values, mask


def report(dataset, cfg=None):
    """GenReport over a generated dataset (skip_1/3 rates use first halves,
    where those flags are observable)."""
    if not dataset.sessions:
        raise ContractError("report needs a nonempty dataset")
    cfg = cfg or GenConfig()
    schema = dataset.schema
    lengths = np.array([s.total_length for s in dataset.sessions])
    length_freqs = np.array([(lengths == n).mean() for n in range(10, 21)])

    values, mask = _skip2_matrix(dataset)
    counts = mask.sum(axis=0)
    with np.errstate(invalid="ignore"):
        per_position = np.where(counts > 0, (values * mask).sum(axis=0) / np.maximum(counts, 1),
                                np.nan)
    overall = float(values[mask].mean())

    first = np.vstack([s.first_interactions for s in dataset.sessions])
    def rate(name):
        return float(first[:, schema.interaction_slot(name)].mean()) \
            if name in schema.interaction_boolean else float("nan")

    targets = np.asarray(SKIP2_BY_POSITION) / 100.0
    observed = ~np.isnan(per_position)
    return GenReport(
        n_sessions=len(dataset.sessions),
        length_freqs=length_freqs,
        per_position_skip2=per_position,
        overall_skip2=overall,
        skip1_rate=rate("skip_1"),
        skip3_rate=rate("skip_3"),
        not_skipped_rate=rate("not_skipped"),
        max_length_dev=float(np.abs(length_freqs - np.asarray(cfg.length_probs)).max()),
        max_position_dev=float(np.abs(per_position[observed] - targets[observed]).max()),
        overall_skip2_dev=abs(overall - OVERALL_RATES["skip_2"]),
    )


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def simulate_position_rates(logits, cfg, n, seed, chunk=200000):
    """Vectorized per-position skip_2 rates under the generative law.

    Shares the distribution (not the RNG streams) of generate_session, so
    it serves as a fast inner loop for calibration.  Processes sessions in
    chunks to bound memory for large n.
    """
    rng = np.random.default_rng(seed)
    logits = np.asarray(logits, dtype=np.float64)
    hits = np.zeros(20)
    counts = np.zeros(20)
    remaining = n
    while remaining > 0:
        m = min(chunk, remaining)
        remaining -= m
        lengths = 10 + rng.choice(11, size=m, p=np.asarray(cfg.length_probs))
        u = rng.standard_normal(m) * cfg.user_propensity_std
        x = rng.standard_normal((m, 20))
        unif = rng.random((m, 20))
        prev = np.zeros(m)
        for t in range(20):
            active = lengths > t
            p = _sigmoid(logits[t] + u + cfg.feature_effect * x[:, t] + cfg.persistence * prev)
            s = (unif[:, t] < p) & active
            counts[t] += active.sum()
            hits[t] += s.sum()
            prev = s.astype(np.float64)
    return hits / counts, counts


def calibrate(cfg, tol=0.005, n_iter=30000, n_final=100000, max_iter=60, damping=0.7,
              warmup=6):
    """Adjust base position logits until generated per-position skip rates
    match the published profile within ``tol`` (absolute), verified on an
    ``n_final``-session sample.

    Warm-up iterations use cheap ``n_iter`` samples; afterwards every step
    both refines and checks on fresh ``n_final`` samples, so convergence is
    limited by the ``n_final`` Monte-Carlo noise rather than the warm-up
    noise.  With no propensity, feature effect, or persistence the exact
    answer is the logit of each target rate.
    """
    targets = np.asarray(SKIP2_BY_POSITION) / 100.0
    if cfg.user_propensity_std == 0 and cfg.feature_effect == 0 and cfg.persistence == 0:
        return replace(cfg, base_position_logits=tuple(_logit(targets)))

    logits = np.array(cfg.base_position_logits, dtype=np.float64)
    last_err = None
    passes = 0
    for k in range(max_iter):
        n = n_iter if k < warmup else n_final
        rates, _ = simulate_position_rates(logits, cfg, n, seed=cfg.seed * 7919 + 31 + k)
        err = targets - rates
        if k >= warmup and np.abs(err).max() < tol:
            passes += 1  # two consecutive independent samples guard against lucky draws
            if passes >= 2:
                return replace(cfg, base_position_logits=tuple(logits))
            continue
        passes = 0
        last_err = err
        # damped Newton step; the marginal rate moves ~p(1-p) ~= 0.25 per logit unit
        logits += damping * err / 0.25
    raise CalibrationError(f"did not reach |rate error| < {tol} in {max_iter} iterations; "
                           f"residuals {np.round(last_err, 4).tolist()}")


# ---------------------------------------------------------------------------
# Bayes-oracle predictor (knows the true generative parameters)
# ---------------------------------------------------------------------------

def bayes_predict(cfg, dataset, grid_points=121, grid_span=6.0):
    """Sequential pointwise-MAP predictions from the true generative law.

    Infers the user propensity posterior on a grid from the observed first
    half, then runs the exact skip-chain marginals forward from the last
    observed skip.  Expects the raw (unnormalized) dataset.  Returns one
    boolean array per session.
    """
    schema = dataset.schema
    base = np.asarray(cfg.base_position_logits)
    beta, gamma, sigma_u = cfg.feature_effect, cfg.persistence, cfg.user_propensity_std
    slot = schema.interaction_slot("skip_2")

    if sigma_u == 0:
        grid = np.zeros(1)
        prior = np.ones(1)
    else:
        grid = sigma_u * np.linspace(-grid_span, grid_span, grid_points)
        prior = np.exp(-0.5 * (grid / sigma_u) ** 2)
    prior = prior / prior.sum()

    out = []
    for s in dataset.sessions:
        h = len(s.first_tracks)
        x_first = np.array([dataset.tracks.vector(tid)[0] for tid in s.first_tracks])
        obs = s.first_interactions[:, slot]
        prev = np.concatenate([[0.0], obs[:-1]])
        z = base[:h, None] + grid[None, :] + beta * x_first[:, None] + gamma * prev[:, None]
        loglik = (obs[:, None] * _log_sigmoid(z)
                  + (1.0 - obs[:, None]) * _log_sigmoid(-z)).sum(axis=0)
        loglik -= loglik.max()
        post = prior * np.exp(loglik)
        post /= post.sum()

        m = np.full(grid.shape, obs[-1])
        preds = np.zeros(len(s.second_tracks), dtype=bool)
        for j, tid in enumerate(s.second_tracks):
            x = dataset.tracks.vector(tid)[0]
            z0 = base[h + j] + grid + beta * x
            p1 = _sigmoid(z0 + gamma)
            p0 = _sigmoid(z0)
            m = m * p1 + (1.0 - m) * p0
            preds[j] = float(post @ m) >= 0.5
        out.append(preds)
    return out
