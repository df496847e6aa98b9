"""Feature schema, session/track file ingestion, normalization, splits, batching.

Sessions are 10-20 tracks split into an observed first half of ceil(n/2)
tracks (interactions + metadata available) and a second half to predict
(track features only; skip labels held separately).  Files are
comma-delimited UTF-8 with a header, one row per (session, position).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DataError, IngestionError, SchemaError

MIN_SESSION_LENGTH = 10
MAX_SESSION_LENGTH = 20


def _encode_categorical(value, cardinality):
    """One-hot of width `cardinality`; out-of-range values use the last slot."""
    idx = value if 0 <= value < cardinality else cardinality - 1
    vec = np.zeros(cardinality)
    vec[idx] = 1.0
    return vec


@dataclass(frozen=True)
class FeatureSchema:
    """Names and kinds of every raw feature column.

    Continuous numerics get z-scored; booleans and one-hot blocks are left
    untouched by normalization.  Categorical values are one-hot encoded at
    the declared cardinality with the last index doubling as the fallback
    slot for unseen values.
    """

    track_numeric: tuple = ("duration", "release_year", "us_popularity_estimate",
                            "acousticness", "tempo", "loudness")
    track_categorical: tuple = (("mode", 2),)
    interaction_numeric: tuple = ()
    interaction_boolean: tuple = ("skip_1", "skip_2", "skip_3", "not_skipped",
                                  "seek_fwd", "seek_back", "short_pause", "long_pause")
    interaction_categorical: tuple = (("hist_user_behavior_reason_start", 4),)
    session_meta_numeric: tuple = ("hour_of_day",)
    session_meta_boolean: tuple = ("premium",)
    session_meta_categorical: tuple = (("context_type", 6),)

    def __post_init__(self):
        names = list(self.track_columns()) + list(self.interaction_columns()) \
            + list(self.session_meta_columns())
        if len(names) != len(set(names)):
            raise SchemaError("feature names must be unique across the schema")
        for name, card in tuple(self.track_categorical) + tuple(self.interaction_categorical) \
                + tuple(self.session_meta_categorical):
            if card < 2:
                raise SchemaError(f"categorical {name!r} needs cardinality >= 2, got {card}")

    # --- column orderings (raw file layout) ---

    def track_columns(self):
        return tuple(self.track_numeric) + tuple(name for name, _ in self.track_categorical)

    def interaction_columns(self):
        return tuple(self.interaction_numeric) + tuple(self.interaction_boolean) \
            + tuple(name for name, _ in self.interaction_categorical)

    def session_meta_columns(self):
        return tuple(self.session_meta_numeric) + tuple(self.session_meta_boolean) \
            + tuple(name for name, _ in self.session_meta_categorical)

    # --- encoded vector widths ---

    @property
    def track_width(self):
        return len(self.track_numeric) + sum(c for _, c in self.track_categorical)

    @property
    def interaction_width(self):
        return len(self.interaction_numeric) + len(self.interaction_boolean) \
            + sum(c for _, c in self.interaction_categorical)

    @property
    def session_meta_width(self):
        return len(self.session_meta_numeric) + len(self.session_meta_boolean) \
            + sum(c for _, c in self.session_meta_categorical)

    def interaction_slot(self, name):
        """Index of a numeric/boolean interaction feature in the encoded vector."""
        flat = tuple(self.interaction_numeric) + tuple(self.interaction_boolean)
        return flat.index(name)

    # --- encoding ---

    def encode_track(self, numerics, categoricals):
        parts = [np.asarray(numerics, dtype=np.float64)]
        for (_, card), value in zip(self.track_categorical, categoricals):
            parts.append(_encode_categorical(value, card))
        return np.concatenate(parts) if parts else np.zeros(0)

    def encode_interaction(self, numerics, booleans, categoricals):
        parts = [np.asarray(numerics, dtype=np.float64),
                 np.asarray(booleans, dtype=np.float64)]
        for (_, card), value in zip(self.interaction_categorical, categoricals):
            parts.append(_encode_categorical(value, card))
        return np.concatenate(parts)

    def encode_session_meta(self, numerics, booleans, categoricals):
        parts = [np.asarray(numerics, dtype=np.float64),
                 np.asarray(booleans, dtype=np.float64)]
        for (_, card), value in zip(self.session_meta_categorical, categoricals):
            parts.append(_encode_categorical(value, card))
        return np.concatenate(parts)

    # --- serialization ---

    def to_json(self):
        return json.dumps({
            "track_numeric": list(self.track_numeric),
            "track_categorical": [list(p) for p in self.track_categorical],
            "interaction_numeric": list(self.interaction_numeric),
            "interaction_boolean": list(self.interaction_boolean),
            "interaction_categorical": [list(p) for p in self.interaction_categorical],
            "session_meta_numeric": list(self.session_meta_numeric),
            "session_meta_boolean": list(self.session_meta_boolean),
            "session_meta_categorical": [list(p) for p in self.session_meta_categorical],
        }, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        known = {"track_numeric", "track_categorical", "interaction_numeric",
                 "interaction_boolean", "interaction_categorical",
                 "session_meta_numeric", "session_meta_boolean", "session_meta_categorical"}
        unknown = set(raw) - known
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        def pairs(key):
            return tuple((name, int(card)) for name, card in raw.get(key, []))
        return cls(
            track_numeric=tuple(raw.get("track_numeric", [])),
            track_categorical=pairs("track_categorical"),
            interaction_numeric=tuple(raw.get("interaction_numeric", [])),
            interaction_boolean=tuple(raw.get("interaction_boolean", [])),
            interaction_categorical=pairs("interaction_categorical"),
            session_meta_numeric=tuple(raw.get("session_meta_numeric", [])),
            session_meta_boolean=tuple(raw.get("session_meta_boolean", [])),
            session_meta_categorical=pairs("session_meta_categorical"),
        )

    def fingerprint(self):
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def default_schema():
    return FeatureSchema()


def load_schema(path):
    with open(path, "r", encoding="utf-8") as fh:
        return FeatureSchema.from_json(fh.read())


@dataclass
class TrackTable:
    """track_id -> encoded feature vector (raw values, not normalized)."""
    schema: FeatureSchema
    ids: list = field(default_factory=list)
    features: np.ndarray = None  # [n_tracks, track_width]
    _index: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.features is None:
            self.features = np.zeros((0, self.schema.track_width))
        self._index = {tid: i for i, tid in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, track_id):
        return track_id in self._index

    def vector(self, track_id):
        return self.features[self._index[track_id]]

    def add(self, track_id, vector):
        if track_id in self._index:
            raise DataError(f"duplicate track_id {track_id!r}")
        self._index[track_id] = len(self.ids)
        self.ids.append(track_id)
        self.features = np.vstack([self.features, vector[None, :]]) \
            if len(self.ids) > 1 else vector[None, :].copy()

    @classmethod
    def from_rows(cls, schema, ids, matrix):
        if len(set(ids)) != len(ids):
            raise DataError("duplicate track ids")
        return cls(schema=schema, ids=list(ids), features=np.asarray(matrix, dtype=np.float64))


@dataclass
class Session:
    """One listening session: observed first half plus second half to predict."""
    session_id: str
    first_tracks: list                 # track ids, length ceil(n/2)
    first_interactions: np.ndarray     # [H, interaction_width], encoded
    second_tracks: list                # track ids, length floor(n/2)
    labels: np.ndarray | None          # bool [T], None in prediction mode
    session_meta: np.ndarray           # [session_meta_width], encoded
    last_first_half_skip2: bool

    @property
    def total_length(self):
        return len(self.first_tracks) + len(self.second_tracks)

    def validate(self):
        n = self.total_length
        if not (MIN_SESSION_LENGTH <= n <= MAX_SESSION_LENGTH):
            raise ContractError(f"session {self.session_id}: length {n} outside "
                                f"[{MIN_SESSION_LENGTH}, {MAX_SESSION_LENGTH}]")
        if len(self.first_tracks) != math.ceil(n / 2):
            raise ContractError(f"session {self.session_id}: first half must hold ceil(n/2) tracks")
        if self.first_interactions.shape[0] != len(self.first_tracks):
            raise ContractError(f"session {self.session_id}: interaction rows misaligned")
        if self.labels is not None and len(self.labels) != len(self.second_tracks):
            raise ContractError(f"session {self.session_id}: labels misaligned with second half")


@dataclass
class SessionDataset:
    """Sessions plus the track table and schema they refer to."""
    sessions: list
    tracks: TrackTable
    schema: FeatureSchema

    @property
    def labeled(self):
        return all(s.labels is not None for s in self.sessions)


def check_dataset(dataset):
    """Validate a SessionDataset; raises on schema drift or broken invariants."""
    if not isinstance(dataset, SessionDataset):
        raise ContractError("expected a SessionDataset")
    if dataset.tracks.schema.fingerprint() != dataset.schema.fingerprint():
        raise SchemaError("track table schema does not match dataset schema")
    width = dataset.schema.interaction_width
    meta_width = dataset.schema.session_meta_width
    for s in dataset.sessions:
        s.validate()
        if s.first_interactions.shape[1] != width:
            raise SchemaError(f"session {s.session_id}: interaction width "
                              f"{s.first_interactions.shape[1]} != schema {width}")
        if s.session_meta.shape[0] != meta_width:
            raise SchemaError(f"session {s.session_id}: metadata width mismatch")
        for tid in s.first_tracks + s.second_tracks:
            if tid not in dataset.tracks:
                raise DataError(f"session {s.session_id}: unknown track {tid!r}")
    return dataset


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------

def _parse_float(cell, line_no, column):
    try:
        return float(cell)
    except ValueError:
        raise IngestionError(f"line {line_no}: non-numeric value {cell!r} in column {column!r}") \
            from None


def _parse_bool(cell, line_no, column):
    if cell in ("0", "1"):
        return float(cell)
    if cell.lower() in ("true", "false"):
        return 1.0 if cell.lower() == "true" else 0.0
    raise IngestionError(f"line {line_no}: non-boolean value {cell!r} in column {column!r}")


def _parse_cat(cell, line_no, column):
    try:
        return int(cell)
    except ValueError:
        raise IngestionError(f"line {line_no}: non-integer category {cell!r} "
                             f"in column {column!r}") from None


def _check_header(header, expected, path):
    if list(header) != list(expected):
        raise IngestionError(f"{path}: header {header} does not match expected {list(expected)}")


def _open_data_file(path):
    try:
        return open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from None


def load_tracks(path, schema):
    """Read the tracks file into a TrackTable; one-hot encodes categoricals."""
    expected = ("track_id",) + schema.track_columns()
    ids, rows = [], []
    n_num = len(schema.track_numeric)
    with _open_data_file(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file, expected a header") from None
        _check_header(header, expected, path)
        seen = set()
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise IngestionError(f"line {line_no}: expected {len(expected)} cells, "
                                     f"got {len(row)}")
            tid = row[0]
            if tid in seen:
                raise IngestionError(f"line {line_no}: duplicate track_id {tid!r}")
            seen.add(tid)
            numerics = [_parse_float(c, line_no, n)
                        for c, n in zip(row[1:1 + n_num], schema.track_numeric)]
            cats = [_parse_cat(c, line_no, name)
                    for c, (name, _) in zip(row[1 + n_num:], schema.track_categorical)]
            ids.append(tid)
            rows.append(schema.encode_track(numerics, cats))
    matrix = np.asarray(rows) if rows else np.zeros((0, schema.track_width))
    return TrackTable.from_rows(schema, ids, matrix)


def session_file_columns(schema):
    return ("session_id", "position", "track_id") + schema.interaction_columns() \
        + schema.session_meta_columns()


def _parse_interaction(cells, line_no, schema):
    n_num = len(schema.interaction_numeric)
    n_bool = len(schema.interaction_boolean)
    numerics = [_parse_float(c, line_no, n)
                for c, n in zip(cells[:n_num], schema.interaction_numeric)]
    booleans = [_parse_bool(c, line_no, n)
                for c, n in zip(cells[n_num:n_num + n_bool], schema.interaction_boolean)]
    cats = [_parse_cat(c, line_no, name)
            for c, (name, _) in zip(cells[n_num + n_bool:], schema.interaction_categorical)]
    return schema.encode_interaction(numerics, booleans, cats)


def _parse_meta(cells, line_no, schema):
    n_num = len(schema.session_meta_numeric)
    n_bool = len(schema.session_meta_boolean)
    numerics = [_parse_float(c, line_no, n)
                for c, n in zip(cells[:n_num], schema.session_meta_numeric)]
    booleans = [_parse_bool(c, line_no, n)
                for c, n in zip(cells[n_num:n_num + n_bool], schema.session_meta_boolean)]
    cats = [_parse_cat(c, line_no, name)
            for c, (name, _) in zip(cells[n_num + n_bool:], schema.session_meta_categorical)]
    return schema.encode_session_meta(numerics, booleans, cats)


def load_sessions(path, tracks, schema, mode="labeled"):
    """Read a sessions file; splits each session so the first half holds ceil(n/2).

    In labeled mode second-half rows must carry the skip_2 label (other
    interaction cells are ignored); in prediction mode any interaction
    value on a second-half row is a leakage error.
    """
    if mode not in ("labeled", "prediction"):
        raise ContractError(f"mode must be 'labeled' or 'prediction', got {mode!r}")
    expected = session_file_columns(schema)
    inter_cols = schema.interaction_columns()
    n_inter = len(inter_cols)
    skip2_col = inter_cols.index("skip_2") if "skip_2" in inter_cols else None
    if skip2_col is None and mode == "labeled":
        raise SchemaError("labeled mode needs a skip_2 interaction column in the schema")

    groups = []  # (session_id, [(line_no, position, track_id, inter_cells, meta_cells)])
    with _open_data_file(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file, expected a header") from None
        _check_header(header, expected, path)
        current_id, seen_ids = None, set()
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise IngestionError(f"line {line_no}: expected {len(expected)} cells, "
                                     f"got {len(row)}")
            sid = row[0]
            if sid != current_id:
                if sid in seen_ids:
                    raise IngestionError(f"line {line_no}: session {sid!r} rows are not grouped")
                seen_ids.add(sid)
                current_id = sid
                groups.append((sid, []))
            try:
                position = int(row[1])
            except ValueError:
                raise IngestionError(f"line {line_no}: non-integer position {row[1]!r}") from None
            groups[-1][1].append((line_no, position, row[2],
                                  row[3:3 + n_inter], row[3 + n_inter:]))

    sessions = []
    for sid, rows in groups:
        n = len(rows)
        first_line = rows[0][0]
        if not (MIN_SESSION_LENGTH <= n <= MAX_SESSION_LENGTH):
            raise IngestionError(f"line {first_line}: session {sid!r} has length {n}, "
                                 f"outside [{MIN_SESSION_LENGTH}, {MAX_SESSION_LENGTH}]")
        for i, (line_no, position, _, _, _) in enumerate(rows, start=1):
            if position != i:
                raise IngestionError(f"line {line_no}: session {sid!r} positions must be "
                                     f"1..{n} without gaps, got {position} at row {i}")
        half = math.ceil(n / 2)
        meta_cells = rows[0][4]
        meta = _parse_meta(meta_cells, rows[0][0], schema)
        for line_no, _, _, _, cells in rows[1:]:
            if cells != meta_cells:
                raise IngestionError(f"line {line_no}: session metadata differs between rows "
                                     f"of session {sid!r}")

        first_tracks, inter_rows = [], []
        for line_no, _, tid, cells, _ in rows[:half]:
            if tid not in tracks:
                raise IngestionError(f"line {line_no}: unknown track_id {tid!r}")
            if any(c == "" for c in cells):
                raise IngestionError(f"line {line_no}: missing interaction value in "
                                     f"first half of session {sid!r}")
            first_tracks.append(tid)
            inter_rows.append(_parse_interaction(cells, line_no, schema))

        second_tracks, labels = [], []
        for line_no, _, tid, cells, _ in rows[half:]:
            if tid not in tracks:
                raise IngestionError(f"line {line_no}: unknown track_id {tid!r}")
            second_tracks.append(tid)
            if mode == "prediction":
                if any(c != "" for c in cells):
                    raise IngestionError(f"line {line_no}: interaction values present in the "
                                         f"second half of session {sid!r} (label leakage)")
            else:
                label_cell = cells[skip2_col]
                if label_cell == "":
                    raise IngestionError(f"line {line_no}: missing skip_2 label in "
                                         f"second half of session {sid!r}")
                labels.append(bool(_parse_bool(label_cell, line_no, "skip_2")))

        inter = np.asarray(inter_rows)
        last_skip2 = bool(inter[-1, schema.interaction_slot("skip_2")]) \
            if skip2_col is not None else False
        session = Session(
            session_id=sid,
            first_tracks=first_tracks,
            first_interactions=inter,
            second_tracks=second_tracks,
            labels=np.asarray(labels, dtype=bool) if mode == "labeled" else None,
            session_meta=meta,
            last_first_half_skip2=last_skip2,
        )
        session.validate()
        sessions.append(session)
    return sessions


# ---------------------------------------------------------------------------
# file writing (used by the generator and the round-trip tests)
# ---------------------------------------------------------------------------

def _format_value(v, kind):
    if kind == "bool":
        return "1" if v >= 0.5 else "0"
    if kind == "cat":
        return str(int(v))
    return repr(float(v))


def _decode_group(vec, numeric, boolean, categorical):
    """Encoded vector back to raw cell strings (argmax for one-hot blocks)."""
    cells = []
    i = 0
    for _ in numeric:
        cells.append(_format_value(vec[i], "num"))
        i += 1
    for _ in boolean:
        cells.append(_format_value(vec[i], "bool"))
        i += 1
    for _, card in categorical:
        cells.append(str(int(np.argmax(vec[i:i + card]))))
        i += card
    return cells


def write_tracks(path, tracks, schema):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("track_id",) + schema.track_columns())
        for tid in tracks.ids:
            vec = tracks.vector(tid)
            writer.writerow([tid] + _decode_group(vec, schema.track_numeric, (),
                                                  schema.track_categorical))


def write_sessions(path, sessions, schema, mode="labeled"):
    """Write the sessions file; second-half rows carry only the skip_2 label
    (labeled mode) or no interaction values at all (prediction mode)."""
    inter_cols = schema.interaction_columns()
    skip2_col = inter_cols.index("skip_2") if "skip_2" in inter_cols else None
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(session_file_columns(schema))
        for s in sessions:
            meta_cells = _decode_group(s.session_meta, schema.session_meta_numeric,
                                       schema.session_meta_boolean,
                                       schema.session_meta_categorical)
            for i, tid in enumerate(s.first_tracks):
                inter_cells = _decode_group(s.first_interactions[i],
                                            schema.interaction_numeric,
                                            schema.interaction_boolean,
                                            schema.interaction_categorical)
                writer.writerow([s.session_id, i + 1, tid] + inter_cells + meta_cells)
            for j, tid in enumerate(s.second_tracks):
                cells = [""] * len(inter_cols)
                if mode == "labeled":
                    if s.labels is None:
                        raise ContractError(f"session {s.session_id} has no labels to write")
                    cells[skip2_col] = "1" if s.labels[j] else "0"
                writer.writerow([s.session_id, len(s.first_tracks) + j + 1, tid]
                                + cells + meta_cells)


def write_predictions(path, session_ids, predictions):
    """One line per session: `session_id,<T chars of 0/1>` in second-half order."""
    with open(path, "w", encoding="utf-8") as fh:
        for sid, pred in zip(session_ids, predictions):
            bits = "".join("1" if p else "0" for p in pred)
            fh.write(f"{sid},{bits}\n")


def read_predictions(path):
    out = {}
    with _open_data_file(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            sid, _, bits = line.partition(",")
            if not bits or any(ch not in "01" for ch in bits):
                raise IngestionError(f"line {line_no}: malformed prediction line")
            if sid in out:
                raise IngestionError(f"line {line_no}: duplicate session {sid!r}")
            out[sid] = np.array([ch == "1" for ch in bits])
    return out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

STD_FLOOR = 1e-8


@dataclass
class NormalizationStats:
    """Per-feature z-score statistics, fitted on the training split only."""
    track: dict      # name -> (mean, std)
    interaction: dict
    session_meta: dict

    def to_json_dict(self):
        return {"track": {k: list(v) for k, v in self.track.items()},
                "interaction": {k: list(v) for k, v in self.interaction.items()},
                "session_meta": {k: list(v) for k, v in self.session_meta.items()}}

    @classmethod
    def from_json_dict(cls, raw):
        return cls(track={k: tuple(v) for k, v in raw["track"].items()},
                   interaction={k: tuple(v) for k, v in raw["interaction"].items()},
                   session_meta={k: tuple(v) for k, v in raw["session_meta"].items()})


def _column_stats(values):
    mean = float(np.mean(values))
    std = float(np.std(values))
    return mean, max(std, STD_FLOOR)


def fit_normalization(sessions, tracks, schema):
    """z-score stats for continuous numerics; booleans and one-hots untouched.

    Track stats are taken over track occurrences in the given sessions
    (both halves), interaction stats over first-half rows, metadata stats
    over sessions.
    """
    if not sessions:
        raise ContractError("fit_normalization needs a nonempty training split")
    track_stats = {}
    if schema.track_numeric:
        rows = [tracks.vector(tid)
                for s in sessions for tid in s.first_tracks + s.second_tracks]
        occ = np.asarray(rows)
        for i, name in enumerate(schema.track_numeric):
            track_stats[name] = _column_stats(occ[:, i])
    inter_stats = {}
    if schema.interaction_numeric:
        occ = np.vstack([s.first_interactions for s in sessions])
        for i, name in enumerate(schema.interaction_numeric):
            inter_stats[name] = _column_stats(occ[:, i])
    meta_stats = {}
    if schema.session_meta_numeric:
        occ = np.vstack([s.session_meta[None, :] for s in sessions])
        for i, name in enumerate(schema.session_meta_numeric):
            meta_stats[name] = _column_stats(occ[:, i])
    return NormalizationStats(track=track_stats, interaction=inter_stats,
                              session_meta=meta_stats)


def apply_normalization(sessions, tracks, stats, schema):
    """Pure transform: returns normalized copies of sessions and track table."""
    features = tracks.features.copy()
    for i, name in enumerate(schema.track_numeric):
        mean, std = stats.track[name]
        features[:, i] = (features[:, i] - mean) / std
    new_tracks = TrackTable(schema=schema, ids=list(tracks.ids), features=features)

    new_sessions = []
    for s in sessions:
        inter = s.first_interactions.copy()
        for i, name in enumerate(schema.interaction_numeric):
            mean, std = stats.interaction[name]
            inter[:, i] = (inter[:, i] - mean) / std
        meta = s.session_meta.copy()
        for i, name in enumerate(schema.session_meta_numeric):
            mean, std = stats.session_meta[name]
            meta[i] = (meta[i] - mean) / std
        new_sessions.append(replace(s, first_interactions=inter, session_meta=meta))
    return new_sessions, new_tracks


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------

def split_sessions(sessions, fractions, seed):
    """Deterministic disjoint (train, validation, test) split by session."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise ContractError(f"fractions must be three non-negative values summing to <= 1, "
                            f"got {fractions}")
    order = np.random.default_rng(seed).permutation(len(sessions))
    n = len(sessions)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = min(int(round(fractions[2] * n)), n - n_train - n_val)
    train = [sessions[i] for i in order[:n_train]]
    val = [sessions[i] for i in order[n_train:n_train + n_val]]
    test = [sessions[i] for i in order[n_train + n_val:n_train + n_val + n_test]]
    return train, val, test


@dataclass
class Batch:
    """Padded, masked group of sessions ready for one forward/backward pass.

    Feature arrays are time-major [T, batch, width]; masks are float 0/1
    [T, batch]; padded cells are zero.
    """
    session_ids: list
    first_tracks: np.ndarray
    first_interactions: np.ndarray  # session metadata already concatenated per step
    second_tracks: np.ndarray
    first_mask: np.ndarray
    second_mask: np.ndarray
    labels: np.ndarray | None       # float 0/1 [T2, batch], None in prediction mode
    last_first_half_skip2: np.ndarray
    first_lengths: np.ndarray
    second_lengths: np.ndarray

    @property
    def size(self):
        return len(self.session_ids)


def make_batch(sessions, tracks, schema, pad_first_to=None, pad_second_to=None):
    """Assemble one padded Batch from already-normalized sessions."""
    if not sessions:
        raise ContractError("make_batch needs at least one session")
    b = len(sessions)
    h_lens = np.array([len(s.first_tracks) for s in sessions])
    t_lens = np.array([len(s.second_tracks) for s in sessions])
    t1 = max(int(h_lens.max()), pad_first_to or 0)
    t2 = max(int(t_lens.max()), pad_second_to or 0)
    dt = schema.track_width
    di = schema.interaction_width + schema.session_meta_width

    first_tracks = np.zeros((t1, b, dt))
    first_inter = np.zeros((t1, b, di))
    second_tracks = np.zeros((t2, b, dt))
    first_mask = np.zeros((t1, b))
    second_mask = np.zeros((t2, b))
    labeled = all(s.labels is not None for s in sessions)
    labels = np.zeros((t2, b)) if labeled else None
    last_skip = np.zeros(b)

    for j, s in enumerate(sessions):
        for i, tid in enumerate(s.first_tracks):
            first_tracks[i, j] = tracks.vector(tid)
            first_inter[i, j] = np.concatenate([s.first_interactions[i], s.session_meta])
            first_mask[i, j] = 1.0
        for i, tid in enumerate(s.second_tracks):
            second_tracks[i, j] = tracks.vector(tid)
            second_mask[i, j] = 1.0
            if labeled:
                labels[i, j] = float(s.labels[i])
        last_skip[j] = float(s.last_first_half_skip2)

    return Batch(
        session_ids=[s.session_id for s in sessions],
        first_tracks=first_tracks,
        first_interactions=first_inter,
        second_tracks=second_tracks,
        first_mask=first_mask,
        second_mask=second_mask,
        labels=labels,
        last_first_half_skip2=last_skip,
        first_lengths=h_lens,
        second_lengths=t_lens,
    )


def make_batches(sessions, tracks, schema, batch_size, seed=None):
    """Chunk sessions into padded batches; shuffles deterministically when a
    seed is given, otherwise preserves order."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    ordered = list(sessions)
    if seed is not None:
        perm = np.random.default_rng(seed).permutation(len(ordered))
        ordered = [ordered[i] for i in perm]
    return [make_batch(ordered[i:i + batch_size], tracks, schema)
            for i in range(0, len(ordered), batch_size)]
