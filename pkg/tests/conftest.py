import math

import numpy as np
import pytest

from skipnet.data import FeatureSchema, Session, SessionDataset, TrackTable


@pytest.fixture
def tiny_schema():
    """Minimal schema: 2 track numerics, 2 interaction booleans, 1 meta numeric."""
    return FeatureSchema(
        track_numeric=("f0", "f1"),
        track_categorical=(),
        interaction_numeric=(),
        interaction_boolean=("skip_1", "skip_2"),
        interaction_categorical=(),
        session_meta_numeric=("hour_of_day",),
        session_meta_boolean=(),
        session_meta_categorical=(),
    )


def random_sessions(rng, n, schema, lengths=None):
    """Random labeled sessions + track table, independent of the generator."""
    sessions = []
    ids, vectors = [], []
    for i in range(n):
        length = int(lengths[i]) if lengths is not None else int(rng.integers(10, 21))
        half = math.ceil(length / 2)
        track_ids = [f"r{i}_{t}" for t in range(length)]
        for tid in track_ids:
            ids.append(tid)
            vectors.append(rng.standard_normal(schema.track_width))
        inter = np.zeros((half, schema.interaction_width))
        n_num = len(schema.interaction_numeric)
        inter[:, :n_num] = rng.standard_normal((half, n_num))
        inter[:, n_num:n_num + len(schema.interaction_boolean)] = rng.integers(
            0, 2, size=(half, len(schema.interaction_boolean)))
        offset = n_num + len(schema.interaction_boolean)
        for _, card in schema.interaction_categorical:
            idx = rng.integers(0, card, size=half)
            inter[np.arange(half), offset + idx] = 1.0
            offset += card
        meta = np.zeros(schema.session_meta_width)
        m_num = len(schema.session_meta_numeric)
        meta[:m_num] = rng.standard_normal(m_num)
        meta[m_num:m_num + len(schema.session_meta_boolean)] = rng.integers(
            0, 2, size=len(schema.session_meta_boolean))
        m_off = m_num + len(schema.session_meta_boolean)
        for _, card in schema.session_meta_categorical:
            meta[m_off + int(rng.integers(0, card))] = 1.0
            m_off += card
        labels = rng.integers(0, 2, size=length - half).astype(bool)
        skip2_slot = schema.interaction_slot("skip_2")
        sessions.append(Session(
            session_id=f"s{i}",
            first_tracks=track_ids[:half],
            first_interactions=inter,
            second_tracks=track_ids[half:],
            labels=labels,
            session_meta=meta,
            last_first_half_skip2=bool(inter[-1, skip2_slot]),
        ))
    tracks = TrackTable.from_rows(schema, ids, np.asarray(vectors))
    return SessionDataset(sessions=sessions, tracks=tracks, schema=schema)


@pytest.fixture
def random_dataset(tiny_schema):
    rng = np.random.default_rng(1234)
    return random_sessions(rng, 6, tiny_schema)
