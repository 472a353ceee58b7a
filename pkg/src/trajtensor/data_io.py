"""Event streams: loading, writing, rescaling, splitting and synthetic data.

Files hold one observed entry per record with 1-based object indices, either
as JSON Lines (``{"t": 0.1, "idx": [1, 2], "y": 0.5}``) or as CSV with header
``t,i1,...,iM,y``. The format is picked from the file extension.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path

import numpy as np

from .engine import Batch
from .errors import DimensionMismatch, ParseError


@dataclass(frozen=True)
class Event:
    t: float
    idx: tuple
    y: float


@dataclass
class EventStream:
    """Time-sorted sequence of events."""

    events: list = field(default_factory=list)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    @property
    def n_modes(self):
        return len(self.events[0].idx) if self.events else None

    def timestamps(self):
        return np.array([e.t for e in self.events])

    def batches(self):
        """Yield one ``Batch`` per distinct timestamp, in time order."""
        for t, grp in groupby(self.events, key=lambda e: e.t):
            yield Batch(t, [(e.idx, e.y) for e in grp])

    def max_index(self):
        if not self.events:
            return ()
        return tuple(int(v) for v in np.max([e.idx for e in self.events], axis=0))


def _sorted(events):
    return EventStream(sorted(events, key=lambda e: e.t))


def _check_record(t, idx, y, line, col, arity, mode_dims):
    if not math.isfinite(t):
        raise ParseError(line, col, f"timestamp {t!r} is not finite")
    if not math.isfinite(y):
        raise ParseError(line, col, f"value {y!r} is not finite")
    if arity is not None and len(idx) != arity:
        raise DimensionMismatch(f"line {line}: index has {len(idx)} modes, expected {arity}")
    for m, j in enumerate(idx):
        if j < 1:
            raise ParseError(line, col, f"index {j} in mode {m + 1} is not 1-based")
        if mode_dims is not None and j > mode_dims[m]:
            raise ParseError(line, col, f"index {j} in mode {m + 1} exceeds dimension {mode_dims[m]}")


def _as_int(v, line, col):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v):
        raise ParseError(line, col, f"index {v!r} is not an integer")
    return int(v)


def _load_jsonl(fh, arity, mode_dims):
    events = []
    for line_no, raw in enumerate(fh, start=1):
        text = raw.strip()
        if not text:
            continue
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, exc.colno, exc.msg) from None
        if not isinstance(rec, dict):
            raise ParseError(line_no, 1, "record is not a JSON object")
        for key in ("t", "idx", "y"):
            if key not in rec:
                raise ParseError(line_no, 1, f"missing field {key!r}")
        col = raw.find('"idx"') + 1 or 1
        if not isinstance(rec["idx"], list) or not rec["idx"]:
            raise ParseError(line_no, col, "idx must be a non-empty list")
        idx = tuple(_as_int(v, line_no, col) for v in rec["idx"])
        try:
            t, y = float(rec["t"]), float(rec["y"])
        except (TypeError, ValueError):
            raise ParseError(line_no, 1, "t and y must be numbers") from None
        arity = arity if arity is not None else len(idx)
        _check_record(t, idx, y, line_no, col, arity, mode_dims)
        events.append(Event(t, idx, y))
    return events


def _load_csv(fh, arity, mode_dims):
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        return []
    header = [h.strip() for h in header]
    n = len(header) - 2
    expected = ["t"] + [f"i{m + 1}" for m in range(n)] + ["y"]
    if n < 1 or header != expected:
        raise ParseError(1, 1, f"header must be {','.join(expected) if n >= 1 else 't,i1,...,iM,y'}")
    if arity is not None and n != arity:
        raise DimensionMismatch(f"header declares {n} modes, expected {arity}")
    events = []
    for row in reader:
        line_no = reader.line_num
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != n + 2:
            raise DimensionMismatch(f"line {line_no}: {len(row)} fields, expected {n + 2}")
        cols = np.cumsum([1] + [len(f) + 1 for f in row[:-1]])
        vals = []
        for k, f in enumerate(row):
            try:
                vals.append(float(f))
            except ValueError:
                raise ParseError(line_no, int(cols[k]), f"{f.strip()!r} is not a number") from None
        idx = tuple(_as_int(v, line_no, int(cols[1 + m])) for m, v in enumerate(vals[1:-1]))
        _check_record(vals[0], idx, vals[-1], line_no, int(cols[1]), n, mode_dims)
        events.append(Event(vals[0], idx, vals[-1]))
    return events


def load_events(path, n_modes=None, mode_dims=None) -> EventStream:
    """Load a ``.jsonl`` or ``.csv`` event file, sorted by time (stable).

    Raises
    ------
    ParseError
        Malformed record, with 1-based line and column.
    DimensionMismatch
        A record's index arity differs from ``n_modes`` / ``mode_dims`` or
        from the first record.
    """
    path = Path(path)
    if mode_dims is not None:
        mode_dims = tuple(mode_dims)
        n_modes = len(mode_dims)
    suffix = path.suffix.lower()
    with open(path, newline="", encoding="utf-8") as fh:
        if suffix == ".jsonl":
            events = _load_jsonl(fh, n_modes, mode_dims)
        elif suffix == ".csv":
            events = _load_csv(fh, n_modes, mode_dims)
        else:
            raise ValueError(f"unknown event file extension {path.suffix!r} (use .jsonl or .csv)")
    return _sorted(events)


def write_events(stream: EventStream, path) -> None:
    """Write events with round-trip exact floats; format by extension."""
    path = Path(path)
    suffix = path.suffix.lower()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if suffix == ".jsonl":
            for e in stream:
                fh.write(json.dumps({"t": e.t, "idx": list(e.idx), "y": e.y}) + "\n")
        elif suffix == ".csv":
            M = stream.n_modes or 0
            fh.write(",".join(["t"] + [f"i{m + 1}" for m in range(M)] + ["y"]) + "\n")
            for e in stream:
                fh.write(",".join([repr(e.t)] + [str(j) for j in e.idx] + [repr(e.y)]) + "\n")
        else:
            raise ValueError(f"unknown event file extension {path.suffix!r} (use .jsonl or .csv)")


def rescale_timestamps(stream: EventStream) -> EventStream:
    """Affinely map timestamps onto [0, 1]; a single distinct time maps to 0."""
    if not stream.events:
        return EventStream([])
    ts = stream.timestamps()
    lo, hi = ts.min(), ts.max()
    if hi == lo:
        warnings.warn("all timestamps are equal; rescaling maps them to 0", stacklevel=2)
        return EventStream([Event(0.0, e.idx, e.y) for e in stream])
    span = hi - lo
    return EventStream([Event(float((e.t - lo) / span), e.idx, e.y) for e in stream])


def split_train_test(stream: EventStream, fraction: float, seed: int):
    """Uniform random split of events; both parts stay time-sorted.

    The training size is ``N * fraction`` rounded to nearest, ties down.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"split fraction must lie in (0, 1], got {fraction}")
    N = len(stream)
    n_train = min(N, math.ceil(N * fraction - 0.5))
    perm = np.random.default_rng(seed).permutation(N)
    train = np.zeros(N, dtype=bool)
    train[perm[:n_train]] = True
    ev = stream.events
    return (EventStream([e for e, k in zip(ev, train) if k]),
            EventStream([e for e, k in zip(ev, train) if not k]))


# -- synthetic study ----------------------------------------------------------

def _u11(t):
    return -np.sin(2 * np.pi * t) ** 3


def _u12(t):
    return (1 - np.sin(np.pi * t / 2) ** 3) * np.sin(3 * np.pi * t) ** 3


def _u21(t):
    return np.sin(2 * np.pi * t)


def _u22(t):
    return -np.cos(3 * np.pi * t) ** 3 * np.sin(3 * np.pi * t) * np.sin(2 * np.pi * t)


SYNTHETIC_TRUTH = {(1, 1): _u11, (1, 2): _u12, (2, 1): _u21, (2, 2): _u22}
SYNTHETIC_DIMS = (2, 2)


def synthetic_value(idx, t):
    """Noiseless synthetic entry value ``u^1_i(t) * u^2_j(t)``."""
    i, j = idx
    return SYNTHETIC_TRUTH[(1, i)](t) * SYNTHETIC_TRUTH[(2, j)](t)


def generate_synthetic(seed, n_timestamps=500, entries_per_timestamp=2, noise_scale=0.05):
    """Two-mode 2x2 stream with known scalar trajectories.

    Timestamps are uniform on [0, 1]; at each, ``entries_per_timestamp``
    distinct entries are drawn from the four cells and observed with
    Gaussian noise of standard deviation ``noise_scale``.

    Returns
    -------
    (EventStream, dict)
        The stream and the ground-truth trajectory functions keyed by
        ``(mode, object)``.
    """
    if not 1 <= entries_per_timestamp <= 4:
        raise ValueError("entries_per_timestamp must be between 1 and 4")
    rng = np.random.default_rng(seed)
    ts = np.sort(rng.uniform(0.0, 1.0, n_timestamps))
    events = []
    for t in ts:
        cells = rng.choice(4, size=entries_per_timestamp, replace=False)
        for c in sorted(cells):
            idx = (int(c) // 2 + 1, int(c) % 2 + 1)
            y = synthetic_value(idx, t) + noise_scale * rng.standard_normal()
            events.append(Event(float(t), idx, float(y)))
    return EventStream(events), dict(SYNTHETIC_TRUTH)
