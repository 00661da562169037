"""Macro paths, sojourn extraction, sufficient statistics and file I/O.

The CSV path schema has one row per event::

    path_id,event_time,event_type,to_state

with ``event_type`` either ``jump`` (``to_state`` is the new macrostate) or
``censor`` (``to_state`` empty).  Start time and initial macrostate are not
part of the file; they are arguments of :func:`read_paths`.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

HEADER = ("path_id", "event_time", "event_type", "to_state")


class PathFileError(ValueError):
    """Malformed path file; the message carries the offending line number."""


@dataclass(frozen=True)
class MacroPath:
    """Observed macrostate trajectory.

    ``jumps`` is a tuple of ``(time, new_state)``; ``censor_time`` is None
    when the path ends with its last jump (e.g. absorption).
    """

    path_id: str
    jumps: tuple = ()
    censor_time: float = None
    initial_state: int = 1
    start_time: float = 0.0

    def __post_init__(self):
        jumps = tuple((float(t), int(s)) for t, s in self.jumps)
        object.__setattr__(self, "jumps", jumps)
        prev_t, prev_s = float(self.start_time), int(self.initial_state)
        for t, s in jumps:
            if not t > prev_t:
                raise ValueError(f"path {self.path_id}: jump times must increase")
            if s == prev_s:
                raise ValueError(f"path {self.path_id}: self-transition at {t}")
            prev_t, prev_s = t, s
        if self.censor_time is not None:
            c = float(self.censor_time)
            if c < prev_t or (jumps and c == prev_t):
                raise ValueError(f"path {self.path_id}: censor time before last jump")
            object.__setattr__(self, "censor_time", c)

    @property
    def states(self):
        return [self.initial_state] + [s for _, s in self.jumps]

    @property
    def times(self):
        return [self.start_time] + [t for t, _ in self.jumps]

    @property
    def end_time(self):
        if self.censor_time is not None:
            return self.censor_time
        return self.jumps[-1][0] if self.jumps else self.start_time

    def state_at(self, t):
        state = self.initial_state
        for tj, s in self.jumps:
            if tj > t:
                break
            state = s
        return state


@dataclass(frozen=True)
class SojournRecord:
    """One visit to a macrostate; ``destination`` is None if censored."""

    path_id: str
    state: int
    entry_time: float
    exit_time: float
    destination: int = None

    @property
    def censored(self):
        return self.destination is None

    @property
    def duration(self):
        return self.exit_time - self.entry_time


def extract_sojourns(paths, absorbing=()):
    """Group all visits to non-absorbing macrostates by macrostate.

    Every jump closes one sojourn and a censored path contributes one
    censored sojourn for its final state.
    """
    absorbing = set(absorbing)
    out = {}
    for path in paths:
        t_prev, s_prev = path.start_time, path.initial_state
        for t, s in path.jumps:
            if s_prev in absorbing:
                raise ValueError(f"path {path.path_id} leaves absorbing state {s_prev}")
            out.setdefault(s_prev, []).append(SojournRecord(path.path_id, s_prev, t_prev, t, s))
            t_prev, s_prev = t, s
        if path.censor_time is not None and s_prev not in absorbing and path.censor_time > t_prev:
            out.setdefault(s_prev, []).append(
                SojournRecord(path.path_id, s_prev, t_prev, path.censor_time, None)
            )
    return dict(sorted(out.items()))


@dataclass
class SojournBatch:
    """Column form of the sojourns of one macrostate."""

    state: int
    entry: np.ndarray
    exit: np.ndarray
    dest: np.ndarray  # 0 when censored

    def __len__(self):
        return self.entry.size

    @property
    def censored(self):
        return self.dest == 0

    def subset(self, idx):
        return SojournBatch(self.state, self.entry[idx], self.exit[idx], self.dest[idx])

    @classmethod
    def from_records(cls, state, records):
        entry = np.array([r.entry_time for r in records], dtype=float)
        exit_ = np.array([r.exit_time for r in records], dtype=float)
        dest = np.array([0 if r.destination is None else r.destination for r in records], dtype=int)
        return cls(state, entry, exit_, dest)


def sojourn_batches(paths, absorbing=()):
    return {
        i: SojournBatch.from_records(i, recs)
        for i, recs in extract_sojourns(paths, absorbing).items()
    }


@dataclass
class MicroPath:
    """Fully observed micro trajectory; states are ``(macro, micro)`` pairs."""

    path_id: str
    start_time: float
    initial: tuple
    jumps: list = field(default_factory=list)  # [(time, (macro, micro))]
    end_time: float = None
    censored: bool = True

    def to_macro(self):
        jumps = []
        cur = self.initial[0]
        for t, (i, _) in self.jumps:
            if i != cur:
                jumps.append((t, i))
                cur = i
        return MacroPath(
            self.path_id, tuple(jumps),
            self.end_time if self.censored else None,
            self.initial[0], self.start_time,
        )


@dataclass
class SufficientStats:
    """Complete-data statistics over flat microstates.

    ``B`` (K+1, dbar): entries, index 0 is the grid origin.
    ``E`` (K, dbar): exposure per interval.
    ``O_within`` (K, dbar, dbar): within-macrostate transition counts.
    ``O_exit`` (K, dbar, J): exits from each microstate to each macrostate.
    """

    B: np.ndarray
    E: np.ndarray
    O_within: np.ndarray
    O_exit: np.ndarray

    @classmethod
    def zeros(cls, K, dbar, J):
        return cls(
            np.zeros((K + 1, dbar)), np.zeros((K, dbar)),
            np.zeros((K, dbar, dbar)), np.zeros((K, dbar, J)),
        )

    def __add__(self, other):
        return SufficientStats(
            self.B + other.B, self.E + other.E,
            self.O_within + other.O_within, self.O_exit + other.O_exit,
        )

    def macro(self, layout):
        """Aggregate to macro level: (B (K+1, J), E (K, J), O (K, J, J))."""
        J, K = layout.J, self.E.shape[0]
        B = np.zeros((K + 1, J))
        E = np.zeros((K, J))
        O = np.zeros((K, J, J))
        for i in layout.states:
            blk = layout.block(i)
            B[:, i - 1] = self.B[:, blk].sum(axis=1)
            E[:, i - 1] = self.E[:, blk].sum(axis=1)
            O[:, i - 1, :] = self.O_exit[:, blk, :].sum(axis=1)
        return B, E, O

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("B", "E", "O_within", "O_exit")}

    @classmethod
    def from_dict(cls, obj):
        return cls(*(np.asarray(obj[k], dtype=float) for k in ("B", "E", "O_within", "O_exit")))


def complete_stats(micro_paths, layout, grid):
    """Sufficient statistics of fully observed micro paths."""
    K, J = grid.K, layout.J
    st = SufficientStats.zeros(K, layout.total, J)
    for mp in micro_paths:
        cur = layout.flat(*mp.initial)
        cur_macro = mp.initial[0]
        st.B[grid.k_of(mp.start_time), cur] += 1
        t_prev = mp.start_time
        for t, (j, b) in mp.jumps:
            st.E[:, cur] += grid.overlaps(t_prev, t)
            k = grid.k_of(t)
            nxt = layout.flat(j, b)
            if j == cur_macro:
                st.O_within[k - 1, cur, nxt] += 1
            else:
                st.O_exit[k - 1, cur, j - 1] += 1
                st.B[k, nxt] += 1
            cur, cur_macro, t_prev = nxt, j, t
        if mp.end_time is not None and mp.end_time > t_prev:
            st.E[:, cur] += grid.overlaps(t_prev, mp.end_time)
    return st


def macro_stats(paths, grid, J):
    """Observed macro entries, exposures and transition counts per interval."""
    K = grid.K
    B = np.zeros((K + 1, J))
    E = np.zeros((K, J))
    O = np.zeros((K, J, J))
    for p in paths:
        B[grid.k_of(p.start_time), p.initial_state - 1] += 1
        t_prev, s_prev = p.start_time, p.initial_state
        for t, s in p.jumps:
            E[:, s_prev - 1] += grid.overlaps(t_prev, t)
            k = grid.k_of(t)
            O[k - 1, s_prev - 1, s - 1] += 1
            B[k, s - 1] += 1
            t_prev, s_prev = t, s
        if p.censor_time is not None:
            E[:, s_prev - 1] += grid.overlaps(t_prev, p.censor_time)
    return B, E, O


# -- files ------------------------------------------------------------------

def write_paths(paths, fh_or_path):
    """Write paths in the CSV schema; floats use ``repr`` so they round-trip."""
    if isinstance(fh_or_path, (str, bytes)) or hasattr(fh_or_path, "__fspath__"):
        with open(fh_or_path, "w", newline="") as fh:
            return write_paths(paths, fh)
    w = csv.writer(fh_or_path, lineterminator="\n")
    w.writerow(HEADER)
    for p in paths:
        for t, s in p.jumps:
            w.writerow((p.path_id, repr(float(t)), "jump", s))
        if p.censor_time is not None:
            w.writerow((p.path_id, repr(float(p.censor_time)), "censor", ""))


def read_paths(fh_or_path, start_time=0.0, initial_state=1):
    """Read the CSV path schema; rows of a path must be contiguous and ordered."""
    if isinstance(fh_or_path, (str, bytes)) or hasattr(fh_or_path, "__fspath__"):
        with open(fh_or_path, newline="") as fh:
            return read_paths(fh, start_time, initial_state)
    reader = csv.reader(fh_or_path)
    try:
        header = next(reader)
    except StopIteration:
        raise PathFileError("line 1: empty file") from None
    if tuple(h.strip() for h in header) != HEADER:
        raise PathFileError(f"line 1: expected header {','.join(HEADER)}")
    paths = []
    seen = set()
    cur_id, jumps, censor = None, [], None

    def flush(lineno):
        if cur_id is None:
            return
        try:
            paths.append(MacroPath(cur_id, tuple(jumps), censor, initial_state, start_time))
        except ValueError as exc:
            raise PathFileError(f"line {lineno}: {exc}") from None

    lineno = 1
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise PathFileError(f"line {lineno}: expected 4 fields, got {len(row)}")
        pid, t_str, kind, to = (c.strip() for c in row)
        try:
            t = float(t_str)
        except ValueError:
            raise PathFileError(f"line {lineno}: bad event_time {t_str!r}") from None
        if not math.isfinite(t):
            raise PathFileError(f"line {lineno}: non-finite event_time")
        if pid != cur_id:
            flush(lineno)
            if pid in seen:
                raise PathFileError(f"line {lineno}: rows of path {pid} are not contiguous")
            seen.add(pid)
            cur_id, jumps, censor = pid, [], None
        if censor is not None:
            raise PathFileError(f"line {lineno}: event after censoring in path {pid}")
        if kind == "jump":
            try:
                s = int(to)
            except ValueError:
                raise PathFileError(f"line {lineno}: bad to_state {to!r}") from None
            if s < 1:
                raise PathFileError(f"line {lineno}: to_state must be >= 1")
            jumps.append((t, s))
        elif kind == "censor":
            if to:
                raise PathFileError(f"line {lineno}: censor row must have empty to_state")
            censor = t
        else:
            raise PathFileError(f"line {lineno}: unknown event_type {kind!r}")
    flush(lineno)
    return paths


def save_stats(stats, path):
    with open(path, "w") as fh:
        json.dump(stats.to_dict(), fh)
