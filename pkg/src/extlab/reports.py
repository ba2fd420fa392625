"""Measurement reports and the shared CSV sink.

Every ratio measurement lands in a :class:`RatioReport`; experiment runners
append them to CSV files with a fixed column order:

    experiment, config_hash, module, op, n, delta, R, q, r, seed,
    lhs, rhs, ratio, stderr, runtime_s

Numeric cells are written with ``repr`` (shortest round-trip), so re-running
with the same seeds reproduces files byte for byte; ``runtime_s`` is the one
timing column and is excluded from reproducibility comparisons.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

CSV_COLUMNS = ["experiment", "config_hash", "module", "op", "n", "delta",
               "R", "q", "r", "seed", "lhs", "rhs", "ratio", "stderr",
               "runtime_s"]


@dataclass
class RatioReport:
    module: str
    op: str
    n: int
    lhs: float
    rhs: float
    delta: float = None
    R: float = None
    q: float = None
    r: float = None
    seed: int = None
    stderr: float = None
    runtime_seconds: float = 0.0
    degenerate: bool = False
    method: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def ratio(self):
        if self.degenerate or self.rhs == 0.0:
            return float("nan")
        return self.lhs / self.rhs

    def check(self):
        if not self.degenerate:
            if not (self.lhs >= 0.0 and self.rhs >= 0.0):
                raise ValueError("report sides must be nonnegative")
        return self

    def row(self, experiment="", config_hash=""):
        vals = {
            "experiment": experiment,
            "config_hash": config_hash,
            "module": self.module,
            "op": self.op,
            "n": self.n,
            "delta": self.delta,
            "R": self.R,
            "q": self.q,
            "r": self.r,
            "seed": self.seed,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "ratio": self.ratio if not self.degenerate else "degenerate",
            "stderr": self.stderr,
            "runtime_s": self.runtime_seconds,
        }
        return [_cell(vals[c]) for c in CSV_COLUMNS]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_hash(config):
    """Git-style blob hash of the canonical JSON encoding."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    blob = b"blob %d\0" % len(text.encode()) + text.encode()
    return hashlib.sha1(blob).hexdigest()[:12]


class CsvSink:
    """Append-only CSV writer with a single header row."""

    def __init__(self, path):
        self.path = str(path)

    def append(self, reports, experiment="", cfg_hash=""):
        new = not os.path.exists(self.path)
        with open(self.path, "a") as fh:
            if new:
                fh.write(",".join(CSV_COLUMNS) + "\n")
            for rep in reports:
                fh.write(",".join(rep.row(experiment, cfg_hash)) + "\n")

    def read_rows(self):
        with open(self.path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        header = lines[0].split(",")
        return header, [ln.split(",") for ln in lines[1:]]


def rows_equal_except_runtime(rows_a, rows_b):
    """Bit-exact comparison of CSV rows ignoring the runtime column."""
    if len(rows_a) != len(rows_b):
        return False
    drop = CSV_COLUMNS.index("runtime_s")
    for a, b in zip(rows_a, rows_b):
        if [x for i, x in enumerate(a) if i != drop] != \
           [x for i, x in enumerate(b) if i != drop]:
            return False
    return True
