"""Antibody heavy-chain records: JSONL ingestion, filtering, splitting, loop bundling."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
AA_INDEX = {aa: i for i, aa in enumerate(AMINO_ACIDS)}
UNKNOWN_RESIDUE = len(AMINO_ACIDS)
LOOPS = ("h1", "h2", "h3")
ATOMS = ("N", "CA", "C")


class DataError(ValueError):
    """A record violates the input schema. Carries the offending line and field."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = f"line {line}: " if line is not None else ""
        what = f"[{field}] " if field else ""
        super().__init__(f"{where}{what}{message}")


@dataclass(eq=False)
class AntibodyRecord:
    pdb_id: str
    heavy_seq: str
    loop_spans: tuple  # ((s1, e1), (s2, e2), (s3, e3)), 0-based inclusive
    coords: dict  # atom name -> [len(heavy_seq) x 3], NaN where unknown
    resolution: float | None = None

    def __post_init__(self):
        self.loop_spans = tuple((int(s), int(e)) for s, e in self.loop_spans)
        self.coords = {a: np.asarray(self.coords[a], dtype=np.float64).reshape(-1, 3) for a in ATOMS}

    def validate(self, line=None):
        if not self.heavy_seq:
            raise DataError("empty heavy_seq", line, "heavy_seq")
        bad = sorted(set(self.heavy_seq) - set(AMINO_ACIDS))
        if bad:
            raise DataError(f"unknown amino-acid letter(s) {''.join(bad)!r}", line, "heavy_seq")
        n = len(self.heavy_seq)
        if len(self.loop_spans) != 3:
            raise DataError(f"expected 3 loop spans, got {len(self.loop_spans)}", line, "cdr")
        prev_end = -1
        for name, (start, end) in zip(LOOPS, self.loop_spans):
            if not 0 <= start <= end < n:
                raise DataError(f"span [{start},{end}] outside sequence of length {n}", line, f"cdr.{name}")
            if start <= prev_end:
                raise DataError(f"span [{start},{end}] overlaps or precedes the previous loop", line, f"cdr.{name}")
            prev_end = end
        for atom in ATOMS:
            arr = self.coords[atom]
            if len(arr) != n:
                raise DataError(
                    f"{len(arr)} {atom} entries for heavy_seq of length {n}", line, f"coords.{atom}"
                )
            for start, end in self.loop_spans:
                if not np.all(np.isfinite(arr[start : end + 1])):
                    raise DataError(f"non-finite loop coordinate in [{start},{end}]", line, f"coords.{atom}")
        return self

    def loop_lengths(self):
        return tuple(e - s + 1 for s, e in self.loop_spans)

    def loop_sequence(self, k):
        s, e = self.loop_spans[k]
        return self.heavy_seq[s : e + 1]

    def to_json(self):
        def rows(arr):
            return [None if not np.all(np.isfinite(r)) else [float(v) for v in r] for r in arr]

        return {
            "pdb": self.pdb_id,
            "resolution": self.resolution,
            "heavy_seq": self.heavy_seq,
            "cdr": {name: list(span) for name, span in zip(LOOPS, self.loop_spans)},
            "coords": {a: rows(self.coords[a]) for a in ATOMS},
        }

    @classmethod
    def from_json(cls, obj, line=None):
        if not isinstance(obj, dict):
            raise DataError("record is not a JSON object", line)
        for key in ("pdb", "heavy_seq", "cdr", "coords"):
            if key not in obj:
                raise DataError("missing field", line, key)
        cdr, raw = obj["cdr"], obj["coords"]
        try:
            spans = tuple(tuple(cdr[name]) for name in LOOPS)
        except (KeyError, TypeError):
            raise DataError("cdr must map h1/h2/h3 to [start, end]", line, "cdr") from None
        coords = {}
        for atom in ATOMS:
            if atom not in raw:
                raise DataError("missing atom array", line, f"coords.{atom}")
            try:
                coords[atom] = np.array(
                    [[math.nan] * 3 if r is None else r for r in raw[atom]], dtype=np.float64
                ).reshape(-1, 3)
            except (TypeError, ValueError):
                raise DataError("coordinates must be [x, y, z] triples or null", line, f"coords.{atom}") from None
        resolution = obj.get("resolution")
        rec = cls(
            pdb_id=str(obj["pdb"]),
            heavy_seq=str(obj["heavy_seq"]),
            loop_spans=spans,
            coords=coords,
            resolution=None if resolution is None else float(resolution),
        )
        return rec.validate(line)

    def __eq__(self, other):
        if not isinstance(other, AntibodyRecord):
            return NotImplemented
        return (
            self.pdb_id == other.pdb_id
            and self.heavy_seq == other.heavy_seq
            and self.loop_spans == other.loop_spans
            and self.resolution == other.resolution
            and all(np.array_equal(self.coords[a], other.coords[a], equal_nan=True) for a in ATOMS)
        )


def parse_jsonl(path, strict=True):
    """Read and validate one record per line.

    With ``strict`` the first bad line raises :class:`DataError`; otherwise bad
    lines are logged and skipped. Blank lines are ignored.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                try:
                    obj = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise DataError(f"malformed JSON ({exc.msg})", lineno) from None
                records.append(AntibodyRecord.from_json(obj, lineno))
            except DataError as exc:
                if strict:
                    raise
                logger.warning("skipping record: %s", exc)
    return records


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def seq_identity(a, b):
    """Percent identity over the shorter length, comparing positions without gaps."""
    n = min(len(a), len(b))
    if n == 0:
        raise ValueError("seq_identity needs non-empty sequences")
    x = np.frombuffer(a[:n].encode(), dtype=np.uint8)
    y = np.frombuffer(b[:n].encode(), dtype=np.uint8)
    return 100.0 * np.count_nonzero(x == y) / n


def preprocess(records, max_resolution=4.0, identity_cutoff=99.0, exclude=()):
    """Resolution filter, removal of test-set look-alikes, then first-seen-wins deduplication."""
    excluded = list(exclude)
    kept = []
    for rec in records:
        if rec.resolution is not None and rec.resolution > max_resolution:
            continue
        if any(seq_identity(rec.heavy_seq, s) >= identity_cutoff for s in excluded):
            continue
        if any(seq_identity(rec.heavy_seq, k.heavy_seq) >= identity_cutoff for k in kept):
            continue
        kept.append(rec)
    return kept


def split(records, ratio=0.8, seed=0):
    """Seeded shuffle; the first ceil(ratio * n) records train, the rest validate."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    records = list(records)
    order = np.random.default_rng(seed).permutation(len(records))
    # the tolerance stops products like 0.7 * 10 = 7.000000000000001 from rounding up
    n_train = math.ceil(ratio * len(records) - 1e-9)
    return [records[i] for i in order[:n_train]], [records[i] for i in order[n_train:]]


@dataclass
class LoopBundle:
    """H1, H2 and H3 concatenated in that order."""

    seq: str
    n: np.ndarray
    ca: np.ndarray
    c: np.ndarray
    boundaries: tuple  # start offset of each loop
    pdb_id: str = ""
    lengths: tuple = field(default=())

    def __post_init__(self):
        if not self.lengths:
            ends = tuple(self.boundaries[1:]) + (len(self.seq),)
            self.lengths = tuple(e - s for s, e in zip(self.boundaries, ends))

    def __len__(self):
        return len(self.seq)

    @property
    def residue_ids(self):
        return np.array([AA_INDEX[a] for a in self.seq], dtype=np.intp)

    @property
    def loop_labels(self):
        return np.repeat(np.arange(1, 4), self.lengths)

    def loop_slice(self, k):
        start = self.boundaries[k]
        return slice(start, start + self.lengths[k])

    def unbundle(self):
        """Per-loop (sequence, N, CA, C) tuples."""
        return [
            (self.seq[self.loop_slice(k)], self.n[self.loop_slice(k)], self.ca[self.loop_slice(k)], self.c[self.loop_slice(k)])
            for k in range(3)
        ]


def bundle_loops(record):
    parts = [slice(s, e + 1) for s, e in record.loop_spans]
    lengths = tuple(p.stop - p.start for p in parts)
    boundaries = (0, lengths[0], lengths[0] + lengths[1])

    def cat(atom):
        return np.concatenate([record.coords[atom][p] for p in parts])

    return LoopBundle(
        seq="".join(record.heavy_seq[p] for p in parts),
        n=cat("N"),
        ca=cat("CA"),
        c=cat("C"),
        boundaries=boundaries,
        pdb_id=record.pdb_id,
        lengths=lengths,
    )
