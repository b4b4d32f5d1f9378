"""Dataset schema: samples, manifest CSV ingestion, and the pretrain/downstream split."""

from __future__ import annotations

import csv
import enum
import io
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

MANIFEST_HEADER = ("patient_id", "day_index", "session", "weight_kg", "image_path", "frame_index")
SCHEMA_VERSION = 1


class ManifestError(ValueError):
    """Raised for malformed or invariant-violating manifests."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


class Session(enum.Enum):
    PRE = "pre"
    POST = "post"

    @property
    def label(self) -> int:
        """Class index used by the classifier: PRE=0, POST=1."""
        return 0 if self is Session.PRE else 1


@dataclass(frozen=True)
class Sample:
    patient_id: str
    day_index: int
    session: Session
    weight_kg: float
    image_ref: str
    frame_index: int

    def __post_init__(self):
        if not isinstance(self.day_index, int) or self.day_index < 1:
            raise ManifestError(f"day_index must be an integer >= 1, got {self.day_index!r}")
        if not isinstance(self.frame_index, int) or self.frame_index < 0:
            raise ManifestError(f"frame_index must be an integer >= 0, got {self.frame_index!r}")
        if not (math.isfinite(self.weight_kg) and self.weight_kg > 0):
            raise ManifestError(f"weight_kg must be finite and positive, got {self.weight_kg!r}")
        if not isinstance(self.session, Session):
            raise ManifestError(f"session must be a Session, got {self.session!r}")

    @property
    def key(self) -> tuple[str, int, Session, int]:
        return (self.patient_id, self.day_index, self.session, self.frame_index)

    @property
    def session_key(self) -> tuple[str, int, Session]:
        return (self.patient_id, self.day_index, self.session)

    @property
    def label(self) -> int:
        return self.session.label


@dataclass(frozen=True)
class Manifest:
    samples: tuple[Sample, ...]
    provenance: str = ""
    schema_version: int = SCHEMA_VERSION
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        _check_invariants(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def patients(self) -> list[str]:
        """Patient ids in order of first appearance."""
        return list(dict.fromkeys(s.patient_id for s in self.samples))

    def for_patients(self, patients: Iterable[str]) -> "Manifest":
        keep = set(patients)
        return Manifest(
            tuple(s for s in self.samples if s.patient_id in keep), self.provenance, self.schema_version, self.root
        )

    def days(self, patient_id: str) -> list[int]:
        return sorted({s.day_index for s in self.samples if s.patient_id == patient_id})

    def complete_days(self, patient_id: str) -> list[int]:
        """Days on which the patient has both PRE and POST records."""
        sessions = defaultdict(set)
        for s in self.samples:
            if s.patient_id == patient_id:
                sessions[s.day_index].add(s.session)
        return sorted(d for d, ss in sessions.items() if len(ss) == 2)

    def session_weights(self) -> dict[tuple[str, int, Session], float]:
        return {s.session_key: s.weight_kg for s in self.samples}

    def resolve(self, sample: Sample) -> Path:
        p = Path(sample.image_ref)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def summary(self) -> dict[str, int]:
        sessions = {s.session_key for s in self.samples}
        n_pre = sum(1 for k in sessions if k[2] is Session.PRE)
        return {
            "patients": len(self.patients),
            "days": len({(k[0], k[1]) for k in sessions}),
            "pre_sessions": n_pre,
            "post_sessions": len(sessions) - n_pre,
            "sessions": len(sessions),
            "images": len(self.samples),
        }


def _check_invariants(samples: Sequence[Sample]) -> None:
    if not samples:
        raise ManifestError("manifest has no samples (at least one patient required)")
    seen: dict[tuple, int] = {}
    pre_days = set()
    session_weight: dict[tuple, float] = {}
    for i, s in enumerate(samples, start=2):
        if s.key in seen:
            raise ManifestError(f"duplicate sample key {s.key} (first seen at row {seen[s.key]})", row=i)
        seen[s.key] = i
        if s.session is Session.PRE:
            pre_days.add((s.patient_id, s.day_index))
        w = session_weight.setdefault(s.session_key, s.weight_kg)
        if w != s.weight_kg:
            raise ManifestError(f"inconsistent weight within session {s.session_key}", row=i)
    for i, s in enumerate(samples, start=2):
        if s.session is Session.POST and (s.patient_id, s.day_index) not in pre_days:
            raise ManifestError(
                f"POST record for patient {s.patient_id} day {s.day_index} has no PRE record", row=i
            )


def _parse_row(row: list[str], rownum: int) -> Sample:
    if len(row) != len(MANIFEST_HEADER):
        raise ManifestError(f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}", row=rownum)
    pid, day, session, weight, path, frame = row
    try:
        sess = Session(session)
    except ValueError:
        raise ManifestError(f"unknown session token {session!r} (expected 'pre' or 'post')", row=rownum) from None
    try:
        day_i = int(day)
        frame_i = int(frame)
        weight_f = float(weight)
    except ValueError as exc:
        raise ManifestError(f"malformed numeric field: {exc}", row=rownum) from None
    if not pid:
        raise ManifestError("empty patient_id", row=rownum)
    try:
        return Sample(pid, day_i, sess, weight_f, path, frame_i)
    except ManifestError as exc:
        raise ManifestError(str(exc), row=rownum) from None


def parse_manifest(text: str, provenance: str = "", root: Path | None = None) -> Manifest:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("empty file") from None
    if tuple(header) != MANIFEST_HEADER:
        raise ManifestError(f"bad header {header!r}; expected {','.join(MANIFEST_HEADER)}", row=1)
    samples = [_parse_row(row, n) for n, row in enumerate(reader, start=2) if row]
    try:
        return Manifest(tuple(samples), provenance, SCHEMA_VERSION, root)
    except ManifestError:
        raise
    except ValueError as exc:  # pragma: no cover
        raise ManifestError(str(exc)) from None


def load_manifest(path: str | Path) -> Manifest:
    """Read a manifest CSV; relative image paths resolve against its directory."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_manifest(text, provenance=str(path), root=path.parent)


def format_weight(w: float) -> str:
    return repr(float(w))


def dump_manifest(m: Manifest) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for s in m.samples:
        writer.writerow([s.patient_id, s.day_index, s.session.value, format_weight(s.weight_kg), s.image_ref, s.frame_index])
    return buf.getvalue()


def save_manifest(m: Manifest, path: str | Path) -> None:
    Path(path).write_bytes(dump_manifest(m).encode("utf-8"))


@dataclass(frozen=True)
class CohortSplit:
    pretrain_patients: frozenset[str]
    downstream_patients: frozenset[str]
    day_threshold: int = 7

    def __post_init__(self):
        if self.pretrain_patients & self.downstream_patients:
            raise ValueError("pretrain and downstream patient sets overlap")


def split_cohort(m: Manifest, day_threshold: int = 7) -> CohortSplit:
    """Patients with fewer than ``day_threshold`` complete days go to pretraining."""
    if day_threshold < 1:
        raise ValueError("day_threshold must be >= 1")
    if not m.samples:
        raise ManifestError("empty manifest")
    pre, down = set(), set()
    for pid in m.patients:
        (pre if len(m.complete_days(pid)) < day_threshold else down).add(pid)
    return CohortSplit(frozenset(pre), frozenset(down), day_threshold)


def day_histogram(m: Manifest) -> dict[int, int]:
    counts = Counter(len(m.complete_days(pid)) for pid in m.patients)
    return dict(sorted(counts.items()))
