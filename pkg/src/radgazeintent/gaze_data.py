"""Gaze sessions and intention-label compilation.

A session couples one chest X-ray image with a timestamped fixation sequence
and a class-mapped transcript. The three builders turn a session into a T x K
binary label matrix under different assumptions about what the viewer was
looking for: everything still open (explore), one finding per transcript
interval (seq), or intervals merged with an initial scan window (hybrid).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_FINDINGS = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
]


class SessionValidationError(ValueError):
    """A session record violates the input contract."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class Fixation:
    x: int
    y: int
    duration_ms: float
    timestamp_s: float


@dataclass(frozen=True)
class TranscriptSentence:
    end_time_s: float
    finding_id: int


@dataclass
class GazeSession:
    """One reading session; ``image`` is None for synthetic render-on-demand."""

    session_id: str
    image_size: tuple[int, int]  # (H, W)
    image: np.ndarray | None
    fixations: list[Fixation]
    transcript: list[TranscriptSentence]
    report_findings: list[int]

    @property
    def t(self) -> int:
        return len(self.fixations)

    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp_s for f in self.fixations])


@dataclass
class Vocabulary:
    """Ordered finding names; index in the list is the finding id."""

    names: list[str] = field(default_factory=lambda: list(DEFAULT_FINDINGS))

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValueError(f"vocabulary needs at least 2 findings, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise ValueError("vocabulary names must be unique")

    @property
    def k(self) -> int:
        return len(self.names)

    @classmethod
    def default_subset(cls, k: int) -> "Vocabulary":
        if k <= len(DEFAULT_FINDINGS):
            return cls(list(DEFAULT_FINDINGS[:k]))
        extra = [f"Finding {i}" for i in range(len(DEFAULT_FINDINGS), k)]
        return cls(list(DEFAULT_FINDINGS) + extra)

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            names = [ln.strip() for ln in fh if ln.strip()]
        return cls(names)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.names) + "\n")


@dataclass
class SeqConfig:
    """Knobs for interval labeling; min_dwell=0 keeps every interval."""

    min_dwell: float = 0.0


# ---------------------------------------------------------------------------
# parsing / serialization
# ---------------------------------------------------------------------------

def _validate_session(session: GazeSession, k: int, line: int | None = None) -> None:
    h, w = session.image_size
    if h <= 0 or w <= 0:
        raise SessionValidationError(f"image_size must be positive, got {session.image_size}", line)
    if session.image is not None and session.image.shape != (h, w):
        raise SessionValidationError(
            f"image payload is {session.image.shape}, image_size says {(h, w)}", line)
    if len(session.fixations) < 1:
        raise SessionValidationError("T >= 1 required: empty fixation list", line)
    prev_ts = -np.inf
    for i, f in enumerate(session.fixations):
        if not (0 <= f.x < w and 0 <= f.y < h):
            raise SessionValidationError(
                f"fixation {i} at ({f.x}, {f.y}) outside image {h}x{w}", line)
        if f.duration_ms <= 0:
            raise SessionValidationError(f"fixation {i} duration must be > 0", line)
        if f.timestamp_s < 0:
            raise SessionValidationError(f"fixation {i} timestamp must be >= 0", line)
        if f.timestamp_s <= prev_ts:
            raise SessionValidationError(
                f"timestamps not increasing at fixation {i} "
                f"({prev_ts} then {f.timestamp_s})", line)
        prev_ts = f.timestamp_s
    report = set(session.report_findings)
    for fid in report:
        if not 0 <= fid < k:
            raise SessionValidationError(f"unknown finding_id {fid} (vocabulary K={k})", line)
    prev_end = 0.0
    for j, s in enumerate(session.transcript):
        if s.end_time_s <= 0:
            raise SessionValidationError(f"sentence {j} end_time must be > 0", line)
        if s.end_time_s < prev_end:
            raise SessionValidationError(
                f"sentence end_times decrease at sentence {j}", line)
        prev_end = s.end_time_s
        if s.finding_id not in report:
            raise SessionValidationError(
                f"sentence {j} finding_id {s.finding_id} not in report_findings", line)


def _record_to_session(rec: dict, line: int | None = None) -> GazeSession:
    try:
        h, w = (int(v) for v in rec["image_size"])
        image = None
        if rec.get("image") is not None:
            raw = base64.b64decode(rec["image"])
            if len(raw) != h * w:
                raise SessionValidationError(
                    f"image payload has {len(raw)} bytes, expected {h * w}", line)
            image = np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
        fixations = [Fixation(int(f["x"]), int(f["y"]),
                              float(f["duration_ms"]), float(f["timestamp_s"]))
                     for f in rec["fixations"]]
        transcript = [TranscriptSentence(float(s["end_time_s"]), int(s["finding_id"]))
                      for s in rec["transcript"]]
        return GazeSession(
            session_id=str(rec["session_id"]),
            image_size=(h, w),
            image=image,
            fixations=fixations,
            transcript=transcript,
            report_findings=[int(v) for v in rec["report_findings"]],
        )
    except SessionValidationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SessionValidationError(f"malformed record: {exc}", line) from exc


def parse_sessions(lines, k: int) -> list[GazeSession]:
    """Parse line-delimited JSON session records, validating every invariant.

    ``lines`` is any iterable of strings (an open file works). The first bad
    record aborts the parse with a diagnostic naming its line number.
    """
    sessions = []
    for line_no, raw in enumerate(lines, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SessionValidationError(f"invalid JSON: {exc}", line_no) from exc
        session = _record_to_session(rec, line_no)
        _validate_session(session, k, line_no)
        sessions.append(session)
    return sessions


def load_sessions(path, k: int) -> list[GazeSession]:
    with open(path, encoding="utf-8") as fh:
        return parse_sessions(fh, k)


def session_to_record(session: GazeSession) -> dict:
    image_b64 = None
    if session.image is not None:
        image_b64 = base64.b64encode(session.image.astype(np.uint8).tobytes()).decode("ascii")
    return {
        "session_id": session.session_id,
        "image_size": list(session.image_size),
        "image": image_b64,
        "fixations": [{"x": f.x, "y": f.y, "duration_ms": f.duration_ms,
                       "timestamp_s": f.timestamp_s} for f in session.fixations],
        "transcript": [{"end_time_s": s.end_time_s, "finding_id": s.finding_id}
                       for s in session.transcript],
        "report_findings": list(session.report_findings),
    }


def write_sessions(path, sessions: list[GazeSession],
                   labels: dict[str, np.ndarray] | None = None,
                   mode: str | None = None) -> None:
    """Write sessions as JSONL; optionally attach a label matrix per session."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            rec = session_to_record(s)
            if labels is not None:
                rec["mode"] = mode
                rec["labels"] = labels[s.session_id].astype(int).tolist()
            fh.write(json.dumps(rec) + "\n")


def load_labeled(path, k: int) -> tuple[list[GazeSession], dict[str, np.ndarray], str]:
    """Read labeled JSONL back into sessions plus per-session label matrices."""
    sessions = []
    labels: dict[str, np.ndarray] = {}
    mode = ""
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            rec = json.loads(raw)
            session = _record_to_session(rec, line_no)
            _validate_session(session, k, line_no)
            if "labels" not in rec:
                raise SessionValidationError("record has no labels field", line_no)
            mat = np.asarray(rec["labels"], dtype=np.uint8)
            if mat.shape != (session.t, k):
                raise SessionValidationError(
                    f"labels shape {mat.shape} does not match T={session.t}, K={k}", line_no)
            sessions.append(session)
            labels[session.session_id] = mat
            mode = rec.get("mode", mode)
    return sessions, labels, mode


# ---------------------------------------------------------------------------
# label builders
# ---------------------------------------------------------------------------

def transcript_intervals(session: GazeSession) -> list[tuple[int, float, float]]:
    """Per-sentence (finding_id, begin, end) intervals partitioning the timeline.

    A sentence's interval starts where the previous sentence ended (0 for the
    first) and closes at its own end time. Repeated findings keep one interval
    per mention; labeling takes their union.
    """
    intervals = []
    prev_end = 0.0
    for s in session.transcript:
        intervals.append((s.finding_id, prev_end, s.end_time_s))
        prev_end = s.end_time_s
    return intervals


def build_radexplore(session: GazeSession, k: int) -> np.ndarray:
    """Label fixation i with finding c_j of every sentence j ending at or after it."""
    labels = np.zeros((session.t, k), dtype=np.uint8)
    taus = session.timestamps()
    for s in session.transcript:
        labels[taus <= s.end_time_s, s.finding_id] = 1
    return labels


def build_radseq(session: GazeSession, k: int, cfg: SeqConfig | None = None) -> np.ndarray:
    """Label fixations by the transcript interval (closed on both ends) they fall in.

    Intervals shorter than ``cfg.min_dwell`` are dropped; the default of 0
    keeps everything.
    """
    cfg = cfg or SeqConfig()
    labels = np.zeros((session.t, k), dtype=np.uint8)
    taus = session.timestamps()
    for fid, beg, end in transcript_intervals(session):
        if end - beg < cfg.min_dwell:
            continue
        labels[(taus >= beg) & (taus <= end), fid] = 1
    return labels


def build_radhybrid(session: GazeSession, k: int, tau_star: float = 1.0,
                    cfg: SeqConfig | None = None,
                    restrict_to_report: bool = False) -> np.ndarray:
    """Interval labels merged with an initial scan window of ``tau_star`` seconds.

    A fixation inside the scan window is marked for every finding (or, with
    ``restrict_to_report``, every report finding). ``tau_star=0`` disables the
    window entirely so that the output equals :func:`build_radseq`.
    """
    if tau_star < 0:
        raise ValueError(f"tau_star must be >= 0, got {tau_star}")
    labels = build_radseq(session, k, cfg)
    if tau_star > 0:
        scan = session.timestamps() <= tau_star
        if restrict_to_report:
            for fid in session.report_findings:
                labels[scan, fid] = 1
        else:
            labels[scan, :] = 1
    return labels


BUILDERS = {
    "radexplore": lambda session, k, **kw: build_radexplore(session, k),
    "radseq": lambda session, k, **kw: build_radseq(session, k, kw.get("cfg")),
    "radhybrid": lambda session, k, **kw: build_radhybrid(
        session, k, kw.get("tau_star", 1.0), kw.get("cfg"),
        kw.get("restrict_to_report", False)),
}
