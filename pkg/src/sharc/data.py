"""File formats and synthetic data.

Embedding container (little-endian)::

    b"SHRC" | u32 version | u64 N | u64 F | N*F float64, row-major

An optional sidecar next to it (same stem, ``.segs`` suffix) holds N lines
``onset duration [label]``. Similarity matrices use the same layout with the
magic ``b"SHSM"`` and ``N == F``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO, Union

import numpy as np

from .core import EmbeddingSet, SharcError, dense_relabel

PathLike = Union[str, Path]

EMB_MAGIC = b"SHRC"
SIM_MAGIC = b"SHSM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
_MAX_BYTES = (1 << 63) - 1


class FormatError(SharcError, ValueError):
    """Malformed input file."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class SizeOverflowError(FormatError):
    pass


class SidecarMismatchError(FormatError):
    pass


class RttmError(FormatError):
    pass


class SynthError(SharcError, ValueError):
    pass


# --- binary matrices ---------------------------------------------------------


def _write_matrix(path: PathLike, magic: bytes, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise FormatError(f"expected a 2-D matrix, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, FORMAT_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def _read_matrix(path: PathLike, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if not raw.startswith(magic[: len(raw)]):
            raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
        raise TruncatedError(f"{path}: header needs {_HEADER.size} bytes, got {len(raw)}")
    got, version, n, f = _HEADER.unpack_from(raw)
    if got != magic:
        raise BadMagicError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {version}")
    if n * f > _MAX_BYTES // 8:
        raise SizeOverflowError(f"{path}: N*F = {n}*{f} overflows the payload size")
    need = n * f * 8
    have = len(raw) - _HEADER.size
    if have < need:
        raise TruncatedError(f"{path}: payload has {have} bytes, expected {need}")
    if have > need:
        raise FormatError(f"{path}: {have - need} trailing bytes after payload")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n, f).astype(np.float64)


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".segs")


def write_embeddings(es: EmbeddingSet, path: PathLike) -> None:
    """Write the container and, when segments exist, the ``.segs`` sidecar."""
    _write_matrix(path, EMB_MAGIC, es.embeddings)
    if es.segments is None:
        return
    lines = []
    for i, (onset, dur) in enumerate(es.segments):
        line = f"{float(onset)!r} {float(dur)!r}"
        if es.labels is not None:
            line += f" {int(es.labels[i])}"
        lines.append(line)
    sidecar_path(path).write_text("\n".join(lines) + "\n")


def _read_sidecar(path: Path, n: int):
    rows = [ln.split() for ln in path.read_text().splitlines() if ln.strip()]
    if len(rows) != n:
        raise SidecarMismatchError(f"{path}: {len(rows)} lines for {n} embeddings")
    widths = {len(r) for r in rows}
    if widths - {2, 3} or len(widths) > 1:
        raise SidecarMismatchError(f"{path}: every line needs 'onset duration [label]'")
    try:
        segs = np.array([[float(r[0]), float(r[1])] for r in rows]).reshape(n, 2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    labels = None
    if widths == {3}:
        tokens = [r[2] for r in rows]
        try:
            labels = np.array([int(t) for t in tokens], dtype=np.int64)
        except ValueError:
            labels = dense_relabel(tokens)
    return segs, labels


def read_embeddings(path: PathLike, recording_id: Optional[str] = None) -> EmbeddingSet:
    """Load an embedding container; the recording id defaults to the file stem."""
    path = Path(path)
    x = _read_matrix(path, EMB_MAGIC)
    segs = labels = None
    side = sidecar_path(path)
    if side.exists():
        segs, labels = _read_sidecar(side, x.shape[0])
    return EmbeddingSet(recording_id or path.stem, x, segs, labels)


def write_similarity(matrix: np.ndarray, path: PathLike) -> None:
    _write_matrix(path, SIM_MAGIC, matrix)


def read_similarity(path: PathLike) -> np.ndarray:
    s = _read_matrix(path, SIM_MAGIC)
    if s.shape[0] != s.shape[1]:
        raise FormatError(f"{path}: similarity matrix must be square, got {s.shape}")
    return s


# --- RTTM ----------------------------------------------------------------------


@dataclass(frozen=True)
class RttmRecord:
    recording_id: str
    onset: float
    duration: float
    speaker: str

    @property
    def end(self) -> float:
        return self.onset + self.duration


def labels_to_records(
    labels: Sequence[int], segments: np.ndarray, recording_id: str, prefix: str = "spk"
) -> list:
    """Turn per-segment labels into non-overlapping speaker turns.

    Overlapping neighbouring segments are split at the midpoint of their
    overlap, then touching pieces of the same speaker are merged.
    """
    labels = np.asarray(labels)
    segs = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    if labels.shape[0] != segs.shape[0]:
        raise ValueError("labels and segments differ in length")
    order = np.argsort(segs[:, 0], kind="stable")
    on = segs[order, 0]
    end = on + segs[order, 1]
    lab = labels[order]
    n = on.size
    starts, stops = on.copy(), end.copy()
    for i in range(1, n):
        if end[i - 1] > on[i]:
            mid = 0.5 * (on[i] + min(end[i - 1], end[i]))
            stops[i - 1] = min(stops[i - 1], mid)
            starts[i] = max(starts[i], mid)
    out = []
    for i in range(n):
        if stops[i] <= starts[i]:
            continue
        spk = f"{prefix}{lab[i]}"
        if out and out[-1][2] == spk and abs(out[-1][1] - starts[i]) < 1e-9:
            out[-1][1] = stops[i]
        else:
            out.append([starts[i], stops[i], spk])
    return [RttmRecord(recording_id, s, e - s, spk) for s, e, spk in out]


def format_rttm(records: Iterable[RttmRecord]) -> str:
    return "".join(
        f"SPEAKER {r.recording_id} 1 {r.onset:.3f} {r.duration:.3f} <NA> <NA> {r.speaker} <NA> <NA>\n"
        for r in records
    )


def write_rttm(labels, segments, recording_id: str, path: Union[PathLike, TextIO]) -> list:
    """Write the labelled segments of one recording as RTTM; returns the records."""
    records = labels_to_records(labels, segments, recording_id)
    text = format_rttm(records)
    if hasattr(path, "write"):
        path.write(text)
    else:
        Path(path).write_text(text)
    return records


def parse_rttm(text: str, source: str = "<rttm>") -> list:
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields or fields[0].startswith("#") or fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise RttmError(f"{source}:{lineno}: expected at least 8 fields, got {len(fields)}")
        try:
            onset, dur = float(fields[3]), float(fields[4])
        except ValueError:
            raise RttmError(f"{source}:{lineno}: bad onset/duration") from None
        if not (math.isfinite(onset) and math.isfinite(dur)) or onset < 0 or dur <= 0:
            raise RttmError(f"{source}:{lineno}: need onset >= 0 and duration > 0")
        records.append(RttmRecord(fields[1], onset, dur, fields[7]))
    return records


def read_rttm(path: PathLike) -> list:
    return parse_rttm(Path(path).read_text(), str(path))


# --- synthetic recordings ---------------------------------------------------------


@dataclass
class SynthConfig:
    """Synthetic recordings: speaker turns over a 1.5 s / 0.75 s segment grid.

    ``spread`` is the expected norm of the noise added to a unit-norm speaker
    centroid; per-coordinate standard deviation is ``spread / sqrt(F)``.
    """

    n_recordings: int = 10
    speakers_range: tuple = (2, 5)
    F: int = 16
    spread: float = 0.3
    turn_length_range: tuple = (3.0, 12.0)
    duration_range: tuple = (60.0, 120.0)
    min_angle_deg: float = 30.0
    segment_length: float = 1.5
    segment_shift: float = 0.75
    seed: int = 0
    max_retries: int = 1000


def _centroids(rng, n_spk, dim, min_angle_deg, max_retries):
    cos_max = math.cos(math.radians(min_angle_deg))
    cents = []
    for attempt in range(max_retries):
        cents = []
        for _ in range(n_spk):
            for _ in range(max_retries):
                v = rng.standard_normal(dim)
                v /= np.linalg.norm(v)
                if all(float(v @ c) <= cos_max for c in cents):
                    cents.append(v)
                    break
            else:
                break
        if len(cents) == n_spk:
            return np.array(cents)
    raise SynthError(
        f"cannot place {n_spk} centroids in {dim}-D at >= {min_angle_deg} degrees apart"
    )


def _turns(rng, n_spk, cfg: SynthConfig):
    """Sequence of (speaker, turn length); every speaker talks at least once."""
    shift, seg = cfg.segment_shift, cfg.segment_length
    duration = rng.uniform(*cfg.duration_range)
    speakers = list(rng.permutation(n_spk))
    turns, t = [], 0.0
    while speakers or t < duration:
        if speakers:
            spk = speakers.pop(0)
        else:
            prev = turns[-1][0]
            choices = [s for s in range(n_spk) if s != prev] or [prev]
            spk = choices[rng.integers(len(choices))]
        length = rng.uniform(*cfg.turn_length_range)
        length = max(seg, shift * round(length / shift))
        turns.append((int(spk), length))
        t += length
    return turns


def synth_recording(rng, cfg: SynthConfig, recording_id: str) -> EmbeddingSet:
    lo, hi = cfg.speakers_range
    n_spk = int(rng.integers(lo, hi + 1))
    cents = _centroids(rng, n_spk, cfg.F, cfg.min_angle_deg, cfg.max_retries)
    onsets, labels, t = [], [], 0.0
    for spk, length in _turns(rng, n_spk, cfg):
        count = int(round((length - cfg.segment_length) / cfg.segment_shift)) + 1
        for i in range(count):
            onsets.append(t + i * cfg.segment_shift)
            labels.append(spk)
        t += length
    labels = np.array(labels, dtype=np.int64)
    noise = rng.standard_normal((labels.size, cfg.F)) * (cfg.spread / math.sqrt(cfg.F))
    x = cents[labels] + noise
    segs = np.stack([np.round(onsets, 6), np.full(labels.size, cfg.segment_length)], axis=1)
    return EmbeddingSet(recording_id, x, segs, labels)


def synth_generate(cfg: SynthConfig) -> list:
    """Seed-deterministic list of labelled synthetic recordings."""
    lo, hi = cfg.speakers_range
    if not (1 <= lo <= hi <= 64):
        raise SynthError(f"speakers_range must lie within [1, 64], got {cfg.speakers_range}")
    if cfg.spread < 0:
        raise SynthError("spread must be non-negative")
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_recordings)
    return [
        synth_recording(np.random.default_rng(child), cfg, f"synth{cfg.seed}_{r:04d}")
        for r, child in enumerate(children)
    ]
