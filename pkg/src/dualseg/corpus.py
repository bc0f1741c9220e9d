"""Data model and ingestion for signals, feature sequences, and corpora.

A corpus bundles per-utterance feature sequences with speaker indices and
a speaker-coding table (for the parametric-bias input), plus optional
frame-level ground-truth labels used only for evaluation.
"""

import json
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class CorpusError(Exception):
    """Raised for malformed audio, feature files, or manifests."""


@dataclass
class Signal:
    """Mono audio with samples normalized to [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise CorpusError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise CorpusError("signal contains non-finite samples")


@dataclass
class FeatureSequence:
    """A T x D matrix of frame features at a fixed frame shift."""

    frames: np.ndarray
    frame_shift: float = 0.01

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise CorpusError("frames must be a T x D matrix with T, D >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise CorpusError("frames contain non-finite entries")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class Utterance:
    """One feature sequence with its speaker index and optional truth labels."""

    id: str
    speaker: int
    features: FeatureSequence
    letter_truth: np.ndarray | None = None
    word_truth: np.ndarray | None = None

    def __post_init__(self):
        for name in ("letter_truth", "word_truth"):
            labels = getattr(self, name)
            if labels is None:
                continue
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (self.features.n_frames,):
                raise CorpusError(
                    f"utterance {self.id!r}: {name} length {labels.shape} does not "
                    f"match frame count {self.features.n_frames}")
            setattr(self, name, labels)


@dataclass
class Corpus:
    """All utterances plus the speaker-coding table."""

    utterances: list[Utterance]
    n_speakers: int
    pb_codes: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.n_speakers < 1:
            raise CorpusError("corpus needs at least one speaker")
        if self.pb_codes is None:
            self.pb_codes = speaker_codes("sparse", self.n_speakers)
        self.pb_codes = np.asarray(self.pb_codes, dtype=np.float64)
        if self.pb_codes.shape[0] != self.n_speakers:
            raise CorpusError("pb_codes must have one row per speaker")
        rows = {tuple(row) for row in self.pb_codes}
        if len(rows) != self.n_speakers:
            raise CorpusError("pb_codes rows must be pairwise distinct")
        for utt in self.utterances:
            if not 0 <= utt.speaker < self.n_speakers:
                raise CorpusError(f"utterance {utt.id!r} has uncoded speaker {utt.speaker}")

    def frames_matrix(self):
        """All frames of all utterances stacked into one matrix."""
        return np.vstack([u.features.frames for u in self.utterances])

    def codes_per_frame(self):
        """The speaker code of each frame, aligned with frames_matrix()."""
        return np.vstack([
            np.tile(self.pb_codes[u.speaker], (u.features.n_frames, 1))
            for u in self.utterances
        ])


# --- WAV ingestion ---------------------------------------------------------

def load_wav(path):
    """Read a mono 16-bit PCM WAV file into a normalized Signal."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            if n_channels != 1:
                raise CorpusError(f"unsupported channel count {n_channels} in {path}")
            if wf.getsampwidth() != 2:
                raise CorpusError(
                    f"unsupported encoding: {8 * wf.getsampwidth()}-bit samples in {path}")
            if wf.getcomptype() != "NONE":
                raise CorpusError(f"unsupported encoding {wf.getcomptype()!r} in {path}")
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
            if len(raw) != 2 * n_frames:
                raise CorpusError(f"truncated WAV data in {path}")
            samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
            return Signal(samples=samples, sample_rate=wf.getframerate())
    except wave.Error as exc:
        raise CorpusError(f"cannot read WAV {path}: {exc}") from exc
    except (EOFError, struct.error) as exc:
        raise CorpusError(f"truncated WAV file {path}: {exc}") from exc


def save_wav(signal, path):
    """Write a Signal as mono 16-bit PCM, clipping to full scale."""
    scaled = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(signal.sample_rate)
        wf.writeframes(scaled.tobytes())


# --- feature CSV persistence -----------------------------------------------

def write_features_csv(seq, path):
    """Write one row per frame with a dim_0..dim_{D-1} header."""
    d = seq.dim
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"dim_{i}" for i in range(d)) + "\n")
        for row in seq.frames:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")


def read_features_csv(path, frame_shift=0.01):
    """Read a feature CSV written by write_features_csv."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header:
            raise CorpusError(f"{path}: empty file")
        columns = header.split(",")
        d = len(columns)
        expected = [f"dim_{i}" for i in range(d)]
        if columns != expected:
            raise CorpusError(f"{path}: bad header {header!r}")
        rows = []
        for idx, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != d:
                raise CorpusError(
                    f"{path}: row {idx} has {len(cells)} of {d} columns")
            try:
                rows.append([float(c) for c in cells])
            except ValueError as exc:
                raise CorpusError(f"{path}: non-numeric cell at row {idx}") from exc
    if not rows:
        raise CorpusError(f"{path}: no frames")
    return FeatureSequence(frames=np.array(rows, dtype=np.float64),
                           frame_shift=frame_shift)


def write_labels_csv(labels, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label\n")
        for x in np.asarray(labels, dtype=np.int64):
            fh.write(f"{x}\n")


def read_labels_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "label":
            raise CorpusError(f"{path}: bad label header {header!r}")
        try:
            return np.array([int(line) for line in fh if line.strip()], dtype=np.int64)
        except ValueError as exc:
            raise CorpusError(f"{path}: non-integer label") from exc


# --- speaker coding schemes --------------------------------------------------

# Four-speaker coding tables, rows in lexicographic speaker order.
_CODES_4 = {
    "sparse": [[0, 0, 0, 1], [0, 0, 1, 0], [0, 1, 0, 0], [1, 0, 0, 0]],
    "coding1": [[0, 0, 0, 1], [0, 0, 1, 0], [0, 0, 1, 1], [0, 1, 0, 0]],
    "coding2": [[0, 0, 1, 1], [0, 1, 1, 0], [1, 1, 0, 0], [1, 0, 0, 1]],
}


def speaker_codes(scheme, n_speakers):
    """Binary speaker-code rows for the given scheme.

    "sparse" generalizes to any speaker count as one-hot rows; the fixed
    "coding1"/"coding2" tables are defined for exactly four speakers.
    """
    if scheme == "sparse":
        if n_speakers == 4:
            return np.array(_CODES_4["sparse"], dtype=np.float64)
        codes = np.zeros((n_speakers, n_speakers))
        for i in range(n_speakers):
            codes[i, n_speakers - 1 - i] = 1.0
        return codes
    if scheme in _CODES_4:
        if n_speakers != 4:
            raise CorpusError(f"scheme {scheme!r} is defined for 4 speakers, "
                              f"got {n_speakers}")
        return np.array(_CODES_4[scheme], dtype=np.float64)
    raise CorpusError(f"unknown coding scheme {scheme!r}")


# --- manifest ingestion -------------------------------------------------------

def build_corpus(manifest_path):
    """Assemble a Corpus from a JSON manifest of feature files.

    Speaker names are mapped to indices in lexicographic order so that
    corpus construction is reproducible regardless of entry order.
    """
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise CorpusError(f"missing manifest {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise CorpusError(f"bad manifest {manifest_path}: {exc}") from exc

    entries = manifest.get("utterances")
    if not entries:
        raise CorpusError(f"{manifest_path}: no utterances listed")
    coding = manifest.get("coding", "sparse")
    frame_shift = float(manifest.get("frame_shift", 0.01))
    base = manifest_path.parent

    names = sorted({e["speaker"] for e in entries})
    index_of = {name: i for i, name in enumerate(names)}
    codes = speaker_codes(coding, len(names))

    utterances = []
    for e in entries:
        path = base / e["path"]
        if not path.exists():
            raise CorpusError(f"missing feature file {path}")
        seq = read_features_csv(path, frame_shift=frame_shift)
        letter = word = None
        if e.get("letter_labels"):
            letter = read_labels_csv(base / e["letter_labels"])
        if e.get("word_labels"):
            word = read_labels_csv(base / e["word_labels"])
        utterances.append(Utterance(
            id=e.get("id", path.stem),
            speaker=index_of[e["speaker"]],
            features=seq,
            letter_truth=letter,
            word_truth=word,
        ))
    return Corpus(utterances=utterances, n_speakers=len(names), pb_codes=codes)
