"""MFCC extraction and dataset-level min-max normalization.

The cepstral pipeline follows the HTK conventions: pre-emphasis, Hamming
window, magnitude spectrum, triangular mel filterbank on the HTK mel
scale, log, DCT-II, and +/-2-frame regression deltas.
"""

from dataclasses import dataclass

import numpy as np

from .corpus import FeatureSequence
from .docio import load_doc, save_doc


class FeatureError(Exception):
    pass


@dataclass
class MfccConfig:
    frame_len: float = 0.025
    frame_shift: float = 0.010
    n_mel_filters: int = 26
    n_cepstra: int = 13
    include_power: bool = True
    deltas: int = 2
    pre_emphasis: float = 0.97

    def __post_init__(self):
        if not 0 < self.frame_shift <= self.frame_len:
            raise FeatureError("need 0 < frame_shift <= frame_len")
        if self.n_cepstra > self.n_mel_filters:
            raise FeatureError("n_cepstra must not exceed n_mel_filters")
        if self.deltas not in (0, 1, 2):
            raise FeatureError("deltas must be 0, 1, or 2")

    @property
    def dim(self):
        static = self.n_cepstra if self.include_power else self.n_cepstra - 1
        return static * (self.deltas + 1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft, n_filters):
    """Triangular filters with centers equally spaced on the mel scale."""
    n_bins = n_fft // 2 + 1
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0),
                                     n_filters + 2))
    bin_hz = np.arange(n_bins) * sample_rate / n_fft
    fbank = np.zeros((n_filters, n_bins))
    for j in range(n_filters):
        lo, center, hi = edges_hz[j], edges_hz[j + 1], edges_hz[j + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        fbank[j] = np.maximum(0.0, np.minimum(rising, falling))
    return fbank


def filterbank_centers_hz(sample_rate, n_filters):
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0),
                                  n_filters + 2))
    return edges[1:-1]


def frame_count(n_samples, frame_len_samples, shift_samples):
    if n_samples < frame_len_samples:
        return 0
    return (n_samples - frame_len_samples) // shift_samples + 1


def log_mel_energies(signal, config):
    """Frames x filters matrix of log mel-filterbank magnitudes."""
    sr = signal.sample_rate
    flen = int(round(config.frame_len * sr))
    shift = int(round(config.frame_shift * sr))
    n_frames = frame_count(len(signal.samples), flen, shift)
    if n_frames < 1:
        raise FeatureError(
            f"signal of {len(signal.samples)} samples is shorter than one "
            f"frame ({flen} samples)")

    emphasized = np.concatenate([
        signal.samples[:1],
        signal.samples[1:] - config.pre_emphasis * signal.samples[:-1],
    ])
    window = np.hamming(flen)
    n_fft = 1
    while n_fft < flen:
        n_fft *= 2
    starts = np.arange(n_frames) * shift
    frames = emphasized[starts[:, None] + np.arange(flen)[None, :]] * window
    magnitude = np.abs(np.fft.rfft(frames, n_fft, axis=1))
    fbank = mel_filterbank(sr, n_fft, config.n_mel_filters)
    energies = magnitude @ fbank.T
    return np.log(np.maximum(energies, np.finfo(np.float64).tiny))


def _dct2_ortho(n_out, n_in):
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    basis = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in))
    basis *= np.sqrt(2.0 / n_in)
    basis[0] /= np.sqrt(2.0)
    return basis


def _delta(feat, window=2):
    """Regression deltas over +/-window frames with edge replication."""
    denom = 2.0 * sum(n * n for n in range(1, window + 1))
    padded = np.concatenate([
        np.repeat(feat[:1], window, axis=0),
        feat,
        np.repeat(feat[-1:], window, axis=0),
    ])
    t = np.arange(feat.shape[0]) + window
    acc = np.zeros_like(feat)
    for n in range(1, window + 1):
        acc += n * (padded[t + n] - padded[t - n])
    return acc / denom


def extract_mfcc(signal, config=None):
    """Extract an MFCC FeatureSequence from a signal."""
    config = config or MfccConfig()
    logmel = log_mel_energies(signal, config)
    cepstra = logmel @ _dct2_ortho(config.n_cepstra, config.n_mel_filters).T
    if not config.include_power:
        cepstra = cepstra[:, 1:]
    blocks = [cepstra]
    for _ in range(config.deltas):
        blocks.append(_delta(blocks[-1]))
    return FeatureSequence(frames=np.hstack(blocks), frame_shift=config.frame_shift)


# --- min-max normalization to the tanh range ---------------------------------

@dataclass
class NormStats:
    """Per-dimension minima and maxima of the pooled dataset."""

    o_min: np.ndarray
    o_max: np.ndarray

    def __post_init__(self):
        self.o_min = np.asarray(self.o_min, dtype=np.float64)
        self.o_max = np.asarray(self.o_max, dtype=np.float64)
        if self.o_min.shape != self.o_max.shape or self.o_min.ndim != 1:
            raise FeatureError("o_min and o_max must be matching vectors")
        if np.any(self.o_min > self.o_max):
            raise FeatureError("o_min must not exceed o_max")

    def save(self, path):
        save_doc(path, "norm-stats", {"o_min": self.o_min, "o_max": self.o_max})

    @classmethod
    def load(cls, path):
        payload = load_doc(path, "norm-stats")
        return cls(o_min=np.array(payload["o_min"]), o_max=np.array(payload["o_max"]))


def fit_normalizer(rows):
    """Fit per-dimension min/max over all feature rows of the dataset."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise FeatureError("need a nonempty N x D matrix to fit the normalizer")
    return NormStats(o_min=rows.min(axis=0), o_max=rows.max(axis=0))


def normalize(seq, stats):
    """Map each dimension to [-1, 1]; constant dimensions map to 0."""
    span = stats.o_max - stats.o_min
    safe = np.where(span > 0, span, 1.0)
    scaled = 2.0 * (seq.frames - stats.o_min) / safe - 1.0
    scaled[:, span == 0] = 0.0
    return FeatureSequence(frames=scaled, frame_shift=seq.frame_shift)


def normalize_rows(rows, stats):
    span = stats.o_max - stats.o_min
    safe = np.where(span > 0, span, 1.0)
    scaled = 2.0 * (np.asarray(rows, dtype=np.float64) - stats.o_min) / safe - 1.0
    scaled[:, span == 0] = 0.0
    return scaled
