"""Ground-truth corpus generation with controllable speaker distortion.

Sentences are word sequences from a fixed template list; words are fixed
letter strings; letters emit Gaussian frames for 1 + Poisson(rate)
frames.  Each speaker applies an affine distortion (offset plus diagonal
scale) to the letter Gaussians, which is the minimal model of
speaker-dependent feature shift.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (Corpus, FeatureSequence, Utterance, speaker_codes,
                     write_features_csv, write_labels_csv)


class SynthError(Exception):
    pass


# letters a, i, u, e, o = 0..4; words aioi, aue, ao, ie, uo = 0..4
_WORDS = [(0, 1, 4, 1), (0, 2, 3), (0, 4), (1, 3), (2, 4)]
_THREE_WORD_TEMPLATES = [(4, 1, 3), (3, 3, 4), (1, 2, 3), (2, 3, 2), (0, 4, 3)]


@dataclass
class SynthConfig:
    letter_means: np.ndarray
    letter_covs: np.ndarray
    omega: np.ndarray                     # shifted-Poisson duration rates
    words: list[tuple[int, ...]]
    templates: list[tuple[int, ...]]      # sentences as word-index tuples
    n_speakers: int = 2
    speaker_offsets: np.ndarray = None
    speaker_scales: np.ndarray = None
    n_sentences: int = None               # per speaker; defaults to len(templates)
    seed: int = 0

    def __post_init__(self):
        self.letter_means = np.asarray(self.letter_means, dtype=np.float64)
        self.letter_covs = np.asarray(self.letter_covs, dtype=np.float64)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        n_letters, dim = self.letter_means.shape
        self.words = [tuple(int(l) for l in w) for w in self.words]
        self.templates = [tuple(int(w) for w in t) for t in self.templates]
        for w in self.words:
            if any(not 0 <= l < n_letters for l in w):
                raise SynthError(f"word {w} uses unknown letters")
        for t in self.templates:
            if any(not 0 <= w < len(self.words) for w in t):
                raise SynthError(f"template {t} uses unknown words")
        if self.speaker_offsets is None:
            self.speaker_offsets = np.zeros((self.n_speakers, dim))
        if self.speaker_scales is None:
            self.speaker_scales = np.ones((self.n_speakers, dim))
        self.speaker_offsets = np.asarray(self.speaker_offsets, dtype=np.float64)
        self.speaker_scales = np.asarray(self.speaker_scales, dtype=np.float64)
        if np.any(self.speaker_scales <= 0):
            raise SynthError("speaker scales must be positive")
        if self.n_sentences is None:
            self.n_sentences = len(self.templates)

    @property
    def n_letters(self):
        return self.letter_means.shape[0]

    @property
    def dim(self):
        return self.letter_means.shape[1]


def default_config(n_speakers=2, offset_step=6.0, seed=0):
    """Five well-separated letters, the five-word inventory, 30 templates.

    Letters sit on a pentagon in the first two dimensions; speakers are
    displaced along the third, so speaker identity occupies its own
    direction of the feature space.
    """
    if not 1 <= n_speakers <= 4:
        raise SynthError("default covers 1..4 speakers")
    angles = 2.0 * np.pi * np.arange(5) / 5.0
    means = np.column_stack([5.0 * np.cos(angles), 5.0 * np.sin(angles),
                             np.zeros(5)])
    covs = np.tile(0.35 * np.eye(3), (5, 1, 1))
    omega = np.full(5, 4.0)
    templates = [(i, j) for i in range(5) for j in range(5)]
    templates += _THREE_WORD_TEMPLATES
    offsets = np.zeros((n_speakers, 3))
    offsets[:, 2] = offset_step * np.arange(n_speakers)
    return SynthConfig(
        letter_means=means, letter_covs=covs, omega=omega,
        words=[tuple(w) for w in _WORDS], templates=templates,
        n_speakers=n_speakers, speaker_offsets=offsets,
        speaker_scales=np.ones((n_speakers, 3)), seed=seed,
    )


def template_for(config, speaker, sentence_index):
    """The word sequence used for one (speaker, sentence) slot."""
    return config.templates[sentence_index % len(config.templates)]


def generate(config):
    """Draw a corpus with frame-level letter and word truth labels."""
    rng = np.random.default_rng(config.seed)
    chols = np.linalg.cholesky(config.letter_covs)
    utterances = []
    for spk in range(config.n_speakers):
        offset = config.speaker_offsets[spk]
        scale = config.speaker_scales[spk]
        for s_idx in range(config.n_sentences):
            template = template_for(config, spk, s_idx)
            frames, letter_labels, word_labels = [], [], []
            for word_id in template:
                for letter in config.words[word_id]:
                    dur = 1 + int(rng.poisson(config.omega[letter]))
                    noise = rng.standard_normal((dur, config.dim))
                    raw = config.letter_means[letter] + noise @ chols[letter].T
                    frames.append(raw * scale + offset)
                    letter_labels.extend([letter] * dur)
                    word_labels.extend([word_id] * dur)
            utterances.append(Utterance(
                id=f"s{spk:02d}_u{s_idx:03d}",
                speaker=spk,
                features=FeatureSequence(frames=np.vstack(frames)),
                letter_truth=np.array(letter_labels, dtype=np.int64),
                word_truth=np.array(word_labels, dtype=np.int64),
            ))
    return Corpus(utterances=utterances, n_speakers=config.n_speakers,
                  pb_codes=speaker_codes("sparse", config.n_speakers))


def decode_word_sequence(letter_truth, word_truth, words):
    """Recover the template word sequence from frame labels.

    Runs of word_truth give word types; a run covering r repetitions of
    the same word is split by matching the word's letter string, which is
    unambiguous because no inventory word starts with the letter it ends
    with.
    """
    letter_truth = np.asarray(letter_truth)
    word_truth = np.asarray(word_truth)
    out = []
    boundaries = np.flatnonzero(np.diff(word_truth)) + 1
    for chunk_l, chunk_w in zip(np.split(letter_truth, boundaries),
                                np.split(word_truth, boundaries)):
        word_id = int(chunk_w[0])
        string = words[word_id]
        run_letters = chunk_l[np.concatenate([[True], np.diff(chunk_l) != 0])]
        if len(run_letters) % len(string) != 0:
            raise SynthError("letter runs do not tile the word string")
        reps = len(run_letters) // len(string)
        for r in range(reps):
            piece = tuple(int(l) for l in run_letters[r * len(string):(r + 1) * len(string)])
            if piece != tuple(string):
                raise SynthError("letter runs disagree with the word string")
            out.append(word_id)
    return tuple(out)


def write_corpus(corpus, out_dir, coding="sparse", frame_shift=0.01):
    """Emit manifest + feature CSVs + label CSVs loadable by build_corpus."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for utt in corpus.utterances:
        feat_rel = f"features/{utt.id}.csv"
        write_features_csv(utt.features, out_dir / feat_rel)
        entry = {"id": utt.id, "path": feat_rel, "speaker": f"spk{utt.speaker}"}
        if utt.letter_truth is not None:
            rel = f"labels/{utt.id}_letters.csv"
            write_labels_csv(utt.letter_truth, out_dir / rel)
            entry["letter_labels"] = rel
        if utt.word_truth is not None:
            rel = f"labels/{utt.id}_words.csv"
            write_labels_csv(utt.word_truth, out_dir / rel)
            entry["word_labels"] = rel
        entries.append(entry)
    manifest = {"coding": coding, "frame_shift": frame_shift, "utterances": entries}
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path
