import json
import wave

import numpy as np
import pytest

from dualseg.corpus import (Corpus, CorpusError, FeatureSequence, Utterance,
                            build_corpus, load_wav, read_features_csv,
                            read_labels_csv, save_wav, speaker_codes,
                            write_features_csv, write_labels_csv, Signal)


def _write_wav(path, samples_int16, rate=16000, channels=1):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        if channels == 2:
            samples_int16 = np.repeat(samples_int16, 2)
        wf.writeframes(np.asarray(samples_int16, dtype="<i2").tobytes())


class TestLoadWav:
    def test_silence(self, tmp_path):
        path = tmp_path / "sil.wav"
        _write_wav(path, np.zeros(16000, dtype=np.int16))
        sig = load_wav(path)
        assert sig.sample_rate == 16000
        assert sig.samples.shape == (16000,)
        assert np.all(sig.samples == 0.0)

    def test_full_scale_square_wave_scaling(self, tmp_path):
        # integer-to-float scaling rule applied by hand: x / 32768
        path = tmp_path / "sq.wav"
        wave_int = np.tile(np.array([32767, -32768], dtype=np.int16), 100)
        _write_wav(path, wave_int)
        sig = load_wav(path)
        assert sig.samples.max() == 32767.0 / 32768.0
        assert sig.samples.min() == -1.0

    def test_stereo_rejected(self, tmp_path):
        path = tmp_path / "st.wav"
        _write_wav(path, np.zeros(100, dtype=np.int16), channels=2)
        with pytest.raises(CorpusError, match="channel count"):
            load_wav(path)

    def test_wrong_sample_width_rejected(self, tmp_path):
        path = tmp_path / "w8.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(1)
            wf.setframerate(8000)
            wf.writeframes(bytes(100))
        with pytest.raises(CorpusError, match="encoding"):
            load_wav(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "ok.wav"
        _write_wav(path, np.zeros(1000, dtype=np.int16))
        data = path.read_bytes()
        bad = tmp_path / "trunc.wav"
        bad.write_bytes(data[: len(data) - 500])
        with pytest.raises(CorpusError):
            load_wav(bad)

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        sig = Signal(samples=rng.uniform(-0.5, 0.5, 2000), sample_rate=16000)
        path = tmp_path / "rt.wav"
        save_wav(sig, path)
        back = load_wav(path)
        assert np.max(np.abs(back.samples - sig.samples)) < 1.0 / 32768.0


class TestFeatureCsv:
    def test_round_trip_identity(self, tmp_path):
        seq = FeatureSequence(frames=np.array([[1.5, -2.25, 3.0],
                                               [0.1, 1e-13, -7.125]]))
        path = tmp_path / "f.csv"
        write_features_csv(seq, path)
        back = read_features_csv(path)
        assert np.max(np.abs(back.frames - seq.frames)) <= 1e-12

    def test_round_trip_random(self, tmp_path):
        rng = np.random.default_rng(3)
        seq = FeatureSequence(frames=rng.standard_normal((40, 13)))
        path = tmp_path / "f.csv"
        write_features_csv(seq, path)
        back = read_features_csv(path)
        assert np.array_equal(back.frames, seq.frames)

    def test_empty_body_rejected(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("dim_0,dim_1\n")
        with pytest.raises(CorpusError, match="no frames"):
            read_features_csv(path)

    def test_ragged_row_names_index(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("dim_0,dim_1,dim_2\n1,2,3\n4,5\n")
        with pytest.raises(CorpusError, match="row 1"):
            read_features_csv(path)

    def test_non_numeric_cell_names_index(self, tmp_path):
        path = tmp_path / "n.csv"
        path.write_text("dim_0\n1.0\nbad\n")
        with pytest.raises(CorpusError, match="row 1"):
            read_features_csv(path)

    def test_labels_round_trip(self, tmp_path):
        labels = np.array([0, 0, 1, 3, 3, 2])
        path = tmp_path / "l.csv"
        write_labels_csv(labels, path)
        assert np.array_equal(read_labels_csv(path), labels)


class TestSpeakerCodes:
    def test_sparse_four_speakers(self):
        codes = speaker_codes("sparse", 4)
        assert codes.tolist() == [[0, 0, 0, 1], [0, 0, 1, 0],
                                  [0, 1, 0, 0], [1, 0, 0, 0]]

    def test_coding1_four_speakers(self):
        codes = speaker_codes("coding1", 4)
        assert codes.tolist() == [[0, 0, 0, 1], [0, 0, 1, 0],
                                  [0, 0, 1, 1], [0, 1, 0, 0]]

    def test_coding2_four_speakers(self):
        codes = speaker_codes("coding2", 4)
        assert codes.tolist() == [[0, 0, 1, 1], [0, 1, 1, 0],
                                  [1, 1, 0, 0], [1, 0, 0, 1]]

    def test_sparse_single_speaker(self):
        assert speaker_codes("sparse", 1).tolist() == [[1]]

    def test_fixed_schemes_require_four_speakers(self):
        with pytest.raises(CorpusError):
            speaker_codes("coding1", 3)

    def test_unknown_scheme(self):
        with pytest.raises(CorpusError, match="unknown coding scheme"):
            speaker_codes("mystery", 4)

    def test_rows_distinct_for_all_sizes(self):
        for n in range(1, 9):
            codes = speaker_codes("sparse", n)
            assert len({tuple(r) for r in codes}) == n


def _manifest(tmp_path, entries, coding="sparse"):
    path = tmp_path / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"coding": coding, "utterances": entries}, fh)
    return path


class TestBuildCorpus:
    def _features(self, tmp_path, name, rows=4, dim=3, seed=0):
        rng = np.random.default_rng(seed)
        seq = FeatureSequence(frames=rng.standard_normal((rows, dim)))
        write_features_csv(seq, tmp_path / name)
        return name

    def test_speakers_sorted_lexicographically(self, tmp_path):
        for i, spk in enumerate(["kaori", "hana", "mio", "nao"]):
            self._features(tmp_path, f"u{i}.csv", seed=i)
        entries = [
            {"path": "u0.csv", "speaker": "kaori"},
            {"path": "u1.csv", "speaker": "hana"},
            {"path": "u2.csv", "speaker": "mio"},
            {"path": "u3.csv", "speaker": "nao"},
        ]
        corpus = build_corpus(_manifest(tmp_path, entries))
        # hana < kaori < mio < nao
        assert [u.speaker for u in corpus.utterances] == [1, 0, 2, 3]
        assert corpus.n_speakers == 4
        assert corpus.pb_codes.shape == (4, 4)

    def test_deterministic_given_manifest(self, tmp_path):
        self._features(tmp_path, "a.csv", seed=1)
        entries = [{"path": "a.csv", "speaker": "solo"}]
        path = _manifest(tmp_path, entries)
        c1 = build_corpus(path)
        c2 = build_corpus(path)
        assert [u.speaker for u in c1.utterances] == [u.speaker for u in c2.utterances]
        assert np.array_equal(c1.pb_codes, c2.pb_codes)
        assert np.array_equal(c1.utterances[0].features.frames,
                              c2.utterances[0].features.frames)

    def test_labels_loaded_and_length_checked(self, tmp_path):
        self._features(tmp_path, "a.csv", rows=4)
        write_labels_csv([0, 1, 1, 2], tmp_path / "a_l.csv")
        entries = [{"path": "a.csv", "speaker": "s", "letter_labels": "a_l.csv"}]
        corpus = build_corpus(_manifest(tmp_path, entries))
        assert np.array_equal(corpus.utterances[0].letter_truth, [0, 1, 1, 2])

        write_labels_csv([0, 1], tmp_path / "bad.csv")
        entries = [{"path": "a.csv", "speaker": "s", "letter_labels": "bad.csv"}]
        with pytest.raises(CorpusError, match="length"):
            build_corpus(_manifest(tmp_path, entries))

    def test_missing_file_and_unknown_scheme(self, tmp_path):
        with pytest.raises(CorpusError, match="missing feature file"):
            build_corpus(_manifest(tmp_path, [{"path": "nope.csv", "speaker": "s"}]))
        self._features(tmp_path, "a.csv")
        with pytest.raises(CorpusError, match="unknown coding scheme"):
            build_corpus(_manifest(tmp_path, [{"path": "a.csv", "speaker": "s"}],
                                   coding="zebra"))

    def test_pb_rows_distinct_enforced(self):
        seq = FeatureSequence(frames=np.zeros((2, 2)))
        utt = Utterance(id="u", speaker=0, features=seq)
        with pytest.raises(CorpusError, match="distinct"):
            Corpus(utterances=[utt], n_speakers=2,
                   pb_codes=np.array([[1.0, 0.0], [1.0, 0.0]]))

    def test_uncoded_speaker_rejected(self):
        seq = FeatureSequence(frames=np.zeros((2, 2)))
        utt = Utterance(id="u", speaker=3, features=seq)
        with pytest.raises(CorpusError, match="uncoded"):
            Corpus(utterances=[utt], n_speakers=2)
