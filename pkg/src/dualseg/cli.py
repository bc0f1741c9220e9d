"""Command-line pipeline: synth-gen, extract, train-dsae, encode, fit,
evaluate, and plot.

Every stage reads its predecessors' outputs from disk, writes its own
artifacts under --out, and records a stage manifest with content hashes
so stale inputs are detectable.  Progress goes to stderr; all
machine-readable results go to files.  Exit codes: 0 success, 1 usage
error, 2 data error.
"""

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import dsae as dsae_mod
from . import evaluation as eval_mod
from . import features as features_mod
from . import hdphlm as hdphlm_mod
from . import sampler as sampler_mod
from . import synth as synth_mod
from .docio import DocumentError, load_doc, save_doc

_DATA_ERRORS = (corpus_mod.CorpusError, features_mod.FeatureError,
                dsae_mod.DsaeError, hdphlm_mod.ModelError,
                sampler_mod.SamplerError, synth_mod.SynthError,
                eval_mod.EvalError, DocumentError, FileNotFoundError)


class UsageError(Exception):
    pass


def _log(msg):
    print(msg, file=sys.stderr)


# --- configuration ------------------------------------------------------------

DEFAULT_CONFIG = {
    "features": {
        "frame_len": 0.025,
        "frame_shift": 0.01,
        "n_mel_filters": 26,
        "n_cepstra": 13,
        "include_power": True,
        "deltas": 2,
    },
    "coding": "sparse",
    "dsae": {
        "layer_dims": [39, 20, 10, 6],
        "alpha": 0.003,
        "beta": 0.7,
        "eta": 0.5,
        "learning_rate": 0.05,
        "epochs": 2000,
        "seed": 0,
        "pbhl": True,
        "d_z": 3,
        "d_s": 3,
    },
    "hdphlm": {
        "gamma_lm": 10.0,
        "alpha_lm": 10.0,
        "gamma_wm": 10.0,
        "alpha_wm": 10.0,
        "n_words": 7,
        "n_letters": 10,
        "dur_a": 200.0,
        "dur_b": 10.0,
        "mu0": 0.0,
        "sigma0sq": 1.0,
        "kappa0": 0.01,
        "nu0": None,
        "l_max": 8,
        "d_max": None,
    },
    "fit": {"trials": 20, "iters": 100, "seed": 0, "jobs": 1},
    "eval": {"k": 5, "cluster_trials": 20, "seed": 0},
    "synth": {
        "n_speakers": 2,
        "offset_step": 6.0,
        "omega": 4.0,
        "n_sentences": None,
        "seed": 0,
    },
}


def _merge_config(base, override, path="config"):
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise corpus_mod.CorpusError(f"unknown config key {path}.{key}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged[key] = _merge_config(base[key], value, f"{path}.{key}")
        else:
            merged[key] = value
    return merged


def load_config(path):
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path, "r", encoding="utf-8") as fh:
        user = json.load(fh)
    return _merge_config(DEFAULT_CONFIG, user)


def _mfcc_config(cfg):
    f = cfg["features"]
    return features_mod.MfccConfig(
        frame_len=f["frame_len"], frame_shift=f["frame_shift"],
        n_mel_filters=f["n_mel_filters"], n_cepstra=f["n_cepstra"],
        include_power=f["include_power"], deltas=f["deltas"])


def _hyper(cfg):
    h = cfg["hdphlm"]
    return hdphlm_mod.HdpHlmHyper(
        gamma_lm=h["gamma_lm"], alpha_lm=h["alpha_lm"],
        gamma_wm=h["gamma_wm"], alpha_wm=h["alpha_wm"],
        n_words=h["n_words"], n_letters=h["n_letters"],
        dur_a=h["dur_a"], dur_b=h["dur_b"], mu0=h["mu0"],
        sigma0sq=h["sigma0sq"], kappa0=h["kappa0"], nu0=h["nu0"],
        l_max=h["l_max"], d_max=h["d_max"])


# --- stage manifests ------------------------------------------------------------

def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_stage_manifest(out_dir, stage, inputs, outputs):
    doc = {
        "stage": stage,
        "inputs": {str(p): _sha256(p) for p in sorted(str(x) for x in inputs)},
        "outputs": {
            str(p.relative_to(out_dir)): _sha256(p)
            for p in sorted(outputs, key=str)
        },
    }
    with open(Path(out_dir) / "stage_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _collect_files(out_dir):
    out_dir = Path(out_dir)
    return [p for p in sorted(out_dir.rglob("*"))
            if p.is_file() and p.name != "stage_manifest.json"]


# --- stages -----------------------------------------------------------------------

def cmd_synth_gen(args):
    cfg = load_config(args.config)
    s = cfg["synth"]
    config = synth_mod.default_config(
        n_speakers=s["n_speakers"], offset_step=s["offset_step"], seed=s["seed"])
    if s["omega"] is not None:
        config.omega = np.full(config.n_letters, float(s["omega"]))
    if s["n_sentences"] is not None:
        config.n_sentences = int(s["n_sentences"])
    corpus = synth_mod.generate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synth_mod.write_corpus(corpus, out, coding=cfg["coding"])
    _write_stage_manifest(out, "synth-gen", [], _collect_files(out))
    _log(f"synth-gen: wrote {len(corpus.utterances)} utterances to {out}")
    return 0


def cmd_extract(args):
    cfg = load_config(args.config)
    mfcc_cfg = _mfcc_config(cfg)
    manifest_path = Path(args.manifest)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    base = manifest_path.parent
    entries = []
    for entry in manifest["utterances"]:
        src = base / entry["path"]
        utt_id = entry.get("id", src.stem)
        if src.suffix.lower() == ".wav":
            signal = corpus_mod.load_wav(src)
            seq = features_mod.extract_mfcc(signal, mfcc_cfg)
        else:
            seq = corpus_mod.read_features_csv(
                src, frame_shift=manifest.get("frame_shift", 0.01))
        rel = f"features/{utt_id}.csv"
        corpus_mod.write_features_csv(seq, out / rel)
        new_entry = {"id": utt_id, "path": rel, "speaker": entry["speaker"]}
        for key, suffix in (("letter_labels", "letters"), ("word_labels", "words")):
            if entry.get(key):
                labels = corpus_mod.read_labels_csv(base / entry[key])
                rel_l = f"labels/{utt_id}_{suffix}.csv"
                corpus_mod.write_labels_csv(labels, out / rel_l)
                new_entry[key] = rel_l
        entries.append(new_entry)
    new_manifest = {
        "coding": manifest.get("coding", cfg["coding"]),
        "frame_shift": mfcc_cfg.frame_shift,
        "utterances": entries,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(new_manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_stage_manifest(out, "extract", [manifest_path], _collect_files(out))
    _log(f"extract: wrote {len(entries)} feature files to {out}")
    return 0


def cmd_train_dsae(args):
    cfg = load_config(args.config)
    d = cfg["dsae"]
    corpus = corpus_mod.build_corpus(args.manifest)
    rows = corpus.frames_matrix()
    if rows.shape[1] != d["layer_dims"][0]:
        raise dsae_mod.DsaeError(
            f"feature dimension {rows.shape[1]} does not match configured "
            f"layer_dims[0]={d['layer_dims'][0]}")
    stats = features_mod.fit_normalizer(rows)
    normed = features_mod.normalize_rows(rows, stats)
    hyper = dsae_mod.SaeHyper(alpha=d["alpha"], beta=d["beta"], eta=d["eta"])
    schedule = dsae_mod.TrainSchedule(
        learning_rate=d["learning_rate"], epochs=d["epochs"], seed=d["seed"])
    _log(f"train-dsae: training stack {d['layer_dims']} on {normed.shape[0]} frames")
    model = dsae_mod.train_stack(normed, d["layer_dims"], hyper, schedule)
    if d["pbhl"]:
        _log(f"train-dsae: training parametric-bias layer "
             f"(d_z={d['d_z']}, d_s={d['d_s']})")
        codes = corpus.codes_per_frame()
        model = dsae_mod.train_pbhl(model, normed, codes, d["d_z"], d["d_s"],
                                    hyper, schedule)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats.save(out / "normalizer.txt")
    dsae_mod.save_model(model, out / "dsae_model.txt")
    _write_stage_manifest(out, "train-dsae", [Path(args.manifest)],
                          _collect_files(out))
    _log(f"train-dsae: saved model to {out}")
    return 0


def cmd_encode(args):
    corpus = corpus_mod.build_corpus(args.manifest)
    model_dir = Path(args.model)
    stats = features_mod.NormStats.load(model_dir / "normalizer.txt")
    model = dsae_mod.load_model(model_dir / "dsae_model.txt")
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for utt in corpus.utterances:
        normed = features_mod.normalize_rows(utt.features.frames, stats)
        if model.final is not None:
            encoded = dsae_mod.encode_z(model, normed, corpus.pb_codes[utt.speaker])
        else:
            encoded = dsae_mod.encode_stack(model, normed)
        rel = f"features/{utt.id}.csv"
        corpus_mod.write_features_csv(
            corpus_mod.FeatureSequence(frames=encoded,
                                       frame_shift=utt.features.frame_shift),
            out / rel)
        entry = {"id": utt.id, "path": rel, "speaker": f"spk{utt.speaker}"}
        if utt.letter_truth is not None:
            rel_l = f"labels/{utt.id}_letters.csv"
            corpus_mod.write_labels_csv(utt.letter_truth, out / rel_l)
            entry["letter_labels"] = rel_l
        if utt.word_truth is not None:
            rel_w = f"labels/{utt.id}_words.csv"
            corpus_mod.write_labels_csv(utt.word_truth, out / rel_w)
            entry["word_labels"] = rel_w
        entries.append(entry)
    manifest = {"coding": "sparse", "frame_shift":
                corpus.utterances[0].features.frame_shift, "utterances": entries}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_stage_manifest(out, "encode",
                          [Path(args.manifest), model_dir / "normalizer.txt",
                           model_dir / "dsae_model.txt"],
                          _collect_files(out))
    _log(f"encode: wrote {len(entries)} encoded sequences to {out}")
    return 0


def cmd_fit(args):
    cfg = load_config(args.config)
    f = cfg["fit"]
    n_trials = args.trials if args.trials is not None else f["trials"]
    n_iters = args.iters if args.iters is not None else f["iters"]
    n_jobs = args.jobs if args.jobs is not None else f["jobs"]
    base_seed = args.seed if args.seed is not None else f["seed"]
    corpus = corpus_mod.build_corpus(args.manifest)
    hyper = _hyper(cfg)
    seeds = [base_seed + i for i in range(n_trials)]
    _log(f"fit: {n_trials} trials x {n_iters} iterations "
         f"({len(corpus.utterances)} utterances, jobs={n_jobs})")
    report = sampler_mod.fit(
        corpus, hyper, n_trials=n_trials, n_iters=n_iters, seeds=seeds,
        n_jobs=n_jobs,
        progress=lambda done, total: _log(f"fit: trial {done}/{total} done"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "map_index": report.map_index,
        "trials": [
            {
                "seed": t.seed,
                "ok": t.ok,
                "error": t.error,
                "loglik_trace": t.loglik_trace if t.ok else None,
                "final_loglik": float(t.loglik_trace[-1]) if t.ok else None,
            }
            for t in report.trials
        ],
    }
    save_doc(out / "fit_report.json", "fit-report", payload)
    for idx, trial in enumerate(report.trials):
        if not trial.ok:
            continue
        trial_dir = out / f"trial_{idx:03d}"
        (trial_dir / "labels").mkdir(parents=True, exist_ok=True)
        hdphlm_mod.save_model(trial.model, trial_dir / "model.txt")
        for utt, ustate in zip(corpus.utterances, trial.state.utts):
            letters = eval_mod.frame_letter_labels(ustate)
            words = eval_mod.frame_word_labels(ustate)
            with open(trial_dir / "labels" / f"{utt.id}.csv", "w",
                      encoding="utf-8") as fh:
                fh.write("frame,letter,word\n")
                for t, (l, w) in enumerate(zip(letters, words)):
                    fh.write(f"{t},{l},{w}\n")
    _write_stage_manifest(out, "fit", [Path(args.manifest)], _collect_files(out))
    map_ll = report.map_trial.loglik_trace[-1]
    _log(f"fit: MAP trial {report.map_index} (final joint loglik {map_ll:.3f})")
    return 0


def _read_fit_labels(fit_dir, corpus):
    """Per-trial concatenated (letter, word) label vectors from a fit dir."""
    payload = load_doc(Path(fit_dir) / "fit_report.json", "fit-report")
    trials = []
    for idx, meta in enumerate(payload["trials"]):
        if not meta["ok"]:
            trials.append(None)
            continue
        letters, words = [], []
        for utt in corpus.utterances:
            path = Path(fit_dir) / f"trial_{idx:03d}" / "labels" / f"{utt.id}.csv"
            rows = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64,
                              ndmin=2)
            letters.append(rows[:, 1])
            words.append(rows[:, 2])
        trials.append((np.concatenate(letters), np.concatenate(words)))
    return payload["map_index"], trials


def cmd_evaluate(args):
    cfg = load_config(args.config)
    corpus = corpus_mod.build_corpus(args.corpus)
    have_truth = all(u.letter_truth is not None for u in corpus.utterances)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [Path(args.corpus)]
    outputs = []

    if args.fit:
        rows = []
        for spec in args.fit:
            label, fit_dir = _parse_labeled(spec)
            inputs.append(Path(fit_dir) / "fit_report.json")
            if not have_truth:
                rows.append(eval_mod.EvalReport(method=label, unscored=True))
                continue
            truth_l = np.concatenate([u.letter_truth for u in corpus.utterances])
            truth_w = np.concatenate([u.word_truth for u in corpus.utterances])
            map_index, trials = _read_fit_labels(fit_dir, corpus)
            per_trial = {"letter": [], "word": []}
            map_scores = None
            for idx, labels in enumerate(trials):
                if labels is None:
                    continue
                scores = {"letter": eval_mod.ari(labels[0], truth_l),
                          "word": eval_mod.ari(labels[1], truth_w)}
                per_trial["letter"].append(scores["letter"])
                per_trial["word"].append(scores["word"])
                if idx == map_index:
                    map_scores = scores
            rows.append(eval_mod.EvalReport(
                method=label,
                scores={"letter": float(np.mean(per_trial["letter"])),
                        "word": float(np.mean(per_trial["word"]))},
                per_trial=per_trial, map_scores=map_scores))
        path = out / "table2.csv"
        eval_mod.write_report_csv(rows, ["letter", "word"], path)
        outputs.append(path)
        _log(f"evaluate: wrote {path}")

    if args.encoded:
        variants = {}
        for spec in args.encoded:
            label, enc_dir = _parse_labeled(spec)
            inputs.append(Path(enc_dir) / "manifest.json")
            enc_corpus = corpus_mod.build_corpus(Path(enc_dir) / "manifest.json")
            if not all(u.letter_truth is not None for u in enc_corpus.utterances):
                raise eval_mod.EvalError(
                    f"encoded corpus {enc_dir} lacks letter labels")
            x = enc_corpus.frames_matrix()
            y = np.concatenate([u.letter_truth for u in enc_corpus.utterances])
            variants[label] = [(x, y)]
        e = cfg["eval"]
        rows = eval_mod.experiment1_report(
            variants, k=e["k"], n_trials=e["cluster_trials"], seed=e["seed"])
        path = out / "table1.csv"
        eval_mod.write_report_csv(rows, ["kmeans", "gmm"], path)
        outputs.append(path)
        _log(f"evaluate: wrote {path}")

    if not outputs:
        raise UsageError("evaluate needs at least one --fit or --encoded input")
    _write_stage_manifest(out, "evaluate", inputs, outputs)
    return 0


def _parse_labeled(spec):
    if "=" not in spec:
        raise UsageError(f"expected LABEL=DIR, got {spec!r}")
    label, _, path = spec.partition("=")
    return label, path


def cmd_plot(args):
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "dualseg"
    corpus = corpus_mod.build_corpus(args.corpus)
    if not all(u.letter_truth is not None for u in corpus.utterances):
        raise eval_mod.EvalError("plot needs letter labels in the corpus")
    x = corpus.frames_matrix()
    letters = np.concatenate([u.letter_truth for u in corpus.utterances])
    speakers = np.concatenate([
        np.full(u.features.n_frames, u.speaker) for u in corpus.utterances])
    proj = eval_mod.pca2(x)
    markers = ["o", "^", "s", "D", "v", "P", "*", "X"]
    fig, ax = plt.subplots(figsize=(6, 5))
    cmap = plt.get_cmap("tab10")
    for spk in np.unique(speakers):
        for letter in np.unique(letters):
            sel = (speakers == spk) & (letters == letter)
            if not np.any(sel):
                continue
            ax.scatter(proj[sel, 0], proj[sel, 1], s=6,
                       color=cmap(int(letter) % 10),
                       marker=markers[int(spk) % len(markers)],
                       label=f"letter {letter} / spk {spk}", alpha=0.6,
                       linewidths=0)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(fontsize=5, markerscale=1.5, ncol=2)
    fig.tight_layout()
    fig.savefig(args.out, metadata={"Date": None})
    plt.close(fig)
    _log(f"plot: wrote {args.out}")
    return 0


# --- argument parsing ----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="dualseg",
                     description="Unsupervised word/letter unit discovery pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("extract", help="extract MFCC features (or copy CSVs)")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-dsae", help="fit normalizer and train the autoencoder")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_dsae)

    p = sub.add_parser("encode", help="encode features with a trained model")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="train-dsae output directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("fit", help="run blocked Gibbs trials")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="score fits and encodings against truth")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True, help="manifest with truth labels")
    p.add_argument("--fit", action="append", metavar="LABEL=DIR")
    p.add_argument("--encoded", action="append", metavar="LABEL=DIR")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="PCA scatter of a corpus, colored by letter")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
