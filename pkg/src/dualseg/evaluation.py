"""Clustering baselines, ARI scoring, PCA, and experiment report tables."""

from dataclasses import dataclass, field

import numpy as np

from .sampler import _lse


class EvalError(Exception):
    pass


# --- adjusted Rand index -------------------------------------------------------

def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def ari(labels_a, labels_b):
    """Adjusted Rand index from the contingency table."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise EvalError(f"label lengths differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise EvalError("need at least two samples")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    index = _comb2(table).sum()
    row = _comb2(table.sum(axis=1)).sum()
    col = _comb2(table.sum(axis=0)).sum()
    expected = row * col / _comb2(n)
    max_index = 0.5 * (row + col)
    if max_index == expected:
        return 1.0  # both labelings are trivial partitions
    return float((index - expected) / (max_index - expected))


# --- k-means with k-means++ seeding ---------------------------------------------

def _kmeanspp_init(data, k, rng):
    n = data.shape[0]
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c] = data[rng.integers(n)]
            continue
        probs = np.cumsum(d2 / total)
        idx = int(np.searchsorted(probs, rng.random(), side="right"))
        centers[c] = data[min(idx, n - 1)]
        d2 = np.minimum(d2, np.sum((data - centers[c]) ** 2, axis=1))
    return centers


def kmeans(data, k, seed=0, max_iter=300, return_trace=False):
    """Lloyd's algorithm; empty clusters are re-seeded with far points."""
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if n < k:
        raise EvalError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(data, k, rng)
    labels = None
    trace = []
    for _ in range(max_iter):
        d2 = np.sum((data[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        assigned = d2[np.arange(n), new_labels]
        for c in range(k):
            if not np.any(new_labels == c):
                far = int(np.argmax(assigned))
                new_labels[far] = c
                assigned[far] = 0.0
        trace.append(float(assigned.sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            centers[c] = data[labels == c].mean(axis=0)
    if return_trace:
        return labels, np.array(trace)
    return labels


# --- Gaussian mixture EM ----------------------------------------------------------

def _mvn_logpdf(data, mean, cov):
    d = mean.shape[0]
    chol = np.linalg.cholesky(cov)
    diff = (data - mean).T
    u = np.linalg.solve(chol, diff)
    return -0.5 * (d * np.log(2.0 * np.pi)
                   + 2.0 * np.log(np.diag(chol)).sum()
                   + np.sum(u * u, axis=0))


def gmm_em(data, k, seed=0, max_iter=200, reg=1e-6, return_trace=False):
    """EM with full covariances; init from k-means; argmax-responsibility labels."""
    data = np.asarray(data, dtype=np.float64)
    n, d = data.shape
    if n < k:
        raise EvalError(f"need at least k={k} points, got {n}")
    base_cov = np.cov(data.T).reshape(d, d) + reg * np.eye(d)
    init = kmeans(data, k, seed=seed)
    weights = np.empty(k)
    means = np.empty((k, d))
    covs = np.empty((k, d, d))
    for c in range(k):
        members = data[init == c]
        weights[c] = len(members) / n
        means[c] = members.mean(axis=0)
        covs[c] = np.cov(members.T, bias=True).reshape(d, d) + reg * np.eye(d)
        if not _is_spd(covs[c]):
            covs[c] = base_cov.copy()
    trace = []
    log_resp = None
    for _ in range(max_iter):
        log_resp = np.column_stack([
            np.log(max(weights[c], 1e-300)) + _mvn_logpdf(data, means[c], covs[c])
            for c in range(k)
        ])
        norms = _lse(log_resp, axis=1)
        ll = float(norms.sum())
        trace.append(ll)
        resp = np.exp(log_resp - norms[:, None])
        counts = resp.sum(axis=0)
        weights = counts / n
        for c in range(k):
            if counts[c] < 1e-10:
                means[c] = data.mean(axis=0)
                covs[c] = base_cov.copy()
                continue
            means[c] = resp[:, c] @ data / counts[c]
            diff = data - means[c]
            covs[c] = (resp[:, c][:, None] * diff).T @ diff / counts[c] + reg * np.eye(d)
            if not _is_spd(covs[c]):
                covs[c] = base_cov.copy()
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < 1e-10:
            break
    labels = np.argmax(log_resp, axis=1)
    if return_trace:
        return labels, np.array(trace)
    return labels


def _is_spd(cov):
    try:
        np.linalg.cholesky(cov)
        return True
    except np.linalg.LinAlgError:
        return False


# --- PCA --------------------------------------------------------------------------

def pca2(data):
    """Project onto the top-2 principal components, sign-fixed."""
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] < 2:
        raise EvalError("need at least two rows")
    centered = data - data.mean(axis=0)
    cov = centered.T @ centered / (data.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    components = eigvecs[:, np.argsort(eigvals)[::-1][:2]]
    if components.shape[1] < 2:
        components = np.pad(components, ((0, 0), (0, 2 - components.shape[1])))
    for c in range(2):
        pivot = np.argmax(np.abs(components[:, c]))
        if components[pivot, c] < 0:
            components[:, c] = -components[:, c]
    return centered @ components


# --- frame-level labels from a sampled state ---------------------------------------

def frame_letter_labels(ustate):
    """Per-frame letter ids implied by a sampled utterance state."""
    return np.concatenate([
        np.repeat(letters, durs)
        for letters, durs in zip(ustate.letters, ustate.letter_durs)
    ])


def frame_word_labels(ustate):
    """Per-frame word-slot ids implied by a sampled utterance state."""
    return np.repeat(ustate.z, ustate.durs)


def corpus_letter_labels(state):
    return np.concatenate([frame_letter_labels(u) for u in state.utts])


def corpus_word_labels(state):
    return np.concatenate([frame_word_labels(u) for u in state.utts])


# --- linear readout probe -----------------------------------------------------------

def linear_readout_accuracy(features, targets, seed=0, train_frac=0.7,
                            epochs=300, learning_rate=0.5):
    """Held-out accuracy of a multinomial logistic readout."""
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets)
    classes, y = np.unique(targets, return_inverse=True)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    cut = int(round(train_frac * len(y)))
    train, test = order[:cut], order[cut:]
    mu = features[train].mean(axis=0)
    sd = features[train].std(axis=0)
    sd[sd == 0] = 1.0
    x = np.hstack([(features - mu) / sd, np.ones((len(y), 1))])
    w = np.zeros((len(classes), x.shape[1]))
    onehot = np.eye(len(classes))[y[train]]
    for _ in range(epochs):
        logits = x[train] @ w.T
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = (p - onehot).T @ x[train] / len(train)
        w -= learning_rate * grad
    pred = np.argmax(x[test] @ w.T, axis=1)
    return float(np.mean(pred == y[test]))


# --- experiment report assembly ------------------------------------------------------

@dataclass
class EvalReport:
    """One table row: a method with its scores and per-trial detail."""

    method: str
    scores: dict = field(default_factory=dict)
    per_trial: dict = field(default_factory=dict)
    map_scores: dict | None = None
    unscored: bool = False


def experiment1_report(variants, k=5, n_trials=20, seed=0):
    """Frame-clustering table: mean k-means/GMM ARI per feature variant.

    ``variants`` maps a method name to a list of (features, truth) pairs;
    multi-entry variants (the per-speaker upper limit) average their
    entries' scores.
    """
    rows = []
    for name, pairs in variants.items():
        per_trial = {"kmeans": [], "gmm": []}
        for trial in range(n_trials):
            trial_seed = seed + trial
            km = float(np.mean([ari(kmeans(x, k, seed=trial_seed), y)
                                for x, y in pairs]))
            gm = float(np.mean([ari(gmm_em(x, k, seed=trial_seed), y)
                                for x, y in pairs]))
            per_trial["kmeans"].append(km)
            per_trial["gmm"].append(gm)
        rows.append(EvalReport(
            method=name,
            scores={"kmeans": float(np.mean(per_trial["kmeans"])),
                    "gmm": float(np.mean(per_trial["gmm"]))},
            per_trial=per_trial,
        ))
    return rows


def experiment2_report(fit_report, corpus, method="discovery"):
    """Letter/word ARI rows (trial mean and MAP) for one fitted model."""
    have_truth = all(u.letter_truth is not None and u.word_truth is not None
                     for u in corpus.utterances)
    if not have_truth:
        return [EvalReport(method=method, unscored=True)]
    truth_letters = np.concatenate([u.letter_truth for u in corpus.utterances])
    truth_words = np.concatenate([u.word_truth for u in corpus.utterances])
    per_trial = {"letter": [], "word": []}
    map_scores = None
    for idx, trial in enumerate(fit_report.trials):
        if not trial.ok:
            continue
        letters = corpus_letter_labels(trial.state)
        words = corpus_word_labels(trial.state)
        scores = {"letter": ari(letters, truth_letters),
                  "word": ari(words, truth_words)}
        per_trial["letter"].append(scores["letter"])
        per_trial["word"].append(scores["word"])
        if idx == fit_report.map_index:
            map_scores = scores
    return [EvalReport(
        method=method,
        scores={"letter": float(np.mean(per_trial["letter"])),
                "word": float(np.mean(per_trial["word"]))},
        per_trial=per_trial,
        map_scores=map_scores,
    )]


def write_report_csv(rows, keys, path):
    """Emit report rows as CSV (mean rows plus MAP rows when present)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method," + ",".join(keys) + "\n")
        for row in rows:
            if row.unscored:
                fh.write(row.method + "," + ",".join("unscored" for _ in keys) + "\n")
                continue
            fh.write(row.method + ","
                     + ",".join(f"{row.scores[k]:.17g}" for k in keys) + "\n")
            if row.map_scores is not None:
                fh.write(row.method + " (MAP),"
                         + ",".join(f"{row.map_scores[k]:.17g}" for k in keys) + "\n")
