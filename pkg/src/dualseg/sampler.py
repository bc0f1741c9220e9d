"""Blocked Gibbs inference for the word/letter semi-Markov model.

Each sweep runs, per utterance, a word-level backward pass whose segment
likelihoods are themselves computed by a letter-level dynamic program,
then samples the word segmentation forward, samples tentative letter
strings for every segment, and finally resamples acoustic, language-model,
word-inventory (by sampling importance resampling), and word-model
parameters in that order.

All dynamic programming is carried out in log domain.  Sequences must
tile the utterance exactly: durations always sum to the frame count.

Conventions fixed here: the first word of an utterance is drawn from
beta_lm, and the first letter of a string from beta_wm.
"""

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np

from .hdphlm import (GibbsState, UtteranceState, _categorical, dur_logpmf_table,
                     gaussian_loglik, niw_prior_for, resample_hdp,
                     sample_gamma_posterior, sample_niw_posterior,
                     sample_prior_word)


class SamplerError(Exception):
    pass


def _lse(a, axis=None):
    """Log-sum-exp that treats -inf as exact zero probability."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return -np.inf
    if axis is None:
        return float(np.logaddexp.reduce(a.ravel()))
    if a.size < 4096:
        return np.logaddexp.reduce(a, axis=axis)
    m = np.max(a, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m_safe), axis=axis, keepdims=True)) + m_safe
    return np.squeeze(out, axis=axis)


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


@dataclass
class MessageTable:
    """Backward messages and the per-word segment-likelihood cache.

    ``b`` and ``bstar`` have T+1 rows; row T of ``b`` is the log-domain
    boundary value 0.  ``seg_tables[i][t, d]`` is the log joint probability
    that word slot i fills frames [t, t+d) exactly (letter durations
    summing to d), including the letter duration pmfs.
    """

    b: np.ndarray
    bstar: np.ndarray
    seg_tables: list[np.ndarray]
    emission_ll: np.ndarray
    ce: np.ndarray
    dur_tables: np.ndarray
    loglik: float


@dataclass
class TrialResult:
    seed: int
    model: object = None
    state: GibbsState | None = None
    loglik_trace: np.ndarray | None = None
    error: str | None = None

    @property
    def ok(self):
        return self.error is None


@dataclass
class FitReport:
    trials: list[TrialResult]
    map_index: int

    @property
    def map_trial(self):
        return self.trials[self.map_index]


# --- emission and segment-likelihood tables -----------------------------------

def emission_loglik_matrix(model, frames):
    """T x N_letters per-frame Gaussian log likelihoods."""
    cols = [gaussian_loglik(model.means[j], model.covs[j], frames)
            for j in range(model.hyper.n_letters)]
    return np.column_stack(cols)


def _cumulative_emissions(emission_ll):
    t, j = emission_ll.shape
    ce = np.zeros((t + 1, j))
    np.cumsum(emission_ll, axis=0, out=ce[1:])
    return ce


def _duration_tables(model):
    d_max = model.d_max
    return np.vstack([dur_logpmf_table(w, d_max) for w in model.omega])


def word_segment_table(word, ce, dur_tables):
    """All-segments DP for one word string.

    Returns W with W[t, m] = log p(word's letters fill frames [t, t+m)),
    marginalizing letter-duration compositions truncated at d_max.
    """
    t_total = ce.shape[0] - 1
    d_max = dur_tables.shape[1] - 1
    k_len = len(word)
    m_cap = min(k_len * d_max, t_total)

    ms = np.arange(m_cap + 1)
    ds = np.arange(1, d_max + 1)
    ts = np.arange(t_total + 1)
    md = ms[:, None] - ds[None, :]                     # (M+1, D)
    md_safe = np.maximum(md, 0)
    tm = ts[:, None] + ms[None, :]                     # (T+1, M+1)
    tm_safe = np.minimum(tm, t_total)
    tmd_safe = np.clip(tm[:, :, None] - ds[None, None, :], 0, t_total)
    invalid = (md < 0)[None, :, :] | (tm > t_total)[:, :, None]

    prev = np.full((t_total + 1, m_cap + 1), -np.inf)
    prev[:, 0] = 0.0
    for k in range(1, k_len + 1):
        letter = word[k - 1]
        ce_j = ce[:, letter]
        terms = (prev[:, md_safe]
                 + dur_tables[letter, ds][None, None, :]
                 + ce_j[tm_safe][:, :, None] - ce_j[tmd_safe])
        terms[invalid] = -np.inf
        prev = _lse(terms, axis=2)
    return prev


def _word_loglik_from_ce(word, ce, dur_tables):
    """Log p(full segment | word) for one segment given its local cumsums."""
    n = ce.shape[0] - 1
    d_max = dur_tables.shape[1] - 1
    k_len = len(word)
    if n < k_len or n > k_len * d_max:
        return -np.inf
    a = np.full(n + 1, -np.inf)
    a[0] = 0.0
    ds = np.arange(1, d_max + 1)
    for k in range(1, k_len + 1):
        letter = word[k - 1]
        dtab = dur_tables[letter]
        ms = np.arange(k, n - (k_len - k) + 1)
        back = ms[:, None] - ds[None, :]
        valid = back >= k - 1
        safe = np.maximum(back, 0)
        terms = np.where(valid,
                         a[safe] + dtab[ds][None, :]
                         + ce[ms, letter][:, None] - ce[safe, letter],
                         -np.inf)
        nxt = np.full(n + 1, -np.inf)
        nxt[ms] = _lse(terms, axis=1)
        a = nxt
    return float(a[n])


def word_segment_loglik(word, frames, model):
    """Log joint probability that the word fills the whole segment.

    Sums over all letter-duration compositions (each duration at least 1,
    truncated at d_max) of duration pmfs times frame emissions.  Segments
    shorter than the word are infeasible (-inf).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if len(word) < 1:
        raise SamplerError("word must be nonempty")
    emission_ll = emission_loglik_matrix(model, frames)
    ce = _cumulative_emissions(emission_ll)
    return _word_loglik_from_ce(tuple(word), ce, _duration_tables(model))


# --- word-level messages and forward sampling ---------------------------------

def backward_messages(utterance, model):
    """Backward word-level messages; also computes the data log likelihood."""
    frames = utterance.features.frames if hasattr(utterance, "features") else np.asarray(utterance)
    t_total = frames.shape[0]
    n_words = model.hyper.n_words
    emission_ll = emission_loglik_matrix(model, frames)
    ce = _cumulative_emissions(emission_ll)
    dur_tables = _duration_tables(model)

    cache = {}
    seg_tables = []
    for word in model.words:
        if word not in cache:
            cache[word] = word_segment_table(word, ce, dur_tables)
        seg_tables.append(cache[word])
    m_max = max(table.shape[1] for table in seg_tables) - 1
    stacked = np.full((n_words, t_total + 1, m_max + 1), -np.inf)
    for i, table in enumerate(seg_tables):
        stacked[i, :, : table.shape[1]] = table

    log_pi = _log(model.pi_lm)
    b = np.zeros((t_total + 1, n_words))
    bstar = np.full((t_total + 1, n_words), -np.inf)
    for t in range(t_total - 1, -1, -1):
        m_hi = min(m_max, t_total - t)
        vals = stacked[:, t, 1: m_hi + 1] + b[t + 1: t + m_hi + 1, :].T
        bstar[t] = _lse(vals, axis=1)
        b[t] = _lse(log_pi + bstar[t][None, :], axis=1)
    loglik = float(_lse(_log(model.beta_lm) + bstar[0]))
    return MessageTable(b=b, bstar=bstar, seg_tables=seg_tables,
                        emission_ll=emission_ll, ce=ce, dur_tables=dur_tables,
                        loglik=loglik)


def forward_sample(msgs, model, rng):
    """Sample superstates and durations; durations always sum to T."""
    t_total = msgs.b.shape[0] - 1
    if not np.isfinite(msgs.loglik):
        raise SamplerError("no feasible segmentation under the current model")
    log_pi = _log(model.pi_lm)
    log_pi0 = _log(model.beta_lm)
    z, durs = [], []
    t = 0
    prev = None
    while t < t_total:
        lw = (log_pi0 if prev is None else log_pi[prev]) + msgs.bstar[t]
        i = _categorical(lw, rng)
        table = msgs.seg_tables[i]
        m_hi = min(table.shape[1] - 1, t_total - t)
        ms = np.arange(1, m_hi + 1)
        d = int(ms[_categorical(table[t, ms] + msgs.b[t + ms, i], rng)])
        z.append(i)
        durs.append(d)
        t += d
        prev = i
    return np.array(z, dtype=np.int64), np.array(durs, dtype=np.int64)


# --- letter-level sampling ------------------------------------------------------

def _letter_messages(ce, dur_tables, log_pi_wm, log_beta_wm):
    """Letter-level backward messages over one segment."""
    n = ce.shape[0] - 1
    n_letters = dur_tables.shape[0]
    d_max = dur_tables.shape[1] - 1
    lb = np.zeros((n + 1, n_letters))
    lbstar = np.full((n + 1, n_letters), -np.inf)
    for t in range(n - 1, -1, -1):
        d_hi = min(d_max, n - t)
        ds = np.arange(1, d_hi + 1)
        vals = dur_tables[:, ds].T + (ce[t + ds, :] - ce[t, :]) + lb[t + ds, :]
        lbstar[t] = _lse(vals, axis=0)
        lb[t] = _lse(log_pi_wm + lbstar[t][None, :], axis=1)
    total = float(_lse(log_beta_wm + lbstar[0]))
    return lb, lbstar, total


def string_prior_logp(letters, model):
    """Log probability of a letter string under the word-model chain."""
    lp = float(_log(model.beta_wm[letters[0]]))
    for a, b in zip(letters[:-1], letters[1:]):
        lp += float(_log(model.pi_wm[a, b]))
    return lp


def sample_segment_letters(word, frames, model, rng, _ce=None, _dur_tables=None):
    """Sample a letter string with durations tiling the segment.

    With ``word=None`` the string is free and drawn from the letter-level
    posterior under the word-model transitions; otherwise the letters are
    fixed to the given word and only the duration alignment is sampled.

    Returns (letters, durations, info) where info carries the segment's
    letter-level marginal log likelihood (free mode) for proposal scoring.
    """
    if _ce is None:
        frames = np.asarray(frames, dtype=np.float64)
        emission_ll = emission_loglik_matrix(model, frames)
        _ce = _cumulative_emissions(emission_ll)
    if _dur_tables is None:
        _dur_tables = _duration_tables(model)
    ce = _ce
    dur_tables = _dur_tables
    n = ce.shape[0] - 1
    if n < 1:
        raise SamplerError("empty segment")

    if word is None:
        log_pi_wm = _log(model.pi_wm)
        log_beta_wm = _log(model.beta_wm)
        lb, lbstar, total = _letter_messages(ce, dur_tables, log_pi_wm, log_beta_wm)
        if not np.isfinite(total):
            raise SamplerError("segment infeasible at the letter level")
        letters, durs = [], []
        t = 0
        prev = None
        d_max = dur_tables.shape[1] - 1
        while t < n:
            lw = (log_beta_wm if prev is None else log_pi_wm[prev]) + lbstar[t]
            j = _categorical(lw, rng)
            d_hi = min(d_max, n - t)
            ds = np.arange(1, d_hi + 1)
            ld = dur_tables[j, ds] + (ce[t + ds, j] - ce[t, j]) + lb[t + ds, j]
            d = int(ds[_categorical(ld, rng)])
            letters.append(j)
            durs.append(d)
            t += d
            prev = j
        return (np.array(letters, dtype=np.int64), np.array(durs, dtype=np.int64),
                {"letter_total": total})

    word = tuple(word)
    k_len = len(word)
    d_max = dur_tables.shape[1] - 1
    if n < k_len or n > k_len * d_max:
        raise SamplerError("segment infeasible for the given word")
    # backward over (letter index, frames consumed)
    rem = np.full((k_len + 1, n + 1), -np.inf)
    rem[k_len, n] = 0.0
    for k in range(k_len - 1, -1, -1):
        letter = word[k]
        dtab = dur_tables[letter]
        for m in range(k, n - (k_len - k) + 1):
            d_hi = min(d_max, n - m - (k_len - k - 1))
            if d_hi < 1:
                continue
            ds = np.arange(1, d_hi + 1)
            rem[k, m] = _lse(dtab[ds] + (ce[m + ds, letter] - ce[m, letter])
                             + rem[k + 1, m + ds])
    if not np.isfinite(rem[0, 0]):
        raise SamplerError("segment infeasible for the given word")
    durs = []
    m = 0
    for k in range(k_len):
        letter = word[k]
        d_hi = min(d_max, n - m - (k_len - k - 1))
        ds = np.arange(1, d_hi + 1)
        ld = dur_tables[letter, ds] + (ce[m + ds, letter] - ce[m, letter]) + rem[k + 1, m + ds]
        d = int(ds[_categorical(ld, rng)])
        durs.append(d)
        m += d
    return (np.array(word, dtype=np.int64), np.array(durs, dtype=np.int64),
            {"letter_total": float(rem[0, 0])})


# --- inventory resampling (sampling importance resampling) ---------------------

@dataclass
class SegmentRecord:
    """One word segment with its tentative string and proposal log prob."""

    frames: np.ndarray
    letters: np.ndarray
    proposal_logp: float
    ce: np.ndarray | None = None    # segment-local emission cumsums, optional


def sir_word_inventory(segments, model, rng):
    """Resample every word slot's letter string.

    ``segments[i]`` lists the SegmentRecords (or (frames, letters,
    proposal_logp) tuples) currently assigned to word slot i; the
    tentative strings are the candidates.  Candidate scores sum the
    slot's segment likelihoods plus the word-model prior; importance
    weights subtract each candidate's proposal log probability.  Slots
    without candidates are redrawn from the word-model prior.
    """
    dur_tables = _duration_tables(model)
    l_max = model.hyper.l_max
    new_words = []
    for i in range(model.hyper.n_words):
        segs = [rec if isinstance(rec, SegmentRecord) else SegmentRecord(*rec)
                for rec in (segments[i] if i < len(segments) else [])]
        candidates = [(tuple(int(l) for l in rec.letters), rec.proposal_logp)
                      for rec in segs if 1 <= len(rec.letters) <= l_max]
        if not candidates:
            new_words.append(sample_prior_word(
                (model.beta_wm, model.pi_wm, l_max), rng))
            continue
        ces = [rec.ce if rec.ce is not None
               else _cumulative_emissions(emission_loglik_matrix(model, rec.frames))
               for rec in segs]
        score_cache = {}
        weights = np.empty(len(candidates))
        for c_idx, (letters, prop) in enumerate(candidates):
            if letters not in score_cache:
                total = string_prior_logp(letters, model)
                total += sum(_word_loglik_from_ce(letters, ce, dur_tables)
                             for ce in ces)
                score_cache[letters] = total
            weights[c_idx] = score_cache[letters] - prop
        pick = _categorical(weights, rng)
        new_words.append(candidates[pick][0])
    return new_words


# --- parameter resampling -------------------------------------------------------

def _expand_assignments(corpus, state):
    """Frames and durations assigned to each letter across the corpus."""
    n_letters = None
    frames_for = {}
    durs_for = {}
    for utt, ustate in zip(corpus.utterances, state.utts):
        feats = utt.features.frames
        t = 0
        for letters, ldurs in zip(ustate.letters, ustate.letter_durs):
            for letter, d in zip(letters, ldurs):
                frames_for.setdefault(int(letter), []).append(feats[t:t + d])
                durs_for.setdefault(int(letter), []).append(int(d))
                t += d
    return frames_for, durs_for


def _resample_acoustics(corpus, state, model, rng):
    hyper = model.hyper
    dim = corpus.utterances[0].features.dim
    prior = niw_prior_for(hyper, dim)
    frames_for, durs_for = _expand_assignments(corpus, state)
    means = np.empty_like(model.means)
    covs = np.empty_like(model.covs)
    omega = np.empty_like(model.omega)
    for j in range(hyper.n_letters):
        chunks = frames_for.get(j, [])
        data = np.vstack(chunks) if chunks else np.empty((0, dim))
        means[j], covs[j] = sample_niw_posterior(prior, data, rng)
        omega[j] = sample_gamma_posterior(hyper, durs_for.get(j, []), rng)
    return means, covs, omega


def _transition_counts(sequences, n):
    counts = np.zeros((n, n), dtype=np.int64)
    for seq in sequences:
        for a, b in zip(seq[:-1], seq[1:]):
            counts[a, b] += 1
    return counts


def resample_parameters(corpus, state, model, rng):
    """Conjugate updates of acoustics, language model, and word model.

    The word inventory itself is left unchanged; see sir_word_inventory.
    """
    from dataclasses import replace

    means, covs, omega = _resample_acoustics(corpus, state, model, rng)
    hyper = model.hyper
    lm_counts = _transition_counts([u.z for u in state.utts], hyper.n_words)
    beta_lm, pi_lm = resample_hdp(hyper.gamma_lm, hyper.alpha_lm, lm_counts,
                                  rng, beta=model.beta_lm)
    wm_counts = _transition_counts(model.words, hyper.n_letters)
    beta_wm, pi_wm = resample_hdp(hyper.gamma_wm, hyper.alpha_wm, wm_counts,
                                  rng, beta=model.beta_wm)
    return replace(model, means=means, covs=covs, omega=omega,
                   beta_lm=beta_lm, pi_lm=pi_lm, beta_wm=beta_wm, pi_wm=pi_wm)


# --- one full sweep ---------------------------------------------------------------

def joint_log_likelihood(corpus, state, model):
    """Log p(data, sampled segmentation and letter alignment | model)."""
    dur_tables = _duration_tables(model)
    log_pi_lm = _log(model.pi_lm)
    log_beta_lm = _log(model.beta_lm)
    total = 0.0
    for utt, ustate in zip(corpus.utterances, state.utts):
        emission_ll = emission_loglik_matrix(model, utt.features.frames)
        z = ustate.z
        total += float(log_beta_lm[z[0]])
        total += float(np.sum(log_pi_lm[z[:-1], z[1:]]))
        t = 0
        for letters, ldurs in zip(ustate.letters, ustate.letter_durs):
            total += string_prior_logp(letters, model)
            for letter, d in zip(letters, ldurs):
                total += float(dur_tables[letter, d])
                total += float(emission_ll[t:t + d, letter].sum())
                t += d
    return total


def gibbs_iteration(corpus, model, rng):
    """One blocked sweep; returns the updated model, state, and joint loglik."""
    from dataclasses import replace

    hyper = model.hyper
    dur_tables = _duration_tables(model)
    state = GibbsState()
    spans = [[] for _ in range(hyper.n_words)]   # (utt_idx, t0, d, letters, prop)
    for utt_idx, utt in enumerate(corpus.utterances):
        frames = utt.features.frames
        msgs = backward_messages(utt, model)
        z, durs = forward_sample(msgs, model, rng)
        letters_list, ldurs_list, totals, props = [], [], [], []
        t = 0
        for i, d in zip(z, durs):
            seg_frames = frames[t:t + d]
            ce_seg = msgs.ce[t:t + d + 1] - msgs.ce[t]
            letters, ldurs, info = sample_segment_letters(
                None, seg_frames, model, rng, _ce=ce_seg, _dur_tables=dur_tables)
            seg_ll = _word_loglik_from_ce(tuple(letters), ce_seg, dur_tables)
            prop = (string_prior_logp(letters, model) + seg_ll
                    - info["letter_total"])
            letters_list.append(letters)
            ldurs_list.append(ldurs)
            totals.append(info["letter_total"])
            props.append(prop)
            spans[i].append((utt_idx, t, d, letters, prop))
            t += d
        ustate = UtteranceState(z=z, durs=durs, letters=letters_list,
                                letter_durs=ldurs_list,
                                letter_total=np.array(totals),
                                proposal_logp=np.array(props))
        ustate.check(frames.shape[0])
        state.utts.append(ustate)

    # parameter updates in sweep order: acoustics, language model,
    # inventory, then word model from the new inventory
    means, covs, omega = _resample_acoustics(corpus, state, model, rng)
    lm_counts = _transition_counts([u.z for u in state.utts], hyper.n_words)
    beta_lm, pi_lm = resample_hdp(hyper.gamma_lm, hyper.alpha_lm, lm_counts,
                                  rng, beta=model.beta_lm)
    model = replace(model, means=means, covs=covs, omega=omega,
                    beta_lm=beta_lm, pi_lm=pi_lm)
    # emission cumsums under the fresh acoustics, shared across SIR scoring
    new_ce = [_cumulative_emissions(emission_loglik_matrix(model, u.features.frames))
              for u in corpus.utterances]
    segments = [
        [SegmentRecord(
            frames=corpus.utterances[utt_idx].features.frames[t0:t0 + d],
            letters=letters, proposal_logp=prop,
            ce=new_ce[utt_idx][t0:t0 + d + 1] - new_ce[utt_idx][t0])
         for (utt_idx, t0, d, letters, prop) in spans[i]]
        for i in range(hyper.n_words)
    ]
    new_words = sir_word_inventory(segments, model, rng)
    wm_counts = _transition_counts(new_words, hyper.n_letters)
    beta_wm, pi_wm = resample_hdp(hyper.gamma_wm, hyper.alpha_wm, wm_counts,
                                  rng, beta=model.beta_wm)
    model = replace(model, words=new_words, beta_wm=beta_wm, pi_wm=pi_wm)

    joint = joint_log_likelihood(corpus, state, model)
    if np.isnan(joint):
        raise SamplerError("joint log likelihood became NaN")
    return model, state, joint


# --- multi-trial fitting -----------------------------------------------------------

def _run_trial(corpus, hyper, n_iters, seed):
    from .hdphlm import init_model

    rng = np.random.default_rng(seed)
    dim = corpus.utterances[0].features.dim
    t_min = min(u.features.n_frames for u in corpus.utterances)
    max_word_len = max(1, min(hyper.l_max, t_min))
    model = init_model(hyper, dim, rng, max_word_len=max_word_len)
    trace = []
    state = None
    for _ in range(n_iters):
        model, state, joint = gibbs_iteration(corpus, model, rng)
        trace.append(joint)
    return TrialResult(seed=seed, model=model, state=state,
                       loglik_trace=np.array(trace))


def _trial_worker(args):
    corpus, hyper, n_iters, seed = args
    try:
        return _run_trial(corpus, hyper, n_iters, seed)
    except Exception as exc:  # noqa: BLE001 - trial failures are recorded, not fatal
        return TrialResult(seed=seed, error=f"{type(exc).__name__}: {exc}")


def fit(corpus, hyper, n_trials=20, n_iters=100, seeds=None, n_jobs=1,
        progress=None):
    """Run independent Gibbs chains and flag the highest-likelihood trial."""
    if n_trials < 1:
        raise SamplerError("need at least one trial")
    if seeds is None:
        seeds = list(range(n_trials))
    if len(seeds) != n_trials:
        raise SamplerError("seeds must match n_trials")
    jobs = [(corpus, hyper, n_iters, seed) for seed in seeds]
    if n_jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=n_jobs) as pool:
            trials = list(pool.map(_trial_worker, jobs))
    else:
        trials = []
        for job in jobs:
            trials.append(_trial_worker(job))
            if progress is not None:
                progress(len(trials), n_trials)
    finals = [t.loglik_trace[-1] if t.ok else -np.inf for t in trials]
    if not any(t.ok for t in trials):
        raise SamplerError("all trials failed: " + "; ".join(t.error for t in trials))
    return FitReport(trials=trials, map_index=int(np.argmax(finals)))
