"""Model types, priors, and probability primitives for the two-level
word/letter semi-Markov generative model.

A sentence is a sequence of latent words drawn from a truncated-DP bigram
language model; each word is a fixed string of latent letters; each letter
emits Gaussian frames for a duration drawn from a shifted Poisson
(support {1, 2, ...}), so letters always occupy at least one frame and
word durations inherit the Poisson reproductive property.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln
from scipy.stats import poisson

from .docio import load_doc, save_doc


class ModelError(Exception):
    pass


@dataclass
class HdpHlmHyper:
    """Concentrations, truncation levels, and base-measure parameters."""

    gamma_lm: float = 10.0
    alpha_lm: float = 10.0
    gamma_wm: float = 10.0
    alpha_wm: float = 10.0
    n_words: int = 7
    n_letters: int = 10
    dur_a: float = 200.0        # Gamma shape over the Poisson rate
    dur_b: float = 10.0         # Gamma rate
    mu0: float = 0.0
    sigma0sq: float = 1.0
    kappa0: float = 0.01
    nu0: int | None = None      # defaults to dim + 5 at model build
    l_max: int = 8              # longest word proposed for the inventory
    d_max: int | None = None    # letter-duration truncation; default 4x prior mean

    def __post_init__(self):
        for name in ("gamma_lm", "alpha_lm", "gamma_wm", "alpha_wm",
                     "dur_a", "dur_b", "sigma0sq", "kappa0"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.n_words < 1 or self.n_letters < 1 or self.l_max < 1:
            raise ModelError("truncation levels must be at least 1")

    def nu0_for(self, dim):
        nu0 = self.nu0 if self.nu0 is not None else dim + 5
        if nu0 <= dim - 1:
            raise ModelError(f"nu0={nu0} must exceed dim-1={dim - 1}")
        return nu0

    def duration_truncation(self):
        if self.d_max is not None:
            return int(self.d_max)
        return int(math.ceil(4.0 * (1.0 + self.dur_a / self.dur_b)))


@dataclass
class HdpHlmModel:
    """One full draw of language model, word inventory, and acoustic model."""

    hyper: HdpHlmHyper
    beta_lm: np.ndarray                 # N_words simplex
    pi_lm: np.ndarray                   # N_words x N_words, row stochastic
    words: list[tuple[int, ...]]        # letter strings, one per word slot
    beta_wm: np.ndarray                 # N_letters simplex
    pi_wm: np.ndarray                   # N_letters x N_letters
    means: np.ndarray                   # N_letters x D
    covs: np.ndarray                    # N_letters x D x D
    omega: np.ndarray                   # N_letters Poisson rates

    def __post_init__(self):
        self.beta_lm = np.asarray(self.beta_lm, dtype=np.float64)
        self.pi_lm = np.asarray(self.pi_lm, dtype=np.float64)
        self.beta_wm = np.asarray(self.beta_wm, dtype=np.float64)
        self.pi_wm = np.asarray(self.pi_wm, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.words = [tuple(int(l) for l in w) for w in self.words]
        n, j = self.hyper.n_words, self.hyper.n_letters
        if len(self.words) != n:
            raise ModelError(f"expected {n} word slots, got {len(self.words)}")
        for w in self.words:
            if len(w) < 1 or any(not 0 <= l < j for l in w):
                raise ModelError(f"invalid word string {w}")
        for name, arr, total in (("beta_lm", self.beta_lm, 1.0),
                                 ("beta_wm", self.beta_wm, 1.0)):
            if abs(arr.sum() - total) > 1e-9:
                raise ModelError(f"{name} is not a simplex")
        for name, mat in (("pi_lm", self.pi_lm), ("pi_wm", self.pi_wm)):
            if np.max(np.abs(mat.sum(axis=1) - 1.0)) > 1e-9:
                raise ModelError(f"{name} rows must sum to 1")
        if np.any(self.omega <= 0):
            raise ModelError("omega rates must be positive")

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def d_max(self):
        return self.hyper.duration_truncation()


@dataclass
class UtteranceState:
    """Sampled segmentation of one utterance for the current sweep."""

    z: np.ndarray                       # superstate (word slot) per segment
    durs: np.ndarray                    # frames per segment
    letters: list[np.ndarray]           # letter ids per segment
    letter_durs: list[np.ndarray]       # frames per letter slot
    letter_total: np.ndarray            # letter-level marginal loglik per segment
    proposal_logp: np.ndarray           # proposal logprob of each tentative string

    def check(self, n_frames):
        assert int(self.durs.sum()) == n_frames, "segment durations must tile T"
        for dur, ldur in zip(self.durs, self.letter_durs):
            assert int(ldur.sum()) == int(dur), "letter durations must tile the segment"
            assert np.all(ldur >= 1), "letter durations must be positive"


@dataclass
class GibbsState:
    utts: list[UtteranceState] = field(default_factory=list)


# --- emission and duration primitives ----------------------------------------

def gaussian_loglik(mean, cov, y):
    """Exact multivariate normal log density; y may be one vector or T rows."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = mean.shape[0]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ModelError("covariance is not symmetric positive-definite") from exc
    single = y.ndim == 1
    rows = y[None, :] if single else y
    diff = rows - mean
    u = solve_triangular(chol, diff.T, lower=True)
    quad = np.sum(u * u, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (d * np.log(2.0 * np.pi) + logdet + quad)
    return out[0] if single else out


def poisson_logpmf(omega, d):
    """Log pmf of the shifted Poisson duration: d - 1 ~ Poisson(omega)."""
    d = np.asarray(d)
    if np.any(d < 1):
        raise ModelError("durations live on {1, 2, ...}")
    return (d - 1) * np.log(omega) - omega - gammaln(d)


def word_duration_rate(word, omega):
    """Poisson rate of a word's duration: the sum of its letters' rates."""
    return float(np.sum([omega[l] for l in word]))


def dur_logpmf_table(omega, d_max):
    """Truncated duration log pmf over d = 1..d_max, indexable by duration.

    Index 0 is -inf padding.  The tail mass beyond d_max is lumped into
    the last bucket, so the table is a normalized pmf.
    """
    table = np.full(d_max + 1, -np.inf)
    if d_max == 1:
        table[1] = 0.0
        return table
    ds = np.arange(1, d_max)
    table[1:d_max] = poisson_logpmf(omega, ds)
    tail = poisson.sf(d_max - 2, omega)   # P(D >= d_max) = P(Pois >= d_max - 1)
    table[d_max] = np.log(tail) if tail > 0 else -np.inf
    return table


# --- conjugate posterior draws ------------------------------------------------

def _sample_invwishart(nu, psi, rng):
    """Bartlett-decomposition draw from the inverse Wishart."""
    d = psi.shape[0]
    chol_inv = np.linalg.cholesky(np.linalg.inv(psi))
    a = np.zeros((d, d))
    for i in range(d):
        a[i, i] = np.sqrt(rng.chisquare(nu - i))
        for j in range(i):
            a[i, j] = rng.standard_normal()
    factor = chol_inv @ a
    w = factor @ factor.T
    sigma = np.linalg.inv(w)
    return 0.5 * (sigma + sigma.T)


def niw_prior_for(hyper, dim):
    """Materialize the Normal-inverse-Wishart prior for a feature dimension."""
    return {
        "mu0": np.full(dim, hyper.mu0, dtype=np.float64),
        "kappa0": float(hyper.kappa0),
        "nu0": float(hyper.nu0_for(dim)),
        "psi0": hyper.sigma0sq * np.eye(dim),
    }


def niw_posterior_params(prior, frames):
    """Closed-form conjugate update; with no frames this is the prior."""
    mu0, kappa0 = prior["mu0"], prior["kappa0"]
    nu0, psi0 = prior["nu0"], prior["psi0"]
    frames = np.asarray(frames, dtype=np.float64).reshape(-1, mu0.shape[0])
    n = frames.shape[0]
    if n == 0:
        return mu0, kappa0, nu0, psi0
    ybar = frames.mean(axis=0)
    centered = frames - ybar
    scatter = centered.T @ centered
    kappa_n = kappa0 + n
    mu_n = (kappa0 * mu0 + n * ybar) / kappa_n
    nu_n = nu0 + n
    gap = (ybar - mu0)[:, None]
    psi_n = psi0 + scatter + (kappa0 * n / kappa_n) * (gap @ gap.T)
    return mu_n, kappa_n, nu_n, psi_n


def sample_niw_posterior(prior, frames, rng):
    """Draw (mean, covariance) from the NIW posterior given assigned frames."""
    mu_n, kappa_n, nu_n, psi_n = niw_posterior_params(prior, frames)
    cov = _sample_invwishart(nu_n, psi_n, rng)
    chol = np.linalg.cholesky(cov / kappa_n)
    mean = mu_n + chol @ rng.standard_normal(mu_n.shape[0])
    return mean, cov


def sample_gamma_posterior(hyper, durations, rng):
    """Draw a Poisson rate from its Gamma posterior given shifted durations."""
    durations = np.asarray(durations, dtype=np.float64)
    if durations.size and np.any(durations < 1):
        raise ModelError("durations live on {1, 2, ...}")
    shape = hyper.dur_a + float(np.sum(durations - 1.0))
    rate = hyper.dur_b + durations.size
    return rng.gamma(shape, 1.0 / rate)


# --- truncated-DP transition resampling --------------------------------------

def sample_hdp_rows(beta, alpha, counts, rng):
    """Each transition row ~ Dirichlet(alpha * beta + observed counts)."""
    beta = np.asarray(beta, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    rows = np.empty_like(counts)
    for i in range(counts.shape[0]):
        rows[i] = rng.dirichlet(alpha * beta + counts[i])
    return rows


def sample_table_counts(counts, alpha, beta, rng):
    """Chinese-restaurant table counts augmenting the transition counts."""
    counts = np.asarray(counts, dtype=np.int64)
    tables = np.zeros_like(counts)
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            n = counts[i, j]
            if n == 0:
                continue
            conc = alpha * beta[j]
            draws = rng.random(n) < conc / (conc + np.arange(n))
            tables[i, j] = int(draws.sum())
    return tables


def resample_hdp(gamma, alpha, counts, rng, beta=None):
    """Weak-limit resample of (beta, pi) given transition counts."""
    n = counts.shape[0]
    if beta is None:
        beta = np.full(n, 1.0 / n)
    tables = sample_table_counts(counts, alpha, beta, rng)
    beta_new = rng.dirichlet(gamma / n + tables.sum(axis=0))
    beta_new = np.maximum(beta_new, 1e-300)
    beta_new /= beta_new.sum()
    return beta_new, sample_hdp_rows(beta_new, alpha, counts, rng)


# --- prior model draws --------------------------------------------------------

def sample_prior_word(model_or, rng, max_len=None):
    """Draw a letter string from the word-model prior chain."""
    beta_wm, pi_wm, l_max = model_or
    length = int(rng.integers(1, (max_len or l_max) + 1))
    letters = [int(_categorical(np.log(np.maximum(beta_wm, 1e-300)), rng))]
    for _ in range(length - 1):
        row = np.log(np.maximum(pi_wm[letters[-1]], 1e-300))
        letters.append(int(_categorical(row, rng)))
    return tuple(letters)


def _categorical(log_weights, rng):
    lw = np.asarray(log_weights, dtype=np.float64)
    m = np.max(lw)
    if not np.isfinite(m):
        raise ModelError("no feasible outcome in categorical draw")
    p = np.exp(lw - m)
    p /= p.sum()
    return int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))


def init_model(hyper, dim, rng, max_word_len=None):
    """Draw a full model from its priors (weak-limit truncated)."""
    n, j = hyper.n_words, hyper.n_letters
    beta_lm = rng.dirichlet(np.full(n, hyper.gamma_lm / n))
    beta_lm = np.maximum(beta_lm, 1e-300)
    beta_lm /= beta_lm.sum()
    pi_lm = sample_hdp_rows(beta_lm, hyper.alpha_lm, np.zeros((n, n)), rng)
    beta_wm = rng.dirichlet(np.full(j, hyper.gamma_wm / j))
    beta_wm = np.maximum(beta_wm, 1e-300)
    beta_wm /= beta_wm.sum()
    pi_wm = sample_hdp_rows(beta_wm, hyper.alpha_wm, np.zeros((j, j)), rng)
    prior = niw_prior_for(hyper, dim)
    means = np.empty((j, dim))
    covs = np.empty((j, dim, dim))
    for letter in range(j):
        means[letter], covs[letter] = sample_niw_posterior(prior, np.empty((0, dim)), rng)
    omega = np.array([sample_gamma_posterior(hyper, [], rng) for _ in range(j)])
    words = [sample_prior_word((beta_wm, pi_wm, hyper.l_max), rng, max_word_len)
             for _ in range(n)]
    return HdpHlmModel(hyper=hyper, beta_lm=beta_lm, pi_lm=pi_lm, words=words,
                       beta_wm=beta_wm, pi_wm=pi_wm, means=means, covs=covs,
                       omega=omega)


# --- persistence --------------------------------------------------------------

def save_model(model, path):
    h = model.hyper
    payload = {
        "hyper": {
            "gamma_lm": h.gamma_lm, "alpha_lm": h.alpha_lm,
            "gamma_wm": h.gamma_wm, "alpha_wm": h.alpha_wm,
            "n_words": h.n_words, "n_letters": h.n_letters,
            "dur_a": h.dur_a, "dur_b": h.dur_b,
            "mu0": h.mu0, "sigma0sq": h.sigma0sq, "kappa0": h.kappa0,
            "nu0": h.nu0, "l_max": h.l_max, "d_max": h.d_max,
        },
        "beta_lm": model.beta_lm, "pi_lm": model.pi_lm,
        "words": [list(w) for w in model.words],
        "beta_wm": model.beta_wm, "pi_wm": model.pi_wm,
        "means": model.means, "covs": model.covs, "omega": model.omega,
    }
    save_doc(path, "hdphlm-model", payload)


def load_model(path):
    payload = load_doc(path, "hdphlm-model")
    hyper = HdpHlmHyper(**payload["hyper"])
    return HdpHlmModel(
        hyper=hyper,
        beta_lm=np.array(payload["beta_lm"]),
        pi_lm=np.array(payload["pi_lm"]),
        words=[tuple(w) for w in payload["words"]],
        beta_wm=np.array(payload["beta_wm"]),
        pi_wm=np.array(payload["pi_wm"]),
        means=np.array(payload["means"]),
        covs=np.array(payload["covs"]),
        omega=np.array(payload["omega"]),
    )
