"""Unsupervised discovery of word- and phoneme-like units from
multi-speaker feature sequences: speaker-invariant representation
learning (sparse autoencoder stack with a parametric-bias layer) plus a
two-level semi-Markov segmenter fitted by blocked Gibbs sampling."""

__version__ = "0.1.0"
