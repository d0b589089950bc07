"""Numerically safe scalar kernels and RNG plumbing.

All stochastic operations in the package take an explicit
:class:`numpy.random.Generator`. Generators are built on the Philox
counter-based bit stream so that derived per-task streams are
reproducible and independent.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.special import expit


def sigmoid(a):
    """Stable logistic function 1 / (1 + exp(-a)), elementwise."""
    return expit(a)


def softplus(a):
    """Stable log(1 + exp(a)), elementwise.

    Evaluates as max(a, 0) + log1p(exp(-|a|)) so it stays finite for
    |a| well beyond the exp overflow threshold.
    """
    return np.logaddexp(0.0, a)


def make_rng(seed: int) -> Generator:
    """Root generator for a run."""
    return Generator(Philox(SeedSequence(entropy=int(seed))))


def derive_rng(seed: int, task_index: int) -> Generator:
    """Independent stream for parallel task `task_index` of run `seed`."""
    return Generator(Philox(SeedSequence(entropy=int(seed), spawn_key=(int(task_index),))))


def format_float(x) -> str:
    """Shortest decimal string that round-trips to the same float64."""
    return repr(float(x))
