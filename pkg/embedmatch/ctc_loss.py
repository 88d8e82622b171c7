"""CTC negative log-likelihood and its gradient, computed in log space.

Column 0 of every posterior row is the blank label; reference labels are column
indices >= 1. The gradient is taken with respect to the pre-softmax scores, i.e.
``softmax(z) - gamma`` where gamma is the alignment posterior of each label.
"""

import itertools
import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp, log_softmax

from .embed_core import FloatArray
from .errors import InfeasibleAlignmentError, InputError

BLANK = 0


class CtcResult(NamedTuple):
    neg_log_likelihood: float
    grad: FloatArray


def expand_with_blanks(ref: Sequence[int]) -> np.ndarray:
    """[a, b] -> [blank, a, blank, b, blank]"""
    expanded = np.full(2 * len(ref) + 1, BLANK, dtype=np.int64)
    expanded[1::2] = ref
    return expanded


def min_frames(ref: Sequence[int]) -> int:
    """Shortest frame count that can emit ``ref`` (a blank is forced between repeats)"""
    repeats = sum(1 for a, b in zip(ref, ref[1:]) if a == b)
    return len(ref) + repeats


def _skip_allowed(expanded: np.ndarray) -> np.ndarray:
    """Transitions s-2 -> s are allowed into a label that differs from the label two back"""
    allowed = np.zeros(expanded.size, dtype=bool)
    allowed[2:] = (expanded[2:] != BLANK) & (expanded[2:] != expanded[:-2])
    return allowed


def ctc_forward(log_probs: FloatArray, expanded: np.ndarray) -> FloatArray:
    T, S = log_probs.shape[0], expanded.size
    skip = _skip_allowed(expanded)
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = log_probs[0, expanded[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, expanded[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate([[-np.inf], prev[:-1]])
        jump = np.where(skip, np.concatenate([[-np.inf, -np.inf], prev[:-2]]), -np.inf)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), jump) + log_probs[t, expanded]
    return alpha


def ctc_backward(log_probs: FloatArray, expanded: np.ndarray) -> FloatArray:
    """beta[t, s]: log probability of emitting the rest of the labels from state s at t,
    including the emission at t"""
    T, S = log_probs.shape[0], expanded.size
    # a jump s -> s+2 is allowed when s+2 may be entered by a skip
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = _skip_allowed(expanded)[2:]
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = log_probs[T - 1, expanded[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = log_probs[T - 1, expanded[S - 2]]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.concatenate([nxt[1:], [-np.inf]])
        jump = np.where(skip_from, np.concatenate([nxt[2:], [-np.inf, -np.inf]]), -np.inf)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), jump) + log_probs[t, expanded]
    return beta


def _validate(log_posteriors: FloatArray, ref: Sequence[int]) -> FloatArray:
    log_probs = np.asarray(log_posteriors, dtype=np.float64)
    if log_probs.ndim != 2:
        raise InputError(f"Expected a T x (n+1) matrix, got shape {log_probs.shape}")
    if np.any(np.isnan(log_probs)):
        raise InputError("Log posteriors contain NaN")
    if not ref:
        raise InputError("Reference label sequence is empty")
    if any(not 1 <= label < log_probs.shape[1] for label in ref):
        raise InputError(f"Reference labels must lie in 1..{log_probs.shape[1] - 1}")
    required = min_frames(ref)
    if log_probs.shape[0] < required:
        raise InfeasibleAlignmentError(log_probs.shape[0], required)
    return log_probs


def ctc_loss(log_posteriors: FloatArray, ref: Sequence[int]) -> CtcResult:
    """CTC loss of ``ref`` under per-frame log posteriors.

    Args:
        log_posteriors: (T, n + 1) log probabilities, column 0 is blank
        ref: label sequence, entries in 1..n

    Returns:
        CtcResult with -log P(ref | X) and d loss / d pre-softmax scores
    """
    ref = [int(label) for label in ref]
    log_probs = _validate(log_posteriors, ref)
    expanded = expand_with_blanks(ref)
    alpha = ctc_forward(log_probs, expanded)
    beta = ctc_backward(log_probs, expanded)
    log_total = float(np.logaddexp(alpha[-1, -1], alpha[-1, -2]))
    if not math.isfinite(log_total):
        raise InfeasibleAlignmentError(log_probs.shape[0], min_frames(ref))

    # alpha * beta counts the emission at t twice
    emission = log_probs[:, expanded]
    with np.errstate(invalid="ignore"):
        log_occupancy = np.where(np.isfinite(emission), alpha + beta - emission, -np.inf)
    log_gamma = np.full_like(log_probs, -np.inf)
    for label in np.unique(expanded):
        states = expanded == label
        log_gamma[:, label] = logsumexp(log_occupancy[:, states], axis=1)
    gamma = np.exp(log_gamma - log_total)
    grad = np.exp(log_probs) - gamma
    return CtcResult(neg_log_likelihood=-log_total, grad=grad)


def total_log_probability(log_posteriors: FloatArray, ref: Sequence[int]) -> tuple[float, float]:
    """(forward total, backward total) in log space, for consistency checks"""
    ref = [int(label) for label in ref]
    log_probs = _validate(log_posteriors, ref)
    expanded = expand_with_blanks(ref)
    alpha = ctc_forward(log_probs, expanded)
    beta = ctc_backward(log_probs, expanded)
    forward = float(np.logaddexp(alpha[-1, -1], alpha[-1, -2]))
    backward = float(np.logaddexp(beta[0, 0], beta[0, 1]))
    return forward, backward


def collapse_path(path: Sequence[int]) -> tuple[int, ...]:
    """Merge repeats, then drop blanks"""
    return tuple(label for label, _ in itertools.groupby(path) if label != BLANK)


def brute_force_ctc_probability(posteriors: FloatArray, ref: Sequence[int]) -> float:
    """Sum of the probabilities of every frame path collapsing to ``ref``"""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    T, labels = posteriors.shape
    target = tuple(int(label) for label in ref)
    total = 0.0
    for path in itertools.product(range(labels), repeat=T):
        if collapse_path(path) == target:
            total += float(np.prod(posteriors[np.arange(T), path]))
    return total


def ctc_grad_check(
    seed: int = 0,
    frames: int = 6,
    labels: int = 4,
    ref_length: int = 2,
    h: float = 1e-5,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    Scores are drawn at random; the relative error of each entry is taken
    against max(|analytic|, |numeric|, 1e-4).
    """
    rng = np.random.default_rng(seed)
    ref = [int(x) for x in rng.integers(1, labels + 1, size=ref_length)]
    while min_frames(ref) > frames:
        ref = ref[:-1]
    logits = rng.standard_normal((frames, labels + 1))

    def loss(z: FloatArray) -> float:
        return ctc_loss(log_softmax(z, axis=1), ref).neg_log_likelihood

    analytic = ctc_loss(log_softmax(logits, axis=1), ref).grad
    numeric = np.zeros_like(logits)
    for index in np.ndindex(logits.shape):
        plus, minus = logits.copy(), logits.copy()
        plus[index] += h
        minus[index] -= h
        numeric[index] = (loss(plus) - loss(minus)) / (2 * h)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    return float(np.max(np.abs(analytic - numeric) / scale))
