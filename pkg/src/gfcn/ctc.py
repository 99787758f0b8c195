"""Connectionist Temporal Classification: loss, gradient, decoding, oracle.

All recursions run in log space over the blank-interleaved label
``[blank, l1, blank, l2, ..., lL, blank]`` of length ``2L + 1``.  Lattices
are ``(T, K)`` arrays of per-frame log-probabilities; unless stated
otherwise the blank is the last class.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .tensor import Tensor, make_result

NEG_INF = -np.inf


class InfeasibleAlignmentError(ValueError):
    """The lattice has fewer frames than the label needs."""


@dataclass
class LogProbLattice:
    values: np.ndarray  # (T, K) log-probabilities
    blank_index: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"lattice must be (frames, classes), got {self.values.shape}")
        if not 0 <= self.blank_index < self.values.shape[1]:
            raise ValueError(f"blank index {self.blank_index} outside {self.values.shape[1]} classes")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def classes(self) -> int:
        return self.values.shape[1]

    def check_normalized(self, tol: float = 1e-5) -> None:
        sums = np.exp(self.values).sum(axis=1)
        if np.any(np.abs(sums - 1.0) > tol):
            raise ValueError(f"lattice frames do not sum to 1 (worst {sums[np.argmax(np.abs(sums - 1))]})")


def _blank(log_probs: np.ndarray, blank: int | None) -> int:
    K = log_probs.shape[1]
    b = K - 1 if blank is None else blank
    return b % K


def required_frames(label: Sequence[int]) -> int:
    """Minimum number of frames: one per symbol plus a blank between equal neighbours."""
    label = list(label)
    return len(label) + sum(1 for a, b in zip(label, label[1:]) if a == b)


def check_feasible(frames: int, label: Sequence[int]) -> None:
    need = max(1, required_frames(label))
    if frames < need:
        raise InfeasibleAlignmentError(
            f"infeasible alignment: label of length {len(label)} needs {need} frames, lattice has {frames}"
        )


def _extend(label: Sequence[int], blank: int) -> tuple[np.ndarray, np.ndarray]:
    ext = np.full(2 * len(label) + 1, blank, dtype=np.int64)
    ext[1::2] = label
    # s may be entered from s-2 when it holds a symbol different from the one two back
    skip = np.zeros(len(ext), dtype=bool)
    if len(ext) > 2:
        skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return ext, skip


def _lse3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    m = np.maximum(np.maximum(a, b), c)
    finite = np.isfinite(m)
    safe = np.where(finite, m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))
    return np.where(finite, safe + s, NEG_INF)


def forward_variables(log_probs: np.ndarray, label: Sequence[int], blank: int | None = None) -> np.ndarray:
    """log alpha, shape (T, 2L+1): log-prob of all prefixes ending in state s at frame t."""
    lp = np.asarray(log_probs, dtype=np.float64)
    blank = _blank(lp, blank)
    T = lp.shape[0]
    check_feasible(T, label)
    ext, skip = _extend(label, blank)
    S = len(ext)
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, blank]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    emit = lp[:, ext]
    for t in range(1, T):
        prev = alpha[t - 1]
        one = np.full(S, NEG_INF)
        one[1:] = prev[:-1]
        two = np.full(S, NEG_INF)
        two[2:] = prev[:-2]
        two[~skip] = NEG_INF
        alpha[t] = _lse3(prev, one, two) + emit[t]
    return alpha


def backward_variables(log_probs: np.ndarray, label: Sequence[int], blank: int | None = None) -> np.ndarray:
    """log beta, shape (T, 2L+1): log-prob of completing the label from state s after frame t.

    Excludes the emission at frame t itself, so alpha_t(s) + beta_t(s) is the
    log-mass of all alignments passing through (t, s).
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    blank = _blank(lp, blank)
    T = lp.shape[0]
    check_feasible(T, label)
    ext, skip = _extend(label, blank)
    S = len(ext)
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    emit = lp[:, ext]
    # state s at t can move to s, s+1, or s+2 (when s+2 allows the skip)
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        one = np.full(S, NEG_INF)
        one[:-1] = nxt[1:]
        two = np.full(S, NEG_INF)
        two[:-2] = nxt[2:]
        two[~skip_from] = NEG_INF
        beta[t] = _lse3(nxt, one, two)
    return beta


def ctc_loss(log_probs: np.ndarray, label: Sequence[int], blank: int | None = None) -> float:
    """Negative log-likelihood of ``label`` summed over all collapsing alignments."""
    lp = np.asarray(log_probs, dtype=np.float64)
    alpha = forward_variables(lp, label, blank)
    last = alpha[-1]
    ll = np.logaddexp(last[-1], last[-2]) if len(last) > 1 else last[-1]
    return float(-ll)


def ctc_loss_and_gradient(
    log_probs: np.ndarray, label: Sequence[int], blank: int | None = None
) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/d(log_probs), treating each log-probability as a free variable."""
    lp = np.asarray(log_probs, dtype=np.float64)
    b = _blank(lp, blank)
    alpha = forward_variables(lp, label, b)
    beta = backward_variables(lp, label, b)
    last = alpha[-1]
    ll = np.logaddexp(last[-1], last[-2]) if len(last) > 1 else last[-1]
    occupancy = np.exp(alpha + beta - ll)  # (T, S), rows sum to 1
    ext, _ = _extend(label, b)
    grad = np.zeros_like(lp)
    for s, k in enumerate(ext):
        grad[:, k] -= occupancy[:, s]
    return float(-ll), grad


def ctc_gradient(log_probs: np.ndarray, label: Sequence[int], blank: int | None = None) -> np.ndarray:
    return ctc_loss_and_gradient(log_probs, label, blank)[1]


# -- decoding -------------------------------------------------------------------------


def best_path(log_probs: np.ndarray, blank: int | None = None) -> np.ndarray:
    """Per-frame argmax; a frame whose maximum is shared with the blank decodes as blank."""
    lp = np.asarray(log_probs)
    b = _blank(lp, blank)
    idx = lp.argmax(axis=1)
    ties = lp[np.arange(len(lp)), b] >= lp[np.arange(len(lp)), idx]
    idx[ties] = b
    return idx


def collapse(path: Sequence[int], blank: int) -> list[int]:
    out: list[int] = []
    prev = None
    for k in path:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def greedy_decode(log_probs: np.ndarray, charset: Sequence[str] | None = None, blank: int | None = None):
    """Best-path decoding: argmax, merge repeats, drop blanks.

    Returns a string when ``charset`` is given, otherwise the index list.
    """
    lp = np.asarray(log_probs)
    b = _blank(lp, blank)
    labels = collapse(best_path(lp, b), b)
    if charset is None:
        return labels
    return "".join(charset[k] for k in labels)


# -- exhaustive oracle -------------------------------------------------------------------

MAX_ORACLE_FRAMES = 10


@lru_cache(maxsize=64)
def _all_paths(T: int, K: int, blank: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Every length-T path, with the collapsed label of each encoded as (length, code)."""
    paths = np.array(list(itertools.product(range(K), repeat=T)), dtype=np.int64).reshape(-1, T)
    prev = np.concatenate([np.full((len(paths), 1), -1), paths[:, :-1]], axis=1)
    keep = (paths != blank) & (paths != prev)
    code = np.zeros(len(paths), dtype=np.int64)
    length = np.zeros(len(paths), dtype=np.int64)
    for t in range(T):
        k = keep[:, t]
        code = np.where(k, code * (K + 1) + paths[:, t] + 1, code)
        length += k
    return paths, length, code


def brute_force_ctc(log_probs: np.ndarray, label: Sequence[int], blank: int | None = None) -> float:
    """-log of the summed probability of every path collapsing to ``label``.

    Enumerates all K**T paths; returns ``inf`` when no path collapses to the label.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    T, K = lp.shape
    if T > MAX_ORACLE_FRAMES:
        raise ValueError(f"brute_force_ctc enumerates K**T paths; T={T} exceeds {MAX_ORACLE_FRAMES}")
    b = _blank(lp, blank)
    paths, length, code = _all_paths(T, K, b)
    target = 0
    for k in label:
        target = target * (K + 1) + int(k) + 1
    match = (length == len(label)) & (code == target)
    if not match.any():
        return float("inf")
    scores = lp[np.arange(T)[None, :], paths[match]].sum(axis=1)
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())))


# -- batched op on model output ------------------------------------------------------------


def ctc_batch_loss(
    log_probs: Tensor,
    labels: Sequence[Sequence[int]],
    frame_counts: Sequence[int],
    blank: int | None = None,
) -> Tensor:
    """Mean per-sample CTC loss over a (B, K, 1, W) log-probability tensor.

    Sample ``i`` uses only its first ``frame_counts[i]`` frames; padding frames
    receive zero gradient.
    """
    B, K, H, W = log_probs.shape
    if H != 1:
        raise ValueError(f"CTC expects collapsed height, got {log_probs.shape}")
    if len(labels) != B or len(frame_counts) != B:
        raise ValueError("labels and frame_counts must have one entry per batch sample")
    b = _blank(log_probs.data[:, :, 0, :].transpose(0, 2, 1)[0], blank)
    grad = np.zeros(log_probs.shape, dtype=np.float64)
    total = 0.0
    for i, (label, n) in enumerate(zip(labels, frame_counts)):
        if not 1 <= n <= W:
            raise ValueError(f"sample {i}: frame count {n} outside 1..{W}")
        lattice = log_probs.data[i, :, 0, :n].T
        loss, g = ctc_loss_and_gradient(lattice, label, b)
        total += loss
        grad[i, :, 0, :n] = g.T
    scale = 1.0 / B
    grad = (grad * scale).astype(log_probs.dtype)
    out = np.asarray(total * scale, dtype=log_probs.dtype)
    return make_result(out, (log_probs,), lambda g: (grad * g,))
