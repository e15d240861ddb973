"""Task heads: linear-chain CRF for sequence labeling and a
self-attention + softmax classifier for sentence classification."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    add_bias,
    block,
    column,
    flatten,
    logsumexp_over_rows,
    logsumexp_vec,
    matmul,
    pick,
    softmax_vec,
    sub,
    tensor,
)
from .errors import DataError, DimensionError
from .layers import SelfAttnPoolParams, linear_forward, self_attention_pool, xavier_uniform


@dataclass(frozen=True)
class TagSet:
    """Ordered emittable tags plus reserved START/STOP transition states.

    Tag indices are dense and 0-based; START and STOP occupy the two extra
    rows/columns of the transition table and are never emitted.
    """

    tags: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tags)) != len(self.tags) or not self.tags:
            raise DataError(f"tag names must be unique and non-empty, got {self.tags}")

    def __len__(self) -> int:
        return len(self.tags)

    @property
    def start(self) -> int:
        return len(self.tags)

    @property
    def stop(self) -> int:
        return len(self.tags) + 1

    def index(self, tag: str) -> int:
        try:
            return self.tags.index(tag)
        except ValueError:
            raise DataError(f"unknown tag {tag!r}; known tags: {self.tags}")


@dataclass
class CrfParams:
    """Emission projection plus a (k+2, k+2) transition score table.

    The table is stored fully finite; entries for structurally forbidden
    moves (into START, out of STOP) are never read by scoring, the
    partition recurrence, or decoding, which realizes the "-inf" rule
    without storing non-finite values.
    """

    w: Tensor            # (k, d_in)
    b: Tensor            # (k,)
    transitions: Tensor  # (k+2, k+2)
    tagset: TagSet

    @classmethod
    def init(cls, tagset: TagSet, d_in: int, rng: np.random.Generator) -> "CrfParams":
        k = len(tagset)
        return cls(
            w=tensor(xavier_uniform(rng, k, d_in), requires_grad=True),
            b=tensor(np.zeros(k), requires_grad=True),
            transitions=tensor(rng.uniform(-0.1, 0.1, size=(k + 2, k + 2)), requires_grad=True),
            tagset=tagset,
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b
        yield f"{prefix}.transitions", self.transitions

    def masked_transitions(self) -> np.ndarray:
        """Transition table with the forbidden cells set to -inf (view for inspection)."""
        k = len(self.tagset)
        t = self.transitions.values.copy()
        t[:, self.tagset.start] = -np.inf   # nothing enters START
        t[self.tagset.stop, :] = -np.inf    # nothing leaves STOP
        t[self.tagset.start, self.tagset.stop] = -np.inf  # empty paths are not scored
        return t


def crf_emissions(h: Tensor, p: CrfParams) -> Tensor:
    """Project encoder states onto per-tag emission scores, one column per token."""
    return linear_forward(h, p.w, p.b)


def _check_tags(tags: Sequence[int], k: int, n: int) -> list[int]:
    tags = [int(t) for t in tags]
    if len(tags) != n:
        raise DataError(f"tag sequence length {len(tags)} does not match {n} tokens")
    for t in tags:
        if not 0 <= t < k:
            raise DataError(f"tag index {t} out of range for {k} emittable tags")
    return tags


def crf_sequence_score(emissions: Tensor, tags: Sequence[int], p: CrfParams) -> Tensor:
    """Path score: emissions along the path plus transitions, including
    START -> first and last -> STOP."""
    k, n = emissions.values.shape
    tags = _check_tags(tags, k, n)
    score = pick(p.transitions, p.tagset.start, tags[0])
    for i, t in enumerate(tags):
        score = add(score, pick(emissions, t, i))
        if i + 1 < n:
            score = add(score, pick(p.transitions, t, tags[i + 1]))
    return add(score, pick(p.transitions, tags[-1], p.tagset.stop))


def crf_log_partition(emissions: Tensor, p: CrfParams) -> Tensor:
    """Forward algorithm in log space over all tag paths."""
    k, n = emissions.values.shape
    if k != len(p.tagset):
        raise DimensionError(f"emissions rows {k} do not match tagset size {len(p.tagset)}")
    start_row = flatten(block(p.transitions, p.tagset.start, p.tagset.start + 1, 0, k))
    inner = block(p.transitions, 0, k, 0, k)
    stop_col = flatten(block(p.transitions, 0, k, p.tagset.stop, p.tagset.stop + 1))
    alpha = add(start_row, column(emissions, 0))
    for t in range(1, n):
        trellis = add_bias(inner, alpha)  # entry (i, j): alpha_i + T[i, j]
        alpha = add(logsumexp_over_rows(trellis), column(emissions, t))
    return logsumexp_vec(add(alpha, stop_col))


def crf_nll(emissions: Tensor, tags: Sequence[int], p: CrfParams) -> Tensor:
    """Negative log-likelihood of the gold path; non-negative by construction."""
    return sub(crf_log_partition(emissions, p), crf_sequence_score(emissions, tags, p))


def viterbi_decode(emissions: Tensor, p: CrfParams) -> tuple[list[int], float]:
    """Best-scoring tag path with its score.

    The recurrence runs from the last token backwards so the path is
    reconstructed front-to-first; taking the lowest tag index at every tie
    therefore yields the lexicographically smallest optimal sequence.
    """
    e = emissions.values
    k, n = e.shape
    trans = p.transitions.values
    start, stop = p.tagset.start, p.tagset.stop

    best = e[:, n - 1] + trans[:k, stop]
    nxt = np.zeros((n - 1, k), dtype=np.intp)
    for t in range(n - 2, -1, -1):
        cont = trans[:k, :k] + best[None, :]  # (tag at t, tag at t+1)
        nxt[t] = cont.argmax(axis=1)
        best = e[:, t] + cont.max(axis=1)

    first_scores = trans[start, :k] + best
    tag = int(first_scores.argmax())
    path = [tag]
    for t in range(n - 1):
        tag = int(nxt[t, tag])
        path.append(tag)
    # re-accumulate in crf_sequence_score's exact order so the returned
    # score is bitwise equal to scoring the decoded path
    score = float(trans[start, path[0]])
    for i, t in enumerate(path):
        score += float(e[t, i])
        if i + 1 < n:
            score += float(trans[t, path[i + 1]])
    score += float(trans[path[-1], stop])
    return path, score


@dataclass
class ClassifierParams:
    """Self-attention pooling followed by an affine projection to C classes."""

    pool: SelfAttnPoolParams
    w: Tensor  # (C, d_in)
    b: Tensor  # (C,)
    classes: tuple[str, ...]

    @classmethod
    def init(cls, classes: Sequence[str], d_in: int, rng: np.random.Generator) -> "ClassifierParams":
        classes = tuple(classes)
        if len(set(classes)) != len(classes) or len(classes) < 2:
            raise DataError(f"need at least two distinct classes, got {classes}")
        return cls(
            pool=SelfAttnPoolParams.init(d_in, rng),
            w=tensor(xavier_uniform(rng, len(classes), d_in), requires_grad=True),
            b=tensor(np.zeros(len(classes)), requires_grad=True),
            classes=classes,
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.pool.named_parameters(f"{prefix}.pool")
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b

    def index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise DataError(f"unknown class {label!r}; known classes: {self.classes}")


def classify(h: Tensor, p: ClassifierParams) -> Tensor:
    """Class probability vector for a sentence representation."""
    pooled = self_attention_pool(h, p.pool)
    return softmax_vec(linear_forward(pooled, p.w, p.b))
