"""Neural building blocks: embeddings, character CNN, Bi-LSTM encoders,
text-aware attention over signal features, self-attention pooling, and the
linear projection shared by every head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    add_bias,
    block,
    column,
    concat,
    flatten,
    matmul,
    max_over_rows,
    mul,
    rows_to_columns,
    scale_rows,
    segment,
    sigmoid_elem,
    softmax_vec,
    stack_columns,
    tanh_elem,
    tensor,
    transpose,
)
from .errors import CapacityError, DataError, DimensionError

UNK_TOKEN = "<unk>"
PAD_CHAR = "<pad>"
UNK_CHAR = "<unk>"


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


class Vocab:
    """Token-to-index map with a reserved UNK entry at index 0."""

    def __init__(self, tokens: Iterable[str], unk: Optional[str] = UNK_TOKEN):
        self.unk = unk
        self._index: dict[str, int] = {}
        if unk is not None:
            self._index[unk] = 0
        for tok in tokens:
            if tok not in self._index:
                self._index[tok] = len(self._index)
        self.items = tuple(sorted(self._index, key=self._index.get))

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        idx = self._index.get(token)
        if idx is None:
            if self.unk is None:
                raise DataError(f"token {token!r} not in vocabulary and no UNK mapping exists")
            return self._index[self.unk]
        return idx

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index(t) for t in tokens]


class CharVocab(Vocab):
    """Character map with PAD at index 0 and UNK at index 1."""

    def __init__(self, chars: Iterable[str]):
        self.unk = UNK_CHAR
        self._index = {PAD_CHAR: 0, UNK_CHAR: 1}
        for ch in chars:
            if ch not in self._index:
                self._index[ch] = len(self._index)
        self.items = tuple(sorted(self._index, key=self._index.get))

    @property
    def pad_index(self) -> int:
        return 0


@dataclass
class EmbeddingTable:
    """Lookup matrix of shape (V, dim); `frozen` fixes it during training."""

    matrix: Tensor
    frozen: bool = True
    unk_index: Optional[int] = 0

    @property
    def size(self) -> int:
        return self.matrix.values.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.values.shape[1]

    @classmethod
    def random(cls, size: int, dim: int, rng: np.random.Generator, frozen: bool = True,
               scale: float = 0.5) -> "EmbeddingTable":
        values = rng.uniform(-scale, scale, size=(size, dim))
        return cls(tensor(values, requires_grad=not frozen), frozen=frozen)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if not self.frozen:
            yield f"{prefix}.matrix", self.matrix


def load_word_vectors(path: str) -> tuple[list[str], np.ndarray]:
    """Read a plain-text vector file: one token per line followed by its reals."""
    tokens: list[str] = []
    rows: list[list[float]] = []
    dim: Optional[int] = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                vec = [float(v) for v in parts[1:]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric vector component")
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} components, got {len(vec)}")
            tokens.append(parts[0])
            rows.append(vec)
    if dim is None:
        raise DataError(f"{path}: empty vector file")
    return tokens, np.asarray(rows)


def table_from_vectors(tokens: list[str], matrix: np.ndarray, frozen: bool = True) -> tuple[Vocab, EmbeddingTable]:
    """Build a vocabulary and table from loaded vectors; UNK row 0 is the zero vector."""
    vocab = Vocab(tokens)
    full = np.zeros((len(vocab), matrix.shape[1]))
    for i, tok in enumerate(tokens):
        full[vocab.index(tok)] = matrix[i]
    return vocab, EmbeddingTable(tensor(full, requires_grad=not frozen), frozen=frozen)


@dataclass
class CharCnnParams:
    """Character convolution: `filters` is (f, char_dim * window)."""

    embeddings: Tensor
    filters: Tensor
    bias: Tensor
    window: int

    @property
    def char_dim(self) -> int:
        return self.embeddings.values.shape[1]

    @property
    def n_filters(self) -> int:
        return self.filters.values.shape[0]

    @classmethod
    def init(cls, char_vocab_size: int, char_dim: int, window: int, n_filters: int,
             rng: np.random.Generator) -> "CharCnnParams":
        return cls(
            embeddings=tensor(rng.uniform(-0.5, 0.5, size=(char_vocab_size, char_dim)), requires_grad=True),
            filters=tensor(xavier_uniform(rng, n_filters, char_dim * window), requires_grad=True),
            bias=tensor(np.zeros(n_filters), requires_grad=True),
            window=window,
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.embeddings", self.embeddings
        yield f"{prefix}.filters", self.filters
        yield f"{prefix}.bias", self.bias


def char_cnn_embed(char_ids: Sequence[int], p: CharCnnParams, pad_index: int = 0) -> Tensor:
    """Convolve a word's character embeddings and max-pool over positions."""
    if len(char_ids) == 0:
        raise DataError("char_cnn_embed: word must have at least one character")
    ids = list(char_ids)
    while len(ids) < p.window:
        ids.append(pad_index)
    emb = rows_to_columns(p.embeddings, ids)  # (char_dim, L)
    length = len(ids)
    scores = []
    for j in range(length - p.window + 1):
        window = flatten(block(emb, 0, p.char_dim, j, j + p.window))
        scores.append(add(matmul(p.filters, window), p.bias))
    conv = stack_columns(scores)  # (f, positions)
    return max_over_rows(transpose(conv))


def embed_tokens(
    token_ids: Sequence[int],
    table: EmbeddingTable,
    char_cnn: Optional[CharCnnParams] = None,
    char_id_seqs: Optional[Sequence[Sequence[int]]] = None,
) -> Tensor:
    """Column i is the representation of token i: word row, plus the
    character-CNN vector when a char model is supplied."""
    word = rows_to_columns(table.matrix, token_ids)
    if char_cnn is None:
        return word
    if char_id_seqs is None or len(char_id_seqs) != len(token_ids):
        raise DataError("embed_tokens: char id sequences required for every token")
    chars = stack_columns([char_cnn_embed(cids, char_cnn) for cids in char_id_seqs])
    return concat([word, chars], axis=0)


@dataclass
class LstmDirection:
    w_x: Tensor  # (4h, d_in), gate order input/forget/output/candidate
    w_h: Tensor  # (4h, h)
    b: Tensor    # (4h,)


@dataclass
class BiLstmParams:
    fwd: LstmDirection
    bwd: LstmDirection
    hidden_dim: int

    @classmethod
    def init(cls, d_in: int, d_h: int, rng: np.random.Generator) -> "BiLstmParams":
        def direction() -> LstmDirection:
            b = np.zeros(4 * d_h)
            b[d_h:2 * d_h] = 1.0  # forget-gate bias
            return LstmDirection(
                w_x=tensor(xavier_uniform(rng, 4 * d_h, d_in), requires_grad=True),
                w_h=tensor(xavier_uniform(rng, 4 * d_h, d_h), requires_grad=True),
                b=tensor(b, requires_grad=True),
            )

        return cls(fwd=direction(), bwd=direction(), hidden_dim=d_h)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for tag, d in (("fwd", self.fwd), ("bwd", self.bwd)):
            yield f"{prefix}.{tag}.w_x", d.w_x
            yield f"{prefix}.{tag}.w_h", d.w_h
            yield f"{prefix}.{tag}.b", d.b


def _lstm_run(cols: list[Tensor], d: LstmDirection, h_dim: int) -> list[Tensor]:
    h = tensor(np.zeros(h_dim))
    c = tensor(np.zeros(h_dim))
    outs = []
    for x_t in cols:
        pre = add(add(matmul(d.w_x, x_t), matmul(d.w_h, h)), d.b)
        gate_i = sigmoid_elem(segment(pre, 0, h_dim))
        gate_f = sigmoid_elem(segment(pre, h_dim, 2 * h_dim))
        gate_o = sigmoid_elem(segment(pre, 2 * h_dim, 3 * h_dim))
        cand = tanh_elem(segment(pre, 3 * h_dim, 4 * h_dim))
        c = add(mul(gate_f, c), mul(gate_i, cand))
        h = mul(gate_o, tanh_elem(c))
        outs.append(h)
    return outs


def bilstm_forward(x: Tensor, p: BiLstmParams) -> Tensor:
    """Bidirectional LSTM over the columns of x; output rows 0..h are the
    forward states, h..2h the backward states."""
    if x.values.ndim != 2 or x.values.shape[1] < 1:
        raise DimensionError(f"bilstm_forward: need a (d_in, N>=1) input, got {x.values.shape}")
    n = x.values.shape[1]
    cols = [column(x, t) for t in range(n)]
    fwd = _lstm_run(cols, p.fwd, p.hidden_dim)
    bwd = _lstm_run(cols[::-1], p.bwd, p.hidden_dim)[::-1]
    return concat([stack_columns(fwd), stack_columns(bwd)], axis=0)


def _valid_length(width: int, mask: Optional[Sequence[bool]]) -> int:
    if mask is None:
        return width
    flags = [bool(m) for m in mask]
    if len(flags) != width:
        raise DimensionError(f"mask length {len(flags)} does not match width {width}")
    n = sum(flags)
    if flags[:n] != [True] * n:
        raise DataError("mask must mark a contiguous valid prefix (padding is a suffix)")
    if n == 0:
        raise DataError("mask leaves no valid positions")
    return n


@dataclass
class TextAwareAttnParams:
    """Trainable (n_max, n_max) position-compatibility matrix."""

    u: Tensor
    n_max: int

    @classmethod
    def init(cls, n_max: int, rng: np.random.Generator) -> "TextAwareAttnParams":
        return cls(u=tensor(xavier_uniform(rng, n_max, n_max), requires_grad=True), n_max=n_max)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.u", self.u


def text_aware_attention(
    h_word: Tensor,
    h_cog: Tensor,
    p: TextAwareAttnParams,
    mask: Optional[Sequence[bool]] = None,
) -> tuple[Tensor, Tensor]:
    """Feature-dimension attention over signal rows, driven by a
    word/signal compatibility matrix.

    Returns the attended signal matrix (rows scaled by their weights,
    valid columns only) and the weight vector itself.
    """
    if h_word.values.shape[1] != h_cog.values.shape[1]:
        raise DimensionError(
            f"text_aware_attention: column counts differ {h_word.values.shape} and {h_cog.values.shape}"
        )
    n = _valid_length(h_word.values.shape[1], mask)
    if n > p.n_max:
        raise CapacityError(f"sequence length {n} exceeds the attention capacity {p.n_max}")
    words = block(h_word, 0, h_word.values.shape[0], 0, n) if n != h_word.values.shape[1] else h_word
    cogs = block(h_cog, 0, h_cog.values.shape[0], 0, n) if n != h_cog.values.shape[1] else h_cog
    compat = tanh_elem(matmul(matmul(words, block(p.u, 0, n, 0, n)), transpose(cogs)))
    importance = max_over_rows(compat)  # one score per signal feature
    alpha = softmax_vec(importance)
    return scale_rows(cogs, alpha), alpha


@dataclass
class SelfAttnPoolParams:
    w: Tensor  # (d, d)
    b: Tensor  # (d,)
    v: Tensor  # (d,)

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "SelfAttnPoolParams":
        return cls(
            w=tensor(xavier_uniform(rng, dim, dim), requires_grad=True),
            b=tensor(np.zeros(dim), requires_grad=True),
            v=tensor(xavier_uniform(rng, dim, 1)[:, 0], requires_grad=True),
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b
        yield f"{prefix}.v", self.v


def self_attention_pool(h: Tensor, p: SelfAttnPoolParams, mask: Optional[Sequence[bool]] = None) -> Tensor:
    """Position-weighted sum of columns; weights softmax(v . tanh(W h + b))."""
    if h.values.ndim != 2 or h.values.shape[1] < 1:
        raise DimensionError(f"self_attention_pool: need a (d, N>=1) input, got {h.values.shape}")
    n = _valid_length(h.values.shape[1], mask)
    cols = block(h, 0, h.values.shape[0], 0, n) if n != h.values.shape[1] else h
    keys = tanh_elem(add_bias(matmul(p.w, cols), p.b))
    alpha = softmax_vec(matmul(transpose(keys), p.v))
    return matmul(cols, alpha)


def linear_forward(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Column-wise affine map W h_i + b (also accepts a single vector)."""
    if h.values.shape[0] != w.values.shape[1]:
        raise DimensionError(
            f"linear_forward: weight {w.values.shape} does not accept input {h.values.shape}"
        )
    return add_bias(matmul(w, h), b)
