"""Model assembly: two private encoders, a shared encoder fed by both
modalities through small affine adapters, the modality discriminator, and
one task head per modality.  Inference touches only the text private
encoder, the shared encoder, and the text head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .adversarial import DiscriminatorParams
from .data import TASK_SIGNAL_DIMS, SEQUENCE_TASKS, SentenceRecord
from .errors import ConfigError, DataError
from .layers import (
    BiLstmParams,
    CharCnnParams,
    CharVocab,
    EmbeddingTable,
    TextAwareAttnParams,
    Vocab,
    bilstm_forward,
    embed_tokens,
    linear_forward,
    rows_to_columns,
)
from .predictors import ClassifierParams, CrfParams, TagSet, classify, crf_emissions, crf_nll, viterbi_decode

SIGNAL_SETS = ("none", "eye", "eeg", "eye+eeg")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference setup
    (300-dim frozen word vectors, 30 char filters, hidden size 50)."""

    task: str = "ner"
    signals: str = "eye+eeg"
    word_dim: int = 300
    char_dim: int = 30
    char_window: int = 3
    char_filters: int = 30
    hidden_dim: int = 50
    shared_dim: int = 128
    n_max: int = 64
    eye_dim: Optional[int] = None
    eeg_dim: Optional[int] = None

    def __post_init__(self):
        if self.task not in TASK_SIGNAL_DIMS:
            raise ConfigError(f"task: unknown task {self.task!r}")
        if self.signals not in SIGNAL_SETS:
            raise ConfigError(f"signals: expected one of {SIGNAL_SETS}, got {self.signals!r}")
        eye_default, eeg_default = TASK_SIGNAL_DIMS[self.task]
        if self.eye_dim is None:
            self.eye_dim = eye_default
        if self.eeg_dim is None:
            self.eeg_dim = eeg_default

    @property
    def is_sequence_task(self) -> bool:
        return self.task in SEQUENCE_TASKS

    @property
    def use_chars(self) -> bool:
        # character features accompany sequence labeling only
        return self.is_sequence_task

    @property
    def signal_dim(self) -> int:
        dim = 0
        if "eye" in self.signals:
            dim += self.eye_dim
        if "eeg" in self.signals:
            dim += self.eeg_dim
        return dim

    @property
    def text_input_dim(self) -> int:
        return self.word_dim + (self.char_filters if self.use_chars else 0)

    @property
    def h_prime_dim(self) -> int:
        return 4 * self.hidden_dim


class SharedPrivateModel:
    """All parameter groups of the bimodal architecture."""

    def __init__(
        self,
        config: ModelConfig,
        vocab: Vocab,
        labels: Sequence[str],
        rng: np.random.Generator,
        char_vocab: Optional[CharVocab] = None,
        word_table: Optional[EmbeddingTable] = None,
    ):
        self.config = config
        self.vocab = vocab
        self.char_vocab = char_vocab
        if config.use_chars and char_vocab is None:
            raise ConfigError("char_vocab: sequence labeling requires a character vocabulary")

        c = config
        self.word_table = word_table or EmbeddingTable.random(len(vocab), c.word_dim, rng, frozen=True)
        if self.word_table.dim != c.word_dim:
            raise ConfigError(
                f"word_dim: table dimension {self.word_table.dim} does not match config {c.word_dim}"
            )
        self.char_cnn = (
            CharCnnParams.init(len(char_vocab), c.char_dim, c.char_window, c.char_filters, rng)
            if c.use_chars else None
        )
        self.text_adapter_w = ad.tensor(
            _xavier(rng, c.shared_dim, c.text_input_dim), requires_grad=True)
        self.text_adapter_b = ad.tensor(np.zeros(c.shared_dim), requires_grad=True)
        self.text_private = BiLstmParams.init(c.text_input_dim, c.hidden_dim, rng)
        self.shared = BiLstmParams.init(c.shared_dim, c.hidden_dim, rng)
        self.attention = TextAwareAttnParams.init(c.n_max, rng)
        self.discriminator = DiscriminatorParams.init(2 * c.hidden_dim, rng)

        if c.signal_dim > 0:
            self.cog_adapter_w = ad.tensor(
                _xavier(rng, c.shared_dim, c.signal_dim), requires_grad=True)
            self.cog_adapter_b = ad.tensor(np.zeros(c.shared_dim), requires_grad=True)
            self.cog_private = BiLstmParams.init(c.signal_dim, c.hidden_dim, rng)
        else:
            self.cog_adapter_w = self.cog_adapter_b = None
            self.cog_private = None

        if c.is_sequence_task:
            self.tagset = TagSet(tuple(labels))
            self.classes = None
            self.text_head = CrfParams.init(self.tagset, c.h_prime_dim, rng)
            self.cog_head = CrfParams.init(self.tagset, c.h_prime_dim, rng) if c.signal_dim else None
        else:
            self.tagset = None
            self.classes = tuple(labels)
            self.text_head = ClassifierParams.init(self.classes, c.h_prime_dim, rng)
            self.cog_head = ClassifierParams.init(self.classes, c.h_prime_dim, rng) if c.signal_dim else None

        # instrumentation: bumps whenever cognitive signal tensors are read
        self.cognitive_reads = 0
        self._assert_dimensions()

    # ------------------------------------------------------------------
    # construction helpers

    def _assert_dimensions(self) -> None:
        c = self.config
        checks = {
            "text_private.w_x": (self.text_private.fwd.w_x.shape, (4 * c.hidden_dim, c.text_input_dim)),
            "text_adapter": (self.text_adapter_w.shape, (c.shared_dim, c.text_input_dim)),
            "shared.w_x": (self.shared.fwd.w_x.shape, (4 * c.hidden_dim, c.shared_dim)),
            "head.input": ((self.text_head.w.values.shape[1],), (c.h_prime_dim,)),
        }
        if self.cog_private is not None:
            checks["cog_private.w_x"] = (self.cog_private.fwd.w_x.shape, (4 * c.hidden_dim, c.signal_dim))
        for name, (got, want) in checks.items():
            if tuple(got) != tuple(want):
                raise ConfigError(f"{name}: shape {got} does not match expected {want}")

    def dimension_summary(self) -> dict:
        c = self.config
        return {
            "text_input_dim": c.text_input_dim,
            "signal_dim": c.signal_dim,
            "shared_dim": c.shared_dim,
            "encoder_output_dim": 2 * c.hidden_dim,
            "h_prime_dim": c.h_prime_dim,
        }

    def named_parameters(self) -> dict[str, ad.Tensor]:
        """Ordered trainable parameters keyed by group-qualified name."""
        out: dict[str, ad.Tensor] = {}
        out.update(self.word_table.named_parameters("word_table"))
        if self.char_cnn is not None:
            out.update(self.char_cnn.named_parameters("char_cnn"))
        out["text_adapter.w"] = self.text_adapter_w
        out["text_adapter.b"] = self.text_adapter_b
        if self.cog_adapter_w is not None:
            out["cog_adapter.w"] = self.cog_adapter_w
            out["cog_adapter.b"] = self.cog_adapter_b
        out.update(self.text_private.named_parameters("text_private"))
        if self.cog_private is not None:
            out.update(self.cog_private.named_parameters("cog_private"))
        out.update(self.shared.named_parameters("shared_encoder"))
        out.update(self.attention.named_parameters("attention"))
        out.update(self.discriminator.named_parameters("discriminator"))
        out.update(self.text_head.named_parameters("text_head"))
        if self.cog_head is not None:
            out.update(self.cog_head.named_parameters("cog_head"))
        return out

    def parameter_groups(self) -> dict[str, dict[str, ad.Tensor]]:
        groups: dict[str, dict[str, ad.Tensor]] = {}
        for name, t in self.named_parameters().items():
            groups.setdefault(name.split(".")[0], {})[name] = t
        return groups

    def state(self) -> dict[str, np.ndarray]:
        state = {name: t.values.copy() for name, t in self.named_parameters().items()}
        if self.word_table.frozen:
            state["word_table.matrix"] = self.word_table.matrix.values.copy()
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if self.word_table.frozen:
            params["word_table.matrix"] = self.word_table.matrix
        for name, values in state.items():
            if name not in params:
                raise DataError(f"checkpoint parameter {name!r} not present in this model")
            if params[name].values.shape != values.shape:
                raise DataError(
                    f"checkpoint parameter {name!r} has shape {values.shape}, "
                    f"model expects {params[name].values.shape}"
                )
            params[name].values[...] = values

    # ------------------------------------------------------------------
    # encoding

    def _token_ids(self, record: SentenceRecord) -> list[int]:
        return self.vocab.encode(record.tokens)

    def _char_ids(self, record: SentenceRecord) -> Optional[list[list[int]]]:
        if self.char_cnn is None:
            return None
        return [self.char_vocab.encode(list(tok)) for tok in record.tokens]

    def signal_matrix(self, record: SentenceRecord) -> ad.Tensor:
        """Cognitive features as a constant (signal_dim, N) tensor."""
        c = self.config
        parts = []
        if "eye" in c.signals:
            if record.eye is None:
                raise DataError(f"sentence {record.sid}: cognitive signals missing at token 0")
            parts.append(record.eye)
        if "eeg" in c.signals:
            if record.eeg is None:
                raise DataError(f"sentence {record.sid}: cognitive signals missing at token 0")
            parts.append(record.eeg)
        if not parts:
            raise DataError("model has no cognitive signal set configured")
        self.cognitive_reads += 1
        return ad.tensor(np.concatenate(parts, axis=1).T)

    def forward_text(self, record: SentenceRecord) -> tuple[ad.Tensor, ad.Tensor]:
        """Text path: private encoding stacked on the shared encoding."""
        ids = self._token_ids(record)
        x = embed_tokens(ids, self.word_table, self.char_cnn, self._char_ids(record))
        private = bilstm_forward(x, self.text_private)
        shared_in = linear_forward(x, self.text_adapter_w, self.text_adapter_b)
        shared_states = bilstm_forward(shared_in, self.shared)
        return ad.concat([private, shared_states], axis=0), shared_states

    def forward_cognitive(self, record: SentenceRecord, use_attention: bool = True) -> tuple[ad.Tensor, ad.Tensor]:
        """Signal path: optional text-aware attention, then the private
        cognitive encoder and the shared encoder."""
        from .layers import text_aware_attention

        if self.cog_private is None:
            raise ConfigError("signals: model was configured without a cognitive path")
        signals = self.signal_matrix(record)
        if use_attention:
            h_word = rows_to_columns(self.word_table.matrix, self._token_ids(record))
            signals, _ = text_aware_attention(h_word, signals, self.attention)
        private = bilstm_forward(signals, self.cog_private)
        shared_in = linear_forward(signals, self.cog_adapter_w, self.cog_adapter_b)
        shared_states = bilstm_forward(shared_in, self.shared)
        return ad.concat([private, shared_states], axis=0), shared_states

    # ------------------------------------------------------------------
    # inference

    def infer(self, record: SentenceRecord):
        """Decode with the text path only; cognitive fields are never read."""
        h_prime, _ = self.forward_text(record)
        if self.tagset is not None:
            path, _ = viterbi_decode(crf_emissions(h_prime, self.text_head), self.text_head)
            return [self.tagset.tags[t] for t in path]
        probs = classify(h_prime, self.text_head)
        return self.classes[int(np.argmax(probs.values))], probs.values


def _xavier(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    from .layers import xavier_uniform

    return xavier_uniform(rng, rows, cols)


def task_loss(h_prime: ad.Tensor, record: SentenceRecord, head) -> ad.Tensor:
    """Negative log-likelihood of the gold annotation under the given head."""
    if isinstance(head, CrfParams):
        gold = [head.tagset.index(t) for t in record.tags]
        return crf_nll(crf_emissions(h_prime, head), gold, head)
    probs = classify(h_prime, head)
    return ad.scale(ad.log_clamped(ad.pick_vec(probs, head.index(record.label))), -1.0)


def build_vocabs(records: Sequence[SentenceRecord], config: ModelConfig) -> tuple[Vocab, Optional[CharVocab], tuple[str, ...]]:
    """Derive token/char vocabularies (first-appearance order) and the label
    inventory (sorted) from a training stream."""
    tokens: list[str] = []
    chars: list[str] = []
    labels: set[str] = set()
    for rec in records:
        tokens.extend(rec.tokens)
        for tok in rec.tokens:
            chars.extend(tok)
        if rec.tags is not None:
            labels.update(rec.tags)
        if rec.label is not None:
            labels.add(rec.label)
    vocab = Vocab(tokens)
    char_vocab = CharVocab(chars) if config.use_chars else None
    return vocab, char_vocab, tuple(sorted(labels))
