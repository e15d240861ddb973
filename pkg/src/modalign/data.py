"""Dataset ingestion (TSV), signal normalization, fold construction, and the
synthetic bimodal benchmark generator that keeps the test surface
self-contained."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DataError, ParseError

# Per-task signal widths: NER uses the 17 gaze features and 8 EEG bands;
# sentiment/relation use 5 gaze features and a single band-averaged value.
TASK_SIGNAL_DIMS = {
    "ner": (17, 8),
    "sentiment": (5, 1),
    "relation": (5, 1),
}
SEQUENCE_TASKS = {"ner"}


@dataclass(frozen=True)
class SentenceRecord:
    """Tokens plus labels and optional per-word signal matrices.

    Sequence-labeling records carry `tags` (one per token); classification
    records carry a single `label`.  Signal matrices have one row per token.
    """

    sid: int
    tokens: tuple[str, ...]
    tags: Optional[tuple[str, ...]] = None
    label: Optional[str] = None
    eye: Optional[np.ndarray] = None
    eeg: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.tokens:
            raise DataError(f"sentence {self.sid}: no tokens")
        if self.tags is not None and len(self.tags) != len(self.tokens):
            raise DataError(f"sentence {self.sid}: {len(self.tags)} tags for {len(self.tokens)} tokens")
        for name, sig in (("eye", self.eye), ("eeg", self.eeg)):
            if sig is not None and sig.shape[0] != len(self.tokens):
                raise DataError(
                    f"sentence {self.sid}: {name} matrix has {sig.shape[0]} rows "
                    f"for {len(self.tokens)} tokens"
                )

    @property
    def has_signals(self) -> bool:
        return self.eye is not None or self.eeg is not None


@dataclass(frozen=True)
class TsvSchema:
    """Declares the task and signal column layout of a TSV file."""

    task: str
    n_eye: int = 0
    n_eeg: int = 0

    def __post_init__(self):
        if self.task not in TASK_SIGNAL_DIMS:
            raise DataError(f"unknown task {self.task!r}")

    @property
    def signal_columns(self) -> int:
        return self.n_eye + self.n_eeg

    @classmethod
    def for_task(cls, task: str, signals: str = "eye+eeg") -> "TsvSchema":
        eye, eeg = TASK_SIGNAL_DIMS.get(task, (0, 0))
        if task not in TASK_SIGNAL_DIMS:
            raise DataError(f"unknown task {task!r}")
        return cls(
            task=task,
            n_eye=eye if "eye" in signals else 0,
            n_eeg=eeg if "eeg" in signals else 0,
        )


def _finish_sentence(sid, rows, schema, path, start_line):
    tokens = tuple(r[0] for r in rows)
    labels = [r[1] for r in rows]
    eye = eeg = None
    if rows[0][2] is not None:
        sig = np.asarray([r[2] for r in rows])
        if schema.n_eye:
            eye = sig[:, :schema.n_eye]
        if schema.n_eeg:
            eeg = sig[:, schema.n_eye:]
    if schema.task in SEQUENCE_TASKS:
        return SentenceRecord(sid=sid, tokens=tokens, tags=tuple(labels), eye=eye, eeg=eeg)
    if len(set(labels)) != 1:
        raise ParseError(path, start_line, f"conflicting sentence labels {sorted(set(labels))}")
    return SentenceRecord(sid=sid, tokens=tokens, label=labels[0], eye=eye, eeg=eeg)


def load_tsv(path: str, schema: TsvSchema) -> list[SentenceRecord]:
    """Read blank-line-separated sentences: token, label, then the declared
    signal columns.  Files without signal columns load with absent matrices."""
    records: list[SentenceRecord] = []
    rows: list[tuple] = []
    start_line = 1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                if rows:
                    records.append(_finish_sentence(len(records), rows, schema, path, start_line))
                    rows = []
                start_line = lineno + 1
                continue
            parts = line.split("\t")
            if len(parts) == 2:
                signals = None
            elif len(parts) == 2 + schema.signal_columns and schema.signal_columns > 0:
                try:
                    signals = [float(v) for v in parts[2:]]
                except ValueError:
                    raise ParseError(path, lineno, f"non-numeric signal value in {parts[2:]}")
            else:
                raise ParseError(
                    path, lineno,
                    f"expected 2 or {2 + schema.signal_columns} columns, got {len(parts)}",
                )
            if rows and (rows[0][2] is None) != (signals is None):
                raise ParseError(path, lineno, "signal columns present for only part of a sentence")
            rows.append((parts[0], parts[1], signals))
    if rows:
        records.append(_finish_sentence(len(records), rows, schema, path, start_line))
    return records


def write_tsv(path: str, records: Sequence[SentenceRecord], schema: TsvSchema) -> None:
    """Inverse of load_tsv up to float formatting (repr round-trips exactly)."""
    from .reporting import atomic_write

    lines = []
    for rec in records:
        for i, tok in enumerate(rec.tokens):
            label = rec.tags[i] if rec.tags is not None else rec.label
            cols = [tok, label]
            if rec.has_signals:
                if rec.eye is not None:
                    cols.extend(repr(float(v)) for v in rec.eye[i])
                if rec.eeg is not None:
                    cols.extend(repr(float(v)) for v in rec.eeg[i])
            lines.append("\t".join(cols))
        lines.append("")
    atomic_write(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# signal normalization


@dataclass
class Normalizer:
    """Per-feature z-scoring with constants fit on the training split.

    Features with a near-zero standard deviation are zeroed outright so
    constant columns cannot blow up.
    """

    eye_mean: Optional[np.ndarray] = None
    eye_std: Optional[np.ndarray] = None
    eeg_mean: Optional[np.ndarray] = None
    eeg_std: Optional[np.ndarray] = None

    MIN_STD = 1e-12

    @classmethod
    def fit(cls, records: Sequence[SentenceRecord]) -> "Normalizer":
        norm = cls()
        for name in ("eye", "eeg"):
            stacked = [getattr(r, name) for r in records if getattr(r, name) is not None]
            if stacked:
                data = np.concatenate(stacked, axis=0)
                setattr(norm, f"{name}_mean", data.mean(axis=0))
                setattr(norm, f"{name}_std", data.std(axis=0))
        return norm

    def _apply(self, sig: Optional[np.ndarray], mean, std) -> Optional[np.ndarray]:
        if sig is None or mean is None:
            return sig
        live = std > self.MIN_STD
        out = np.zeros_like(sig, dtype=float)
        out[:, live] = (sig[:, live] - mean[live]) / std[live]
        return out

    def transform(self, records: Sequence[SentenceRecord]) -> list[SentenceRecord]:
        return [
            replace(rec,
                    eye=self._apply(rec.eye, self.eye_mean, self.eye_std),
                    eeg=self._apply(rec.eeg, self.eeg_mean, self.eeg_std))
            for rec in records
        ]

    def save(self, path: str) -> None:
        from .reporting import atomic_write

        lines = []
        for key in ("eye_mean", "eye_std", "eeg_mean", "eeg_std"):
            vec = getattr(self, key)
            if vec is not None:
                lines.append(f"{key}=" + ",".join(repr(float(v)) for v in vec))
        atomic_write(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "Normalizer":
        norm = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                key, _, value = line.partition("=")
                setattr(norm, key, np.asarray([float(v) for v in value.split(",")]))
        return norm


def normalize_signals(
    train: Sequence[SentenceRecord],
    *others: Sequence[SentenceRecord],
) -> tuple:
    """Fit constants on the training split and apply them to every split."""
    norm = Normalizer.fit(train)
    out = [norm.transform(train)] + [norm.transform(o) for o in others]
    return (*out, norm)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict  # sid -> fold index

    def fold_of(self, rec: SentenceRecord) -> int:
        return self.assignment[rec.sid]

    def split(self, records: Sequence[SentenceRecord], fold: int) -> tuple[list, list]:
        train = [r for r in records if self.assignment[r.sid] != fold]
        held = [r for r in records if self.assignment[r.sid] == fold]
        return train, held


def make_folds(records: Sequence[SentenceRecord], k: int, seed: int) -> FoldPlan:
    """Seeded shuffle keyed on record ids, then round-robin assignment."""
    if k > len(records):
        raise ContractError(f"cannot make {k} folds from {len(records)} records")
    sids = sorted(r.sid for r in records)
    if len(set(sids)) != len(sids):
        raise DataError("record ids must be unique for fold assignment")
    order = np.random.default_rng(seed).permutation(len(sids))
    assignment = {sids[idx]: pos % k for pos, idx in enumerate(order)}
    return FoldPlan(k=k, assignment=assignment)


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings for the self-contained bimodal benchmark.

    `rho` controls how strongly signals encode labels: 0 makes them pure
    noise, 1 makes them the label's one-hot code exactly.
    """

    task: str = "ner"
    labels: tuple[str, ...] = ("ENT",)  # entity types (ner) or classes
    vocab_size: int = 90
    min_len: int = 4
    max_len: int = 9
    signal_dim: int = 8
    rho: float = 0.8
    noise: float = 1.0
    seed: int = 1
    n_train: int = 120
    n_dev: int = 30
    n_test: int = 60

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise DataError(f"rho must lie in [0, 1], got {self.rho}")
        if self.signal_dim < len(self.conditioning_tags()):
            raise DataError("signal_dim must cover one coordinate per label value")

    def conditioning_tags(self) -> tuple[str, ...]:
        if self.task in SEQUENCE_TASKS:
            tags = ["O"]
            for ent in self.labels:
                tags.extend([f"B-{ent}", f"I-{ent}"])
            return tuple(tags)
        return self.labels

    def schema(self) -> TsvSchema:
        return TsvSchema(task=self.task, n_eye=self.signal_dim, n_eeg=0)


def _tag_sequence(spec: SynthSpec, rng: np.random.Generator) -> list[str]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    tags: list[str] = []
    while len(tags) < length:
        room = length - len(tags)
        if rng.random() < 0.35 and room >= 1:
            ent = spec.labels[int(rng.integers(0, len(spec.labels)))]
            span = min(int(rng.integers(1, 4)), room)
            tags.append(f"B-{ent}")
            tags.extend([f"I-{ent}"] * (span - 1))
        else:
            tags.append("O")
    return tags


def _generate_records(spec: SynthSpec, count: int, rng: np.random.Generator,
                      sid_base: int, with_signals: bool) -> list[SentenceRecord]:
    cond = spec.conditioning_tags()
    blocks = np.array_split(np.arange(spec.vocab_size), len(cond))
    records = []
    for i in range(count):
        if spec.task in SEQUENCE_TASKS:
            tags = _tag_sequence(spec, rng)
            label = None
            token_conds = tags
        else:
            label = spec.labels[int(rng.integers(0, len(spec.labels)))]
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            tags = None
            token_conds = [label] * length
        tokens = []
        for tag in token_conds:
            blk = blocks[cond.index(tag)]
            tokens.append(f"w{int(rng.choice(blk)):04d}")
        signals = None
        if with_signals:
            onehot = np.zeros((len(token_conds), spec.signal_dim))
            for j, tag in enumerate(token_conds):
                onehot[j, cond.index(tag)] = 1.0
            noise = rng.standard_normal(onehot.shape) * spec.noise
            signals = spec.rho * onehot + (1.0 - spec.rho) * noise
        records.append(SentenceRecord(
            sid=sid_base + i,
            tokens=tuple(tokens),
            tags=tuple(tags) if tags is not None else None,
            label=label,
            eye=signals,
        ))
    return records


def synth_generate(spec: SynthSpec) -> tuple[list[SentenceRecord], list[SentenceRecord], list[SentenceRecord]]:
    """Materialize seeded train/dev/test splits with label-consistent tokens
    and signals, so alignment and transfer runs are well-posed."""
    rng = np.random.default_rng(spec.seed)
    train = _generate_records(spec, spec.n_train, rng, 0, with_signals=True)
    dev = _generate_records(spec, spec.n_dev, rng, spec.n_train, with_signals=True)
    test = _generate_records(spec, spec.n_test, rng, spec.n_train + spec.n_dev, with_signals=True)
    return train, dev, test


def strip_signals(records: Sequence[SentenceRecord]) -> list[SentenceRecord]:
    return [replace(r, eye=None, eeg=None) for r in records]


def synth_transfer_benchmark(seed: int) -> dict:
    """Signal-bearing source stream plus a vocabulary-starved signal-free
    target stream sharing the same label scheme."""
    source_spec = SynthSpec(seed=seed, n_train=150, n_dev=0, n_test=0)
    target_spec = SynthSpec(seed=seed + 7919, n_train=18, n_dev=20, n_test=60)
    source_train, _, _ = synth_generate(source_spec)
    target_train, target_dev, target_test = synth_generate(target_spec)
    return {
        "source_train": source_train,
        "target_train": strip_signals(target_train),
        "target_dev": strip_signals(target_dev),
        "target_test": strip_signals(target_test),
        "schema": source_spec.schema(),
    }


def nearest_centroid_probe(train: Sequence[SentenceRecord], test: Sequence[SentenceRecord]) -> float:
    """Accuracy of a 1-nearest-centroid classifier run on signals alone."""
    def items(records):
        for rec in records:
            sig = rec.eye if rec.eye is not None else rec.eeg
            if sig is None:
                raise DataError(f"sentence {rec.sid}: probe requires signals")
            labels = rec.tags if rec.tags is not None else [rec.label] * len(rec.tokens)
            yield from zip(labels, sig)

    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for label, vec in items(train):
        sums[label] = sums.get(label, 0) + vec
        counts[label] = counts.get(label, 0) + 1
    labels = sorted(sums)
    centroids = np.stack([sums[l] / counts[l] for l in labels])

    hits = total = 0
    for label, vec in items(test):
        pred = labels[int(np.argmin(np.linalg.norm(centroids - vec, axis=1)))]
        hits += pred == label
        total += 1
    return hits / total
