"""Command-line entry point: train / eval / decode / gradcheck / synth /
export, driven by a flat key=value config with flag overrides (flags win).

Exit codes: 0 ok, 2 config or data error, 3 numeric abort, 4 gradient-check
failure."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    SynthSpec,
    TsvSchema,
    load_tsv,
    normalize_signals,
    strip_signals,
    synth_generate,
    synth_transfer_benchmark,
    write_tsv,
)
from .errors import ConfigError, DataError, ModalignError, NumericAbort, ParseError
from .gradcheck import DEFAULT_RTOL, FLOAT32_RTOL
from .layers import CharVocab, Vocab, load_word_vectors, table_from_vectors
from .metrics import evaluate_model
from .model import ModelConfig, SharedPrivateModel, build_vocabs
from .reporting import (
    atomic_write,
    fold_bars_figure,
    hidden_scatter_figure,
    read_metrics,
    training_curves_figure,
    write_metrics,
)
from .training import (
    ABLATIONS,
    TrainPlan,
    cross_validate,
    export_hidden,
    grl_wiring_deviation,
    model_gradient_errors,
    read_hidden,
    train,
    transfer_train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4


@dataclass
class RunConfig:
    """Every run setting, each with a documented default."""

    task: str = "ner"                       # ner | sentiment | relation
    signals: str = "eye+eeg"                # none | eye | eeg | eye+eeg
    train: str = ""                         # training TSV path
    dev: str = ""                           # development TSV path (optional)
    test: str = ""                          # test TSV path (optional)
    transfer: str = ""                      # signal-free companion stream (optional)
    vectors: str = ""                       # pretrained word-vector text file (optional)
    checkpoint: str = "model.ckpt"          # checkpoint output/input path
    metrics: str = "metrics.jsonl"          # metrics output path
    word_dim: int = 300
    char_dim: int = 30
    char_window: int = 3
    char_filters: int = 30
    hidden_dim: int = 50
    shared_dim: int = 128
    n_max: int = 64
    eye_dim: int = -1                       # -1: per-task default
    eeg_dim: int = -1                       # -1: per-task default
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    grl_lambda: float = 1.0
    reverse_gradients: bool = True
    alternation: int = 1
    patience: int = 10
    dropout: float = 0.0
    seed: int = 1
    folds: int = 0                          # >0: k-fold cross validation on the train file
    normalize: bool = True
    figures: bool = True
    ablate: str = ""                        # comma list of ablation switches

    def ablations(self) -> frozenset:
        items = frozenset(s.strip().replace("-", "_") for s in self.ablate.split(",") if s.strip())
        unknown = items - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"ablate: unknown switches {sorted(unknown)}")
        return items

    def validate(self) -> None:
        if self.task not in ("ner", "sentiment", "relation"):
            raise ConfigError(f"task: expected ner|sentiment|relation, got {self.task!r}")
        if self.signals not in ("none", "eye", "eeg", "eye+eeg"):
            raise ConfigError(f"signals: expected none|eye|eeg|eye+eeg, got {self.signals!r}")
        for name in ("epochs", "batch_size", "hidden_dim", "shared_dim", "n_max"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout: must lie in [0, 1)")
        self.ablations()

    def canonical_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(sorted(lines)) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            task=self.task,
            signals=self.signals,
            word_dim=self.word_dim,
            char_dim=self.char_dim,
            char_window=self.char_window,
            char_filters=self.char_filters,
            hidden_dim=self.hidden_dim,
            shared_dim=self.shared_dim,
            n_max=self.n_max,
            eye_dim=None if self.eye_dim < 0 else self.eye_dim,
            eeg_dim=None if self.eeg_dim < 0 else self.eeg_dim,
        )

    def plan(self) -> TrainPlan:
        return TrainPlan(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            clip_norm=self.clip_norm,
            grl_lambda=self.grl_lambda,
            reverse_gradients=self.reverse_gradients,
            alternation=self.alternation,
            patience=self.patience,
            dropout=self.dropout,
            seed=self.seed,
            ablations=self.ablations(),
        )

    def schema(self) -> TsvSchema:
        base = TsvSchema.for_task(self.task, self.signals)
        return TsvSchema(
            task=self.task,
            n_eye=self.eye_dim if self.eye_dim >= 0 and base.n_eye else base.n_eye,
            n_eeg=self.eeg_dim if self.eeg_dim >= 0 and base.n_eeg else base.n_eeg,
        )


_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(name: str, kind: type, raw: str):
    if kind is bool:
        value = _BOOL_VALUES.get(raw.strip().lower())
        if value is None:
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return value
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {raw!r}")


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    """Config file keys first, then CLI overrides (flags win)."""
    values: dict = {}
    kinds = {f.name: type(f.default) for f in dataclasses.fields(RunConfig)}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config: file {path!r} does not exist")
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, sep, raw = line.partition("=")
                key = key.strip()
                if not sep or key not in kinds:
                    raise ConfigError(f"config: {path}:{lineno}: unknown setting {key!r}")
                values[key] = _coerce(key, kinds[key], raw.strip())
    for key, raw in overrides.items():
        if raw is None:
            continue
        values[key] = raw if not isinstance(raw, str) else _coerce(key, kinds[key], raw)
    config = RunConfig(**values)
    config.validate()
    return config


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None, metavar=str(f.default),
                            help=f"{f.name} (default {f.default!r})")


def _overrides(args: argparse.Namespace) -> dict:
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig)
            if getattr(args, f.name, None) is not None}


# ---------------------------------------------------------------------------
# shared loading helpers


def _load_records(config: RunConfig):
    if not config.train:
        raise ConfigError("train: a training TSV path is required")
    schema = config.schema()
    train_recs = load_tsv(config.train, schema)
    dev_recs = load_tsv(config.dev, schema) if config.dev else []
    test_recs = load_tsv(config.test, schema) if config.test else []
    transfer_recs = load_tsv(config.transfer, schema) if config.transfer else []
    if config.signals != "none":
        signal_bearing = [r for r in train_recs if r.has_signals]
        if signal_bearing and config.normalize:
            from .data import Normalizer

            norm = Normalizer.fit(signal_bearing)
            train_recs = norm.transform(train_recs)
            dev_recs = norm.transform(dev_recs)
            test_recs = norm.transform(test_recs)
            transfer_recs = norm.transform(transfer_recs)
    return train_recs, dev_recs, test_recs, transfer_recs


def _build_model(config: RunConfig, records) -> SharedPrivateModel:
    mc = config.model_config()
    vocab, char_vocab, labels = build_vocabs(records, mc)
    rng = np.random.default_rng(config.seed)
    word_table = None
    if config.vectors:
        tokens, matrix = load_word_vectors(config.vectors)
        if matrix.shape[1] != mc.word_dim:
            raise ConfigError(
                f"vectors: file dimension {matrix.shape[1]} does not match word_dim {mc.word_dim}")
        vocab, word_table = table_from_vectors(tokens, matrix)
    return SharedPrivateModel(mc, vocab, labels, rng, char_vocab=char_vocab, word_table=word_table)


def _meta_path(checkpoint: str) -> str:
    return checkpoint + ".meta"


def _save_model(config: RunConfig, model: SharedPrivateModel) -> None:
    save_checkpoint(config.checkpoint, model.state(), config_digest=config.digest())
    labels = model.tagset.tags if model.tagset is not None else model.classes
    lines = [config.canonical_text().rstrip("\n")]
    lines.append("::labels=" + "\x1f".join(labels))
    lines.append("::vocab=" + "\x1f".join(model.vocab.items))
    if model.char_vocab is not None:
        lines.append("::chars=" + "\x1f".join(model.char_vocab.items))
    atomic_write(_meta_path(config.checkpoint), "\n".join(lines) + "\n")


def _load_model(config: RunConfig) -> SharedPrivateModel:
    if not os.path.exists(config.checkpoint):
        raise ConfigError(f"checkpoint: {config.checkpoint!r} does not exist")
    meta_file = _meta_path(config.checkpoint)
    if not os.path.exists(meta_file):
        raise ConfigError(f"checkpoint: companion file {meta_file!r} does not exist")
    stored: dict = {}
    labels: tuple = ()
    vocab_items: list = []
    char_items: list = []
    with open(meta_file, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition("=")
            if key == "::labels":
                labels = tuple(value.split("\x1f"))
            elif key == "::vocab":
                vocab_items = value.split("\x1f")
            elif key == "::chars":
                char_items = value.split("\x1f")
            else:
                stored[key] = value
    kinds = {f.name: type(f.default) for f in dataclasses.fields(RunConfig)}
    saved = RunConfig(**{k: _coerce(k, kinds[k], v) for k, v in stored.items() if k in kinds})
    saved.checkpoint = config.checkpoint
    mc = saved.model_config()
    vocab = Vocab.__new__(Vocab)
    vocab.unk = vocab_items[0] if vocab_items else None
    vocab._index = {tok: i for i, tok in enumerate(vocab_items)}
    vocab.items = tuple(vocab_items)
    char_vocab = None
    if char_items:
        char_vocab = CharVocab.__new__(CharVocab)
        char_vocab.unk = char_items[1] if len(char_items) > 1 else None
        char_vocab._index = {ch: i for i, ch in enumerate(char_items)}
        char_vocab.items = tuple(char_items)
    model = SharedPrivateModel(mc, vocab, labels, np.random.default_rng(saved.seed),
                               char_vocab=char_vocab)
    _, state = load_checkpoint(config.checkpoint)
    model.load_state(state)
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    train_recs, dev_recs, test_recs, transfer_recs = _load_records(config)
    records: list[dict] = []

    if config.folds > 0:
        reports, mean, _ = cross_validate(train_recs, config.model_config(), config.plan(), config.folds)
        for i, rep in enumerate(reports):
            records.append({"kind": "fold", "fold": i, **rep.to_dict()})
        records.append({"kind": "summary", "folds": config.folds, **mean.to_dict()})
        vocab_source = train_recs
        model = _build_model(config, vocab_source)
        train(model, train_recs, config.plan(), dev=dev_recs or None,
              log=lambda e: records.append(e))
    else:
        vocab_source = list(train_recs) + list(transfer_recs)
        model = _build_model(config, vocab_source)
        if config.transfer:
            history, _ = transfer_train(model, train_recs, transfer_recs, config.plan())
            records.extend(history)
        else:
            history = train(model, train_recs, config.plan(), dev=dev_recs or None)
            records.extend(history)

    if test_recs:
        report = evaluate_model(model, test_recs,
                                with_discriminator=config.signals != "none")
        records.append({"kind": "final", "split": "test", **report.to_dict()})

    _save_model(config, model)
    write_metrics(config.metrics, records)
    if config.figures:
        training_curves_figure(records, os.path.splitext(config.metrics)[0] + "_curves.png")
        fold_bars_figure(records, os.path.splitext(config.metrics)[0] + "_folds.png")
    print(f"checkpoint written to {config.checkpoint}")
    print(f"metrics written to {config.metrics}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    if not config.test:
        raise ConfigError("test: an evaluation TSV path is required")
    model = _load_model(config)
    schema = config.schema()
    test_recs = load_tsv(config.test, schema)
    if config.signals != "none" and config.normalize:
        from .data import Normalizer

        bearing = [r for r in test_recs if r.has_signals]
        if bearing:
            test_recs = Normalizer.fit(bearing).transform(test_recs)
    report = evaluate_model(model, test_recs, with_discriminator=config.signals != "none")
    records = [{"kind": "final", "split": "eval", **report.to_dict()}]
    write_metrics(config.metrics, records)
    if config.figures:
        fold_bars_figure(records, os.path.splitext(config.metrics)[0] + "_folds.png")
    print(f"metrics written to {config.metrics}")
    for key, value in report.to_dict().items():
        print(f"{key}={value:.4f}")
    return EXIT_OK


def cmd_decode(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    if not args.input or not args.output:
        raise ConfigError("decode: --input and --output are required")
    model = _load_model(config)
    schema = config.schema()
    records = load_tsv(args.input, schema)
    decoded = []
    for rec in records:
        if model.tagset is not None:
            tags = model.infer(rec)
            decoded.append(dataclasses.replace(rec, tags=tuple(tags)))
        else:
            label, _ = model.infer(rec)
            decoded.append(dataclasses.replace(rec, label=label))
    write_tsv(args.output, decoded, schema)
    print(f"predictions written to {args.output}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    if args.transfer_benchmark:
        bench = synth_transfer_benchmark(seed=args.seed)
        schema = bench["schema"]
        write_tsv(os.path.join(out_dir, "source_train.tsv"), bench["source_train"], schema)
        write_tsv(os.path.join(out_dir, "target_train.tsv"), bench["target_train"], schema)
        write_tsv(os.path.join(out_dir, "target_dev.tsv"), bench["target_dev"], schema)
        write_tsv(os.path.join(out_dir, "target_test.tsv"), bench["target_test"], schema)
        print(f"transfer benchmark written to {out_dir}")
        return EXIT_OK
    spec = SynthSpec(rho=args.rho, seed=args.seed, vocab_size=args.vocab_size,
                     signal_dim=args.signal_dim, noise=args.noise,
                     n_train=args.n_train, n_dev=args.n_dev, n_test=args.n_test)
    train_recs, dev_recs, test_recs = synth_generate(spec)
    schema = spec.schema()
    write_tsv(os.path.join(out_dir, "train.tsv"), train_recs, schema)
    write_tsv(os.path.join(out_dir, "dev.tsv"), dev_recs, schema)
    write_tsv(os.path.join(out_dir, "test.tsv"), test_recs, schema)
    print(f"synthetic dataset written to {out_dir}")
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    if not args.data or not args.out:
        raise ConfigError("export: --data and --out are required")
    model = _load_model(config)
    schema = config.schema()
    records = load_tsv(args.data, schema)
    if config.signals != "none" and config.normalize:
        from .data import Normalizer

        bearing = [r for r in records if r.has_signals]
        if bearing:
            records = Normalizer.fit(bearing).transform(records)
    rows = export_hidden(model, records, args.out)
    if config.figures:
        modalities, states = read_hidden(args.out)
        if states.size:
            hidden_scatter_figure(modalities, states, os.path.splitext(args.out)[0] + "_scatter.png")
    print(f"{rows} state rows written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.float32:
        ad.set_default_dtype("float32")
    if args.hook_grl_sign_bug:
        ad.GRL_SIGN_BUG = True
    try:
        threshold = FLOAT32_RTOL if args.float32 else DEFAULT_RTOL
        step = 1e-3 if args.float32 else 1e-5
        spec = SynthSpec(seed=args.seed, vocab_size=12, min_len=2, max_len=4,
                         signal_dim=4, n_train=2, n_dev=0, n_test=0)
        batch, _, _ = synth_generate(spec)
        config = ModelConfig(task="ner", signals="eye", word_dim=5, char_dim=3,
                             char_window=2, char_filters=3, hidden_dim=3, shared_dim=6,
                             n_max=8, eye_dim=4, eeg_dim=0)
        vocab, char_vocab, labels = build_vocabs(batch, config)
        model = SharedPrivateModel(config, vocab, labels, np.random.default_rng(args.seed),
                                   char_vocab=char_vocab)
        plan = TrainPlan(seed=args.seed)
        errors = model_gradient_errors(model, batch, batch, plan, step=step)
        errors["adversarial.grl_wiring"] = grl_wiring_deviation(model, batch, batch, plan)
        failed = []
        for group in sorted(errors):
            err = errors[group]
            limit = 0.0 if group == "adversarial.grl_wiring" else threshold
            status = "ok" if err <= limit else "FAIL"
            if status == "FAIL":
                failed.append(group)
            print(f"{group:28s} max rel err {err:.3e}  {status}")
        if failed:
            print(f"gradient check failed for: {', '.join(failed)}")
            return EXIT_GRADCHECK
        print("gradient check passed")
        return EXIT_OK
    finally:
        ad.set_default_dtype("float64")
        ad.GRL_SIGN_BUG = False


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modalign",
        description="Adversarial text/cognitive-signal alignment for sequence "
                    "labeling and sentence classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model; writes checkpoint + metrics + figures")
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a TSV file")
    _add_config_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_decode = sub.add_parser("decode", help="write predictions in the input TSV shape")
    _add_config_flags(p_decode)
    p_decode.add_argument("--input", help="input TSV")
    p_decode.add_argument("--output", help="output TSV")
    p_decode.set_defaults(func=cmd_decode)

    p_synth = sub.add_parser("synth", help="materialize the synthetic benchmark datasets")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--rho", type=float, default=0.8, help="signal informativeness in [0,1]")
    p_synth.add_argument("--noise", type=float, default=1.0, help="noise scale")
    p_synth.add_argument("--seed", type=int, default=1)
    p_synth.add_argument("--vocab-size", type=int, default=90)
    p_synth.add_argument("--signal-dim", type=int, default=8)
    p_synth.add_argument("--n-train", type=int, default=120)
    p_synth.add_argument("--n-dev", type=int, default=30)
    p_synth.add_argument("--n-test", type=int, default=60)
    p_synth.add_argument("--transfer-benchmark", action="store_true",
                         help="write the two-stream transfer benchmark instead")
    p_synth.set_defaults(func=cmd_synth)

    p_export = sub.add_parser("export", help="dump shared-encoder states with modality labels")
    _add_config_flags(p_export)
    p_export.add_argument("--data", help="TSV file to encode")
    p_export.add_argument("--out", help="output dump path")
    p_export.set_defaults(func=cmd_export)

    p_grad = sub.add_parser("gradcheck", help="finite-difference audit of every parameter group")
    p_grad.add_argument("--seed", type=int, default=1)
    p_grad.add_argument("--float32", action="store_true",
                        help="run in float32 (threshold relaxes to 1e-4)")
    p_grad.add_argument("--hook-grl-sign-bug", action="store_true",
                        help="test hook: corrupt the reversal sign to verify failure reporting")
    p_grad.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
