"""Alternating-modality training: per-batch sub-steps for the text and
cognitive views, a single combined loss per sub-step (task + adversarial
through the gradient-reversal node), Adam with global-norm clipping, the
transfer-learning alternation over two data streams, and the full-model
gradient audit."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .adversarial import Modality, adversarial_loss, discriminate, wire_grl
from .data import FoldPlan, SentenceRecord, make_folds
from .errors import ConfigError, ContractError, DataError, NumericAbort
from .gradcheck import numeric_gradient, rel_error, tape_gradients
from .metrics import MetricsReport, evaluate_model
from .model import ModelConfig, SharedPrivateModel, build_vocabs, task_loss
from .reporting import atomic_write

ABLATIONS = ("no_text_aware_attention", "no_cognitive_loss", "no_discriminator")


@dataclass
class TrainPlan:
    """Optimization settings, alternation schedule, and ablation switches."""

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
    ablations: frozenset = frozenset()

    def __post_init__(self):
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"ablations: unknown switches {sorted(unknown)}")
        if self.grl_lambda < 0:
            raise ConfigError("grl_lambda: must be >= 0")

    def ablated(self, switch: str) -> bool:
        return switch in self.ablations


class Adam:
    """Standard bias-corrected Adam, state keyed by parameter name."""

    def __init__(self, plan: TrainPlan):
        self.lr = plan.lr
        self.beta1 = plan.beta1
        self.beta2 = plan.beta2
        self.eps = plan.adam_eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, updates: Sequence[tuple[str, ad.Tensor, np.ndarray]]) -> None:
        for name, param, grad in updates:
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(param.values)
                self._m[name] = m
                self._v[name] = np.zeros_like(param.values)
                self._t[name] = 0
            v = self._v[name]
            self._t[name] += 1
            t = self._t[name]
            m[...] = self.beta1 * m + (1 - self.beta1) * grad
            v[...] = self.beta2 * v + (1 - self.beta2) * grad * grad
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            param.values[...] = param.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradients(grads: dict[ad.Tensor, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------------------
# sub-step losses


def substep_loss(
    model: SharedPrivateModel,
    batch: Sequence[SentenceRecord],
    modality: Modality,
    plan: TrainPlan,
) -> tuple[Optional[ad.Tensor], dict[str, float]]:
    """Combined loss for one modality view of a batch.

    Text sub-steps use the text head; cognitive sub-steps use the cognitive
    head unless its loss is ablated.  The adversarial term (unless ablated)
    feeds pooled shared states through the gradient-reversal node.
    """
    if not batch:
        raise ContractError("substep_loss: empty batch")
    use_adv = not plan.ablated("no_discriminator")
    task_terms = []
    adv_batch = []
    for rec in batch:
        if modality is Modality.TEXTUAL:
            h_prime, shared_states = model.forward_text(rec)
            head = model.text_head
            include_task = True
        else:
            h_prime, shared_states = model.forward_cognitive(
                rec, use_attention=not plan.ablated("no_text_aware_attention"))
            head = model.cog_head
            include_task = not plan.ablated("no_cognitive_loss")
        if include_task:
            task_terms.append(task_loss(h_prime, rec, head))
        if use_adv:
            branch = wire_grl(shared_states, plan.grl_lambda) if plan.reverse_gradients else shared_states
            adv_batch.append((discriminate(branch, model.discriminator), modality))

    parts: dict[str, float] = {}
    total = None
    if task_terms:
        mean_task = ad.scale(_sum(task_terms), 1.0 / len(task_terms))
        parts["task"] = mean_task.item()
        total = mean_task
    if adv_batch:
        adv = adversarial_loss(adv_batch)
        parts["adversarial"] = adv.item()
        total = adv if total is None else ad.add(total, adv)
    return total, parts


def _sum(terms: Sequence[ad.Tensor]) -> ad.Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _apply_update(model, tape: ad.Tape, loss: ad.Tensor, plan: TrainPlan, optimizer: Adam) -> None:
    if not np.isfinite(loss.values):
        raise NumericAbort(f"non-finite loss {float(loss.values)!r}; training aborted")
    table = tape.backward(loss)
    clip_gradients(table, plan.clip_norm)
    names = {id(t): name for name, t in model.named_parameters().items()}
    updates = [(names[id(t)], t, g) for t, g in table.items() if id(t) in names]
    updates.sort(key=lambda item: item[0])
    optimizer.step(updates)


def training_step(
    model: SharedPrivateModel,
    batch_text: Sequence[SentenceRecord],
    batch_cog: Optional[Sequence[SentenceRecord]],
    plan: TrainPlan,
    optimizer: Adam,
) -> dict[str, float]:
    """One alternation unit: a text sub-step then (when signals are
    available) a cognitive sub-step, with one optimizer update each."""
    losses = {"task_text": 0.0, "task_cog": 0.0, "adversarial": 0.0}
    adv_terms = []

    with ad.Tape() as tape:
        loss, parts = substep_loss(model, batch_text, Modality.TEXTUAL, plan)
        if loss is not None:
            _apply_update(model, tape, loss, plan, optimizer)
    losses["task_text"] = parts.get("task", 0.0)
    if "adversarial" in parts:
        adv_terms.append(parts["adversarial"])

    if batch_cog:
        with ad.Tape() as tape:
            loss, parts = substep_loss(model, batch_cog, Modality.COGNITIVE, plan)
            if loss is not None:
                _apply_update(model, tape, loss, plan, optimizer)
        losses["task_cog"] = parts.get("task", 0.0)
        if "adversarial" in parts:
            adv_terms.append(parts["adversarial"])

    if adv_terms:
        losses["adversarial"] = float(np.mean(adv_terms))
    return losses


# ---------------------------------------------------------------------------
# training loops


def _batches(records: Sequence[SentenceRecord], size: int) -> list[list[SentenceRecord]]:
    return [list(records[i:i + size]) for i in range(0, len(records), size)]


def _epoch_order(records: Sequence[SentenceRecord], rng: np.random.Generator) -> list[SentenceRecord]:
    order = rng.permutation(len(records))
    return [records[i] for i in order]


def _score_for_early_stop(report: MetricsReport) -> float:
    return report.f1


def train(
    model: SharedPrivateModel,
    records: Sequence[SentenceRecord],
    plan: TrainPlan,
    dev: Optional[Sequence[SentenceRecord]] = None,
    log: Optional[Callable[[dict], None]] = None,
) -> list[dict]:
    """Epoch loop over one dataset; records with signals get both sub-steps."""
    optimizer = Adam(plan)
    rng = np.random.default_rng(plan.seed)
    history: list[dict] = []
    best_score = -1.0
    best_state: Optional[dict] = None
    stale = 0

    for epoch in range(1, plan.epochs + 1):
        epoch_losses: list[dict] = []
        for batch in _batches(_epoch_order(records, rng), plan.batch_size):
            with_signals = [r for r in batch if r.has_signals] if model.cog_private is not None else []
            epoch_losses.append(training_step(model, batch, with_signals or None, plan, optimizer))
        entry = {"kind": "epoch", "epoch": epoch}
        for key in ("task_text", "task_cog", "adversarial"):
            entry[f"{key}_loss"] = float(np.mean([l[key] for l in epoch_losses]))
        if dev:
            report = evaluate_model(model, dev, with_discriminator=False)
            entry["dev_f1"] = report.f1
            score = _score_for_early_stop(report)
            if score > best_score:
                best_score = score
                best_state = model.state()
                stale = 0
            else:
                stale += 1
        history.append(entry)
        if log:
            log(entry)
        if dev and plan.patience > 0 and stale >= plan.patience:
            entry["early_stop"] = True
            break

    if best_state is not None:
        model.load_state(best_state)
    return history


def transfer_train(
    model: SharedPrivateModel,
    signal_stream: Sequence[SentenceRecord],
    plain_stream: Sequence[SentenceRecord],
    plan: TrainPlan,
    log: Optional[Callable[[dict], None]] = None,
) -> tuple[list[dict], list[tuple[str, int]]]:
    """Alternate between the signal-bearing stream (full two-sub-step
    updates) and the plain stream (text-path task loss only).

    Returns the epoch history and the audited step log of
    ("signal"|"plain", batch_index) entries.
    """
    _check_label_schemes(model, signal_stream, plain_stream)
    optimizer = Adam(plan)
    rng = np.random.default_rng(plan.seed)
    history: list[dict] = []
    step_log: list[tuple[str, int]] = []

    for epoch in range(1, plan.epochs + 1):
        signal_batches = _batches(_epoch_order(signal_stream, rng), plan.batch_size) if signal_stream else []
        plain_batches = _batches(_epoch_order(plain_stream, rng), plan.batch_size) if plain_stream else []
        epoch_losses: list[dict] = []
        si = pi = 0
        turn = "signal"
        while si < len(signal_batches) or pi < len(plain_batches):
            if turn == "signal":
                for _ in range(plan.alternation):
                    if si >= len(signal_batches):
                        break
                    batch = signal_batches[si]
                    epoch_losses.append(training_step(model, batch, batch, plan, optimizer))
                    step_log.append(("signal", si))
                    si += 1
                turn = "plain"
            else:
                for _ in range(plan.alternation):
                    if pi >= len(plain_batches):
                        break
                    batch = plain_batches[pi]
                    epoch_losses.append(training_step(model, batch, None, plan, optimizer))
                    step_log.append(("plain", pi))
                    pi += 1
                turn = "signal"
        entry = {"kind": "epoch", "epoch": epoch}
        for key in ("task_text", "task_cog", "adversarial"):
            entry[f"{key}_loss"] = float(np.mean([l[key] for l in epoch_losses])) if epoch_losses else 0.0
        history.append(entry)
        if log:
            log(entry)
    return history, step_log


def _check_label_schemes(model, signal_stream, plain_stream) -> None:
    def labels_of(records):
        out = set()
        for r in records:
            if r.tags is not None:
                out.update(r.tags)
            if r.label is not None:
                out.add(r.label)
        return out

    known = set(model.tagset.tags) if model.tagset is not None else set(model.classes)
    for name, stream in (("signal", signal_stream), ("plain", plain_stream)):
        extra = labels_of(stream) - known
        if extra:
            raise DataError(f"{name} stream uses labels outside the model's scheme: {sorted(extra)}")


def cross_validate(
    records: Sequence[SentenceRecord],
    config: ModelConfig,
    plan: TrainPlan,
    k: int,
) -> tuple[list[MetricsReport], MetricsReport, FoldPlan]:
    """k-fold orchestration: a fresh model per fold, trained on the
    remainder and evaluated on the held-out fold."""
    fold_plan = make_folds(records, k, plan.seed)
    reports: list[MetricsReport] = []
    for fold in range(k):
        train_split, held = fold_plan.split(records, fold)
        vocab, char_vocab, labels = build_vocabs(train_split, config)
        model = SharedPrivateModel(config, vocab, labels, np.random.default_rng(plan.seed),
                                   char_vocab=char_vocab)
        train(model, train_split, plan)
        reports.append(evaluate_model(model, held, with_discriminator=False))
    mean = MetricsReport(
        precision=float(np.mean([r.precision for r in reports])),
        recall=float(np.mean([r.recall for r in reports])),
        f1=float(np.mean([r.f1 for r in reports])),
        per_fold=[r.to_dict() for r in reports],
    )
    return reports, mean, fold_plan


# ---------------------------------------------------------------------------
# hidden-state export


def export_hidden(model: SharedPrivateModel, records: Sequence[SentenceRecord], path: str) -> int:
    """Dump shared-encoder states, one row per word per available modality:
    modality, sentence id, position, then the state values."""
    lines = []
    for rec in records:
        _, shared_text = model.forward_text(rec)
        for pos in range(shared_text.values.shape[1]):
            values = "\t".join(f"{v:.17g}" for v in shared_text.values[:, pos])
            lines.append(f"textual\t{rec.sid}\t{pos}\t{values}")
        if rec.has_signals and model.cog_private is not None:
            _, shared_cog = model.forward_cognitive(rec)
            for pos in range(shared_cog.values.shape[1]):
                values = "\t".join(f"{v:.17g}" for v in shared_cog.values[:, pos])
                lines.append(f"cognitive\t{rec.sid}\t{pos}\t{values}")
    atomic_write(path, "\n".join(lines) + "\n")
    return len(lines)


def read_hidden(path: str) -> tuple[list[str], np.ndarray]:
    modalities: list[str] = []
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 4:
                continue
            modalities.append(parts[0])
            rows.append([float(v) for v in parts[3:]])
    return modalities, np.asarray(rows)


def modality_centroid_distance(path: str) -> float:
    """Euclidean distance between the mean textual and mean cognitive
    exported states."""
    modalities, states = read_hidden(path)
    flags = np.asarray(modalities)
    text = states[flags == "textual"]
    cog = states[flags == "cognitive"]
    if not len(text) or not len(cog):
        raise DataError("export must contain both modalities to measure a centroid distance")
    return float(np.linalg.norm(text.mean(axis=0) - cog.mean(axis=0)))


# ---------------------------------------------------------------------------
# full-model gradient audit


def model_gradient_errors(
    model: SharedPrivateModel,
    batch_text: Sequence[SentenceRecord],
    batch_cog: Sequence[SentenceRecord],
    plan: TrainPlan,
    step: float = 1e-5,
) -> dict[str, float]:
    """Max floored relative error per parameter group, comparing the tape
    against central finite differences on the frozen micro-batch.

    The finite-difference surface is the training loss with the reversal
    node disabled (the node's backward rule is deliberately not the
    derivative of its forward); the reversal itself is audited separately
    by `grl_wiring_deviation`.
    """
    fd_plan = replace(plan, reverse_gradients=False)

    def build_loss():
        text_loss, _ = substep_loss(model, batch_text, Modality.TEXTUAL, fd_plan)
        cog_loss, _ = substep_loss(model, batch_cog, Modality.COGNITIVE, fd_plan)
        if text_loss is None or cog_loss is None:
            raise ContractError("gradient audit requires both sub-step losses")
        return ad.add(text_loss, cog_loss)

    params = model.named_parameters()
    analytic = tape_gradients(build_loss, list(params.values()))
    errors: dict[str, float] = {}
    for name, tensor_ in params.items():
        numeric = numeric_gradient(build_loss, tensor_, step=step)
        group = name.split(".")[0]
        err = rel_error(analytic[tensor_], numeric)
        errors[group] = max(errors.get(group, 0.0), err)
    return errors


def grl_wiring_deviation(
    model: SharedPrivateModel,
    batch_text: Sequence[SentenceRecord],
    batch_cog: Sequence[SentenceRecord],
    plan: TrainPlan,
) -> float:
    """Max absolute deviation between reversed adversarial gradients and the
    exact negation of the unreversed ones, over every parameter upstream of
    the reversal node.  Zero when the wiring is correct and lambda is 1."""
    def adv_only(reverse: bool):
        def build():
            batch = []
            for rec in batch_text:
                _, shared = model.forward_text(rec)
                branch = wire_grl(shared, 1.0) if reverse else shared
                batch.append((discriminate(branch, model.discriminator), Modality.TEXTUAL))
            for rec in batch_cog:
                _, shared = model.forward_cognitive(rec)
                branch = wire_grl(shared, 1.0) if reverse else shared
                batch.append((discriminate(branch, model.discriminator), Modality.COGNITIVE))
            return adversarial_loss(batch)

        return tape_gradients(build, list(model.named_parameters().values()))

    with_grl = adv_only(True)
    without = adv_only(False)
    upstream_groups = {"shared_encoder", "text_adapter", "cog_adapter", "char_cnn",
                       "word_table", "attention"}
    deviation = 0.0
    for name, tensor_ in model.named_parameters().items():
        if name.split(".")[0] in upstream_groups:
            deviation = max(deviation, float(np.max(np.abs(with_grl[tensor_] + without[tensor_]))))
        else:
            deviation = max(deviation, float(np.max(np.abs(with_grl[tensor_] - without[tensor_]))))
    return deviation
