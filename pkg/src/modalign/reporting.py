"""Report outputs: atomic file writes, line-delimited metric records, and the
figures rendered next to them."""
from __future__ import annotations

import json
import os
import tempfile
from typing import Optional, Sequence

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def atomic_write(path: str, content: str) -> None:
    """Write via a temp file and rename so interrupted runs never leave
    truncated artifacts."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def metrics_line(record: dict) -> str:
    """One machine-parseable JSON record per line; keys sorted so reruns are
    byte-identical."""
    return json.dumps(record, sort_keys=True)


def write_metrics(path: str, records: Sequence[dict]) -> None:
    atomic_write(path, "\n".join(metrics_line(r) for r in records) + "\n")


def read_metrics(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# figures


def _save(fig, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def training_curves_figure(records: Sequence[dict], path: str) -> Optional[str]:
    """Loss-per-epoch curves from the metric records written by training."""
    epochs = [r for r in records if r.get("kind") == "epoch"]
    if not epochs:
        return None
    xs = [r["epoch"] for r in epochs]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (("task_text_loss", "task (text)"),
                       ("task_cog_loss", "task (cognitive)"),
                       ("adversarial_loss", "adversarial")):
        if any(key in r for r in epochs):
            ax.plot(xs, [r.get(key, float("nan")) for r in epochs], label=label)
    if any("dev_f1" in r for r in epochs):
        ax2 = ax.twinx()
        ax2.plot(xs, [r.get("dev_f1", float("nan")) for r in epochs],
                 color="tab:green", linestyle="--", label="dev F1")
        ax2.set_ylabel("dev F1")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    _save(fig, path)
    return path


def fold_bars_figure(records: Sequence[dict], path: str) -> Optional[str]:
    """Per-fold F1 bars from evaluation records."""
    folds = [r for r in records if r.get("kind") == "fold"]
    if not folds:
        return None
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = [r["fold"] for r in folds]
    ax.bar(xs, [r["f1"] for r in folds], color="tab:blue")
    mean_f1 = float(np.mean([r["f1"] for r in folds]))
    ax.axhline(mean_f1, color="tab:red", linestyle=":", label=f"mean {mean_f1:.3f}")
    ax.set_xlabel("fold")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    _save(fig, path)
    return path


def hidden_scatter_figure(modalities: Sequence[str], states: np.ndarray, path: str) -> str:
    """2-D projection (top two principal components) of exported
    shared-encoder states, colored by modality."""
    centered = states - states.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    fig, ax = plt.subplots(figsize=(5, 5))
    modalities = np.asarray(modalities)
    for name, color in (("textual", "tab:blue"), ("cognitive", "tab:red")):
        sel = modalities == name
        if sel.any():
            ax.scatter(proj[sel, 0], proj[sel, 1], s=8, alpha=0.6, color=color, label=name)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.legend(fontsize=8)
    _save(fig, path)
    return path
