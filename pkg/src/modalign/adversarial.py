"""Modality discriminator and the adversarial objective, wired through the
gradient-reversal node so a single combined loss trains both sides."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Tensor, grad_reverse, log_clamped, matmul, pick_vec, scale, softmax_vec, tensor
from .errors import ContractError
from .layers import SelfAttnPoolParams, linear_forward, self_attention_pool, xavier_uniform


class Modality(enum.Enum):
    TEXTUAL = 0
    COGNITIVE = 1


@dataclass
class DiscriminatorParams:
    """Sentence-level classifier over pooled shared-encoder states."""

    pool: SelfAttnPoolParams
    w: Tensor  # (2, d)
    b: Tensor  # (2,)

    @classmethod
    def init(cls, d_in: int, rng: np.random.Generator) -> "DiscriminatorParams":
        return cls(
            pool=SelfAttnPoolParams.init(d_in, rng),
            w=tensor(xavier_uniform(rng, len(Modality), d_in), requires_grad=True),
            b=tensor(np.zeros(len(Modality)), requires_grad=True),
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.pool.named_parameters(f"{prefix}.pool")
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


def discriminate(h_shared: Tensor, p: DiscriminatorParams) -> Tensor:
    """Probability that the shared encoder was fed each modality."""
    pooled = self_attention_pool(h_shared, p.pool)
    return softmax_vec(linear_forward(pooled, p.w, p.b))


def adversarial_loss(predictions: Sequence[tuple[Tensor, Modality]]) -> Tensor:
    """Mean cross-entropy of the discriminator on true modality labels.

    Logs are clamped so confident correct predictions drive the loss to
    zero without ever producing NaN.
    """
    preds = list(predictions)
    if not preds:
        raise ContractError("adversarial_loss: empty batch")
    total = None
    for probs, label in preds:
        nll = scale(log_clamped(pick_vec(probs, label.value)), -1.0)
        total = nll if total is None else total + nll
    return scale(total, 1.0 / len(preds))


def wire_grl(shared_output: Tensor, lam: float = 1.0) -> Tensor:
    """Gradient-reversal entry point for the discriminator branch.

    Apply to the shared-encoder output that feeds the discriminator; the
    task-predictor branch keeps using the original tensor.
    """
    return grad_reverse(shared_output, lam)
