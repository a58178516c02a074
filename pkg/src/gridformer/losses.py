"""Multi-scale Charbonnier and perceptual losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .nn import conv2d
from .tensor import Tensor, absolute, add_scalar, mean, mul, relu, scale, sqrt, sub, sum_all


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-3
    alpha: float = 0.1
    charbonnier_mode: str = "pixel"
    extractor_seed: int = 0

    def __post_init__(self) -> None:
        if self.epsilon <= 0 or self.alpha < 0:
            raise ContractError(f"need epsilon > 0 and alpha >= 0, got {self}")
        if self.charbonnier_mode not in ("pixel", "global"):
            raise ContractError(f"charbonnier_mode must be 'pixel' or 'global', got {self.charbonnier_mode!r}")


@dataclass
class LossReport:
    charbonnier: float
    perceptual: float
    total: float
    epsilon: float
    alpha: float


def _check_pyramids(restored: Sequence[Tensor], reference: Sequence[Tensor]) -> None:
    if len(restored) != len(reference):
        raise ContractError(f"pyramid depths differ: {len(restored)} vs {len(reference)}")
    for k, (a, b) in enumerate(zip(restored, reference)):
        if a.shape != b.shape:
            raise ContractError(f"scale {k}: restored {a.shape} vs reference {b.shape}")


def charbonnier_ms(
    restored: Sequence[Tensor], reference: Sequence[Tensor], epsilon: float = 1e-3, mode: str = "pixel"
) -> Tensor:
    """Average over scales of the Charbonnier penalty.

    ``pixel`` averages ``sqrt(d^2 + eps^2)`` over elements; ``global`` takes
    ``sqrt(||d||^2 + eps^2)`` of the whole difference at each scale.
    """
    _check_pyramids(restored, reference)
    terms = []
    for a, b in zip(restored, reference):
        d = sub(a, b)
        if mode == "pixel":
            terms.append(mean(sqrt(add_scalar(mul(d, d), epsilon * epsilon))))
        else:
            terms.append(sqrt(add_scalar(sum_all(mul(d, d)), epsilon * epsilon)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return scale(total, 1.0 / len(terms))


class FeatureExtractor:
    """Frozen stack of stride-2 3x3 conv + ReLU stages.

    Stands in for a pretrained deep feature level.  The weights are plain
    tensors (not Parameters), so they are never trained but gradients still
    flow through them to the input.  Pass ``weights`` as a list of
    ``(weight, bias)`` arrays to use an external extractor.
    """

    def __init__(
        self,
        seed: int = 0,
        channels: Sequence[int] = (3, 16, 32, 32, 64, 64),
        weights: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
        dtype=np.float32,
    ):
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = []
            for cin, cout in zip(channels[:-1], channels[1:]):
                bound = np.sqrt(6.0 / (cin * 9))
                weights.append((rng.uniform(-bound, bound, (cout, cin, 3, 3)), np.zeros(cout)))
        self.weights = [(Tensor(w, dtype=dtype), Tensor(b, dtype=dtype)) for w, b in weights]

    def astype(self, dtype) -> "FeatureExtractor":
        return FeatureExtractor(weights=[(w.data, b.data) for w, b in self.weights], dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        for w, b in self.weights:
            x = relu(conv2d(x, w, b, stride=2, padding=1))
        return x


def perceptual(restored: Sequence[Tensor], reference: Sequence[Tensor], extractor: FeatureExtractor) -> Tensor:
    """Scale-averaged mean absolute difference of extractor features."""
    _check_pyramids(restored, reference)
    total = None
    for a, b in zip(restored, reference):
        term = mean(absolute(sub(extractor(a), extractor(b))))
        total = term if total is None else total + term
    return scale(total, 1.0 / len(restored))


def total_loss(char: Tensor, per: Tensor, alpha: float) -> Tensor:
    return char if alpha == 0 else char + scale(per, alpha)


def combined_loss(
    restored: Sequence[Tensor],
    reference: Sequence[Tensor],
    config: LossConfig,
    extractor: FeatureExtractor | None,
) -> tuple[Tensor, LossReport]:
    char = charbonnier_ms(restored, reference, config.epsilon, config.charbonnier_mode)
    if config.alpha == 0 or extractor is None:
        per_value = 0.0
        loss = char
    else:
        per = perceptual(restored, reference, extractor)
        per_value = per.item()
        loss = total_loss(char, per, config.alpha)
    report = LossReport(char.item(), per_value, loss.item(), config.epsilon, config.alpha)
    return loss, report
