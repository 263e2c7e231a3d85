"""Reconstruction plus temporal-consistency objective, L1 means throughout."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import ConfigurationError, ParameterError


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.0  # temporal term
    beta: float = 0.0  # sRGB reconstruction
    gamma: float = 0.0  # anchors inside the temporal term

    def __post_init__(self):
        if min(self.lam, self.beta, self.gamma) < 0:
            raise ParameterError(f"loss weights must be non-negative: {self}")

    def to_dict(self):
        return asdict(self)


PRETRAIN = LossWeights(0.0, 0.0, 0.0)
FINETUNE = LossWeights(1.0, 0.5, 0.1)


def l1(a, b):
    return (a - b).abs().mean()


def compute_loss(outputs: dict, targets: dict, w: LossWeights):
    """``outputs``: raw, optional srgb, optional raw_1/raw_2 (two estimates of the same frame).

    ``targets``: raw, optional srgb. Returns (total, per-term floats).
    The temporal term only ever sees raw-domain tensors.
    """
    terms = {"raw": l1(outputs["raw"], targets["raw"])}
    total = terms["raw"]
    if w.beta > 0:
        if "srgb" not in outputs or "srgb" not in targets:
            raise ConfigurationError("beta > 0 needs sRGB output and target")
        terms["srgb"] = l1(outputs["srgb"], targets["srgb"])
        total = total + w.beta * terms["srgb"]
    if w.lam > 0:
        if "raw_1" not in outputs or "raw_2" not in outputs:
            raise ConfigurationError("lambda > 0 needs two temporal raw estimates")
        o1, o2 = outputs["raw_1"], outputs["raw_2"]
        terms["consistency"] = l1(o1, o2)
        terms["anchor"] = l1(targets["raw"], o1) + l1(targets["raw"], o2)
        terms["temporal"] = terms["consistency"] + w.gamma * terms["anchor"]
        total = total + w.lam * terms["temporal"]
    terms["total"] = total
    return total, {k: v.item() for k, v in terms.items()}
