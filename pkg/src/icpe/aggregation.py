"""Prototype dynamic aggregation.

``intra_dam`` turns one coupled support map into an image prototype that adds
a similarity-weighted pixel sum on top of plain average pooling.
``inter_dam`` gates each image prototype of a class through FC + sigmoid and
sums the gated prototypes into the class prototype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ParamRegistry, Tensor


@dataclass
class ImagePrototype:
    v: Tensor
    weights: Tensor | None
    class_id: int


@dataclass
class ClassPrototype:
    v: Tensor
    class_id: int
    contributions: list[float] = field(default_factory=list)
    images: list[ImagePrototype] = field(default_factory=list, repr=False)


@dataclass
class InterDamParams:
    fc_weight: Tensor
    fc_bias: Tensor

    @classmethod
    def create(cls, registry: ParamRegistry, rng_for, channels: int,
               prefix: str = "inter_dam") -> "InterDamParams":
        w = T.uniform_init(rng_for(f"{prefix}.fc.weight"), (1, channels), 1.0 / math.sqrt(channels))
        return cls(registry.add(f"{prefix}.fc.weight", w),
                   registry.add(f"{prefix}.fc.bias", np.zeros(1)))


def intra_dam(x_hat_s: Tensor, alpha: float = 1.0, class_id: int = -1) -> ImagePrototype:
    """GAP plus ``alpha/N`` times the cosine-weighted sum of pixel vectors."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    c, h, w = x_hat_s.shape
    pooled = T.gap(x_hat_s)
    weights = T.cosine_map(pooled, x_hat_s)
    if alpha == 0:
        return ImagePrototype(pooled, weights, class_id)
    # sum_ij w_ij x_ij / N is the GAP of the weighted map
    salient = T.gap(T.hadamard(x_hat_s, weights))
    return ImagePrototype(T.add(pooled, T.scale(salient, alpha)), weights, class_id)


def gap_gmp_prototype(x: Tensor, class_id: int = -1) -> ImagePrototype:
    """Sum of global average and global max pooling."""
    return ImagePrototype(T.add(T.gap(x), T.gmp(x)), None, class_id)


def gap_prototype(x: Tensor, class_id: int = -1) -> ImagePrototype:
    return ImagePrototype(T.gap(x), None, class_id)


def _check_same_class(protos) -> int:
    if not protos:
        raise ValueError("cannot aggregate an empty list of image prototypes")
    ids = {p.class_id for p in protos}
    if len(ids) != 1:
        raise ValueError(f"image prototypes from mixed classes {sorted(ids)}")
    return protos[0].class_id


def inter_dam(protos: list[ImagePrototype], params: InterDamParams,
              normalize: bool = False) -> ClassPrototype:
    """Contribution-weighted sum of image prototypes.

    The sigmoid gates are used as-is and need not sum to one, so the class
    prototype grows with the shot count. ``normalize=True`` divides the gates
    by their sum instead; it is a study switch, not the default.
    """
    cid = _check_same_class(protos)
    stacked = T.stack([p.v for p in protos])  # [k, C]
    probs = T.sigmoid(T.linear(stacked, params.fc_weight, params.fc_bias))  # [k, 1]
    gates = probs
    if normalize:
        gates = T.divide(probs, T.sum_all(probs))
    v = T.weighted_sum(gates, stacked)
    return ClassPrototype(v, cid, [float(p) for p in probs.data.reshape(-1)], list(protos))


def mean_prototype(protos: list[ImagePrototype]) -> ClassPrototype:
    """Unweighted average of the image prototypes (the Meta R-CNN rule)."""
    cid = _check_same_class(protos)
    k = len(protos)
    weights = T.tensor(np.full(k, 1.0 / k))
    return ClassPrototype(T.weighted_sum(weights, T.stack([p.v for p in protos])), cid,
                          [1.0 / k] * k, list(protos))


def aggregate_prototypes(coupled: dict, alpha: float, params: InterDamParams | None,
                         use_intra: bool = True, use_inter: bool = True,
                         img_proto: str = "gap", normalize_inter: bool = False
                         ) -> dict[int, ClassPrototype]:
    """Class prototypes from per-class lists of coupled support maps.

    ``coupled`` maps class id to a list whose items are either coupled-feature
    records (with an ``x_hat_s`` attribute) or raw ``[C, H, W]`` tensors.
    """
    out: dict[int, ClassPrototype] = {}
    for cid in sorted(coupled):
        feats = [getattr(f, "x_hat_s", f) for f in coupled[cid]]
        if not feats:
            raise ValueError(f"class {cid} has no support features")
        if use_intra:
            protos = [intra_dam(x, alpha, cid) for x in feats]
        elif img_proto == "gap":
            protos = [gap_prototype(x, cid) for x in feats]
        elif img_proto == "gap+gmp":
            protos = [gap_gmp_prototype(x, cid) for x in feats]
        else:
            raise ValueError(f"unknown image prototype rule {img_proto!r}")
        if use_inter:
            if params is None:
                raise ValueError("inter-image aggregation needs InterDamParams")
            out[cid] = inter_dam(protos, params, normalize=normalize_inter)
        else:
            out[cid] = mean_prototype(protos)
    return out
