"""Conditional information coupling of query features into support features.

A support feature map attends over the query feature map (support pixels are
the attention queries, query pixels the keys and values). The retrieved query
content is projected back to the backbone width and added to the support map
wherever the support pixel resembles the global query descriptor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamRegistry, Tensor


@dataclass
class CouplingParams:
    proj_q_w: Tensor
    proj_q_b: Tensor
    proj_k_w: Tensor
    proj_k_b: Tensor
    proj_v_w: Tensor
    proj_v_b: Tensor
    proj_out_w: Tensor
    proj_out_b: Tensor

    @property
    def channels(self) -> int:
        return self.proj_q_w.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.proj_q_w.shape[0]

    @classmethod
    def create(cls, registry: ParamRegistry, rng_for, channels: int, embed_dim: int,
               prefix: str = "cic") -> "CouplingParams":
        """Register fresh parameters. ``rng_for(name)`` supplies a per-parameter generator.

        The Q/K/V projections get U(-1/sqrt(C), 1/sqrt(C)); the output projection
        starts at zero so the module is initially the identity on the support map.
        """
        if embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        fields = {}
        for proj in ("q", "k", "v"):
            name = f"{prefix}.proj_{proj}"
            bound = 1.0 / math.sqrt(channels)
            fields[f"proj_{proj}_w"] = registry.add(
                f"{name}.weight",
                T.uniform_init(rng_for(f"{name}.weight"), (embed_dim, channels, 1, 1), bound))
            fields[f"proj_{proj}_b"] = registry.add(
                f"{name}.bias",
                T.uniform_init(rng_for(f"{name}.bias"), (embed_dim,), bound))
        fields["proj_out_w"] = registry.add(f"{prefix}.proj_out.weight",
                                            np.zeros((channels, embed_dim, 1, 1)))
        fields["proj_out_b"] = registry.add(f"{prefix}.proj_out.bias", np.zeros(channels))
        return cls(**fields)


@dataclass
class CoupledFeature:
    x_hat_s: Tensor
    condition: Tensor
    attention: Tensor


def generate_coupled_info(x_q: Tensor, x_s: Tensor, params: CouplingParams) -> tuple[Tensor, Tensor]:
    """Restructure the query map onto the support grid.

    Returns ``(x_hat_q [C, Hs, Ws], attention [Ns, Nq])`` where each attention
    row is a softmax over query positions.
    """
    c = params.channels
    if x_q.shape[0] != c or x_s.shape[0] != c:
        raise T.ShapeError(f"coupling expects {c} channels, got query {x_q.shape} support {x_s.shape}")
    d = params.embed_dim
    _, hs, ws = x_s.shape
    _, hq, wq = x_q.shape
    q = T.reshape(T.conv2d(x_s, params.proj_q_w, params.proj_q_b), (d, hs * ws))
    k = T.reshape(T.conv2d(x_q, params.proj_k_w, params.proj_k_b), (d, hq * wq))
    v = T.reshape(T.conv2d(x_q, params.proj_v_w, params.proj_v_b), (d, hq * wq))
    attention = T.softmax(T.matmul(T.transpose(q), k), axis=1)
    gathered = T.matmul(attention, T.transpose(v))  # [Ns, d]
    assembled = T.reshape(T.transpose(gathered), (d, hs, ws))
    x_hat_q = T.conv2d(assembled, params.proj_out_w, params.proj_out_b)
    return x_hat_q, attention


def compute_condition(x_q: Tensor, x_s: Tensor, clamp: bool = True) -> Tensor:
    """Cosine similarity of each support pixel to the pooled query, negatives zeroed."""
    if x_q.shape[0] != x_s.shape[0]:
        raise T.ShapeError(f"condition: channel mismatch {x_q.shape} vs {x_s.shape}")
    sim = T.cosine_map(T.gap(x_q), x_s)
    return T.relu(sim) if clamp else sim


def couple(x_s: Tensor, x_hat_q: Tensor, condition: Tensor) -> Tensor:
    if x_s.shape != x_hat_q.shape or condition.shape != x_s.shape[1:]:
        raise T.ShapeError(
            f"couple: support {x_s.shape}, restructured {x_hat_q.shape}, condition {condition.shape}")
    return T.add(T.hadamard(x_hat_q, condition), x_s)


def cic_forward(x_q: Tensor, x_s: Tensor, params: CouplingParams, use_ccm: bool = True,
                clamp: bool = True) -> CoupledFeature:
    x_hat_q, attention = generate_coupled_info(x_q, x_s, params)
    if use_ccm:
        condition = compute_condition(x_q, x_s, clamp=clamp)
    else:
        condition = T.tensor(np.ones(x_s.shape[1:]))
    return CoupledFeature(couple(x_s, x_hat_q, condition), condition, attention)
