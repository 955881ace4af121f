"""Finite-difference verification of every backward rule.

Each case is a closure that rebuilds a scalar from a set of leaf tensors. The
analytic gradient comes from one backward pass; the numeric one from central
differences, perturbing leaf entries in place. Coordinates where the two
one-sided differences disagree sharply sit on a kink (relu, max, |.|) and are
skipped rather than judged.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .aggregation import (InterDamParams, gap_gmp_prototype, gap_prototype, intra_dam,
                          inter_dam, mean_prototype)
from .coupling import CouplingParams, cic_forward, compute_condition, couple, generate_coupled_info
from .rng import Rng, derive_seed
from .tensor import ParamRegistry, Tensor

SCOPES = ("ops", "modules", "end2end")


@dataclass
class GradFailure:
    case: str
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float

    def __str__(self) -> str:
        return (f"{self.case}: param={self.param} index={self.index} "
                f"analytic={self.analytic!r} numeric={self.numeric!r} rel={self.rel_error:.3e}")


@dataclass
class CaseResult:
    name: str
    scope: str
    checked: int = 0
    skipped_kinks: int = 0
    max_rel_error: float = 0.0
    failures: list[GradFailure] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures and self.checked > 0


@dataclass
class GradCheckReport:
    results: list[CaseResult]
    h: float
    tol: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[GradFailure]:
        return [f for r in self.results for f in r.failures]

    def to_text(self) -> str:
        lines = ["icpe-gradcheck 1", f"h={self.h!r} tol={self.tol!r}"]
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            lines.append(f"{status} {r.scope}/{r.name} checked={r.checked} kinks={r.skipped_kinks} "
                         f"max_rel={r.max_rel_error:.3e}")
            lines += [f"  {f}" for f in r.failures[:10]]
        n_fail = sum(not r.passed for r in self.results)
        lines.append(f"cases={len(self.results)} failed={n_fail} passed={self.passed}")
        return "\n".join(lines) + "\n"


def rel_error(a: float, n: float, floor: float = 1e-6) -> float:
    """|a - n| scaled by the larger magnitude; the floor keeps exact zeros comparable."""
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_case(name: str, fn: Callable[[], Tensor], wrt: list[tuple[str, Tensor]], *,
               scope: str = "ops", h: float = 1e-5, tol: float = 1e-4, max_coords: int | None = 12,
               seed: int = 0, kink_ratio: float = 1e-2) -> CaseResult:
    """Compare backward() against central differences for the leaves in ``wrt``.

    At most ``max_coords`` entries per leaf are probed (chosen by a seeded
    generator); ``None`` probes all of them.
    """
    start = time.perf_counter()
    res = CaseResult(name, scope)
    for _, t in wrt:
        t.requires_grad = True
        t.grad = None
    out = fn()
    if out.size != 1:
        raise T.ShapeError(f"{name}: gradcheck needs a scalar, got {out.shape}")
    out.backward()
    analytic = {pname: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for pname, t in wrt}

    def value() -> float:
        with T.no_grad():
            return fn().item()

    rng = Rng(derive_seed(seed, "gradcheck", name))
    for pname, t in wrt:
        flat_n = t.data.size
        coords = list(range(flat_n))
        if max_coords is not None and flat_n > max_coords:
            coords = sorted(rng.sample(coords, max_coords))
        for flat in coords:
            idx = np.unravel_index(flat, t.shape)
            orig = t.data[idx]
            t.data[idx] = orig + h
            f_plus = value()
            t.data[idx] = orig - h
            f_minus = value()
            t.data[idx] = orig
            f0 = value()
            numeric = (f_plus - f_minus) / (2 * h)
            fwd, bwd = (f_plus - f0) / h, (f0 - f_minus) / h
            if abs(fwd - bwd) > kink_ratio * max(1.0, abs(numeric)):
                res.skipped_kinks += 1
                continue
            a = float(analytic[pname][idx])
            err = rel_error(a, numeric)
            res.checked += 1
            res.max_rel_error = max(res.max_rel_error, err)
            if err > tol or not math.isfinite(err):
                res.failures.append(GradFailure(name, pname, tuple(int(i) for i in idx), a, numeric, err))
    for _, t in wrt:
        t.grad = None
    res.seconds = time.perf_counter() - start
    return res


# ---------------------------------------------------------------------------
# helpers for building cases


class _Leaves:
    """Seeded factory of leaf tensors for one case."""

    def __init__(self, case: str, seed: int):
        self.rng = Rng(derive_seed(seed, "leaves", case))

    def __call__(self, *shape, lo: float = -1.0, hi: float = 1.0, away: float = 0.0) -> Tensor:
        data = self.rng.uniform_array(shape, lo, hi)
        if away:
            # push entries off a kink at zero
            data = np.where(np.abs(data) < away, np.copysign(away, data), data)
        return T.tensor(data, requires_grad=True)


def project(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar ``sum(out * R)`` for a fixed random R, so every output entry matters."""
    r = Rng(derive_seed(seed, "projection", *out.shape)).uniform_array(out.shape, 0.5, 1.5)
    return T.sum_all(T.hadamard(out, T.tensor(r)))


def corrupted_square(x: Tensor) -> Tensor:
    """x**2 whose backward is deliberately off by a factor of two (harness self-test)."""
    xd = x.data
    return T._node(xd * xd, "corrupted_square", (x,), lambda g: (g * 4.0 * xd,))


def _op_cases(seed: int):
    def mk(name):
        return _Leaves(name, seed)

    cases = []

    def case(name, build):
        leaf = mk(name)
        fn, wrt = build(leaf)
        cases.append((name, fn, wrt))

    def _pair(op, sa, sb):
        def build(L):
            a, b = L(*sa), L(*sb)
            return (lambda: project(op(a, b))), [("a", a), ("b", b)]
        return build

    def _unary(op, shape, **kw):
        def build(L):
            x = L(*shape, **kw)
            return (lambda: project(op(x))), [("x", x)]
        return build

    case("add", _pair(T.add, (2, 3), (2, 3)))
    case("add_mask", _pair(T.add, (3, 2, 2), (2, 2)))
    case("hadamard", _pair(T.hadamard, (2, 3), (2, 3)))
    case("hadamard_mask", _pair(T.hadamard, (2, 2), (3, 2, 2)))
    case("scale", _unary(lambda x: T.scale(x, -1.7), (2, 3)))
    case("sigmoid", _unary(T.sigmoid, (2, 3), lo=-4, hi=4))
    case("relu", _unary(T.relu, (2, 3), away=0.05))
    case("reshape", _unary(lambda x: T.reshape(x, (3, 2)), (2, 3)))
    case("transpose", _unary(lambda x: T.transpose(x, (2, 0, 1)), (2, 3, 2)))
    case("index", _unary(lambda x: T.index(x, (np.array([0, 1, 1]), np.array([2, 0, 2]))), (2, 3)))
    case("sum_all", _unary(T.sum_all, (2, 3)))
    case("mean_all", _unary(T.mean_all, (2, 3)))
    case("softmax_rows", _unary(lambda x: T.softmax(x, axis=1), (3, 4), lo=-2, hi=2))
    case("softmax_cols", _unary(lambda x: T.softmax(x, axis=0), (3, 4), lo=-2, hi=2))
    case("avg_pool2", _unary(T.avg_pool2, (2, 4, 4)))
    case("gap", _unary(T.gap, (3, 2, 3)))
    case("gmp", _unary(T.gmp, (3, 2, 3)))
    case("roi_pool", _unary(lambda x: T.roi_pool(x, [(0, 2, 0, 3), (1, 3, 2, 4), (2, 3, 0, 1)]), (2, 3, 4)))
    case("matmul", _pair(T.matmul, (2, 3), (3, 4)))
    case("modulate", _pair(T.modulate, (3, 4), (2, 4)))
    case("cosine_map", _pair(T.cosine_map, (3,), (3, 2, 2)))
    case("weighted_sum", _pair(T.weighted_sum, (3,), (3, 4)))
    case("weighted_sum_col", _pair(T.weighted_sum, (3, 1), (3, 4)))

    def stack_build(L):
        a, b = L(2, 3), L(2, 3)
        return (lambda: project(T.stack([a, b], axis=1))), [("a", a), ("b", b)]

    def concat_build(L):
        a, b = L(2, 3), L(1, 3)
        return (lambda: project(T.concat([a, b], axis=0))), [("a", a), ("b", b)]

    def divide_build(L):
        x, s = L(2, 3), L(1, lo=0.5, hi=2.0)
        return (lambda: project(T.divide(x, s))), [("x", x), ("s", s)]

    def linear_build(L):
        x, w, b = L(3, 4), L(2, 4), L(2)
        return (lambda: project(T.linear(x, w, b))), [("x", x), ("weight", w), ("bias", b)]

    def linear3_build(L):
        x, w, b = L(2, 3, 4), L(2, 4), L(2)
        return (lambda: project(T.linear(x, w, b))), [("x", x), ("weight", w), ("bias", b)]

    def conv_build(k, batched):
        def build(L):
            x = L(2, 3, 4, 4) if batched else L(3, 4, 4)
            w, b = L(2, 3, k, k), L(2)
            return (lambda: project(T.conv2d(x, w, b))), [("x", x), ("weight", w), ("bias", b)]
        return build

    def ce_build(L):
        z = L(3, 4, lo=-2, hi=2)
        return (lambda: T.cross_entropy(z, [0, 3, 1])), [("logits", z)]

    def l1_build(L):
        p = L(2, 4)
        target = p.data + np.where(np.arange(8).reshape(2, 4) % 2 == 0, 0.3, -0.4)
        return (lambda: T.l1_loss(p, target)), [("pred", p)]

    case("stack", stack_build)
    case("concat", concat_build)
    case("divide", divide_build)
    case("linear", linear_build)
    case("linear_batched", linear3_build)
    case("conv2d_k1", conv_build(1, False))
    case("conv2d_k3", conv_build(3, False))
    case("conv2d_k3_batch", conv_build(3, True))
    case("cross_entropy", ce_build)
    case("l1_loss", l1_build)
    return cases


def _coupling_params(prefix: str, seed: int, c: int, d: int) -> tuple[CouplingParams, ParamRegistry]:
    reg = ParamRegistry()
    params = CouplingParams.create(reg, lambda n: Rng(derive_seed(seed, prefix, n)), c, d)
    # a zero output projection would hide the Q/K/V gradients
    params.proj_out_w.data = Rng(derive_seed(seed, prefix, "out")).uniform_array(params.proj_out_w.shape, -0.5, 0.5)
    params.proj_out_b.data = Rng(derive_seed(seed, prefix, "outb")).uniform_array(params.proj_out_b.shape, -0.1, 0.1)
    return params, reg


def _module_cases(seed: int):
    from .detector import (BackboneParams, HeadParams, backbone_forward, channel_attention,
                           detection_forward, total_loss)
    from .aggregation import ClassPrototype

    cases = []
    c, d = 3, 2

    def coupled_build(use_ccm, clamp=True):
        def build():
            L = _Leaves(f"cic{use_ccm}{clamp}", seed)
            x_q, x_s = L(c, 3, 2), L(c, 2, 2)
            params, reg = _coupling_params("cic", seed, c, d)
            fn = lambda: project(cic_forward(x_q, x_s, params, use_ccm=use_ccm, clamp=clamp).x_hat_s)
            return fn, [("x_q", x_q), ("x_s", x_s)] + list(reg)
        return build

    def generator_build():
        L = _Leaves("gen", seed)
        x_q, x_s = L(c, 2, 3), L(c, 2, 2)
        params, reg = _coupling_params("gen", seed, c, d)
        return (lambda: project(generate_coupled_info(x_q, x_s, params)[0])), [("x_q", x_q), ("x_s", x_s)] + list(reg)

    def condition_build():
        L = _Leaves("cond", seed)
        # positive features keep cosines away from the relu kink
        x_q, x_s = L(c, 2, 2, lo=0.1, hi=1.0), L(c, 2, 2, lo=0.1, hi=1.0)
        return (lambda: project(compute_condition(x_q, x_s))), [("x_q", x_q), ("x_s", x_s)]

    def couple_build():
        L = _Leaves("couple", seed)
        x_s, xh, cond = L(c, 2, 2), L(c, 2, 2), L(2, 2, lo=0, hi=1)
        return (lambda: project(couple(x_s, xh, cond))), [("x_s", x_s), ("x_hat_q", xh), ("condition", cond)]

    def intra_build(alpha):
        def build():
            L = _Leaves(f"intra{alpha}", seed)
            x = L(c, 3, 3)
            return (lambda: project(intra_dam(x, alpha).v)), [("x_hat_s", x)]
        return build

    def gmp_build():
        L = _Leaves("gapgmp", seed)
        x = L(c, 2, 3)
        return (lambda: project(gap_gmp_prototype(x).v)), [("x", x)]

    def inter_build(normalize, k):
        def build():
            L = _Leaves(f"inter{normalize}{k}", seed)
            vs = [L(c) for _ in range(k)]
            reg = ParamRegistry()
            params = InterDamParams.create(reg, lambda n: Rng(derive_seed(seed, "inter", n)), c)
            params.fc_bias.data = np.array([0.3])

            def fn():
                protos = [gap_prototype(T.reshape(v, (c, 1, 1)), 0) for v in vs]
                return project(inter_dam(protos, params, normalize=normalize).v)
            return fn, [(f"v{i}", v) for i, v in enumerate(vs)] + list(reg)
        return build

    def mean_build():
        L = _Leaves("mean", seed)
        vs = [L(c) for _ in range(3)]
        return (lambda: project(mean_prototype([gap_prototype(T.reshape(v, (c, 1, 1)), 0) for v in vs]).v)), \
            [(f"v{i}", v) for i, v in enumerate(vs)]

    def backbone_build():
        reg = ParamRegistry()
        params = BackboneParams.create(reg, lambda n: Rng(derive_seed(seed, "bb", n)), (4, 3, 3, 2))
        for _, t in reg:
            if t.ndim == 1:
                t.data = Rng(derive_seed(seed, "bbias", t.size)).uniform_array(t.shape, 0.05, 0.2)
        L = _Leaves("bb", seed)
        img = L(3, 8, 8)
        mask = T.tensor((np.arange(64).reshape(1, 8, 8) % 3 == 0).astype(float))
        return (lambda: project(backbone_forward(img, mask, params))), [("image", img)] + list(reg)

    def attention_build():
        L = _Leaves("att", seed)
        r, p = L(4), L(4, lo=-3, hi=3)
        return (lambda: project(T.reshape(channel_attention(T.reshape(r, (1, 4)), T.reshape(p, (1, 4))), (4,)))), \
            [("roi", r), ("proto", p)]

    def heads(name):
        reg = ParamRegistry()
        hp = HeadParams.create(reg, lambda n: Rng(derive_seed(seed, name, n)), c, 4)
        for _, t in reg:
            if t.ndim == 1:
                t.data = Rng(derive_seed(seed, name, "b", t.size)).uniform_array(t.shape, -0.2, 0.2)
        return hp, reg

    def detection_build():
        L = _Leaves("det", seed)
        rois = L(3, c)
        pv = {0: L(c), 2: L(c)}
        hp, reg = heads("det")

        def fn():
            protos = {k: ClassPrototype(v, k) for k, v in pv.items()}
            logits, deltas = detection_forward(rois, protos, hp)
            return T.add(project(logits, 1), project(deltas, 2))
        return fn, [("rois", rois)] + [(f"proto{k}", v) for k, v in pv.items()] + \
            [(n, t) for n, t in reg if not n.startswith("head.meta")]

    def loss_build():
        L = _Leaves("loss", seed)
        logits, deltas, meta = L(4, 3), L(4, 2, 4), L(2, 5)
        targets = [(0.1, -0.2, 0.05, 0.3), None, (-0.3, 0.2, -0.1, 0.15), None]
        return (lambda: total_loss(logits, [0, 2, 1, 2], deltas, targets, meta, [1, 4], 0.7)[0]), \
            [("cls_logits", logits), ("deltas", deltas), ("proto_logits", meta)]

    for name, build in (("generate_coupled_info", generator_build), ("compute_condition", condition_build),
                        ("couple", couple_build), ("cic_forward", coupled_build(True)),
                        ("cic_forward_signed", coupled_build(True, clamp=False)),
                        ("cic_forward_no_ccm", coupled_build(False)), ("intra_dam", intra_build(1.0)),
                        ("intra_dam_alpha", intra_build(0.4)), ("gap_gmp", gmp_build),
                        ("inter_dam", inter_build(False, 3)), ("inter_dam_normalized", inter_build(True, 3)),
                        ("inter_dam_k1", inter_build(False, 1)), ("mean_prototype", mean_build),
                        ("backbone_forward", backbone_build), ("channel_attention", attention_build),
                        ("detection_forward", detection_build), ("total_loss", loss_build)):
        fn, wrt = build()
        cases.append((name, fn, wrt))
    return cases


def micro_model(seed: int = 0, **flags):
    from .detector import ICPEDetector, ModelConfig

    cfg = ModelConfig(channels=4, stage_channels=(3, 4), num_classes=3, **flags)
    model = ICPEDetector(cfg, seed=seed)
    rng = Rng(derive_seed(seed, "micro-model"))
    for name, t in model.params:
        if name.startswith("cic.proj_out"):
            t.data = rng.uniform_array(t.shape, -0.4, 0.4)
        elif t.ndim == 1:
            t.data = rng.uniform_array(t.shape, 0.02, 0.2)
    return model


def micro_episode_loss(model, k: int = 1, classes=(1,), seed: int = 0) -> Callable[[], Tensor]:
    """Closure computing the full training loss on a 16x16 episode with one RoI."""
    from .boxes import encode_deltas
    from .detector import detection_forward, total_loss

    rng = Rng(derive_seed(seed, "micro-episode", k, *classes))
    size = 16
    query = np.concatenate([rng.uniform_array((3, size, size), -1, 1), np.zeros((1, size, size))])
    supports = []
    for _ in classes:
        for _ in range(k):
            img = rng.uniform_array((3, size, size), -1, 1)
            mask = np.zeros((1, size, size))
            mask[0, 4:12, 3:13] = 1.0
            supports.append(np.concatenate([img, mask]))
    batch = np.stack([query] + supports)
    roi_box, gt_box = (0.0, 0.0, 16.0, 16.0), (2.0, 3.0, 13.0, 15.0)
    target = encode_deltas(roi_box, gt_box)

    def fn():
        feats = model.features(batch)
        x_q = T.index(feats, 0)
        support_feats = {c: [T.index(feats, 1 + i * k + j) for j in range(k)] for i, c in enumerate(classes)}
        protos, _ = model.class_prototypes(x_q, support_feats)
        roster = sorted(protos)
        logits, deltas = detection_forward(T.roi_pool(x_q, [(0, 2, 0, 2)]), protos, model.heads, roster)
        proto_logits, proto_labels = model.meta_logits(protos)
        loss, _ = total_loss(logits, [0], deltas, [target], proto_logits, proto_labels, 1.0)
        return loss
    return fn


def _end2end_cases(seed: int):
    cases = []
    for name, k, classes, flags in (("episode_1shot", 1, (1,), {}),
                                    ("episode_2shot_2class", 2, (0, 2), {}),
                                    ("episode_baseline", 1, (1,), dict(use_cic=False, use_ccm=False,
                                                                       use_intra=False, use_inter=False))):
        model = micro_model(seed, **flags)
        cases.append((name, micro_episode_loss(model, k, classes, seed), list(model.params)))
    return cases


def grad_check_suite(scope=SCOPES, seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                     max_coords: int | None = 12, only: str | None = None) -> GradCheckReport:
    """Run the named scopes (any of ``ops``, ``modules``, ``end2end``)."""
    if isinstance(scope, str):
        scope = (scope,)
    unknown = set(scope) - set(SCOPES)
    if unknown:
        raise ValueError(f"unknown gradcheck scope(s) {sorted(unknown)}")
    builders = {"ops": _op_cases, "modules": _module_cases, "end2end": _end2end_cases}
    results = []
    for sc in SCOPES:
        if sc not in scope:
            continue
        for name, fn, wrt in builders[sc](seed):
            if only and only not in name:
                continue
            results.append(check_case(name, fn, wrt, scope=sc, h=h, tol=tol, max_coords=max_coords, seed=seed))
    return GradCheckReport(results, h, tol)
