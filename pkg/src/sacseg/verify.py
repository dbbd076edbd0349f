"""Self-checks with fixed seeds: oracle agreement, gradients, projection, reductions.

Each suite returns a list of :class:`Case` results; :func:`run_suite` prints
them and reports overall success.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .data import SceneConfig, generate_scene
from .gradcheck import finite_diff_check
from .losses import LossConfig, label_pyramid, multi_layer_loss, weighted_cross_entropy
from .nn import BatchNorm2d, Conv2d
from .projection import build_lidar_image, project_points, restore_labels
from .sac import (SAC_IS, VARIANTS, SacLayer, SacVariant, as_sac_layer, baseline_attention,
                  baseline_forward, make_baseline, sac_forward, sac_naive)
from .tensor import Tensor, default_dtype, no_grad


@dataclass
class Case:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<44} max err {self.error:.3e}  (tol {self.tol:g})"


def max_rel_err(actual, expected) -> float:
    """max |a - e| scaled by the largest magnitude of ``expected``."""
    a = np.asarray(getattr(actual, "data", actual), dtype=np.float64)
    e = np.asarray(getattr(expected, "data", expected), dtype=np.float64)
    if a.shape != e.shape:
        return float("inf")
    if a.size == 0:
        return 0.0
    scale = max(float(np.abs(e).max()), 1e-300)
    return float(np.abs(a - e).max() / scale)


def conv2d_loops(x: np.ndarray, weight: np.ndarray, bias=None, stride: int = 1,
                 padding: int = 0) -> np.ndarray:
    """Scalar-loop convolution, the slowest and most literal reference."""
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for m in range(o):
            for p in range(ho):
                for q in range(wo):
                    acc = 0.0 if bias is None else float(bias[m])
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                r, s = p * stride + i - padding, q * stride + j - padding
                                if 0 <= r < h and 0 <= s < w:
                                    acc += weight[m, ch, i, j] * x[b, ch, r, s]
                    out[b, m, p, q] = acc
    return out


# -- oracle -------------------------------------------------------------------

def random_sac_case(rng: np.random.Generator, variant: SacVariant, max_ch: int = 4,
                    max_size: int = 8, kernels=(1, 3)):
    n = int(rng.integers(1, 3))
    i_ch, o_ch = (int(v) for v in rng.integers(1, max_ch + 1, size=2))
    h, w = (int(v) for v in rng.integers(1, max_size + 1, size=2))
    k = int(rng.choice(kernels))
    residual = bool(i_ch == o_ch and rng.random() < 0.7)
    follow = bool(rng.random() < 0.5)
    layer = SacLayer(variant, i_ch, o_ch, rng, k=k, attention_kernel=int(rng.choice([1, 3, 7])),
                     follow=follow, residual=residual)
    for p in layer.parameters():
        p.data = rng.normal(size=p.shape)
    x = Tensor(rng.normal(size=(n, i_ch, h, w)))
    coords = Tensor(rng.normal(size=(n, 3, h, w)))
    return layer, x, coords


def oracle_suite(cases: int = 200, seed: int = 0) -> list[Case]:
    results = []
    with default_dtype(np.float64), no_grad():
        for offset, (name, variant) in enumerate(VARIANTS.items()):
            rng = np.random.default_rng(seed + 100 * offset)
            worst = 0.0
            for _ in range(cases):
                layer, x, coords = random_sac_case(rng, variant)
                worst = max(worst, max_rel_err(sac_forward(x, coords, layer),
                                               sac_naive(x, coords, layer)))
            results.append(Case(f"SAC-{name} scheduled vs naive ({cases} cases)", worst, 1e-10))
    return results


def conv_suite(cases: int = 100, seed: int = 1) -> list[Case]:
    """im2col + 1x1 and GEMM convolution against the tap-wise and scalar-loop references."""
    rng = np.random.default_rng(seed)
    worst = {"im2col+1x1 vs direct": 0.0, "direct vs scalar loops": 0.0,
             "im2col+1x1 vs scalar loops": 0.0, "gemm conv vs scalar loops": 0.0}
    with default_dtype(np.float64), no_grad():
        for _ in range(cases):
            n, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
            h, w = (int(v) for v in rng.integers(1, 9, size=2))
            k = int(rng.choice([1, 3, 5, 7]))
            x = rng.normal(size=(n, c, h, w))
            wt = rng.normal(size=(o, c, k, k))
            b = rng.normal(size=o)
            ref = conv2d_loops(x, wt, b, 1, k // 2)
            direct = ops.conv2d_direct(Tensor(x), Tensor(wt), Tensor(b), 1, k // 2)
            unfolded = ops.conv2d_im2col(Tensor(x), Tensor(wt), Tensor(b))
            gemm = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), 1, k // 2)
            for key, a, e in (("im2col+1x1 vs direct", unfolded, direct),
                              ("direct vs scalar loops", direct, ref),
                              ("im2col+1x1 vs scalar loops", unfolded, ref),
                              ("gemm conv vs scalar loops", gemm, ref)):
                worst[key] = max(worst[key], max_rel_err(a, e))
    return [Case(f"conv {key} ({cases} cases)", err, 1e-10) for key, err in worst.items()]


# -- gradients ------------------------------------------------------------------

def _weighted(fn: Callable, rng, out_shape):
    r = Tensor(rng.normal(size=out_shape))
    return lambda *xs: ops.sum(ops.mul(fn(*xs), r))


def _away_from_zero(rng, shape, margin=0.1):
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < margin, np.sign(v + 1e-12) * margin, v) + 0.0


def _distinct(rng, shape):
    """Values with well-separated order statistics, so max/argmax are stable under +-step."""
    size = int(np.prod(shape))
    return (rng.permutation(size) * 0.1 + rng.uniform(0, 0.01, size)).reshape(shape)


def grad_cases(seed: int = 2) -> list[tuple[str, Callable, list[Tensor]]]:
    rng = np.random.default_rng(seed)
    x = lambda *s: Tensor(rng.normal(size=s))  # noqa: E731
    pos = lambda *s: Tensor(rng.uniform(0.5, 2.0, size=s))  # noqa: E731
    cases = []

    def add(name, fn, inputs, out_shape=None):
        with no_grad():
            shape = fn(*inputs).shape if out_shape is None else out_shape
        cases.append((name, _weighted(fn, rng, shape), inputs))

    add("add (broadcast)", ops.add, [x(2, 3, 4), x(1, 3, 1)])
    add("sub (broadcast)", ops.sub, [x(2, 3, 4), x(3, 1)])
    add("mul (broadcast)", ops.mul, [x(2, 3, 4), x(2, 1, 4)])
    add("div", ops.div, [x(2, 3), pos(2, 3)])
    add("exp", ops.exp, [x(3, 4)])
    add("log", ops.log, [pos(3, 4)])
    add("square", ops.square, [x(3, 4)])
    add("sigmoid", ops.sigmoid, [x(2, 3, 4)])
    add("relu", ops.relu, [Tensor(_away_from_zero(rng, (3, 5)))])
    add("leaky_relu", ops.leaky_relu, [Tensor(_away_from_zero(rng, (3, 5)))])
    add("log_softmax", lambda t: ops.log_softmax(t, 1), [x(2, 5, 3, 3)])
    add("sum (axis)", lambda t: ops.sum(t, axis=(0, 2)), [x(2, 3, 4)])
    add("mean", lambda t: ops.mean(t, axis=1, keepdims=True), [x(2, 3, 4)])
    add("amax", lambda t: ops.amax(t, 1), [Tensor(_distinct(rng, (2, 4, 3)))])
    add("reshape", lambda t: ops.reshape(t, (3, 8)), [x(2, 3, 4)])
    add("concat", lambda a, b: ops.concat([a, b], 1), [x(2, 2, 3), x(2, 3, 3)])
    add("tile_channels", lambda t: ops.tile_channels(t, 3), [x(1, 2, 3, 3)])
    add("pad_zeros", lambda t: ops.pad_zeros(t, 2), [x(1, 2, 3, 3)])
    add("conv2d_direct stride 1", lambda a, w, b: ops.conv2d_direct(a, w, b, 1, 1),
        [x(2, 3, 5, 4), x(2, 3, 3, 3), x(2)])
    add("conv2d_direct stride 2", lambda a, w, b: ops.conv2d_direct(a, w, b, 2, 1),
        [x(1, 2, 6, 5), x(3, 2, 3, 3), x(3)])
    add("conv2d gemm stride 1", lambda a, w, b: ops.conv2d(a, w, b, 1, 2),
        [x(2, 2, 4, 5), x(3, 2, 5, 5), x(3)])
    add("conv2d gemm stride 2", lambda a, w, b: ops.conv2d(a, w, b, 2, 1),
        [x(1, 2, 6, 5), x(3, 2, 3, 3), x(3)])
    add("im2col", lambda t: ops.im2col(t, 3), [x(2, 2, 4, 3)])
    add("conv_transpose2d", lambda a, w, b: ops.conv_transpose2d(a, w, b),
        [x(1, 3, 3, 4), x(3, 2, 4, 4), x(2)])
    add("max_pool 3x3", lambda t: ops.max_pool(t, 3), [Tensor(_distinct(rng, (1, 2, 4, 4)))])
    add("global_avg_pool", ops.global_avg_pool, [x(2, 3, 4, 4)])
    add("avg_pool2", ops.avg_pool2, [x(1, 2, 4, 6)])

    def bn_train(t, g, b):
        return ops.batch_norm(t, g, b)[0]

    def bn_eval(t, g, b):
        return ops.batch_norm(t, g, b, np.array([0.1, -0.2, 0.3]), np.array([1.5, 0.7, 2.0]))

    add("batch_norm (batch stats)", bn_train, [x(2, 3, 3, 3), pos(3), x(3)])
    add("batch_norm (fixed stats)", bn_eval, [x(2, 3, 3, 3), pos(3), x(3)])

    cfg = LossConfig(num_classes=4, ignore_class=0)
    labels = rng.integers(0, 4, size=(2, 8, 8))
    w = rng.uniform(1.0, 3.0, size=4)
    cases.append(("weighted cross-entropy", lambda t: weighted_cross_entropy(t, labels, w, cfg),
                  [x(2, 4, 8, 8)]))
    pyr_one = label_pyramid(labels, num_classes=4)

    def ml_loss(l1, l2, l3, l4, l5):
        return multi_layer_loss([l1, l2, l3, l4, l5], pyr_one, w, cfg)

    cases.append(("multi-layer loss", ml_loss,
                  [x(2, 4, 8, 8), x(2, 4, 4, 4), x(2, 4, 2, 2), x(2, 4, 1, 1), x(2, 4, 1, 1)]))
    return cases


def sac_grad_cases(seed: int = 3) -> list[tuple[str, Callable, list[Tensor]]]:
    """A one-SAC-layer network per variant; checks input, main, follow and attention weights."""
    cases = []
    for name, variant in VARIANTS.items():
        rng = np.random.default_rng(seed + len(name))
        layer = SacLayer(variant, 3, 3, rng, k=3, attention_kernel=3, follow=True)
        for p in layer.parameters():
            p.data = rng.normal(size=p.shape) * 0.5
        head = Conv2d(3, 4, 1, rng)
        coords = Tensor(rng.normal(size=(2, 3, 5, 5)))
        labels = rng.integers(0, 4, size=(2, 5, 5))
        cfg = LossConfig(num_classes=4, ignore_class=None)
        w = np.ones(4)
        params = [layer.main.weight, layer.main.bias, layer.attention.weight, layer.attention.bias,
                  layer.follow.weight]

        def f(xin, *ps, layer=layer, head=head, coords=coords, labels=labels, cfg=cfg, w=w):
            return weighted_cross_entropy(head(ops.leaky_relu(layer(xin, coords))), labels, w, cfg)

        cases.append((f"one-layer SAC-{name} net", f, [Tensor(rng.normal(size=(2, 3, 5, 5)))] + params))
    return cases


def bn_layer_case(seed: int = 4):
    rng = np.random.default_rng(seed)
    bn = BatchNorm2d(3)
    conv = Conv2d(3, 2, 3, rng)
    def f(xin, *ps):
        return ops.sum(ops.square(conv(ops.leaky_relu(bn(xin)))))
    return ("conv-BN-act stack", f, [Tensor(rng.normal(size=(2, 3, 4, 4))), conv.weight, bn.gamma])


def grad_suite(seed: int = 2, tol: float = 1e-4) -> list[Case]:
    results = []
    with default_dtype(np.float64):
        for name, f, inputs in grad_cases(seed) + sac_grad_cases(seed + 1) + [bn_layer_case(seed)]:
            err = finite_diff_check(f, inputs, step=1e-5)
            results.append(Case(f"grad {name}", err, tol))
    return results


# -- projection -----------------------------------------------------------------------

def projection_suite(scans: int = 20, seed: int = 5000) -> list[Case]:
    """Round trip, farthest-point tie-break and label restoration on generated scans."""
    round_trip = tie_break = restore = r_err = 0.0
    rng = np.random.default_rng(seed)
    for s in range(scans):
        scene = SceneConfig(seed=seed + s)
        cloud = generate_scene(scene)
        cfg = scene.projection()
        img = build_lidar_image(cloud, cfg)
        p, q, r, _ = project_points(cloud.xyz, cfg)
        qs, ps = np.nonzero(img.mask)
        idx = img.index_map[qs, ps]
        round_trip += int(np.sum((p[idx] != ps) | (q[idx] != qs)))
        # brute force: the retained point is the farthest of its pixel, ties to the larger index
        key = q * cfg.w + p
        best_r = np.full(cfg.h * cfg.w, -np.inf)
        np.maximum.at(best_r, key, r)
        cand = np.flatnonzero(r == best_r[key])
        best_idx = np.full(cfg.h * cfg.w, -1)
        np.maximum.at(best_idx, key[cand], cand)
        tie_break += int(np.sum(best_idx[qs * cfg.w + ps] != idx))
        grid = img.features[0]
        r_err = max(r_err, float(np.abs(grid[3][qs, ps]
                                        - np.linalg.norm(grid[:3][:, qs, ps], axis=0)).max()))
        pred = rng.integers(1, 6, size=(cfg.h, cfg.w))
        restored = restore_labels(pred, cloud, cfg)
        restore += int(np.sum(restored != pred[q, p]))
    return [Case(f"projection round trip mismatches ({scans} scans)", round_trip, 0),
            Case("farthest-point tie-break mismatches", tie_break, 0),
            Case("restored label mismatches", restore, 0),
            Case("range channel vs |xyz|", r_err, 1e-12)]


# -- reductions -------------------------------------------------------------------------

def reduction_suite(seed: int = 6) -> list[Case]:
    rng = np.random.default_rng(seed)
    cases = []
    with default_dtype(np.float64), no_grad():
        worst_one = 0.0
        worst_zero = 0.0
        for name, variant in VARIANTS.items():
            for _ in range(10):
                n, c = int(rng.integers(1, 3)), int(rng.integers(1, 5))
                h, w = (int(v) for v in rng.integers(1, 9, size=2))
                k = int(rng.choice([1, 3]))
                x = Tensor(rng.normal(size=(n, c, h, w)))
                plain = SacLayer(variant, c, c, rng, k=k, residual=False)
                ones = np.ones((n, plain.attention_channels, h, w))
                ref = ops.conv2d_direct(x, plain.main.weight, plain.main.bias, 1, k // 2)
                worst_one = max(worst_one, max_rel_err(sac_forward(x, None, plain, ones), ref))
                zero_layer = SacLayer(variant, c, c, rng, k=k, follow=True, bias=False)
                out = sac_forward(x, None, zero_layer, np.zeros_like(ones))
                worst_zero = max(worst_zero, float(np.abs(out.data - x.data).max()))
        cases.append(Case("A=1 reproduces plain conv (all variants)", worst_one, 1e-12))
        cases.append(Case("A=0, no bias: output equals input", worst_zero, 0.0))

        x = Tensor(rng.normal(size=(2, 3, 6, 7)))
        pac = make_baseline("PAC", 3, 4, rng)
        const = Tensor(np.broadcast_to(rng.normal(size=(1, 3, 1, 1)), (2, 3, 6, 7)).copy())
        ref = ops.conv2d_direct(x, pac.conv.weight, pac.conv.bias, 1, 1)
        cases.append(Case("PAC with constant guidance = conv",
                          max_rel_err(baseline_forward(x, "PAC", pac, const), ref), 1e-12))

        cam = make_baseline("CAM", 3, 4, rng)
        a = baseline_attention(x, "CAM", cam)
        as_is = as_sac_layer(cam, SAC_IS, rng)
        cases.append(Case("CAM = naive SAC-IS with CAM attention",
                          max_rel_err(baseline_forward(x, "CAM", cam), sac_naive(x, None, as_is, a)),
                          1e-10))

        se = make_baseline("SE", 3, 4, rng)
        se.fc2.weight.data[:] = 0.0
        se.fc2.bias.data[:] = 50.0  # sigmoid(50) is 1 to within one ulp
        ref = ops.conv2d_direct(x, se.conv.weight, se.conv.bias, 1, 1)
        cases.append(Case("SE with unit excitation = conv",
                          max_rel_err(baseline_forward(x, "SE", se), ref), 1e-12))

        se = make_baseline("SE", 3, 4, rng)
        a = baseline_attention(x, "SE", se)
        as_i = as_sac_layer(se, SacVariant.from_name("I"), rng)
        cases.append(Case("SE = naive SAC-I with SE attention",
                          max_rel_err(baseline_forward(x, "SE", se), sac_naive(x, None, as_i, a)),
                          1e-10))
    return cases


SUITES = {"oracle": lambda: oracle_suite() + conv_suite(), "grad": grad_suite,
          "projection": projection_suite, "reduction": reduction_suite}


def run_suite(name: str, echo=print) -> bool:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    results = SUITES[name]()
    for case in results:
        echo(case.line())
    ok = all(c.passed for c in results)
    echo(f"{name}: {sum(c.passed for c in results)}/{len(results)} passed")
    return ok
