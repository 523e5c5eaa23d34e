"""Finite-difference gradient suites shared by the test-suite and the CLI.

Each suite returns a list of :class:`CheckResult`; a result passes when its
maximum relative error is below its threshold.  Relative error is
``max|analytic - numeric| / max(max|numeric|, 1e-12)`` over the checked
coordinates.  Everything runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .binary import sign_binarize
from .clique import BINARY, BlockConfig, MBCliqueNet, NetworkConfig
from .modulation import grad_m, grad_w, modulate
from .training import cross_entropy

__all__ = [
    "CheckResult",
    "relative_error",
    "tiny_network",
    "primitive_suite",
    "modulation_suite",
    "network_suite",
    "q_jacobian",
    "run_all",
]


@dataclass
class CheckResult:
    suite: str
    name: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.threshold)


def relative_error(analytic, numeric) -> float:
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = max(float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def tiny_network(seed: int, width: int = 4, k: int = 2, layers: int = 2, size: int = 8,
                 channels: int = 2, classes: int = 3, blocks: int = 1) -> MBCliqueNet:
    """Small float64 network of the shape used by the gradient suites."""
    cfg = NetworkConfig([BlockConfig(layers, width, k) for _ in range(blocks)],
                        in_channels=channels, image_size=size, num_classes=classes)
    return MBCliqueNet(cfg, seed=seed, dtype=np.float64)


def _sampled_fd(f, arr, rng, count, eps):
    """Central differences of ``f()`` w.r.t. up to ``count`` entries of ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    idx = np.arange(flat.size) if flat.size <= count else rng.choice(flat.size, count, replace=False)
    out = np.empty(len(idx))
    for n, j in enumerate(idx):
        orig = flat[j]
        flat[j] = orig + eps
        fp = f()
        flat[j] = orig - eps
        fm = f()
        flat[j] = orig
        out[n] = (fp - fm) / (2 * eps)
    return idx, out


def primitive_suite(seed: int = 0, eps: float = 1e-5) -> list[CheckResult]:
    """Conv, batch norm, pooling and concat backward passes against finite differences."""
    rng = np.random.default_rng(seed)
    results = []
    x = rng.standard_normal((2, 3, 5, 5))
    f = rng.standard_normal((4, 3, 3, 3))
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        w = rng.standard_normal(T.conv2d(x, f, stride, pad).shape)
        gx, gf = T.conv2d_backward(w, x, f, stride, pad)
        nx = T.finite_diff_grad(lambda p: float((T.conv2d(p, f, stride, pad) * w).sum()), x, eps)
        nf = T.finite_diff_grad(lambda p: float((T.conv2d(x, p, stride, pad) * w).sum()), f, eps)
        results.append(CheckResult("primitives", f"conv2d_s{stride}p{pad}_input", relative_error(gx, nx), 1e-6))
        results.append(CheckResult("primitives", f"conv2d_s{stride}p{pad}_filters", relative_error(gf, nf), 1e-6))
    state = T.BatchNormState.create(3, np.float64)
    state.gamma[:] = rng.standard_normal(3)
    state.beta[:] = rng.standard_normal(3)
    w = rng.standard_normal(x.shape)

    def bn_loss(p):
        st = T.BatchNormState(state.gamma.copy(), state.beta.copy(), state.running_mean.copy(),
                              state.running_var.copy())
        return float((T.batch_norm(p, st, training=True) * w).sum())

    gx, gg, gb = T.batch_norm_backward(w, x, state, training=True)
    results.append(CheckResult("primitives", "batch_norm_input",
                               relative_error(gx, T.finite_diff_grad(bn_loss, x, eps)), 1e-5))
    ng = T.finite_diff_grad(lambda g: float((T.batch_norm(x, T.BatchNormState(
        g, state.beta.copy(), np.zeros(3), np.ones(3)), True) * w).sum()), state.gamma, eps)
    results.append(CheckResult("primitives", "batch_norm_gamma", relative_error(gg, ng), 1e-6))
    xr = T.to_cl(x)
    r = T.bn_relu_cl(xr, T.BatchNormState(state.gamma.copy(), state.beta.copy(),
                                          np.zeros(3), np.ones(3)), True)
    wr = T.to_cl(w)
    gxr, _, _ = T.bn_relu_cl_backward(wr, xr, r, state)

    def bnr_loss(p):
        st = T.BatchNormState(state.gamma.copy(), state.beta.copy(), np.zeros(3), np.ones(3))
        return float((T.bn_relu_cl(p, st, True) * wr).sum())

    results.append(CheckResult("primitives", "bn_relu_input",
                               relative_error(gxr, T.finite_diff_grad(bnr_loss, xr, eps)), 1e-5))
    xp = rng.standard_normal((2, 3, 4, 6))
    wp = rng.standard_normal((2, 3, 2, 3))
    gp = T.avg_pool2d_backward(wp, xp.shape)
    npool = T.finite_diff_grad(lambda p: float((T.avg_pool2d(p) * wp).sum()), xp, eps)
    results.append(CheckResult("primitives", "avg_pool2d", relative_error(gp, npool), 1e-6))
    wg = rng.standard_normal((2, 3, 1, 1))
    gg_ = T.global_avg_pool_backward(wg, xp.shape)
    ngap = T.finite_diff_grad(lambda p: float((T.global_avg_pool(p) * wg).sum()), xp, eps)
    results.append(CheckResult("primitives", "global_avg_pool", relative_error(gg_, ngap), 1e-6))
    return results


def q_jacobian(m: np.ndarray, wb_shape) -> np.ndarray:
    """Explicit dQ/dW matrix: rows index Q entries, columns index binarized-bank entries."""
    o, i, w, _ = wb_shape
    k = m.shape[0]
    jac = np.zeros((o * k * i * w * w, o * i * w * w))
    for f in range(o):
        for j in range(k):
            for c in range(i):
                for a in range(w):
                    for b in range(w):
                        row = (((f * k + j) * i + c) * w + a) * w + b
                        col = ((f * i + c) * w + a) * w + b
                        jac[row, col] = m[j, a, b]
    return jac


def modulation_suite(seed: int = 0, eps: float = 1e-6) -> list[CheckResult]:
    """grad_w and grad_m against finite differences of a linear probe of Q."""
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((3, 3, 3))
    wb = rng.standard_normal((2, 4, 3, 3))
    probe = rng.standard_normal((6, 4, 3, 3))
    nw = T.finite_diff_grad(lambda p: float((modulate(m, p) * probe).sum()), wb, eps)
    nm = T.finite_diff_grad(lambda p: float((modulate(p, wb) * probe).sum()), m, eps)
    return [
        CheckResult("modulation", "grad_w", relative_error(grad_w(probe, m), nw), 1e-7),
        CheckResult("modulation", "grad_m", relative_error(grad_m(probe, wb), nm), 1e-7),
    ]


def network_suite(seeds=range(3), eps: float = 1e-7, samples: int = 30) -> list[CheckResult]:
    """Whole-network gradients on tiny float64 networks.

    ``m_filter``: M-filter gradients against central differences.  The loss
    is piecewise smooth (ReLU kinks), so a small step keeps the stencil
    inside one linear piece; at 1e-6 a kink occasionally falls inside it,
    and in double precision 1e-7 still leaves roundoff near 1e-9.  ``masters``: the binarized-bank gradients the
    network reports against dL/dQ pushed through an explicit dQ/dW matrix
    and the identity straight-through estimator.  ``full_precision``: a
    sample of the remaining parameters against central differences.
    """
    worst = {"m_filter": 0.0, "masters": 0.0, "full_precision": 0.0}
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        net = tiny_network(seed)
        x = rng.standard_normal((4, 2, 8, 8))
        y = rng.integers(0, 3, 4)

        def loss():
            return cross_entropy(net.forward(x, training=True), y)[0]

        net.q_grad_trace = {}
        _, g = cross_entropy(net.forward(x, training=True), y)
        grads = net.backward(g)
        trace, net.q_grad_trace = net.q_grad_trace, None
        m = net.params["b0.m"]
        _, nm = _sampled_fd(loss, m, rng, m.size, eps)
        worst["m_filter"] = max(worst["m_filter"], relative_error(grads["b0.m"].reshape(-1), nm))
        n = net.config.blocks[0].n_layers
        for i in range(1, n + 1):
            name = f"b0.l{i}.conv3"
            wshape = net.params[name].shape
            jac = q_jacobian(m, wshape)
            oracle = sum(jac.T @ trace[(0, s, i)].reshape(-1) for s in (1, 2))
            worst["masters"] = max(worst["masters"], relative_error(grads[name].reshape(-1), oracle))
        for name, p in net.params.items():
            if net.roles[name] == BINARY or name == "b0.m":
                continue
            idx, num = _sampled_fd(loss, p, rng, samples, eps)
            worst["full_precision"] = max(worst["full_precision"],
                                          relative_error(grads[name].reshape(-1)[idx], num))
        assert np.array_equal(net.binarized["b0.l1.conv3"], sign_binarize(net.params["b0.l1.conv3"]))
    thresholds = {"m_filter": 1e-4, "masters": 1e-12, "full_precision": 1e-4}
    return [CheckResult("network", k, v, thresholds[k]) for k, v in worst.items()]


def run_all(seed: int = 0) -> list[CheckResult]:
    return (primitive_suite(seed) + modulation_suite(seed)
            + network_suite(range(seed, seed + 3)))
