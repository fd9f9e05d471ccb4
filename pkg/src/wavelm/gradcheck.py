"""Finite-difference verification of every differentiable op.

Each check re-runs the op in float64, projects the output onto a fixed random
direction to get a scalar, and compares analytic input gradients against
central differences with h = 1e-4. The reference never touches the backward
rules, so a sign error or a dropped term shows up immediately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .seeding import stage_rng
from .tensor import Tensor

FD_STEP = 1e-4
_REL_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    op_kind: str
    trials: int
    max_rel_error: float
    tolerance: float
    passed: bool
    vacuous: bool = False

    def __str__(self):
        status = "vacuous pass" if self.vacuous else ("pass" if self.passed else "FAIL")
        return (f"{self.op_kind}: {status} "
                f"(max rel err {self.max_rel_error:.3e}, tol {self.tolerance:.1e}, "
                f"{self.trials} trials)")


def _case_add(rng):
    a = rng.normal(size=(2, 3, 4))
    b = [rng.normal(size=(2, 3, 4)), rng.normal(size=(4,)),
         rng.normal(size=(3, 1))][rng.integers(3)]
    return [a, b], {}


def _case_sub(rng):
    return [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], {}


def _case_mul(rng):
    a = rng.normal(size=(2, 3, 4))
    b = [rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 4)),
         rng.normal(size=(1,))][rng.integers(3)]
    return [a, b], {}


def _case_scale(rng):
    return [rng.normal(size=(3, 5))], {"value": float(rng.normal())}


def _case_sqrt(rng):
    return [0.5 + rng.random(size=(3, 4))], {}


def _case_log(rng):
    return [0.5 + rng.random(size=(3, 4))], {"eps": 1e-5}


def _case_gelu(rng):
    return [rng.normal(size=(3, 5))], {}


def _case_reduce(rng):
    return [rng.normal(size=(2, 3, 4))], {}


def _case_l1(rng):
    return [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], {}


def _case_reshape(rng):
    return [rng.normal(size=(2, 3, 4))], {"shape": (4, 6)}


def _case_transpose(rng):
    axes = tuple(rng.permutation(3))
    return [rng.normal(size=(2, 3, 4))], {"axes": axes}


def _case_matmul(rng):
    which = rng.integers(3)
    if which == 0:
        return [rng.normal(size=(3, 4)), rng.normal(size=(4, 5))], {}
    if which == 1:
        return [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))], {}
    return [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))], {}


def _case_conv1d(rng):
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 4))
    pad = int(rng.integers(0, 3))
    t = int(rng.integers(max(k, 6), 12))
    x = rng.normal(size=(2, 2, t))
    w = rng.normal(size=(3, 2, k))
    return [x, w], {"stride": stride, "pad": pad}


def _case_convt1d(rng):
    k = int(rng.integers(2, 5))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, min(2, (k - 1) // 2 + 1)))
    x = rng.normal(size=(2, 2, 5))
    w = rng.normal(size=(2, 3, k))
    return [x, w], {"stride": stride, "pad": pad}


def _case_embedding(rng):
    table = rng.normal(size=(7, 3))
    ids = rng.integers(0, 7, size=(2, 4))
    return [table], {"ids": ids}


def _case_layernorm(rng):
    x = rng.normal(size=(2, 3, 6))
    gamma = 1.0 + 0.1 * rng.normal(size=(6,))
    beta = rng.normal(size=(6,))
    return [x, gamma, beta], {"eps": 1e-5}


def _case_softmax(rng):
    return [rng.normal(size=(2, 3, 5))], {}


def _case_frame(rng):
    size = int(rng.choice([4, 8]))
    hop = int(rng.integers(2, 5))
    return [rng.normal(size=(2, 20))], {"size": size, "hop": hop}


def _case_stft_mag(rng):
    return [rng.normal(size=(2, 3, 8))], {}


def _case_xent(rng):
    logits = rng.normal(size=(6, 5))
    targets = rng.integers(0, 5, size=6)
    targets[int(rng.integers(6))] = -1
    return [logits], {"targets": targets, "ignore_index": -1}


CASE_BUILDERS = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "sqrt": _case_sqrt,
    "log": _case_log,
    "gelu": _case_gelu,
    "sum": _case_reduce,
    "mean": _case_reduce,
    "l1_distance": _case_l1,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "matmul": _case_matmul,
    "conv1d": _case_conv1d,
    "conv_transpose1d": _case_convt1d,
    "embedding": _case_embedding,
    "layernorm": _case_layernorm,
    "softmax": _case_softmax,
    "frame": _case_frame,
    "stft_mag": _case_stft_mag,
    "cross_entropy_with_logits": _case_xent,
}


def _projected_loss(op_kind, arrays, attrs, proj):
    with tensor.no_grad():
        out = tensor.forward_op(
            op_kind, [Tensor(a, dtype=np.float64) for a in arrays], attrs)
    return float((out.data * proj).sum())


def check_gradients(op_kind: str, trial_count: int = 10, tolerance: float = 1e-3,
                    seed: int = 0, freeze_inputs: bool = False) -> GradCheckReport:
    """Compare analytic gradients of one op against central finite differences.

    Failures are reported, never raised. With freeze_inputs=True no input
    requires a gradient and the check is a vacuous pass.
    """
    if op_kind not in CASE_BUILDERS:
        raise tensor.OpError(f"unknown op kind: {op_kind!r}")
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    rng = stage_rng(seed, f"gradcheck/{op_kind}")
    max_err = 0.0
    for _ in range(trial_count):
        arrays, attrs = CASE_BUILDERS[op_kind](rng)
        proj = rng.normal(size=np.shape(
            tensor.OPS[op_kind].fwd({}, [np.asarray(a, dtype=np.float64) for a in arrays],
                                    attrs)))
        inputs = [Tensor(a, requires_grad=not freeze_inputs, dtype=np.float64)
                  for a in arrays]
        out = tensor.forward_op(op_kind, inputs, attrs)
        if not out.requires_grad:
            tensor.reset_graph()
            return GradCheckReport(op_kind, trial_count, 0.0, tolerance,
                                   passed=True, vacuous=True)
        loss = tensor.sum_all(tensor.mul(out, Tensor(proj, dtype=np.float64)))
        tensor.backward(loss)

        for i, t in enumerate(inputs):
            analytic = t.grad
            flat = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
            fd = np.zeros_like(flat[i])
            it = np.nditer(fd, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = flat[i][idx]
                flat[i][idx] = orig + FD_STEP
                up = _projected_loss(op_kind, flat, attrs, proj)
                flat[i][idx] = orig - FD_STEP
                down = _projected_loss(op_kind, flat, attrs, proj)
                flat[i][idx] = orig
                fd[idx] = (up - down) / (2 * FD_STEP)
                it.iternext()
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), _REL_FLOOR)
            err = float((np.abs(analytic - fd) / denom).max())
            max_err = max(max_err, err)
    return GradCheckReport(op_kind, trial_count, max_err, tolerance,
                           passed=max_err < tolerance)


def check_all_gradients(trial_count: int = 10, tolerance: float = 1e-3,
                        seed: int = 0) -> list[GradCheckReport]:
    return [check_gradients(kind, trial_count, tolerance, seed)
            for kind in sorted(CASE_BUILDERS)]
