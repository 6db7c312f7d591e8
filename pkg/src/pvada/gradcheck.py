"""Central finite-difference checks of the analytic gradients.

Every check reduces the output of a function to a scalar ``sum(out * R)``
with a fixed random ``R``, perturbs each input entry by ``+-h`` and
compares the numerical slope with the gradient from :func:`backward`.
The error reported is the largest elementwise
``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import ModelConfig, forward_batch, init_params
from .tensor import BatchNormState, Tensor, backward, no_grad

__all__ = [
    "GradCheckResult", "relative_error", "numeric_gradient", "check_function",
    "robust_numeric_gradient", "primitive_suite", "end_to_end_suite", "ablation_suite", "run_all", "PRIMITIVE_TOLERANCE", "END_TO_END_TOLERANCE",
]

PRIMITIVE_TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4
STEP = 1e-4
FLOOR = 1e-8


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    entries: int
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<28} max rel err {self.max_rel_error:.3e}  (tol {self.tolerance:.0e}, {self.entries} entries)  {status}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        out[i] = (up - down) / (2 * h)
    return grad


def _central(f, flat, i, h):
    keep = flat[i]
    flat[i] = keep + h
    up = f()
    flat[i] = keep - h
    down = f()
    flat[i] = keep
    return (up - down) / (2 * h)


def robust_numeric_gradient(
    f: Callable[[], float], x: np.ndarray, steps: Sequence[float] = (1e-3, 1e-4, 1e-5)
) -> np.ndarray:
    """Central differences for piecewise-smooth ``f`` (ReLU, max pooling).

    For each step ``h`` the estimates at ``h`` and ``h/2`` are combined by
    Richardson extrapolation. Their disagreement is compared with what
    rounding alone explains (about ``eps * |f| / h``); a larger gap means a
    kink lies inside the interval and the next, smaller step is tried.
    When no step is clean the most consistent one is used.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    scale = max(abs(f()), 1.0) * np.finfo(np.float64).eps * 20
    for i in range(flat.size):
        best, best_ratio = 0.0, np.inf
        for h in steps:
            wide = _central(f, flat, i, h)
            narrow = _central(f, flat, i, h / 2)
            estimate = (4 * narrow - wide) / 3
            ratio = abs(wide - narrow) / (1e-6 * abs(estimate) + scale / h)
            if ratio < best_ratio:
                best, best_ratio = estimate, ratio
            if ratio <= 1:
                break
        out[i] = best
    return grad


def check_function(
    name: str,
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    tolerance: float = PRIMITIVE_TOLERANCE,
    h: float = STEP,
) -> GradCheckResult:
    """Compare analytic and numeric gradients of ``sum(fn(*inputs) * R)`` for every input."""
    start = time.perf_counter()
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    with no_grad():
        probe = fn(*[Tensor(a) for a in arrays])
    weights = rng.uniform(-1, 1, size=probe.shape)

    def scalar() -> float:
        with no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weights))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    backward(T.sum_over_axis(T.mul(out, Tensor(weights))))
    worst, entries = 0.0, 0
    for leaf, arr in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        worst = max(worst, relative_error(analytic, numeric_gradient(scalar, arr, h)))
        entries += arr.size
    return GradCheckResult(name, worst, tolerance, entries, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Primitive suite
# ---------------------------------------------------------------------------


def _away_from_zero(rng, shape, gap=0.05):
    # keeps kinked functions away from their kink so +-h never crosses it
    x = rng.uniform(gap, 1, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    # values in [-1, 1) spaced at least 1.5/n apart, so the arg-max cannot flip under +-h
    n = int(np.prod(shape))
    return ((rng.permutation(n) + rng.uniform(0, 0.25, size=n)) * 2 / n - 1).reshape(shape)


def _primitive_cases(rng) -> list:
    u = lambda *shape: rng.uniform(-1, 1, size=shape)  # noqa: E731
    ids = np.array([0, 2, 2, 1, 0, 2, 1])
    rows = np.array([[3, 0], [1, 1], [4, 2]])
    state = BatchNormState(rng.uniform(-0.5, 0.5, 4), rng.uniform(0.5, 2.0, 4))

    def dropout_fixed(x):
        return T.dropout(x, 0.3, np.random.default_rng(7), training=True)

    return [
        ("matmul", T.matmul, [u(3, 4), u(4, 5)]),
        ("matmul_batched", T.matmul, [u(2, 3, 4), u(2, 4, 3)]),
        ("add_broadcast", T.add, [u(3, 4), u(4)]),
        ("sub_broadcast", T.sub, [u(2, 3, 4), u(1, 3, 1)]),
        ("mul_broadcast", T.mul, [u(3, 4), u(3, 1)]),
        ("div", T.div, [u(3, 4), rng.uniform(0.5, 1.5, size=(3, 4))]),
        ("neg", T.neg, [u(5)]),
        ("pointwise_linear", T.pointwise_linear, [u(2, 5, 3), u(3, 4), u(4)]),
        ("transpose", T.transpose, [u(2, 3, 4)]),
        ("reshape", lambda x: T.reshape(x, (4, 3)), [u(2, 6)]),
        ("relu", T.relu, [_away_from_zero(rng, (4, 5))]),
        ("leaky_relu", lambda x: T.leaky_relu(x, 0.01), [_away_from_zero(rng, (4, 5))]),
        ("softmax", lambda x: T.softmax(x, axis=-1), [u(3, 5)]),
        ("softmax_axis0", lambda x: T.softmax(x, axis=0), [u(3, 5)]),
        ("log_softmax", lambda x: T.log_softmax(x, axis=-1), [u(3, 5)]),
        ("concat", lambda a, b: T.concat([a, b], axis=-1), [u(3, 2), u(3, 4)]),
        ("gather_rows", lambda x: T.gather_rows(x, rows), [u(5, 3)]),
        ("max_over_axis", lambda x: T.max_over_axis(x, axis=1)[0], [_distinct(rng, (3, 6, 2))]),
        ("sum_over_axis", lambda x: T.sum_over_axis(x, axis=0), [u(3, 4)]),
        ("mean_over_axis", lambda x: T.mean_over_axis(x, axis=1), [u(3, 4)]),
        ("segment_mean", lambda x: T.segment_mean(x, ids, 4), [u(7, 3)]),
        ("batch_norm_train", lambda x, g, b: T.batch_norm(x, g, b, None, True), [u(6, 5, 4), u(4), u(4)]),
        ("batch_norm_eval", lambda x, g, b: T.batch_norm(x, g, b, state, False), [u(6, 4), u(4), u(4)]),
        ("dropout", dropout_fixed, [u(4, 5)]),
    ]


def primitive_suite(seed: int = 0, tolerance: float = PRIMITIVE_TOLERANCE) -> list[GradCheckResult]:
    """One check per autodiff primitive plus a composite graph of several of them."""
    rng = np.random.default_rng(seed)
    results = [check_function(name, fn, inputs, rng, tolerance) for name, fn, inputs in _primitive_cases(rng)]

    def composite(a, b, c, d, e):
        h = T.leaky_relu(T.matmul(a, b) + c, 0.1)
        h = T.mul(T.softmax(h, axis=-1), d)
        return T.log_softmax(T.concat([h, e], axis=-1), axis=0)

    u = lambda *shape: rng.uniform(-1, 1, size=shape)  # noqa: E731
    results.append(check_function("composite", composite, [u(4, 3), u(3, 5), u(5), u(4, 5), u(4, 2)], rng, tolerance))
    return results


# ---------------------------------------------------------------------------
# End-to-end suite
# ---------------------------------------------------------------------------


def tiny_config(**overrides) -> ModelConfig:
    base = dict(k=4, dim=4, num_oa_blocks=2, voxel_size=0.45, num_classes=4, head_dims=(6, 5),
                head_dropout=0.0, qk_divisor=2)
    base.update(overrides)
    return ModelConfig(**base)


def _random_cloud(rng, n: int) -> np.ndarray:
    pts = rng.normal(size=(n, 3))
    pts -= pts.mean(axis=0)
    return pts / np.linalg.norm(pts, axis=1).max()


def model_gradcheck(
    name: str,
    config: ModelConfig,
    n_clouds: int,
    training: bool,
    seed: int = 0,
    n_points: int = 16,
    tolerance: float = END_TO_END_TOLERANCE,
) -> GradCheckResult:
    """Check every parameter gradient of the label-smoothed loss of a small model in double precision."""
    from .training import label_smoothed_ce

    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    params = init_params(config, rng, np.float64)
    for t in params.tensors.values():
        # move off the structured init (zero score weights, unit scales) so every path carries gradient
        t.data += rng.uniform(-0.3, 0.3, size=t.shape)
    for state in params.norms.values():
        state.running_mean[:] = rng.uniform(-0.5, 0.5, size=state.running_mean.shape)
        state.running_var[:] = rng.uniform(0.5, 2.0, size=state.running_var.shape)
    clouds = [_random_cloud(rng, n_points) for _ in range(n_clouds)]
    labels = rng.integers(0, config.num_classes, size=n_clouds)

    def loss_value() -> float:
        with no_grad():
            logits, _ = forward_batch(clouds, params, training=training)
            return label_smoothed_ce(logits, labels, 0.2).item()

    params.zero_grad()
    logits, _ = forward_batch(clouds, params, training=training)
    backward(label_smoothed_ce(logits, labels, 0.2))
    worst, entries = 0.0, 0
    for pname, t in params.named_parameters():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, robust_numeric_gradient(loss_value, t.data)))
        entries += t.size
    return GradCheckResult(name, worst, tolerance, entries, time.perf_counter() - start)


def end_to_end_suite(seed: int = 0, tolerance: float = END_TO_END_TOLERANCE) -> list[GradCheckResult]:
    """16-point clouds, four classes, default layout: one cloud in inference mode, a batch of three in training mode."""
    return [
        model_gradcheck("model_eval", tiny_config(), 1, False, seed, tolerance=tolerance),
        model_gradcheck("model_train_batch", tiny_config(), 3, True, seed, tolerance=tolerance),
    ]


def ablation_suite(seed: int = 0, tolerance: float = END_TO_END_TOLERANCE) -> list[GradCheckResult]:
    """The interaction, weight-sharing and attention-normalization variants."""
    return [
        model_gradcheck("model_z2_unshared", tiny_config(interaction="z2", shared_weights=False), 1, False, seed,
                        tolerance=tolerance),
        model_gradcheck("model_z3_double_norm", tiny_config(interaction="z3", attention_double_norm=True), 2, True,
                        seed, tolerance=tolerance),
        model_gradcheck("model_three_voxelizations", tiny_config(num_voxelizations=3, afa_enabled=False), 1, False,
                        seed, tolerance=tolerance),
    ]


def run_all(seed: int = 0, ablations: bool = False) -> list[GradCheckResult]:
    results = primitive_suite(seed) + end_to_end_suite(seed)
    return results + ablation_suite(seed) if ablations else results
