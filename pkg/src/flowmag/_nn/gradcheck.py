"""
Central finite-difference gradient checks.

The output of the function under test is scalarized with fixed random
weights, differentiated once analytically, then perturbed coordinate by
coordinate at double precision.
"""

# Copyright 2025 Flowmag Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from . import functional as F
from .tensor import Tensor, no_grad

DEFAULT_STEP = 1e-5
TOLERANCE = 1e-4


def grad_check_leaves(
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = DEFAULT_STEP,
    seed: int = 0,
    max_coords: Optional[int] = None,
) -> float:
    """
    Compare analytic and numeric gradients of `fn()` w.r.t. `leaves`.

    Args:
        fn: Zero-argument closure recomputing the output from the leaves'
            current data. Must be deterministic.
        leaves: float64 Tensors; their data is perturbed in place and restored.
        h: Central-difference step.
        seed: Seeds the scalarizing weights and coordinate sampling.
        max_coords: Check at most this many coordinates per leaf.

    Returns:
        float: max over checked coordinates of
        |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    rng = np.random.default_rng(seed)
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None

    out = fn()
    weights = np.asarray(rng.standard_normal(out.shape), dtype=np.float64)
    F.sum_all(F.mul(out, weights)).backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def objective() -> float:
        with no_grad():
            return float(np.sum(fn().data * weights))

    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        size = leaf.data.size
        if max_coords is None or size <= max_coords:
            coords: npt.ArrayLike = range(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        for flat in coords:
            idx = np.unravel_index(int(flat), leaf.shape)
            original = leaf.data[idx]
            leaf.data[idx] = original + h
            plus = objective()
            leaf.data[idx] = original - h
            minus = objective()
            leaf.data[idx] = original
            numeric = (plus - minus) / (2.0 * h)
            a = float(grad[idx])
            worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    return worst


def grad_check(
    op: Callable[..., Tensor],
    *inputs: npt.ArrayLike,
    h: float = DEFAULT_STEP,
    seed: int = 0,
) -> float:
    """Gradient check of `op(*inputs)` w.r.t. every input, at double precision."""
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    return grad_check_leaves(lambda: op(*leaves), leaves, h=h, seed=seed)


def op_checks(seed: int = 0, points: int = 10) -> List[Tuple[str, float]]:
    """
    Run every tensor-engine operation through `grad_check` at `points` random
    points; returns (name, worst error over the points).
    """
    rng = np.random.default_rng(seed)
    results: List[Tuple[str, float]] = []

    def normal(*shape: int) -> npt.NDArray[np.float64]:
        return rng.standard_normal(shape)

    def positive(*shape: int) -> npt.NDArray[np.float64]:
        return rng.uniform(0.5, 2.0, size=shape)

    cases: List[Tuple[str, Callable[[int], float]]] = [
        ("add (broadcast)", lambda s: grad_check(F.add, normal(2, 3, 4), normal(1, 3, 1), seed=s)),
        ("sub", lambda s: grad_check(F.sub, normal(3, 4), normal(3, 4), seed=s)),
        ("mul (broadcast)", lambda s: grad_check(F.mul, normal(2, 3, 4), normal(4), seed=s)),
        ("div", lambda s: grad_check(F.div, normal(3, 4), positive(3, 4), seed=s)),
        ("relu", lambda s: grad_check(F.relu, normal(4, 5), seed=s)),
        ("abs", lambda s: grad_check(F.absolute, normal(4, 5), seed=s)),
        ("mean", lambda s: grad_check(F.mean, normal(3, 4), seed=s)),
        ("reshape", lambda s: grad_check(lambda x: F.reshape(x, (2, 1, 3, 2)), normal(2, 6), seed=s)),
        (
            "concat",
            lambda s: grad_check(lambda a, b: F.concat([a, b], axis=1), normal(2, 1, 3, 3), normal(2, 2, 3, 3), seed=s),
        ),
        ("sum_pool2d", lambda s: grad_check(lambda x: F.sum_pool2d(x, 2), normal(2, 1, 4, 4), seed=s)),
        (
            "upsample_nearest2d",
            lambda s: grad_check(lambda x: F.upsample_nearest2d(x, 3), normal(1, 2, 2, 2), seed=s),
        ),
        (
            "conv2d 3x3",
            lambda s: grad_check(F.conv2d, normal(2, 2, 4, 4), normal(3, 2, 3, 3), normal(3), seed=s),
        ),
        (
            "conv2d 9x9",
            lambda s: grad_check(F.conv2d, normal(1, 1, 5, 5), normal(2, 1, 9, 9), normal(2), seed=s),
        ),
        (
            "conv2d 9x9 many-to-one",
            lambda s: grad_check(F.conv2d, normal(2, 3, 5, 4), normal(1, 3, 9, 9), normal(1), seed=s),
        ),
        ("batch_norm2d train", lambda s: _check_batch_norm(normal, True, s)),
        ("batch_norm2d eval", lambda s: _check_batch_norm(normal, False, s)),
        ("pixel_shuffle", lambda s: grad_check(lambda x: F.pixel_shuffle(x, 2), normal(2, 8, 2, 3), seed=s)),
        ("dense", lambda s: grad_check(F.dense, normal(3, 5), normal(4, 5), normal(4), seed=s)),
        ("embedding", lambda s: grad_check(lambda t: F.embedding(t, np.array([0, 3, 3, 1])), normal(5, 2), seed=s)),
        (
            "dropout",
            lambda s: grad_check(
                lambda x: F.dropout(x, 0.3, True, np.random.default_rng(s)), normal(4, 6), seed=s
            ),
        ),
        (
            "n2_normalize",
            lambda s: grad_check(lambda x: F.n2_normalize(x, 2, 1e-7), positive(2, 1, 4, 4), seed=s),
        ),
        ("mse_loss", lambda s: grad_check(F.mse_loss, normal(2, 1, 4, 4), normal(2, 1, 4, 4), seed=s)),
    ]
    for name, case in cases:
        results.append((name, max(case(seed + p) for p in range(points))))
    return results


def _check_batch_norm(
    normal: Callable[..., npt.NDArray[np.float64]], training: bool, seed: int
) -> float:
    channels = 3
    running_mean = normal(channels) * 0.1
    running_var = np.abs(normal(channels)) + 0.5

    def op(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        # Train-mode updates to the running stats do not feed back into the output.
        return F.batch_norm2d(x, gamma, beta, running_mean.copy(), running_var.copy(), training)

    return grad_check(op, normal(3, channels, 3, 3), normal(channels), normal(channels), seed=seed)
