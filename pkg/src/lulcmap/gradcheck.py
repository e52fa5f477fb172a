"""Whole-model gradient validation against central finite differences.

Every parameter tensor of a (small) model is checked: the autodiff
gradient of the training loss, computed at the precision under test, is
compared against a central-difference estimate.  The difference oracle
always evaluates a float64 clone of the model so that its own rounding
noise sits far below the tolerances; with the pinned step of 1e-4 a
float32 oracle would drown in forward-evaluation noise (~1e-3 per
element), which is exactly what the 64-bit oracle isolates.

Per-tensor relative error:  ||ad - fd||_2 / max(||ad||_2, ||fd||_2, 1e-12).
Thresholds: 1e-3 for a float32 model, 1e-5 for float64.

One wrinkle: the attention key bias has *exactly* zero gradient (adding a
constant to every key shifts each score row uniformly, which softmax
ignores), so both gradient estimates for it are pure rounding noise and a
ratio of noises is meaningless.  A tensor whose autodiff and difference
gradients both stay below ZERO_FLOOR in max-magnitude therefore counts as
matching; real gradients in these models sit orders of magnitude above the
floor, and a broken backward rule lands far above it too.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vit
from .errors import NumericalError
from .optim import cross_entropy
from .tensor import Tensor

DEFAULT_STEP = 1e-4
THRESHOLDS = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-5}
ZERO_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    dtype: str
    step: float
    threshold: float
    per_tensor: dict[str, float]
    elapsed_sec: float

    @property
    def max_rel_error(self) -> float:
        return max(self.per_tensor.values())

    @property
    def worst(self) -> str:
        return max(self.per_tensor, key=self.per_tensor.get)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck[{self.dtype}]: max_rel_error={self.max_rel_error:.3e} "
                f"(threshold {self.threshold:.0e}, worst {self.worst}) {status} "
                f"in {self.elapsed_sec:.1f}s")


def check_model_gradients(config: vit.ViTConfig | None = None, dtype=np.float32,
                          batch_size: int = 2, step: float = DEFAULT_STEP,
                          seed: int = 0, threshold: float | None = None) -> GradCheckResult:
    """Validate autodiff gradients of cross_entropy(forward(x)) for every
    parameter tensor of a freshly initialized model."""
    config = config or vit.ViTConfig.tiny_test()
    dtype = np.dtype(dtype)
    if threshold is None:
        threshold = THRESHOLDS[dtype]
    start = time.perf_counter()

    rng = np.random.default_rng(seed)
    x64 = rng.normal(0.0, 1.0, size=(batch_size, 3, config.image_size, config.image_size))
    x64 = x64.astype(np.float32).astype(np.float64)  # exactly representable in both precisions
    labels = rng.integers(0, config.num_classes, size=batch_size)

    # Autodiff gradients at the precision under test (dropout off: p=0).
    model = vit.init_model(config, seed=seed, dtype=dtype)
    logits = vit.forward(model, Tensor(x64.astype(dtype)), mode="train", dropout_p=0.0)
    cross_entropy(logits, labels).backward()

    # Float64 clone for the difference oracle.
    oracle = vit.ViTModel(
        config=config,
        params={name: Tensor(p.values.astype(np.float64)) for name, p in model.params.items()},
    )
    x_oracle = Tensor(x64)

    def oracle_loss() -> float:
        with T.no_grad():
            out = vit.forward(oracle, x_oracle, mode="train", dropout_p=0.0)
            return cross_entropy(out, labels).item()

    per_tensor: dict[str, float] = {}
    for name, p in model.params.items():
        if p.grad is None:
            raise NumericalError(f"parameter {name!r} received no gradient")
        flat = oracle.params[name].values.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = oracle_loss()
            flat[i] = orig - step
            lo = oracle_loss()
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * step)
        ad = p.grad.reshape(-1).astype(np.float64)
        if max(np.abs(ad).max(), np.abs(fd).max()) < ZERO_FLOOR:
            per_tensor[name] = 0.0  # structurally zero gradient (see module docstring)
            continue
        denom = max(np.linalg.norm(ad), np.linalg.norm(fd), 1e-12)
        per_tensor[name] = float(np.linalg.norm(ad - fd) / denom)

    return GradCheckResult(
        dtype=dtype.name,
        step=step,
        threshold=threshold,
        per_tensor=per_tensor,
        elapsed_sec=time.perf_counter() - start,
    )
