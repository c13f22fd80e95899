"""Central finite-difference verification of tape gradients.

The checker builds float64 inputs, runs ``build_fn`` once under a tape
to collect analytic gradients, then re-evaluates the loss with each
sampled element nudged by +/-h. Relative error uses the symmetric
normalization max(|analytic|, |numeric|, 1e-8) so zero gradients
compare cleanly.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradEntry:
    name: str
    max_rel_err: float
    checked: int
    note: str = ""

    @property
    def ok(self):
        return self.note == "" and np.isfinite(self.max_rel_err)


@dataclass
class GradReport:
    passed: bool
    tolerance: float
    step: float
    seed: int
    entries: list = field(default_factory=list)

    def worst(self):
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def summary(self):
        lines = [
            f"gradient check: {'PASS' if self.passed else 'FAIL'} "
            f"(tol {self.tolerance:g}, h {self.step:g}, seed {self.seed})"
        ]
        for e in self.entries:
            state = "ok" if e.ok and e.max_rel_err <= self.tolerance else "FAIL"
            note = f" [{e.note}]" if e.note else ""
            lines.append(
                f"  {e.name}: max rel err {e.max_rel_err:.3e} "
                f"over {e.checked} elements {state}{note}"
            )
        return "\n".join(lines)


def check_gradients(build_fn, input_shapes, tolerance=1e-4, *, seed=0,
                    step=1e-5, max_samples=16, scale=1.0):
    """Compare tape gradients of ``build_fn`` against central differences.

    ``build_fn(*tensors)`` must return a scalar Tensor and be a
    deterministic function of its inputs (re-evaluated many times).
    Inputs are float64 standard normals scaled by ``scale``; every input
    tensor is covered, with at most ``max_samples`` elements sampled per
    tensor (all of them when the tensor is small).
    """
    rng = np.random.default_rng(seed)
    inputs = [
        Tensor(rng.standard_normal(shape) * scale, requires_grad=True,
               name=f"input{i}", dtype=np.float64)
        for i, shape in enumerate(input_shapes)
    ]
    with Tape() as tape:
        loss = build_fn(*inputs)
    if loss.size != 1:
        raise ValueError(f"build_fn must return a scalar, got shape {loss.shape}")
    backward(tape, loss)

    def eval_loss():
        return float(build_fn(*inputs).data)

    entries = []
    for t in inputs:
        if t.grad is None:
            entries.append(GradEntry(t.name, np.inf, 0, "no gradient reached this tensor"))
            continue
        if not np.all(np.isfinite(t.grad)):
            entries.append(GradEntry(t.name, np.inf, 0, "non-finite analytic gradient"))
            continue
        flat_idx = np.arange(t.size)
        if t.size > max_samples:
            flat_idx = rng.choice(t.size, size=max_samples, replace=False)
        worst = 0.0
        buf = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        for i in flat_idx:
            orig = buf[i]
            buf[i] = orig + step
            up = eval_loss()
            buf[i] = orig - step
            down = eval_loss()
            buf[i] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = gflat[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
        entries.append(GradEntry(t.name, worst, len(flat_idx)))
    passed = all(e.ok and e.max_rel_err <= tolerance for e in entries)
    return GradReport(passed, tolerance, step, seed, entries)
