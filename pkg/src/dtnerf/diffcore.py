"""Parameter storage, gradient propagation, Adam and a finite-difference gradient checker.

Reverse-mode propagation is delegated to torch autograd; this module owns the
parameter bookkeeping around it (named tensors, zero-filled grads for
parameters that did not take part in a forward pass, finiteness checks), the
optimizer update and the central-difference verification harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch


class NonFiniteError(FloatingPointError):
    pass


class ParamTensor:
    """A named trainable tensor; ``values`` and ``grad`` are flat views."""

    def __init__(self, name: str, data: torch.Tensor | torch.nn.Parameter, group: str = "heads"):
        if not isinstance(data, torch.nn.Parameter):
            data = torch.nn.Parameter(data)
        self.name = name
        self.param = data
        self.group = group

    @property
    def shape(self) -> list[int]:
        return list(self.param.shape)

    @property
    def values(self) -> torch.Tensor:
        return self.param.data.view(-1)

    @property
    def grad(self) -> torch.Tensor:
        if self.param.grad is None:
            self.param.grad = torch.zeros_like(self.param.data)
        return self.param.grad.view(-1)

    def zero_grad(self) -> None:
        if self.param.grad is not None:
            self.param.grad.zero_()

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.shape}, group={self.group!r})"


def param_tensors(module: torch.nn.Module, prefix: str = "") -> list[ParamTensor]:
    """Wrap a module's parameters; anything registered under a ``tables`` attribute is a hash table."""
    out = []
    for name, p in module.named_parameters():
        group = "tables" if ".tables." in f".{name}" or name.startswith("tables.") else "heads"
        out.append(ParamTensor(prefix + name, p, group))
    return out


def backward(loss: torch.Tensor, params: Iterable[ParamTensor]) -> None:
    """Accumulate d(loss)/d(param) into every param's grad.

    Params not reached by the graph end up with an explicit zero grad. Calling
    twice without zeroing accumulates, as autograd does.
    """
    params = list(params)
    if loss.numel() != 1:
        raise ValueError("backward expects a scalar loss")
    if not torch.isfinite(loss.detach()).all():
        raise NonFiniteError(f"non-finite loss {loss.item()!r}")
    if loss.requires_grad:
        leaves = [p.param for p in params if p.param.requires_grad]
        grads = torch.autograd.grad(loss, leaves, allow_unused=True)
        for leaf, g in zip(leaves, grads):
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = g.detach().clone(memory_format=torch.contiguous_format)
            else:
                leaf.grad.add_(g)
    for p in params:
        p.grad  # materialize zeros


def zero_grads(params: Iterable[ParamTensor]) -> None:
    for p in params:
        p.zero_grad()


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: Sequence[ParamTensor], state: AdamState, lr_scale: float = 1.0) -> None:
    """Bias-corrected Adam update in place, then zero the grads."""
    if not (0.0 < state.beta1 < 1.0 and 0.0 < state.beta2 < 1.0):
        raise ValueError("beta1 and beta2 must lie in (0, 1)")
    if state.lr <= 0 or state.eps <= 0:
        raise ValueError("lr and eps must be positive")
    for p in params:
        if not torch.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in {p.name}")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    lr = state.lr * lr_scale
    with torch.no_grad():
        for p in params:
            g = p.param.grad if p.param.grad is not None else torch.zeros_like(p.param)
            m = state.m.get(p.name)
            if m is None:
                m = state.m[p.name] = torch.zeros_like(p.param)
                state.v[p.name] = torch.zeros_like(p.param)
            v = state.v[p.name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.param.addcdiv_(m, denom, value=-lr / bc1)
    zero_grads(params)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradProblem:
    """A small instance of a differentiable op: params plus a scalar loss closure."""

    params: list[ParamTensor]
    loss: Callable[[], torch.Tensor]


@dataclass
class GradCheckReport:
    op_name: str
    n_checked: int
    max_rel_err: float
    tol: float
    failures: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


GRADCHECK_OPS: dict[str, Callable[[np.random.Generator], GradProblem]] = {}


def register_gradcheck(name: str):
    def deco(fn):
        GRADCHECK_OPS[name] = fn
        return fn
    return deco


def _select(pattern: str) -> list[str]:
    if pattern in GRADCHECK_OPS:
        return [pattern]
    names = [n for n in GRADCHECK_OPS if pattern == "all" or n.startswith(pattern)]
    if not names:
        raise KeyError(f"no gradcheck op matches {pattern!r}; known: {sorted(GRADCHECK_OPS)}")
    return names


def gradcheck(op_selector: str, n_samples: int = 200, eps: float = 1e-5, tol: float = 1e-4,
              seed: int = 0, abs_floor: float = 1e-6) -> list[GradCheckReport]:
    """Compare analytic grads against central differences for every op matching ``op_selector``.

    Coordinates are drawn three quarters from the support of the analytic
    gradient (sparse tables would otherwise be checked almost only at zeros)
    and the rest uniformly. Relative error is |a - n| / max(|a|, |n|, abs_floor).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    # populate the registry
    from . import gradcheck_ops  # noqa: F401

    reports = []
    for name in _select(op_selector):
        rng = np.random.default_rng(seed)
        problem = GRADCHECK_OPS[name](rng)
        reports.append(_check_problem(name, problem, n_samples, eps, tol, rng, abs_floor))
    return reports


def _check_problem(name, problem: GradProblem, n_samples, eps, tol, rng, abs_floor) -> GradCheckReport:
    params = problem.params
    zero_grads(params)
    backward(problem.loss(), params)
    analytic = torch.cat([p.grad.detach().clone() for p in params]).double().numpy()
    zero_grads(params)
    offsets = np.cumsum([0] + [p.values.numel() for p in params])
    total = int(offsets[-1])

    support = np.flatnonzero(analytic)
    n_support = min(len(support), math.ceil(0.75 * n_samples))
    picked = set(rng.choice(support, size=n_support, replace=False).tolist()) if n_support else set()
    while len(picked) < min(n_samples, total):
        picked.add(int(rng.integers(total)))
    coords = sorted(picked)

    failures = []
    max_err = 0.0
    with torch.no_grad():
        for idx in coords:
            k = int(np.searchsorted(offsets, idx, side="right") - 1)
            flat = params[k].values
            j = idx - offsets[k]
            orig = flat[j].item()
            flat[j] = orig + eps
            fp = problem.loss().item()
            flat[j] = orig - eps
            fm = problem.loss().item()
            flat[j] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            max_err = max(max_err, err)
            if err >= tol:
                failures.append((int(idx), a, numeric))
    return GradCheckReport(name, len(coords), max_err, tol, failures)


@register_gradcheck("linear")
def _linear_problem(rng: np.random.Generator) -> GradProblem:
    # positive inputs keep every gradient O(1), so the check is limited by roundoff alone
    w = ParamTensor("w", torch.tensor(rng.normal(size=(20, 12)), dtype=torch.float64))
    x = torch.tensor(rng.uniform(0.5, 1.5, size=(2, 12)), dtype=torch.float64)
    c = torch.tensor(rng.uniform(0.5, 1.5, size=(2, 20)), dtype=torch.float64)
    return GradProblem([w], lambda: ((x @ w.param.T) * c).sum())
