"""Small differentiable substrate on top of torch.

torch supplies the tensors and reverse-mode gradients. This module pins down the
handful of forward operations the model relies on (with their error contracts),
an Adam step with explicit state, and a central-difference gradient checker that
is independent of autograd.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import DimensionError, EvaluationError, ParameterError

__all__ = [
    "ParamGroup",
    "AdamState",
    "GradcheckResult",
    "check_finite",
    "matmul",
    "softmax",
    "topk_select",
    "adam_step",
    "finite_diff_gradcheck",
    "param_groups",
]


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise EvaluationError(f"non-finite values in {what}")
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    check_finite(a, "matmul lhs")
    check_finite(b, "matmul rhs")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1, temperature: float = 1.0) -> torch.Tensor:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    return torch.softmax(x / temperature, dim=axis)


def topk_select(logits: torch.Tensor, k: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Pick the ``k`` largest logits along the last axis.

    Ties go to the lower index (stable descending sort). Gates are a softmax over
    the selected logits only, so unselected logits get no gradient from them.

    Returns ``(indices, gates)``, both shaped ``logits.shape[:-1] + (k,)``.
    """
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ParameterError(f"k must lie in [1, {n}], got {k}")
    order = torch.sort(logits.detach(), dim=-1, descending=True, stable=True).indices
    indices = order[..., :k]
    selected = torch.gather(logits, -1, indices)
    gates = torch.softmax(selected, dim=-1)
    return indices, gates


@dataclass
class ParamGroup:
    """A named trainable (or frozen) tensor."""

    name: str
    value: torch.Tensor
    frozen: bool = False

    @property
    def grad(self) -> Optional[torch.Tensor]:
        return self.value.grad


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    lr: float = 1e-3
    beta1: float = 0.6
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ParameterError(f"betas must lie in (0, 1), got ({self.beta1}, {self.beta2})")

    @classmethod
    def for_param(cls, param: ParamGroup, **kwargs) -> "AdamState":
        zeros = torch.zeros_like(param.value, memory_format=torch.contiguous_format)
        return cls(m=zeros, v=zeros.clone(), **kwargs)


def adam_step(param: ParamGroup, state: AdamState) -> Tuple[ParamGroup, AdamState]:
    """Bias-corrected Adam update, applied in place.

    Frozen groups are left untouched and a ``RuntimeWarning`` is emitted.
    """
    if param.frozen:
        warnings.warn(f"adam_step called on frozen parameter {param.name!r}; skipped", RuntimeWarning)
        return param, state
    grad = param.grad
    if grad is None:
        raise ParameterError(f"parameter {param.name!r} has no gradient")
    if state.m.shape != param.value.shape:
        raise DimensionError(f"optimizer state shape {tuple(state.m.shape)} != parameter shape {tuple(param.value.shape)}")
    with torch.no_grad():
        state.step += 1
        state.m.mul_(state.beta1).add_(grad, alpha=1 - state.beta1)
        state.v.mul_(state.beta2).addcmul_(grad, grad, value=1 - state.beta2)
        m_hat = state.m / (1 - state.beta1 ** state.step)
        v_hat = state.v / (1 - state.beta2 ** state.step)
        param.value.sub_(state.lr * m_hat / (v_hat.sqrt() + state.eps))
    return param, state


def param_groups(module: torch.nn.Module, frozen_prefixes: Sequence[str] = ()) -> List[ParamGroup]:
    groups = []
    for name, p in module.named_parameters():
        frozen = (not p.requires_grad) or any(name.startswith(pre) for pre in frozen_prefixes)
        groups.append(ParamGroup(name, p, frozen))
    return groups


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst_param: Optional[str]
    per_param: Dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def finite_diff_gradcheck(
    f: Callable[[], torch.Tensor],
    params: Iterable[ParamGroup],
    epsilon: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
    grad_hook: Optional[Callable[[str, torch.Tensor], torch.Tensor]] = None,
) -> GradcheckResult:
    """Compare autograd gradients of a scalar ``f`` with central differences.

    Frozen groups are skipped. When ``max_entries`` is set, at most that many
    entries per group are probed (drawn without replacement with ``seed``).
    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    ``grad_hook`` lets callers tamper with analytic gradients (negative controls).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ParameterError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    params = [p for p in params if not p.frozen]
    for p in params:
        if p.value.dtype != torch.float64:
            raise ParameterError(f"gradcheck needs float64 parameters; {p.name} is {p.value.dtype}")
        p.value.grad = None

    out = f()
    if out.numel() != 1 or not torch.isfinite(out).all():
        raise EvaluationError("gradcheck objective must be a finite scalar")
    out.backward()
    analytic = {}
    for p in params:
        g = p.value.grad if p.value.grad is not None else torch.zeros_like(p.value)
        g = g.detach().clone()
        if grad_hook is not None:
            g = grad_hook(p.name, g)
        analytic[p.name] = g

    def evaluate() -> float:
        with torch.no_grad():
            val = f()
        v = float(val)
        if not math.isfinite(v):
            raise EvaluationError("objective became non-finite during finite differencing")
        return v

    rng = np.random.default_rng(seed)
    result = GradcheckResult(0.0, None)
    for p in params:
        flat = p.value.data.view(-1)
        n = flat.numel()
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        worst = 0.0
        g_flat = analytic[p.name].view(-1)
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + epsilon
            f_plus = evaluate()
            flat[i] = orig - epsilon
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = g_flat[i].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        result.per_param[p.name] = worst
        result.n_checked += len(idx)
        if worst >= result.max_rel_error:
            result.max_rel_error = worst
            result.worst_param = p.name
    return result
