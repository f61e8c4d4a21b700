"""Differentiable array primitives and the Adam optimizer.

Arrays are ``torch.Tensor`` objects in float32; reverse-mode gradients come
from torch autograd. The functions here add the shape checks, finiteness
checks and float64 loss accumulation the rest of the package relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import torch
import torch.nn.functional as F

from .errors import ContractError, DimensionError, NumericError

Parameter = torch.nn.Parameter

LAYER_NORM_EPS = 1e-5


def as_array(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=torch.float32)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"non-finite values in {where}")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return torch.matmul(a, b)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise DimensionError(str(exc)) from None
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise DimensionError(str(exc)) from None
    return a * b


def softmax(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis; torch's kernel shifts by the row max before exponentiating."""
    return torch.softmax(x, dim=-1)


def layer_norm(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor, eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    if scale.shape != x.shape[-1:] or shift.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm affine params must have shape {tuple(x.shape[-1:])}")
    return F.layer_norm(x, x.shape[-1:], scale, shift, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact erf form, not the tanh approximation
    return F.gelu(x)


def mean(x: torch.Tensor, axis: Optional[int] = None) -> torch.Tensor:
    """Mean accumulated in float64, returned in the input dtype."""
    acc = x.to(torch.float64)
    out = acc.mean() if axis is None else acc.mean(dim=axis)
    return out.to(x.dtype)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mse operands differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    d = a.to(torch.float64) - b.to(torch.float64)
    return (d * d).mean().to(a.dtype)


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable parameter."""
    if loss.numel() != 1 or loss.dim() != 0:
        raise ContractError(f"backward needs a scalar root, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.backward()


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad.zero_()


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.m.shape != self.v.shape:
            raise DimensionError("Adam moment shapes differ")

    @classmethod
    def fresh(cls, param: torch.Tensor, **hyper) -> "AdamState":
        return cls(torch.zeros_like(param, dtype=torch.float32),
                   torch.zeros_like(param, dtype=torch.float32), **hyper)


@torch.no_grad()
def adam_step(param: torch.Tensor, state: AdamState) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    if param.grad is None:
        raise ContractError("adam_step called before gradients were populated")
    g = param.grad
    if g.shape != param.shape or state.m.shape != param.shape:
        raise DimensionError("parameter, gradient and moment shapes must agree")
    state.step_count += 1
    t = state.step_count
    state.m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
    state.v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
    m_hat = state.m / (1.0 - state.beta1 ** t)
    v_hat = state.v / (1.0 - state.beta2 ** t)
    update = m_hat / (v_hat.sqrt() + state.eps)
    if state.weight_decay:
        update = update + state.weight_decay * param
    param.sub_(state.lr * update)


@dataclass
class Adam:
    """Adam over a fixed, named set of parameters.

    Holds one :class:`AdamState` per parameter so moments and step counts
    can be written into checkpoints and restored exactly.
    """

    params: Dict[str, torch.Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    states: Dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if name not in self.states:
                self.states[name] = AdamState.fresh(
                    p, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                    eps=self.eps, weight_decay=self.weight_decay)

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        for s in self.states.values():
            s.lr = lr

    def zero_grad(self) -> None:
        zero_grad(self.params.values())

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p, self.states[name])

    @property
    def step_count(self) -> int:
        return max((s.step_count for s in self.states.values()), default=0)

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        out = {}
        for name, s in self.states.items():
            out[f"adam.m.{name}"] = s.m
            out[f"adam.v.{name}"] = s.v
        return out

    def state_meta(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step_counts": {k: s.step_count for k, s in self.states.items()},
        }

    def load_state(self, meta: dict, tensors: Dict[str, torch.Tensor]) -> None:
        self.lr = meta["lr"]
        self.weight_decay = meta["weight_decay"]
        for name, s in self.states.items():
            s.m.copy_(tensors[f"adam.m.{name}"])
            s.v.copy_(tensors[f"adam.v.{name}"])
            s.step_count = int(meta["step_counts"][name])
            s.lr = meta["lr"]
            s.beta1, s.beta2, s.eps = meta["beta1"], meta["beta2"], meta["eps"]
            s.weight_decay = meta["weight_decay"]


def central_difference(fn, x: torch.Tensor, index: Tuple[int, ...], h: float = 1e-3) -> float:
    """Central finite difference of scalar ``fn()`` w.r.t. ``x[index]`` (x mutated then restored)."""
    with torch.no_grad():
        orig = x[index].item()
        x[index] = orig + h
        f_plus = float(fn())
        x[index] = orig - h
        f_minus = float(fn())
        x[index] = orig
    return (f_plus - f_minus) / (2.0 * h)


def set_deterministic(threads: int = 1) -> None:
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)
