"""Input and parameter derivatives of scalar fields.

A *field* here is any callable mapping a float64 tensor of points ``(n, 3)``
to values ``(n,)`` built from differentiable torch operations. First and
second derivatives come from torch's reverse-mode engine; the fourth-order
biharmonic term is a finite-difference stencil applied to the AD Laplacian,
so AD nesting never exceeds depth two.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

Field = Callable[[torch.Tensor], torch.Tensor]


class NonFiniteError(FloatingPointError):
    """A derivative or value became NaN/inf; ``where`` names the offending block."""

    def __init__(self, message: str, where: str | None = None):
        super().__init__(message)
        self.where = where


@dataclass(frozen=True)
class Stencil:
    offsets: np.ndarray
    coefficients: np.ndarray
    step: float

    @classmethod
    def laplacian7(cls, h: float) -> "Stencil":
        offs = np.vstack([np.zeros(3), np.eye(3), -np.eye(3)])
        coef = np.array([-6.0, 1, 1, 1, 1, 1, 1])
        return cls(offs * h, coef, float(h))

    def apply(self, values: torch.Tensor) -> torch.Tensor:
        """Combine samples laid out as ``(len(offsets), n)``."""
        c = torch.as_tensor(self.coefficients, dtype=values.dtype)
        return torch.einsum("k,kn->n", c, values) / self.step**2

    def points(self, x: torch.Tensor) -> torch.Tensor:
        """Stencil sample points, shape ``(len(offsets) * n, 3)`` ordered offset-major."""
        offs = torch.as_tensor(self.offsets, dtype=x.dtype)
        return (x[None, :, :] + offs[:, None, :]).reshape(-1, 3)


def _as_points(x) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(x, dtype=torch.float64)
    single = t.dim() == 1
    return t.reshape(-1, 3), single


def _check(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite {what}", where=what)
    return t


def field_gradient(f: Field, x: torch.Tensor, create_graph: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Values and input gradients of ``f`` at points ``x`` (n, 3)."""
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    y = f(x)
    (g,) = torch.autograd.grad(y.sum(), x, create_graph=create_graph)
    return y, g


def field_laplacian(f: Field, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """Sum of the three Hessian-diagonal entries of ``f`` at ``x`` (n, 3).

    Each probe differentiates one gradient component a second time, which
    keeps the cost at three extra reverse sweeps independent of width.
    """
    x = x.detach().requires_grad_(True)
    _, g = field_gradient(f, x, create_graph=True)
    lap = torch.zeros(len(x), dtype=x.dtype)
    for i in range(3):
        (h_i,) = torch.autograd.grad(g[:, i].sum(), x, create_graph=create_graph, retain_graph=True)
        lap = lap + h_i[:, i]
    return lap


def field_biharmonic(f: Field, x: torch.Tensor, h: float, create_graph: bool = False) -> torch.Tensor:
    """7-point finite-difference Laplacian of the AD Laplacian of ``f``."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    stencil = Stencil.laplacian7(h)
    lap = field_laplacian(f, stencil.points(x.detach()), create_graph=create_graph)
    return stencil.apply(lap.reshape(len(stencil.offsets), -1))


# ------------------------------------------------------------ point-wise API


def grad_input(f: Field, x) -> np.ndarray:
    xt, single = _as_points(x)
    _, g = field_gradient(f, xt)
    g = _check(g.detach(), "input gradient").numpy()
    return g[0] if single else g


def laplacian_input(f: Field, x) -> np.ndarray | float:
    xt, single = _as_points(x)
    lap = _check(field_laplacian(f, xt).detach(), "laplacian").numpy()
    return float(lap[0]) if single else lap


def biharmonic_fdm(f: Field, x, h: float) -> np.ndarray | float:
    xt, single = _as_points(x)
    val = _check(field_biharmonic(f, xt, h).detach(), "biharmonic").numpy()
    return float(val[0]) if single else val


def laplacian_fdm(f: Field, x, h: float = 1e-3) -> np.ndarray | float:
    """Plain 7-point Laplacian of field values; used as an independent check."""
    xt, single = _as_points(x)
    stencil = Stencil.laplacian7(h)
    with torch.no_grad():
        vals = f(stencil.points(xt)).reshape(len(stencil.offsets), -1)
    out = stencil.apply(vals).numpy()
    return float(out[0]) if single else out


def grad_params(loss: torch.Tensor, params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
                retain_graph: bool = False) -> dict[str, torch.Tensor]:
    """Gradient of a scalar ``loss`` for each named parameter.

    Parameters the loss does not depend on get a zero gradient.
    """
    items = list(params.items() if isinstance(params, Mapping) else params)
    grads = torch.autograd.grad(loss, [p for _, p in items], allow_unused=True, retain_graph=retain_graph)
    out = {}
    for (name, p), g in zip(items, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in parameter block {name!r}", where=name)
        out[name] = g
    return out
