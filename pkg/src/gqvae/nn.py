"""Differentiable substrate: seeding, transformer blocks, and a finite-difference
gradient verifier.

Forward/backward math is delegated to torch; this module adds the pieces with
package-specific contracts (deterministic seeding, the block projection used by
the decoder head, and `grad_check`).
"""

from __future__ import annotations

from typing import Callable

import torch
from torch import nn

from .errors import NumericError


def seed_all(seed: int) -> None:
    """Seed torch's global RNG (parameter init, dropout-free graphs)."""
    torch.manual_seed(seed)


def make_generator(seed: int) -> torch.Generator:
    """A self-contained deterministic random stream."""
    return torch.Generator().manual_seed(seed)


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Identity forward value, zero gradient."""
    return x.detach()


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float | None = None,
    denom_floor: float = 1.0,
) -> float:
    """Max relative error between autograd and central finite differences.

    The error per coordinate is |a - n| / max(denom_floor, |a| + |n|), so
    coordinates whose gradients are tiny are measured on an absolute scale.
    `f` must be differentiable at x; stop-gradient branches inside `f` must be
    materialized as constants by the caller (finite differences cannot see
    detach semantics).
    """
    if eps is None:
        eps = 1e-2 if x.dtype == torch.float32 else 1e-5
    x0 = x.detach().clone().requires_grad_(True)
    y = f(x0)
    if y.dim() != 0:
        raise ValueError(f"grad_check needs a scalar-valued f, got shape {tuple(y.shape)}")
    if not torch.isfinite(y):
        raise NumericError(f"f(x) is non-finite: {y.item()}")
    (analytic,) = torch.autograd.grad(y, x0, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)

    flat = x.detach().clone().reshape(-1)
    numeric = torch.zeros_like(flat)
    shape = x.shape
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = f(flat.reshape(shape)).item()
            flat[i] = orig - eps
            f_minus = f(flat.reshape(shape)).item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    a = analytic.detach().reshape(-1)
    denom = torch.clamp(a.abs() + numeric.abs(), min=denom_floor)
    return ((a - numeric).abs() / denom).max().item()


def grad_check_module(
    loss_fn: Callable[[], torch.Tensor],
    module: nn.Module,
    eps: float | None = None,
    denom_floor: float = 1.0,
) -> float:
    """`grad_check` over every parameter of a module.

    `loss_fn` re-evaluates the scalar loss from the module's current parameter
    values. Analytic gradients come from one backward pass; numeric ones from
    central differences applied to each parameter coordinate in place.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    if eps is None:
        eps = 1e-2 if params[0].dtype == torch.float32 else 1e-5

    for p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError(f"loss is non-finite: {loss.item()}")
    loss.backward()
    analytic = torch.cat(
        [
            (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
            for p in params
        ]
    )

    numeric = torch.zeros_like(analytic)
    offset = 0
    with torch.no_grad():
        for p in params:
            flat = p.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = loss_fn().item()
                flat[i] = orig - eps
                f_minus = loss_fn().item()
                flat[i] = orig
                numeric[offset + i] = (f_plus - f_minus) / (2.0 * eps)
            offset += flat.numel()

    denom = torch.clamp(analytic.abs() + numeric.abs(), min=denom_floor)
    return ((analytic - numeric).abs() / denom).max().item()


class BlockProjection(nn.Module):
    """Projects a d-vector to `width` output positions of `channels` each.

    Equivalent to a stride-`width` transposed convolution over a length-1
    input: a d -> width * channels affine map reshaped to (width, channels).
    """

    def __init__(self, d: int, width: int, channels: int):
        super().__init__()
        self.width = width
        self.channels = channels
        self.proj = nn.Linear(d, width * channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.proj(x)
        return out.reshape(*x.shape[:-1], self.width, self.channels)


class TransformerBlock(nn.Module):
    """Pre-norm bidirectional self-attention block."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(
        self,
        x: torch.Tensor,
        key_padding_mask: torch.Tensor | None = None,
        need_weights: bool = False,
    ):
        h = self.ln1(x)
        attn_out, weights = self.attn(
            h, h, h, key_padding_mask=key_padding_mask, need_weights=need_weights
        )
        x = x + attn_out
        x = x + self.mlp(self.ln2(x))
        return (x, weights) if need_weights else x


class TransformerStack(nn.Module):
    """Stack of bidirectional blocks with learned absolute position embeddings."""

    def __init__(self, d: int, layers: int, heads: int, max_len: int):
        super().__init__()
        self.pos = nn.Embedding(max_len, d)
        self.blocks = nn.ModuleList(TransformerBlock(d, heads) for _ in range(layers))
        self.ln_out = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        # pad_mask: True = real position; attention ignores padded keys.
        t = x.shape[1]
        positions = torch.arange(t, device=x.device)
        x = x + self.pos(positions)[None, :, :]
        kpm = None if pad_mask is None else ~pad_mask
        for block in self.blocks:
            x = block(x, key_padding_mask=kpm)
        return self.ln_out(x)


def flat_parameters(module: nn.Module) -> torch.Tensor:
    """All parameters concatenated into one vector (detached copy)."""
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def load_flat_parameters(module: nn.Module, vec: torch.Tensor) -> None:
    """Write a flat vector back into a module's parameters in place."""
    expected = sum(p.numel() for p in module.parameters())
    if vec.numel() != expected:
        raise ValueError(f"parameter vector length {vec.numel()} != expected {expected}")
    offset = 0
    with torch.no_grad():
        for p in module.parameters():
            n = p.numel()
            p.copy_(vec[offset : offset + n].reshape(p.shape))
            offset += n
