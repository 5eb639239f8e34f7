"""Loss terms tying gates, masks, reconstruction, and the quantizer together.

All terms are normalized per non-pad position so the loss weights stay
comparable across batch shapes. Shapes follow the model: batches are (B, T),
decoder outputs are (B, T, w, n_chars) for characters and (B, T, w) for the
length head, where slot i of a position t predicts the character at t - i.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NumericError


@dataclass
class LossBreakdown:
    """Scalar values of every loss component for one step."""

    recon: float
    compression: float
    length: float
    codebook: float
    commitment: float
    total: float
    gate_mean: float = 0.0
    codebook_perplexity: float = 0.0

    def to_json_line(self, step: int) -> str:
        return json.dumps(
            {
                "step": step,
                "recon": self.recon,
                "cmp": self.compression,
                "len": self.length,
                "cde": self.codebook,
                "cmt": self.commitment,
                "total": self.total,
                "gate_mean": self.gate_mean,
                "codebook_perplexity": self.codebook_perplexity,
            }
        )


def compute_masks(g: torch.Tensor, w: int) -> torch.Tensor:
    """Reconstruction mask from gate history.

    m[..., t, 0] = 1 and m[..., t, i] = prod_{j=1..i} (1 - g[..., t-j]) for
    i <= t. For i > t the mask is 0 (a virtual gate of 1 sits before the
    first position).
    """
    *lead, t_len = g.shape
    one_minus = 1.0 - g
    m = torch.zeros(*lead, t_len, w, dtype=g.dtype, device=g.device)
    m[..., 0] = 1.0
    # Shifting in zeros implements the virtual boundary gate: any factor that
    # would reach before position 0 kills the product.
    padded = F.pad(one_minus, (1, 0), value=0.0)[..., :t_len]  # (1 - g[t-1]) at t
    running = torch.ones(*lead, t_len, dtype=g.dtype, device=g.device)
    shifted = padded
    for i in range(1, w):
        running = running * shifted
        m[..., i] = running
        shifted = F.pad(shifted, (1, 0), value=0.0)[..., :t_len]
    return m


def reconstruction_loss(
    char_logits: torch.Tensor,
    ids: torch.Tensor,
    m: torch.Tensor,
    pad_mask: torch.Tensor,
) -> torch.Tensor:
    """Mask-weighted cross-entropy of each slot against the character it names."""
    b, t, w, n_chars = char_logits.shape
    device = ids.device
    pos = torch.arange(t, device=device)
    offs = torch.arange(w, device=device)
    src = pos[:, None] - offs[None, :]  # (T, w): index of c_{t-i}
    valid = (src >= 0) & pad_mask[:, :, None]  # (B, T, w)
    src_clamped = src.clamp(min=0)
    targets = ids[:, src_clamped.reshape(-1)].reshape(b, t, w)

    ce = F.cross_entropy(
        char_logits.reshape(-1, n_chars), targets.reshape(-1), reduction="none"
    ).reshape(b, t, w)
    weighted = m * ce * valid.to(ce.dtype)
    n_pos = pad_mask.sum().clamp(min=1).to(ce.dtype)
    return weighted.sum() / n_pos


def compression_loss(g: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
    """Mean gate value over non-pad positions."""
    n_pos = pad_mask.sum().clamp(min=1).to(g.dtype)
    return (g * pad_mask.to(g.dtype)).sum() / n_pos


def predicted_mask(length_logits: torch.Tensor) -> torch.Tensor:
    """Monotone mask proxy from the length head.

    exp-normalize, then cumulative-sum from the last slot back to the first and
    divide by the running maximum (slot 0), so the first slot is exactly 1 and
    values never increase along the slot axis.
    """
    e = torch.exp(length_logits - length_logits.amin(dim=-1, keepdim=True))
    s = torch.flip(torch.cumsum(torch.flip(e, dims=(-1,)), dim=-1), dims=(-1,))
    return s / s.amax(dim=-1, keepdim=True)


def decode_lengths(length_logits: torch.Tensor) -> torch.Tensor:
    """Token length = number of predicted-mask slots above 0.5 (always >= 1)."""
    return (predicted_mask(length_logits) > 0.5).sum(dim=-1).clamp(min=1)


def length_loss(
    length_logits: torch.Tensor,
    m: torch.Tensor,
    g: torch.Tensor,
    pad_mask: torch.Tensor,
) -> torch.Tensor:
    """Gate-weighted MSE between the predicted and the true mask.

    Both the gate weights and the mask targets are detached: gradients flow
    only into the length head.
    """
    m_hat = predicted_mask(length_logits)
    per_pos = ((m_hat - m.detach()) ** 2).mean(dim=-1)
    weighted = g.detach() * per_pos * pad_mask.to(per_pos.dtype)
    n_pos = pad_mask.sum().clamp(min=1).to(per_pos.dtype)
    return weighted.sum() / n_pos


def vq_losses(
    z: torch.Tensor,
    z_bar: torch.Tensor,
    pad_mask: torch.Tensor,
    swap_convention: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Codebook and commitment terms.

    As written, the codebook term stops the gradient on the quantized side
    (reaching the encoder) and the commitment term stops it on the encoder
    side (reaching the codebook). `swap_convention` exchanges the placement
    to the more common form.
    """
    if z.shape != z_bar.shape:
        raise ValueError(f"shape mismatch: z {tuple(z.shape)} vs z_bar {tuple(z_bar.shape)}")
    mask = pad_mask.to(z.dtype)
    n_pos = pad_mask.sum().clamp(min=1).to(z.dtype)

    def masked_mean(sq: torch.Tensor) -> torch.Tensor:
        return (sq.sum(dim=-1) * mask).sum() / n_pos

    to_encoder = masked_mean((z_bar.detach() - z) ** 2)
    to_codebook = masked_mean((z_bar - z.detach()) ** 2)
    if swap_convention:
        return to_codebook, to_encoder
    return to_encoder, to_codebook


def total_loss(
    recon: torch.Tensor,
    compression: torch.Tensor,
    length: torch.Tensor,
    codebook: torch.Tensor,
    commitment: torch.Tensor,
    alpha: float,
    beta: float,
    gamma: float,
) -> torch.Tensor:
    parts = {
        "recon": recon,
        "compression": compression,
        "length": length,
        "codebook": codebook,
        "commitment": commitment,
    }
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise NumericError(f"loss component {name!r} is non-finite: {value.item()}")
    return recon + gamma * length + alpha * compression + codebook + beta * commitment


def breakdown(
    recon: torch.Tensor,
    compression: torch.Tensor,
    length: torch.Tensor,
    codebook: torch.Tensor,
    commitment: torch.Tensor,
    total: torch.Tensor,
    gate_mean: float = 0.0,
    codebook_perplexity: float = 0.0,
) -> LossBreakdown:
    out = LossBreakdown(
        recon=recon.item(),
        compression=compression.item(),
        length=length.item(),
        codebook=codebook.item(),
        commitment=commitment.item(),
        total=total.item(),
        gate_mean=gate_mean,
        codebook_perplexity=codebook_perplexity,
    )
    if not math.isfinite(out.total):
        raise NumericError("total loss is non-finite")
    return out
