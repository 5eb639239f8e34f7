"""The four-part model: encoder, vector quantizer, gater, and decoder head,
plus codebook anti-collapse maintenance (warmup bypass, encoding cache,
dead-code resampling)."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from . import losses
from .corpus import GPT2_SPLIT_PATTERN
from .errors import ConfigError
from .nn import BlockProjection, TransformerStack

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """All architecture, loss-weight, and schedule hyperparameters.

    Desk-scale defaults; every field can be overridden from a config file or
    the command line.
    """

    d: int = 128
    codebook_size: int = 2048
    max_token_len: int = 10  # w
    chunk_len: int = 16  # S_max
    enc_layers: int = 2
    enc_heads: int = 4
    gater_layers: int = 2
    gater_heads: int = 4

    gate_bias_init: float = -2.0
    gate_logit_bound: float = 8.0

    alpha: float = 0.05  # compression weight
    beta: float = 0.25  # commitment weight
    gamma: float = 1.0  # length-decoding weight
    swap_vq_convention: bool = False

    warmup_steps: int = 100
    cache_capacity: int = 4096
    cache_samples_per_step: int = 64
    resample_interval: int = 200
    dead_code_threshold: float = 0.01
    ema_decay: float = 0.99

    lr: float = 3e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    batch_size: int = 64
    total_steps: int = 1000
    seed: int = 0
    log_interval: int = 50
    ckpt_interval: int = 500

    # None = learned gater; an integer k trains the fixed-length baseline
    # (gater disabled, compression loss dropped).
    fixed_token_len: int | None = None

    pre_split_pattern: str = GPT2_SPLIT_PATTERN
    drop_whitespace_pieces: bool = False
    byte_mode: bool = False

    def validate(self) -> None:
        if self.max_token_len > self.chunk_len:
            raise ConfigError(
                f"max_token_len {self.max_token_len} must be <= chunk_len {self.chunk_len}"
            )
        if self.codebook_size < 2:
            raise ConfigError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be >= 0")
        for name in ("d", "enc_layers", "enc_heads", "gater_layers", "gater_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.fixed_token_len is not None and self.fixed_token_len < 1:
            raise ConfigError(f"fixed_token_len must be >= 1, got {self.fixed_token_len}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg


class Codebook(nn.Module):
    """The quantizer dictionary with usage statistics and an encoding cache."""

    def __init__(
        self,
        size: int,
        d: int,
        ema_decay: float = 0.99,
        cache_capacity: int = 4096,
    ):
        super().__init__()
        if size < 1:
            raise ConfigError(f"codebook size must be >= 1, got {size}")
        self.size = size
        self.d = d
        self.ema_decay = ema_decay
        self.vectors = nn.Parameter(torch.randn(size, d) / math.sqrt(d))
        self.register_buffer("usage", torch.zeros(size))
        self.register_buffer("cache", torch.zeros(cache_capacity, d))
        self.register_buffer("cache_fill", torch.zeros((), dtype=torch.long))
        self.register_buffer("cache_pos", torch.zeros((), dtype=torch.long))

    def lookup(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Nearest codebook entry per position; ties go to the lowest index."""
        flat = z.reshape(-1, self.d)
        v = self.vectors
        dists = (
            (flat * flat).sum(dim=1, keepdim=True)
            + (v * v).sum(dim=1)[None, :]
            - 2.0 * flat @ v.T
        )
        indices = torch.argmin(dists, dim=1)
        raw = self.vectors[indices].reshape(z.shape)
        return indices.reshape(z.shape[:-1]), raw

    def update_usage(self, indices: torch.Tensor, pad_mask: torch.Tensor) -> None:
        counts = torch.bincount(indices[pad_mask].reshape(-1), minlength=self.size)
        self.usage.mul_(self.ema_decay).add_(counts.to(self.usage.dtype), alpha=1 - self.ema_decay)

    def perplexity(self) -> float:
        total = self.usage.sum()
        if total <= 0:
            return 1.0
        p = self.usage / total
        return torch.exp(-(p * torch.log(p.clamp(min=1e-12))).sum()).item()

    def add_to_cache(
        self, z: torch.Tensor, pad_mask: torch.Tensor, generator: torch.Generator, n: int = 64
    ) -> None:
        """Append a random subsample of real-position encodings to the ring buffer."""
        flat = z.detach().reshape(-1, self.d)[pad_mask.reshape(-1)]
        if flat.shape[0] == 0:
            return
        take = min(n, flat.shape[0])
        sel = torch.randperm(flat.shape[0], generator=generator)[:take]
        picked = flat[sel].to(self.cache.dtype)
        cap = self.cache.shape[0]
        pos = int(self.cache_pos.item())
        for row in picked:
            self.cache[pos] = row
            pos = (pos + 1) % cap
        self.cache_pos.fill_(pos)
        self.cache_fill.fill_(min(cap, int(self.cache_fill.item()) + take))

    def _sample_cache(self, n: int, generator: torch.Generator) -> torch.Tensor:
        fill = int(self.cache_fill.item())
        idx = torch.randint(0, fill, (n,), generator=generator)
        return self.cache[idx]

    def init_from_cache(self, generator: torch.Generator) -> bool:
        """Data-dependent (re)initialization from cached encodings."""
        if int(self.cache_fill.item()) == 0:
            log.warning("codebook init from cache skipped: cache is empty")
            return False
        with torch.no_grad():
            self.vectors.copy_(self._sample_cache(self.size, generator).to(self.vectors.dtype))
        self.usage.fill_(1.0)
        return True

    def resample_dead(self, threshold: float, generator: torch.Generator) -> int:
        """Overwrite entries whose usage fell below threshold with cached encodings."""
        dead = self.usage < threshold
        n_dead = int(dead.sum().item())
        if n_dead == 0:
            return 0
        if int(self.cache_fill.item()) == 0:
            log.warning("dead-code resampling skipped: cache is empty")
            return 0
        with torch.no_grad():
            self.vectors[dead] = self._sample_cache(n_dead, generator).to(self.vectors.dtype)
        self.usage[dead] = 1.0
        return n_dead


@dataclass
class ModelOutput:
    z: torch.Tensor  # (B, T, d) encoder output
    z_q: torch.Tensor  # (B, T, d) decoder/gater input (straight-through, or z in bypass)
    z_bar_raw: torch.Tensor  # (B, T, d) codebook rows, no gradient rerouting
    indices: torch.Tensor  # (B, T) long
    gates: torch.Tensor  # (B, T) in [0, 1], 0 at pads
    char_logits: torch.Tensor  # (B, T, w, n_chars)
    length_logits: torch.Tensor  # (B, T, w)


def fixed_gate_rows(pad_mask: torch.Tensor, k: int, dtype=torch.float32) -> torch.Tensor:
    """Gates set to 1 every k positions and at the final real position."""
    if k < 1:
        raise ConfigError(f"fixed gate period must be >= 1, got {k}")
    b, t = pad_mask.shape
    g = torch.zeros(b, t, dtype=dtype, device=pad_mask.device)
    lengths = pad_mask.sum(dim=1)
    for r in range(b):
        n = int(lengths[r].item())
        g[r, k - 1 : n : k] = 1.0
        if n > 0:
            g[r, n - 1] = 1.0
    return g


class GQVAE(nn.Module):
    """Encoder -> quantizer -> gater -> per-position decoder head."""

    def __init__(self, config: TrainConfig, n_chars: int):
        super().__init__()
        config.validate()
        self.config = config
        self.n_chars = n_chars
        d, w = config.d, config.max_token_len
        self.embed = nn.Embedding(n_chars, d)
        self.encoder = TransformerStack(d, config.enc_layers, config.enc_heads, config.chunk_len)
        self.codebook = Codebook(
            config.codebook_size, d, config.ema_decay, config.cache_capacity
        )
        if config.fixed_token_len is None:
            self.gater = TransformerStack(
                d, config.gater_layers, config.gater_heads, config.chunk_len
            )
            self.gate_head = nn.Linear(d, 1)
            # Start with mostly-closed gates so the decoder learns multi-char
            # reconstruction before the gates saturate; a saturated sigmoid
            # receives almost no compression gradient.
            with torch.no_grad():
                self.gate_head.bias.fill_(config.gate_bias_init)
        self.char_head = BlockProjection(d, w, n_chars)
        self.len_head = nn.Linear(d, w)

    def encode(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        if ids.shape[1] > self.config.chunk_len:
            raise ValueError(
                f"sequence length {ids.shape[1]} exceeds chunk_len {self.config.chunk_len}"
            )
        return self.encoder(self.embed(ids), pad_mask)

    def gate(self, z_q: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        if self.config.fixed_token_len is not None:
            return fixed_gate_rows(pad_mask, self.config.fixed_token_len, dtype=z_q.dtype)
        h = self.gater(z_q, pad_mask)
        logits = self.gate_head(h).squeeze(-1)
        # Soft-bound the logits: a saturated sigmoid has an exactly-zero
        # gradient in float32, which would freeze the gates permanently and
        # cut off the compression pressure.
        bound = self.config.gate_logit_bound
        g = torch.sigmoid(bound * torch.tanh(logits / bound))
        return g * pad_mask.to(g.dtype)

    def decode(self, z_q: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-position decoding; each vector alone determines its outputs."""
        return self.char_head(z_q), self.len_head(z_q)

    def forward(
        self, ids: torch.Tensor, pad_mask: torch.Tensor, bypass_quantizer: bool = False
    ) -> ModelOutput:
        z = self.encode(ids, pad_mask)
        indices, raw = self.codebook.lookup(z)
        if self.training:
            self.codebook.update_usage(indices, pad_mask)
        z_q = z if bypass_quantizer else z + (raw - z).detach()
        gates = self.gate(z_q, pad_mask)
        char_logits, length_logits = self.decode(z_q)
        return ModelOutput(
            z=z,
            z_q=z_q,
            z_bar_raw=raw,
            indices=indices,
            gates=gates,
            char_logits=char_logits,
            length_logits=length_logits,
        )


def maintain_codebook(
    model: GQVAE,
    step: int,
    config: TrainConfig,
    z: torch.Tensor,
    pad_mask: torch.Tensor,
    generator: torch.Generator,
) -> None:
    """Per-step codebook upkeep; call once after each optimizer update.

    `step` is the zero-based index of the step that just finished.
    """
    cb = model.codebook
    cb.add_to_cache(z, pad_mask, generator, n=config.cache_samples_per_step)
    if config.warmup_steps > 0 and step + 1 == config.warmup_steps:
        cb.init_from_cache(generator)
    if (
        config.resample_interval > 0
        and step + 1 > config.warmup_steps
        and (step + 1) % config.resample_interval == 0
    ):
        n = cb.resample_dead(config.dead_code_threshold, generator)
        if n:
            log.debug("resampled %d dead codebook entries at step %d", n, step + 1)


def make_frozen_loss(model: GQVAE, ids: torch.Tensor, pad_mask: torch.Tensor):
    """A smooth stand-in for the training loss, for finite-difference checks.

    Every stop-gradient branch of the real loss (quantizer offset, length-loss
    labels and weights, the detached sides of the quantizer terms) is captured
    as a constant from one reference forward pass. The returned closure has
    the same value and the same analytic parameter gradients as the real loss
    at the current parameters, but is differentiable end to end so central
    differences agree with autograd.
    """
    cfg = model.config
    with torch.no_grad():
        z0 = model.encode(ids, pad_mask)
        indices0, raw0 = model.codebook.lookup(z0)
        offset0 = raw0 - z0
        z_q0 = z0 + offset0
        g0 = model.gate(z_q0, pad_mask)
        m0 = losses.compute_masks(g0, cfg.max_token_len)
    mask = pad_mask.to(z0.dtype)
    n_pos = pad_mask.sum().clamp(min=1).to(z0.dtype)

    def loss_fn() -> torch.Tensor:
        z = model.encode(ids, pad_mask)
        z_q = z + offset0
        g = model.gate(z_q, pad_mask)
        char_logits, length_logits = model.decode(z_q)
        m = losses.compute_masks(g, cfg.max_token_len)
        rec = losses.reconstruction_loss(char_logits, ids, m, pad_mask)
        cmp_ = losses.compression_loss(g, pad_mask)
        m_hat = losses.predicted_mask(length_logits)
        len_l = (g0 * ((m_hat - m0) ** 2).mean(dim=-1) * mask).sum() / n_pos
        to_encoder = (((raw0 - z) ** 2).sum(dim=-1) * mask).sum() / n_pos
        cur_rows = model.codebook.vectors[indices0.reshape(-1)].reshape(z0.shape)
        to_codebook = (((cur_rows - z0) ** 2).sum(dim=-1) * mask).sum() / n_pos
        cde, cmt = (
            (to_codebook, to_encoder) if cfg.swap_vq_convention else (to_encoder, to_codebook)
        )
        return losses.total_loss(rec, cmp_, len_l, cde, cmt, cfg.alpha, cfg.beta, cfg.gamma)

    return loss_fn
