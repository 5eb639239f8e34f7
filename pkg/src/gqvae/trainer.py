"""Optimization loop with logging, checkpointing, and codebook maintenance."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import losses
from .corpus import Batch, CharVocab, load_corpus, make_chunks
from .errors import CheckpointError, CorpusError, NumericError
from .model import GQVAE, ModelOutput, TrainConfig, maintain_codebook
from .nn import make_generator, seed_all

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(
        json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]


@dataclass
class TrainState:
    config: TrainConfig
    model: GQVAE
    vocab: CharVocab
    optimizer: torch.optim.Optimizer
    maint_generator: torch.Generator
    step: int = 0
    batches_consumed: int = 0
    best_loss: float = math.inf


def init_state(config: TrainConfig, vocab: CharVocab) -> TrainState:
    """Fresh model, optimizer, and random streams; fully determined by seed."""
    config.validate()
    seed_all(config.seed)
    model = GQVAE(config, vocab.size)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    return TrainState(
        config=config,
        model=model,
        vocab=vocab,
        optimizer=optimizer,
        maint_generator=make_generator(config.seed + 2),
    )


def compute_step_losses(
    out: ModelOutput, ids: torch.Tensor, pad_mask: torch.Tensor, config: TrainConfig
) -> tuple[torch.Tensor, losses.LossBreakdown]:
    m = losses.compute_masks(out.gates, config.max_token_len)
    rec = losses.reconstruction_loss(out.char_logits, ids, m, pad_mask)
    if config.fixed_token_len is None:
        cmp_ = losses.compression_loss(out.gates, pad_mask)
        alpha = config.alpha
    else:
        # Gates are hard-set constants: the compression pressure is meaningless.
        cmp_ = torch.zeros((), dtype=rec.dtype)
        alpha = 0.0
    len_l = losses.length_loss(out.length_logits, m, out.gates, pad_mask)
    cde, cmt = losses.vq_losses(
        out.z, out.z_bar_raw, pad_mask, swap_convention=config.swap_vq_convention
    )
    total = losses.total_loss(rec, cmp_, len_l, cde, cmt, alpha, config.beta, config.gamma)
    return total, losses.breakdown(rec, cmp_, len_l, cde, cmt, total)


def train_step(state: TrainState, batch: Batch) -> losses.LossBreakdown:
    """One forward/backward/update plus codebook maintenance."""
    cfg = state.config
    model = state.model
    model.train()
    bypass = state.step < cfg.warmup_steps
    out = model(batch.ids, batch.pad_mask, bypass_quantizer=bypass)
    try:
        total, bd = compute_step_losses(out, batch.ids, batch.pad_mask, cfg)
    except NumericError as exc:
        raise NumericError(f"at step {state.step}: {exc}") from exc

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    maintain_codebook(model, state.step, cfg, out.z, batch.pad_mask, state.maint_generator)

    gate_mean = (
        (out.gates * batch.pad_mask).sum() / batch.pad_mask.sum().clamp(min=1)
    ).item()
    bd.gate_mean = gate_mean
    bd.codebook_perplexity = model.codebook.perplexity()
    state.step += 1
    state.best_loss = min(state.best_loss, bd.total)
    return bd


def _resolve_corpus(corpus) -> list[str]:
    if isinstance(corpus, (str, Path)):
        return load_corpus(corpus)
    return list(corpus)


def _to_byte_chars(texts: list[str]) -> list[str]:
    # Byte mode: one latin-1 "character" per UTF-8 byte.
    return [t.encode("utf-8").decode("latin-1") for t in texts]


def prepare_data(config: TrainConfig, corpus) -> tuple[CharVocab, list]:
    texts = _resolve_corpus(corpus)
    if config.byte_mode:
        texts = _to_byte_chars(texts)
    if not any(texts):
        raise CorpusError("corpus is empty")
    vocab = CharVocab.build(texts)
    chunks = make_chunks(
        texts,
        vocab,
        config.chunk_len,
        pattern=config.pre_split_pattern,
        drop_whitespace=config.drop_whitespace_pieces,
    )
    if not chunks:
        raise CorpusError("corpus produced no chunks")
    return vocab, chunks


def _epoch_seed(base_seed: int, epoch: int) -> int:
    return (base_seed * 1_000_003 + 7919 * epoch + 1) % (2**31 - 1)


def _batches(state: TrainState, chunks):
    """Endless deterministic stream: a fresh shuffle per pass over the corpus.

    Position in the stream is a pure function of (seed, batches_consumed), so
    a resumed run continues exactly where the interrupted one stopped.
    """
    from .corpus import batch as make_batches

    cfg = state.config
    per_epoch = max(1, -(-len(chunks) // cfg.batch_size))
    while True:
        epoch = state.batches_consumed // per_epoch
        offset = state.batches_consumed % per_epoch
        seed = _epoch_seed(cfg.seed, epoch)
        for i, b in enumerate(
            make_batches(chunks, cfg.batch_size, state.vocab, cfg.chunk_len, seed=seed)
        ):
            if i < offset:
                continue
            yield b


def fit(
    config: TrainConfig,
    corpus,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
    chunks=None,
) -> tuple[TrainState, list[losses.LossBreakdown]]:
    """Run `total_steps` of training, logging and checkpointing periodically.

    Pass an existing `state` (e.g. from `load_checkpoint`) to resume; metrics
    continue from the saved step.
    """
    if state is None:
        vocab, chunks = prepare_data(config, corpus)
        state = init_state(config, vocab)
    elif chunks is None:
        _, chunks = prepare_data(state.config, corpus)

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_file = (out_path / "metrics.jsonl").open("a", encoding="utf-8")

    cfg = state.config
    history: list[losses.LossBreakdown] = []
    try:
        stream = _batches(state, chunks)
        while state.step < cfg.total_steps:
            b = next(stream)
            state.batches_consumed += 1
            bd = train_step(state, b)
            history.append(bd)
            done = state.step  # 1-based count of completed steps
            if cfg.log_interval > 0 and done % cfg.log_interval == 0:
                line = bd.to_json_line(done)
                log.info("%s", line)
                if metrics_file is not None:
                    metrics_file.write(line + "\n")
                    metrics_file.flush()
            if (
                out_path is not None
                and cfg.ckpt_interval > 0
                and done % cfg.ckpt_interval == 0
            ):
                save_checkpoint(state, out_path / f"checkpoint_{done:07d}.pt")
        if out_path is not None:
            save_checkpoint(state, out_path / "checkpoint_final.pt")
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return state, history


def fit_multi_seed(
    config: TrainConfig,
    corpus,
    seeds: list[int],
    probe_steps: int,
    out_dir: str | Path | None = None,
) -> tuple[TrainState, list[losses.LossBreakdown]]:
    """Probe several seeds briefly, then train the best one to completion.

    Training runs are sensitive to initialization; the probe picks the seed
    with the lowest total loss after `probe_steps` and continues it.
    """
    vocab, chunks = prepare_data(config, corpus)
    best: tuple[float, TrainState] | None = None
    for seed in seeds:
        probe_cfg = TrainConfig.from_dict({**config.to_dict(), "seed": seed})
        probe_cfg.total_steps = min(probe_steps, config.total_steps)
        st = init_state(probe_cfg, vocab)
        st, hist = fit(probe_cfg, corpus, state=st, chunks=chunks)
        score = hist[-1].total if hist else math.inf
        log.info("seed %d probe loss %.4f", seed, score)
        if best is None or score < best[0]:
            best = (score, st)
    assert best is not None
    state = best[1]
    state.config.total_steps = config.total_steps
    return fit(state.config, corpus, out_dir=out_dir, state=state, chunks=chunks)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "config_hash": config_hash(state.config),
        "vocab": state.vocab.to_json(),
        "step": state.step,
        "batches_consumed": state.batches_consumed,
        "best_loss": state.best_loss,
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "maint_rng": state.maint_generator.get_state(),
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path, expected_config: TrainConfig | None = None) -> TrainState:
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    for key in ("version", "config", "vocab", "step", "model_state", "optimizer_state"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} is missing field {key!r}")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload['version']} != supported {CHECKPOINT_VERSION}"
        )
    config = TrainConfig.from_dict(payload["config"])
    if expected_config is not None and config_hash(config) != config_hash(expected_config):
        raise CheckpointError("checkpoint config_hash does not match the expected config")
    vocab = CharVocab.from_json(payload["vocab"])
    model = GQVAE(config, vocab.size)
    model.load_state_dict(payload["model_state"])
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    optimizer.load_state_dict(payload["optimizer_state"])
    torch.set_rng_state(payload["torch_rng"])
    maint_gen = torch.Generator()
    maint_gen.set_state(payload["maint_rng"])
    return TrainState(
        config=config,
        model=model,
        vocab=vocab,
        optimizer=optimizer,
        maint_generator=maint_gen,
        step=payload["step"],
        batches_consumed=payload.get("batches_consumed", 0),
        best_loss=payload["best_loss"],
    )
