"""Masked-LM domain pretraining with layer-wise LR decay and EWC anchoring."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import LayeredEncoder, Vocab, pad_batch

logger = logging.getLogger(__name__)

STRATEGIES = ("SLR", "LRD", "EWC", "EWC_LRD")

# replacement codes recorded per selected position
REPLACE_MASK, REPLACE_RANDOM, REPLACE_KEEP = 1, 2, 3


@dataclass(frozen=True)
class PretrainConfig:
    strategy: str = "EWC_LRD"
    slr_lr: float = 5e-5
    lrd_head_lr: float = 5e-4
    lrd_factor: float = 2.6
    lrd_mode: str = "geometric"
    mask_prob: float = 0.15
    batch_size: int = 64
    epochs: int = 1
    ewc_lambda: float = 0.1
    fisher_samples: int = 8
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0 < self.mask_prob < 1:
            raise ValueError("mask_prob must lie in (0, 1)")
        if self.lrd_factor <= 1:
            raise ValueError("lrd_factor must be > 1")
        if self.ewc_lambda < 0:
            raise ValueError("ewc_lambda must be >= 0")
        if self.lrd_mode not in ("geometric", "linear"):
            raise ValueError("lrd_mode must be 'geometric' or 'linear'")

    @property
    def uses_ewc(self) -> bool:
        return self.strategy in ("EWC", "EWC_LRD")

    @property
    def uses_lrd(self) -> bool:
        return self.strategy in ("LRD", "EWC_LRD")


@dataclass
class MaskedBatch:
    input_ids: np.ndarray       # (B, T) after replacement
    mask_positions: np.ndarray  # (B, T) bool, positions that carry an MLM target
    original_ids: np.ndarray    # (B, T) ids before replacement
    replacement: np.ndarray     # (B, T) 0 where unselected, else REPLACE_* code

    @property
    def n_masked(self) -> int:
        return int(self.mask_positions.sum())


def _as_2d(token_ids) -> np.ndarray:
    if isinstance(token_ids, torch.Tensor):
        token_ids = token_ids.numpy()
    if isinstance(token_ids, np.ndarray):
        return np.atleast_2d(token_ids).astype(np.int64)
    seqs = list(token_ids)
    if seqs and np.ndim(seqs[0]) == 0:
        seqs = [seqs]
    return pad_batch(seqs).numpy()


def mlm_mask(token_ids, p: float, rng: np.random.Generator, vocab: Vocab) -> MaskedBatch:
    """Select each eligible position with probability ``p``; replace 80% by
    [MASK], 10% by a random ordinary token, keep 10% unchanged."""
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    ids = _as_2d(token_ids)
    eligible = ~np.isin(ids, list(vocab.never_masked))
    selected = (rng.random(ids.shape) < p) & eligible
    u = rng.random(ids.shape)
    n_ordinary = len(vocab) - vocab.n_special
    if n_ordinary > 0:
        random_ids = rng.integers(vocab.n_special, len(vocab), size=ids.shape)
    else:
        random_ids = np.full(ids.shape, vocab.mask_id)

    replacement = np.zeros(ids.shape, dtype=np.int8)
    replacement[selected & (u < 0.8)] = REPLACE_MASK
    replacement[selected & (u >= 0.8) & (u < 0.9)] = REPLACE_RANDOM
    replacement[selected & (u >= 0.9)] = REPLACE_KEEP

    out = ids.copy()
    out[replacement == REPLACE_MASK] = vocab.mask_id
    rand = replacement == REPLACE_RANDOM
    out[rand] = random_ids[rand]
    return MaskedBatch(input_ids=out, mask_positions=selected, original_ids=ids, replacement=replacement)


def mlm_loss(model: LayeredEncoder, batch: MaskedBatch) -> torch.Tensor:
    """Mean cross-entropy of the LM head over masked positions (0 if none)."""
    hidden, _ = model(torch.as_tensor(batch.input_ids))
    logits = model.lm_logits(hidden)
    mask = torch.as_tensor(batch.mask_positions)
    if not mask.any():
        return logits.sum() * 0.0
    targets = torch.as_tensor(batch.original_ids)[mask]
    return F.cross_entropy(logits[mask], targets)


def layer_lr_schedule(n_layers: int, head_lr: float, factor: float, mode: str = "geometric") -> list[float]:
    """Per-layer rates, outermost first.

    ``geometric``: each layer inward is divided by ``factor``.
    ``linear``: constant decrements between the same two endpoints.
    """
    if n_layers < 1 or factor < 1 or head_lr <= 0:
        raise ValueError("need n_layers >= 1, factor >= 1, head_lr > 0")
    if mode == "geometric":
        rates = [head_lr]
        for _ in range(n_layers - 1):
            rates.append(rates[-1] / factor)
        return rates
    if mode == "linear":
        if n_layers == 1:
            return [head_lr]
        low = head_lr / factor ** (n_layers - 1)
        step = (head_lr - low) / (n_layers - 1)
        return [head_lr - i * step for i in range(n_layers)]
    raise ValueError(f"unknown schedule mode {mode!r}")


@dataclass
class FisherDiagonal:
    fisher: dict[str, torch.Tensor]
    anchor: dict[str, torch.Tensor]

    @classmethod
    def zeros_like(cls, model: nn.Module) -> "FisherDiagonal":
        return cls(
            fisher={n: torch.zeros_like(p) for n, p in model.named_parameters()},
            anchor={n: p.detach().clone() for n, p in model.named_parameters()},
        )


AnchorBatch = Union[MaskedBatch, Sequence[Sequence[int]]]


def estimate_fisher(
    model: LayeredEncoder,
    anchor_data: Sequence[AnchorBatch],
    n: int,
    rng: np.random.Generator,
    mask_prob: float = 0.15,
    loss_fn: Callable[[LayeredEncoder, MaskedBatch], torch.Tensor] = mlm_loss,
) -> FisherDiagonal:
    """Mean squared MLM gradient over ``n`` batches drawn from ``anchor_data``.

    Items that are already a :class:`MaskedBatch` are used as given; raw
    token batches are masked with ``rng``.  Parameters at call time become
    the anchor.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not anchor_data:
        raise ValueError("anchor data for Fisher estimation is empty")
    result = FisherDiagonal.zeros_like(model)
    params = dict(model.named_parameters())
    for _ in range(n):
        item = anchor_data[int(rng.integers(len(anchor_data)))] if len(anchor_data) > 1 else anchor_data[0]
        batch = item if isinstance(item, MaskedBatch) else mlm_mask(item, mask_prob, rng, model.vocab)
        model.zero_grad(set_to_none=True)
        loss_fn(model, batch).backward()
        for name, p in params.items():
            if p.grad is not None:
                result.fisher[name] += p.grad.detach() ** 2 / n
    model.zero_grad(set_to_none=True)
    return result


def ewc_penalty(theta: Union[nn.Module, dict[str, torch.Tensor]], fisher: FisherDiagonal, lam: float) -> torch.Tensor:
    """(lam / 2) * sum_i F_i (theta_i - theta*_i)^2."""
    named = dict(theta.named_parameters()) if isinstance(theta, nn.Module) else theta
    if set(named) != set(fisher.fisher):
        raise ValueError("parameter names do not match the Fisher diagonal")
    total = None
    for name, p in named.items():
        f, a = fisher.fisher[name], fisher.anchor[name]
        if f.shape != p.shape or a.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(f.shape)}")
        term = (f * (p - a) ** 2).sum()
        total = term if total is None else total + term
    return 0.5 * lam * total


def param_groups(model: LayeredEncoder, cfg: PretrainConfig) -> list[dict]:
    layers = model.layers()
    if cfg.uses_lrd:
        rates = layer_lr_schedule(len(layers), cfg.lrd_head_lr, cfg.lrd_factor, cfg.lrd_mode)
        rates = rates[::-1]  # innermost first, aligned with layers()
    else:
        rates = [cfg.slr_lr] * len(layers)
    return [
        {"params": list(module.parameters()), "lr": lr, "name": name}
        for (name, module), lr in zip(layers, rates)
    ]


def make_batches(corpus: Sequence[Sequence[int]], batch_size: int, rng: Optional[np.random.Generator] = None) -> list[list[Sequence[int]]]:
    order = np.arange(len(corpus))
    if rng is not None:
        rng.shuffle(order)
    return [[corpus[i] for i in order[s: s + batch_size]] for s in range(0, len(order), batch_size)]


def encode_corpus(sentences: Iterable[str], vocab: Vocab, max_len: int) -> list[list[int]]:
    """[CLS] tokens [EOS] per sentence, tail-truncated to ``max_len``."""
    out = []
    for text in sentences:
        ids = vocab.encode(text)[: max_len - 2]
        if ids:
            out.append([vocab.cls_id, *ids, vocab.eos_id])
    return out


def pretrain(
    model: LayeredEncoder,
    corpus: Sequence[Sequence[int]],
    cfg: PretrainConfig,
    anchor_data: Optional[Sequence[AnchorBatch]] = None,
    fisher: Optional[FisherDiagonal] = None,
    callback: Optional[Callable[[int, float, LayeredEncoder], None]] = None,
) -> LayeredEncoder:
    """Minibatch SGD on the MLM loss (plus the EWC penalty for EWC strategies).

    The model is updated in place and returned.  Masking and shuffling draw
    from ``seed``; Fisher estimation draws from its own stream so that EWC
    with lambda = 0 follows exactly the SLR trajectory.
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    if model.vocab is None:
        raise ValueError("model has no vocabulary attached")
    rng = np.random.default_rng(cfg.seed)
    if cfg.uses_ewc and fisher is None:
        fisher_rng = np.random.default_rng([cfg.seed, 1])
        data = anchor_data or make_batches(corpus, cfg.batch_size)
        fisher = estimate_fisher(model, data, cfg.fisher_samples, fisher_rng, cfg.mask_prob)

    opt = torch.optim.SGD(param_groups(model, cfg), lr=cfg.slr_lr)
    step = getattr(model, "steps_trained", 0)
    model.train()
    for epoch in range(cfg.epochs):
        for raw in make_batches(corpus, cfg.batch_size, rng if cfg.shuffle else None):
            batch = mlm_mask(pad_batch(raw, model.cfg.max_len), cfg.mask_prob, rng, model.vocab)
            loss = mlm_loss(model, batch)
            if cfg.uses_ewc:
                loss = loss + ewc_penalty(model, fisher, cfg.ewc_lambda)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite pretraining loss {value} at step {step} (epoch {epoch})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            if callback is not None:
                callback(step, value, model)
    model.steps_trained = step
    logger.info("pretrained %d steps with strategy %s", step, cfg.strategy)
    return model


def clone_encoder(model: LayeredEncoder) -> LayeredEncoder:
    return copy.deepcopy(model)
