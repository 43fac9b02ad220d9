"""A small word-level transformer encoder in float64.

The layer structure mirrors a RoBERTa-style masked LM (embedding, a stack of
self-attention blocks with skip connections, an LM head) so that per-layer
learning rates and parameter anchoring behave as they would on the full
model, while staying small enough for finite-difference gradient checks.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .text import tokenize

DTYPE = torch.float64

PAD, UNK, CLS, SEP, EOS, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[EOS]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, EOS, MASK)


class Vocab:
    """Word-level vocabulary; ids 0..5 are the special tokens."""

    def __init__(self, tokens: Sequence[str] = ()) -> None:
        self.itos: list[str] = list(SPECIAL_TOKENS)
        for tok in tokens:
            if tok not in SPECIAL_TOKENS:
                self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1, max_size: Optional[int] = None) -> "Vocab":
        counts = Counter(t for text in texts for t in tokenize(text))
        ranked = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        return cls(ranked[:max_size] if max_size else ranked)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def cls_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    @property
    def eos_id(self) -> int:
        return 4

    @property
    def mask_id(self) -> int:
        return 5

    @property
    def n_special(self) -> int:
        return len(SPECIAL_TOKENS)

    @property
    def never_masked(self) -> frozenset[int]:
        return frozenset((self.pad_id, self.cls_id, self.sep_id, self.eos_id, self.mask_id))

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, self.unk_id) for t in tokens]

    def encode(self, text: str) -> list[int]:
        return self.ids(tokenize(text))


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_len: int = 128
    init_std: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


class Embedding(nn.Module):
    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        self.tokens = nn.Embedding(cfg.vocab_size, cfg.d_model, dtype=DTYPE)
        self.positions = nn.Embedding(cfg.max_len, cfg.d_model, dtype=DTYPE)
        self.norm = nn.LayerNorm(cfg.d_model, dtype=DTYPE)

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(input_ids.shape[1])
        return self.norm(self.tokens(input_ids) + self.positions(pos)[None])


class Block(nn.Module):
    """Post-norm self-attention block: x = LN(x + attn(x)); x = LN(x + ffn(x))."""

    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, dtype=DTYPE)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model, dtype=DTYPE)
        self.norm1 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.ff_in = nn.Linear(cfg.d_model, cfg.d_ff, dtype=DTYPE)
        self.ff_out = nn.Linear(cfg.d_ff, cfg.d_model, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        h, dh = self.n_heads, D // self.n_heads
        q, k, v = self.qkv(x).view(B, T, 3, h, dh).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = att.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        ctx = (att.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, T, D)
        x = self.norm1(x + self.proj(ctx))
        return self.norm2(x + self.ff_out(F.gelu(self.ff_in(x))))


class LayeredEncoder(nn.Module):
    """Embedding -> blocks -> LM head.  ``forward`` returns (hidden, pooled).

    ``pooled`` is the hidden state at position 0, where inputs carry [CLS].
    """

    def __init__(self, cfg: EncoderConfig, vocab: Optional[Vocab] = None) -> None:
        super().__init__()
        if vocab is not None and len(vocab) != cfg.vocab_size:
            raise ValueError(f"vocab has {len(vocab)} tokens but config says {cfg.vocab_size}")
        self.cfg = cfg
        self.vocab = vocab
        self.embedding = Embedding(cfg)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, dtype=DTYPE)
        self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * self.cfg.init_std)

    def forward(self, input_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if input_ids.shape[1] > self.cfg.max_len:
            raise ValueError(f"sequence length {input_ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        pad_mask = input_ids == 0
        x = self.embedding(input_ids)
        for block in self.blocks:
            x = block(x, pad_mask)
        return x, x[:, 0]

    def lm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.lm_head(hidden)

    def layers(self) -> list[tuple[str, nn.Module]]:
        """Parameter layers ordered innermost (embedding) to outermost (LM head)."""
        return (
            [("embedding", self.embedding)]
            + [(f"block_{i + 1}", b) for i, b in enumerate(self.blocks)]
            + [("lm_head", self.lm_head)]
        )

    def save(self, prefix: str | Path, **meta) -> tuple[Path, Path]:
        return save_checkpoint(self, prefix, kind="encoder", architecture=asdict(self.cfg), vocab=self.vocab, meta=meta)

    @classmethod
    def load(cls, prefix: str | Path) -> "LayeredEncoder":
        manifest = read_manifest(prefix)
        vocab = Vocab(manifest["vocab"][len(SPECIAL_TOKENS):]) if manifest.get("vocab") else None
        model = cls(EncoderConfig(**manifest["architecture"]), vocab)
        load_state(model, prefix, manifest)
        model.checkpoint_meta = manifest.get("meta", {})
        return model


def pad_batch(seqs: Sequence[Sequence[int]], max_len: Optional[int] = None, pad_id: int = 0) -> torch.Tensor:
    """Right-pad (and tail-truncate to ``max_len``) into a LongTensor."""
    if max_len is not None:
        seqs = [list(s)[:max_len] for s in seqs]
    width = max((len(s) for s in seqs), default=0)
    out = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


# -- checkpoints -------------------------------------------------------------------
#
# <prefix>.json  {"kind", "architecture", "vocab", "meta",
#                 "dtype": "<f8", "params": [{"name", "shape", "offset", "count"}, ...]}
# <prefix>.bin   every parameter flattened in C order as little-endian float64,
#                concatenated in state_dict order; "offset"/"count" are in elements.


def save_checkpoint(
    module: nn.Module,
    prefix: str | Path,
    *,
    kind: str,
    architecture: dict,
    vocab: Optional[Vocab] = None,
    meta: Optional[dict] = None,
) -> tuple[Path, Path]:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    params, blobs, offset = [], [], 0
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f8", copy=False)
        params.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(np.ascontiguousarray(arr).tobytes())
        offset += arr.size
    manifest = {
        "kind": kind,
        "architecture": architecture,
        "vocab": vocab.itos if vocab is not None else None,
        "meta": meta or {},
        "dtype": "<f8",
        "params": params,
    }
    json_path, bin_path = prefix.with_suffix(".json"), prefix.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    bin_path.write_bytes(b"".join(blobs))
    return json_path, bin_path


def read_manifest(prefix: str | Path) -> dict:
    return json.loads(Path(prefix).with_suffix(".json").read_text())


def load_state(module: nn.Module, prefix: str | Path, manifest: Optional[dict] = None) -> None:
    manifest = manifest or read_manifest(prefix)
    flat = np.frombuffer(Path(prefix).with_suffix(".bin").read_bytes(), dtype="<f8")
    state = {}
    for p in manifest["params"]:
        chunk = flat[p["offset"]: p["offset"] + p["count"]].reshape(p["shape"])
        state[p["name"]] = torch.from_numpy(chunk.astype(np.float64))
    module.load_state_dict(state)
