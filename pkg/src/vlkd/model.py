"""A small fusion-encoder transformer over word/tag/image-region inputs.

The encoder consumes a text sequence ([CLS] question [SEP] tags [SEP]) fused
with projected image-region features, and exposes per-layer hidden states for
any requested subset of layers. Layer indices are 1-based and "last" is
``num_layers``. Teacher and student are both instances of this class; their
hidden sizes must agree for distillation, which is validated downstream.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .tokenizer import TokenizedText

ROLE_CLS = "cls"
ROLE_QUESTION = "question"
ROLE_TAG = "tag"
ROLE_SEP = "sep"
ROLE_REGION = "region"
ROLE_PAD = "pad"


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int
    num_layers: int
    num_heads: int
    vocab_size: int
    num_classes: int
    feature_dim: int
    max_text_tokens: int = 128
    max_image_tokens: int = 50
    dropout: float = 0.3
    attention_dropout: float = 0.1
    ffn_size: int | None = None

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        for name in ("hidden_size", "num_layers", "num_heads", "vocab_size",
                     "num_classes", "feature_dim", "max_image_tokens"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_text_tokens < 4:
            raise ValueError("max_text_tokens must leave room for [CLS] and two [SEP]s")
        if not (0.0 <= self.dropout < 1.0 and 0.0 <= self.attention_dropout < 1.0):
            raise ValueError("dropout rates must be in [0, 1)")
        if self.ffn_size is None:
            object.__setattr__(self, "ffn_size", 4 * self.hidden_size)


@dataclass(frozen=True)
class RegionFeatures:
    """Detected image-region feature vectors, one row per region."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError(f"region features must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("region features contain non-finite values")
        object.__setattr__(self, "vectors", v)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class WordTagImageTriple:
    """One encoder input: question subwords, tag subwords, region features.

    ``token_ids``/``roles``/``segments`` describe the full text part including
    specials; regions follow the text in the encoded sequence. ``question``
    and ``tags`` keep the span bookkeeping needed to build match matrices.
    """

    question: TokenizedText
    tags: tuple[TokenizedText, ...]
    regions: RegionFeatures
    token_ids: tuple[int, ...]
    roles: tuple[str, ...]
    segments: tuple[int, ...]
    pad_id: int

    def __post_init__(self):
        if not (len(self.token_ids) == len(self.roles) == len(self.segments)):
            raise ValueError("token_ids, roles and segments must align")

    @property
    def text_len(self) -> int:
        return len(self.token_ids)

    @property
    def seq_len(self) -> int:
        return len(self.token_ids) + self.regions.count

    def full_roles(self) -> tuple[str, ...]:
        return self.roles + (ROLE_REGION,) * self.regions.count

    def validate_budget(self, config: ModelConfig) -> None:
        if self.text_len > config.max_text_tokens:
            raise ValueError(
                f"text length {self.text_len} exceeds budget {config.max_text_tokens}"
            )
        if self.regions.count > config.max_image_tokens:
            raise ValueError(
                f"region count {self.regions.count} exceeds budget {config.max_image_tokens}"
            )
        if self.regions.count and self.regions.dim != config.feature_dim:
            raise ValueError(
                f"region feature dim {self.regions.dim} != configured {config.feature_dim}"
            )


@dataclass
class EncoderOutput:
    """Per-layer hidden states for one input, trimmed to its true length.

    ``layers`` maps 1-based layer index to a (seq_len, hidden) tensor; ``roles``
    tags every position. Padding added for batching never appears here.
    """

    layers: dict[int, torch.Tensor]
    roles: tuple[str, ...]

    def positions(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == role]

    def vectors(self, layer: int, role: str) -> torch.Tensor:
        states = self.layer(layer)
        idx = self.positions(role)
        return states[idx] if idx else states.new_zeros((0, states.shape[1]))

    def layer(self, index: int) -> torch.Tensor:
        if index not in self.layers:
            raise ValueError(f"layer {index} was not retained (have {sorted(self.layers)})")
        return self.layers[index]

    def cls_vector(self, layer: int) -> torch.Tensor:
        pos = self.positions(ROLE_CLS)
        if not pos:
            raise ValueError("no classification-marker position in this output")
        return self.layer(layer)[pos[0]]


class SelfAttention(nn.Module):
    """Multi-head self-attention written out longhand.

    Deliberately avoids nn.MultiheadAttention: its no-grad fast path uses a
    different kernel than the training path, which would make a frozen teacher
    and an identical trainable student disagree at the last few ulps.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        h = config.hidden_size
        self.num_heads = config.num_heads
        self.head_dim = h // config.num_heads
        self.in_proj = nn.Linear(h, 3 * h)
        self.out_proj = nn.Linear(h, h)
        self.dropout = nn.Dropout(config.attention_dropout)

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor) -> torch.Tensor:
        batch, length, hidden = x.shape
        q, k, v = self.in_proj(x).chunk(3, dim=-1)

        def heads(t: torch.Tensor) -> torch.Tensor:
            return t.view(batch, length, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(
            key_padding_mask[:, None, None, :], float("-inf")
        )
        weights = self.dropout(scores.softmax(dim=-1))
        mixed = (weights @ v).transpose(1, 2).reshape(batch, length, hidden)
        return self.out_proj(mixed)


class EncoderLayer(nn.Module):
    """Post-LayerNorm transformer block with separate attention dropout."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        h = config.hidden_size
        self.attention = SelfAttention(config)
        self.attention_norm = nn.LayerNorm(h)
        self.ffn = nn.Sequential(
            nn.Linear(h, config.ffn_size),
            nn.GELU(),
            nn.Linear(config.ffn_size, h),
        )
        self.ffn_norm = nn.LayerNorm(h)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor) -> torch.Tensor:
        attn_out = self.attention(x, key_padding_mask=key_padding_mask)
        x = self.attention_norm(x + self.dropout(attn_out))
        x = self.ffn_norm(x + self.dropout(self.ffn(x)))
        return x


class FusionEncoder(nn.Module):
    """Fusion encoder over text tokens and projected image regions.

    Text positions use learned absolute position embeddings; regions are a
    set and share one learned position vector. Segment 0 covers [CLS], the
    question and its [SEP]; segment 1 covers tags, their [SEP] and regions.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        h = config.hidden_size
        self.word_embeddings = nn.Embedding(config.vocab_size, h)
        self.position_embeddings = nn.Embedding(config.max_text_tokens, h)
        self.segment_embeddings = nn.Embedding(2, h)
        self.region_position = nn.Parameter(torch.zeros(h))
        self.image_projection = nn.Linear(config.feature_dim, h)
        self.embed_norm = nn.LayerNorm(h)
        self.embed_dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.num_layers))
        self.classifier = nn.Linear(h, config.num_classes)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.normal_(module.weight, mean=0.0, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.normal_(module.weight, mean=0.0, std=0.02)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        nn.init.normal_(self.region_position, mean=0.0, std=0.02)

    @property
    def dtype(self) -> torch.dtype:
        return self.word_embeddings.weight.dtype

    def _embed(self, triple: WordTagImageTriple) -> torch.Tensor:
        """Pre-norm input embedding of one triple, shape (seq_len, hidden)."""
        device = self.word_embeddings.weight.device
        ids = torch.tensor(triple.token_ids, dtype=torch.long, device=device)
        positions = torch.arange(triple.text_len, dtype=torch.long, device=device)
        segments = torch.tensor(triple.segments, dtype=torch.long, device=device)
        text = (
            self.word_embeddings(ids)
            + self.position_embeddings(positions)
            + self.segment_embeddings(segments)
        )
        if triple.regions.count:
            feats = torch.as_tensor(triple.regions.vectors, dtype=self.dtype, device=device)
            seg_one = self.segment_embeddings(
                torch.ones(triple.regions.count, dtype=torch.long, device=device)
            )
            regions = self.image_projection(feats) + self.region_position + seg_one
            return torch.cat([text, regions], dim=0)
        return text

    def encode(
        self,
        triples: Sequence[WordTagImageTriple],
        retain_layers: Iterable[int],
        training: bool = False,
        pad_to: int | None = None,
    ) -> list[EncoderOutput]:
        """Forward a batch of triples and retain the requested layers.

        Args:
            triples: inputs, each already within the configured length budgets.
            retain_layers: 1-based layer indices whose hidden states to keep.
            training: enables dropout; evaluation mode is deterministic.
            pad_to: optional minimum padded length (useful for masking tests).

        Returns:
            One EncoderOutput per triple, trimmed to the triple's true length.
        """
        retain = sorted(set(retain_layers))
        if not retain:
            raise ValueError("retain_layers must be nonempty")
        if retain[0] < 1 or retain[-1] > self.config.num_layers:
            raise ValueError(
                f"retain_layers {retain} outside 1..{self.config.num_layers}"
            )
        if not triples:
            raise ValueError("encode needs at least one triple")
        for triple in triples:
            triple.validate_budget(self.config)

        lengths = [t.seq_len for t in triples]
        width = max(lengths)
        if pad_to is not None:
            width = max(width, pad_to)

        embedded = []
        mask = torch.zeros(len(triples), width, dtype=torch.bool,
                           device=self.word_embeddings.weight.device)
        for b, triple in enumerate(triples):
            rows = self._embed(triple)
            if width > rows.shape[0]:
                pad_ids = torch.full(
                    (width - rows.shape[0],), triple.pad_id,
                    dtype=torch.long, device=rows.device,
                )
                pad_rows = (
                    self.word_embeddings(pad_ids)
                    + self.position_embeddings(torch.zeros_like(pad_ids))
                    + self.segment_embeddings(torch.zeros_like(pad_ids))
                )
                rows = torch.cat([rows, pad_rows], dim=0)
                mask[b, triple.seq_len :] = True
            embedded.append(rows)
        x = torch.stack(embedded, dim=0)

        was_training = self.training
        self.train(training)
        try:
            x = self.embed_dropout(self.embed_norm(x))
            retained: dict[int, torch.Tensor] = {}
            for i, layer in enumerate(self.layers, start=1):
                x = layer(x, key_padding_mask=mask)
                if i in retain:
                    retained[i] = x
        finally:
            self.train(was_training)

        outputs = []
        for b, triple in enumerate(triples):
            layers = {i: retained[i][b, : lengths[b]] for i in retain}
            outputs.append(EncoderOutput(layers=layers, roles=triple.full_roles()))
        return outputs


def init_model(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> FusionEncoder:
    """Deterministically initialize a fresh encoder from a seed."""
    torch.manual_seed(seed)
    model = FusionEncoder(config)
    if dtype != torch.float32:
        model = model.to(dtype)
    model.eval()
    return model


def forward(
    model: FusionEncoder,
    triple: WordTagImageTriple,
    retain_layers: Iterable[int],
    training: bool = False,
) -> EncoderOutput:
    return model.encode([triple], retain_layers, training=training)[0]


def classify(model: FusionEncoder, output: EncoderOutput) -> torch.Tensor:
    """Logits from the final-layer classification-marker embedding."""
    last = model.config.num_layers
    if last not in output.layers:
        raise ValueError(f"last layer {last} not retained; cannot classify")
    return model.classifier(output.cls_vector(last))


def gradients(model: FusionEncoder, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Backpropagate ``loss`` and return per-parameter gradients.

    Frozen parameters (requires_grad False) are omitted; trainable parameters
    the loss does not touch get explicit zero gradients.
    """
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss: {loss.item()!r}")
    model.zero_grad(set_to_none=True)
    loss.backward()
    grads = {}
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        grads[name] = (
            param.grad.detach().clone() if param.grad is not None
            else torch.zeros_like(param)
        )
    return grads


def freeze(model: FusionEncoder) -> None:
    for param in model.parameters():
        param.requires_grad_(False)


def unfreeze(model: FusionEncoder) -> None:
    for param in model.parameters():
        param.requires_grad_(True)


def freeze_all_but_classifier(model: FusionEncoder) -> None:
    for name, param in model.named_parameters():
        param.requires_grad_(name.startswith("classifier."))


def trainable_parameters(model: FusionEncoder) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def save_checkpoint(
    model: FusionEncoder,
    path: str | Path,
    step: int = 0,
    metrics: dict | None = None,
) -> None:
    """Self-describing checkpoint: config echo, parameters, step, metrics."""
    payload = {
        "config": asdict(model.config),
        "state": model.state_dict(),
        "step": step,
        "metrics": dict(metrics or {}),
        "dtype": str(model.dtype),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[FusionEncoder, int, dict]:
    payload = torch.load(path, weights_only=True)
    config = ModelConfig(**payload["config"])
    model = FusionEncoder(config)
    dtype = getattr(torch, payload["dtype"].split(".")[-1])
    model = model.to(dtype)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload["step"], payload["metrics"]


def clone_model(model: FusionEncoder) -> FusionEncoder:
    """Deep copy sharing nothing with the original (teacher = student setups)."""
    return copy.deepcopy(model)
