"""A small decoder-only language model with a word-level tokenizer.

The model is trained from scratch on prompt-shaped text, then frozen; task
adaptation happens through low-rank adapters on the query/value projections
and, separately, through collaborative vectors spliced into the input
embedding sequence. Predictions are read out as a two-way softmax over the
"Yes"/"No" answer tokens at the final position.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError, DataError, InputDomainError, TrainingError

PAD_ID = 0
BOS_ID = 1
UNK_ID = 2
USER_SLOT_ID = 3
ITEM_SLOT_ID = 4
YES_ID = 5
NO_ID = 6

SPECIAL_TOKENS = {
    "<pad>": PAD_ID,
    "<bos>": BOS_ID,
    "<unk>": UNK_ID,
    "<user>": USER_SLOT_ID,
    "<item>": ITEM_SLOT_ID,
    "Yes": YES_ID,
    "No": NO_ID,
}
SLOT_IDS = (USER_SLOT_ID, ITEM_SLOT_ID)


class Tokenizer:
    """Word-level tokenizer over whitespace-separated chunks.

    Each whitespace-delimited chunk is one token (punctuation stays attached,
    so ``items:`` and ``Dune,`` are single vocabulary entries). Decoding joins
    tokens with single spaces, which round-trips any single-spaced input whose
    chunks are in the vocabulary. Unknown chunks map to ``<unk>``. The slot
    markers ``<user>``/``<item>`` are never produced from text; they are
    inserted by the prompt renderer.
    """

    def __init__(self, vocab: dict):
        self.vocab = dict(vocab)
        self.inverse = {i: t for t, i in self.vocab.items()}

    @classmethod
    def from_corpus(cls, texts, min_count: int = 1):
        counts = {}
        for text in texts:
            for chunk in text.split():
                counts[chunk] = counts.get(chunk, 0) + 1
        vocab = dict(SPECIAL_TOKENS)
        for chunk in sorted(counts):
            if chunk in vocab:
                continue
            if counts[chunk] >= min_count:
                vocab[chunk] = len(vocab)
        return cls(vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list:
        ids = []
        for chunk in text.split():
            tid = self.vocab.get(chunk, UNK_ID)
            if tid in SLOT_IDS:
                tid = UNK_ID  # slots cannot come from plain text
            ids.append(tid)
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.inverse.get(int(i), "<unk>") for i in ids)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.vocab, f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls(json.load(f))


def tokenize(tokenizer: Tokenizer, text: str) -> list:
    return tokenizer.encode(text)


@dataclass
class EmbeddingSequence:
    """Mixed sequence of token embeddings and injected collaborative vectors."""

    vectors: torch.Tensor  # (T, d2)
    slot_positions: list = field(default_factory=list)

    def __len__(self):
        return self.vectors.shape[0]


class LoraPair(nn.Module):
    """Low-rank adapter for one linear projection.

    Delta for a row-vector input x is ``(alpha/r) * x @ A @ B`` with A of
    shape (d, r) and B of shape (r, d). B starts at zero, so a freshly
    attached adapter is an exact no-op. Dropout applies to the adapter input
    path in training mode only.
    """

    def __init__(self, dim: int, r: int = 8, alpha: float = 16.0, dropout: float = 0.05):
        super().__init__()
        self.r = r
        self.alpha = alpha
        self.scaling = alpha / r
        self.A = nn.Parameter(torch.empty(dim, r))
        self.B = nn.Parameter(torch.zeros(r, dim))
        nn.init.kaiming_uniform_(self.A, a=math.sqrt(5))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return (self.dropout(x) @ self.A @ self.B) * self.scaling


class CausalSelfAttention(nn.Module):
    def __init__(self, d2: int, n_heads: int):
        super().__init__()
        if d2 % n_heads != 0:
            raise InputDomainError(f"d2={d2} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.head_dim = d2 // n_heads
        self.q_proj = nn.Linear(d2, d2)
        self.k_proj = nn.Linear(d2, d2)
        self.v_proj = nn.Linear(d2, d2)
        self.out_proj = nn.Linear(d2, d2)
        self.lora_q = None
        self.lora_v = None

    def forward(self, x, key_mask):
        # x: (B, T, D); key_mask: (B, T) bool, True where the key is real
        B, T, D = x.shape
        q = self.q_proj(x)
        v = self.v_proj(x)
        if self.lora_q is not None:
            q = q + self.lora_q(x)
        if self.lora_v is not None:
            v = v + self.lora_v(x)
        k = self.k_proj(x)

        def split(t):
            return t.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        allowed = causal.view(1, 1, T, T) & key_mask.view(B, 1, 1, T)
        scores = scores.masked_fill(~allowed, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).contiguous().view(B, T, D)
        return self.out_proj(out)


class Block(nn.Module):
    """Pre-norm transformer block: attention then a 4x feed-forward."""

    def __init__(self, d2: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d2)
        self.attn = CausalSelfAttention(d2, n_heads)
        self.ln2 = nn.LayerNorm(d2)
        self.ff = nn.Sequential(
            nn.Linear(d2, 4 * d2), nn.GELU(), nn.Linear(4 * d2, d2)
        )

    def forward(self, x, key_mask):
        x = x + self.attn(self.ln1(x), key_mask)
        x = x + self.ff(self.ln2(x))
        return x


class TinyDecoderLM(nn.Module):
    def __init__(self, vocab_size: int, d2: int = 64, n_layers: int = 2,
                 n_heads: int = 2, max_seq_len: int = 160):
        super().__init__()
        self.vocab_size = vocab_size
        self.d2 = d2
        self.max_seq_len = max_seq_len
        self.token_emb = nn.Embedding(vocab_size, d2)
        self.pos_emb = nn.Embedding(max_seq_len, d2)
        self.blocks = nn.ModuleList(Block(d2, n_heads) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(d2)
        self.head = nn.Linear(d2, vocab_size, bias=False)
        nn.init.normal_(self.token_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)

    # -- embedding -------------------------------------------------------

    def lookup(self, ids, allow_slots: bool = False) -> torch.Tensor:
        """Embedding-table rows for a 1-D or 2-D id tensor."""
        ids = torch.as_tensor(ids, dtype=torch.long, device=self.token_emb.weight.device)
        if ids.numel() and int(ids.max()) >= self.vocab_size:
            raise InputDomainError(f"token id {int(ids.max())} >= vocab size {self.vocab_size}")
        if not allow_slots:
            for slot in SLOT_IDS:
                if bool((ids == slot).any()):
                    raise ContractError(
                        "slot token reached embedding lookup; substitute "
                        "collaborative vectors before the forward pass"
                    )
        return self.token_emb(ids)

    # -- forward passes ----------------------------------------------------

    def hidden_states(self, emb, lengths=None):
        """Run the block stack over an embedded batch.

        emb: (B, T, d2); lengths: (B,) real lengths for right-padded input.
        Positions past a sequence's length are masked out of attention.
        """
        if emb.dim() == 2:
            emb = emb.unsqueeze(0)
        B, T, _ = emb.shape
        if T == 0:
            raise InputDomainError("empty embedding sequence")
        if T > self.max_seq_len:
            raise InputDomainError(f"sequence length {T} exceeds max {self.max_seq_len}")
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long, device=emb.device)
        else:
            lengths = torch.as_tensor(lengths, dtype=torch.long, device=emb.device)
        positions = torch.arange(T, device=emb.device)
        key_mask = positions.view(1, T) < lengths.view(B, 1)
        x = emb + self.pos_emb(positions).view(1, T, -1)
        for block in self.blocks:
            x = block(x, key_mask)
        return self.ln_f(x), lengths

    def forward(self, emb, lengths=None) -> torch.Tensor:
        """Vocabulary logits at the final real position of each sequence."""
        x, lengths = self.hidden_states(emb, lengths)
        B = x.shape[0]
        final = x[torch.arange(B, device=x.device), lengths - 1]
        return self.head(final)

    def all_logits(self, emb, lengths=None) -> torch.Tensor:
        x, _ = self.hidden_states(emb, lengths)
        return self.head(x)

    # -- adapters ----------------------------------------------------------

    def attach_lora(self, r: int = 8, alpha: float = 16.0, dropout: float = 0.05):
        dtype = self.token_emb.weight.dtype
        device = self.token_emb.weight.device
        for block in self.blocks:
            block.attn.lora_q = LoraPair(self.d2, r, alpha, dropout).to(device=device, dtype=dtype)
            block.attn.lora_v = LoraPair(self.d2, r, alpha, dropout).to(device=device, dtype=dtype)

    def detach_lora(self):
        for block in self.blocks:
            block.attn.lora_q = None
            block.attn.lora_v = None

    def lora_parameters(self):
        return [p for name, p in self.named_parameters() if ".lora_" in name]

    def base_parameters(self):
        return [p for name, p in self.named_parameters() if ".lora_" not in name]

    def freeze_base(self):
        for p in self.base_parameters():
            p.requires_grad_(False)


def embed(model: TinyDecoderLM, token_ids) -> EmbeddingSequence:
    """Plain embedding lookup for a slot-free token sequence."""
    ids = list(token_ids)
    if not ids:
        return EmbeddingSequence(
            torch.empty(0, model.d2, dtype=model.token_emb.weight.dtype), []
        )
    return EmbeddingSequence(model.lookup(ids), [])


def yes_probability(logits) -> float:
    """Two-way softmax over the Yes/No answer logits."""
    z = logits[..., YES_ID] - logits[..., NO_ID]
    if isinstance(z, torch.Tensor):
        return torch.sigmoid(z)
    return 1.0 / (1.0 + math.exp(-float(z)))


# --- pretraining --------------------------------------------------------------


def pad_batch(sequences, device=None):
    """Right-pad id lists with <pad>; returns (ids (B,T), lengths (B,))."""
    lengths = torch.tensor([len(s) for s in sequences], dtype=torch.long, device=device)
    T = int(lengths.max())
    ids = torch.full((len(sequences), T), PAD_ID, dtype=torch.long, device=device)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = torch.as_tensor(seq, dtype=torch.long)
    return ids, lengths


def lm_pretrain(model: TinyDecoderLM, sequences, steps: int = 400,
                batch_size: int = 32, lr: float = 3e-3, weight_decay: float = 0.01,
                seed: int = 0) -> list:
    """Next-token training over already-tokenized sequences; returns the loss curve.

    Sequences may contain slot-marker tokens (the full prompt template keeps
    its placeholders during pretraining); their embedding rows train like any
    other. The caller freezes the weights afterwards.
    """
    if not sequences:
        raise DataError("empty pretraining corpus")
    sequences = [s for s in sequences if len(s) >= 2]
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    model.train()
    for _ in range(steps):
        idx = torch.randint(0, len(sequences), (batch_size,), generator=gen)
        batch = [sequences[int(i)] for i in idx]
        ids, lengths = pad_batch(batch)
        emb = model.lookup(ids, allow_slots=True)
        logits = model.all_logits(emb, lengths)
        loss = nn.functional.cross_entropy(
            logits[:, :-1].reshape(-1, model.vocab_size),
            ids[:, 1:].reshape(-1),
            ignore_index=PAD_ID,
        )
        if not torch.isfinite(loss):
            raise TrainingError("pretraining loss became non-finite")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
    model.eval()
    return losses


def perplexity(model: TinyDecoderLM, sequences, batch_size: int = 64) -> float:
    """Token-level perplexity of the model on held-out sequences."""
    model.eval()
    total_nll, total_tokens = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(sequences), batch_size):
            batch = [s for s in sequences[start : start + batch_size] if len(s) >= 2]
            if not batch:
                continue
            ids, lengths = pad_batch(batch)
            emb = model.lookup(ids, allow_slots=True)
            logits = model.all_logits(emb, lengths)
            nll = nn.functional.cross_entropy(
                logits[:, :-1].reshape(-1, model.vocab_size),
                ids[:, 1:].reshape(-1),
                ignore_index=PAD_ID,
                reduction="sum",
            )
            total_nll += float(nll)
            total_tokens += int((ids[:, 1:] != PAD_ID).sum())
    if total_tokens == 0:
        raise DataError("no scorable tokens")
    return math.exp(total_nll / total_tokens)


# --- persistence --------------------------------------------------------------


def save_lm(model: TinyDecoderLM, tokenizer: Tokenizer, path, metadata=None):
    matrices = {
        name: tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    meta = {
        "kind": "tiny_decoder_lm",
        "vocab_size": model.vocab_size,
        "d2": model.d2,
        "n_layers": len(model.blocks),
        "n_heads": model.blocks[0].attn.n_heads,
        "max_seq_len": model.max_seq_len,
    }
    meta.update(metadata or {})
    save_checkpoint(path, matrices, meta)
    tokenizer.save(str(path) + ".vocab.json")


def load_lm(path):
    matrices, meta = load_checkpoint(path)
    model = TinyDecoderLM(
        vocab_size=meta["vocab_size"],
        d2=meta["d2"],
        n_layers=meta["n_layers"],
        n_heads=meta["n_heads"],
        max_seq_len=meta["max_seq_len"],
    )
    has_lora = any(".lora_" in name for name in matrices)
    if has_lora:
        model.attach_lora(
            r=meta.get("lora_r", 8),
            alpha=meta.get("lora_alpha", 16.0),
            dropout=meta.get("lora_dropout", 0.05),
        )
    state = {name: torch.from_numpy(arr) for name, arr in matrices.items()}
    model.load_state_dict(state)
    model.eval()
    tokenizer = Tokenizer.load(str(path) + ".vocab.json")
    return model, tokenizer, meta
