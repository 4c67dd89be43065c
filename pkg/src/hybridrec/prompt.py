"""Prompt rendering and hybrid encoding.

The fixed template describes a user by the titles of their recently liked
items and asks for a Yes/No judgement about a target item. The full variant
adds two ID-feature phrases whose placeholders become dedicated slot tokens;
at encoding time those slots are filled with projected collaborative vectors
instead of token-embedding rows. The text-only variant drops both phrases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import CatalogError, ContractError
from .lm import (
    BOS_ID,
    ITEM_SLOT_ID,
    NO_ID,
    PAD_ID,
    USER_SLOT_ID,
    YES_ID,
    EmbeddingSequence,
)

USER_MARKER = "<UserID>"
ITEM_MARKER = "<TargetItemID>"
EMPTY_HISTORY_MARKER = "[]"

# Segment layout of the full prompt; slots sit between segments.
_FULL_HEAD = (
    "#Question: A user has given high ratings to the following items: {history}. "
    "Additionally, we have information about the user's preferences encoded in the feature"
)
_FULL_MID = (
    ". Using all available information, make a prediction about whether the user "
    "would enjoy the item titled {title} with the feature"
)
_FULL_TAIL = '? Answer with "Yes" or "No". #Answer:'

_TEXT_ONLY = (
    "#Question: A user has given high ratings to the following items: {history}. "
    "Using all available information, make a prediction about whether the user "
    "would enjoy the item titled {title}? Answer with \"Yes\" or \"No\". #Answer:"
)


@dataclass
class PromptSample:
    interaction: object  # Interaction
    history: object  # History
    catalog: dict


@dataclass
class HybridPrompt:
    text: str
    token_ids: list
    variant: str  # "full" | "text_only"
    user_id: int
    item_id: int
    label: int
    history: object = None

    @property
    def slot_positions(self):
        return [
            pos for pos, tid in enumerate(self.token_ids)
            if tid in (USER_SLOT_ID, ITEM_SLOT_ID)
        ]


def _title(catalog, item_id):
    title = catalog.get(item_id)
    if not title:
        raise CatalogError(f"item {item_id} has no title")
    return title


def _history_string(sample: PromptSample) -> str:
    titles = [_title(sample.catalog, item_id) for item_id, _ in sample.history.items]
    return ", ".join(titles) if titles else EMPTY_HISTORY_MARKER


def full_segments(sample: PromptSample):
    """The three text segments surrounding the two slots."""
    return (
        _FULL_HEAD.format(history=_history_string(sample)),
        _FULL_MID.format(title=_title(sample.catalog, sample.interaction.item_id)),
        _FULL_TAIL,
    )


def render_full(sample: PromptSample, tokenizer) -> HybridPrompt:
    head, mid, tail = full_segments(sample)
    text = f"{head} {USER_MARKER}{mid} {ITEM_MARKER}{tail}"
    ids = (
        [BOS_ID]
        + tokenizer.encode(head)
        + [USER_SLOT_ID]
        + tokenizer.encode(mid)
        + [ITEM_SLOT_ID]
        + tokenizer.encode(tail)
    )
    return HybridPrompt(
        text=text,
        token_ids=ids,
        variant="full",
        user_id=sample.interaction.user_id,
        item_id=sample.interaction.item_id,
        label=sample.interaction.label,
        history=sample.history,
    )


def render_text_only(sample: PromptSample, tokenizer) -> HybridPrompt:
    text = _TEXT_ONLY.format(
        history=_history_string(sample),
        title=_title(sample.catalog, sample.interaction.item_id),
    )
    ids = [BOS_ID] + tokenizer.encode(text)
    return HybridPrompt(
        text=text,
        token_ids=ids,
        variant="text_only",
        user_id=sample.interaction.user_id,
        item_id=sample.interaction.item_id,
        label=sample.interaction.label,
        history=sample.history,
    )


def hybrid_encode(prompt: HybridPrompt, cie, lm) -> EmbeddingSequence:
    """Embed one prompt, splicing collaborative vectors at the slots."""
    if prompt.variant == "full" and cie is None:
        raise ContractError("full prompts require a collaborative mapping module")
    vectors = []
    slot_positions = []
    for pos, tid in enumerate(prompt.token_ids):
        if tid == USER_SLOT_ID:
            vectors.append(cie.map_user(prompt.user_id, prompt.history))
            slot_positions.append(pos)
        elif tid == ITEM_SLOT_ID:
            vectors.append(cie.map_item(prompt.item_id))
            slot_positions.append(pos)
        else:
            vectors.append(lm.lookup([tid])[0])
    return EmbeddingSequence(torch.stack(vectors), slot_positions)


def batch_hybrid_encode(prompts, cie, lm):
    """Embed a batch of prompts; returns (embeddings (B,T,d2), lengths).

    Rows are right-padded with the pad embedding. Slot vectors for the whole
    batch are computed in two vectorized passes (users, then items) so that
    stage-two training backpropagates through a single graph.
    """
    lengths = torch.tensor([len(p.token_ids) for p in prompts], dtype=torch.long)
    T = int(lengths.max())
    ids = torch.full((len(prompts), T), PAD_ID, dtype=torch.long)
    for row, p in enumerate(prompts):
        ids[row, : len(p.token_ids)] = torch.tensor(p.token_ids, dtype=torch.long)
    emb = lm.lookup(ids, allow_slots=True).clone()

    user_rows, user_cols = (ids == USER_SLOT_ID).nonzero(as_tuple=True)
    item_rows, item_cols = (ids == ITEM_SLOT_ID).nonzero(as_tuple=True)
    if len(user_rows) and cie is None:
        raise ContractError("full prompts require a collaborative mapping module")
    if len(user_rows):
        user_ids = torch.tensor([prompts[int(r)].user_id for r in user_rows])
        histories = [prompts[int(r)].history for r in user_rows]
        emb[user_rows, user_cols] = cie.map_users(user_ids, histories).to(emb.dtype)
    if len(item_rows):
        item_ids = torch.tensor([prompts[int(r)].item_id for r in item_rows])
        emb[item_rows, item_cols] = cie.map_items(item_ids).to(emb.dtype)
    return emb, lengths


def answer_token(label: int) -> int:
    return YES_ID if label == 1 else NO_ID


def build_prompt_set(interactions, history_index, catalog, tokenizer, variant: str):
    """Render a list of interactions into prompts of the given variant."""
    render = render_full if variant == "full" else render_text_only
    out = []
    for it in interactions:
        sample = PromptSample(it, history_index.history(it.user_id, it.timestamp), catalog)
        out.append(render(sample, tokenizer))
    return out


def vocabulary_pieces(catalog):
    """Text pieces for tokenizer construction.

    Covers the template words plus every catalog title in each punctuation
    context the renderers produce (list-internal comma, sentence-final period,
    question mark), so any rendering over cataloged items is fully in-vocab,
    including items that never occur in the training interactions.
    """
    pieces = [
        _FULL_HEAD.format(history=EMPTY_HISTORY_MARKER),
        _FULL_MID.format(title=EMPTY_HISTORY_MARKER),
        _FULL_TAIL,
        _TEXT_ONLY.format(history=EMPTY_HISTORY_MARKER, title=EMPTY_HISTORY_MARKER),
    ]
    for title in catalog.values():
        pieces.extend((title, f"{title},", f"{title}.", f"{title}?"))
    return pieces
