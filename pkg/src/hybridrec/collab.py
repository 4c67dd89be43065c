"""Collaborative encoders: matrix factorization, LightGCN, and SASRec.

Each encoder maps a user or item index to a d1-dimensional representation.
Pretraining fits binary labels with BCE over an inner-product-plus-sigmoid
interaction module, Adam, and early stopping on validation AUC.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .data import HistoryIndex
from .errors import DataError, IdRangeError, ShapeError, TrainingError
from .evaluate import Prediction, auc


def score(u_vec, i_vec):
    """sigmoid(dot(u, i)); the interaction module used everywhere here."""
    u_vec = torch.as_tensor(u_vec)
    i_vec = torch.as_tensor(i_vec)
    if u_vec.shape != i_vec.shape:
        raise ShapeError(f"vector shapes differ: {tuple(u_vec.shape)} vs {tuple(i_vec.shape)}")
    return torch.sigmoid((u_vec * i_vec).sum(dim=-1))


class CollabEncoder(nn.Module):
    """Shared surface: encode_user / encode_item / batched vector lookups."""

    kind = "base"

    def __init__(self, n_users: int, n_items: int, d1: int):
        super().__init__()
        self.n_users = n_users
        self.n_items = n_items
        self.d1 = d1

    def _check_user(self, user_id):
        if not 0 <= user_id < self.n_users:
            raise IdRangeError(f"user id {user_id} outside [0, {self.n_users})")

    def _check_item(self, item_id):
        if not 0 <= item_id < self.n_items:
            raise IdRangeError(f"item id {item_id} outside [0, {self.n_items})")

    def encode_user(self, user_id: int, history=None) -> torch.Tensor:
        self._check_user(user_id)
        hist = [history] if self.needs_history else None
        return self.user_vectors(torch.tensor([user_id]), hist)[0]

    def encode_item(self, item_id: int) -> torch.Tensor:
        self._check_item(item_id)
        return self.item_vectors(torch.tensor([item_id]))[0]

    needs_history = False

    def forward(self, user_ids, item_ids, histories=None):
        u = self.user_vectors(user_ids, histories)
        i = self.item_vectors(item_ids)
        return (u * i).sum(dim=-1)


class MatrixFactorization(CollabEncoder):
    kind = "mf"

    def __init__(self, n_users, n_items, d1, init_std: float = 0.1):
        super().__init__(n_users, n_items, d1)
        self.user_emb = nn.Embedding(n_users, d1)
        self.item_emb = nn.Embedding(n_items, d1)
        nn.init.normal_(self.user_emb.weight, std=init_std)
        nn.init.normal_(self.item_emb.weight, std=init_std)

    def user_vectors(self, user_ids, histories=None):
        return self.user_emb(torch.as_tensor(user_ids, dtype=torch.long))

    def item_vectors(self, item_ids):
        return self.item_emb(torch.as_tensor(item_ids, dtype=torch.long))


class LightGCN(CollabEncoder):
    """Embedding propagation over the symmetric-normalized interaction graph.

    The graph comes from train positives only. Layer-0 through layer-L
    embeddings are mean-pooled; n_layers=0 degenerates to raw embeddings.
    Nodes with no edges keep their raw embeddings (their normalization factor
    is zero).
    """

    kind = "lightgcn"

    def __init__(self, n_users, n_items, d1, n_layers: int = 2, init_std: float = 0.1):
        super().__init__(n_users, n_items, d1)
        self.n_layers = n_layers
        self.user_emb = nn.Embedding(n_users, d1)
        self.item_emb = nn.Embedding(n_items, d1)
        nn.init.normal_(self.user_emb.weight, std=init_std)
        nn.init.normal_(self.item_emb.weight, std=init_std)
        # adjacency is data, not a parameter; rebuilt from train on load
        self._adj_indices = torch.zeros(2, 0, dtype=torch.long)
        self._adj_values = torch.zeros(0)
        self._has_graph = False

    def set_graph(self, train_interactions):
        """Build the normalized bipartite adjacency from train positives."""
        edges = {(it.user_id, it.item_id) for it in train_interactions if it.label == 1}
        n = self.n_users + self.n_items
        if not edges:
            self._adj_indices = torch.zeros(2, 0, dtype=torch.long)
            self._adj_values = torch.zeros(0)
            self._has_graph = True
            return
        rows, cols = [], []
        for u, i in sorted(edges):
            rows += [u, self.n_users + i]
            cols += [self.n_users + i, u]
        idx = torch.tensor([rows, cols], dtype=torch.long)
        deg = torch.zeros(n)
        deg.scatter_add_(0, idx[0], torch.ones(idx.shape[1]))
        inv_sqrt = torch.where(deg > 0, deg.pow(-0.5), torch.zeros_like(deg))
        vals = inv_sqrt[idx[0]] * inv_sqrt[idx[1]]
        self._adj_indices = idx
        self._adj_values = vals
        self._has_graph = True

    def propagate(self):
        if not self._has_graph:
            raise DataError("LightGCN graph not set; call set_graph(train) first")
        emb = torch.cat([self.user_emb.weight, self.item_emb.weight], dim=0)
        layers = [emb]
        n = emb.shape[0]
        adj = torch.sparse_coo_tensor(
            self._adj_indices, self._adj_values.to(emb.dtype), (n, n)
        )
        for _ in range(self.n_layers):
            emb = torch.sparse.mm(adj, emb)
            layers.append(emb)
        pooled = torch.stack(layers, dim=0).mean(dim=0)
        return pooled[: self.n_users], pooled[self.n_users :]

    def user_vectors(self, user_ids, histories=None):
        users, _ = self.propagate()
        return users[torch.as_tensor(user_ids, dtype=torch.long)]

    def item_vectors(self, item_ids):
        _, items = self.propagate()
        return items[torch.as_tensor(item_ids, dtype=torch.long)]

    def forward(self, user_ids, item_ids, histories=None):
        users, items = self.propagate()
        u = users[torch.as_tensor(user_ids, dtype=torch.long)]
        i = items[torch.as_tensor(item_ids, dtype=torch.long)]
        return (u * i).sum(dim=-1)


class SASRec(CollabEncoder):
    """Self-attention over each user's recent positive items.

    The user representation is the user's own embedding plus the causal
    attention output at the last history position; items use their raw
    embedding rows. Empty histories contribute a zero sequence vector.
    """

    kind = "sasrec"
    needs_history = True

    def __init__(self, n_users, n_items, d1, max_len: int = 10, n_heads: int = 1,
                 init_std: float = 0.1):
        super().__init__(n_users, n_items, d1)
        self.max_len = max_len
        self.user_emb = nn.Embedding(n_users, d1)
        # extra row n_items is the padding slot, kept at zero
        self.item_emb = nn.Embedding(n_items + 1, d1, padding_idx=n_items)
        self.pos_emb = nn.Embedding(max_len, d1)
        self.attn = nn.MultiheadAttention(d1, n_heads, batch_first=True)
        self.ln = nn.LayerNorm(d1)
        nn.init.normal_(self.user_emb.weight, std=init_std)
        nn.init.normal_(self.item_emb.weight, std=init_std)
        with torch.no_grad():
            self.item_emb.weight[n_items].zero_()
        nn.init.normal_(self.pos_emb.weight, std=init_std)

    def _history_ids(self, histories):
        """Pad history item-id lists to (B, max_len); returns ids and lengths."""
        pad = self.n_items
        batch = []
        lengths = []
        for h in histories:
            items = [i for i, _ in h.items] if hasattr(h, "items") else list(h)
            items = items[-self.max_len :]
            lengths.append(len(items))
            batch.append(items + [pad] * (self.max_len - len(items)))
        return (
            torch.tensor(batch, dtype=torch.long),
            torch.tensor(lengths, dtype=torch.long),
        )

    def position_outputs(self, histories):
        """Per-position attention outputs (B, max_len, d1) plus lengths."""
        ids, lengths = self._history_ids(histories)
        L = ids.shape[1]
        x = self.item_emb(ids) + self.pos_emb.weight[:L].unsqueeze(0)
        causal = torch.triu(torch.ones(L, L, dtype=torch.bool), diagonal=1)
        pad_mask = ids == self.n_items
        # rows with empty history would attend to nothing; give them position 0
        safe_pad = pad_mask.clone()
        safe_pad[:, 0] = False
        out, _ = self.attn(x, x, x, attn_mask=causal, key_padding_mask=safe_pad,
                           need_weights=False)
        return self.ln(out + x), lengths

    def sequence_repr(self, histories):
        out, lengths = self.position_outputs(histories)
        last = (lengths - 1).clamp(min=0)
        seq = out[torch.arange(out.shape[0]), last]
        return torch.where(lengths.view(-1, 1) > 0, seq, torch.zeros_like(seq))

    def user_vectors(self, user_ids, histories=None):
        user_ids = torch.as_tensor(user_ids, dtype=torch.long)
        base = self.user_emb(user_ids)
        if histories is None:
            histories = [[] for _ in range(len(user_ids))]
        return base + self.sequence_repr(histories)

    def item_vectors(self, item_ids):
        return self.item_emb(torch.as_tensor(item_ids, dtype=torch.long))


def make_encoder(kind: str, n_users: int, n_items: int, d1: int, **kwargs) -> CollabEncoder:
    kinds = {"mf": MatrixFactorization, "lightgcn": LightGCN, "sasrec": SASRec}
    if kind not in kinds:
        raise DataError(f"unknown encoder kind {kind!r}")
    return kinds[kind](n_users, n_items, d1, **kwargs)


def average_user_interactions(train) -> int:
    """Mean interactions per user in train, rounded up; SASRec's max_len."""
    if not train:
        return 1
    users = {}
    for it in train:
        users[it.user_id] = users.get(it.user_id, 0) + 1
    return max(1, int(np.ceil(len(train) / len(users))))


# --- pretraining --------------------------------------------------------------


def _history_lists(interactions, index: HistoryIndex):
    return [index.history(it.user_id, it.timestamp) for it in interactions]


def predict_split(encoder: CollabEncoder, interactions, history_index=None,
                  batch_size: int = 4096):
    """Score a list of interactions; returns Prediction rows."""
    encoder.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(interactions), batch_size):
            chunk = interactions[start : start + batch_size]
            users = torch.tensor([it.user_id for it in chunk])
            items = torch.tensor([it.item_id for it in chunk])
            hists = None
            if encoder.needs_history:
                hists = _history_lists(chunk, history_index)
            logits = encoder(users, items, hists)
            probs = torch.sigmoid(logits)
            preds.extend(
                Prediction(it.user_id, it.item_id, float(p), it.label)
                for it, p in zip(chunk, probs)
            )
    return preds


def pretrain(encoder: CollabEncoder, split, lr: float = 1e-3, weight_decay: float = 1e-5,
             batch_size: int = 512, max_epochs: int = 50, patience: int = 5,
             seed: int = 0, checkpoint_path=None, log=None):
    """BCE training with Adam; early stops on validation AUC.

    Returns (encoder, record) where record holds per-epoch losses and AUCs.
    On divergence the last finite checkpoint is written (if a path is given)
    and TrainingError raised.
    """
    if not split.train:
        raise DataError("empty training split")
    if isinstance(encoder, LightGCN):
        encoder.set_graph(split.train)
    history_index = HistoryIndex(split.train, max_len=getattr(encoder, "max_len", 10)) \
        if encoder.needs_history else None

    opt = torch.optim.Adam(encoder.parameters(), lr=lr, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    labels = torch.tensor([float(it.label) for it in split.train])
    record = {"train_loss": [], "valid_auc": []}
    best_auc, best_state, bad_epochs = -1.0, None, 0

    for epoch in range(max_epochs):
        encoder.train()
        order = torch.randperm(len(split.train), generator=gen)
        epoch_loss, n_seen = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            chunk = [split.train[int(j)] for j in idx]
            users = torch.tensor([it.user_id for it in chunk])
            items = torch.tensor([it.item_id for it in chunk])
            hists = _history_lists(chunk, history_index) if encoder.needs_history else None
            logits = encoder(users, items, hists)
            loss = nn.functional.binary_cross_entropy_with_logits(logits, labels[idx])
            if not torch.isfinite(loss):
                if checkpoint_path is not None:
                    save_encoder(encoder, checkpoint_path, {"diverged_epoch": epoch})
                raise TrainingError("collaborative pretraining diverged",
                                    checkpoint_path=checkpoint_path)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss) * len(chunk)
            n_seen += len(chunk)
        record["train_loss"].append(epoch_loss / n_seen)

        valid_auc = _valid_auc(encoder, split, history_index)
        record["valid_auc"].append(valid_auc)
        if log:
            log(f"epoch {epoch}: loss {record['train_loss'][-1]:.4f} valid_auc {valid_auc:.4f}")
        if valid_auc > best_auc:
            best_auc = valid_auc
            best_state = copy.deepcopy(encoder.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= patience:
                break

    if best_state is not None:
        encoder.load_state_dict(best_state)
    encoder.eval()
    record["best_valid_auc"] = best_auc
    if checkpoint_path is not None:
        save_encoder(encoder, checkpoint_path, {"best_valid_auc": best_auc})
    return encoder, record


def _valid_auc(encoder, split, history_index):
    rows = split.valid if split.valid else split.train
    try:
        return auc(predict_split(encoder, rows, history_index))
    except Exception:
        return float("nan")


# --- persistence --------------------------------------------------------------


def save_encoder(encoder: CollabEncoder, path, metadata=None):
    matrices = {
        name: tensor.detach().cpu().numpy()
        for name, tensor in encoder.state_dict().items()
        if tensor.is_floating_point()
    }
    meta = {
        "kind": encoder.kind,
        "n_users": encoder.n_users,
        "n_items": encoder.n_items,
        "d1": encoder.d1,
    }
    if isinstance(encoder, LightGCN):
        meta["n_layers"] = encoder.n_layers
    if isinstance(encoder, SASRec):
        meta["max_len"] = encoder.max_len
    meta.update(metadata or {})
    save_checkpoint(path, matrices, meta)


def load_encoder(path, train_interactions=None) -> CollabEncoder:
    matrices, meta = load_checkpoint(path)
    kwargs = {}
    if meta["kind"] == "lightgcn":
        kwargs["n_layers"] = meta.get("n_layers", 2)
    if meta["kind"] == "sasrec":
        kwargs["max_len"] = meta.get("max_len", 10)
    encoder = make_encoder(meta["kind"], meta["n_users"], meta["n_items"], meta["d1"], **kwargs)
    state = {name: torch.from_numpy(arr) for name, arr in matrices.items()}
    encoder.load_state_dict(state, strict=False)
    if isinstance(encoder, LightGCN):
        if train_interactions is None:
            raise DataError("LightGCN checkpoints need train interactions to rebuild the graph")
        encoder.set_graph(train_interactions)
    encoder.eval()
    return encoder


def valid_auc_of(encoder, split):
    history_index = HistoryIndex(split.train, max_len=getattr(encoder, "max_len", 10)) \
        if encoder.needs_history else None
    return auc(predict_split(encoder, split.valid, history_index))
