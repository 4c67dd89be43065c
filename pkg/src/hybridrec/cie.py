"""Projection of collaborative representations into the LM embedding space.

One shared two-layer MLP (hidden width exactly 10x the input width) maps both
user and item vectors from d1 to the LM's d2. The module records which
parameter set is trainable in stage two: just the MLP ("phi") or the MLP
plus the collaborative encoder ("phi_psi").
"""

from __future__ import annotations

import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, IdRangeError

ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU, "silu": nn.SiLU}


class MappingMlp(nn.Module):
    """d1 -> 10*d1 -> d2 with a smooth rectifier in between."""

    def __init__(self, d1: int, d2: int, activation: str = "gelu", init_std: float = 0.02):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.d1 = d1
        self.d2 = d2
        self.activation = activation
        self.fc1 = nn.Linear(d1, 10 * d1)
        self.act = ACTIVATIONS[activation]()
        self.fc2 = nn.Linear(10 * d1, d2)
        nn.init.normal_(self.fc1.weight, std=init_std)
        nn.init.normal_(self.fc2.weight, std=init_std)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class CieModule(nn.Module):
    """Collaborative encoder plus mapping MLP; the source of e_u and e_i."""

    def __init__(self, encoder, mlp: MappingMlp, omega: str = "phi",
                 separate_item_mlp: bool = False):
        super().__init__()
        if omega not in ("phi", "phi_psi"):
            raise ConfigError(f"omega must be 'phi' or 'phi_psi', got {omega!r}")
        self.encoder = encoder
        self.mlp = mlp
        self.item_mlp = MappingMlp(mlp.d1, mlp.d2, mlp.activation) if separate_item_mlp else None
        self.omega = omega

    def _item_proj(self):
        return self.item_mlp if self.item_mlp is not None else self.mlp

    def map_user(self, user_id: int, history=None) -> torch.Tensor:
        return self.mlp(self.encoder.encode_user(user_id, history))

    def map_item(self, item_id: int) -> torch.Tensor:
        return self._item_proj()(self.encoder.encode_item(item_id))

    def map_users(self, user_ids, histories=None) -> torch.Tensor:
        return self.mlp(self.encoder.user_vectors(user_ids, histories))

    def map_items(self, item_ids) -> torch.Tensor:
        return self._item_proj()(self.encoder.item_vectors(item_ids))

    def phi_parameters(self):
        """Named mapping-layer parameters."""
        params = {f"cie.mlp.{n}": p for n, p in self.mlp.named_parameters()}
        if self.item_mlp is not None:
            params.update({f"cie.item_mlp.{n}": p for n, p in self.item_mlp.named_parameters()})
        return params

    def psi_parameters(self):
        """Named collaborative-encoder parameters."""
        return {f"cie.encoder.{n}": p for n, p in self.encoder.named_parameters()}


class UiTokenEmbeddings(nn.Module):
    """Ablation: fresh per-user/per-item d2 embeddings instead of a CIE.

    No collaborative encoder and no MLP; the tables are the only trainable
    parameters. API-compatible with CieModule for stage-two training.
    """

    omega = "phi"

    def __init__(self, n_users: int, n_items: int, d2: int, init_std: float = 0.02):
        super().__init__()
        self.n_users = n_users
        self.n_items = n_items
        self.user_table = nn.Embedding(n_users, d2)
        self.item_table = nn.Embedding(n_items, d2)
        nn.init.normal_(self.user_table.weight, std=init_std)
        nn.init.normal_(self.item_table.weight, std=init_std)

    def map_user(self, user_id: int, history=None):
        if not 0 <= user_id < self.n_users:
            raise IdRangeError(f"user id {user_id} outside [0, {self.n_users})")
        return self.user_table.weight[user_id]

    def map_item(self, item_id: int):
        if not 0 <= item_id < self.n_items:
            raise IdRangeError(f"item id {item_id} outside [0, {self.n_items})")
        return self.item_table.weight[item_id]

    def map_users(self, user_ids, histories=None):
        return self.user_table(torch.as_tensor(user_ids, dtype=torch.long))

    def map_items(self, item_ids):
        return self.item_table(torch.as_tensor(item_ids, dtype=torch.long))

    def trainable_parameters(self):
        return {f"ui_token.{n}": p for n, p in self.named_parameters()}


def save_cie(cie: CieModule, path, metadata=None):
    matrices = {
        name: tensor.detach().cpu().numpy()
        for name, tensor in cie.mlp.state_dict().items()
    }
    meta = {
        "kind": "cie_mlp",
        "d1": cie.mlp.d1,
        "d2": cie.mlp.d2,
        "activation": cie.mlp.activation,
        "omega": cie.omega,
        "encoder_kind": cie.encoder.kind,
    }
    meta.update(metadata or {})
    save_checkpoint(path, matrices, meta)


def load_mapping_mlp(path) -> MappingMlp:
    matrices, meta = load_checkpoint(path)
    mlp = MappingMlp(meta["d1"], meta["d2"], meta.get("activation", "gelu"))
    mlp.load_state_dict({k: torch.from_numpy(v) for k, v in matrices.items()})
    return mlp
