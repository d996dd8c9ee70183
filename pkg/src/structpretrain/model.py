"""Encoder (feature embedding, stacked GCN blocks, per-task layer mixing) and task decoders."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor

PRETRAIN_TASKS = ("rec", "rank", "cluster")
NTN_SLICES = 4
N_CENTRALITIES = 4


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    num_layers: int = 3
    activation: str = "relu"
    tasks: tuple[str, ...] = PRETRAIN_TASKS
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.hidden_dim < 4:
            raise ValueError("hidden_dim must be >= 4")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        ad.activation(self.activation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["tasks"] = tuple(d.get("tasks", PRETRAIN_TASKS))
        return cls(**d)


Params = dict  # name -> Tensor, insertion ordered


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _add(params: Params, name: str, value: np.ndarray) -> None:
    if name in params:
        raise KeyError(f"duplicate parameter name {name}")
    params[name] = ad.parameter(value, name=name)


def init_encoder(cfg: ModelConfig, rng: np.random.Generator, params: Params | None = None) -> Params:
    params = {} if params is None else params
    d = cfg.hidden_dim
    _add(params, "embed.E", glorot(rng, (4, d), 4, d))
    for l in range(1, cfg.num_layers + 1):
        init_gcn_block(params, f"gcn.{l}", d, rng)
    return params


def init_gcn_block(params: Params, prefix: str, d: int, rng: np.random.Generator) -> None:
    _add(params, f"{prefix}.W1", glorot(rng, (d, d), d, d))
    _add(params, f"{prefix}.W2", glorot(rng, (d, d), d, d))
    _add(params, f"{prefix}.bn_gamma", np.ones(d))
    _add(params, f"{prefix}.bn_kappa", np.zeros(d))


def init_mixing(params: Params, task: str, cfg: ModelConfig) -> None:
    _add(params, f"mix.{task}.psi", np.zeros(cfg.num_layers))
    _add(params, f"mix.{task}.alpha", np.ones(cfg.hidden_dim))


def init_ntn(params: Params, prefix: str, d: int, rng: np.random.Generator, out_dim: int = 1) -> None:
    k = NTN_SLICES
    # each slice is a bilinear form over d*d input products
    _add(params, f"{prefix}.W", glorot(rng, (k, d, d), d * d, 1))
    _add(params, f"{prefix}.V", glorot(rng, (k, 2 * d), 2 * d, k))
    _add(params, f"{prefix}.b", np.zeros(k))
    _add(params, f"{prefix}.head_w", glorot(rng, (k, out_dim), k, out_dim))
    _add(params, f"{prefix}.head_b", np.zeros(out_dim))


def init_mlp(params: Params, prefix: str, d_in: int, d_hidden: int, d_out: int,
             rng: np.random.Generator) -> None:
    _add(params, f"{prefix}.W1", glorot(rng, (d_in, d_hidden), d_in, d_hidden))
    _add(params, f"{prefix}.b1", np.zeros(d_hidden))
    _add(params, f"{prefix}.W2", glorot(rng, (d_hidden, d_out), d_hidden, d_out))
    _add(params, f"{prefix}.b2", np.zeros(d_out))


def init_pretrain_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    """Encoder, one mixing set per task and the decoders of every task in ``cfg.tasks``."""
    d = cfg.hidden_dim
    params = init_encoder(cfg, rng)
    for task in cfg.tasks:
        init_mixing(params, task, cfg)
    if "rec" in cfg.tasks:
        init_ntn(params, "rec.ntn", d, rng)
    if "rank" in cfg.tasks:
        for s in range(N_CENTRALITIES):
            init_mlp(params, f"rank.{s}", d, max(d // 2, 1), 1, rng)
    if "cluster" in cfg.tasks:
        init_ntn(params, "cluster.ntn", d, rng)
        _add(params, "cluster.attn.Wa", glorot(rng, (d, d), d, d))
        _add(params, "cluster.attn.q", glorot(rng, (d,), d, 1))
    return params


def encoder_param_names(cfg: ModelConfig) -> list[list[str]]:
    """Parameter names grouped by component: [E], [block 1], ..., [block L]."""
    groups = [["embed.E"]]
    for l in range(1, cfg.num_layers + 1):
        groups.append([f"gcn.{l}.{s}" for s in ("W1", "W2", "bn_gamma", "bn_kappa")])
    return groups


# ---------------------------------------------------------------------------
# forward pieces

def embed_features(x: np.ndarray | Tensor, E: Tensor) -> Tensor:
    x = ad.constant(x)
    if x.ndim != 2 or x.shape[1] != E.shape[0]:
        raise ad.ShapeError("embed_features", f"features {x.shape} vs embedding {E.shape}")
    return ad.tanh(ad.matmul(x, E))


def gcn_block(h: Tensor, a_hat: sp.spmatrix, W1: Tensor, W2: Tensor, gamma: Tensor, kappa: Tensor,
              act: str = "relu", eps: float = 1e-5) -> Tensor:
    """sigma(A_hat . norm(sigma(h W1) W2)) with batch norm taken over all nodes."""
    sigma = ad.activation(act)
    z = ad.matmul(sigma(ad.matmul(h, W1)), W2)
    return sigma(ad.spmm(a_hat, ad.batch_norm(z, gamma, kappa, eps)))


def block(params: Params, prefix: str, h: Tensor, a_hat, cfg: ModelConfig) -> Tensor:
    return gcn_block(h, a_hat, params[f"{prefix}.W1"], params[f"{prefix}.W2"],
                     params[f"{prefix}.bn_gamma"], params[f"{prefix}.bn_kappa"],
                     cfg.activation, cfg.bn_eps)


def encode(x: np.ndarray, a_hat: sp.spmatrix, params: Params, cfg: ModelConfig) -> list[Tensor]:
    """Layer outputs H^(1)..H^(L)."""
    h = embed_features(x, params["embed.E"])
    layers = []
    for l in range(1, cfg.num_layers + 1):
        h = block(params, f"gcn.{l}", h, a_hat, cfg)
        layers.append(h)
    return layers


def layer_weights(psi: Tensor) -> Tensor:
    return ad.softmax(psi)


def mix_layers(layers: Sequence[Tensor], psi: Tensor, alpha: Tensor) -> Tensor:
    """alpha * sum_l softmax(psi)_l H^(l)."""
    if len(layers) != psi.value.size:
        raise ad.ShapeError("mix_layers", f"{len(layers)} layers but {psi.value.size} mixing weights")
    return ad.mul(ad.weighted_sum(layers, layer_weights(psi)), alpha)


def task_representation(layers: Sequence[Tensor], params: Params, task: str) -> Tensor:
    return mix_layers(layers, params[f"mix.{task}.psi"], params[f"mix.{task}.alpha"])


def ntn_forward(xi: Tensor, xj: Tensor, params: Params, prefix: str) -> Tensor:
    """Row-paired NTN: tanh(x_i^T W^[1:k] x_j + V [x_i; x_j] + b), shape (P, k)."""
    V = params[f"{prefix}.V"]
    pre = ad.bilinear(xi, params[f"{prefix}.W"], xj)
    pre = ad.add(pre, ad.matmul(ad.concat([xi, xj], axis=1), ad.transpose(V)))
    return ad.tanh(ad.add(pre, params[f"{prefix}.b"]))


def ntn_head(h: Tensor, params: Params, prefix: str) -> Tensor:
    return ad.add(ad.matmul(h, params[f"{prefix}.head_w"]), params[f"{prefix}.head_b"])


def link_logits(f_rec: Tensor, pairs: np.ndarray, params: Params, prefix: str = "rec.ntn") -> Tensor:
    """Order-symmetrized scalar logit per node pair, shape (P,)."""
    xu = ad.gather_rows(f_rec, pairs[:, 0])
    xv = ad.gather_rows(f_rec, pairs[:, 1])
    fwd = ntn_head(ntn_forward(xu, xv, params, prefix), params, prefix)
    bwd = ntn_head(ntn_forward(xv, xu, params, prefix), params, prefix)
    return ad.reshape(ad.scale(ad.add(fwd, bwd), 0.5), (len(pairs),))


def mlp_forward(x: Tensor, params: Params, prefix: str) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.W1"]), params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.W2"]), params[f"{prefix}.b2"])


def rank_scores(f_rank: Tensor, params: Params) -> list[Tensor]:
    """One (n,) score vector per centrality head."""
    n = f_rank.shape[0]
    return [ad.reshape(mlp_forward(f_rank, params, f"rank.{s}"), (n,)) for s in range(N_CENTRALITIES)]


def cluster_embed(members: Tensor, params: Params, prefix: str = "cluster.attn") -> Tensor:
    """Attention pooling: weights softmax(q . tanh(W_a x_v)) over members, output (1, d)."""
    m, d = members.shape
    if m == 0:
        raise ad.ContractError("cluster_embed needs at least one member")
    q = ad.reshape(params[f"{prefix}.q"], (d, 1))
    scores = ad.matmul(ad.tanh(ad.matmul(members, params[f"{prefix}.Wa"])), q)
    weights = ad.softmax(ad.reshape(scores, (1, m)))
    return ad.matmul(weights, members)


def cluster_logits(queries: Tensor, clusters: Tensor, params: Params, prefix: str = "cluster.ntn") -> Tensor:
    """S(v, C) for every query row against every cluster row, shape (n_query, K)."""
    nq, d = queries.shape
    K = clusters.shape[0]
    V = params[f"{prefix}.V"]
    pre = ad.bilinear_cross(queries, params[f"{prefix}.W"], clusters)
    Vt = ad.transpose(V)  # (2d, k)
    q_lin = ad.matmul(queries, _rows(Vt, 0, d))
    c_lin = ad.matmul(clusters, _rows(Vt, d, 2 * d))
    pre = ad.add(pre, ad.gather_rows(q_lin, np.repeat(np.arange(nq), K)))
    pre = ad.add(pre, ad.gather_rows(c_lin, np.tile(np.arange(K), nq)))
    h = ad.tanh(ad.add(pre, params[f"{prefix}.b"]))
    return ad.reshape(ntn_head(h, params, prefix), (nq, K))


def _rows(t: Tensor, start: int, stop: int) -> Tensor:
    return ad.gather_rows(t, np.arange(start, stop))


def snapshot(params: Params) -> dict[str, np.ndarray]:
    return {k: v.value.copy() for k, v in params.items()}


def from_arrays(arrays: dict[str, np.ndarray]) -> Params:
    return {k: ad.parameter(v.copy(), name=k) for k, v in arrays.items()}
