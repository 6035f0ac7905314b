"""Simplified GAT recommender with domain attention, mappers, losses and exact gradients.

Propagation drops the weight matrix and nonlinearity of the classic GAT:
every node's next embedding is a softmax-weighted sum over itself and its
neighbours, with logit ``a . (e_self || e_other)``. In the target domain a
client additionally links its user node to one virtual user per source
domain carrying that domain's mapped, perturbed knowledge row.

Training runs on client ego-graphs (a user, its items, and optionally its
virtual users). ``forward`` and ``backward`` process a batch of clients at
once; the objective is the client-weighted sum of per-client losses, so the
item/attention/mapper gradients it returns are already the server-side
weighted average, while the user gradients are per-client.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .graph import DomainGraph

MAPPER_HIDDEN = (16, 4)
PRED_CLAMP = 1e-12
SIM_FLOOR = 1e-8

VIRTUAL_MODES = ("attention", "average", "none")


class ModelError(ValueError):
    pass


# ------------------------------------------------------------- parameters

@dataclass
class GatParams:
    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    attention: np.ndarray
    n_layers: int
    dim: int

    def __post_init__(self):
        if self.dim < 1 or self.n_layers < 1:
            raise ModelError("dim and n_layers must be >= 1")
        if self.attention.shape != (2 * self.dim,):
            raise ModelError(f"attention vector must have length {2 * self.dim}")

    @classmethod
    def init(cls, n_users: int, n_items: int, dim: int, n_layers: int, rng: np.random.Generator, std: float = 0.1):
        return cls(
            rng.normal(0.0, std, size=(n_users, dim)),
            rng.normal(0.0, std, size=(n_items, dim)),
            rng.normal(0.0, std, size=2 * dim),
            n_layers,
            dim,
        )

    def copy(self) -> "GatParams":
        return GatParams(
            self.user_embeddings.copy(), self.item_embeddings.copy(), self.attention.copy(), self.n_layers, self.dim
        )

    def global_arrays(self) -> dict[str, np.ndarray]:
        """Server-held part of the model."""
        return {"item_embeddings": self.item_embeddings, "attention": self.attention}


@dataclass
class MapperMlp:
    """d -> 16 -> 4 -> d with ReLU between layers and a linear output.

    Hidden layers start He-initialised; the output layer starts at zero so a
    fresh mapper emits the zero vector and virtual users begin neutral.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "MapperMlp":
        sizes = (dim, *MAPPER_HIDDEN, dim)
        weights = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(sizes[:-2], sizes[1:-1])]
        weights.append(np.zeros((sizes[-2], sizes[-1])))
        biases = [np.zeros(b) for b in sizes[1:]]
        return cls(weights, biases)

    @classmethod
    def zeros(cls, dim: int) -> "MapperMlp":
        sizes = (dim, *MAPPER_HIDDEN, dim)
        return cls([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])], [np.zeros(b) for b in sizes[1:]])

    def copy(self) -> "MapperMlp":
        return MapperMlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01
    beta: float = 0.01

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ModelError("loss weights must be non-negative")


def params_digest(params: GatParams, mappers: list[MapperMlp] | None = None) -> str:
    h = hashlib.sha256()
    for a in (params.user_embeddings, params.item_embeddings, params.attention):
        h.update(np.ascontiguousarray(a).tobytes())
    for m in mappers or []:
        for a in m.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------- scalar pieces

def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ModelError("non-finite embedding entries")


def attention_coeffs(e_u: np.ndarray, neighbors: np.ndarray, attention: np.ndarray) -> np.ndarray:
    """Softmax over {u} + neighbours of ``a . (e_u || e_x)``; self coefficient first."""
    e_u = np.asarray(e_u, dtype=float)
    neighbors = np.asarray(neighbors, dtype=float).reshape(-1, len(e_u))
    _check_finite(e_u, neighbors)
    d = len(e_u)
    others = np.vstack([e_u[None, :], neighbors])
    logits = attention[:d] @ e_u + others @ attention[d:]
    w = np.exp(logits - logits.max())
    return w / w.sum()


def scatter_rows(index: np.ndarray, values: np.ndarray, n: int, is_sorted: bool = False) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets given by ``index``."""
    if is_sorted:
        out = np.zeros((n, values.shape[1]))
        if len(index):
            starts = np.flatnonzero(np.concatenate([[True], index[1:] != index[:-1]]))
            out[index[starts]] = np.add.reduceat(values, starts, axis=0)
        return out
    out = np.empty((n, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(index, weights=values[:, j], minlength=n)
    return out


def segment_softmax(logits: np.ndarray, seg: np.ndarray, n_seg: int) -> np.ndarray:
    """Softmax of ``logits`` within groups given by ``seg`` (max-shifted per group)."""
    top = np.full(n_seg, -np.inf)
    np.maximum.at(top, seg, logits)
    w = np.exp(logits - top[seg])
    return w / np.bincount(seg, weights=w, minlength=n_seg)[seg]


def propagate_layer(
    g: DomainGraph, user_emb: np.ndarray, item_emb: np.ndarray, attention: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One propagation step over a whole bipartite graph; returns next user and item embeddings."""
    _check_finite(user_emb, item_emb)
    d = user_emb.shape[1]
    a1, a2 = attention[:d], attention[d:]
    users, items = g.edges()
    nu, ni = g.n_users, g.n_items

    seg = np.concatenate([np.arange(nu), users])
    src = np.concatenate([user_emb, item_emb[items]])
    coef = segment_softmax(user_emb[seg] @ a1 + src @ a2, seg, nu)
    next_u = scatter_rows(seg, coef[:, None] * src, nu)

    seg = np.concatenate([np.arange(ni), items])
    src = np.concatenate([item_emb, user_emb[users]])
    coef = segment_softmax(item_emb[seg] @ a1 + src @ a2, seg, ni)
    next_i = scatter_rows(seg, coef[:, None] * src, ni)
    return next_u, next_i


def aggregate_target(
    x_t: np.ndarray, item_neighbors: np.ndarray, virtual: np.ndarray, attention: np.ndarray
) -> np.ndarray:
    """Target-side user update: one softmax over self, items and mapped virtual users."""
    x_t = np.asarray(x_t, dtype=float)
    d = len(x_t)
    item_neighbors = np.asarray(item_neighbors, dtype=float).reshape(-1, d)
    virtual = np.asarray(virtual, dtype=float).reshape(-1, d)
    nodes = np.vstack([item_neighbors, virtual])
    coef = attention_coeffs(x_t, nodes, attention)
    return coef[0] * x_t + coef[1:] @ nodes


def _relu(x):
    return np.maximum(x, 0.0)


def mlp_map(mapper: MapperMlp, x: np.ndarray) -> np.ndarray:
    h = np.asarray(x, dtype=float)
    last = len(mapper.weights) - 1
    for k, (w, b) in enumerate(zip(mapper.weights, mapper.biases)):
        h = h @ w + b
        if k < last:
            h = _relu(h)
    return h


def mapping_loss(x_t: np.ndarray, mapped: np.ndarray) -> float:
    """``x_t``: (L, d) target stack; ``mapped``: (K, L, d) mapped source stacks."""
    mapped = np.asarray(mapped, dtype=float).reshape(-1, *np.shape(x_t))
    return float(((np.asarray(x_t)[None] - mapped) ** 2).sum())


def _cosine(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cosine over the last axis; zero-norm rows give 0 and are flagged."""
    nx = np.linalg.norm(x, axis=-1)
    ny = np.linalg.norm(y, axis=-1)
    denom = nx * ny
    degenerate = denom == 0.0
    sim = np.where(degenerate, 0.0, (x * y).sum(-1) / np.where(degenerate, 1.0, denom))
    return sim, degenerate


@dataclass
class SocialReg:
    value: float
    degenerate: bool


def social_reg_loss(x_t: np.ndarray, perturbed: np.ndarray) -> SocialReg:
    """``x_t``: (L, d); ``perturbed``: (K, L, d) raw perturbed source stacks."""
    x_t = np.asarray(x_t, dtype=float)
    perturbed = np.asarray(perturbed, dtype=float).reshape(-1, *x_t.shape)
    if perturbed.shape[0] == 0:
        raise ModelError("social regularization needs at least one source domain")
    sim, degen = _cosine(x_t[None], perturbed)  # (K, L)
    s = sim.sum(0)
    floored = np.abs(s) <= SIM_FLOOR
    s = np.where(floored, SIM_FLOOR, s)
    mean = (sim[..., None] * perturbed).sum(0) / s[:, None]
    return SocialReg(float(((x_t - mean) ** 2).sum()), bool(degen.any() or floored.any()))


def predict(e_u: np.ndarray, e_v: np.ndarray) -> float:
    return float(expit(np.dot(e_u, e_v)))


def bce(pred: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    return -(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))


def total_loss(predictions, labels, l_m: float, l_s: float, weights: LossWeights = LossWeights()) -> float:
    predictions = np.asarray(predictions, dtype=float)
    labels = np.asarray(labels, dtype=float)
    return float(bce(predictions, labels).mean() + 0.5 * weights.alpha * l_m + 0.5 * weights.beta * l_s)


# ------------------------------------------------------- batched engine

def _check_grouped(owner: np.ndarray) -> None:
    if len(owner) > 1 and np.any(owner[1:] < owner[:-1]):
        raise ModelError("samples must be grouped by client in ascending order")


@dataclass
class ClientBatch:
    """Ego-graphs and labelled samples of a set of clients.

    ``knowledge`` holds each client's perturbed source stacks, shape
    (B, K, L, d) with sources in ascending domain order, or None.
    """

    users: np.ndarray
    indptr: np.ndarray
    items: np.ndarray
    sample_owner: np.ndarray
    sample_item: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    knowledge: np.ndarray | None = None

    def __post_init__(self):
        _check_grouped(self.sample_owner)

    @property
    def size(self) -> int:
        return len(self.users)

    @property
    def item_owner(self) -> np.ndarray:
        return np.repeat(np.arange(self.size), np.diff(self.indptr))

    @property
    def sample_counts(self) -> np.ndarray:
        return np.bincount(self.sample_owner, minlength=self.size)

    @property
    def n_sources(self) -> int:
        return 0 if self.knowledge is None else self.knowledge.shape[1]

    def subset(self, clients: np.ndarray) -> "ClientBatch":
        """The batch restricted to the given client positions (in the given order)."""
        clients = np.asarray(clients, dtype=np.int64)
        pos = np.full(self.size, -1)
        pos[clients] = np.arange(len(clients))
        deg = np.diff(self.indptr)[clients]
        items = np.concatenate([self.items[self.indptr[c] : self.indptr[c + 1]] for c in clients]) if len(clients) else self.items[:0]
        keep = np.flatnonzero(pos[self.sample_owner] >= 0)
        keep = keep[np.argsort(pos[self.sample_owner[keep]], kind="stable")]
        return ClientBatch(
            self.users[clients],
            np.concatenate([[0], np.cumsum(deg)]).astype(np.int64),
            items.astype(np.int64),
            pos[self.sample_owner[keep]],
            self.sample_item[keep],
            self.labels[keep],
            self.weights[clients],
            None if self.knowledge is None else self.knowledge[clients],
        )


@dataclass
class ModelOptions:
    virtual_mode: str = "attention"
    use_mapper: bool = True
    final: str = "last"

    def __post_init__(self):
        if self.virtual_mode not in VIRTUAL_MODES:
            raise ModelError(f"virtual_mode must be one of {VIRTUAL_MODES}")
        if self.final not in ("last", "mean"):
            raise ModelError("final must be 'last' or 'mean'")


@dataclass
class OpCounter:
    """Multiply-add tallies of the forward propagation."""

    edge_macs: int = 0
    virtual_macs: int = 0
    self_macs: int = 0
    mapper_macs: int = 0

    def add(self, other: "OpCounter") -> None:
        self.edge_macs += other.edge_macs
        self.virtual_macs += other.virtual_macs
        self.self_macs += other.self_macs
        self.mapper_macs += other.mapper_macs


@dataclass
class Forward:
    loss: float
    client_loss: np.ndarray
    client_bce: np.ndarray
    client_lm: np.ndarray
    client_ls: np.ndarray
    user_final: np.ndarray
    user_layers: list[np.ndarray]
    attention_sums: list[np.ndarray]
    degenerate: bool
    ops: OpCounter
    cache: dict = field(repr=False, default_factory=dict)


@dataclass
class Grads:
    users: np.ndarray
    items: np.ndarray
    attention: np.ndarray
    mappers: list[MapperMlp]

    def global_arrays(self) -> dict[str, np.ndarray]:
        out = {"item_embeddings": self.items, "attention": self.attention}
        for k, m in enumerate(self.mappers):
            for j, a in enumerate(m.arrays()):
                out[f"mapper{k}.{j}"] = a
        return out


def _mlp_forward(m: MapperMlp, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    last = len(m.weights) - 1
    for k, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = h @ w + b
        pre.append(z)
        h = _relu(z) if k < last else z
        acts.append(h)
    return h, (acts, pre)


def _mlp_backward(m: MapperMlp, cache, grad_out: np.ndarray) -> MapperMlp:
    acts, pre = cache
    gw, gb = [None] * len(m.weights), [None] * len(m.weights)
    g = grad_out
    for k in range(len(m.weights) - 1, -1, -1):
        if k < len(m.weights) - 1:
            g = g * (pre[k] > 0)
        gw[k] = acts[k].T @ g
        gb[k] = g.sum(0)
        g = g @ m.weights[k].T
    return MapperMlp(gw, gb)


def forward(
    params: GatParams,
    batch: ClientBatch,
    mappers: list[MapperMlp] | None = None,
    loss_weights: LossWeights = LossWeights(),
    options: ModelOptions = ModelOptions(),
    user_embeddings: np.ndarray | None = None,
) -> Forward:
    """Run every client's ego-graph forward and evaluate the weighted objective.

    ``user_embeddings`` (B, d) overrides the layer-0 user rows, which lets a
    client supply its locally held embedding.
    """
    d, L = params.dim, params.n_layers
    a1, a2 = params.attention[:d], params.attention[d:]
    B = batch.size
    owner = batch.item_owner
    nnz = len(batch.items)
    K = batch.n_sources if options.virtual_mode != "none" else 0
    if K and batch.knowledge.shape[2:] != (L, d):
        raise ModelError(f"knowledge stacks must be (L, d) = {(L, d)}, got {batch.knowledge.shape[2:]}")
    if K and options.use_mapper and (mappers is None or len(mappers) != K):
        raise ModelError(f"need {K} mappers, got {0 if mappers is None else len(mappers)}")
    ops = OpCounter()

    # mapped[l] is (B, K, d) for l = 1..L (index l - 1)
    mapped = []
    mlp_cache = []
    if K:
        raw = batch.knowledge
        out = np.empty_like(raw)
        for k in range(K):
            x = raw[:, k].reshape(B * L, d)
            if options.use_mapper:
                y, c = _mlp_forward(mappers[k], x)
                mlp_cache.append(c)
                ops.mapper_macs += B * L * sum(w.size for w in mappers[k].weights)
            else:
                y = x
            out[:, k] = y.reshape(B, L, d)
        mapped = [out[:, :, l] for l in range(L)]

    h_u0 = params.user_embeddings[batch.users] if user_embeddings is None else np.asarray(user_embeddings, dtype=float)
    h_v0 = params.item_embeddings[batch.items]
    _check_finite(h_u0, h_v0)
    hu, hv = [h_u0], [h_v0]
    layers = []
    attention_sums = []
    for l in range(L):
        u, v = hu[-1], hv[-1]
        base = u @ a1
        s_self = base + u @ a2
        s_item = base[owner] + v @ a2
        m = mapped[l] if K else None
        if K and options.virtual_mode == "attention":
            s_virt = base[:, None] + m @ a2
        else:
            s_virt = np.empty((B, 0))
        top = np.maximum(s_self, s_virt.max(axis=1, initial=-np.inf))
        np.maximum.at(top, owner, s_item)
        w_self = np.exp(s_self - top)
        w_item = np.exp(s_item - top[owner])
        w_virt = np.exp(s_virt - top[:, None])
        z = w_self + np.bincount(owner, weights=w_item, minlength=B) + w_virt.sum(1)
        p_self, p_item, p_virt = w_self / z, w_item / z[owner], w_virt / z[:, None]
        attention_sums.append(p_self + np.bincount(owner, weights=p_item, minlength=B) + p_virt.sum(1))

        new_u = p_self[:, None] * u + scatter_rows(owner, p_item[:, None] * v, B, True)
        if K and options.virtual_mode == "attention":
            new_u += (p_virt[:, :, None] * m).sum(1)
        elif K and options.virtual_mode == "average":
            new_u = (new_u + m.sum(1)) / (K + 1)

        # items inside the star see only themselves and the centre user
        q_base = v @ a1
        s_vv = q_base + v @ a2
        s_vu = q_base + u[owner] @ a2
        top_v = np.maximum(s_vv, s_vu)
        e_vv, e_vu = np.exp(s_vv - top_v), np.exp(s_vu - top_v)
        q_vv, q_vu = e_vv / (e_vv + e_vu), e_vu / (e_vv + e_vu)
        new_v = q_vv[:, None] * v + q_vu[:, None] * u[owner]

        ops.edge_macs += 2 * 3 * d * nnz
        ops.self_macs += 3 * d * (B + nnz)
        if K:
            ops.virtual_macs += 3 * d * B * K
        layers.append(dict(p_self=p_self, p_item=p_item, p_virt=p_virt, q_vv=q_vv, q_vu=q_vu))
        hu.append(new_u)
        hv.append(new_v)

    user_final = hu[L] if options.final == "last" else sum(hu) / (L + 1)
    v_s = params.item_embeddings[batch.sample_item]
    logits = (user_final[batch.sample_owner] * v_s).sum(1)
    pred = expit(logits)
    bce_s = bce(pred, batch.labels)
    counts = batch.sample_counts
    safe = np.maximum(counts, 1)
    client_bce = np.bincount(batch.sample_owner, weights=bce_s, minlength=B) / safe

    client_lm = np.zeros(B)
    client_ls = np.zeros(B)
    degenerate = False
    ls_cache = []
    if K and options.use_mapper:
        for l in range(L):
            client_lm += ((hu[l + 1][:, None, :] - mapped[l]) ** 2).sum((1, 2))
    if K:
        for l in range(L):
            x = hu[l + 1]
            xh = batch.knowledge[:, :, l]  # (B, K, d)
            nx = np.linalg.norm(x, axis=1)
            ny = np.linalg.norm(xh, axis=2)
            den = nx[:, None] * ny
            deg_mask = den == 0.0
            sim = np.where(deg_mask, 0.0, (x[:, None, :] * xh).sum(2) / np.where(deg_mask, 1.0, den))
            s_raw = sim.sum(1)
            floored = np.abs(s_raw) <= SIM_FLOOR
            s = np.where(floored, SIM_FLOOR, s_raw)
            num = (sim[:, :, None] * xh).sum(1)
            t = num / s[:, None]
            r = x - t
            client_ls += (r**2).sum(1)
            degenerate = degenerate or bool(deg_mask.any() or floored.any())
            ls_cache.append(dict(sim=sim, s=s, floored=floored, t=t, r=r, nx=nx, ny=ny, deg=deg_mask, xh=xh))

    alpha = loss_weights.alpha if options.use_mapper else 0.0
    client_loss = client_bce + 0.5 * alpha * client_lm + 0.5 * loss_weights.beta * client_ls
    loss = float(batch.weights @ client_loss)
    cache = dict(
        hu=hu, hv=hv, layers=layers, mapped=mapped, mlp=mlp_cache, pred=pred, v_s=v_s,
        counts=safe, ls=ls_cache, K=K, alpha=alpha, beta=loss_weights.beta, options=options,
        mappers=mappers,
    )
    return Forward(
        loss, client_loss, client_bce, client_lm, client_ls, user_final, hu[1:], attention_sums,
        degenerate, ops, cache,
    )


def backward(
    params: GatParams, batch: ClientBatch, fwd: Forward, upstream: list[np.ndarray] | None = None
) -> Grads:
    """Exact gradient of ``fwd.loss`` (the client-weighted objective).

    Knowledge stacks are constants: no gradient reaches source-domain parameters.
    ``upstream`` optionally adds d(extra)/d(user layer l) for l = 1..L, so any
    function of ``fwd.user_layers`` can be differentiated through the graph.
    """
    c = fwd.cache
    d, L = params.dim, params.n_layers
    a1, a2 = params.attention[:d], params.attention[d:]
    B = batch.size
    owner = batch.item_owner
    K = c["K"]
    opts: ModelOptions = c["options"]
    hu, hv, mapped = c["hu"], c["hv"], c["mapped"]
    w = batch.weights

    g_items = np.zeros_like(params.item_embeddings)
    g_a1 = np.zeros(d)
    g_a2 = np.zeros(d)
    g_hu = [np.zeros((B, d)) for _ in range(L + 1)]
    g_hv = [np.zeros_like(hv[0]) for _ in range(L + 1)]
    g_mapped = [np.zeros((B, K, d)) for _ in range(L)] if K else []
    if upstream is not None:
        for l in range(L):
            g_hu[l + 1] += upstream[l]

    # prediction loss
    pred = c["pred"]
    inside = (pred > PRED_CLAMP) & (pred < 1.0 - PRED_CLAMP)
    g_logit = np.where(inside, pred - batch.labels, 0.0) * (w / c["counts"])[batch.sample_owner]
    g_final = scatter_rows(batch.sample_owner, g_logit[:, None] * c["v_s"], B, True)
    user_final = fwd.user_final
    g_items += scatter_rows(batch.sample_item, g_logit[:, None] * user_final[batch.sample_owner], len(g_items))
    if opts.final == "last":
        g_hu[L] += g_final
    else:
        for l in range(L + 1):
            g_hu[l] += g_final / (L + 1)

    # mapping loss
    if K and opts.use_mapper and c["alpha"]:
        for l in range(L):
            r = hu[l + 1][:, None, :] - mapped[l]
            g = c["alpha"] * w[:, None, None] * r
            g_hu[l + 1] += g.sum(1)
            g_mapped[l] -= g

    # social regularization
    if K and c["beta"]:
        for l, sc in enumerate(c["ls"]):
            x = hu[l + 1]
            gr = c["beta"] * w[:, None] * sc["r"]
            gx = gr.copy()
            gt = -gr
            s = sc["s"]
            g_num = gt / s[:, None]
            g_s = np.where(sc["floored"], 0.0, -(gt * sc["t"]).sum(1) / s)
            g_sim = (g_num[:, None, :] * sc["xh"]).sum(2) + g_s[:, None]
            g_sim = np.where(sc["deg"], 0.0, g_sim)
            nx = np.where(sc["nx"] == 0.0, 1.0, sc["nx"])
            ny = np.where(sc["ny"] == 0.0, 1.0, sc["ny"])
            dsim_dx = sc["xh"] / (nx[:, None, None] * ny[:, :, None]) - sc["sim"][:, :, None] * x[:, None, :] / (nx**2)[:, None, None]
            gx += (g_sim[:, :, None] * dsim_dx).sum(1)
            g_hu[l + 1] += gx

    # propagation layers, last to first
    for l in range(L - 1, -1, -1):
        st = c["layers"][l]
        u, v = hu[l], hv[l]
        gu_out, gv_out = g_hu[l + 1], g_hv[l + 1]

        # item side: new_v = q_vv v + q_vu u[owner]
        q_vv, q_vu = st["q_vv"], st["q_vu"]
        u_o = u[owner]
        dq_vv = (gv_out * v).sum(1)
        dq_vu = (gv_out * u_o).sum(1)
        g_hv[l] += q_vv[:, None] * gv_out
        to_user = q_vu[:, None] * gv_out
        mean = q_vv * dq_vv + q_vu * dq_vu
        ds_vv = q_vv * (dq_vv - mean)
        ds_vu = q_vu * (dq_vu - mean)
        g_hv[l] += (ds_vv + ds_vu)[:, None] * a1[None, :] + ds_vv[:, None] * a2[None, :]
        to_user += ds_vu[:, None] * a2[None, :]
        g_hu[l] += scatter_rows(owner, to_user, B, True)
        g_a1 += (ds_vv + ds_vu) @ v
        g_a2 += ds_vv @ v + ds_vu @ u_o

        # user side
        p_self, p_item, p_virt = st["p_self"], st["p_item"], st["p_virt"]
        g = gu_out
        if K and opts.virtual_mode == "average":
            g_mapped[l] += g[:, None, :] / (K + 1)
            g = g / (K + 1)
        dp_self = (g * u).sum(1)
        dp_item = (g[owner] * v).sum(1)
        g_hu[l] += p_self[:, None] * g
        g_hv[l] += p_item[:, None] * g[owner]
        mean = p_self * dp_self + np.bincount(owner, weights=p_item * dp_item, minlength=B)
        if K and opts.virtual_mode == "attention":
            m = mapped[l]
            dp_virt = (g[:, None, :] * m).sum(2)
            g_mapped[l] += p_virt[:, :, None] * g[:, None, :]
            mean = mean + (p_virt * dp_virt).sum(1)
            ds_virt = p_virt * (dp_virt - mean[:, None])
            g_mapped[l] += ds_virt[:, :, None] * a2
            g_a2 += np.einsum("bk,bkd->d", ds_virt, m)
            ds_virt_sum = ds_virt.sum(1)
        else:
            ds_virt_sum = 0.0
        ds_self = p_self * (dp_self - mean)
        ds_item = p_item * (dp_item - mean[owner])
        ds_total = ds_self + np.bincount(owner, weights=ds_item, minlength=B) + ds_virt_sum
        g_hu[l] += ds_total[:, None] * a1 + ds_self[:, None] * a2
        g_hv[l] += ds_item[:, None] * a2
        g_a1 += ds_total @ u
        g_a2 += ds_self @ u + ds_item @ v

    g_items += scatter_rows(batch.items, g_hv[0], len(g_items))

    g_mappers: list[MapperMlp] = []
    if K and opts.use_mapper:
        stacked = np.stack(g_mapped, axis=2)  # (B, K, L, d)
        for k in range(K):
            g_mappers.append(_mlp_backward(c["mappers"][k], c["mlp"][k], stacked[:, k].reshape(B * L, d)))
    return Grads(g_hu[0], g_items, np.concatenate([g_a1, g_a2]), g_mappers)


# ------------------------------------------------------------ fine-tuning

@dataclass
class FinetuneBatch:
    sample_owner: np.ndarray
    sample_item: np.ndarray
    labels: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        _check_grouped(self.sample_owner)


def finetune_loss_grad(
    user_final: np.ndarray, item_final: np.ndarray, batch: FinetuneBatch
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted prediction loss on free final embeddings and its gradients."""
    B = len(user_final)
    counts = np.maximum(np.bincount(batch.sample_owner, minlength=B), 1)
    eu = user_final[batch.sample_owner]
    ev = item_final[batch.sample_item]
    pred = expit((eu * ev).sum(1))
    client_bce = np.bincount(batch.sample_owner, weights=bce(pred, batch.labels), minlength=B) / counts
    loss = float(batch.weights @ client_bce)
    inside = (pred > PRED_CLAMP) & (pred < 1.0 - PRED_CLAMP)
    g = np.where(inside, pred - batch.labels, 0.0) * (batch.weights / counts)[batch.sample_owner]
    gu = scatter_rows(batch.sample_owner, g[:, None] * ev, B, True)
    gi = scatter_rows(batch.sample_item, g[:, None] * eu, len(item_final))
    return loss, gu, gi


def finetune_step(
    user_final: np.ndarray, item_final: np.ndarray, batch: FinetuneBatch, lr: float
) -> tuple[np.ndarray, np.ndarray, float]:
    """One plain gradient step on the free final embeddings; GAT parameters are untouched."""
    loss, gu, gi = finetune_loss_grad(user_final, item_final, batch)
    return user_final - lr * gu, item_final - lr * gi, loss


# ------------------------------------------------------------ checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: GatParams, mappers: list[MapperMlp] | None = None, **extra: np.ndarray) -> None:
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "n_layers": np.array(params.n_layers),
        "dim": np.array(params.dim),
        "user_embeddings": params.user_embeddings,
        "item_embeddings": params.item_embeddings,
        "attention": params.attention,
        "n_mappers": np.array(len(mappers or [])),
    }
    for k, m in enumerate(mappers or []):
        for j, a in enumerate(m.arrays()):
            arrays[f"mapper{k}_{j}"] = a
    for key, val in extra.items():
        arrays[f"extra_{key}"] = np.asarray(val)
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[GatParams, list[MapperMlp], dict[str, np.ndarray]]:
    with np.load(path) as z:
        if int(z["format_version"]) != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {int(z['format_version'])}")
        params = GatParams(
            z["user_embeddings"].copy(), z["item_embeddings"].copy(), z["attention"].copy(),
            int(z["n_layers"]), int(z["dim"]),
        )
        mappers = []
        for k in range(int(z["n_mappers"])):
            arr = [z[f"mapper{k}_{j}"].copy() for j in range(2 * (len(MAPPER_HIDDEN) + 1))]
            mappers.append(MapperMlp(arr[0::2], arr[1::2]))
        extra = {key[6:]: z[key].copy() for key in z.files if key.startswith("extra_")}
    return params, mappers, extra
