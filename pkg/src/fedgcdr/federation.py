"""The horizontal-vertical-horizontal pipeline as in-process servers and clients.

Stage 1 trains every source domain with synchronous federated rounds. Stage 2
runs inside each client: source stacks are extracted, clipped and perturbed
without touching any server. Stage 3 trains the target domain on the
expanded ego-graphs, then fine-tunes the final embeddings with the
propagation frozen.

User embeddings never leave their client. The server holds the item table,
the attention vector and (in the target domain) the mapper MLPs, broadcasts
them each round, and applies one Adam step with the sample-weighted average
of the uploaded gradients.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import gatmodel as gm
from .costledger import CostModel, DomainShape, MessageLedger, mapper_param_count, model_message_size
from .dataset import InteractionSet, SplitPair, UserRegistry, eval_negatives, leave_one_out_split
from .evalkit import MetricsReport, evaluate
from .graph import DomainGraph, build_bipartite_graph
from .optim import Adam, RowAdam
from .rng import substream
from .transfer import DpParams, KnowledgeTensor, SourceModel, prepare_transfer_many

log = logging.getLogger(__name__)

MODES = ("full", "ablate-M", "ablate-T", "single-domain")


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    target_domain: int = 0
    rounds: int = 150
    finetune_epochs: int = 300
    client_fraction: float = 1.0
    batch_size: int = 256
    lr: float = 0.01
    finetune_lr: float = 0.01
    alpha: float = 0.01
    beta: float = 0.01
    epsilon: float = 8.0
    delta: float = 1e-5
    clip_norm: float = 1.0
    dp_enabled: bool = True
    noise_multiplier: float = 0.0  # 0 derives sigma from epsilon and delta
    mode: str = "full"
    dim: int = 8
    n_layers: int = 2
    neg_per_positive: int = 4
    eval_negatives: int = 99
    ks: tuple[int, ...] = (5, 10)
    final: str = "last"
    sparse_uploads: bool = False
    record_history: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise PipelineError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.client_fraction <= 1:
            raise PipelineError("client_fraction must lie in (0, 1]")
        if self.rounds < 0 or self.finetune_epochs < 0:
            raise PipelineError("rounds and finetune_epochs must be >= 0")
        if self.batch_size < 1 or self.neg_per_positive < 1:
            raise PipelineError("batch_size and neg_per_positive must be >= 1")
        _ = self.dp  # validates the privacy settings early

    @property
    def loss_weights(self) -> gm.LossWeights:
        return gm.LossWeights(self.alpha, self.beta)

    @property
    def dp(self) -> DpParams:
        return DpParams(self.epsilon, self.delta, self.clip_norm, self.dp_enabled, self.noise_multiplier)

    def model_options(self) -> gm.ModelOptions:
        virtual = {"full": "attention", "ablate-T": "attention", "ablate-M": "average", "single-domain": "none"}
        return gm.ModelOptions(virtual[self.mode], self.mode in ("full", "ablate-M"), self.final)

    @property
    def uses_finetune(self) -> bool:
        return self.mode in ("full", "ablate-T")


@dataclass
class FederatedData:
    """Per-domain leave-one-out splits over one user registry (domain ids ascending)."""

    splits: dict[int, SplitPair]
    registry: UserRegistry

    @classmethod
    def from_interactions(cls, domains: Sequence[InteractionSet], registry: UserRegistry) -> "FederatedData":
        return cls({d.domain_id: leave_one_out_split(d) for d in domains}, registry)

    @property
    def domain_ids(self) -> list[int]:
        return sorted(self.splits)


# ------------------------------------------------------------------ actors

class DomainServer:
    """Holds one domain's global model and optimizer; changes only at round boundaries."""

    def __init__(self, domain_id: int, params: gm.GatParams, mappers: list[gm.MapperMlp], lr: float):
        self.domain_id = domain_id
        self.params = params
        self.mappers = mappers
        self.optimizer = Adam(lr)
        self.round = 0
        self.history: list[dict[str, np.ndarray]] | None = None

    def global_arrays(self) -> dict[str, np.ndarray]:
        out = {"item_embeddings": self.params.item_embeddings, "attention": self.params.attention}
        for k, m in enumerate(self.mappers):
            for j, a in enumerate(m.arrays()):
                out[f"mapper{k}.{j}"] = a
        return out

    @property
    def message_size(self) -> int:
        maps = sum(m.n_params for m in self.mappers)
        return model_message_size(self.params.item_embeddings.shape[0], self.params.dim, maps)

    def apply(self, aggregate: dict[str, np.ndarray]) -> None:
        if self.history is not None:
            self.history.append({k: v.copy() for k, v in aggregate.items()})
        self.optimizer.step(self.global_arrays(), aggregate)
        self.round += 1


def aggregate_uploads(uploads: dict[int, tuple[int, dict[str, np.ndarray]]]) -> dict[str, np.ndarray]:
    """Sample-count weighted mean of per-client gradients, reduced in client-id order."""
    total = sum(n for n, _ in uploads.values())
    out: dict[str, np.ndarray] = {}
    for cid in sorted(uploads):
        n, grads = uploads[cid]
        for k, g in grads.items():
            if k not in out:
                out[k] = np.zeros_like(g)
            out[k] += (n / total) * g
    return out


@dataclass
class RoundData:
    """Clients taking part in one round with their ego-graphs and sampled training pairs."""

    batch: gm.ClientBatch
    clients: np.ndarray
    flagged_replacement: int


def sample_round(
    graph: DomainGraph, clients: np.ndarray, cfg: PipelineConfig, rng: np.random.Generator,
    knowledge: np.ndarray | None = None,
) -> RoundData:
    """Positives plus ``k`` rejection-sampled negatives per positive.

    A client whose samples would exceed ``batch_size`` trains on a uniform
    subset of ``batch_size // (k + 1)`` of its positives (at least one).
    """
    clients = np.asarray(clients, dtype=np.int64)
    I = graph.n_items
    k = cfg.neg_per_positive
    deg = graph.degrees()[clients]
    indptr = np.concatenate([[0], np.cumsum(deg)]).astype(np.int64)
    owner = np.repeat(np.arange(len(clients)), deg)
    items = graph.user_items[graph.user_indptr[clients][owner] + np.arange(len(owner)) - indptr[owner]]

    cap = max(1, cfg.batch_size // (k + 1))
    take = np.minimum(deg, cap)
    p_owner, p_item = owner, items
    over = deg > cap
    if over.any():
        # random rank within each over-cap client; keep the first ``cap``
        keep = ~over[owner]
        sel = np.flatnonzero(over[owner])
        o = owner[sel]
        order = np.argsort(o + rng.random(len(sel)))
        rank = np.empty(len(sel), dtype=np.int64)
        rank[order] = np.arange(len(sel)) - np.repeat(np.concatenate([[0], np.cumsum(deg[over])])[:-1], deg[over])
        keep[sel[rank < cap]] = True
        p_owner, p_item = owner[keep], items[keep]

    neg_owner = np.repeat(p_owner, k)
    neg = rng.integers(0, I, size=len(neg_owner))
    pos_keys = clients[owner] * I + items  # sorted: clients ascending, items sorted
    full = deg[neg_owner] >= I

    def is_positive(keys):
        at = np.minimum(np.searchsorted(pos_keys, keys), max(len(pos_keys) - 1, 0))
        return pos_keys[at] == keys if len(pos_keys) else np.zeros(len(keys), bool)

    bad = ~full & is_positive(clients[neg_owner] * I + neg)
    while bad.any():
        neg[bad] = rng.integers(0, I, size=int(bad.sum()))
        bad[bad] = is_positive(clients[neg_owner[bad]] * I + neg[bad])

    # lay samples out client by client: positives, then that client's negatives
    t_ptr = np.concatenate([[0], np.cumsum(take)])
    n = len(p_owner) * (1 + k)
    s_owner = np.repeat(np.arange(len(clients)), take * (1 + k))
    s_item = np.empty(n, dtype=np.int64)
    labels = np.zeros(n)
    base = (1 + k) * t_ptr[p_owner]
    pos_at = base + np.arange(len(p_owner)) - t_ptr[p_owner]
    s_item[pos_at] = p_item
    labels[pos_at] = 1.0
    nb = (1 + k) * t_ptr[neg_owner]
    neg_at = nb + take[neg_owner] + np.arange(len(neg)) - k * t_ptr[neg_owner]
    s_item[neg_at] = neg

    counts = (take * (1 + k)).astype(float)
    weights = counts / counts.sum() if counts.sum() else counts
    batch = gm.ClientBatch(clients, indptr, items.astype(np.int64), s_owner, s_item, labels, weights, knowledge)
    return RoundData(batch, clients, int((deg >= I).sum()))


def select_clients(n_users: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if fraction >= 1.0:
        return np.arange(n_users)
    n = max(1, int(round(fraction * n_users)))
    return np.sort(rng.choice(n_users, size=n, replace=False))


def eligible_clients(graph: DomainGraph) -> np.ndarray:
    return np.flatnonzero(graph.degrees() > 0)


@dataclass
class StageStats:
    losses: list[float] = field(default_factory=list)
    ops: gm.OpCounter = field(default_factory=gm.OpCounter)
    degenerate_rounds: int = 0
    replacement_flags: int = 0


def client_gradients(
    params: gm.GatParams, batch: gm.ClientBatch, mappers, cfg: PipelineConfig, options: gm.ModelOptions
) -> dict[int, tuple[int, dict[str, np.ndarray], np.ndarray]]:
    """Reference path: each client computes its own loss gradient in isolation.

    Returns client position -> (sample count, dense global-parameter gradient, user gradient).
    """
    out = {}
    counts = batch.sample_counts
    for c in range(batch.size):
        sub = batch.subset(np.array([c]))
        sub.weights = np.ones(1)
        fwd = gm.forward(params, sub, mappers, cfg.loss_weights, options)
        g = gm.backward(params, sub, fwd)
        out[c] = (int(counts[c]), g.global_arrays(), g.users[0])
    return out


def _federated_round(
    server: DomainServer, users: np.ndarray, user_opt: RowAdam, rd: RoundData, cfg: PipelineConfig,
    options: gm.ModelOptions, stats: StageStats, per_client: bool = False,
) -> None:
    batch = rd.batch
    params = server.params
    # the snapshot each client receives; user rows are substituted from client storage
    local_users = users[batch.users]
    snapshot = gm.GatParams(users, params.item_embeddings, params.attention, params.n_layers, params.dim)
    if per_client:
        grads = client_gradients(snapshot, batch, server.mappers, cfg, options)
        aggregate = aggregate_uploads({int(batch.users[c]): (n, g) for c, (n, g, _) in grads.items()})
        user_grads = np.stack([grads[c][2] for c in range(batch.size)]) if batch.size else local_users
        fwd = gm.forward(snapshot, batch, server.mappers, cfg.loss_weights, options)
    else:
        fwd = gm.forward(snapshot, batch, server.mappers, cfg.loss_weights, options)
        g = gm.backward(snapshot, batch, fwd)
        aggregate = g.global_arrays()
        # the weighted objective scales each client's own gradient by its weight
        w = np.where(batch.weights > 0, batch.weights, 1.0)
        user_grads = g.users / w[:, None]
    stats.losses.append(fwd.loss)
    stats.ops.add(fwd.ops)
    stats.degenerate_rounds += int(fwd.degenerate)
    server.apply(aggregate)
    user_opt.step(users, batch.users, user_grads)


# ------------------------------------------------------------------ stages

@dataclass
class TrainedDomain:
    domain_id: int
    params: gm.GatParams
    graph: DomainGraph
    mappers: list[gm.MapperMlp]
    options: gm.ModelOptions
    knowledge: KnowledgeTensor | None
    stats: StageStats
    server: DomainServer
    members: np.ndarray


def run_source_stage(
    split: SplitPair, registry: UserRegistry, cfg: PipelineConfig, ledger: MessageLedger | None = None,
    per_client: bool = False,
) -> SourceModel:
    trained = _train_domain(split, registry, cfg, ledger, "1", None, gm.ModelOptions("none", False, cfg.final), per_client)
    members = {int(g): local for local, g in enumerate(registry.members(split.train.domain_id))}
    return SourceModel(split.train.domain_id, trained.params, trained.graph, members, trained=True, stats=trained.stats)


def _train_domain(
    split: SplitPair, registry: UserRegistry, cfg: PipelineConfig, ledger: MessageLedger | None,
    stage: str, knowledge: KnowledgeTensor | None, options: gm.ModelOptions, per_client: bool = False,
) -> TrainedDomain:
    train = split.train
    d = train.domain_id
    if len(train) == 0:
        raise PipelineError(f"domain {d} has no training interactions")
    graph = build_bipartite_graph(train)
    params = gm.GatParams.init(train.n_users, train.n_items, cfg.dim, cfg.n_layers, substream(cfg.seed, "init", d))
    K = 0 if knowledge is None or options.virtual_mode == "none" else knowledge.values.shape[1]
    mappers = [gm.MapperMlp.init(cfg.dim, substream(cfg.seed, "mapper", d, k)) for k in range(K)] if options.use_mapper else []
    server = DomainServer(d, params, mappers, cfg.lr)
    if cfg.record_history:
        server.history = []
    user_opt = RowAdam(train.n_users, cfg.dim, cfg.lr)
    users = params.user_embeddings  # client-held rows, updated in place by each client
    pool = eligible_clients(graph)
    members = registry.members(d)
    stats = StageStats()
    for r in range(cfg.rounds):
        rng = substream(cfg.seed, "round", d, r)
        clients = pool[select_clients(len(pool), cfg.client_fraction, rng)]
        kn = knowledge.values[clients] if K else None
        rd = sample_round(graph, clients, cfg, rng, kn)
        stats.replacement_flags += rd.flagged_replacement
        size = server.message_size
        if ledger is not None:
            ledger.record_exchange(stage, d, r, members[clients], size, size, "global-model", "model-gradient")
        _federated_round(server, users, user_opt, rd, cfg, options, stats, per_client)
    return TrainedDomain(d, params, graph, mappers, options, knowledge, stats, server, members)


def run_vertical_stage(
    target_users_global: np.ndarray, sources: Sequence[SourceModel], cfg: PipelineConfig,
    ledger: MessageLedger | None = None,
) -> KnowledgeTensor:
    """Every client builds its perturbed knowledge locally; no message reaches a server."""
    if ledger is not None:
        before = ledger.totals["2"]
    kt = prepare_transfer_many(target_users_global, sources, cfg.dp, cfg.seed)
    if ledger is not None and ledger.totals["2"] != before:
        raise PipelineError("vertical stage produced server traffic")
    return kt


def run_target_stage(
    split: SplitPair, registry: UserRegistry, knowledge: KnowledgeTensor | None, cfg: PipelineConfig,
    ledger: MessageLedger | None = None, per_client: bool = False,
) -> TrainedDomain:
    options = cfg.model_options()
    if options.virtual_mode != "none" and knowledge is None:
        raise PipelineError(f"mode {cfg.mode} needs knowledge lists from the vertical stage")
    if knowledge is not None and knowledge.values.shape[1] == 0:
        knowledge = None
        options = gm.ModelOptions("none", False, cfg.final)
    if knowledge is not None and len(knowledge.values) != split.train.n_users:
        raise PipelineError("knowledge tensor must have one row per target user")
    return _train_domain(split, registry, cfg, ledger, "3-train", knowledge, options, per_client)


@dataclass
class FinalEmbeddings:
    users: np.ndarray
    items: np.ndarray
    frozen_digest_before: str
    frozen_digest_after: str
    losses: list[float]


def gat_outputs(model: TrainedDomain) -> np.ndarray:
    """Final user embeddings of every target user from its (expanded) ego-graph."""
    g = model.graph
    users = np.arange(g.n_users)
    empty = np.zeros(0, np.int64)
    batch = gm.ClientBatch(
        users, g.user_indptr, g.user_items, empty, empty, np.zeros(0), np.zeros(len(users)),
        None if model.knowledge is None or model.options.virtual_mode == "none" else model.knowledge.values,
    )
    return gm.forward(model.params, batch, model.mappers, options=model.options).user_final


def run_finetune_stage(
    model: TrainedDomain, cfg: PipelineConfig, ledger: MessageLedger | None = None
) -> FinalEmbeddings:
    """Train the final embeddings directly with the prediction loss; propagation stays frozen."""
    before = gm.params_digest(model.params, model.mappers)
    user_final = gat_outputs(model)
    item_final = model.params.item_embeddings.copy()
    user_opt = RowAdam(len(user_final), cfg.dim, cfg.finetune_lr)
    server_opt = Adam(cfg.finetune_lr)
    graph = model.graph
    pool = eligible_clients(graph)
    d = model.domain_id
    losses = []
    for epoch in range(cfg.finetune_epochs):
        rng = substream(cfg.seed, "finetune", d, epoch)
        clients = pool[select_clients(len(pool), cfg.client_fraction, rng)]
        rd = sample_round(graph, clients, cfg, rng)
        b = rd.batch
        if ledger is not None:
            size = item_final.shape[0] * cfg.dim
            ledger.record_exchange(
                "3-finetune", d, epoch, model.members[clients], size, size, "final-item-embeddings", "final-item-gradient"
            )
        fb = gm.FinetuneBatch(b.sample_owner, b.sample_item, b.labels, b.weights)
        loss, gu, gi = gm.finetune_loss_grad(user_final[clients], item_final, fb)
        losses.append(loss)
        server_opt.step({"items": item_final}, {"items": gi})
        w = np.where(b.weights > 0, b.weights, 1.0)
        user_opt.step(user_final, clients, gu / w[:, None])
    after = gm.params_digest(model.params, model.mappers)
    return FinalEmbeddings(user_final, item_final, before, after, losses)


# --------------------------------------------------------------- pipeline

@dataclass
class PipelineResult:
    config: PipelineConfig
    target: TrainedDomain
    final: FinalEmbeddings | None
    metrics: MetricsReport
    ledger: MessageLedger
    sources: list[SourceModel]
    knowledge: KnowledgeTensor | None
    timings: dict[str, float]
    cost_model: CostModel

    def manifest(self) -> dict:
        return {
            "config": config_to_dict(self.config),
            "seed": self.config.seed,
            "stages": [s for s in ("1", "2", "3-train", "3-finetune") if s in self.timings],
            "timings_sec": self.timings,
            "frozen_digest": None if self.final is None else self.final.frozen_digest_after,
            "frozen_unchanged": None if self.final is None else self.final.frozen_digest_before == self.final.frozen_digest_after,
            "edge_macs": self.edge_macs(),
        }

    def edge_macs(self) -> int:
        """Counted propagation multiply-adds over the source and target training stages."""
        return sum(s.stats.ops.edge_macs for s in self.sources) + self.target.stats.ops.edge_macs

    def scores(self) -> tuple[np.ndarray, np.ndarray]:
        """Final (user, item) embeddings used for ranking."""
        if self.final is not None:
            return self.final.users, self.final.items
        return gat_outputs(self.target), self.target.params.item_embeddings


def config_to_dict(cfg: PipelineConfig) -> dict:
    out = asdict(cfg)
    out["ks"] = list(cfg.ks)
    return out


def build_cost_model(cfg: PipelineConfig, data: FederatedData, n_mappers: int, finetune: bool) -> CostModel:
    def shape(d):
        g = data.splits[d].train
        return DomainShape(int((g.user_counts() > 0).sum()), g.n_items, len(g))

    sources = () if cfg.mode == "single-domain" else tuple(shape(d) for d in data.domain_ids if d != cfg.target_domain)
    return CostModel(
        cfg.dim, cfg.n_layers, cfg.rounds, cfg.finetune_epochs if finetune else 0, shape(cfg.target_domain),
        sources, n_mappers, sparse_uploads=cfg.sparse_uploads,
    )


def run_pipeline(cfg: PipelineConfig, data: FederatedData, sources: list[SourceModel] | None = None) -> PipelineResult:
    """Stages 1-3 plus evaluation. ``sources`` may be passed to reuse a finished stage 1."""
    if cfg.target_domain not in data.splits:
        raise PipelineError(f"target domain {cfg.target_domain} not in data {data.domain_ids}")
    if cfg.client_fraction < 1.0 and cfg.record_history is False:
        log.debug("client sampling active; ledger formulas assume full participation")
    ledger = MessageLedger()
    timings: dict[str, float] = {}
    registry = data.registry
    source_ids = [d for d in data.domain_ids if d != cfg.target_domain]
    single = cfg.mode == "single-domain" or not source_ids

    knowledge = None
    if not single:
        t0 = time.perf_counter()
        if sources is None:
            sources = [run_source_stage(data.splits[d], registry, cfg, ledger) for d in source_ids]
        else:
            for s in sources:
                shape = (s.graph.n_users, s.graph.n_items)
                if s.domain_id not in source_ids or shape != (data.splits[s.domain_id].train.n_users, data.splits[s.domain_id].train.n_items):
                    raise PipelineError(f"reused source model {s.domain_id} does not match the data")
            _replay_source_ledger(cfg, data, source_ids, ledger)
        timings["1"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        target_users = registry.members(cfg.target_domain)
        knowledge = run_vertical_stage(target_users, sources, cfg, ledger)
        timings["2"] = time.perf_counter() - t0
    else:
        sources = []

    run_cfg = cfg if not single or cfg.mode == "single-domain" else _with_mode(cfg, "single-domain")
    t0 = time.perf_counter()
    target = run_target_stage(data.splits[cfg.target_domain], registry, knowledge, run_cfg, ledger)
    timings["3-train"] = time.perf_counter() - t0

    final = None
    if run_cfg.uses_finetune:
        t0 = time.perf_counter()
        final = run_finetune_stage(target, run_cfg, ledger)
        timings["3-finetune"] = time.perf_counter() - t0

    split = data.splits[cfg.target_domain]
    negs = eval_negatives(split, cfg.eval_negatives, cfg.seed)
    cost = build_cost_model(run_cfg, data, len(target.mappers), final is not None)
    result = PipelineResult(run_cfg, target, final, None, ledger, sources, knowledge, timings, cost)  # type: ignore[arg-type]
    users, items = result.scores()
    result.metrics = evaluate(users, items, split, negs, cfg.ks, seed=cfg.seed)
    return result


def _with_mode(cfg: PipelineConfig, mode: str) -> PipelineConfig:
    return PipelineConfig(**{**asdict(cfg), "mode": mode})


def _replay_source_ledger(cfg: PipelineConfig, data: FederatedData, source_ids, ledger: MessageLedger) -> None:
    """Record stage-1 traffic for reused source models exactly as training would have."""
    for d in source_ids:
        train = data.splits[d].train
        graph = build_bipartite_graph(train)
        pool = eligible_clients(graph)
        members = data.registry.members(d)
        size = model_message_size(train.n_items, cfg.dim)
        for r in range(cfg.rounds):
            rng = substream(cfg.seed, "round", d, r)
            clients = pool[select_clients(len(pool), cfg.client_fraction, rng)]
            ledger.record_exchange("1", d, r, members[clients], size, size, "global-model", "model-gradient")
