"""In-client knowledge transfer: extract source layer stacks, clip and perturb them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gatmodel import ClientBatch, GatParams, ModelOptions, forward
from .graph import DomainGraph
from .rng import substream


class TransferError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class KnowledgeMatrix:
    source_domain_id: int
    rows: np.ndarray
    is_noise_only: bool


@dataclass(frozen=True)
class DpParams:
    """Gaussian-mechanism settings; sensitivity is twice the per-row clip norm.

    A positive ``noise_multiplier`` replaces the sigma derived from (epsilon, delta).
    """

    epsilon: float = 8.0
    delta: float = 1e-5
    clip_norm: float = 1.0
    enabled: bool = True
    noise_multiplier: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise TransferError("epsilon must be > 0")
        if not 0 < self.delta < 1:
            raise TransferError("delta must lie in (0, 1)")
        if not self.clip_norm > 0:
            raise TransferError("clip_norm must be > 0")
        if not self.noise_multiplier >= 0:
            raise TransferError("noise_multiplier must be >= 0")

    @property
    def sigma(self) -> float:
        return self.noise_multiplier or gaussian_sigma(self.epsilon, self.delta)

    @property
    def sensitivity(self) -> float:
        return 2.0 * self.clip_norm

    @property
    def noise_std(self) -> float:
        return self.sigma * self.sensitivity if self.enabled else 0.0


def gaussian_sigma(epsilon: float, delta: float) -> float:
    return math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


@dataclass(eq=False)
class SourceModel:
    """A trained source domain as held in a client's user space."""

    domain_id: int
    params: GatParams
    graph: DomainGraph
    members: dict[int, int]
    trained: bool = False
    stats: object = None

    def local_index(self, global_user: int) -> int | None:
        return self.members.get(int(global_user))


def _ego_batch(graph: DomainGraph, local: np.ndarray) -> ClientBatch:
    deg = graph.degrees()[local]
    items = [graph.items_of(int(u)) for u in local]
    empty = np.empty(0, dtype=np.int64)
    return ClientBatch(
        users=np.asarray(local, dtype=np.int64),
        indptr=np.concatenate([[0], np.cumsum(deg)]).astype(np.int64),
        items=np.concatenate(items).astype(np.int64) if items else empty,
        sample_owner=empty,
        sample_item=empty,
        labels=np.empty(0),
        weights=np.zeros(len(local)),
    )


def extract_stacks(source: SourceModel, local: np.ndarray) -> np.ndarray:
    """Layer 1..L user embeddings for the given local users, shape (n, L, d)."""
    if not source.trained:
        raise TransferError(f"source domain {source.domain_id} has not been trained")
    local = np.asarray(local, dtype=np.int64)
    if len(local) == 0:
        return np.zeros((0, source.params.n_layers, source.params.dim))
    fwd = forward(source.params, _ego_batch(source.graph, local), options=ModelOptions(virtual_mode="none"))
    return np.stack(fwd.user_layers, axis=1)


def extract_knowledge(source: SourceModel, global_user: int) -> np.ndarray | None:
    """The user's clean (L, d) stack from one source domain, or None if absent there."""
    local = source.local_index(global_user)
    if not source.trained:
        raise TransferError(f"source domain {source.domain_id} has not been trained")
    if local is None:
        return None
    return extract_stacks(source, np.array([local]))[0]


def clip_rows(stack: np.ndarray, clip_norm: float) -> np.ndarray:
    norms = np.linalg.norm(stack, axis=-1, keepdims=True)
    # shrink by a few ulps so the recomputed norm never rounds above clip_norm
    shrink = clip_norm / np.maximum(norms, 1e-300) * (1.0 - 4.0 * np.finfo(float).eps)
    return stack * np.where(norms > clip_norm, shrink, 1.0)


def perturb(
    stack: np.ndarray | None,
    dp: DpParams,
    rng: np.random.Generator,
    source_domain_id: int = -1,
    shape: tuple[int, int] | None = None,
) -> KnowledgeMatrix:
    """Clip each row to ``dp.clip_norm`` and add N(0, (sigma * 2C)^2) noise per coordinate.

    An absent stack becomes a pure-noise matrix of ``shape``.
    """
    if stack is None:
        if shape is None:
            raise TransferError("shape is required for a noise-only matrix")
        return KnowledgeMatrix(source_domain_id, rng.normal(0.0, dp.noise_std, size=shape), True)
    stack = np.asarray(stack, dtype=float)
    clipped = clip_rows(stack, dp.clip_norm)
    noise = rng.normal(0.0, dp.noise_std, size=stack.shape)
    return KnowledgeMatrix(source_domain_id, clipped + noise, False)


def noise_stream(seed: int, domain_id: int, global_user: int) -> np.random.Generator:
    return substream(seed, "dp-noise", domain_id, global_user)


def prepare_transfer(
    global_user: int, sources: Sequence[SourceModel], dp: DpParams, seed: int
) -> list[KnowledgeMatrix]:
    """All source knowledge for one client, in ascending source-domain order."""
    out = []
    for src in sorted(sources, key=lambda s: s.domain_id):
        shape = (src.params.n_layers, src.params.dim)
        stack = extract_knowledge(src, global_user)
        out.append(perturb(stack, dp, noise_stream(seed, src.domain_id, global_user), src.domain_id, shape))
    return out


@dataclass
class KnowledgeTensor:
    """Perturbed knowledge of many clients: values (B, K, L, d) and noise-only flags (B, K)."""

    values: np.ndarray
    noise_only: np.ndarray
    source_domains: tuple[int, ...]
    pre_noise_norms: np.ndarray

    def matrices(self, row: int) -> list[KnowledgeMatrix]:
        return [
            KnowledgeMatrix(d, self.values[row, k], bool(self.noise_only[row, k]))
            for k, d in enumerate(self.source_domains)
        ]


def prepare_transfer_many(
    global_users: np.ndarray, sources: Sequence[SourceModel], dp: DpParams, seed: int
) -> KnowledgeTensor:
    """Vectorised ``prepare_transfer``: identical draws, one sub-stream per (domain, user)."""
    sources = sorted(sources, key=lambda s: s.domain_id)
    global_users = np.asarray(global_users, dtype=np.int64)
    B = len(global_users)
    if not sources:
        return KnowledgeTensor(np.zeros((B, 0, 1, 1)), np.zeros((B, 0), bool), (), np.zeros((B, 0, 1)))
    L, d = sources[0].params.n_layers, sources[0].params.dim
    values = np.zeros((B, len(sources), L, d))
    noise_only = np.zeros((B, len(sources)), dtype=bool)
    norms = np.zeros((B, len(sources), L))
    for k, src in enumerate(sources):
        if (src.params.n_layers, src.params.dim) != (L, d):
            raise TransferError(f"source domain {src.domain_id} has a different (L, d)")
        local = np.array([src.local_index(g) if src.local_index(g) is not None else -1 for g in global_users])
        present = local >= 0
        stacks = extract_stacks(src, local[present])
        clipped = clip_rows(stacks, dp.clip_norm)
        values[present, k] = clipped
        norms[present, k] = np.linalg.norm(clipped, axis=-1)
        noise_only[~present, k] = True
        for b, g in enumerate(global_users.tolist()):
            values[b, k] += noise_stream(seed, src.domain_id, g).normal(0.0, dp.noise_std, size=(L, d))
    return KnowledgeTensor(values, noise_only, tuple(s.domain_id for s in sources), norms)
