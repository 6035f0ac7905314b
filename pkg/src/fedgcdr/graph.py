"""Bipartite user-item graphs, client ego views and target-side graph expansion."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .dataset import InteractionSet

if TYPE_CHECKING:
    from .transfer import KnowledgeMatrix


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DomainGraph:
    """CSR adjacency in both directions; neighbour lists sorted and duplicate-free."""

    n_users: int
    n_items: int
    user_indptr: np.ndarray
    user_items: np.ndarray
    item_indptr: np.ndarray
    item_users: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.user_items)

    def items_of(self, user_idx: int) -> np.ndarray:
        return self.user_items[self.user_indptr[user_idx] : self.user_indptr[user_idx + 1]]

    def users_of(self, item_idx: int) -> np.ndarray:
        return self.item_users[self.item_indptr[item_idx] : self.item_indptr[item_idx + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.user_indptr)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        users = np.repeat(np.arange(self.n_users), self.degrees())
        return users, self.user_items


def build_bipartite_graph(train: InteractionSet) -> DomainGraph:
    order = np.lexsort((train.items, train.users))
    u, i = train.users[order], train.items[order]
    user_indptr = np.concatenate([[0], np.cumsum(np.bincount(u, minlength=train.n_users))])
    order_t = np.lexsort((u, i))
    item_indptr = np.concatenate([[0], np.cumsum(np.bincount(i, minlength=train.n_items))])
    return DomainGraph(
        train.n_users,
        train.n_items,
        user_indptr.astype(np.int64),
        i.astype(np.int64),
        item_indptr.astype(np.int64),
        u[order_t].astype(np.int64),
    )


def ego_graph(g: DomainGraph, user_idx: int) -> np.ndarray:
    """The client-local view: the user's sorted item neighbours."""
    if not 0 <= user_idx < g.n_users:
        raise GraphError(f"user index {user_idx} out of range [0, {g.n_users})")
    return g.items_of(user_idx).copy()


@dataclass(frozen=True, eq=False)
class ExpandedEgoGraph:
    """A client's target ego-graph plus one virtual user per source domain.

    Virtual users hang off the centre user only; they never touch items.
    """

    center: int
    items: np.ndarray
    virtual: tuple["KnowledgeMatrix", ...]

    @property
    def n_virtual(self) -> int:
        return len(self.virtual)

    def virtual_domains(self) -> list[int]:
        return [k.source_domain_id for k in self.virtual]


def expand_graph(
    center: int,
    items: np.ndarray,
    knowledge: Sequence["KnowledgeMatrix"],
    n_sources: int,
    n_layers: int,
    dim: int,
) -> ExpandedEgoGraph:
    if len(knowledge) != n_sources:
        raise GraphError(f"expected {n_sources} knowledge matrices, got {len(knowledge)}")
    for k in knowledge:
        if k.rows.shape != (n_layers, dim):
            raise GraphError(
                f"knowledge from source domain {k.source_domain_id} has shape {k.rows.shape}, "
                f"expected {(n_layers, dim)}"
            )
    ordered = tuple(sorted(knowledge, key=lambda k: k.source_domain_id))
    return ExpandedEgoGraph(int(center), np.asarray(items, dtype=np.int64).copy(), ordered)


def write_edge_list(g: DomainGraph, path) -> None:
    users, items = g.edges()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_idx", "item_idx"])
        w.writerows(zip(users.tolist(), items.tolist()))
