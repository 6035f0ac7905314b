"""Message accounting and closed-form communication / computation costs.

Costs are counted in scalars (embedding entries), never bytes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STAGES = ("1", "2", "3-train", "3-finetune")
DIRECTIONS = ("down", "up")
# what a message may carry; raw interactions and clean source embeddings never appear
PAYLOADS = ("global-model", "model-gradient", "final-item-embeddings", "final-item-gradient")


class LedgerError(ValueError):
    pass


@dataclass(frozen=True)
class MessageRecord:
    stage: str
    direction: str
    domain: int
    client: int
    round: int
    scalar_count: int
    payload: str = "global-model"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise LedgerError(f"unknown stage {self.stage!r}")
        if self.direction not in DIRECTIONS:
            raise LedgerError(f"unknown direction {self.direction!r}")
        if self.scalar_count < 0:
            raise LedgerError(f"negative scalar count {self.scalar_count}")
        if self.payload not in PAYLOADS:
            raise LedgerError(f"payload {self.payload!r} is not an allowed message type")
        if self.stage == "2" and self.scalar_count != 0:
            raise LedgerError("stage-2 transfer happens in user space; server traffic must be zero")

    @property
    def sender(self) -> str:
        return f"server:{self.domain}" if self.direction == "down" else f"client:{self.client}"

    @property
    def receiver(self) -> str:
        return f"client:{self.client}" if self.direction == "down" else f"server:{self.domain}"


_COLUMNS = ("stage", "direction", "domain", "client", "round", "scalar_count", "payload")


class MessageLedger:
    """Append-only record of every simulated client/server exchange."""

    def __init__(self):
        self._chunks: list[dict[str, np.ndarray]] = []
        self.totals: dict[str, int] = {s: 0 for s in STAGES}

    def record(self, rec: MessageRecord) -> None:
        self._append(
            stage=np.array([STAGES.index(rec.stage)], np.int8),
            direction=np.array([DIRECTIONS.index(rec.direction)], np.int8),
            domain=np.array([rec.domain], np.int32),
            client=np.array([rec.client], np.int64),
            round=np.array([rec.round], np.int64),
            scalar_count=np.array([rec.scalar_count], np.int64),
            payload=np.array([PAYLOADS.index(rec.payload)], np.int8),
        )

    def record_exchange(
        self, stage: str, domain: int, round_idx: int, clients: np.ndarray,
        down: int, up: int, down_payload: str, up_payload: str,
    ) -> None:
        """One broadcast to and one upload from each client, interleaved per client."""
        if stage not in STAGES:
            raise LedgerError(f"unknown stage {stage!r}")
        if down < 0 or up < 0:
            raise LedgerError("negative scalar count")
        if stage == "2" and (down or up):
            raise LedgerError("stage-2 transfer happens in user space; server traffic must be zero")
        clients = np.asarray(clients, dtype=np.int64)
        n = len(clients)
        self._append(
            stage=np.full(2 * n, STAGES.index(stage), np.int8),
            direction=np.tile(np.array([0, 1], np.int8), n),
            domain=np.full(2 * n, domain, np.int32),
            client=np.repeat(clients, 2),
            round=np.full(2 * n, round_idx, np.int64),
            scalar_count=np.tile(np.array([down, up], np.int64), n),
            payload=np.tile(np.array([PAYLOADS.index(down_payload), PAYLOADS.index(up_payload)], np.int8), n),
        )

    def _append(self, **cols: np.ndarray) -> None:
        self._chunks.append(cols)
        stage_codes, counts = cols["stage"], cols["scalar_count"]
        for code, s in enumerate(STAGES):
            self.totals[s] += int(counts[stage_codes == code].sum())

    def columns(self) -> dict[str, np.ndarray]:
        if not self._chunks:
            return {c: np.zeros(0, np.int64) for c in _COLUMNS}
        return {c: np.concatenate([ch[c] for ch in self._chunks]) for c in _COLUMNS}

    def __len__(self) -> int:
        return sum(len(ch["stage"]) for ch in self._chunks)

    def __iter__(self):
        cols = self.columns()
        for k in range(len(cols["stage"])):
            yield MessageRecord(
                STAGES[cols["stage"][k]], DIRECTIONS[cols["direction"][k]], int(cols["domain"][k]),
                int(cols["client"][k]), int(cols["round"][k]), int(cols["scalar_count"][k]),
                PAYLOADS[cols["payload"][k]],
            )

    @property
    def total(self) -> int:
        return sum(self.totals.values())

    def resum(self) -> dict[str, int]:
        """Totals recomputed from the stored records."""
        cols = self.columns()
        return {s: int(cols["scalar_count"][cols["stage"] == k].sum()) for k, s in enumerate(STAGES)}

    def write_csv(self, path) -> None:
        cols = self.columns()
        stage = np.array(STAGES, dtype=object)[cols["stage"].astype(int)]
        down = cols["direction"] == 0
        server = np.char.add("server:", cols["domain"].astype(str))
        client = np.char.add("client:", cols["client"].astype(str))
        sender = np.where(down, server, client)
        receiver = np.where(down, client, server)
        direction = np.where(down, "down", "up")
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "direction", "sender", "receiver", "round", "scalar_count"])
            w.writerows(zip(stage, direction, sender, receiver, cols["round"].tolist(), cols["scalar_count"].tolist()))


# ---------------------------------------------------------------- formulas

@dataclass(frozen=True)
class DomainShape:
    n_clients: int
    n_items: int
    n_edges: int = 0


def mapper_param_count(dim: int, hidden: tuple[int, ...] = (16, 4)) -> int:
    sizes = (dim, *hidden, dim)
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


@dataclass(frozen=True)
class CostModel:
    """Shapes of one pipeline run. ``target`` is trained with ``n_mappers`` mappers."""

    dim: int
    n_layers: int
    rounds: int
    finetune_epochs: int
    target: DomainShape
    sources: tuple[DomainShape, ...] = ()
    n_mappers: int = 0
    mapper_layers: int = 3
    sparse_uploads: bool = False

    @classmethod
    def uniform(
        cls, n_users: int, n_items: int, dim: int, n_layers: int, n_domains: int,
        rounds: int, finetune_epochs: int, n_edges: int = 0, mappers: bool = True,
    ) -> "CostModel":
        shape = DomainShape(n_users, n_items, n_edges)
        return cls(
            dim, n_layers, rounds, finetune_epochs, shape, (shape,) * (n_domains - 1),
            n_domains - 1 if mappers else 0,
        )

    @property
    def n_domains(self) -> int:
        return 1 + len(self.sources)

    @property
    def n_users(self) -> int:
        return self.target.n_clients

    @property
    def n_items(self) -> int:
        return self.target.n_items

    @property
    def n_edges(self) -> int:
        return self.target.n_edges + sum(s.n_edges for s in self.sources)


def model_message_size(n_items: int, dim: int, mapper_scalars: int = 0) -> int:
    """Item table + attention vector (+ mapper parameters) in one direction."""
    return n_items * dim + 2 * dim + mapper_scalars


def predict_communication(cm: CostModel) -> dict[str, int]:
    if cm.sparse_uploads:
        raise LedgerError("closed-form communication cost only holds for dense uploads")
    F = cm.dim
    stage1 = sum(cm.rounds * s.n_clients * 2 * model_message_size(s.n_items, F) for s in cm.sources)
    maps = cm.n_mappers * mapper_param_count(F)
    stage3 = cm.rounds * cm.target.n_clients * 2 * model_message_size(cm.target.n_items, F, maps)
    ft = cm.finetune_epochs * cm.target.n_clients * 2 * cm.target.n_items * F
    out = {"1": stage1, "2": 0, "3-train": stage3, "3-finetune": ft}
    out["total"] = sum(out.values())
    return out


def predict_computation(cm: CostModel) -> dict[str, float]:
    """Dominant and full operation-count estimates, plus the exact edge multiply-adds we count."""
    F, TG, TF = cm.dim, cm.rounds, cm.finetune_epochs
    E_bar = cm.n_edges / cm.n_domains
    prop = TG * cm.n_domains * cm.n_layers * E_bar * F
    return {
        "dominant": prop + TF * F**2,
        "full": TG * (cm.n_domains * cm.n_layers * E_bar * F + cm.mapper_layers * F**2) + TF * F**2,
        "edge_macs_exact": 6 * F * cm.n_layers * TG * cm.n_edges,
    }
