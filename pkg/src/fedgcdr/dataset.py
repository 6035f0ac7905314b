"""Per-domain interaction data: ingestion, implicit feedback, splits, sampling, synthesis."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .rng import substream

log = logging.getLogger(__name__)

SIGNAL_TYPES = ("shared-latent", "independent-latent", "pure-noise")


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


@dataclass(frozen=True)
class RatingRecord:
    user_id: str
    item_id: str
    rating: float
    timestamp: int


@dataclass(frozen=True, eq=False)
class InteractionSet:
    """Implicit interactions of one domain, sorted by (user, item)."""

    domain_id: int
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    n_users: int
    n_items: int
    item_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not (len(self.users) == len(self.items) == len(self.timestamps)):
            raise DataError("users, items and timestamps must have equal length")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise DataError("item index out of range")

    def __len__(self) -> int:
        return len(self.users)

    @classmethod
    def from_triples(cls, domain_id, triples, n_users, n_items, item_ids=()):
        arr = np.asarray(list(triples), dtype=np.int64).reshape(-1, 3)
        return cls.from_arrays(domain_id, arr[:, 0], arr[:, 1], arr[:, 2], n_users, n_items, item_ids)

    @classmethod
    def from_arrays(cls, domain_id, users, items, timestamps, n_users, n_items, item_ids=()):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        timestamps = np.asarray(timestamps, dtype=np.int64)
        order = np.lexsort((items, users))
        users, items, timestamps = users[order], items[order], timestamps[order]
        if len(users) > 1:
            dup = (users[1:] == users[:-1]) & (items[1:] == items[:-1])
            if dup.any():
                raise DataError("duplicate (user, item) pairs in interaction set")
        return cls(domain_id, users, items, timestamps, int(n_users), int(n_items), tuple(item_ids))

    def triples(self) -> set[tuple[int, int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist(), self.timestamps.tolist()))

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def user_items(self, user_idx: int) -> np.ndarray:
        lo, hi = np.searchsorted(self.users, [user_idx, user_idx + 1])
        return self.items[lo:hi]

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.n_users)

    def indptr(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.user_counts())])

    @property
    def density(self) -> float:
        return len(self) / max(1, self.n_users * self.n_items)


@dataclass
class UserRegistry:
    """Global user ids and their dense local index in every domain they belong to."""

    global_ids: dict[str, int] = field(default_factory=dict)
    per_domain: dict[tuple[int, int], int] = field(default_factory=dict)
    _local_to_global: dict[int, list[int]] = field(default_factory=dict)

    def global_index(self, user_id: str) -> int:
        if user_id not in self.global_ids:
            self.global_ids[user_id] = len(self.global_ids)
        return self.global_ids[user_id]

    def local_index(self, domain_id: int, user_id: str) -> int:
        g = self.global_index(user_id)
        key = (domain_id, g)
        if key not in self.per_domain:
            members = self._local_to_global.setdefault(domain_id, [])
            self.per_domain[key] = len(members)
            members.append(g)
        return self.per_domain[key]

    def local(self, domain_id: int, global_idx: int) -> int | None:
        return self.per_domain.get((domain_id, global_idx))

    def members(self, domain_id: int) -> np.ndarray:
        """Global index of every local user of ``domain_id``, in local order."""
        return np.asarray(self._local_to_global.get(domain_id, []), dtype=np.int64)

    def n_users(self, domain_id: int) -> int:
        return len(self._local_to_global.get(domain_id, []))

    @property
    def n_global(self) -> int:
        return len(self.global_ids)

    def domains(self) -> list[int]:
        return sorted(self._local_to_global)

    def to_json(self) -> dict:
        return {
            "global_ids": self.global_ids,
            "domains": {str(d): self.members(d).tolist() for d in self.domains()},
        }

    @classmethod
    def from_json(cls, payload: dict) -> "UserRegistry":
        reg = cls(global_ids={k: int(v) for k, v in payload["global_ids"].items()})
        for d, members in payload["domains"].items():
            d = int(d)
            reg._local_to_global[d] = [int(g) for g in members]
            for local, g in enumerate(members):
                reg.per_domain[(d, int(g))] = local
        return reg


@dataclass(frozen=True, eq=False)
class SplitPair:
    train: InteractionSet
    test_users: np.ndarray
    test_items: np.ndarray
    test_timestamps: np.ndarray

    def test_map(self) -> dict[int, int]:
        return dict(zip(self.test_users.tolist(), self.test_items.tolist()))

    def test_pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.test_users.tolist(), self.test_items.tolist()))


@dataclass(frozen=True)
class SynthConfig:
    n_domains: int = 4
    n_users: int = 1000
    n_items: int = 2000
    latent_dim: int = 8
    overlap: float = 1.0
    signals: tuple[str, ...] = ("shared-latent", "shared-latent", "shared-latent", "pure-noise")
    density: float = 0.02
    signal_scale: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.n_domains < 1:
            raise DataError("n_domains must be >= 1")
        if not 0.0 <= self.overlap <= 1.0:
            raise DataError(f"overlap must lie in [0, 1], got {self.overlap}")
        if not 0.0 < self.density < 1.0:
            raise DataError(f"density must lie in (0, 1), got {self.density}")
        if len(self.signals) != self.n_domains:
            raise DataError(f"need {self.n_domains} signal types, got {len(self.signals)}")
        bad = [s for s in self.signals if s not in SIGNAL_TYPES]
        if bad:
            raise DataError(f"unknown signal types {bad}; expected one of {SIGNAL_TYPES}")
        if self.n_users < 1 or self.n_items < 1 or self.latent_dim < 1:
            raise DataError("n_users, n_items and latent_dim must be positive")


@dataclass
class SynthData:
    domains: list[InteractionSet]
    registry: UserRegistry
    user_latents: np.ndarray
    item_latents: list[np.ndarray | None]
    config: SynthConfig


# ---------------------------------------------------------------- ingestion

def load_domain_ratings(path, domain_id: int = 0, strict: bool = True) -> list[RatingRecord]:
    """Read ``user_id,item_id,rating,timestamp`` rows in file order.

    Malformed rows are logged with their line number; in strict mode any
    malformed row raises ``DataError`` listing the first 10 offenders.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"rating file not found: {path}")
    records: list[RatingRecord] = []
    bad: list[tuple[int, str]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return records
        if [h.strip() for h in header] != ["user_id", "item_id", "rating", "timestamp"]:
            raise DataError(f"{path}: expected header user_id,item_id,rating,timestamp, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != 4:
                    raise ValueError(f"expected 4 fields, got {len(row)}")
                user_id, item_id = row[0].strip(), row[1].strip()
                if not user_id or not item_id:
                    raise ValueError("empty id")
                rating = float(row[2])
                if not math.isfinite(rating):
                    raise ValueError("non-finite rating")
                timestamp = int(row[3])
                if timestamp < 0:
                    raise ValueError("negative timestamp")
            except ValueError as exc:
                bad.append((lineno, str(exc)))
                continue
            records.append(RatingRecord(user_id, item_id, rating, timestamp))
    for lineno, why in bad:
        log.warning("%s line %d: %s (domain %d)", path, lineno, why, domain_id)
    if bad and strict:
        listing = "; ".join(f"line {n}: {why}" for n, why in bad[:10])
        raise DataError(f"{path}: {len(bad)} malformed row(s): {listing}")
    return records


def filter_min_interactions(records: Sequence[RatingRecord], min_count: int) -> list[RatingRecord]:
    """Drop users with fewer than ``min_count`` distinct items (single pass, no iteration to a core)."""
    if min_count <= 1:
        return list(records)
    per_user: dict[str, set[str]] = {}
    for r in records:
        per_user.setdefault(r.user_id, set()).add(r.item_id)
    keep = {u for u, items in per_user.items() if len(items) >= min_count}
    return [r for r in records if r.user_id in keep]


def to_implicit(records: Iterable[RatingRecord], registry: UserRegistry, domain_id: int) -> InteractionSet:
    latest: dict[tuple[int, int], int] = {}
    item_index: dict[str, int] = {}
    for r in records:
        u = registry.local_index(domain_id, r.user_id)
        i = item_index.setdefault(r.item_id, len(item_index))
        key = (u, i)
        if key not in latest or r.timestamp > latest[key]:
            latest[key] = r.timestamp
    triples = [(u, i, t) for (u, i), t in latest.items()]
    return InteractionSet.from_triples(
        domain_id, triples, registry.n_users(domain_id), len(item_index), tuple(item_index)
    )


# ------------------------------------------------------------------- splits

def leave_one_out_split(iset: InteractionSet) -> SplitPair:
    """Hold out each user's latest interaction; ties go to the larger item index.

    Users with a single interaction stay entirely in train.
    """
    # sorted so the last row of every user block is the held-out one
    order = np.lexsort((iset.items, iset.timestamps, iset.users))
    users = iset.users[order]
    is_last = np.ones(len(users), dtype=bool)
    if len(users) > 1:
        is_last[:-1] = users[1:] != users[:-1]
    counts = iset.user_counts()
    held = is_last & (counts[users] >= 2)
    test_idx = order[held]
    keep = np.ones(len(iset), dtype=bool)
    keep[test_idx] = False
    train = InteractionSet(
        iset.domain_id,
        iset.users[keep],
        iset.items[keep],
        iset.timestamps[keep],
        iset.n_users,
        iset.n_items,
        iset.item_ids,
    )
    test_idx = np.sort(test_idx)
    return SplitPair(train, iset.users[test_idx], iset.items[test_idx], iset.timestamps[test_idx])


def write_split_csv(split: SplitPair, registry: UserRegistry, path) -> None:
    members = registry.members(split.train.domain_id)
    inv = {g: uid for uid, g in registry.global_ids.items()}
    item_ids = split.train.item_ids or tuple(str(i) for i in range(split.train.n_items))
    rows = []
    tr = split.train
    for u, i, t in zip(tr.users.tolist(), tr.items.tolist(), tr.timestamps.tolist()):
        rows.append((inv[int(members[u])], item_ids[i], t, "train"))
    for u, i, t in zip(split.test_users.tolist(), split.test_items.tolist(), split.test_timestamps.tolist()):
        rows.append((inv[int(members[u])], item_ids[i], t, "test"))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "timestamp", "split"])
        w.writerows(rows)


def read_split_csv(path, domain_id: int, registry: UserRegistry, item_ids: Sequence[str]) -> SplitPair:
    """Inverse of ``write_split_csv`` given the registry and the domain's item order."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"split file not found: {path}")
    item_index = {iid: j for j, iid in enumerate(item_ids)}
    cols: dict[str, tuple[list[int], list[int], list[int]]] = {"train": ([], [], []), "test": ([], [], [])}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["user_id", "item_id", "timestamp", "split"]:
            raise DataError(f"{path}: expected header user_id,item_id,timestamp,split, got {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                user_id, item_id, ts, part = row
                g = registry.global_ids[user_id]
                u = registry.local(domain_id, g)
                if u is None or part not in cols:
                    raise KeyError(user_id if u is None else part)
                bucket = cols[part]
                bucket[0].append(u)
                bucket[1].append(item_index[item_id])
                bucket[2].append(int(ts))
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path} line {lineno}: bad row {row} ({exc})") from None
    n_users, n_items = registry.n_users(domain_id), len(item_ids)
    tr = cols["train"]
    train = InteractionSet.from_arrays(domain_id, tr[0], tr[1], tr[2], n_users, n_items, tuple(item_ids))
    te = [np.asarray(c, dtype=np.int64) for c in cols["test"]]
    order = np.argsort(te[0], kind="stable")
    return SplitPair(train, te[0][order], te[1][order], te[2][order])


# ----------------------------------------------------------------- sampling

def sample_eval_negatives(
    train: InteractionSet, user_idx: int, n: int, rng: np.random.Generator, exclude: Iterable[int] = ()
) -> np.ndarray:
    """Draw ``n`` distinct items the user never interacted with (train or ``exclude``)."""
    seen = np.union1d(train.user_items(user_idx), np.fromiter(exclude, dtype=np.int64))
    pool = np.setdiff1d(np.arange(train.n_items), seen, assume_unique=False)
    if n > len(pool):
        raise DataError(f"user {user_idx}: need {n} negatives but candidate pool has {len(pool)} items")
    return rng.choice(pool, size=n, replace=False)


def eval_negatives(split: SplitPair, n: int, seed: int) -> dict[int, np.ndarray]:
    """Pre-sample ``n`` evaluation negatives for every test user from per-user sub-streams."""
    out = {}
    for u, i in zip(split.test_users.tolist(), split.test_items.tolist()):
        rng = substream(seed, "eval-negatives", split.train.domain_id, u)
        out[u] = sample_eval_negatives(split.train, u, n, rng, exclude=(i,))
    return out


@dataclass
class TrainSamples:
    items: np.ndarray
    labels: np.ndarray
    with_replacement: bool


def sample_train_negatives(
    train: InteractionSet, user_idx: int, k_per_positive: int, rng: np.random.Generator
) -> TrainSamples:
    """Positives labelled 1 followed by ``k`` uniform non-interacted items per positive labelled 0."""
    if k_per_positive < 1:
        raise ValueError("k_per_positive must be >= 1")
    pos = train.user_items(user_idx)
    need = len(pos) * k_per_positive
    pool = np.setdiff1d(np.arange(train.n_items), pos)
    replace = len(pool) < need
    if replace and len(pool) == 0:
        # nothing left to call negative; fall back to the full catalogue
        pool = np.arange(train.n_items)
    neg = rng.choice(pool, size=need, replace=replace) if need else np.empty(0, dtype=np.int64)
    items = np.concatenate([pos, neg]).astype(np.int64)
    labels = np.concatenate([np.ones(len(pos)), np.zeros(need)])
    return TrainSamples(items, labels, replace)


# ---------------------------------------------------------------- synthesis

def _calibrate_bias(logits: np.ndarray, density: float) -> float:
    return brentq(lambda b: expit(logits + b).mean() - density, -50.0, 50.0, xtol=1e-8)


def synth_generate(cfg: SynthConfig) -> SynthData:
    """Generate M domains whose interaction signal is controlled per domain.

    Shared-latent domains draw interactions from sigmoid(z_u . w_v + b) with
    one user latent z_u shared across those domains; independent-latent
    domains use a fresh user latent; pure-noise domains are uniform.
    ``overlap`` of the users appear in every domain, the rest in exactly one.
    """
    if cfg.density * cfg.n_items < 2:
        raise DataError(
            f"density {cfg.density} over {cfg.n_items} items gives < 2 interactions per user; "
            "leave-one-out needs at least 2"
        )
    rng = substream(cfg.seed, "synth")
    M, U, k = cfg.n_domains, cfg.n_users, cfg.latent_dim
    n_shared = int(round(cfg.overlap * U))
    n_private = U - n_shared
    n_global = n_shared + M * n_private
    scale = cfg.signal_scale / math.sqrt(k)
    user_latents = rng.normal(0.0, math.sqrt(scale), size=(n_global, k))

    registry = UserRegistry()
    for g in range(n_global):
        registry.global_index(f"u{g}")

    domains: list[InteractionSet] = []
    item_latents: list[np.ndarray | None] = []
    for d, kind in enumerate(cfg.signals):
        drng = substream(cfg.seed, "synth-domain", d)
        members = np.concatenate([np.arange(n_shared), n_shared + d * n_private + np.arange(n_private)])
        if kind == "pure-noise":
            item_latents.append(None)
            probs = np.full((U, cfg.n_items), cfg.density)
        else:
            w = drng.normal(0.0, math.sqrt(scale), size=(cfg.n_items, k))
            z = user_latents[members] if kind == "shared-latent" else drng.normal(0.0, math.sqrt(scale), size=(U, k))
            logits = z @ w.T
            probs = expit(logits + _calibrate_bias(logits, cfg.density))
            item_latents.append(w)
        hits = drng.random(probs.shape) < probs
        # every member needs at least one interaction to belong to the domain
        empty = ~hits.any(axis=1)
        if empty.any():
            hits[np.flatnonzero(empty), drng.integers(0, cfg.n_items, size=int(empty.sum()))] = True
        rows, cols = np.nonzero(hits)
        ts = drng.permutation(len(rows)).astype(np.int64)
        realized = len(rows) / (U * cfg.n_items)
        if abs(realized - cfg.density) > 0.2 * cfg.density:
            raise DataError(f"domain {d}: realized density {realized:.4f} outside 20% of {cfg.density}")
        for g in members:
            registry.local_index(d, f"u{g}")
        domains.append(
            InteractionSet.from_arrays(d, rows, cols, ts, U, cfg.n_items, tuple(f"d{d}i{j}" for j in range(cfg.n_items)))
        )
    return SynthData(domains, registry, user_latents, item_latents, cfg)


def write_domain_csv(iset: InteractionSet, registry: UserRegistry, path) -> None:
    members = registry.members(iset.domain_id)
    inv = {g: uid for uid, g in registry.global_ids.items()}
    item_ids = iset.item_ids or tuple(str(i) for i in range(iset.n_items))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "rating", "timestamp"])
        for u, i, t in zip(iset.users.tolist(), iset.items.tolist(), iset.timestamps.tolist()):
            w.writerow([inv[int(members[u])], item_ids[i], "5.0", t])


def write_registry(registry: UserRegistry, path) -> None:
    Path(path).write_text(json.dumps(registry.to_json(), sort_keys=True), encoding="utf-8")
