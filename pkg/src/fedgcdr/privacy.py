"""Inversion attack on published knowledge stacks and the privacy-leakage score.

The attacker is honest-but-curious with white-box access to the source GAT
(its attention vector) and to the ego-graph structure. It sees the perturbed
layer stacks a client released and searches for user and item embeddings
whose forward pass reproduces them.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gatmodel as gm
from .graph import DomainGraph
from .optim import Adam
from .rng import substream
from .transfer import DpParams, clip_rows

log = logging.getLogger(__name__)


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    step_size: float = 0.05
    iterations: int = 500
    restarts: int = 3
    init_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        # zero iterations is allowed and simply returns the initial guess
        if self.iterations < 0:
            raise AttackError("iterations must be >= 0")
        if self.restarts < 1:
            raise AttackError("restarts must be >= 1")
        if not self.step_size > 0:
            raise AttackError("step_size must be > 0")


@dataclass(eq=False)
class AttackTarget:
    """What the attacker knows: model, ego-graphs of the attacked users, and their releases.

    ``items`` lists the attacked users' item neighbours as indices into the
    compact item table of size ``n_items``; ``published`` is (B, L, d).
    """

    attention: np.ndarray
    n_layers: int
    indptr: np.ndarray
    items: np.ndarray
    n_items: int
    published: np.ndarray

    @property
    def n_users(self) -> int:
        return len(self.indptr) - 1

    @property
    def dim(self) -> int:
        return len(self.attention) // 2

    def batch(self) -> gm.ClientBatch:
        empty = np.empty(0, dtype=np.int64)
        return gm.ClientBatch(
            users=np.arange(self.n_users),
            indptr=self.indptr,
            items=self.items,
            sample_owner=empty,
            sample_item=empty,
            labels=np.empty(0),
            weights=np.zeros(self.n_users),
        )

    def forward(self, users: np.ndarray, items: np.ndarray):
        params = gm.GatParams(users, items, self.attention, self.n_layers, self.dim)
        batch = self.batch()
        fwd = gm.forward(params, batch, options=gm.ModelOptions(virtual_mode="none"))
        return params, batch, fwd


@dataclass
class AttackResult:
    users: np.ndarray
    items: np.ndarray
    residual: float
    restart_residuals: list[float]
    discarded: int


def attack_objective(target: AttackTarget, users: np.ndarray, items: np.ndarray):
    """Squared reconstruction residual of the releases and its gradients."""
    params, batch, fwd = target.forward(users, items)
    diff = [fwd.user_layers[l] - target.published[:, l] for l in range(target.n_layers)]
    value = float(sum((r**2).sum() for r in diff))
    grads = gm.backward(params, batch, fwd, upstream=[2.0 * r for r in diff])
    return value, grads.users, grads.items


def inversion_attack(target: AttackTarget, cfg: AttackConfig = AttackConfig()) -> AttackResult:
    """Best of ``cfg.restarts`` Adam descents on the release residual.

    Restart ``r`` always starts from the same draw, so adding restarts can
    only lower the returned residual.
    """
    d = target.dim
    best: AttackResult | None = None
    residuals: list[float] = []
    discarded = 0
    for r in range(cfg.restarts):
        rng = substream(cfg.seed, "attack-init", r)
        est = {
            "users": rng.normal(0.0, cfg.init_std, size=(target.n_users, d)),
            "items": rng.normal(0.0, cfg.init_std, size=(target.n_items, d)),
        }
        opt = Adam(cfg.step_size)
        value = np.inf
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                for _ in range(cfg.iterations):
                    value, gu, gi = attack_objective(target, est["users"], est["items"])
                    if not np.isfinite(value):
                        break
                    opt.step(est, {"users": gu, "items": gi})
                value = attack_objective(target, est["users"], est["items"])[0]
            except gm.ModelError:
                value = np.inf
        if not np.isfinite(value):
            discarded += 1
            log.debug("attack restart %d diverged and was discarded", r)
            continue
        residuals.append(value)
        if best is None or value < best.residual:
            best = AttackResult(est["users"], est["items"], value, residuals, 0)
    if best is None:
        raise AttackError(f"all {cfg.restarts} attack restarts diverged")
    best.restart_residuals = residuals
    best.discarded = discarded
    return best


@dataclass
class LeakageReport:
    lam: float
    mean_user_leak: float
    mean_item_leak: float
    user_residuals: np.ndarray = field(repr=False)
    item_residuals: np.ndarray = field(repr=False)

    @property
    def recon_error(self) -> float:
        """Mean Euclidean error over every reconstructed entity."""
        both = np.concatenate([self.user_residuals, self.item_residuals])
        return float(both.mean()) if len(both) else 0.0


def privacy_leakage(
    recon_users: np.ndarray, true_users: np.ndarray, recon_items: np.ndarray, true_items: np.ndarray
) -> LeakageReport:
    if np.shape(recon_users) != np.shape(true_users) or np.shape(recon_items) != np.shape(true_items):
        raise AttackError("reconstructed and true embeddings must have the same shapes")
    ru = np.linalg.norm(np.asarray(recon_users) - true_users, axis=-1).reshape(-1)
    ri = np.linalg.norm(np.asarray(recon_items) - true_items, axis=-1).reshape(-1)
    mu = float(ru.mean()) if len(ru) else 0.0
    mi = float(ri.mean()) if len(ri) else 0.0
    return LeakageReport(1.0 / (1.0 + mu + mi), mu, mi, ru, ri)


# ----------------------------------------------------------------- sweeps

@dataclass(eq=False)
class AttackScenario:
    """Ground truth for a leakage experiment: a source model and the attacked users."""

    params: gm.GatParams
    graph: DomainGraph
    users: np.ndarray

    def ego(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """indptr, compact item indices and the compact-to-global item map."""
        deg = self.graph.degrees()[self.users]
        indptr = np.concatenate([[0], np.cumsum(deg)]).astype(np.int64)
        items = np.concatenate([self.graph.items_of(int(u)) for u in self.users]) if len(self.users) else np.zeros(0, np.int64)
        touched, compact = np.unique(items, return_inverse=True)
        return indptr, compact.astype(np.int64), touched

    def release(self, dp: DpParams | None, seed: int) -> AttackTarget:
        """Clip and perturb the attacked users' stacks as a client would; ``dp=None`` publishes them clean."""
        indptr, compact, touched = self.ego()
        true_items = self.params.item_embeddings[touched]
        probe = AttackTarget(self.params.attention, self.params.n_layers, indptr, compact, len(touched),
                             np.zeros((len(self.users), self.params.n_layers, self.params.dim)))
        _, _, fwd = probe.forward(self.params.user_embeddings[self.users], true_items)
        stacks = np.stack(fwd.user_layers, axis=1)
        if dp is not None:
            stacks = clip_rows(stacks, dp.clip_norm)
            stacks = stacks + substream(seed, "attack-release").normal(0.0, dp.noise_std, size=stacks.shape)
        probe.published = stacks
        return probe

    def truth(self) -> tuple[np.ndarray, np.ndarray]:
        _, _, touched = self.ego()
        return self.params.user_embeddings[self.users], self.params.item_embeddings[touched]


def invertible_fixture(n_users: int = 8, dim: int = 4, seed: int = 0) -> AttackScenario:
    """Isolated users under a one-layer model: every user's release is its own embedding."""
    rng = substream(seed, "invertible-fixture")
    params = gm.GatParams.init(n_users, 1, dim, 1, rng, std=0.3)
    empty = np.zeros(0, dtype=np.int64)
    graph = DomainGraph(n_users, 1, np.zeros(n_users + 1, dtype=np.int64), empty,
                        np.zeros(2, dtype=np.int64), empty)
    return AttackScenario(params, graph, np.arange(n_users))


def random_scenario(
    n_users: int = 30, n_items: int = 40, degree: int = 3, dim: int = 4, n_layers: int = 2, seed: int = 0
) -> AttackScenario:
    """A random source model over users with ``degree`` distinct items each."""
    if not 0 < degree <= n_items:
        raise AttackError("degree must lie in [1, n_items]")
    rng = substream(seed, "attack-scenario")
    users = np.repeat(np.arange(n_users), degree)
    items = np.concatenate([np.sort(rng.choice(n_items, degree, replace=False)) for _ in range(n_users)])
    indptr = np.arange(0, n_users * degree + 1, degree, dtype=np.int64)
    order = np.lexsort((users, items))
    graph = DomainGraph(
        n_users, n_items, indptr, items.astype(np.int64),
        np.concatenate([[0], np.cumsum(np.bincount(items, minlength=n_items))]).astype(np.int64),
        users[order].astype(np.int64),
    )
    params = gm.GatParams.init(n_users, n_items, dim, n_layers, rng, std=0.3)
    return AttackScenario(params, graph, np.arange(n_users))


def run_attack(scenario: AttackScenario, dp: DpParams | None, seed: int, cfg: AttackConfig) -> tuple[AttackResult, LeakageReport]:
    target = scenario.release(dp, seed)
    result = inversion_attack(target, AttackConfig(cfg.step_size, cfg.iterations, cfg.restarts, cfg.init_std, seed))
    tu, ti = scenario.truth()
    return result, privacy_leakage(result.users, tu, result.items, ti)


SWEEP_COLUMNS = ("epsilon", "delta", "seed", "lambda", "mean_user_leak", "mean_item_leak", "recon_error")


def leakage_sweep(
    epsilons: Sequence[float],
    scenario: AttackScenario,
    seeds: Sequence[int],
    delta: float = 1e-5,
    clip_norm: float = 1.0,
    cfg: AttackConfig = AttackConfig(),
) -> list[dict]:
    """One attack per (epsilon, seed) cell; rows follow the input order."""
    if len(epsilons) < 2:
        raise AttackError("a sweep needs at least two epsilon values")
    return attack_grid(epsilons, scenario, seeds, delta, clip_norm, cfg)


def attack_grid(
    epsilons: Sequence[float],
    scenario: AttackScenario,
    seeds: Sequence[int],
    delta: float = 1e-5,
    clip_norm: float = 1.0,
    cfg: AttackConfig = AttackConfig(),
) -> list[dict]:
    rows = []
    for eps in epsilons:
        dp = DpParams(float(eps), delta, clip_norm)
        for s in seeds:
            _, rep = run_attack(scenario, dp, int(s), cfg)
            rows.append(dict(epsilon=float(eps), delta=delta, seed=int(s), **{"lambda": rep.lam},
                             mean_user_leak=rep.mean_user_leak, mean_item_leak=rep.mean_item_leak,
                             recon_error=rep.recon_error))
    return rows


def mean_by_epsilon(rows: Sequence[dict], column: str = "recon_error") -> dict[float, float]:
    out: dict[float, list[float]] = {}
    for r in rows:
        out.setdefault(r["epsilon"], []).append(r[column])
    return {e: float(np.mean(v)) for e, v in out.items()}


def write_sweep_csv(rows: Sequence[dict], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in SWEEP_COLUMNS})
