"""Federated training loop and aggregation strategies.

Strategies: plain federated averaging (fedavg), worst-case client weighting
(afl) and its generalized-simplex extension (gen_afl), variance-penalized
pseudo-gradient aggregation (vm), invariance-penalized local training
(fed_irm), proximal local training (fedprox), and a centralized baseline
that trains a single merged client.

Each round broadcasts the global model, trains every client locally (fresh
optimizer state per round), then applies the strategy's aggregation and
weight update.  All per-client randomness comes from streams named by
(round, client index), and aggregation sums run in fixed client order, so
results are bit-identical regardless of the worker-thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import AugmentationSpec, Environment, augment_batch
from .diagnostics import HeterogeneityReport, RoundRecord, heterogeneity
from .model import (
    Batch,
    ModelSpec,
    OptimizerState,
    accuracy,
    init_params,
    irm_penalty_and_grad,
    loss_and_grad,
    make_optimizer,
    num_params,
    optimizer_step,
)
from .rng import RngStream
from .simplex import project_generalized, project_simplex

STRATEGY_KINDS = ("fedavg", "afl", "gen_afl", "vm", "fed_irm", "fedprox", "centralized")


@dataclass(frozen=True)
class StrategyConfig:
    """Algorithm choice plus the hyperparameters it needs."""

    kind: str
    rounds_T: int
    local_steps_E: int
    batch_size: int = 64
    lr_theta: float = 1e-3
    lr_lambda: float = 0.1  # afl / gen_afl weight ascent rate
    lambda_min: float = -1.0  # gen_afl lower bound; < 1/n required
    beta: float = 0.0  # vm / fed_irm penalty weight
    mu: float = 0.0  # fedprox proximal weight
    optimizer_kind: str = "adam"

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind: {self.kind!r}")
        if self.rounds_T < 1:
            raise ValueError("rounds_T must be >= 1")
        if self.local_steps_E < 1:
            raise ValueError("local_steps_E must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer_kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind: {self.optimizer_kind!r}")
        if self.kind in ("vm", "fed_irm") and self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.kind == "fedprox":
            if self.mu < 0:
                raise ValueError("mu must be >= 0")
            if self.optimizer_kind != "sgd":
                raise ValueError("fedprox runs its proximal steps with sgd")

    def validate_for(self, n_clients: int) -> None:
        if self.kind == "gen_afl" and self.lambda_min >= 1.0 / n_clients:
            raise ValueError(
                f"lambda_min must be < 1/n (got {self.lambda_min} with n={n_clients})"
            )


@dataclass
class FederationState:
    """Server-side state visible to round hooks."""

    global_theta: np.ndarray
    lam: np.ndarray
    round: int
    per_client_optimizer: list[OptimizerState]


@dataclass(frozen=True)
class LocalUpdate:
    """Result of one client's local training in one round."""

    client_id: int
    theta_after: np.ndarray
    pseudo_gradient: np.ndarray  # theta_before - theta_after
    train_loss: float  # mean loss over the round's local steps


def draw_training_batch(
    env: Environment,
    batch_size: int,
    aug: AugmentationSpec,
    stream: RngStream,
) -> Batch:
    """Sample a mini-batch uniformly with replacement, augmenting on draw.

    Consumes the stream in a fixed order (indices, then augmentation draws),
    so a batch can be reproduced from the same stream name.
    """
    pixels, labels = env.train_data()
    idx = stream.generator.integers(0, len(labels), size=batch_size)
    images = augment_batch(aug, pixels[idx], stream)
    return Batch(images.reshape(batch_size, -1), labels[idx])


def local_train(
    env: Environment,
    theta_start: np.ndarray,
    spec: ModelSpec,
    cfg: StrategyConfig,
    aug: AugmentationSpec,
    stream: RngStream,
    opt_state: OptimizerState | None = None,
) -> tuple[LocalUpdate, OptimizerState]:
    """Run E local optimizer steps from the broadcast model.

    fedprox adds mu * (theta - theta_start) to each step's gradient; fed_irm
    adds beta times the invariance-penalty gradient.  ``train_loss`` is the
    mean plain cross-entropy over the E steps (penalties excluded).
    """
    theta = theta_start.copy()
    if opt_state is None:
        opt_state = make_optimizer(cfg.optimizer_kind, cfg.lr_theta, len(theta))
    loss_sum = 0.0
    for _ in range(cfg.local_steps_E):
        batch = draw_training_batch(env, cfg.batch_size, aug, stream)
        loss, grad = loss_and_grad(spec, theta, batch)
        if cfg.kind == "fedprox" and cfg.mu != 0.0:
            grad = grad + cfg.mu * (theta - theta_start)
        if cfg.kind == "fed_irm" and cfg.beta != 0.0:
            _, pgrad = irm_penalty_and_grad(spec, theta, batch)
            grad = grad + cfg.beta * pgrad
        theta, opt_state = optimizer_step(opt_state, theta, grad)
        loss_sum += loss
    update = LocalUpdate(
        client_id=env.env_id,
        theta_after=theta,
        pseudo_gradient=theta_start - theta,
        train_loss=loss_sum / cfg.local_steps_E,
    )
    return update, opt_state


def aggregate_weighted(updates: list[LocalUpdate], lam) -> np.ndarray:
    """Sum of lam_i * theta_i in client order; lam may leave the convex hull."""
    lam = np.asarray(lam, dtype=np.float64)
    if len(lam) != len(updates):
        raise ValueError(f"{len(lam)} weights for {len(updates)} updates")
    out = np.zeros_like(updates[0].theta_after)
    for weight, update in zip(lam, updates):
        out += weight * update.theta_after
    return out


def aggregate_fedavg(updates: list[LocalUpdate], weights) -> np.ndarray:
    """Size-weighted model average; weights must sum to one."""
    if not updates:
        raise ValueError("no updates to aggregate")
    weights = np.asarray(weights, dtype=np.float64)
    if abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError(f"aggregation weights sum to {weights.sum()!r}, expected 1")
    return aggregate_weighted(updates, weights)


def update_lambda_gen_afl(lam, losses, cfg: StrategyConfig, n_clients: int | None = None):
    """Ascent step on the client losses followed by projection onto the
    generalized simplex: lam' = (lam + lr * f - lam_min) / (1 - n lam_min),
    then lam = (1 - n lam_min) proj_simplex(lam') + lam_min."""
    lam = np.asarray(lam, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    n = n_clients if n_clients is not None else len(lam)
    if cfg.lambda_min >= 1.0 / n:
        raise ValueError(f"lambda_min must be < 1/n (got {cfg.lambda_min} with n={n})")
    return project_generalized(lam + cfg.lr_lambda * losses, cfg.lambda_min)


def update_lambda_afl(lam, losses, cfg: StrategyConfig):
    """AFL is the lambda_min = 0 case of the generalized update."""
    return update_lambda_gen_afl(lam, losses, replace(cfg, lambda_min=0.0))


def aggregate_vm(updates: list[LocalUpdate], losses, lam, beta: float) -> np.ndarray:
    """Variance-penalized aggregate pseudo-gradient.

    delta = sum_i lam_i d_i + 2 beta sum_i lam_i (f_i - fbar)(d_i - dbar)
    with lam-weighted means fbar, dbar; the new global model is
    theta_t - delta.  The variance term vanishes for identical clients.
    """
    lam = np.asarray(lam, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if not (len(updates) == len(lam) == len(losses)):
        raise ValueError("updates, losses, and weights must have equal length")
    dbar = np.zeros_like(updates[0].pseudo_gradient)
    for weight, update in zip(lam, updates):
        dbar += weight * update.pseudo_gradient
    if beta == 0.0:
        return dbar
    fbar = 0.0
    for weight, loss in zip(lam, losses):
        fbar += weight * loss
    delta = dbar.copy()
    for weight, loss, update in zip(lam, losses, updates):
        delta += 2.0 * beta * weight * (loss - fbar) * (update.pseudo_gradient - dbar)
    return delta


def _merge_train_environments(envs: list[Environment]) -> Environment:
    """Single pooled client for the centralized baseline; preserves each
    environment's train/validation split."""
    pixels = np.concatenate([e.pixels for e in envs])
    labels = np.concatenate([e.labels for e in envs])
    train_parts, val_parts = [], []
    offset = 0
    for env in envs:
        train_parts.append(env.train_indices + offset)
        val_parts.append(env.val_indices + offset)
        offset += env.num_samples
    return Environment(
        env_id=-1,
        epsilon_deg=float("nan"),
        pixels=pixels,
        labels=labels,
        role="train_client",
        train_indices=np.concatenate(train_parts),
        val_indices=np.concatenate(val_parts),
    )


def _initial_lambda(cfg: StrategyConfig, sizes: np.ndarray) -> np.ndarray:
    lam = sizes / sizes.sum()
    bound = cfg.lambda_min if cfg.kind == "gen_afl" else 0.0
    feasible = abs(lam.sum() - 1.0) <= 1e-12 and lam.min() >= bound - 1e-12
    if feasible:
        return lam
    if cfg.kind == "gen_afl":
        return project_generalized(lam, cfg.lambda_min)
    return project_simplex(lam)


def _eval_batch(env: Environment) -> Batch:
    pixels, labels = env.eval_data()
    return Batch(pixels.reshape(len(labels), -1), labels)


def run_federation(
    envs: list[Environment],
    spec: ModelSpec,
    cfg: StrategyConfig,
    aug: AugmentationSpec,
    rng: RngStream,
    eval_every_rounds: int = 1,
    hooks: tuple = (),
    theta0: np.ndarray | None = None,
    num_threads: int = 1,
    compute_heterogeneity: bool = True,
) -> list[RoundRecord]:
    """Run T communication rounds and return one record per round.

    Accuracy metrics are computed every ``eval_every_rounds`` rounds and on
    the final round; the heterogeneity report is attached to the final
    record.  ``num_threads`` affects speed only, never results.
    """
    train_envs = [e for e in envs if e.role == "train_client"]
    ood_envs = [e for e in envs if e.role == "ood_test"]
    if not train_envs:
        raise ValueError("need at least one training environment")
    if eval_every_rounds < 1:
        raise ValueError("eval_every_rounds must be >= 1")

    centralized = cfg.kind == "centralized"
    participants = [_merge_train_environments(train_envs)] if centralized else train_envs
    n = len(participants)
    cfg.validate_for(n)

    sizes = np.array([len(p.train_indices) for p in participants], dtype=np.float64)
    weights = sizes / sizes.sum()
    lam = _initial_lambda(cfg, sizes)

    theta = init_params(spec, rng.child("init")) if theta0 is None else theta0.copy()
    id_eval = [_eval_batch(e) for e in train_envs]
    ood_eval = [_eval_batch(e) for e in ood_envs]
    persistent_opt: list[OptimizerState | None] = [None] * n

    records = []
    for t in range(cfg.rounds_T):
        def train_one(i: int, theta_t=theta, round_index=t):
            stream = rng.child("round", round_index, "client", i)
            state = persistent_opt[i] if centralized else None
            return local_train(participants[i], theta_t, spec, cfg, aug, stream, state)

        if num_threads > 1 and n > 1:
            with ThreadPoolExecutor(max_workers=num_threads) as pool:
                results = list(pool.map(train_one, range(n)))
        else:
            results = [train_one(i) for i in range(n)]
        updates = [r[0] for r in results]
        opt_states = [r[1] for r in results]
        if centralized:
            persistent_opt = list(opt_states)
        losses = np.array([u.train_loss for u in updates])

        lam_used = lam.copy()
        if cfg.kind in ("fedavg", "fedprox", "fed_irm"):
            theta = aggregate_fedavg(updates, weights)
        elif cfg.kind == "centralized":
            theta = updates[0].theta_after
        elif cfg.kind == "vm":
            delta = aggregate_vm(updates, losses, lam, cfg.beta)
            theta = theta - delta
        elif cfg.kind == "afl":
            theta = aggregate_weighted(updates, lam)
            lam = update_lambda_afl(lam, losses, cfg)
        else:  # gen_afl
            theta = aggregate_weighted(updates, lam)
            lam = update_lambda_gen_afl(lam, losses, cfg)

        final_round = t == cfg.rounds_T - 1
        eval_round = ((t + 1) % eval_every_rounds == 0) or final_round
        id_acc = ood_acc = None
        if eval_round:
            id_acc = float(np.mean([accuracy(spec, theta, b) for b in id_eval]))
            if ood_eval:
                ood_acc = float(np.mean([accuracy(spec, theta, b) for b in ood_eval]))
        hetero: HeterogeneityReport | None = None
        if final_round and compute_heterogeneity:
            hetero = heterogeneity(train_envs + ood_envs, theta, spec)

        record = RoundRecord(
            round=t,
            per_client_loss=[float(x) for x in losses],
            lam=[float(x) for x in lam_used],
            client_env_ids=[p.env_id for p in participants],
            id_accuracy=id_acc,
            ood_accuracy=ood_acc,
            grad_sq_norms=hetero,
        )
        records.append(record)
        if hooks:
            state = FederationState(
                global_theta=theta, lam=lam, round=t, per_client_optimizer=list(opt_states)
            )
            for hook in hooks:
                hook(state, record)
    return records
