"""Heterogeneity and distribution-distance measurements.

The heterogeneity of a federation at a model theta is the average squared
gradient norm across environments, each gradient taken full-batch over the
environment's evaluation split.  Total-variation distances between
environment-angle distributions come in closed form (Dirac and uniform
pairs) and as a trapezoid integral over gridded densities.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Environment
from .linalg import squared_norm
from .model import Batch, ModelSpec, loss_and_grad


@dataclass(frozen=True)
class HeterogeneityReport:
    """Per-environment squared gradient norms with their mean and spread."""

    per_env_grad_sq_norm: tuple[float, ...]
    env_ids: tuple[int, ...]
    mean: float
    std: float
    evaluated_at: str

    def to_dict(self) -> dict:
        return {
            "per_env_grad_sq_norm": list(self.per_env_grad_sq_norm),
            "env_ids": list(self.env_ids),
            "mean": self.mean,
            "std": self.std,
            "evaluated_at": self.evaluated_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeterogeneityReport":
        return cls(
            per_env_grad_sq_norm=tuple(d["per_env_grad_sq_norm"]),
            env_ids=tuple(d["env_ids"]),
            mean=d["mean"],
            std=d["std"],
            evaluated_at=d["evaluated_at"],
        )


def heterogeneity(
    envs: list[Environment],
    theta: np.ndarray,
    spec: ModelSpec,
    evaluated_at: str = "final global model",
) -> HeterogeneityReport:
    """Full-batch ||grad f_i(theta)||^2 per environment, with mean and std.

    Gradients are taken over each environment's evaluation split (validation
    split for training environments, full set for the OOD environment).
    """
    norms = []
    ids = []
    for env in envs:
        pixels, labels = env.eval_data()
        if len(labels) == 0:
            raise ValueError(f"environment {env.env_id} has an empty evaluation set")
        batch = Batch(pixels.reshape(len(labels), -1), labels)
        _, grad = loss_and_grad(spec, theta, batch)
        norms.append(squared_norm(grad))
        ids.append(env.env_id)
    values = np.asarray(norms)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return HeterogeneityReport(
        per_env_grad_sq_norm=tuple(norms),
        env_ids=tuple(ids),
        mean=float(values.mean()),
        std=std,
        evaluated_at=evaluated_at,
    )


# ---------------------------------------------------------------------------
# Total-variation distances between environment-angle distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TvQuery:
    """Closed-form TV query: a pair of Diracs at t1, t2, or a pair of
    uniforms U(t1 - alpha, t1 + alpha) and U(t2 - alpha, t2 + alpha)."""

    kind: str  # "dirac_pair" | "uniform_pair"
    t1: float
    t2: float
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in ("dirac_pair", "uniform_pair"):
            raise ValueError(f"unknown TV query kind: {self.kind!r}")
        if self.kind == "uniform_pair" and (self.alpha is None or self.alpha <= 0):
            raise ValueError("uniform_pair requires alpha > 0")


def tv_analytic(query: TvQuery) -> float:
    """Closed-form TV distance (integral of |p1 - p2|, so 2 for disjoint supports)."""
    if query.kind == "dirac_pair":
        return 0.0 if query.t1 == query.t2 else 2.0
    return min(2.0, abs(query.t2 - query.t1) / query.alpha)


def tv_dirac(t1: float, t2: float) -> float:
    return tv_analytic(TvQuery("dirac_pair", t1, t2))


def tv_uniform(t1: float, t2: float, alpha: float) -> float:
    return tv_analytic(TvQuery("uniform_pair", t1, t2, alpha))


def tv_numeric(p1, p2, grid) -> float:
    """Trapezoid integral of |p1 - p2| over a shared grid.

    Both densities must be nonnegative and integrate to 1 within 1e-6.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if p1.shape != grid.shape or p2.shape != grid.shape:
        raise ValueError("densities and grid must share a common shape")
    if (p1 < 0).any() or (p2 < 0).any():
        raise ValueError("densities must be nonnegative")
    for name, p in (("p1", p1), ("p2", p2)):
        mass = float(np.trapezoid(p, grid))
        if abs(mass - 1.0) > 1e-6:
            raise ValueError(f"{name} is not normalized: integrates to {mass:.8f}")
    return float(np.trapezoid(np.abs(p1 - p2), grid))


# ---------------------------------------------------------------------------
# Round records and derived reports
# ---------------------------------------------------------------------------


@dataclass
class RoundRecord:
    """Metrics for one communication round."""

    round: int
    per_client_loss: list[float]
    lam: list[float]
    client_env_ids: list[int]
    id_accuracy: float | None = None
    ood_accuracy: float | None = None
    grad_sq_norms: HeterogeneityReport | None = None

    def __post_init__(self):
        for name, acc in (("id_accuracy", self.id_accuracy), ("ood_accuracy", self.ood_accuracy)):
            if acc is not None and not 0.0 <= acc <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {acc}")

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "per_client_loss": list(self.per_client_loss),
            "lambda": list(self.lam),
            "client_env_ids": list(self.client_env_ids),
            "id_accuracy": self.id_accuracy,
            "ood_accuracy": self.ood_accuracy,
            "grad_sq_norms": None if self.grad_sq_norms is None else self.grad_sq_norms.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        hetero = d.get("grad_sq_norms")
        return cls(
            round=d["round"],
            per_client_loss=list(d["per_client_loss"]),
            lam=list(d["lambda"]),
            client_env_ids=list(d["client_env_ids"]),
            id_accuracy=d.get("id_accuracy"),
            ood_accuracy=d.get("ood_accuracy"),
            grad_sq_norms=None if hetero is None else HeterogeneityReport.from_dict(hetero),
        )


CSV_HEADER = ("round", "env_id", "metric", "value")


def records_to_csv(records: list[RoundRecord]) -> str:
    """Long-format CSV (round, env_id, metric, value); env_id blank for
    federation-level metrics.  Row order is fixed: by round, then metric."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        for env_id, loss in zip(rec.client_env_ids, rec.per_client_loss):
            writer.writerow([rec.round, env_id, "train_loss", repr(loss)])
        for env_id, lam in zip(rec.client_env_ids, rec.lam):
            writer.writerow([rec.round, env_id, "lambda", repr(lam)])
        if rec.id_accuracy is not None:
            writer.writerow([rec.round, "", "id_accuracy", repr(rec.id_accuracy)])
        if rec.ood_accuracy is not None:
            writer.writerow([rec.round, "", "ood_accuracy", repr(rec.ood_accuracy)])
    return buf.getvalue()


def heterogeneity_to_csv(report: HeterogeneityReport, round_index: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for env_id, value in zip(report.env_ids, report.per_env_grad_sq_norm):
        writer.writerow([round_index, env_id, "grad_sq_norm", repr(value)])
    writer.writerow([round_index, "", "sigma2_mean", repr(report.mean)])
    writer.writerow([round_index, "", "sigma2_std", repr(report.std)])
    return buf.getvalue()


def records_to_json(records: list[RoundRecord]) -> str:
    return json.dumps([r.to_dict() for r in records], indent=2, sort_keys=True)


def records_from_json(text: str) -> list[RoundRecord]:
    return [RoundRecord.from_dict(d) for d in json.loads(text)]


def gap_report(
    records_fed: list[RoundRecord],
    records_central: list[RoundRecord],
    steps_per_round_fed: int = 1,
    steps_per_round_central: int = 1,
) -> list[tuple[int, float]]:
    """Centralized minus federated OOD accuracy at matched gradient budgets.

    Records are matched on cumulative gradient steps (round index + 1 times
    steps per round); rounds without OOD accuracy are skipped.
    """

    def budgets(records, steps):
        return {
            (r.round + 1) * steps: r.ood_accuracy
            for r in records
            if r.ood_accuracy is not None
        }

    fed = budgets(records_fed, steps_per_round_fed)
    central = budgets(records_central, steps_per_round_central)
    common = sorted(set(fed) & set(central))
    if not common:
        raise ValueError("misaligned gradient-step budgets: no comparable rounds")
    return [(b, central[b] - fed[b]) for b in common]


def optimality_gap_proxy(records: list[RoundRecord]) -> float:
    """Final mean training loss minus the best mean loss observed in the run."""
    means = [float(np.mean(r.per_client_loss)) for r in records]
    if not means:
        raise ValueError("no records")
    return means[-1] - min(means)
