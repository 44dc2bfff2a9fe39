"""JSON experiment configuration: strict parsing, defaults, sweep expansion.

Unknown fields are errors, never silently ignored.  Every defaulted field is
echoed back by :func:`experiment_to_dict`, and feeding that resolved document
back through :func:`parse_experiment` reproduces the identical experiment.
"""

from __future__ import annotations

import itertools
from copy import deepcopy
from dataclasses import dataclass

from .data import AugmentationSpec, SplitSpec
from .federation import StrategyConfig
from .rng import _splitmix64


class ConfigError(ValueError):
    """A configuration document is malformed; the message names the field."""


def _check_keys(d: dict, allowed: tuple[str, ...], context: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{context} must be a JSON object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown field: {context}.{unknown[0]}")


def _get(d: dict, key: str, default, context: str, kind=None):
    value = d.get(key, default)
    if kind is not None and value is not None and not isinstance(value, kind):
        names = kind if isinstance(kind, tuple) else (kind,)
        if not (float in names and isinstance(value, int) and not isinstance(value, bool)):
            raise ConfigError(
                f"{context}.{key} must be {'/'.join(k.__name__ for k in names)}"
            )
    return value


@dataclass(frozen=True)
class DatasetConfig:
    kind: str  # "synthetic" | "idx"
    num_classes: int = 6
    side: int = 16
    samples_per_class: int = 500
    noise_std: float = 0.04
    images: str | None = None
    labels: str | None = None
    limit: int | None = None


@dataclass(frozen=True)
class ModelConfig:
    hidden_dims: tuple[int, ...] = (64,)
    activation: str = "relu"
    input_dim: int | None = None  # derived from the dataset when omitted
    num_classes: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    dataset: DatasetConfig
    angles_deg: tuple[float, ...]
    ood_angle_deg: float
    split: SplitSpec
    augmentation: AugmentationSpec
    strategy: StrategyConfig
    model: ModelConfig
    eval_every_rounds: int = 1
    output_dir: str = "results"

    @property
    def num_train_clients(self) -> int:
        return len(self.angles_deg) * self.split.num_clients_per_domain


def _parse_dataset(d: dict) -> DatasetConfig:
    _check_keys(
        d,
        ("kind", "num_classes", "side", "samples_per_class", "noise_std", "images", "labels", "limit"),
        "dataset",
    )
    kind = _get(d, "kind", "synthetic", "dataset", str)
    if kind not in ("synthetic", "idx"):
        raise ConfigError(f"dataset.kind must be 'synthetic' or 'idx', got {kind!r}")
    cfg = DatasetConfig(
        kind=kind,
        num_classes=_get(d, "num_classes", 6, "dataset", int),
        side=_get(d, "side", 16, "dataset", int),
        samples_per_class=_get(d, "samples_per_class", 500, "dataset", int),
        noise_std=float(_get(d, "noise_std", 0.04, "dataset", (int, float))),
        images=_get(d, "images", None, "dataset", str),
        labels=_get(d, "labels", None, "dataset", str),
        limit=_get(d, "limit", None, "dataset", int),
    )
    if kind == "idx" and (cfg.images is None or cfg.labels is None):
        raise ConfigError("dataset.images and dataset.labels are required for kind 'idx'")
    if kind == "synthetic" and (cfg.num_classes < 2 or cfg.samples_per_class < 1 or cfg.side < 8):
        raise ConfigError("dataset: num_classes >= 2, samples_per_class >= 1, side >= 8 required")
    if cfg.noise_std < 0:
        raise ConfigError("dataset.noise_std must be >= 0")
    return cfg


def _parse_augmentation(d: dict, context: str = "augmentation") -> AugmentationSpec:
    _check_keys(d, ("kind", "alpha_deg", "sigma", "kernel", "parts"), context)
    kind = _get(d, "kind", "none", context, str)
    try:
        if kind == "compose":
            parts = d.get("parts", [])
            if not isinstance(parts, list):
                raise ConfigError(f"{context}.parts must be a list")
            return AugmentationSpec.compose(
                *(_parse_augmentation(p, f"{context}.parts[{i}]") for i, p in enumerate(parts))
            )
        return AugmentationSpec(
            kind=kind,
            alpha_deg=float(_get(d, "alpha_deg", 0.0, context, (int, float))),
            sigma=float(_get(d, "sigma", 1.0, context, (int, float))),
            kernel=_get(d, "kernel", 5, context, int),
        )
    except ValueError as e:
        raise ConfigError(f"{context}: {e}") from e


def _parse_split(d: dict) -> SplitSpec:
    _check_keys(d, ("dirichlet_alpha", "num_clients_per_domain"), "split")
    try:
        return SplitSpec(
            dirichlet_alpha=float(_get(d, "dirichlet_alpha", 200.0, "split", (int, float))),
            num_clients_per_domain=_get(d, "num_clients_per_domain", 1, "split", int),
        )
    except ValueError as e:
        raise ConfigError(f"split: {e}") from e


_STRATEGY_KEYS = (
    "kind", "rounds_T", "local_steps_E", "batch_size", "lr_theta",
    "lr_lambda", "lambda_min", "beta", "mu", "optimizer_kind",
)


def _parse_strategy(d: dict) -> StrategyConfig:
    _check_keys(d, _STRATEGY_KEYS, "strategy")
    try:
        return StrategyConfig(
            kind=_get(d, "kind", "fedavg", "strategy", str),
            rounds_T=_get(d, "rounds_T", 20, "strategy", int),
            local_steps_E=_get(d, "local_steps_E", 50, "strategy", int),
            batch_size=_get(d, "batch_size", 64, "strategy", int),
            lr_theta=float(_get(d, "lr_theta", 1e-3, "strategy", (int, float))),
            lr_lambda=float(_get(d, "lr_lambda", 0.1, "strategy", (int, float))),
            lambda_min=float(_get(d, "lambda_min", -1.0, "strategy", (int, float))),
            beta=float(_get(d, "beta", 10.0, "strategy", (int, float))),
            mu=float(_get(d, "mu", 0.0, "strategy", (int, float))),
            optimizer_kind=_get(d, "optimizer_kind", "adam", "strategy", str),
        )
    except ValueError as e:
        raise ConfigError(f"strategy: {e}") from e


def _parse_model(d: dict) -> ModelConfig:
    _check_keys(d, ("hidden_dims", "activation", "input_dim", "num_classes"), "model")
    hidden = _get(d, "hidden_dims", [64], "model", list)
    if not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError("model.hidden_dims must be positive integers")
    return ModelConfig(
        hidden_dims=tuple(hidden),
        activation=_get(d, "activation", "relu", "model", str),
        input_dim=_get(d, "input_dim", None, "model", int),
        num_classes=_get(d, "num_classes", None, "model", int),
    )


_EXPERIMENT_KEYS = (
    "seed", "dataset", "angles_deg", "ood_angle_deg", "split",
    "augmentation", "strategy", "model", "eval_every_rounds", "output_dir",
)


def parse_experiment(d: dict) -> ExperimentConfig:
    _check_keys(d, _EXPERIMENT_KEYS, "experiment")
    angles = _get(d, "angles_deg", [0.0, 15.0, 30.0, 45.0, 60.0], "experiment", list)
    if not angles or not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in angles):
        raise ConfigError("experiment.angles_deg must be a nonempty list of numbers")
    if len(set(float(a) for a in angles)) != len(angles):
        raise ConfigError("experiment.angles_deg must be distinct")
    cfg = ExperimentConfig(
        seed=_get(d, "seed", 0, "experiment", int),
        dataset=_parse_dataset(d.get("dataset", {})),
        angles_deg=tuple(float(a) for a in angles),
        ood_angle_deg=float(_get(d, "ood_angle_deg", 75.0, "experiment", (int, float))),
        split=_parse_split(d.get("split", {})),
        augmentation=_parse_augmentation(d.get("augmentation", {})),
        strategy=_parse_strategy(d.get("strategy", {})),
        model=_parse_model(d.get("model", {})),
        eval_every_rounds=_get(d, "eval_every_rounds", 1, "experiment", int),
        output_dir=_get(d, "output_dir", "results", "experiment", str),
    )
    if cfg.eval_every_rounds < 1:
        raise ConfigError("experiment.eval_every_rounds must be >= 1")
    try:
        cfg.strategy.validate_for(cfg.num_train_clients)
    except ValueError as e:
        raise ConfigError(f"strategy: {e}") from e
    return cfg


def augmentation_to_dict(aug: AugmentationSpec) -> dict:
    if aug.kind == "compose":
        return {"kind": "compose", "parts": [augmentation_to_dict(p) for p in aug.parts]}
    return {
        "kind": aug.kind,
        "alpha_deg": aug.alpha_deg,
        "sigma": aug.sigma,
        "kernel": aug.kernel,
    }


def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    """Fully resolved document: every field explicit, defaults included."""
    return {
        "seed": cfg.seed,
        "dataset": {
            "kind": cfg.dataset.kind,
            "num_classes": cfg.dataset.num_classes,
            "side": cfg.dataset.side,
            "samples_per_class": cfg.dataset.samples_per_class,
            "noise_std": cfg.dataset.noise_std,
            "images": cfg.dataset.images,
            "labels": cfg.dataset.labels,
            "limit": cfg.dataset.limit,
        },
        "angles_deg": list(cfg.angles_deg),
        "ood_angle_deg": cfg.ood_angle_deg,
        "split": {
            "dirichlet_alpha": cfg.split.dirichlet_alpha,
            "num_clients_per_domain": cfg.split.num_clients_per_domain,
        },
        "augmentation": augmentation_to_dict(cfg.augmentation),
        "strategy": {
            "kind": cfg.strategy.kind,
            "rounds_T": cfg.strategy.rounds_T,
            "local_steps_E": cfg.strategy.local_steps_E,
            "batch_size": cfg.strategy.batch_size,
            "lr_theta": cfg.strategy.lr_theta,
            "lr_lambda": cfg.strategy.lr_lambda,
            "lambda_min": cfg.strategy.lambda_min,
            "beta": cfg.strategy.beta,
            "mu": cfg.strategy.mu,
            "optimizer_kind": cfg.strategy.optimizer_kind,
        },
        "model": {
            "hidden_dims": list(cfg.model.hidden_dims),
            "activation": cfg.model.activation,
            "input_dim": cfg.model.input_dim,
            "num_classes": cfg.model.num_classes,
        },
        "eval_every_rounds": cfg.eval_every_rounds,
        "output_dir": cfg.output_dir,
    }


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepAxis:
    path: str  # dotted field path, e.g. "augmentation.alpha_deg"
    values: tuple


@dataclass(frozen=True)
class SweepConfig:
    base: ExperimentConfig
    axes: tuple[SweepAxis, ...]
    fixed_budget_steps: int | None = None  # rounds_T = budget / local_steps_E per point
    max_points: int = 512


def parse_sweep(d: dict) -> SweepConfig:
    _check_keys(d, ("base", "axes", "fixed_budget_steps", "max_points"), "sweep")
    base = parse_experiment(_get(d, "base", {}, "sweep", dict))
    raw_axes = _get(d, "axes", [], "sweep", list)
    if not raw_axes:
        raise ConfigError("sweep.axes must be a nonempty list")
    axes = []
    for i, axis in enumerate(raw_axes):
        _check_keys(axis, ("path", "values"), f"sweep.axes[{i}]")
        path = _get(axis, "path", None, f"sweep.axes[{i}]", str)
        values = _get(axis, "values", None, f"sweep.axes[{i}]", list)
        if not path or not values:
            raise ConfigError(f"sweep.axes[{i}] needs a path and a nonempty values list")
        axes.append(SweepAxis(path=path, values=tuple(values)))
    sweep = SweepConfig(
        base=base,
        axes=tuple(axes),
        fixed_budget_steps=_get(d, "fixed_budget_steps", None, "sweep", int),
        max_points=_get(d, "max_points", 512, "sweep", int),
    )
    n_points = 1
    for axis in sweep.axes:
        n_points *= len(axis.values)
    if n_points > sweep.max_points:
        raise ConfigError(f"sweep has {n_points} points, exceeding max_points={sweep.max_points}")
    return sweep


def _set_path(doc: dict, path: str, value) -> None:
    parts = path.split(".")
    node = doc
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"sweep axis path not found: {path}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"sweep axis path not found: {path}")
    node[parts[-1]] = value


def expand_sweep(sweep: SweepConfig) -> list[tuple[int, dict, ExperimentConfig]]:
    """All sweep points as (index, axis-assignment, experiment config).

    Unless a "seed" axis says otherwise, each point's seed is derived from
    (base seed, point index) so sequential and parallel execution agree.
    """
    base_doc = experiment_to_dict(sweep.base)
    has_seed_axis = any(axis.path == "seed" for axis in sweep.axes)
    points = []
    for index, combo in enumerate(itertools.product(*(axis.values for axis in sweep.axes))):
        doc = deepcopy(base_doc)
        assignment = {}
        for axis, value in zip(sweep.axes, combo):
            _set_path(doc, axis.path, value)
            assignment[axis.path] = value
        if not has_seed_axis:
            doc["seed"] = _splitmix64(sweep.base.seed ^ _splitmix64(index))
        if sweep.fixed_budget_steps is not None:
            steps = doc["strategy"]["local_steps_E"]
            if sweep.fixed_budget_steps % steps != 0:
                raise ConfigError(
                    f"fixed_budget_steps={sweep.fixed_budget_steps} is not divisible by "
                    f"local_steps_E={steps}"
                )
            doc["strategy"]["rounds_T"] = sweep.fixed_budget_steps // steps
        points.append((index, assignment, parse_experiment(doc)))
    return points
