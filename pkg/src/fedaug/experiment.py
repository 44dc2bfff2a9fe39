"""Glue between configuration documents and the simulator: build the client
environments described by a config, run the federation, and write the
machine-readable outputs (results.json, rounds.csv, heterogeneity.csv, and a
fully resolved config echo)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .config import ConfigError, ExperimentConfig, experiment_to_dict
from .data import (
    Environment,
    Glyph,
    dirichlet_split,
    load_idx_dataset,
    make_environments,
    make_glyph_bank,
)
from .diagnostics import RoundRecord, heterogeneity_to_csv, records_to_csv
from .federation import run_federation
from .model import ModelSpec
from .rng import RngStream


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    model_spec: ModelSpec
    environments: list[Environment]
    records: list[RoundRecord]


def _load_bank(cfg: ExperimentConfig, rng: RngStream) -> tuple[list[Glyph], int, int]:
    """Returns (bank, side, num_classes)."""
    ds = cfg.dataset
    if ds.kind == "synthetic":
        bank = make_glyph_bank(
            ds.num_classes, ds.side, ds.samples_per_class, ds.noise_std, rng.child("glyphs")
        )
        return bank, ds.side, ds.num_classes
    samples = load_idx_dataset(ds.images, ds.labels)
    if ds.limit is not None:
        samples = samples[: ds.limit]
    if not samples:
        raise ConfigError("dataset: no samples loaded")
    side = samples[0][0].shape[0]
    if samples[0][0].shape != (side, side):
        raise ConfigError("dataset: idx images must be square for rotation")
    bank = [Glyph(pixels=p, label=l) for p, l in samples]
    num_classes = max(label for _, label in samples) + 1
    return bank, side, num_classes


def build_environments(cfg: ExperimentConfig) -> tuple[list[Environment], ModelSpec]:
    """Construct the training clients and OOD environment for a config."""
    rng = RngStream(cfg.seed)
    bank, side, num_classes = _load_bank(cfg, rng)
    envs = make_environments(bank, cfg.angles_deg, cfg.ood_angle_deg, rng.child("envs"))
    train_envs = [e for e in envs if e.role == "train_client"]
    ood_env = envs[-1]

    if cfg.split.num_clients_per_domain > 1:
        clients = []
        for env in train_envs:
            clients.extend(
                dirichlet_split(env, cfg.split, rng.child("split", env.env_id))
            )
        for new_id, env in enumerate(clients):
            env.env_id = new_id
        ood_env.env_id = len(clients)
        train_envs = clients

    model_classes = cfg.model.num_classes if cfg.model.num_classes is not None else num_classes
    model_input = cfg.model.input_dim if cfg.model.input_dim is not None else side * side
    if model_classes < num_classes:
        raise ConfigError(
            f"model.num_classes={model_classes} is smaller than the dataset's {num_classes}"
        )
    if model_input != side * side:
        raise ConfigError(f"model.input_dim={model_input} does not match side^2={side * side}")
    spec = ModelSpec(
        input_dim=model_input,
        hidden_dims=cfg.model.hidden_dims,
        num_classes=model_classes,
        activation=cfg.model.activation,
    )
    try:
        cfg.strategy.validate_for(len(train_envs))
    except ValueError as e:
        raise ConfigError(f"strategy: {e}") from e
    return train_envs + [ood_env], spec


def run_experiment(cfg: ExperimentConfig, num_threads: int = 1) -> ExperimentResult:
    envs, spec = build_environments(cfg)
    records = run_federation(
        envs,
        spec,
        cfg.strategy,
        cfg.augmentation,
        RngStream(cfg.seed),
        eval_every_rounds=cfg.eval_every_rounds,
        num_threads=num_threads,
    )
    return ExperimentResult(config=cfg, model_spec=spec, environments=envs, records=records)


def resolved_config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(experiment_to_dict(cfg), indent=2, sort_keys=True)


def write_outputs(result: ExperimentResult, out_dir) -> None:
    """results.json, rounds.csv, heterogeneity.csv, resolved-config.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(
        json.dumps({"records": [r.to_dict() for r in result.records]}, indent=2, sort_keys=True)
    )
    (out / "rounds.csv").write_text(records_to_csv(result.records))
    final = result.records[-1]
    if final.grad_sq_norms is not None:
        (out / "heterogeneity.csv").write_text(
            heterogeneity_to_csv(final.grad_sq_norms, final.round)
        )
    (out / "resolved-config.json").write_text(resolved_config_json(result.config))


def load_records(run_dir) -> list[RoundRecord]:
    path = Path(run_dir) / "results.json"
    doc = json.loads(path.read_text())
    return [RoundRecord.from_dict(d) for d in doc["records"]]


_ = records_to_json  # re-exported convenience for library users
