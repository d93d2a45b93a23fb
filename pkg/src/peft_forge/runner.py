"""Glue between an :class:`ExperimentConfig` and the model, data and training loop."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .backbone import EncoderDecoderModel, ModelConfig, build_model, load_checkpoint, restore, save_checkpoint
from .config import ExperimentConfig, experiment_to_dict
from .multitask import (
    VOCAB,
    Featurizer,
    MetricsRecord,
    TrainResult,
    UniversalDataset,
    evaluate,
    generate_tasks,
    split_dataset,
    train,
)
from .peft import PeftInstance, attach_peft
from .seeding import derive_seed
from .sharing import AuditReport, audit_registry, build_trainable_set

REPORT_FORMAT = "peft-forge-report"


@dataclass
class Experiment:
    cfg: ExperimentConfig
    model_cfg: ModelConfig
    model: EncoderDecoderModel
    peft: PeftInstance
    featurizer: Featurizer
    splits: dict[str, UniversalDataset]

    @property
    def task_names(self) -> list[str]:
        return list(self.cfg.tasks.names)

    def audit(self) -> AuditReport:
        return audit_registry(self.model.registry)


def data_seed(cfg: ExperimentConfig) -> int:
    return cfg.tasks.seed if cfg.tasks.seed is not None else cfg.train.seed


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    """Model, PEFT regime, trainable set, featurizer and the three splits, all from ``cfg``."""
    seed = cfg.train.seed
    model_cfg = cfg.model.build(len(VOCAB))
    model = build_model(model_cfg, derive_seed(seed, "backbone"))
    names = list(cfg.tasks.names)
    peft = attach_peft(model, cfg.peft, names, seed)
    build_trainable_set(model, cfg.peft)
    sizes = {t: cfg.tasks.per_task_train.get(t, cfg.tasks.sizes.train) for t in names}
    generated = generate_tasks(data_seed(cfg), sizes, names, cfg.tasks.sizes.val, cfg.tasks.sizes.test)
    use_prompt = cfg.train.use_prompt
    splits = {
        "train": split_dataset(generated, "train", use_prompt, seed, shuffle=True),
        "val": split_dataset(generated, "val", use_prompt, seed, shuffle=False),
        "test": split_dataset(generated, "test", use_prompt, seed, shuffle=False),
    }
    featurizer = Featurizer(seed, model_cfg.d_visual)
    return Experiment(cfg, model_cfg, model, peft, featurizer, splits)


def run_training(exp: Experiment, on_epoch: Callable[[MetricsRecord], None] | None = None,
                 validate: bool = True) -> TrainResult:
    return train(
        exp.model,
        exp.peft,
        exp.splits["train"],
        exp.cfg.train,
        exp.featurizer,
        val=exp.splits["val"] if validate else None,
        eval_max_len=exp.cfg.eval_max_len,
        on_epoch=on_epoch,
    )


def evaluate_split(exp: Experiment, split: str) -> dict[str, float]:
    return evaluate(exp.model, exp.peft, exp.splits[split], exp.featurizer, exp.cfg.eval_max_len)


def final_report(exp: Experiment, result: TrainResult, test_scores: dict[str, float]) -> dict:
    return {
        "format": REPORT_FORMAT,
        "config": experiment_to_dict(exp.cfg),
        "steps": result.steps,
        "epochs": len(result.history),
        "test": {k: v for k, v in test_scores.items() if k != "average"},
        "test_average": test_scores["average"],
        "audit": exp.audit().to_dict(),
    }


def save(exp: Experiment, path) -> None:
    save_checkpoint(path, exp.model.registry, experiment_to_dict(exp.cfg))


def load(path) -> Experiment:
    """Rebuild the experiment described in a checkpoint header and restore its parameters."""
    header, arrays = load_checkpoint(path)
    cfg = ExperimentConfig.model_validate(header["config"])
    exp = build_experiment(cfg)
    restore(exp.model.registry, arrays)
    for key, meta in header["params"].items():
        exp.model.registry[key].trainable = bool(meta["trainable"])
    return exp


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8")
