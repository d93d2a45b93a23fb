"""Sharing regimes as key-resolution rules, the trainable-set policy, and the parameter audit."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .backbone import InsertionPoint, ModelConfig, backbone_param_specs, bart_base_like
from .config import (
    AdapterConfig,
    CompacterConfig,
    FrozenConfig,
    FullFineTuneConfig,
    HyperformerConfig,
    LoRAConfig,
    PromptConfig,
)
from .errors import ConfigError
from .numerics import Parameter
from .registry import ParamRegistry

SHARING_MODES = ("multiple", "half_shared_up", "half_shared_down", "single")
ROLES = ("down", "up", "bias_down", "bias_up", "factor", "lora_a", "lora_b", "lora_bias", "prompt")
_UP_ROLES = ("up", "bias_up")
_ADAPTER_ROLES = ("down", "up", "bias_down", "bias_up", "factor")
AUDIT_GROUPS = ("backbone", "embedding", "layer_norm", "visual_projection", "peft")


def _task_name(task) -> str:
    return task if isinstance(task, str) else task.name


def resolve_key(mode: str, task, point: InsertionPoint | None, role: str, part: str = "") -> str:
    """Registry key for one PEFT tensor.

    ``part`` distinguishes tensors sharing a role (``"A0"``, ``"q"``, ``"embed"``);
    for ``factor`` it starts with ``"down"`` or ``"up"`` to say which matrix it builds.
    """
    if mode not in SHARING_MODES:
        raise ConfigError(f"unknown sharing mode {mode!r}")
    if role not in ROLES:
        raise ConfigError(f"unknown role {role!r}")
    if mode in ("half_shared_up", "half_shared_down") and role not in _ADAPTER_ROLES:
        raise ConfigError(f"{mode} is only defined for adapter-family roles, not {role!r}")

    if mode == "multiple":
        per_task = True
    elif mode == "single":
        per_task = False
    else:
        is_up = role in _UP_ROLES or (role == "factor" and part.startswith("up"))
        per_task = (not is_up) if mode == "half_shared_up" else is_up

    where = point.name if point is not None else "-/-/-"
    key = f"peft/{where}/{role}"
    if part:
        key += f":{part}"
    if per_task:
        key += f"/{_task_name(task)}"
    return key


# -- trainable set --------------------------------------------------------------


@dataclass
class TrainableSet:
    trainable: list[str]
    frozen: list[str]

    def groups(self, registry: ParamRegistry) -> set[str]:
        return {registry[k].group for k in self.trainable}


def trainable_groups(peft_cfg) -> tuple[str, ...]:
    if isinstance(peft_cfg, FullFineTuneConfig):
        return ("backbone", "embedding", "output_head", "layer_norm", "visual_projection", "peft")
    if isinstance(peft_cfg, FrozenConfig):
        return ("visual_projection", "layer_norm") if peft_cfg.layer_norm else ("visual_projection",)
    return ("peft", "layer_norm", "visual_projection")


def build_trainable_set(model, peft_cfg) -> TrainableSet:
    """Set every parameter's ``trainable`` flag for the regime and report the split."""
    allowed = set(trainable_groups(peft_cfg))
    trainable, frozen = [], []
    for p in model.registry:
        p.trainable = p.group in allowed
        (trainable if p.trainable else frozen).append(p.key)
    return TrainableSet(trainable, frozen)


# -- gradient accumulation ------------------------------------------------------


def accumulate_shared_gradients(
    registry: ParamRegistry, contributions: Iterable[tuple[Parameter, np.ndarray]]
) -> dict[str, np.ndarray]:
    """Sum per-use gradient contributions into one gradient per registry key."""
    out: dict[str, np.ndarray] = {}
    for p, g in contributions:
        if registry[p.key] is not p:
            raise KeyError(f"parameter {p.key!r} is not owned by this registry")
        if not p.trainable:
            continue
        if p.key in out:
            out[p.key] = out[p.key] + g
        else:
            out[p.key] = g
    return out


# -- audit ----------------------------------------------------------------------


@dataclass
class AuditReport:
    counts: dict[str, int]
    trainable_total: int
    denominator_total: int
    trainable_by_group: dict[str, int] = field(default_factory=dict)

    @property
    def updated_percent(self) -> float:
        return 100.0 * self.trainable_total / self.denominator_total

    def to_dict(self) -> dict:
        return {
            "counts": dict(self.counts),
            "trainable_by_group": dict(self.trainable_by_group),
            "trainable_total": self.trainable_total,
            "denominator_total": self.denominator_total,
            "updated_percent": self.updated_percent,
        }


def _report(counts: Mapping[str, int], allowed: Iterable[str]) -> AuditReport:
    counts = {g: int(counts.get(g, 0)) for g in AUDIT_GROUPS}
    allowed = set(allowed)
    by_group = {g: (n if g in allowed else 0) for g, n in counts.items()}
    return AuditReport(counts, sum(by_group.values()), sum(counts.values()), by_group)


def audit(model_cfg: ModelConfig, peft_cfg, n_tasks: int) -> AuditReport:
    """Closed-form parameter accounting; the visual featurizer is never counted."""
    from .peft import count_params

    counts = {g: 0 for g in AUDIT_GROUPS}
    for spec in backbone_param_specs(model_cfg):
        counts[spec.group] += spec.size
    counts["peft"] = count_params(peft_cfg, model_cfg, n_tasks)["total"]
    return _report(counts, trainable_groups(peft_cfg))


def audit_registry(registry: ParamRegistry) -> AuditReport:
    """Same report, by enumerating an instantiated registry and its trainable flags."""
    counts = {g: 0 for g in AUDIT_GROUPS}
    trainable = {g: 0 for g in AUDIT_GROUPS}
    for p in registry:
        g = "embedding" if p.group == "output_head" else p.group
        counts[g] += p.size
        if p.trainable:
            trainable[g] += p.size
    return AuditReport(counts, sum(trainable.values()), sum(counts.values()), trainable)


TABLE1_N_TASKS = 4


def table1_regimes() -> list[tuple[str, object]]:
    """The CLIP-BART rows of the main results table, plus the shared-down half-shared variant."""
    return [
        ("full_finetune", FullFineTuneConfig()),
        ("multiple_adapters", AdapterConfig(d=96, sharing="multiple")),
        ("half_shared_adapters", AdapterConfig(d=96, sharing="half_shared_up")),
        ("half_shared_down_adapters", AdapterConfig(d=96, sharing="half_shared_down")),
        ("single_adapter", AdapterConfig(d=96, sharing="single")),
        ("hyperformer", HyperformerConfig(d=96, d_e=8, d_p=8)),
        ("multiple_compacters", CompacterConfig(d=96, k=2, sharing="multiple")),
        ("single_compacter", CompacterConfig(d=96, k=2, sharing="single")),
        ("multiple_lora", LoRAConfig(d_lora=64, sharing="multiple")),
        ("single_lora", LoRAConfig(d_lora=64, sharing="single")),
        ("multiple_prompts", PromptConfig(n_prompts=40, d_m=800, sharing="multiple")),
        ("single_prompt", PromptConfig(n_prompts=40, d_m=800, sharing="single")),
    ]


def describe(peft_cfg) -> str:
    return " ".join(f"{k}={v}" for k, v in peft_cfg.model_dump(mode="json").items() if k != "kind")


def table1_rows(model_cfg: ModelConfig | None = None, n_tasks: int = TABLE1_N_TASKS) -> list[dict]:
    model_cfg = model_cfg or bart_base_like()
    rows = []
    for name, peft_cfg in table1_regimes():
        rep = audit(model_cfg, peft_cfg, n_tasks)
        rows.append(
            {
                "regime": name,
                "config": f"{peft_cfg.kind} {describe(peft_cfg)}".strip(),
                "trainable_count": rep.trainable_total,
                "denominator": rep.denominator_total,
                "percent": rep.updated_percent,
            }
        )
    return rows


def component_percent(model_cfg: ModelConfig, group: str) -> float:
    """Share of one backbone group in the plain (no PEFT) model."""
    rep = audit(model_cfg, FullFineTuneConfig(), 1)
    return 100.0 * rep.counts[group] / rep.denominator_total
