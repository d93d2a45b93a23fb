"""Declarative configuration: PEFT regimes, training, and the experiment file."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .backbone import ModelConfig
from .errors import ConfigError

SharingMode = Literal["multiple", "half_shared_up", "half_shared_down", "single"]
HALF_SHARED = ("half_shared_up", "half_shared_down")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AdapterConfig(_Strict):
    kind: Literal["adapter"] = "adapter"
    d: int = Field(96, gt=0)
    sharing: SharingMode = "single"


class HyperformerConfig(_Strict):
    kind: Literal["hyperformer"] = "hyperformer"
    d: int = Field(96, gt=0)
    d_e: int = Field(8, gt=0)
    d_p: int = Field(8, gt=0)
    d_hidden: Optional[int] = Field(None, gt=0)  # projector hidden width, default 2*d_e
    # "per_kind": one hypernet per sublayer kind (encoder self-attn, decoder cross-attn, ...)
    # "global": a single hypernet for every insertion point
    hypernet_scope: Literal["per_kind", "global"] = "per_kind"

    @property
    def projector_hidden(self) -> int:
        return self.d_hidden or 2 * self.d_e


class CompacterConfig(_Strict):
    kind: Literal["compacter"] = "compacter"
    d: int = Field(96, gt=0)
    k: int = Field(2, gt=0)
    share_A: bool = False
    low_rank: bool = False
    rank: int = Field(1, gt=0)
    sharing: SharingMode = "single"


class LoRAConfig(_Strict):
    kind: Literal["lora"] = "lora"
    d_lora: int = Field(64, gt=0)
    targets: tuple[Literal["q", "k", "v", "o"], ...] = ("q", "k", "v", "o")
    bias_trainable: bool = True
    sharing: Literal["multiple", "single"] = "single"


class PromptConfig(_Strict):
    kind: Literal["prompt"] = "prompt"
    n_prompts: int = Field(40, gt=0)
    d_m: int = Field(800, gt=0)
    sharing: Literal["multiple", "single"] = "single"


class FullFineTuneConfig(_Strict):
    kind: Literal["full_finetune"] = "full_finetune"


class FrozenConfig(_Strict):
    """No PEFT module: only the visual projection (and optionally layer norms) train."""

    kind: Literal["frozen"] = "frozen"
    layer_norm: bool = True


PeftConfig = Annotated[
    Union[AdapterConfig, HyperformerConfig, CompacterConfig, LoRAConfig, PromptConfig, FullFineTuneConfig, FrozenConfig],
    Field(discriminator="kind"),
]


class TrainConfig(_Strict):
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(16, gt=0)
    peak_lr: float = Field(1e-3, gt=0)
    warmup_epochs: float = Field(2, ge=0)
    weight_decay: float = Field(0.01, ge=0)
    seed: int = 0
    use_prompt: bool = True
    task_weights: dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _warmup_before_end(self):
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        return self


class TaskSizes(_Strict):
    train: int = Field(2000, gt=0)
    val: int = Field(200, gt=0)
    test: int = Field(200, gt=0)


class TasksConfig(_Strict):
    names: tuple[str, ...] = ("count", "exist", "compare", "caption")
    sizes: TaskSizes = TaskSizes()
    per_task_train: dict[str, int] = Field(default_factory=dict)  # overrides sizes.train per task
    seed: Optional[int] = None  # data seed; defaults to train.seed


class ModelSection(_Strict):
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: Optional[int] = None  # defaults to the task vocabulary size
    max_positions: int = 96
    d_visual: int = 64
    n_visual_tokens: int = 32
    dtype: Literal["f32", "f64"] = "f32"

    def build(self, vocab_size: int) -> ModelConfig:
        fields = self.model_dump()
        fields["vocab_size"] = self.vocab_size or vocab_size
        return ModelConfig(**fields).validate(min_vocab=vocab_size)


class ExperimentConfig(_Strict):
    model: ModelSection = ModelSection()
    peft: PeftConfig = AdapterConfig()
    train: TrainConfig = TrainConfig()
    tasks: TasksConfig = TasksConfig()
    eval_max_len: int = Field(8, gt=0)
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def _sharing_compatible(self):
        check_sharing(self.peft)
        return self


def check_sharing(peft) -> None:
    mode = getattr(peft, "sharing", None)
    if mode in HALF_SHARED and peft.kind not in ("adapter", "compacter"):
        raise ValueError(f"{mode} sharing applies only to adapter and compacter regimes")


def _line_of(text: str, loc: tuple) -> int | None:
    """Best-effort line number of the innermost named key in ``loc``."""
    for part in reversed(loc):
        if isinstance(part, str):
            needle = f'"{part}"'
            for lineno, line in enumerate(text.splitlines(), start=1):
                if needle in line:
                    return lineno
    return None


def load_experiment(path) -> ExperimentConfig:
    """Parse and validate a JSON experiment file; errors carry ``path:line`` anchors."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from e
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        msgs = []
        for err in e.errors():
            line = _line_of(text, err["loc"])
            where = f"{path}:{line}" if line else str(path)
            dotted = ".".join(str(p) for p in err["loc"])
            msgs.append(f"{where}: {dotted}: {err['msg']}")
        raise ConfigError("\n".join(msgs)) from e


def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")
