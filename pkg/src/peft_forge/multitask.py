"""Synthetic multi-task benchmark, universal dataset, training loop and exact-match evaluation.

Scenes are 4x4 boards of (shape, color) objects.  A frozen seeded featurizer turns
each board into 16 visual tokens; the pair task concatenates two boards.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .backbone import (
    EOS,
    PAD,
    SPECIAL_TOKENS,
    Batch,
    EncoderDecoderModel,
    forward,
    generate_greedy,
    sequence_loss,
    serialize_input,
)
from .config import TrainConfig
from .errors import ConfigError, NonFiniteError, TaskError, TrainingDiverged
from .numerics import GradTape
from .seeding import rng_for

BOARD = 4
CELLS = BOARD * BOARD
COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
NUMBERS = ("zero", "one", "two", "three", "four", "five", "six")
TASK_NAMES = ("count", "exist", "compare", "caption")
CONFUSION_TASKS = ("exist", "verify")
WORDS = (
    "how", "many", "objects", "is", "there", "a", "left", "has", "more", "than", "right",
    "yes", "no", "true", "false", "nothing",
)  # fmt: skip


def _task_tag(name: str) -> str:
    return f"<{name}>"


class Vocab:
    """Closed symbolic inventory; ids 0..3 are the special tokens."""

    def __init__(self, words: Sequence[str]):
        self.words = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate vocabulary entries")
        self.ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.ids

    def encode(self, words: Iterable[str]) -> list[int]:
        try:
            return [self.ids[w] for w in words]
        except KeyError as e:
            raise TaskError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.words[i] for i in ids]


VOCAB = Vocab(
    [_task_tag(t) for t in TASK_NAMES + CONFUSION_TASKS[1:]] + list(COLORS) + list(SHAPES) + list(NUMBERS) + list(WORDS)
)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    prefix_tokens: tuple[int, ...]
    answer_space: tuple[str, ...]  # empty: free-form
    n_scenes: int = 1

    def __post_init__(self):
        if any(not 0 <= t < len(VOCAB) for t in self.prefix_tokens):
            raise TaskError(f"prefix of task {self.name!r} leaves the vocabulary")


TASK_SPECS: dict[str, TaskSpec] = {
    "count": TaskSpec("count", tuple(VOCAB.encode([_task_tag("count")])), NUMBERS),
    "exist": TaskSpec("exist", tuple(VOCAB.encode([_task_tag("exist")])), ("yes", "no")),
    "compare": TaskSpec("compare", tuple(VOCAB.encode([_task_tag("compare")])), ("true", "false"), n_scenes=2),
    "caption": TaskSpec("caption", tuple(VOCAB.encode([_task_tag("caption")])), ()),
    # same inputs as exist, answered in the true/false convention
    "verify": TaskSpec("verify", tuple(VOCAB.encode([_task_tag("verify")])), ("true", "false")),
}


def task_spec(name: str) -> TaskSpec:
    if name not in TASK_SPECS:
        raise TaskError(f"unknown task {name!r}")
    return TASK_SPECS[name]


# -- scenes ------------------------------------------------------------------------

Scene = tuple  # 16 cells, each None or (shape, color)


def empty_scene() -> Scene:
    return (None,) * CELLS


def place(rng: np.random.Generator, objects: Sequence[tuple[str, str]]) -> Scene:
    if len(objects) > CELLS:
        raise ValueError("too many objects for the board")
    cells: list = [None] * CELLS
    for pos, obj in zip(rng.permutation(CELLS)[: len(objects)].tolist(), objects):
        cells[pos] = tuple(obj)
    return tuple(cells)


def count_color(scene: Scene, color: str) -> int:
    return sum(1 for c in scene if c is not None and c[1] == color)


def has_shape(scene: Scene, shape: str) -> bool:
    return any(c is not None and c[0] == shape for c in scene)


def caption_words(scene: Scene) -> list[str]:
    """Colors present, in inventory order, or ``nothing``."""
    present = [c for c in COLORS if count_color(scene, c)]
    return present or ["nothing"]


@dataclass(frozen=True)
class Example:
    task: str
    scenes: tuple[Scene, ...]
    input_words: tuple[str, ...]  # raw question, before task serialization
    target_words: tuple[str, ...]

    def key(self) -> tuple:
        return (self.task, self.scenes, self.input_words)


class Featurizer:
    """Frozen random linear map of a joint one-hot cell encoding.

    Each cell is one class out of (board slot, empty or shape/color object), so the
    features already separate objects the way a pretrained detector would.  Cell
    order carries the position.  Weights are a plain array fixed by ``seed``,
    never a Parameter.
    """

    def __init__(self, seed: int, d_visual: int, max_scenes: int = 2):
        self.seed = seed
        self.d_visual = d_visual
        self.max_scenes = max_scenes
        self._object = {(s, c): 1 + i * len(COLORS) + j
                        for i, s in enumerate(SHAPES) for j, c in enumerate(COLORS)}
        self._per_slot = 1 + len(self._object)
        self.n_in = self._per_slot * max_scenes
        rng = rng_for(seed, "featurizer")
        self.weight = rng.standard_normal((self.n_in, d_visual))
        self.weight.setflags(write=False)

    def one_hot(self, scenes: Sequence[Scene]) -> np.ndarray:
        if len(scenes) > self.max_scenes:
            raise ValueError(f"at most {self.max_scenes} scenes per example")
        out = np.zeros((len(scenes) * CELLS, self.n_in))
        for slot, scene in enumerate(scenes):
            for pos, cell in enumerate(scene):
                cls = 0 if cell is None else self._object[cell]
                out[slot * CELLS + pos, slot * self._per_slot + cls] = 1.0
        return out

    def __call__(self, scenes: Sequence[Scene]) -> np.ndarray:
        return self.one_hot(scenes) @ self.weight


# -- generators -----------------------------------------------------------------


def _other(rng, pool: Sequence[str], exclude: str) -> str:
    rest = [p for p in pool if p != exclude]
    return rest[int(rng.integers(len(rest)))]


def _pick(rng, pool: Sequence[str]) -> str:
    return pool[int(rng.integers(len(pool)))]


def _gen_count(rng) -> Example:
    color = _pick(rng, COLORS)
    n = int(rng.integers(0, 5))
    objs = [(_pick(rng, SHAPES), color) for _ in range(n)]
    objs += [(_pick(rng, SHAPES), _other(rng, COLORS, color)) for _ in range(int(rng.integers(0, 4)))]
    return Example("count", (place(rng, objs),), ("how", "many", color, "objects"), (NUMBERS[n],))


def _gen_exist(rng, task: str = "exist") -> Example:
    shape = _pick(rng, SHAPES)
    answer = bool(rng.integers(2))
    objs = []
    if answer:
        objs += [(shape, _pick(rng, COLORS)) for _ in range(int(rng.integers(1, 3)))]
    n_other = int(rng.integers(0 if answer else 1, 5))
    objs += [(_other(rng, SHAPES, shape), _pick(rng, COLORS)) for _ in range(n_other)]
    words = ("is", "there", "a", shape)
    if task == "verify":
        return Example(task, (place(rng, objs),), words, ("true" if answer else "false",))
    return Example(task, (place(rng, objs),), words, ("yes" if answer else "no",))


def _gen_compare(rng) -> Example:
    color = _pick(rng, COLORS)
    truth = bool(rng.integers(2))
    while True:
        a, b = int(rng.integers(0, 4)), int(rng.integers(0, 4))
        if (a > b) == truth:
            break
    scenes = []
    for n in (a, b):
        objs = [(_pick(rng, SHAPES), color) for _ in range(n)]
        objs += [(_pick(rng, SHAPES), _other(rng, COLORS, color)) for _ in range(int(rng.integers(0, 3)))]
        scenes.append(place(rng, objs))
    words = ("left", "has", "more", color, "than", "right")
    return Example("compare", tuple(scenes), words, ("true" if truth else "false",))


def _gen_caption(rng) -> Example:
    n = int(rng.integers(0, 6))
    scene = place(rng, [(_pick(rng, SHAPES), _pick(rng, COLORS)) for _ in range(n)])
    return Example("caption", (scene,), (), tuple(caption_words(scene)))


GENERATORS: dict[str, Callable[[np.random.Generator], Example]] = {
    "count": _gen_count,
    "exist": _gen_exist,
    "compare": _gen_compare,
    "caption": _gen_caption,
    "verify": lambda rng: _gen_exist(rng, "verify"),
}

SPLITS = ("train", "val", "test")


def _generate_split(name: str, n: int, rng, seen: set, max_tries: int) -> list[Example]:
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not draw {n} distinct {name} examples")
        ex = GENERATORS[name](rng)
        if ex.key() in seen:
            continue
        seen.add(ex.key())
        out.append(ex)
    return out


def generate_tasks(seed: int, sizes: Mapping[str, int] | int, names: Sequence[str] = TASK_NAMES,
                   val_size: int = 200, test_size: int = 200) -> dict[str, dict[str, list[Example]]]:
    """``{task: {"train"|"val"|"test": [Example]}}`` with splits disjoint by (scenes, question).

    ``sizes`` gives the training-set size, globally or per task.
    """
    out = {}
    for name in names:
        if name not in GENERATORS:
            raise TaskError(f"unknown task {name!r}")
        n_train = sizes if isinstance(sizes, int) else sizes[name]
        counts = {"train": n_train, "val": val_size, "test": test_size}
        if min(counts.values()) <= 0:
            raise ConfigError("task sizes must be positive")
        seen: set = set()
        out[name] = {}
        for split in SPLITS:
            rng = rng_for(seed, "tasks", name, split)
            out[name][split] = _generate_split(name, counts[split], rng, seen, 50 * counts[split] + 1000)
    return out


def confusion_tasks(seed: int, n_train: int, n_eval: int = 200) -> dict[str, dict[str, list[Example]]]:
    """Two tasks with identical input distributions whose targets always differ."""
    return generate_tasks(seed, n_train, CONFUSION_TASKS, n_eval, n_eval)


# -- universal dataset ------------------------------------------------------------


@dataclass(frozen=True)
class Item:
    """One serialized example of the universal dataset."""

    example: Example
    task_index: int
    input_ids: tuple[int, ...]
    target_ids: tuple[int, ...]


@dataclass
class UniversalDataset:
    task_names: list[str]
    items: list[Item]
    use_prompt: bool
    seed: int

    def __len__(self) -> int:
        return len(self.items)

    def sizes(self) -> dict[str, int]:
        out = {t: 0 for t in self.task_names}
        for it in self.items:
            out[self.task_names[it.task_index]] += 1
        return out

    def by_task(self, name: str) -> list[Item]:
        j = self.task_names.index(name)
        return [it for it in self.items if it.task_index == j]


def serialize_example(ex: Example, task_names: Sequence[str], use_prompt: bool = True) -> Item:
    raw = VOCAB.encode(ex.input_words)
    ids = serialize_input(task_spec(ex.task), raw, use_prompt)
    return Item(ex, list(task_names).index(ex.task), tuple(ids), tuple(VOCAB.encode(ex.target_words)))


def build_universal_dataset(tasks: Mapping[str, Sequence[Example]], use_prompt: bool = True, seed: int = 0,
                            shuffle: bool = True) -> UniversalDataset:
    """Concatenate per-task datasets, serialize each example, shuffle uniformly."""
    if not tasks:
        raise ConfigError("at least one task is required")
    names = list(tasks)
    items = [serialize_example(ex, names, use_prompt) for name in names for ex in tasks[name]]
    if shuffle:
        perm = rng_for(seed, "universal").permutation(len(items))
        items = [items[i] for i in perm]
    return UniversalDataset(names, items, use_prompt, seed)


def split_dataset(generated: Mapping[str, Mapping[str, list[Example]]], split: str, use_prompt: bool = True,
                  seed: int = 0, shuffle: bool = True) -> UniversalDataset:
    return build_universal_dataset({t: s[split] for t, s in generated.items()}, use_prompt, seed, shuffle)


def make_batch(items: Sequence[Item], featurizer: Featurizer, dtype=np.float64) -> Batch:
    feats = [featurizer(it.example.scenes) for it in items]
    B = len(items)
    nv = max(f.shape[0] for f in feats)
    ns = max(len(it.input_ids) for it in items)
    m = max(len(it.target_ids) for it in items) + 1
    visual = np.zeros((B, nv, featurizer.d_visual), dtype=dtype)
    tokens = np.full((B, ns), PAD, dtype=np.int64)
    targets = np.full((B, m), PAD, dtype=np.int64)
    for b, (it, f) in enumerate(zip(items, feats)):
        visual[b, : f.shape[0]] = f
        tokens[b, : len(it.input_ids)] = it.input_ids
        targets[b, : len(it.target_ids)] = it.target_ids
        targets[b, len(it.target_ids)] = EOS
    return Batch(
        visual=visual,
        visual_len=np.asarray([f.shape[0] for f in feats], dtype=np.int64),
        tokens=tokens,
        token_len=np.asarray([len(it.input_ids) for it in items], dtype=np.int64),
        targets=targets,
        tasks=np.asarray([it.task_index for it in items], dtype=np.int64),
    )


# -- JSONL dump / reload -------------------------------------------------------------


def _scene_to_json(scene: Scene) -> list:
    return [None if c is None else list(c) for c in scene]


def _scene_from_json(raw) -> Scene:
    if len(raw) != CELLS:
        raise ValueError(f"scene must have {CELLS} cells")
    return tuple(None if c is None else (str(c[0]), str(c[1])) for c in raw)


def dump_jsonl(path, dataset: UniversalDataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in dataset.items:
            rec = {
                "task": it.example.task,
                "scene": [_scene_to_json(s) for s in it.example.scenes],
                "input_tokens": VOCAB.decode(it.input_ids),
                "target_tokens": list(it.example.target_words),
            }
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path, task_names: Sequence[str], use_prompt: bool = True, seed: int = 0) -> UniversalDataset:
    """Reload a dump; item order is preserved and features are recomputed by the featurizer."""
    items = []
    n_prefix = {t: len(task_spec(t).prefix_tokens) + 1 for t in task_names}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            task = rec["task"]
            if task not in n_prefix:
                raise TaskError(f"unknown task {task!r} in {path}")
            words = list(rec["input_tokens"])
            raw = words[n_prefix[task]:] if use_prompt else words
            ex = Example(task, tuple(_scene_from_json(s) for s in rec["scene"]), tuple(raw), tuple(rec["target_tokens"]))
            item = serialize_example(ex, task_names, use_prompt)
            if list(item.input_ids) != VOCAB.encode(words):
                raise ValueError(f"{path}: input tokens do not match the serialization of task {task!r}")
            items.append(item)
    return UniversalDataset(list(task_names), items, use_prompt, seed)


# -- optimization --------------------------------------------------------------------


def lr_at(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear warmup from 0 to ``peak``, then linear decay to 0 at ``total_steps``."""
    if warmup_steps >= total_steps:
        raise ConfigError(f"warmup_steps={warmup_steps} must be smaller than total_steps={total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak * step / warmup_steps
    return peak * (total_steps - step) / (total_steps - warmup_steps)


def _decays(p) -> bool:
    return p.group != "layer_norm" and "bias" not in p.key.rsplit("/", 1)[-1]


class AdamW:
    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.key: np.zeros_like(p.data) for p in self.params}
        self.v = {p.key: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p in self.params:
            g = grads.get(p.key)
            if g is None:
                continue
            m = self.m[p.key] = self.b1 * self.m[p.key] + (1.0 - self.b1) * g
            v = self.v[p.key] = self.b2 * self.v[p.key] + (1.0 - self.b2) * g * g
            if lr == 0.0:
                continue
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and _decays(p):
                upd = upd + self.weight_decay * p.data
            p.data = (p.data - lr * upd).astype(p.data.dtype, copy=False)


# -- training ------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val_exact_match: dict[str, float]
    val_average: float
    lr: float
    wall_seconds: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_exact_match": self.val_exact_match,
            "val_average": self.val_average,
            "lr": self.lr,
            "wall_seconds": self.wall_seconds,
        }


@dataclass
class TrainResult:
    history: list[MetricsRecord] = field(default_factory=list)
    steps: int = 0
    step_losses: list[float] = field(default_factory=list)


def _peft_surfaces(peft, tasks):
    if peft is None:
        return None, None, None
    return peft.hooks(), peft.soft_prompts(tasks), peft.linear_deltas()


def batch_logits(model, peft, batch: Batch):
    hooks, prompts, deltas = _peft_surfaces(peft, batch.tasks)
    return forward(model, batch, hooks=hooks, soft_prompts=prompts, linear_deltas=deltas)


def weighted_loss(logits, batch: Batch, task_names: Sequence[str], weights: Mapping[str, float]):
    """Mean token cross entropy; per-task weights rescale each task's tokens."""
    if not weights or all(float(weights.get(t, 1.0)) == 1.0 for t in task_names):
        return sequence_loss(logits, batch.targets)
    B, M, V = logits.shape
    flat = nx.reshape(logits, (B * M, V))
    total, norm = None, 0.0
    for j, name in enumerate(task_names):
        rows = np.nonzero(batch.tasks == j)[0]
        if rows.size == 0:
            continue
        tok = np.concatenate([np.arange(r * M, (r + 1) * M) for r in rows])
        tgt = batch.targets.reshape(-1)[tok]
        n_tok = int((tgt != PAD).sum())
        w = float(weights.get(name, 1.0)) * n_tok
        term = nx.scale(nx.softmax_cross_entropy(nx.take(flat, tok, axis=0), tgt, ignore_index=PAD), w)
        total = term if total is None else nx.add(total, term)
        norm += w
    return nx.scale(total, 1.0 / norm)


def _norms(params) -> str:
    parts = []
    for p in params:
        with np.errstate(all="ignore"):
            parts.append(f"{p.key}={float(np.sqrt(np.sum(np.asarray(p.data, dtype=np.float64) ** 2))):.4g}")
    return ", ".join(parts[:12]) + (" ..." if len(parts) > 12 else "")


def train(model: EncoderDecoderModel, peft, dataset: UniversalDataset, cfg: TrainConfig,
          featurizer: Featurizer, val: UniversalDataset | None = None, eval_max_len: int = 8,
          on_epoch: Callable[[MetricsRecord], None] | None = None) -> TrainResult:
    """AdamW over the trainable parameters with warmup + linear decay; last checkpoint is kept.

    The trainable set must already be built (see ``sharing.build_trainable_set``).
    """
    params = [p for p in model.registry if p.trainable]
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size) if n else 0
    total = steps_per_epoch * cfg.epochs
    warmup = int(round(cfg.warmup_epochs * steps_per_epoch))
    if total and warmup >= total:
        raise ConfigError("warmup must end before training does")
    dtype = model.cfg.np_dtype
    result = TrainResult()
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng_for(cfg.seed, "shuffle", epoch).permutation(n)
        losses = []
        lr = 0.0
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            batch = make_batch([dataset.items[i] for i in idx], featurizer, dtype)
            step += 1
            lr = lr_at(step, total, warmup, cfg.peak_lr)
            try:
                with GradTape() as tape:
                    logits = batch_logits(model, peft, batch)
                    loss = weighted_loss(logits, batch, dataset.task_names, cfg.task_weights)
                if not np.isfinite(loss.data):
                    raise NonFiniteError("loss is not finite")
                grads = tape.gradient(loss, params)
                bad = [p.key for p, g in grads.items() if not np.isfinite(g).all()]
                if bad:
                    raise NonFiniteError(f"non-finite gradient for {bad[0]}")
            except NonFiniteError as e:
                raise TrainingDiverged(f"step {step} (epoch {epoch}): {e}; parameter norms: {_norms(params)}") from e
            opt.step({p.key: g for p, g in grads.items()}, lr)
            losses.append(float(loss.data))
        result.step_losses.extend(losses)
        scores = evaluate(model, peft, val, featurizer, eval_max_len) if val is not None else {}
        rec = MetricsRecord(
            epoch=epoch + 1,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            val_exact_match={k: v for k, v in scores.items() if k != "average"},
            val_average=scores.get("average", float("nan")),
            lr=lr,
            wall_seconds=time.perf_counter() - start,
        )
        result.history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    result.steps = step
    return result


def train_steps(model, peft, batch: Batch, task_names: Sequence[str], n_steps: int, lr: float,
                weight_decay: float = 0.0) -> list[float]:
    """Repeated optimizer steps on one fixed batch at constant ``lr``; returns the losses."""
    params = [p for p in model.registry if p.trainable]
    opt = AdamW(params, weight_decay=weight_decay)
    out = []
    for _ in range(n_steps):
        with GradTape() as tape:
            loss = weighted_loss(batch_logits(model, peft, batch), batch, task_names, {})
        grads = tape.gradient(loss, params)
        opt.step({p.key: g for p, g in grads.items()}, lr)
        out.append(float(loss.data))
    return out


def dataset_loss(model, peft, items: Sequence[Item], featurizer: Featurizer, batch_size: int = 64) -> float:
    """Mean over examples of each example's mean token cross entropy."""
    dtype = model.cfg.np_dtype
    per = []
    for i in range(0, len(items), batch_size):
        chunk = items[i : i + batch_size]
        batch = make_batch(chunk, featurizer, dtype)
        logits = batch_logits(model, peft, batch)
        for b in range(len(chunk)):
            one = nx.take(logits, [b], axis=0)
            per.append(float(sequence_loss(one, batch.targets[b : b + 1]).data))
    return float(np.mean(per))


# -- evaluation ------------------------------------------------------------------------


def predict(model, peft, items: Sequence[Item], featurizer: Featurizer, max_len: int = 8,
            batch_size: int = 100) -> list[list[int]]:
    dtype = model.cfg.np_dtype
    out: list[list[int]] = []
    for i in range(0, len(items), batch_size):
        batch = make_batch(items[i : i + batch_size], featurizer, dtype)
        hooks, prompts, deltas = _peft_surfaces(peft, batch.tasks)
        out.extend(generate_greedy(model, batch, max_len, hooks=hooks, soft_prompts=prompts, linear_deltas=deltas))
    return out


def exact_match(predictions: Sequence[Sequence[int]], items: Sequence[Item], task_names: Sequence[str]) -> dict[str, float]:
    """Per-task exact-match percentage and their macro average (key ``average``)."""
    hits = {t: 0 for t in task_names}
    totals = {t: 0 for t in task_names}
    for pred, it in zip(predictions, items):
        name = task_names[it.task_index]
        totals[name] += 1
        hits[name] += int(list(pred) == list(it.target_ids))
    scores = {t: 100.0 * hits[t] / totals[t] for t in task_names if totals[t]}
    scores["average"] = float(np.mean(list(scores.values()))) if scores else float("nan")
    return scores


def closed_set_accuracy(model, peft, split: UniversalDataset, featurizer: Featurizer,
                        batch_size: int = 100) -> dict[str, float]:
    """Accuracy when the first decoded token is restricted to each task's answer space.

    Only tasks with a single-word answer space are scored.
    """
    dtype = model.cfg.np_dtype
    hits: dict[str, int] = {}
    totals: dict[str, int] = {}
    for i in range(0, len(split.items), batch_size):
        chunk = split.items[i : i + batch_size]
        batch = make_batch(chunk, featurizer, dtype)
        first = batch_logits(model, peft, batch).data[:, 0, :]
        for b, it in enumerate(chunk):
            name = split.task_names[it.task_index]
            space = task_spec(name).answer_space
            if not space:
                continue
            ids = VOCAB.encode(space)
            guess = ids[int(np.argmax(first[b, ids]))]
            totals[name] = totals.get(name, 0) + 1
            hits[name] = hits.get(name, 0) + int([guess] == list(it.target_ids))
    return {t: 100.0 * hits[t] / totals[t] for t in totals}


def evaluate(model, peft, split: UniversalDataset, featurizer: Featurizer, max_len: int = 8) -> dict[str, float]:
    """Greedy decoding + exact match; reads parameters only."""
    preds = predict(model, peft, split.items, featurizer, max_len)
    return exact_match(preds, split.items, split.task_names)
