"""Post-LN encoder-decoder transformer with named insertion points.

Every backbone weight lives in a :class:`ParamRegistry`.  PEFT modules plug in
through three seams, all optional:

* ``hooks``: ``{InsertionPoint: fn(x, tasks) -> Tensor}`` applied to a sublayer
  output before the residual add;
* ``linear_deltas``: ``{"backbone/.../q": fn(x, weight, bias, tasks)}`` replacing a
  projection (LoRA);
* ``soft_prompts``: ``[B, N_p, d_model]`` vectors prepended to the encoder input.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, SequenceError, TaskError
from .numerics import DTYPES, Parameter, Tensor
from .registry import ParamRegistry

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>")

SIDES = ("encoder", "decoder")
SLOTS = ("after_self_attention", "after_cross_attention", "after_feed_forward")
_SUBLAYER = {
    "after_self_attention": "self_attention",
    "after_cross_attention": "cross_attention",
    "after_feed_forward": "feed_forward",
}
INIT_STD = 0.02
CHECKPOINT_FORMAT = "peft-forge-checkpoint"
CHECKPOINT_VERSION = 1

Hook = Callable[[Tensor, np.ndarray], Tensor]
LinearDelta = Callable[[Tensor, Parameter, Parameter, np.ndarray], Tensor]


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 64
    max_positions: int = 96
    d_visual: int = 64
    n_visual_tokens: int = 32
    dtype: str = "f32"

    def validate(self, min_vocab: int = len(SPECIAL_TOKENS)) -> "ModelConfig":
        for name in ("d_model", "n_heads", "d_ff", "vocab_size", "max_positions", "d_visual", "n_visual_tokens"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_enc_layers < 0 or self.n_dec_layers < 1:
            raise ConfigError("need n_enc_layers >= 0 and n_dec_layers >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size < min_vocab:
            raise ConfigError(f"vocab_size={self.vocab_size} smaller than token inventory ({min_vocab})")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        return self

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


def bart_base_like() -> ModelConfig:
    """Shape descriptor of a BART-base sized language model with a 2048-wide visual input."""
    return ModelConfig(
        d_model=768,
        n_enc_layers=6,
        n_dec_layers=6,
        n_heads=12,
        d_ff=3072,
        vocab_size=50265,
        max_positions=1024,
        d_visual=2048,
        n_visual_tokens=50,
    )


@dataclass(frozen=True)
class InsertionPoint:
    side: str
    layer_index: int
    slot: str

    def __post_init__(self):
        if self.side not in SIDES or self.slot not in SLOTS:
            raise ConfigError(f"bad insertion point {self.side}/{self.slot}")
        if self.slot == "after_cross_attention" and self.side != "decoder":
            raise ConfigError("after_cross_attention exists only in the decoder")
        if self.layer_index < 0:
            raise ConfigError("layer_index must be >= 0")

    @property
    def name(self) -> str:
        return f"{self.side}/{self.layer_index}/{self.slot}"

    @property
    def kind(self) -> str:
        return f"{self.side}/{self.slot}"


def insertion_points(cfg: ModelConfig) -> list[InsertionPoint]:
    pts = []
    for i in range(cfg.n_enc_layers):
        pts.append(InsertionPoint("encoder", i, "after_self_attention"))
        pts.append(InsertionPoint("encoder", i, "after_feed_forward"))
    for i in range(cfg.n_dec_layers):
        for slot in SLOTS:
            pts.append(InsertionPoint("decoder", i, slot))
    return pts


@dataclass(frozen=True)
class ParamSpec:
    key: str
    shape: tuple[int, ...]
    group: str
    init: str  # "normal" | "zeros" | "ones"

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def _attention_specs(prefix: str, d: int) -> list[ParamSpec]:
    out = []
    for proj in ("q", "k", "v", "o"):
        out.append(ParamSpec(f"{prefix}/{proj}_weight", (d, d), "backbone", "normal"))
        out.append(ParamSpec(f"{prefix}/{proj}_bias", (d,), "backbone", "zeros"))
    return out


def _ln_specs(prefix: str, d: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}/gain", (d,), "layer_norm", "ones"),
        ParamSpec(f"{prefix}/bias", (d,), "layer_norm", "zeros"),
    ]


def backbone_param_specs(cfg: ModelConfig) -> list[ParamSpec]:
    """Every backbone parameter in allocation order; the tied head has no entry of its own."""
    d = cfg.d_model
    specs = [
        ParamSpec("embedding/token", (cfg.vocab_size, d), "embedding", "normal"),
        ParamSpec("embedding/encoder_position", (cfg.max_positions, d), "embedding", "normal"),
        ParamSpec("embedding/decoder_position", (cfg.max_positions, d), "embedding", "normal"),
        ParamSpec("visual_projection/weight", (cfg.d_visual, d), "visual_projection", "normal"),
        ParamSpec("visual_projection/bias", (d,), "visual_projection", "zeros"),
    ]
    specs += _ln_specs("layer_norm/encoder/embed", d)
    specs += _ln_specs("layer_norm/decoder/embed", d)
    for side, n_layers in (("encoder", cfg.n_enc_layers), ("decoder", cfg.n_dec_layers)):
        for i in range(n_layers):
            base = f"backbone/{side}/{i}"
            specs += _attention_specs(f"{base}/self_attention", d)
            specs += _ln_specs(f"layer_norm/{side}/{i}/after_self_attention", d)
            if side == "decoder":
                specs += _attention_specs(f"{base}/cross_attention", d)
                specs += _ln_specs(f"layer_norm/{side}/{i}/after_cross_attention", d)
            specs += [
                ParamSpec(f"{base}/feed_forward/fc1_weight", (d, cfg.d_ff), "backbone", "normal"),
                ParamSpec(f"{base}/feed_forward/fc1_bias", (cfg.d_ff,), "backbone", "zeros"),
                ParamSpec(f"{base}/feed_forward/fc2_weight", (cfg.d_ff, d), "backbone", "normal"),
                ParamSpec(f"{base}/feed_forward/fc2_bias", (d,), "backbone", "zeros"),
            ]
            specs += _ln_specs(f"layer_norm/{side}/{i}/after_feed_forward", d)
    return specs


# Groups that stay frozen under every PEFT regime.
FROZEN_GROUPS = ("backbone", "embedding", "output_head")


@dataclass
class EncoderDecoderModel:
    cfg: ModelConfig
    registry: ParamRegistry
    seed: int
    points: list[InsertionPoint] = field(default_factory=list)

    @property
    def token_embedding(self) -> Parameter:
        return self.registry["embedding/token"]

    @property
    def output_head(self) -> Parameter:
        # tied: the head projects with the token embedding matrix itself
        return self.registry["embedding/token"]

    def param(self, key: str) -> Parameter:
        return self.registry[key]


def build_model(cfg: ModelConfig, seed: int) -> EncoderDecoderModel:
    cfg.validate()
    rng = np.random.default_rng(seed)
    dtype = cfg.np_dtype
    reg = ParamRegistry()
    for spec in backbone_param_specs(cfg):
        if spec.init == "normal":
            data = (rng.standard_normal(spec.shape) * INIT_STD).astype(dtype)
        elif spec.init == "ones":
            data = np.ones(spec.shape, dtype=dtype)
        else:
            data = np.zeros(spec.shape, dtype=dtype)
        trainable = spec.group not in FROZEN_GROUPS
        reg.add(Parameter(spec.key, data, trainable=trainable, group=spec.group))
    return EncoderDecoderModel(cfg, reg, seed, insertion_points(cfg))


# -- inputs -------------------------------------------------------------------


@dataclass
class Batch:
    """Padded mini-batch. ``targets`` end with EOS and are PAD-padded on the right."""

    visual: np.ndarray  # [B, Nv, d_visual]
    visual_len: np.ndarray  # [B]
    tokens: np.ndarray  # [B, Ns]
    token_len: np.ndarray  # [B]
    targets: np.ndarray  # [B, M]
    tasks: np.ndarray  # [B] task indices

    def __len__(self) -> int:
        return int(self.tasks.shape[0])


def serialize_input(task, raw_text: Sequence[int], use_prompt: bool = True, tasks: Mapping | None = None) -> list[int]:
    """Prefix ``raw_text`` with the task's prompt tokens and a separator.

    ``task`` is a TaskSpec-like object (``name``, ``prefix_tokens``) or a task
    name looked up in ``tasks``.
    """
    if isinstance(task, str):
        if tasks is None or task not in tasks:
            raise TaskError(f"unknown task {task!r}")
        task = tasks[task]
    if not use_prompt:
        return list(raw_text)
    return list(task.prefix_tokens) + [SEP] + list(raw_text)


def project_visual(model: EncoderDecoderModel, features) -> Tensor:
    feats = nx.as_tensor(features)
    if feats.shape[-1] != model.cfg.d_visual:
        raise DimensionError(f"visual feature width {feats.shape[-1]} != d_visual {model.cfg.d_visual}")
    return nx.add(nx.matmul(feats, model.param("visual_projection/weight")), model.param("visual_projection/bias"))


# -- forward ------------------------------------------------------------------


def _linear(model, prefix, x, deltas, tasks) -> Tensor:
    w = model.param(f"{prefix}_weight")
    b = model.param(f"{prefix}_bias")
    if deltas is not None and prefix in deltas:
        return deltas[prefix](x, w, b, tasks)
    return nx.add(nx.matmul(x, w), b)


def _attention(model, prefix, xq, xkv, mask_add, deltas, tasks) -> Tensor:
    cfg = model.cfg
    B, Tq, d = xq.shape
    Tk = xkv.shape[1]
    H = cfg.n_heads
    dh = d // H
    q = nx.transpose(nx.reshape(_linear(model, f"{prefix}/q", xq, deltas, tasks), (B, Tq, H, dh)), (0, 2, 1, 3))
    k = nx.transpose(nx.reshape(_linear(model, f"{prefix}/k", xkv, deltas, tasks), (B, Tk, H, dh)), (0, 2, 3, 1))
    v = nx.transpose(nx.reshape(_linear(model, f"{prefix}/v", xkv, deltas, tasks), (B, Tk, H, dh)), (0, 2, 1, 3))
    scores = nx.add(nx.scale(nx.matmul(q, k), 1.0 / math.sqrt(dh)), mask_add)
    ctx = nx.matmul(nx.softmax(scores, axis=-1), v)
    ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (B, Tq, d))
    return _linear(model, f"{prefix}/o", ctx, deltas, tasks)


def _feed_forward(model, prefix, x) -> Tensor:
    h = nx.gelu(nx.add(nx.matmul(x, model.param(f"{prefix}/fc1_weight")), model.param(f"{prefix}/fc1_bias")))
    return nx.add(nx.matmul(h, model.param(f"{prefix}/fc2_weight")), model.param(f"{prefix}/fc2_bias"))


def _sublayer_out(model, point: InsertionPoint, residual, out, hooks, tasks) -> Tensor:
    if hooks is not None and point in hooks:
        out = hooks[point](out, tasks)
    ln = f"layer_norm/{point.side}/{point.layer_index}/{point.slot}"
    return nx.layer_norm(nx.add(residual, out), model.param(f"{ln}/gain"), model.param(f"{ln}/bias"))


def _mask_value(dtype) -> float:
    return -1e9 if dtype == np.float32 else -1e30


def encode(model, batch: Batch, hooks=None, soft_prompts=None, linear_deltas=None) -> tuple[Tensor, np.ndarray]:
    """Encoder states ``[B, T, d]`` and the key-validity mask ``[B, T]``."""
    cfg = model.cfg
    B = len(batch)
    dtype = cfg.np_dtype
    parts = []
    n_prompt = 0
    if soft_prompts is not None:
        sp = nx.as_tensor(soft_prompts)
        if sp.ndim == 2:
            sp = nx.take(nx.reshape(sp, (1,) + sp.shape), np.zeros(B, dtype=np.int64), axis=0)
        if sp.shape[0] != B or sp.shape[2] != cfg.d_model:
            raise DimensionError(f"soft prompts {sp.shape} do not fit batch {B} x d_model {cfg.d_model}")
        n_prompt = sp.shape[1]
        parts.append(sp)
    nv = batch.visual.shape[1]
    if nv > cfg.n_visual_tokens:
        raise SequenceError(f"{nv} visual tokens exceed n_visual_tokens={cfg.n_visual_tokens}")
    parts.append(project_visual(model, batch.visual.astype(dtype, copy=False)))
    ns = batch.tokens.shape[1]
    if ns:
        parts.append(nx.take(model.token_embedding, batch.tokens, axis=0))
    x = nx.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    T = n_prompt + nv + ns

    valid = np.zeros((B, T), dtype=bool)
    pos = np.zeros((B, T), dtype=np.int64)
    for b in range(B):
        vl, tl = int(batch.visual_len[b]), int(batch.token_len[b])
        length = n_prompt + vl + tl
        if length > cfg.max_positions:
            raise SequenceError(f"encoder input of length {length} exceeds max_positions={cfg.max_positions}")
        valid[b, :n_prompt] = True
        pos[b, :n_prompt] = np.arange(n_prompt)
        valid[b, n_prompt : n_prompt + vl] = True
        pos[b, n_prompt : n_prompt + vl] = np.arange(n_prompt, n_prompt + vl)
        valid[b, n_prompt + nv : n_prompt + nv + tl] = True
        pos[b, n_prompt + nv : n_prompt + nv + tl] = np.arange(n_prompt + vl, length)
    x = nx.add(x, nx.take(model.param("embedding/encoder_position"), pos, axis=0))
    x = nx.layer_norm(x, model.param("layer_norm/encoder/embed/gain"), model.param("layer_norm/encoder/embed/bias"))

    mask_add = np.where(valid, 0.0, _mask_value(dtype)).astype(dtype)[:, None, None, :]
    tasks = batch.tasks
    for i in range(cfg.n_enc_layers):
        base = f"backbone/encoder/{i}"
        out = _attention(model, f"{base}/self_attention", x, x, mask_add, linear_deltas, tasks)
        x = _sublayer_out(model, InsertionPoint("encoder", i, "after_self_attention"), x, out, hooks, tasks)
        out = _feed_forward(model, f"{base}/feed_forward", x)
        x = _sublayer_out(model, InsertionPoint("encoder", i, "after_feed_forward"), x, out, hooks, tasks)
    return x, valid


def decode(model, enc: Tensor, enc_valid: np.ndarray, dec_tokens: np.ndarray, tasks, hooks=None, linear_deltas=None) -> Tensor:
    """Teacher-forced decoder; returns logits ``[B, M, vocab]`` through the tied head."""
    cfg = model.cfg
    dtype = cfg.np_dtype
    B, M = dec_tokens.shape
    if M > cfg.max_positions:
        raise SequenceError(f"decoder length {M} exceeds max_positions={cfg.max_positions}")
    x = nx.take(model.token_embedding, dec_tokens, axis=0)
    x = nx.add(x, nx.narrow(model.param("embedding/decoder_position"), 0, 0, M))
    x = nx.layer_norm(x, model.param("layer_norm/decoder/embed/gain"), model.param("layer_norm/decoder/embed/bias"))
    neg = _mask_value(dtype)
    causal = np.triu(np.full((M, M), neg, dtype=dtype), k=1)[None, None]
    cross = np.where(enc_valid, 0.0, neg).astype(dtype)[:, None, None, :]
    for i in range(cfg.n_dec_layers):
        base = f"backbone/decoder/{i}"
        out = _attention(model, f"{base}/self_attention", x, x, causal, linear_deltas, tasks)
        x = _sublayer_out(model, InsertionPoint("decoder", i, "after_self_attention"), x, out, hooks, tasks)
        out = _attention(model, f"{base}/cross_attention", x, enc, cross, linear_deltas, tasks)
        x = _sublayer_out(model, InsertionPoint("decoder", i, "after_cross_attention"), x, out, hooks, tasks)
        out = _feed_forward(model, f"{base}/feed_forward", x)
        x = _sublayer_out(model, InsertionPoint("decoder", i, "after_feed_forward"), x, out, hooks, tasks)
    return nx.matmul(x, nx.transpose(model.output_head, (1, 0)))


def decoder_inputs(targets: np.ndarray) -> np.ndarray:
    """Shift right: ``[BOS, y_1, ..., y_{M-1}]``."""
    dec = np.empty_like(targets)
    dec[:, 0] = BOS
    dec[:, 1:] = targets[:, :-1]
    return dec


def forward(model, batch: Batch, hooks=None, soft_prompts=None, linear_deltas=None) -> Tensor:
    enc, valid = encode(model, batch, hooks, soft_prompts, linear_deltas)
    return decode(model, enc, valid, decoder_inputs(batch.targets), batch.tasks, hooks, linear_deltas)


def sequence_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token cross entropy over every non-PAD target position in the batch."""
    B, M, V = logits.shape
    return nx.softmax_cross_entropy(nx.reshape(logits, (B * M, V)), targets.reshape(-1), ignore_index=PAD)


def generate_greedy(model, batch: Batch, max_len: int, hooks=None, soft_prompts=None, linear_deltas=None) -> list[list[int]]:
    """Greedy argmax decoding; each output stops before its first EOS."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    enc, valid = encode(model, batch, hooks, soft_prompts, linear_deltas)
    B = len(batch)
    dec = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        logits = decode(model, enc, valid, dec, batch.tasks, hooks, linear_deltas)
        nxt = logits.data[:, -1, :].argmax(axis=-1)
        nxt = np.where(done, PAD, nxt)
        dec = np.concatenate([dec, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    out = []
    for row in dec[:, 1:]:
        seq = []
        for t in row:
            if t == EOS or t == PAD:
                break
            seq.append(int(t))
        out.append(seq)
    return out


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, registry: ParamRegistry, config: dict) -> None:
    """Write an ``.npz`` whose ``__header__`` entry is a JSON description of every array.

    Header layout::

        {"format": "peft-forge-checkpoint", "version": 1, "config": {...},
         "params": {key: {"dtype": "float32", "shape": [..], "group": .., "trainable": ..}}}
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "params": {
            p.key: {"dtype": str(p.data.dtype), "shape": list(p.shape), "group": p.group, "trainable": p.trainable}
            for p in registry
        },
    }
    arrays = {f"p{i}": p.data for i, p in enumerate(registry)}
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    arrays["__keys__"] = np.array([p.key for p in registry])
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        keys = [str(k) for k in z["__keys__"]]
        arrays = {k: z[f"p{i}"] for i, k in enumerate(keys)}
    for k, meta in header["params"].items():
        a = arrays[k]
        if list(a.shape) != meta["shape"] or str(a.dtype) != meta["dtype"]:
            raise ValueError(f"{path}: array {k} does not match its header")
    return header, arrays


def restore(registry: ParamRegistry, arrays: Mapping[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into an identically-shaped registry."""
    if set(arrays) != set(registry.keys()):
        missing = sorted(set(registry.keys()) - set(arrays))
        extra = sorted(set(arrays) - set(registry.keys()))
        raise ValueError(f"checkpoint/registry key mismatch: missing={missing[:3]} extra={extra[:3]}")
    for p in registry:
        a = arrays[p.key]
        if a.shape != p.shape or a.dtype != p.data.dtype:
            raise ValueError(f"checkpoint entry {p.key}: {a.shape}/{a.dtype} vs {p.shape}/{p.data.dtype}")
        p.data = a.copy()
