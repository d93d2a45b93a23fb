"""The PEFT module zoo: Adapter, Hyperformer, Compacter (PHM/LPHM), LoRA, prompt network.

Modules are plain holders of registry parameters; the ``*_forward`` functions are
pure given those parameters.  :func:`attach_peft` instantiates a regime on a
model and returns a :class:`PeftInstance` exposing the hooks, LoRA deltas and
soft prompts that :func:`peft_forge.backbone.forward` consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .backbone import INIT_STD, EncoderDecoderModel, InsertionPoint, ModelConfig, insertion_points
from .config import (
    AdapterConfig,
    CompacterConfig,
    FrozenConfig,
    FullFineTuneConfig,
    HyperformerConfig,
    LoRAConfig,
    PromptConfig,
    check_sharing,
)
from .errors import ConfigError, DimensionError
from .numerics import Parameter, Tensor
from .seeding import rng_for
from .sharing import resolve_key

PROMPT_EMBED_STD = 0.5


# -- Adapter ------------------------------------------------------------------


@dataclass(eq=False)
class AdapterModule:
    down: Parameter  # [d_i, d]
    down_bias: Parameter  # [d]
    up: Parameter  # [d, d_i]
    up_bias: Parameter  # [d_i]

    @property
    def param_count(self) -> int:
        return self.down.size + self.down_bias.size + self.up.size + self.up_bias.size


def adapter_param_count(d_i: int, d: int) -> int:
    return d_i * d + d + d * d_i + d_i


def _bottleneck(x, down, down_bias, up, up_bias, act=nx.gelu) -> Tensor:
    h = act(nx.add(nx.matmul(x, down), down_bias))
    return nx.add(nx.add(nx.matmul(h, up), up_bias), x)


def adapter_forward(m: AdapterModule, x) -> Tensor:
    """``up(gelu(down(x))) + x``."""
    x = nx.as_tensor(x)
    if x.shape[-1] != m.down.shape[0]:
        raise DimensionError(f"adapter expects last dim {m.down.shape[0]}, got {x.shape[-1]}")
    return _bottleneck(x, m.down, m.down_bias, m.up, m.up_bias)


# -- Compacter ------------------------------------------------------------------


@dataclass(eq=False)
class PHMWeight:
    """``sum_i A_i (x) B_i`` with ``B_i`` dense or ``u_i v_i``."""

    A: list[Parameter]
    B: list[Parameter] | None
    u: list[Parameter] | None
    v: list[Parameter] | None
    rows: int
    cols: int

    @property
    def k(self) -> int:
        return len(self.A)

    def factor(self, i: int):
        if self.B is not None:
            return self.B[i]
        return nx.matmul(self.u[i], self.v[i])


@dataclass(eq=False)
class CompacterModule:
    down: PHMWeight
    down_bias: Parameter
    up: PHMWeight
    up_bias: Parameter


def phm_weight_count(rows: int, cols: int, k: int, low_rank: bool, rank: int, count_A: bool = True) -> int:
    a = k * k * k if count_A else 0
    if low_rank:
        return a + rank * (rows + cols)
    return a + rows * cols // k


def _check_phm_dims(d_i: int, d: int, k: int) -> None:
    if d_i % k or d % k:
        raise ConfigError(f"k={k} must divide both d_i={d_i} and d={d}")


def phm_materialize(c: CompacterModule, which: str) -> Tensor:
    """Dense ``theta^D`` (``which="down"``) or ``theta^U`` as a sum of Kronecker products."""
    if which not in ("down", "up"):
        raise ValueError("which must be 'down' or 'up'")
    w: PHMWeight = getattr(c, which)
    _check_phm_dims(w.rows, w.cols, w.k)
    total = None
    for i in range(w.k):
        term = nx.kron(w.A[i], w.factor(i))
        total = term if total is None else nx.add(total, term)
    return total


def phm_matmul(x, w: PHMWeight) -> Tensor:
    """``x @ sum_i kron(A_i, B_i)`` without forming the dense matrix."""
    x = nx.as_tensor(x)
    k = w.k
    m, n = w.rows // k, w.cols // k
    if x.shape[-1] != w.rows:
        raise DimensionError(f"PHM layer expects last dim {w.rows}, got {x.shape[-1]}")
    lead = x.shape[:-1]
    N = math.prod(lead)
    # xt[N, s, i] = x[N, i*m + s]
    xt = nx.transpose(nx.reshape(x, (N, k, m)), (0, 2, 1))
    total = None
    for i in range(k):
        mixed = nx.transpose(nx.matmul(xt, w.A[i]), (0, 2, 1))  # [N, k, m]
        if w.B is not None:
            term = nx.matmul(mixed, w.B[i])
        else:
            term = nx.matmul(nx.matmul(mixed, w.u[i]), w.v[i])
        total = term if total is None else nx.add(total, term)
    return nx.reshape(total, lead + (k * n,))


def compacter_forward(c: CompacterModule, x) -> Tensor:
    """Adapter semantics with PHM-parameterized down/up weights, in factored form."""
    x = nx.as_tensor(x)
    h = nx.gelu(nx.add(phm_matmul(x, c.down), c.down_bias))
    return nx.add(nx.add(phm_matmul(h, c.up), c.up_bias), x)


# -- LoRA ---------------------------------------------------------------------------


@dataclass(eq=False)
class LoRADelta:
    A: Parameter  # [d_in, d_lora]
    B: Parameter  # [d_lora, d_out]
    bias: Parameter | None = None  # trainable bias offset [d_out]


def lora_apply(delta: LoRADelta, host_weight, x, host_bias=None) -> Tensor:
    """``x (theta + A B) + bias``, computed without merging so ``theta`` stays frozen."""
    x = nx.as_tensor(x)
    w = nx.as_tensor(host_weight)
    if x.shape[-1] != w.shape[0] or delta.A.shape[0] != w.shape[0] or delta.B.shape[1] != w.shape[1]:
        raise DimensionError(f"LoRA shapes do not conform: x {x.shape}, host {w.shape}, A {delta.A.shape}, B {delta.B.shape}")
    out = nx.add(nx.matmul(x, w), nx.matmul(nx.matmul(x, delta.A), delta.B))
    if host_bias is not None:
        out = nx.add(out, host_bias)
    if delta.bias is not None:
        out = nx.add(out, delta.bias)
    return out


def lora_merge(delta: LoRADelta, host_weight: Parameter, host_bias: Parameter | None = None):
    """Merged ``(theta + A B, bias + delta_bias)`` arrays for overhead-free inference."""
    w = host_weight.data + delta.A.data @ delta.B.data
    b = None if host_bias is None else host_bias.data.copy()
    if delta.bias is not None:
        b = delta.bias.data.copy() if b is None else b + delta.bias.data
    return w, b


# -- prompt network ---------------------------------------------------------------


@dataclass(eq=False)
class PromptNetwork:
    embed: Parameter  # [N_p, d_i]
    down: Parameter  # [d_i, d_m]
    down_bias: Parameter  # [d_m]
    up: Parameter  # [d_m, d_i]
    up_bias: Parameter  # [d_i]


def prompt_param_count(n_prompts: int, d_i: int, d_m: int) -> int:
    return n_prompts * d_i + d_i * d_m + d_m + d_m * d_i + d_i


def prompt_forward(p: PromptNetwork) -> Tensor:
    """Embed prompt indices 1..N_p and map them through the two-layer tanh network."""
    h = nx.tanh_act(nx.add(nx.matmul(p.embed, p.down), p.down_bias))
    return nx.add(nx.matmul(h, p.up), p.up_bias)


# -- Hyperformer ------------------------------------------------------------------


def hypernet_out_width(d_i: int, d: int) -> int:
    return 2 * d * d_i + d + d_i


def point_kinds(points: Sequence[InsertionPoint]) -> list[str]:
    seen: list[str] = []
    for p in points:
        if p.kind not in seen:
            seen.append(p.kind)
    return seen


@dataclass(eq=False)
class HyperformerGenerator:
    task_embeddings: list[Parameter]
    layer_embeddings: list[Parameter]
    proj_w1: Parameter  # [2 d_e, hidden]
    proj_b1: Parameter
    proj_w2: Parameter  # [hidden, d_p]
    proj_b2: Parameter
    hypernets: dict[str, tuple[Parameter, Parameter]]  # kind -> (weight [d_p, out], bias [out])
    points: list[InsertionPoint]
    d_i: int
    d: int
    scope: str = "per_kind"

    def hypernet(self, point_index: int) -> tuple[Parameter, Parameter]:
        kind = self.points[point_index].kind if self.scope == "per_kind" else "all"
        return self.hypernets[kind]

    def terms(self) -> "HyperformerTerms":
        return HyperformerTerms(
            n_tasks=len(self.task_embeddings),
            n_points=len(self.layer_embeddings),
            task_embedding=self.task_embeddings[0].size,
            layer_embedding=self.layer_embeddings[0].size,
            projector=sum(p.size for p in (self.proj_w1, self.proj_b1, self.proj_w2, self.proj_b2)),
            hypernet=sum(w.size + b.size for w, b in self.hypernets.values()),
            hypernet_dominant=sum(w.size for w, _ in self.hypernets.values()),
            n_hypernets=len(self.hypernets),
            adapter_per_point=adapter_param_count(self.d_i, self.d),
        )


def hyperformer_generate(g: HyperformerGenerator, task_index: int, point_index: int):
    """Generate ``(theta^D, down_bias, theta^U, up_bias)`` for task ``j`` at point ``i``."""
    if not 0 <= task_index < len(g.task_embeddings):
        raise IndexError(f"task index {task_index} out of range")
    if not 0 <= point_index < len(g.layer_embeddings):
        raise IndexError(f"point index {point_index} out of range")
    e = nx.concat([g.task_embeddings[task_index], g.layer_embeddings[point_index]], axis=0)
    e = nx.reshape(e, (1, e.shape[0]))
    h = nx.tanh_act(nx.add(nx.matmul(e, g.proj_w1), g.proj_b1))
    z = nx.add(nx.matmul(h, g.proj_w2), g.proj_b2)
    w, b = g.hypernet(point_index)
    flat = nx.reshape(nx.add(nx.matmul(z, w), b), (w.shape[1],))
    d_i, d = g.d_i, g.d
    o1 = d_i * d
    o2 = o1 + d
    o3 = o2 + d * d_i
    down = nx.reshape(nx.narrow(flat, 0, 0, o1), (d_i, d))
    down_bias = nx.narrow(flat, 0, o1, o2)
    up = nx.reshape(nx.narrow(flat, 0, o2, o3), (d, d_i))
    up_bias = nx.narrow(flat, 0, o3, o3 + d_i)
    return down, down_bias, up, up_bias


@dataclass(frozen=True)
class HyperformerTerms:
    n_tasks: int
    n_points: int
    task_embedding: int
    layer_embedding: int
    projector: int
    hypernet: int
    hypernet_dominant: int
    n_hypernets: int
    adapter_per_point: int

    @property
    def generator_total(self) -> int:
        return self.hypernet + self.projector + self.n_tasks * self.task_embedding + self.n_points * self.layer_embedding


def hyperformer_terms(cfg: HyperformerConfig, d_i: int, n_tasks: int, points: Sequence[InsertionPoint]) -> HyperformerTerms:
    out = hypernet_out_width(d_i, cfg.d)
    n_hyper = len(point_kinds(points)) if cfg.hypernet_scope == "per_kind" else 1
    hidden = cfg.projector_hidden
    return HyperformerTerms(
        n_tasks=n_tasks,
        n_points=len(points),
        task_embedding=cfg.d_e,
        layer_embedding=cfg.d_e,
        projector=2 * cfg.d_e * hidden + hidden + hidden * cfg.d_p + cfg.d_p,
        hypernet=n_hyper * (cfg.d_p * out + out),
        hypernet_dominant=n_hyper * cfg.d_p * out,
        n_hypernets=n_hyper,
        adapter_per_point=adapter_param_count(d_i, cfg.d),
    )


@dataclass(frozen=True)
class BudgetReport:
    generator_total: int
    adapter_total: int
    holds: bool
    dominant_generator: int
    dominant_equal: bool
    d_p_bound: float

    def __str__(self) -> str:
        rel = "<" if self.holds else ">="
        return (
            f"generator {self.generator_total} {rel} independent adapters {self.adapter_total}; "
            f"implied d_p < {self.d_p_bound:g}"
        )


def check_hyperformer_budget(g, adapter_reference_count: int | None = None) -> tuple[bool, BudgetReport]:
    """Is the generator smaller than ``N_T * N_L`` independent adapters?

    ``g`` is a :class:`HyperformerGenerator` or precomputed :class:`HyperformerTerms`.
    Integer arithmetic throughout.
    """
    terms = g.terms() if isinstance(g, HyperformerGenerator) else g
    ref = adapter_reference_count
    if ref is None:
        ref = terms.n_tasks * terms.n_points * terms.adapter_per_point
    total = terms.generator_total
    holds = total < ref
    return holds, BudgetReport(
        generator_total=total,
        adapter_total=ref,
        holds=holds,
        dominant_generator=terms.hypernet_dominant,
        dominant_equal=terms.hypernet_dominant == ref,
        d_p_bound=terms.n_tasks * terms.n_points / terms.n_hypernets,
    )


# -- closed-form counts -------------------------------------------------------------


def _sets(mode: str, n_tasks: int) -> tuple[int, int]:
    """(down-side sets, up-side sets) of parameters for a sharing mode."""
    return {
        "multiple": (n_tasks, n_tasks),
        "single": (1, 1),
        "half_shared_up": (n_tasks, 1),
        "half_shared_down": (1, n_tasks),
    }[mode]


def n_attention_sublayers(model_cfg: ModelConfig) -> int:
    return model_cfg.n_enc_layers + 2 * model_cfg.n_dec_layers


def count_params(peft_cfg, model_cfg: ModelConfig, n_tasks: int) -> dict[str, int]:
    """Closed-form PEFT parameter counts. ``total`` is what the regime adds to the model."""
    check_sharing(peft_cfg)
    d_i = model_cfg.d_model
    points = insertion_points(model_cfg)
    n_l = len(points)
    if isinstance(peft_cfg, (FullFineTuneConfig, FrozenConfig)):
        return {"total": 0}
    if isinstance(peft_cfg, AdapterConfig):
        d = peft_cfg.d
        down, up = d_i * d + d, d * d_i + d_i
        n_down, n_up = _sets(peft_cfg.sharing, n_tasks)
        return {"total": n_l * (n_down * down + n_up * up), "per_module": down + up}
    if isinstance(peft_cfg, CompacterConfig):
        d, k = peft_cfg.d, peft_cfg.k
        _check_phm_dims(d_i, d, k)
        lr, r = peft_cfg.low_rank, peft_cfg.rank
        share = peft_cfg.share_A
        down = phm_weight_count(d_i, d, k, lr, r, count_A=not share) + d
        up = phm_weight_count(d, d_i, k, lr, r, count_A=not share) + d_i
        n_down, n_up = _sets(peft_cfg.sharing, n_tasks)
        total = n_l * (n_down * down + n_up * up)
        if share:
            total += (n_down + n_up) * k * k * k
        return {
            "total": total,
            "per_weight_down": phm_weight_count(d_i, d, k, lr, r),
            "per_weight_up": phm_weight_count(d, d_i, k, lr, r),
        }
    if isinstance(peft_cfg, HyperformerConfig):
        t = hyperformer_terms(peft_cfg, d_i, n_tasks, points)
        return {"total": t.generator_total, "hypernet": t.hypernet, "projector": t.projector}
    if isinstance(peft_cfg, LoRAConfig):
        r = peft_cfg.d_lora
        per_target = d_i * r + r * d_i + (d_i if peft_cfg.bias_trainable else 0)
        n_targets = len(peft_cfg.targets) * n_attention_sublayers(model_cfg)
        sets = n_tasks if peft_cfg.sharing == "multiple" else 1
        return {"total": sets * n_targets * per_target, "per_target": per_target}
    if isinstance(peft_cfg, PromptConfig):
        per = prompt_param_count(peft_cfg.n_prompts, d_i, peft_cfg.d_m)
        sets = n_tasks if peft_cfg.sharing == "multiple" else 1
        return {"total": sets * per, "per_network": per}
    raise ConfigError(f"unsupported PEFT config {peft_cfg!r}")


# -- wiring into a model ----------------------------------------------------------


def _route(x: Tensor, tasks: np.ndarray, module_for_task: Callable[[int], object], apply: Callable) -> Tensor:
    """Apply each row's module; rows whose tasks resolve to the same module run together."""
    tasks = np.asarray(tasks)
    groups: dict[int, tuple[object, list[int]]] = {}
    for row, t in enumerate(tasks.tolist()):
        mod = module_for_task(t)
        groups.setdefault(id(mod), (mod, []))[1].append(row)
    if len(groups) == 1:
        (mod, _), = groups.values()
        return apply(mod, x)
    parts, order = [], []
    for mod, rows in groups.values():
        parts.append(apply(mod, nx.take(x, rows, axis=0)))
        order.extend(rows)
    inverse = np.argsort(np.asarray(order))
    return nx.take(nx.concat(parts, axis=0), inverse, axis=0)


class PeftInstance:
    """A PEFT regime attached to a model: parameters live in ``model.registry``."""

    def __init__(self, cfg, model: EncoderDecoderModel, task_names: Sequence[str], seed: int = 0):
        check_sharing(cfg)
        self.cfg = cfg
        self.model = model
        self.task_names = list(task_names)
        if not self.task_names:
            raise ConfigError("at least one task is required")
        self._rng = rng_for(seed, "peft")
        self._dtype = model.cfg.np_dtype
        self.keys: list[str] = []
        self.points = list(model.points)
        self.adapters: dict[InsertionPoint, list[object]] = {}
        self.lora: dict[str, list[LoRADelta]] = {}
        self.prompts: list[PromptNetwork] = []
        self.generator: HyperformerGenerator | None = None
        if isinstance(cfg, AdapterConfig):
            self._build_adapters()
        elif isinstance(cfg, CompacterConfig):
            self._build_compacters()
        elif isinstance(cfg, HyperformerConfig):
            self._build_hyperformer()
        elif isinstance(cfg, LoRAConfig):
            self._build_lora()
        elif isinstance(cfg, PromptConfig):
            self._build_prompts()
        elif not isinstance(cfg, (FullFineTuneConfig, FrozenConfig)):
            raise ConfigError(f"unsupported PEFT config {cfg!r}")

    # parameter creation

    def _param(self, key: str, shape, init: str, std: float = INIT_STD) -> Parameter:
        def factory(k):
            if init == "normal":
                data = (self._rng.standard_normal(shape) * std).astype(self._dtype)
            else:
                data = np.zeros(shape, dtype=self._dtype)
            self.keys.append(k)
            return Parameter(k, data, trainable=True, group="peft")

        return self.model.registry.resolve(key, factory)

    def _cached(self, cache: dict, parts: tuple, build: Callable[[], object]):
        ident = tuple(id(p) for p in parts)
        if ident not in cache:
            cache[ident] = build()
        return cache[ident]

    def _build_adapters(self):
        cfg, d_i, d = self.cfg, self.model.cfg.d_model, self.cfg.d
        cache: dict = {}
        for pt in self.points:
            mods = []
            for task in self.task_names:
                key = lambda role: resolve_key(cfg.sharing, task, pt, role)  # noqa: E731
                down = self._param(key("down"), (d_i, d), "normal")
                down_bias = self._param(key("bias_down"), (d,), "zeros")
                up = self._param(key("up"), (d, d_i), "zeros")
                up_bias = self._param(key("bias_up"), (d_i,), "zeros")
                parts = (down, down_bias, up, up_bias)
                mods.append(self._cached(cache, parts, lambda: AdapterModule(*parts)))
            self.adapters[pt] = mods

    def _phm(self, mode, task, pt, which: str, rows: int, cols: int) -> PHMWeight:
        cfg = self.cfg
        k, r = cfg.k, cfg.rank
        m, n = rows // k, cols // k
        role = "down" if which == "down" else "up"
        a_std = 1.0 / math.sqrt(k)
        a_init = "normal" if which == "down" else "zeros"
        A = []
        for i in range(k):
            if cfg.share_A:
                key = resolve_key(mode, task, None, "factor", f"{which}.A{i}")
            else:
                key = resolve_key(mode, task, pt, role, f"A{i}")
            A.append(self._param(key, (k, k), a_init, a_std))
        if cfg.low_rank:
            s = math.sqrt(INIT_STD / math.sqrt(r))
            u = [self._param(resolve_key(mode, task, pt, role, f"u{i}"), (m, r), "normal", s) for i in range(k)]
            v = [self._param(resolve_key(mode, task, pt, role, f"v{i}"), (r, n), "normal", s) for i in range(k)]
            return PHMWeight(A, None, u, v, rows, cols)
        B = [self._param(resolve_key(mode, task, pt, role, f"B{i}"), (m, n), "normal") for i in range(k)]
        return PHMWeight(A, B, None, None, rows, cols)

    def _build_compacters(self):
        cfg, d_i, d = self.cfg, self.model.cfg.d_model, self.cfg.d
        _check_phm_dims(d_i, d, cfg.k)
        cache: dict = {}
        for pt in self.points:
            mods = []
            for task in self.task_names:
                down = self._phm(cfg.sharing, task, pt, "down", d_i, d)
                down_bias = self._param(resolve_key(cfg.sharing, task, pt, "bias_down"), (d,), "zeros")
                up = self._phm(cfg.sharing, task, pt, "up", d, d_i)
                up_bias = self._param(resolve_key(cfg.sharing, task, pt, "bias_up"), (d_i,), "zeros")
                parts = tuple(down.A) + tuple(down.B or down.u + down.v) + (down_bias,)
                parts += tuple(up.A) + tuple(up.B or up.u + up.v) + (up_bias,)
                mods.append(self._cached(cache, parts, lambda: CompacterModule(down, down_bias, up, up_bias)))
            self.adapters[pt] = mods

    def _build_hyperformer(self):
        cfg, d_i = self.cfg, self.model.cfg.d_model
        d_e, d_p, hidden = cfg.d_e, cfg.d_p, cfg.projector_hidden
        out = hypernet_out_width(d_i, cfg.d)
        tasks = [self._param(f"peft/hyperformer/task_embedding/{t}", (d_e,), "normal", 1.0) for t in self.task_names]
        layers = [self._param(f"peft/hyperformer/layer_embedding/{p.name}", (d_e,), "normal", 1.0) for p in self.points]
        w1 = self._param("peft/hyperformer/projector/w1", (2 * d_e, hidden), "normal", 1.0 / math.sqrt(2 * d_e))
        b1 = self._param("peft/hyperformer/projector/b1", (hidden,), "zeros")
        w2 = self._param("peft/hyperformer/projector/w2", (hidden, d_p), "normal", 1.0 / math.sqrt(hidden))
        b2 = self._param("peft/hyperformer/projector/b2", (d_p,), "zeros")
        kinds = point_kinds(self.points) if cfg.hypernet_scope == "per_kind" else ["all"]
        down_width = d_i * cfg.d + cfg.d
        hypernets = {}
        for kind in kinds:
            w = self._param(f"peft/hyperformer/hypernet/{kind}/weight", (d_p, out), "zeros")
            b = self._param(f"peft/hyperformer/hypernet/{kind}/bias", (out,), "zeros")
            # Only the down-projection slice is random; the up slice stays zero so that
            # generated adapters start as the identity map.
            w.data[:, : d_i * cfg.d] = self._rng.standard_normal((d_p, d_i * cfg.d)) * (INIT_STD / math.sqrt(d_p))
            assert down_width <= out
            hypernets[kind] = (w, b)
        self.generator = HyperformerGenerator(tasks, layers, w1, b1, w2, b2, hypernets, self.points, d_i, cfg.d, cfg.hypernet_scope)

    def _build_lora(self):
        cfg, d = self.cfg, self.model.cfg.d_model
        mcfg = self.model.cfg
        cache: dict = {}
        hosts = []
        for side, n_layers in (("encoder", mcfg.n_enc_layers), ("decoder", mcfg.n_dec_layers)):
            for i in range(n_layers):
                kinds = ("self_attention", "cross_attention") if side == "decoder" else ("self_attention",)
                for kind in kinds:
                    hosts.append((InsertionPoint(side, i, f"after_{kind}"), f"backbone/{side}/{i}/{kind}"))
        for pt, prefix in hosts:
            for proj in cfg.targets:
                deltas = []
                for task in self.task_names:
                    a = self._param(resolve_key(cfg.sharing, task, pt, "lora_a", proj), (d, cfg.d_lora), "normal")
                    b = self._param(resolve_key(cfg.sharing, task, pt, "lora_b", proj), (cfg.d_lora, d), "zeros")
                    bias = None
                    if cfg.bias_trainable:
                        bias = self._param(resolve_key(cfg.sharing, task, pt, "lora_bias", proj), (d,), "zeros")
                    parts = (a, b) if bias is None else (a, b, bias)
                    deltas.append(self._cached(cache, parts, lambda: LoRADelta(a, b, bias)))
                self.lora[f"{prefix}/{proj}"] = deltas

    def _build_prompts(self):
        cfg, d_i = self.cfg, self.model.cfg.d_model
        cache: dict = {}
        for task in self.task_names:
            key = lambda part: resolve_key(cfg.sharing, task, None, "prompt", part)  # noqa: E731
            parts = (
                self._param(key("embed"), (cfg.n_prompts, d_i), "normal", PROMPT_EMBED_STD),
                self._param(key("down"), (d_i, cfg.d_m), "normal"),
                self._param(key("down_bias"), (cfg.d_m,), "zeros"),
                self._param(key("up"), (cfg.d_m, d_i), "normal"),
                self._param(key("up_bias"), (d_i,), "zeros"),
            )
            self.prompts.append(self._cached(cache, parts, lambda: PromptNetwork(*parts)))

    # runtime surfaces

    def parameters(self) -> list[Parameter]:
        return [self.model.registry[k] for k in self.keys]

    def hooks(self) -> dict | None:
        if self.generator is not None:
            return {pt: self._hyper_hook(i) for i, pt in enumerate(self.points)}
        if not self.adapters:
            return None
        fwd = compacter_forward if isinstance(self.cfg, CompacterConfig) else adapter_forward
        out = {}
        for pt, mods in self.adapters.items():
            out[pt] = (lambda mods: lambda x, tasks: _route(x, tasks, lambda t: mods[t], fwd))(mods)
        return out

    def _hyper_hook(self, point_index: int):
        g = self.generator

        def hook(x, tasks):
            generated: dict[int, tuple] = {}

            def module_for(t):
                if t not in generated:
                    generated[t] = hyperformer_generate(g, t, point_index)
                return generated[t]

            return _route(x, tasks, module_for, lambda w, xs: _bottleneck(xs, *w))

        return hook

    def linear_deltas(self) -> dict | None:
        if not self.lora:
            return None
        out = {}
        for prefix, deltas in self.lora.items():
            def fn(x, w, b, tasks, deltas=deltas):
                return _route(x, tasks, lambda t: deltas[t], lambda dl, xs: lora_apply(dl, w, xs, b))

            out[prefix] = fn
        return out

    def soft_prompts(self, tasks: np.ndarray) -> Tensor | None:
        if not self.prompts:
            return None
        tasks = np.asarray(tasks)
        unique: list[PromptNetwork] = []
        slot = []
        for t in tasks.tolist():
            net = self.prompts[t]
            for j, u in enumerate(unique):
                if u is net:
                    slot.append(j)
                    break
            else:
                unique.append(net)
                slot.append(len(unique) - 1)
        stacked = nx.concat([nx.reshape(prompt_forward(n), (1,) + n.embed.shape) for n in unique], axis=0)
        return nx.take(stacked, np.asarray(slot), axis=0)


def attach_peft(model: EncoderDecoderModel, cfg, task_names: Sequence[str], seed: int = 0) -> PeftInstance:
    """Instantiate a PEFT regime; its parameters are added to ``model.registry`` (group ``peft``)."""
    return PeftInstance(cfg, model, task_names, seed)
