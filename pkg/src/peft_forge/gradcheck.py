"""Finite-difference gradient checks for every numerics op and every PEFT regime.

All checks run at f64.  :func:`inject_sign_flip` is a fault-injection helper:
inside it, the named op records a negated derivative.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import numerics as nx
from . import peft as pf
from .backbone import Batch, ModelConfig, build_model, forward, sequence_loss
from .config import AdapterConfig, CompacterConfig, HyperformerConfig, LoRAConfig, PromptConfig
from .numerics import GradTape, Parameter, finite_diff_grad, relative_error

OP_TOL = 1e-5
LAYER_NORM_TOL = 1e-4
PHM_AGREEMENT_TOL = 1e-8
N_SHAPES = 20


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < self.tol

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} err={self.error:.3e} tol={self.tol:.0e}"


def _p(rng, shape, name="p") -> Parameter:
    return Parameter(name, rng.standard_normal(shape), trainable=True, group="peft")


def _weights(rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _loss(out, w: np.ndarray):
    """Random linear functional of ``out`` so every output entry matters."""
    return nx.sum_all(nx.mul(out, w))


def _shape(rng, ndim: int, lo: int = 1, hi: int = 5) -> tuple[int, ...]:
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _grad_error(build: Callable[[], tuple[list[Parameter], Callable[[], object]]]) -> float:
    params, f = build()
    with GradTape() as tape:
        loss = f()
    grads = tape.gradient(loss, params)
    worst = 0.0
    for p in params:
        fd = finite_diff_grad(lambda _: f(), p)
        worst = max(worst, relative_error(grads[p], fd))
    return worst


# -- per-op cases: each returns (params, closure computing a scalar) ---------------


def _case_add(rng):
    shape = _shape(rng, int(rng.integers(1, 4)))
    bshape = shape[-1:] if rng.integers(2) else shape
    a, b = _p(rng, shape, "a"), _p(rng, bshape, "b")
    w = _weights(rng, shape)
    return [a, b], lambda: _loss(nx.add(a, b), w)


def _case_sub(rng):
    shape = _shape(rng, int(rng.integers(1, 4)))
    a, b = _p(rng, shape, "a"), _p(rng, shape, "b")
    w = _weights(rng, shape)
    return [a, b], lambda: _loss(nx.sub(a, b), w)


def _case_mul(rng):
    shape = _shape(rng, int(rng.integers(1, 4)))
    a, b = _p(rng, shape, "a"), _p(rng, (1,) + shape[1:], "b")
    w = _weights(rng, shape)
    return [a, b], lambda: _loss(nx.mul(a, b), w)


def _case_scale(rng):
    shape = _shape(rng, 2)
    a = _p(rng, shape)
    c = float(rng.standard_normal())
    w = _weights(rng, shape)
    return [a], lambda: _loss(nx.scale(a, c), w)


def _case_matmul(rng):
    n, k, m = _shape(rng, 3)
    lead = _shape(rng, int(rng.integers(0, 3)), 1, 3)
    a = _p(rng, lead + (n, k), "a")
    b = _p(rng, (k, m) if rng.integers(2) else lead + (k, m), "b")
    w = _weights(rng, lead + (n, m))
    return [a, b], lambda: _loss(nx.matmul(a, b), w)


def _case_kron(rng):
    a, b = _p(rng, _shape(rng, 2, 1, 3), "a"), _p(rng, _shape(rng, 2, 1, 3), "b")
    w = _weights(rng, (a.shape[0] * b.shape[0], a.shape[1] * b.shape[1]))
    return [a, b], lambda: _loss(nx.kron(a, b), w)


def _case_gelu(rng):
    shape = _shape(rng, 2)
    a = _p(rng, shape)
    w = _weights(rng, shape)
    return [a], lambda: _loss(nx.gelu(a), w)


def _case_tanh(rng):
    shape = _shape(rng, 2)
    a = _p(rng, shape)
    w = _weights(rng, shape)
    return [a], lambda: _loss(nx.tanh_act(a), w)


def _case_softmax(rng):
    shape = _shape(rng, int(rng.integers(1, 4)))
    a = _p(rng, shape)
    w = _weights(rng, shape)
    axis = int(rng.integers(len(shape)))
    return [a], lambda: _loss(nx.softmax(a, axis=axis), w)


def _case_layer_norm(rng):
    shape = _shape(rng, int(rng.integers(1, 4)), 2, 5)
    d = shape[-1]
    x, g, b = _p(rng, shape, "x"), _p(rng, (d,), "gain"), _p(rng, (d,), "bias")
    w = _weights(rng, shape)
    return [x, g, b], lambda: _loss(nx.layer_norm(x, g, b), w)


def _case_softmax_cross_entropy(rng):
    n, v = _shape(rng, 2, 1, 6)
    v = max(v, 2)
    logits = _p(rng, (n, v))
    targets = rng.integers(0, v, size=n)
    targets[rng.random(n) < 0.3] = -100
    return [logits], lambda: nx.softmax_cross_entropy(logits, targets, ignore_index=-100)


def _case_reshape(rng):
    a, b = _shape(rng, 2)
    x = _p(rng, (a, b))
    w = _weights(rng, (b, a))
    return [x], lambda: _loss(nx.reshape(x, (b, a)), w)


def _case_transpose(rng):
    shape = _shape(rng, 3)
    axes = tuple(int(i) for i in rng.permutation(3))
    x = _p(rng, shape)
    w = _weights(rng, tuple(shape[i] for i in axes))
    return [x], lambda: _loss(nx.transpose(x, axes), w)


def _case_concat(rng):
    shape = _shape(rng, 2)
    axis = int(rng.integers(2))
    other = list(shape)
    other[axis] = int(rng.integers(1, 4))
    a, b = _p(rng, shape, "a"), _p(rng, tuple(other), "b")
    out_shape = list(shape)
    out_shape[axis] += other[axis]
    w = _weights(rng, tuple(out_shape))
    return [a, b], lambda: _loss(nx.concat([a, b], axis=axis), w)


def _case_narrow(rng):
    shape = _shape(rng, 2, 2, 6)
    axis = int(rng.integers(2))
    start = int(rng.integers(0, shape[axis]))
    stop = int(rng.integers(start, shape[axis] + 1))
    x = _p(rng, shape)
    out_shape = list(shape)
    out_shape[axis] = stop - start
    w = _weights(rng, tuple(out_shape))
    return [x], lambda: _loss(nx.narrow(x, axis, start, stop), w)


def _case_take(rng):
    shape = _shape(rng, 2)
    axis = int(rng.integers(2))
    idx = rng.integers(0, shape[axis], size=_shape(rng, int(rng.integers(1, 3)), 1, 4))
    x = _p(rng, shape)
    out_shape = np.take(x.data, idx, axis=axis).shape
    w = _weights(rng, out_shape)
    return [x], lambda: _loss(nx.take(x, idx, axis=axis), w)


def _case_sum_all(rng):
    x = _p(rng, _shape(rng, int(rng.integers(1, 4))))
    return [x], lambda: nx.sum_all(x)


OP_CASES: dict[str, Callable] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "matmul": _case_matmul,
    "kron": _case_kron,
    "gelu": _case_gelu,
    "tanh_act": _case_tanh,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "softmax_cross_entropy": _case_softmax_cross_entropy,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concat": _case_concat,
    "narrow": _case_narrow,
    "take": _case_take,
    "sum_all": _case_sum_all,
}


def check_op(name: str, seed: int = 0, n_shapes: int = N_SHAPES) -> CheckResult:
    """Worst relative error over ``n_shapes`` random cases of one op."""
    rng = np.random.default_rng([seed, sorted(OP_CASES).index(name)])
    worst = max(_grad_error(lambda: OP_CASES[name](rng)) for _ in range(n_shapes))
    tol = LAYER_NORM_TOL if name == "layer_norm" else OP_TOL
    return CheckResult(f"op/{name}", worst, tol)


def check_ops(seed: int = 0, n_shapes: int = N_SHAPES) -> list[CheckResult]:
    return [check_op(name, seed, n_shapes) for name in OP_CASES]


@contextlib.contextmanager
def inject_sign_flip(op_name: str) -> Iterator[None]:
    """Within the block, ``numerics.<op_name>`` records a negated backward."""
    original = getattr(nx, op_name)

    def faulty(*args, **kwargs):
        tape = nx._current_tape.get()
        before = len(tape) if tape is not None else 0
        out = original(*args, **kwargs)
        if tape is not None and len(tape) > before:
            node_out, parents, backward = tape._nodes[-1]

            def flipped(g, backward=backward):
                return [None if v is None else -v for v in backward(g)]

            tape._nodes[-1] = (node_out, parents, flipped)
        return out

    setattr(nx, op_name, faulty)
    try:
        yield
    finally:
        setattr(nx, op_name, original)


# -- PEFT regimes ---------------------------------------------------------------------

REGIMES = ("adapter", "compacter", "hyperformer", "lora", "prompt")


def _tiny_model_cfg() -> ModelConfig:
    return ModelConfig(d_model=8, n_enc_layers=1, n_dec_layers=1, n_heads=2, d_ff=12, vocab_size=12,
                       max_positions=16, d_visual=6, n_visual_tokens=4, dtype="f64")


def _tiny_batch(rng, cfg: ModelConfig, n_tasks: int) -> Batch:
    B = 4
    return Batch(
        visual=rng.standard_normal((B, 3, cfg.d_visual)),
        visual_len=np.array([3, 2, 3, 1]),
        tokens=rng.integers(4, cfg.vocab_size, size=(B, 3)),
        token_len=np.array([3, 3, 1, 2]),
        targets=np.array([[5, 6, 2], [7, 2, 0], [4, 8, 2], [2, 0, 0]]),
        tasks=np.arange(B) % n_tasks,
    )


_REGIME_CFGS = {
    "adapter": AdapterConfig(d=4, sharing="multiple"),
    "compacter": CompacterConfig(d=4, k=2, sharing="multiple"),
    "hyperformer": HyperformerConfig(d=4, d_e=3, d_p=3),
    "lora": LoRAConfig(d_lora=2, sharing="multiple"),
    "prompt": PromptConfig(n_prompts=2, d_m=5, sharing="multiple"),
}


def _randomize(params, rng) -> None:
    # move off the zero init so every path carries gradient
    for p in params:
        p.data = rng.standard_normal(p.shape) * 0.5


def check_regime(name: str, seed: int = 0) -> list[CheckResult]:
    """Full-model finite-difference check on every PEFT parameter, plus reach."""
    if name not in _REGIME_CFGS:
        raise KeyError(f"unknown regime {name!r}; choose from {', '.join(REGIMES)}")
    rng = np.random.default_rng([seed, REGIMES.index(name)])
    cfg = _tiny_model_cfg()
    model = build_model(cfg, seed)
    inst = pf.attach_peft(model, _REGIME_CFGS[name], ["t0", "t1"], seed)
    params = inst.parameters()
    _randomize(params, rng)
    # O(1) backbone weights keep every gradient well above finite-difference noise
    _randomize([q for q in model.registry if q.group == "backbone"], rng)
    batch = _tiny_batch(rng, cfg, 2)

    def f():
        logits = forward(model, batch, hooks=inst.hooks(), soft_prompts=inst.soft_prompts(batch.tasks),
                         linear_deltas=inst.linear_deltas())
        return sequence_loss(logits, batch.targets)

    with GradTape() as tape:
        loss = f()
    reached = {p.key for p, _ in tape.contributions(loss)}
    missing = [p.key for p in params if p.key not in reached]
    grads = tape.gradient(loss, params)
    # one relative error over the whole regime: some entries (key biases) are exactly zero
    analytic = np.concatenate([grads[p].ravel() for p in params])
    numeric = np.concatenate([finite_diff_grad(lambda _: f(), p).ravel() for p in params])
    worst = relative_error(analytic, numeric)
    out = [
        CheckResult(f"regime/{name}/finite_difference", worst, OP_TOL),
        CheckResult(f"regime/{name}/reach", float(len(missing)), 0.5),
    ]
    if name == "compacter":
        out.append(check_phm_agreement(seed))
    return out


def check_phm_agreement(seed: int = 0, n_cases: int = 10) -> CheckResult:
    """Gradients through the factored PHM forward vs. through the materialized dense weight."""
    rng = np.random.default_rng([seed, 99])
    worst = 0.0
    for _ in range(n_cases):
        k = int(rng.choice([1, 2, 4]))
        low_rank = bool(rng.integers(2))
        d_i, d = k * int(rng.integers(1, 5)), k * int(rng.integers(1, 5))
        c = random_compacter(rng, d_i, d, k, low_rank, int(rng.integers(1, 3)))
        x = rng.standard_normal((3, d_i))
        w = rng.standard_normal((3, d_i))
        params = compacter_params(c)
        with GradTape() as tape:
            fact = _loss(pf.compacter_forward(c, x), w)
        g1 = tape.gradient(fact, params)
        with GradTape() as tape:
            dense = _loss(dense_compacter_forward(c, x), w)
        g2 = tape.gradient(dense, params)
        for p in params:
            worst = max(worst, float(np.abs(g1[p] - g2[p]).max()))
    return CheckResult("regime/compacter/phm_factored_vs_materialized", worst, PHM_AGREEMENT_TOL)


def random_compacter(rng, d_i: int, d: int, k: int, low_rank: bool, rank: int) -> pf.CompacterModule:
    def weight(rows, cols, tag):
        m, n = rows // k, cols // k
        A = [_p(rng, (k, k), f"{tag}.A{i}") for i in range(k)]
        if low_rank:
            u = [_p(rng, (m, rank), f"{tag}.u{i}") for i in range(k)]
            v = [_p(rng, (rank, n), f"{tag}.v{i}") for i in range(k)]
            return pf.PHMWeight(A, None, u, v, rows, cols)
        return pf.PHMWeight(A, [_p(rng, (m, n), f"{tag}.B{i}") for i in range(k)], None, None, rows, cols)

    return pf.CompacterModule(weight(d_i, d, "down"), _p(rng, (d,), "bd"), weight(d, d_i, "up"), _p(rng, (d_i,), "bu"))


def compacter_params(c: pf.CompacterModule) -> list[Parameter]:
    out = []
    for w in (c.down, c.up):
        out += w.A + (w.B or []) + (w.u or []) + (w.v or [])
    return out + [c.down_bias, c.up_bias]


def dense_compacter_forward(c: pf.CompacterModule, x):
    """Oracle: materialize both PHM weights, then run a plain adapter."""
    down = pf.phm_materialize(c, "down")
    up = pf.phm_materialize(c, "up")
    h = nx.gelu(nx.add(nx.matmul(x, down), c.down_bias))
    return nx.add(nx.add(nx.matmul(h, up), c.up_bias), x)


def run(regime: str | None = None, seed: int = 0) -> list[CheckResult]:
    """Default scope: every numerics op.  ``regime``: one PEFT regime, or ``"all"``."""
    if regime is None:
        return check_ops(seed)
    names = REGIMES if regime == "all" else (regime,)
    out = []
    for name in names:
        out.extend(check_regime(name, seed))
    return out
