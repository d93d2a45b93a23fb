import math

import numpy as np
import pytest
from conftest import random_batch, tiny_cfg
from hypothesis import given, settings
from hypothesis import strategies as st

from peft_forge import gradcheck as gc
from peft_forge import numerics as nx
from peft_forge import peft as pf
from peft_forge.backbone import ModelConfig, bart_base_like, build_model, forward, insertion_points
from peft_forge.config import (
    AdapterConfig,
    CompacterConfig,
    FrozenConfig,
    FullFineTuneConfig,
    HyperformerConfig,
    LoRAConfig,
    PromptConfig,
)
from peft_forge.errors import ConfigError, DimensionError
from peft_forge.numerics import Parameter


def _param(rng, shape, name="p"):
    return Parameter(name, rng.standard_normal(shape), group="peft")


def test_adapter_zero_up_is_identity(rng):
    m = pf.AdapterModule(_param(rng, (6, 3)), _param(rng, (3,)), Parameter("u", np.zeros((3, 6)), group="peft"),
                         Parameter("b", np.zeros(6), group="peft"))
    x = rng.standard_normal((2, 4, 6))
    assert np.array_equal(pf.adapter_forward(m, x).data, x)
    with pytest.raises(DimensionError):
        pf.adapter_forward(m, rng.standard_normal((2, 5)))


def test_adapter_matches_numpy(rng):
    m = pf.AdapterModule(_param(rng, (5, 2)), _param(rng, (2,)), _param(rng, (2, 5)), _param(rng, (5,)))
    x = rng.standard_normal((3, 5))
    h = x @ m.down.data + m.down_bias.data
    h = 0.5 * h * (1 + np.tanh(math.sqrt(2 / math.pi) * (h + 0.044715 * h**3)))
    expected = h @ m.up.data + m.up_bias.data + x
    assert np.allclose(pf.adapter_forward(m, x).data, expected, atol=1e-12)
    assert m.param_count == pf.adapter_param_count(5, 2)


@given(k=st.sampled_from([1, 2, 4]), a=st.integers(1, 4), b=st.integers(1, 4), low_rank=st.booleans(),
       rank=st.integers(1, 2), seed=st.integers(0, 2**16))
@settings(max_examples=40, deadline=None)
def test_phm_factored_equals_materialized(k, a, b, low_rank, rank, seed):
    rng = np.random.default_rng(seed)
    c = gc.random_compacter(rng, k * a, k * b, k, low_rank, rank)
    x = rng.standard_normal((3, 2, k * a))
    fact = pf.compacter_forward(c, x).data
    dense = gc.dense_compacter_forward(c, x).data
    assert np.abs(fact - dense).max() < 1e-10


def test_phm_materialize_is_sum_of_krons(rng):
    c = gc.random_compacter(rng, 4, 6, 2, False, 1)
    expected = sum(np.kron(c.down.A[i].data, c.down.B[i].data) for i in range(2))
    assert np.allclose(pf.phm_materialize(c, "down").data, expected, atol=1e-14)
    lr = gc.random_compacter(rng, 4, 6, 2, True, 2)
    expected = sum(np.kron(lr.up.A[i].data, lr.up.u[i].data @ lr.up.v[i].data) for i in range(2))
    assert np.allclose(pf.phm_materialize(lr, "up").data, expected, atol=1e-14)


def test_phm_counts():
    assert pf.phm_weight_count(768, 96, 2, False, 1) == 8 + 768 * 96 // 2
    assert pf.phm_weight_count(768, 96, 2, True, 1) == 8 + 768 + 96


def test_compacter_k_must_divide(tiny_model):
    with pytest.raises(ConfigError):
        pf.attach_peft(tiny_model, CompacterConfig(d=3, k=2), ["a"])
    with pytest.raises(ConfigError):
        pf.count_params(CompacterConfig(d=96, k=5), bart_base_like(), 4)


def test_phm_gradient_agreement():
    assert gc.check_phm_agreement(seed=3).passed


def test_lora_merge_equals_delta(rng):
    w = Parameter("w", rng.standard_normal((6, 5)), trainable=False)
    b = Parameter("b", rng.standard_normal(5), trainable=False)
    d = pf.LoRADelta(_param(rng, (6, 2)), _param(rng, (2, 5)), _param(rng, (5,)))
    x = rng.standard_normal((4, 6))
    mw, mb = pf.lora_merge(d, w, b)
    assert np.abs(pf.lora_apply(d, w, x, b).data - (x @ mw + mb)).max() < 1e-10
    assert np.array_equal(w.data, w.data.copy())
    with pytest.raises(DimensionError):
        pf.lora_apply(d, w, rng.standard_normal((4, 3)), b)


def test_prompt_network_shape(rng):
    p = pf.PromptNetwork(_param(rng, (5, 8)), _param(rng, (8, 3)), _param(rng, (3,)), _param(rng, (3, 8)), _param(rng, (8,)))
    out = pf.prompt_forward(p)
    expected = np.tanh(p.embed.data @ p.down.data + p.down_bias.data) @ p.up.data + p.up_bias.data
    assert out.shape == (5, 8)
    assert np.allclose(out.data, expected)
    assert pf.prompt_param_count(5, 8, 3) == 5 * 8 + 8 * 3 + 3 + 3 * 8 + 8


def test_hyperformer_generate_shapes_and_bounds(tiny_model):
    inst = pf.attach_peft(tiny_model, HyperformerConfig(d=4, d_e=3, d_p=2), ["a", "b"])
    g = inst.generator
    down, db, up, ub = pf.hyperformer_generate(g, 1, 3)
    assert down.shape == (8, 4) and db.shape == (4,) and up.shape == (4, 8) and ub.shape == (8,)
    assert not up.data.any() and not ub.data.any()
    with pytest.raises(IndexError):
        pf.hyperformer_generate(g, 2, 0)
    with pytest.raises(IndexError):
        pf.hyperformer_generate(g, 0, len(tiny_model.points))


def test_hyperformer_per_kind_vs_global():
    cfg = bart_base_like()
    pts = insertion_points(cfg)
    per = pf.hyperformer_terms(HyperformerConfig(), 768, 4, pts)
    glob = pf.hyperformer_terms(HyperformerConfig(hypernet_scope="global"), 768, 4, pts)
    assert per.n_hypernets == 5 and glob.n_hypernets == 1
    assert per.hypernet == 5 * glob.hypernet


def _budget_terms(d_p):
    pts = insertion_points(bart_base_like())
    return pf.hyperformer_terms(HyperformerConfig(d=96, d_e=8, d_p=d_p), 768, 4, pts)


def test_hyperformer_budget_paper_config():
    ok, report = pf.check_hyperformer_budget(_budget_terms(8))
    assert ok
    assert report.d_p_bound == pytest.approx(4 * 30 / 5)


def test_hyperformer_budget_fails_at_bound():
    # global hypernet, d_p = N_T * N_L: the dominant term equals the independent-adapter total
    pts = insertion_points(bart_base_like())
    terms = pf.hyperformer_terms(HyperformerConfig(d=96, d_e=8, d_p=120, hypernet_scope="global"), 768, 4, pts)
    ok, report = pf.check_hyperformer_budget(terms)
    assert not ok
    assert report.dominant_equal
    assert isinstance(report.generator_total, int)


def test_hyperformer_budget_from_generator(tiny_model):
    inst = pf.attach_peft(tiny_model, HyperformerConfig(d=4, d_e=3, d_p=2), ["a", "b"])
    closed = pf.hyperformer_terms(HyperformerConfig(d=4, d_e=3, d_p=2), 8, 2, tiny_model.points)
    assert inst.generator.terms() == closed


REGIMES = [
    AdapterConfig(d=4, sharing="multiple"),
    AdapterConfig(d=4, sharing="single"),
    AdapterConfig(d=4, sharing="half_shared_up"),
    AdapterConfig(d=4, sharing="half_shared_down"),
    CompacterConfig(d=4, k=2, sharing="multiple"),
    CompacterConfig(d=4, k=2, sharing="single"),
    CompacterConfig(d=4, k=2, sharing="half_shared_up"),
    CompacterConfig(d=4, k=2, share_A=True, sharing="multiple"),
    CompacterConfig(d=4, k=2, share_A=True, sharing="half_shared_down"),
    CompacterConfig(d=4, k=4, low_rank=True, rank=2, sharing="single"),
    HyperformerConfig(d=4, d_e=3, d_p=2),
    HyperformerConfig(d=4, d_e=3, d_p=2, hypernet_scope="global"),
    LoRAConfig(d_lora=2, sharing="multiple"),
    LoRAConfig(d_lora=2, sharing="single", targets=("q", "v"), bias_trainable=False),
    PromptConfig(n_prompts=3, d_m=5, sharing="multiple"),
    PromptConfig(n_prompts=3, d_m=5, sharing="single"),
    FullFineTuneConfig(),
    FrozenConfig(),
]


@pytest.mark.parametrize("cfg", REGIMES, ids=lambda c: f"{c.kind}-{getattr(c, 'sharing', '')}")
def test_closed_form_count_matches_instantiation(cfg):
    """Two routes: formula vs. enumerating the registry after attaching the regime."""
    model = build_model(tiny_cfg(), 0)
    inst = pf.attach_peft(model, cfg, ["t0", "t1", "t2"])
    enumerated = sum(p.size for p in model.registry if p.group == "peft")
    assert enumerated == sum(p.size for p in inst.parameters())
    assert pf.count_params(cfg, model.cfg, 3)["total"] == enumerated


@pytest.mark.parametrize("cfg", REGIMES[:-2], ids=lambda c: f"{c.kind}-{getattr(c, 'sharing', '')}")
def test_identity_at_init_or_prompt_shift(cfg, rng):
    model = build_model(tiny_cfg(), 0)
    batch = random_batch(rng, model.cfg, n_tasks=3)
    base = forward(model, batch).data
    inst = pf.attach_peft(model, cfg, ["t0", "t1", "t2"])
    out = forward(model, batch, hooks=inst.hooks(), soft_prompts=inst.soft_prompts(batch.tasks),
                  linear_deltas=inst.linear_deltas()).data
    if isinstance(cfg, PromptConfig):
        assert out.shape == base.shape
    else:
        assert np.abs(out - base).max() < 1e-12


def test_routing_matches_per_example(rng):
    model = build_model(tiny_cfg(), 0)
    inst = pf.attach_peft(model, AdapterConfig(d=4, sharing="multiple"), ["a", "b"], seed=1)
    for p in inst.parameters():
        p.data = rng.standard_normal(p.shape) * 0.3
    batch = random_batch(rng, model.cfg, B=5, n_tasks=2)
    out = forward(model, batch, hooks=inst.hooks()).data
    for b in range(5):
        one = type(batch)(batch.visual[b : b + 1], batch.visual_len[b : b + 1], batch.tokens[b : b + 1],
                          batch.token_len[b : b + 1], batch.targets[b : b + 1], batch.tasks[b : b + 1])
        single = forward(model, one, hooks=inst.hooks()).data
        # padding widths differ between the full batch and the singleton
        assert np.allclose(out[b], single[0], atol=1e-10)


def test_single_sharing_uses_one_module(tiny_model):
    inst = pf.attach_peft(tiny_model, AdapterConfig(d=4, sharing="single"), ["a", "b", "c"])
    for mods in inst.adapters.values():
        assert mods[0] is mods[1] is mods[2]
    multi = pf.attach_peft(build_model(tiny_cfg(), 0), AdapterConfig(d=4, sharing="multiple"), ["a", "b"])
    for mods in multi.adapters.values():
        assert mods[0] is not mods[1]


def test_half_shared_up_shares_only_up(tiny_model):
    inst = pf.attach_peft(tiny_model, AdapterConfig(d=4, sharing="half_shared_up"), ["a", "b"])
    for mods in inst.adapters.values():
        assert mods[0].up is mods[1].up and mods[0].up_bias is mods[1].up_bias
        assert mods[0].down is not mods[1].down


def test_init_distributions():
    model = build_model(ModelConfig(), 0)
    inst = pf.attach_peft(model, AdapterConfig(d=96), ["a"])
    m = next(iter(inst.adapters.values()))[0]
    assert abs(m.down.data.std() - 0.02) < 0.002
    assert not m.up.data.any()
    model = build_model(ModelConfig(), 0)
    lora = pf.attach_peft(model, LoRAConfig(d_lora=16), ["a"])
    d = next(iter(lora.lora.values()))[0]
    assert not d.B.data.any() and d.A.data.std() > 0


def test_count_params_bart_adapter():
    cfg = bart_base_like()
    per = 768 * 96 + 96 + 96 * 768 + 768
    assert pf.count_params(AdapterConfig(d=96, sharing="single"), cfg, 4)["total"] == 30 * per
    assert pf.count_params(AdapterConfig(d=96, sharing="multiple"), cfg, 4)["total"] == 4 * 30 * per


def test_count_params_lora_attention_sublayers():
    cfg = bart_base_like()
    assert pf.n_attention_sublayers(cfg) == 18
    per = 2 * 768 * 64 + 768
    assert pf.count_params(LoRAConfig(d_lora=64), cfg, 4)["total"] == 18 * 4 * per
