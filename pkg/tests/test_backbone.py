import numpy as np
import pytest
from conftest import random_batch, tiny_cfg

from peft_forge import numerics as nx
from peft_forge.backbone import (
    BOS,
    EOS,
    SEP,
    Batch,
    InsertionPoint,
    ModelConfig,
    bart_base_like,
    build_model,
    decoder_inputs,
    forward,
    generate_greedy,
    insertion_points,
    load_checkpoint,
    project_visual,
    restore,
    save_checkpoint,
    sequence_loss,
    serialize_input,
)
from peft_forge.errors import ConfigError, DimensionError, SequenceError, TaskError
from peft_forge.multitask import TASK_SPECS
from peft_forge.numerics import GradTape


def test_same_seed_bit_identical():
    a, b = build_model(tiny_cfg(), 7), build_model(tiny_cfg(), 7)
    for p in a.registry:
        assert np.array_equal(p.data, b.registry[p.key].data)
    c = build_model(tiny_cfg(), 8)
    assert not np.array_equal(a.registry["embedding/token"].data, c.registry["embedding/token"].data)


def test_insertion_point_count():
    assert len(insertion_points(ModelConfig(n_enc_layers=2, n_dec_layers=2))) == 10
    assert len(insertion_points(bart_base_like())) == 30


def test_insertion_point_validation():
    with pytest.raises(ConfigError):
        InsertionPoint("encoder", 0, "after_cross_attention")
    with pytest.raises(ConfigError):
        InsertionPoint("middle", 0, "after_self_attention")
    assert InsertionPoint("decoder", 1, "after_cross_attention").name == "decoder/1/after_cross_attention"


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=3).validate(min_vocab=10)


def test_init_statistics_and_flags():
    model = build_model(ModelConfig(), 0)
    q = model.registry["backbone/encoder/0/self_attention/q_weight"]
    assert abs(q.data.std() - 0.02) < 0.002
    assert not model.registry["backbone/encoder/0/self_attention/q_bias"].data.any()
    for p in model.registry:
        if p.group in ("backbone", "embedding", "output_head"):
            assert not p.trainable
        else:
            assert p.trainable


def test_tied_head_aliasing(rng, tiny_model):
    assert tiny_model.output_head is tiny_model.token_embedding
    batch = random_batch(rng, tiny_model.cfg)
    before = forward(tiny_model, batch).data
    emb = tiny_model.token_embedding
    emb.data = emb.data + 0.1 * rng.standard_normal(emb.shape)
    after = forward(tiny_model, batch).data
    assert not np.allclose(before, after)


def test_project_visual(tiny_model):
    model = build_model(tiny_cfg(d_visual=8), 0)
    model.registry["visual_projection/weight"].data = np.eye(8)
    feats = np.arange(16.0).reshape(2, 8)
    assert np.array_equal(project_visual(model, feats).data, feats)
    assert not project_visual(tiny_model, np.zeros((3, 6))).data.any()
    with pytest.raises(DimensionError):
        project_visual(tiny_model, np.zeros((3, 5)))


def test_projection_gradient_nonzero(rng, tiny_model):
    batch = random_batch(rng, tiny_model.cfg)
    w = tiny_model.registry["visual_projection/weight"]
    with GradTape() as tape:
        loss = sequence_loss(forward(tiny_model, batch), batch.targets)
    assert np.abs(tape.gradient(loss)[w]).max() > 0


def test_serialize_input():
    vqa = TASK_SPECS["count"]
    assert serialize_input(vqa, [10, 11]) == list(vqa.prefix_tokens) + [SEP, 10, 11]
    assert serialize_input(vqa, [10, 11], use_prompt=False) == [10, 11]
    other = serialize_input(TASK_SPECS["exist"], [10, 11])
    assert other[1:] == serialize_input(vqa, [10, 11])[1:]
    assert other[0] != vqa.prefix_tokens[0]
    with pytest.raises(TaskError):
        serialize_input("nope", [1], tasks=TASK_SPECS)


def test_identity_hooks_are_bit_identical(rng, tiny_model):
    batch = random_batch(rng, tiny_model.cfg)
    hooks = {pt: (lambda x, tasks: x) for pt in tiny_model.points}
    assert np.array_equal(forward(tiny_model, batch).data, forward(tiny_model, batch, hooks=hooks).data)


def test_causal_decoder(rng, tiny_model):
    batch = random_batch(rng, tiny_model.cfg, m=5)
    base = forward(tiny_model, batch).data
    t = 2
    perturbed = Batch(batch.visual, batch.visual_len, batch.tokens, batch.token_len, batch.targets.copy(), batch.tasks)
    perturbed.targets[:, t:] = (perturbed.targets[:, t:] + 3) % tiny_model.cfg.vocab_size
    out = forward(tiny_model, perturbed).data
    # decoder input at position i is target i-1, so logits up to t are unaffected
    assert np.array_equal(base[:, : t + 1], out[:, : t + 1])
    assert not np.array_equal(base[:, t + 1 :], out[:, t + 1 :])


def test_hook_locality(rng, tiny_model):
    """Changing the decoder FF hook leaves encoder activations untouched."""
    from peft_forge.backbone import encode

    batch = random_batch(rng, tiny_model.cfg)
    pt = InsertionPoint("decoder", 0, "after_feed_forward")
    hooks = {pt: lambda x, tasks: nx.scale(x, 3.0)}
    assert np.array_equal(encode(tiny_model, batch)[0].data, encode(tiny_model, batch, hooks=hooks)[0].data)
    assert not np.array_equal(forward(tiny_model, batch).data, forward(tiny_model, batch, hooks=hooks).data)


def test_padding_does_not_leak(rng, tiny_model):
    batch = random_batch(rng, tiny_model.cfg)
    out = forward(tiny_model, batch).data
    noisy = Batch(batch.visual.copy(), batch.visual_len, batch.tokens.copy(), batch.token_len, batch.targets, batch.tasks)
    for b in range(len(batch)):
        noisy.visual[b, batch.visual_len[b] :] = 99.0
        noisy.tokens[b, batch.token_len[b] :] = 5
    assert np.allclose(out, forward(tiny_model, noisy).data, atol=1e-12)


def test_overlength_raises(rng):
    model = build_model(tiny_cfg(max_positions=6), 0)
    with pytest.raises(SequenceError):
        forward(model, random_batch(rng, model.cfg, nv=3, ns=4))


def test_decoder_inputs_shift():
    t = np.array([[5, 6, EOS]])
    assert decoder_inputs(t).tolist() == [[BOS, 5, 6]]


def test_generate_greedy_end_token(rng, tiny_model):
    batch = random_batch(rng, tiny_model.cfg)
    emb = tiny_model.token_embedding
    data = np.zeros_like(emb.data)
    data[EOS] = 1.0
    emb.data = data
    tiny_model.registry["layer_norm/decoder/0/after_feed_forward/bias"].data = np.ones(tiny_model.cfg.d_model)
    assert generate_greedy(tiny_model, batch, 5) == [[]] * len(batch)
    with pytest.raises(ValueError):
        generate_greedy(tiny_model, batch, 0)


def test_generate_deterministic(rng, tiny_model):
    batch = random_batch(rng, tiny_model.cfg)
    assert generate_greedy(tiny_model, batch, 4) == generate_greedy(tiny_model, batch, 4)


def test_checkpoint_roundtrip(tmp_path, rng, tiny_model):
    path = tmp_path / "m.npz"
    save_checkpoint(path, tiny_model.registry, {"hello": 1})
    header, arrays = load_checkpoint(path)
    assert header["format"] == "peft-forge-checkpoint" and header["version"] == 1
    assert header["config"] == {"hello": 1}
    assert header["params"]["embedding/token"]["shape"] == list(tiny_model.token_embedding.shape)
    other = build_model(tiny_cfg(), 99)
    restore(other.registry, arrays)
    for p in tiny_model.registry:
        assert np.array_equal(p.data, other.registry[p.key].data)
    with pytest.raises(ValueError):
        restore(build_model(tiny_cfg(d_model=4), 0).registry, arrays)
