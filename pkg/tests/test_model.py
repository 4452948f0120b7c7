import numpy as np
import pytest

from petlab import autodiff as ad
from petlab.autodiff import Tensor, backward, grad_check
from petlab.errors import ConfigError, InputError
from petlab.model import Backbone, DeltaHooks, ModelConfig, closed_form_param_count


def tiny_config(**kw):
    base = dict(num_blocks=2, d_model=8, num_heads=2, d_ff=16, vocab_size=16,
                max_seq_len=12, num_classes=3)
    base.update(kw)
    return ModelConfig(**base)


# ------------------------------------------------------------ config


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(d_model=9)  # not divisible by heads
    with pytest.raises(ConfigError):
        tiny_config(d_ff=8)  # must exceed d_model
    with pytest.raises(ConfigError):
        tiny_config(num_blocks=0)


def test_config_roundtrip():
    cfg = tiny_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ------------------------------------------------------------ attention


def test_attention_single_position_is_value_projection():
    model = Backbone(tiny_config(num_blocks=1), seed=0)
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(1, 8)))
    out = model.attention_head_forward(x, block=0, head=0)
    expected = (x.data @ model.params["block0.attn.wv"].data)[:, :4]
    assert np.max(np.abs(out.data - expected)) < 1e-14


def test_attention_zero_queries_keys_is_uniform():
    model = Backbone(tiny_config(num_blocks=1), seed=0)
    model.params["block0.attn.wq"].data[:] = 0.0
    model.params["block0.attn.wk"].data[:] = 0.0
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(5, 8)))
    out = model.attention_head_forward(x, block=0, head=1)
    v = (x.data @ model.params["block0.attn.wv"].data)[:, 4:]
    expected = np.tile(v.mean(axis=0), (5, 1))
    assert np.max(np.abs(out.data - expected)) < 1e-12


def test_attention_hand_case_2x2():
    model = Backbone(ModelConfig(num_blocks=1, d_model=2, num_heads=1, d_ff=4,
                                 vocab_size=4, max_seq_len=4, num_classes=2), seed=0)
    for proj in ("wq", "wk", "wv"):
        model.params[f"block0.attn.{proj}"].data = np.eye(2)
    x = np.array([[0.3, -1.1], [2.0, 0.5]])
    # independent dense computation of softmax(x xT / sqrt(2)) x
    scores = (x @ x.T) / np.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    expected = (e / e.sum(axis=1, keepdims=True)) @ x
    out = model.attention_head_forward(Tensor(x), block=0, head=0)
    assert np.max(np.abs(out.data - expected)) < 1e-12


def test_attention_head_out_of_range():
    model = Backbone(tiny_config(), seed=0)
    with pytest.raises(InputError):
        model.attention_head_forward(Tensor(np.zeros((2, 8))), block=0, head=5)


def test_mha_single_head_identity_output_projection():
    model = Backbone(ModelConfig(num_blocks=1, d_model=4, num_heads=1, d_ff=8,
                                 vocab_size=4, max_seq_len=4, num_classes=2), seed=3)
    model.params["block0.attn.wo"].data = np.eye(4)
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 4)))
    assert np.array_equal(model.mha_forward(x, 0).data,
                          model.attention_head_forward(x, 0, 0).data)


def test_mha_output_shape_and_gradcheck():
    model = Backbone(tiny_config(num_blocks=1), seed=5)
    rng = np.random.default_rng(6)
    x = Tensor(rng.uniform(-1, 1, (4, 8)), requires_grad=True, name="x")
    out = model.mha_forward(x, 0)
    assert out.data.shape == (4, 8)

    w = rng.uniform(-1, 1, (4, 8))
    report = grad_check(lambda t: ad.sum_all(ad.hadamard(model.mha_forward(t, 0), Tensor(w))), [x], tol=1e-5)
    assert report.passed, report


# ------------------------------------------------------------ ffn


def test_ffn_zero_weights_broadcast_bias():
    model = Backbone(tiny_config(num_blocks=1), seed=7)
    model.params["block0.ffn.w1"].data[:] = 0.0
    model.params["block0.ffn.w2"].data[:] = 0.0
    model.params["block0.ffn.b2"].data = np.arange(8.0)
    out = model.ffn_forward(Tensor(np.random.default_rng(8).normal(size=(3, 8))), 0)
    assert np.array_equal(out.data, np.tile(np.arange(8.0), (3, 1)))


def test_ffn_relu_all_negative_preactivations():
    model = Backbone(tiny_config(num_blocks=1, activation="relu"), seed=9)
    model.params["block0.ffn.b1"].data[:] = -100.0
    out = model.ffn_forward(Tensor(np.zeros((2, 8))), 0)
    assert np.array_equal(out.data, np.zeros((2, 8)))


def test_ffn_gradcheck():
    model = Backbone(tiny_config(num_blocks=1, activation="gelu"), seed=10)
    rng = np.random.default_rng(11)
    x = Tensor(rng.uniform(-1, 1, (3, 8)), requires_grad=True)
    w = rng.uniform(-1, 1, (3, 8))
    report = grad_check(lambda t: ad.sum_all(ad.hadamard(model.ffn_forward(t, 0), Tensor(w))), [x], tol=1e-5)
    assert report.passed, report


# ------------------------------------------------------------ blocks and hooks


def test_block_no_hooks_vs_zero_hook_bitwise():
    model = Backbone(tiny_config(), seed=12)
    rng = np.random.default_rng(13)
    h = rng.normal(size=(5, 8))
    base = model.block_forward(Tensor(h), 0).data

    hooks = DeltaHooks()
    hooks.add("block0.ffn.out", lambda h_in, f_out: Tensor(np.zeros(f_out.data.shape)))
    hooked = model.block_forward(Tensor(h), 0, hooks).data
    assert np.array_equal(base, hooked)


def test_block_constant_hook_shifts_output_by_delta():
    model = Backbone(tiny_config(), seed=14)
    rng = np.random.default_rng(15)
    h = rng.normal(size=(5, 8))
    c = rng.normal(size=(5, 8))
    base = model.block_forward(Tensor(h), 1).data
    hooks = DeltaHooks()
    hooks.add("block1.ffn.out", lambda h_in, f_out: Tensor(c))
    hooked = model.block_forward(Tensor(h), 1, hooks).data
    assert np.max(np.abs((hooked - base) - c)) < 1e-12


def test_block_unknown_site_rejected():
    model = Backbone(tiny_config(), seed=16)
    hooks = DeltaHooks()
    hooks.add("block7.ffn.out", lambda h_in, f_out: f_out)
    with pytest.raises(ConfigError):
        model.block_forward(Tensor(np.zeros((2, 8))), 0, hooks)


def test_duplicate_site_binding_rejected():
    hooks = DeltaHooks()
    hooks.add("block0.ffn.out", lambda h_in, f_out: f_out)
    with pytest.raises(ConfigError):
        hooks.add("block0.ffn.out", lambda h_in, f_out: f_out)


def test_hooked_site_decomposes_additively_bitwise():
    model = Backbone(tiny_config(), seed=17)
    rng = np.random.default_rng(18)
    delta_w = Tensor(rng.normal(size=8))
    hooks = DeltaHooks()
    for site in ("block0.attn.out", "block1.ffn.out"):
        hooks.add(site, lambda h_in, f_out: delta_w)
    ids = rng.integers(0, 16, size=(3, 6))
    trace = []
    model.forward(ids, hooks, trace=trace)
    assert {r["site"] for r in trace} == {"block0.attn.out", "block1.ffn.out"}
    for rec in trace:
        assert np.array_equal(rec["h_out"], rec["f_out"] + rec["delta"])


# ------------------------------------------------------------ model forward


def test_model_forward_shapes():
    model = Backbone(tiny_config(), seed=19)
    rng = np.random.default_rng(20)
    single = model.forward(rng.integers(0, 16, size=7))
    batch = model.forward(rng.integers(0, 16, size=(4, 7)))
    assert single.data.shape == (3,)
    assert batch.data.shape == (4, 3)


def test_model_forward_deterministic():
    model = Backbone(tiny_config(), seed=21)
    ids = np.random.default_rng(22).integers(0, 16, size=(2, 5))
    assert np.array_equal(model.forward(ids).data, model.forward(ids).data)


def test_model_forward_rejects_bad_ids():
    model = Backbone(tiny_config(), seed=23)
    with pytest.raises(InputError):
        model.forward(np.array([0, 99]))
    with pytest.raises(InputError):
        model.forward(np.array([0.5, 1.5]))
    with pytest.raises(InputError):
        model.forward(np.zeros(100, dtype=int))  # exceeds max_seq_len


def test_permuting_head_columns_permutes_logits():
    model = Backbone(tiny_config(), seed=24)
    ids = np.random.default_rng(25).integers(0, 16, size=6)
    base = model.forward(ids).data
    perm = np.array([2, 0, 1])
    model.params["head.weight"].data = np.ascontiguousarray(model.params["head.weight"].data[:, perm])
    model.params["head.bias"].data = np.ascontiguousarray(model.params["head.bias"].data[perm])
    permuted = model.forward(ids).data
    assert np.array_equal(permuted, base[perm])


def test_full_model_gradcheck():
    model = Backbone(tiny_config(), seed=26)
    model.set_trainable(True)
    rng = np.random.default_rng(27)
    ids = rng.integers(0, 16, size=(2, 5))
    labels = np.array([0, 2])

    names = list(model.params)
    tensors = [model.params[n] for n in names]

    def f(*_):
        return ad.cross_entropy(model.forward(ids), labels)

    report = grad_check(f, tensors, tol=1e-4, max_coords=8)
    assert report.passed, report


def test_pure_function_without_hooks():
    model = Backbone(tiny_config(), seed=28)
    ids = np.random.default_rng(29).integers(0, 16, size=(3, 6))
    runs = [model.forward(ids).data for _ in range(3)]
    assert np.array_equal(runs[0], runs[1]) and np.array_equal(runs[1], runs[2])


# ------------------------------------------------------------ parameter accounting


def test_param_count_matches_closed_form():
    for cfg in (tiny_config(), ModelConfig(num_blocks=3, d_model=16, num_heads=4, d_ff=40,
                                           vocab_size=100, max_seq_len=20, num_classes=5)):
        model = Backbone(cfg, seed=0)
        assert model.param_count() == closed_form_param_count(cfg)


# ------------------------------------------------------------ checkpoints


def test_checkpoint_roundtrip_byte_identical(tmp_path):
    model = Backbone(tiny_config(), seed=30)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    model.save(p1)
    clone = Backbone.load(p1)
    clone.save(p2)
    assert p1.read_bytes() == p2.read_bytes()

    ids = np.random.default_rng(31).integers(0, 16, size=(2, 6))
    assert np.array_equal(model.forward(ids).data, clone.forward(ids).data)


def test_params_hash_tracks_changes():
    model = Backbone(tiny_config(), seed=32)
    h0 = model.params_hash()
    assert model.params_hash() == h0
    model.params["head.bias"].data[0] += 1.0
    assert model.params_hash() != h0
