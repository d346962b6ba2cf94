import numpy as np
import pytest

from mtpeft import autograd as ag
from mtpeft.autograd import Parameter, Tensor
from mtpeft.backbone import (BackboneConfig, apply_prefix, build_backbone, count_parameters,
                             reference_125m_config, scaled_dot_attention, trainable_census)
from mtpeft.errors import ConfigError, InvalidArgumentError, ShapeError
from mtpeft.peft import (LoraModule, PeftConfig, PrefixModule, SerialAdapterModule, apply_lora,
                         apply_parallel_adapter, apply_serial_adapter, inject_peft,
                         peft_parameter_count)

from conftest import numeric_grad, rel_err

TINY = BackboneConfig(n_layers=2, d_model=16, n_heads=2, d_ffn=32, vocab_size=40, max_seq_len=10, dropout=0.0)


def adapter(d, r, seed=0):
    return SerialAdapterModule(d, r, np.random.default_rng(seed))


def test_serial_adapter_zero_init_identity(rng):
    h = Tensor(rng.normal(size=(3, 5, 8)))
    np.testing.assert_array_equal(apply_serial_adapter(h, adapter(8, 4)).data, h.data)


def test_serial_adapter_hand_example():
    m = adapter(2, 1)
    m.W_down.data[:] = [[1.0], [2.0]]
    m.W_up.data[:] = [[0.5, -0.5]]
    out = apply_serial_adapter(Tensor([1.0, 1.0]), m)
    np.testing.assert_allclose(out.data, [2.5, -0.5])


def test_adapter_dim_mismatch():
    with pytest.raises(ShapeError):
        apply_serial_adapter(Tensor(np.ones((2, 5))), adapter(4, 2))
    with pytest.raises(ShapeError):
        apply_parallel_adapter(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 5))), adapter(4, 2))


def test_adapter_gradients_match_fd(rng):
    m = adapter(8, 3, seed=1)
    m.W_up.data[:] = rng.normal(size=(3, 8))
    m.b_down.data[:] = 0.1
    h = rng.normal(size=(4, 8))

    def ref(w_down):
        pre = h @ w_down + m.b_down.data
        return float((np.maximum(pre, 0) @ m.W_up.data + m.b_up.data + h).sum())

    m.W_down.grad = None
    ag.tsum(apply_serial_adapter(Tensor(h), m)).backward()
    assert rel_err(m.W_down.grad, numeric_grad(ref, m.W_down.data)) < 1e-4
    assert ag.finite_difference_check(lambda t: ag.tsum(apply_serial_adapter(t, m)), h) < 1e-4
    side = rng.normal(size=(4, 8))
    assert ag.finite_difference_check(
        lambda t: ag.tsum(apply_parallel_adapter(t, Tensor(side), m) ** 2), h) < 1e-4


def test_parallel_equals_serial_when_sublayer_is_identity(rng):
    m = adapter(6, 3, seed=2)
    m.W_up.data[:] = rng.normal(size=(3, 6))
    x = Tensor(rng.normal(size=(5, 6)))
    np.testing.assert_allclose(apply_parallel_adapter(x, x, m).data, apply_serial_adapter(x, m).data)


def test_lora_identity_and_hand_example(rng):
    lora = LoraModule(2, 2, 1, 1.0, rng, allow_full_rank=True)
    x = Tensor(rng.normal(size=(3, 2)))
    W = Tensor(rng.normal(size=(2, 2)))
    np.testing.assert_array_equal(apply_lora(x, W, lora).data, ag.linear(x, W).data)
    lora.A.data[:] = [[1.0, 0.0]]
    lora.B.data[:] = [[1.0], [0.0]]
    np.testing.assert_allclose(apply_lora(Tensor([1.0, 2.0]), Tensor(np.eye(2)), lora).data, [2.0, 2.0])


def test_lora_full_rank_equals_dense_update(rng):
    d = 4
    lora = LoraModule(d, d, d, 1.0, rng, allow_full_rank=True)
    lora.B.data[:] = rng.normal(size=(d, d))
    W = rng.normal(size=(d, d))
    x = rng.normal(size=(5, d))
    delta = lora.B.data @ lora.A.data
    np.testing.assert_allclose(apply_lora(Tensor(x), Tensor(W), lora).data, x @ (W + delta).T, rtol=1e-12)


def test_lora_rank_too_large_rejected(rng):
    with pytest.raises(InvalidArgumentError):
        LoraModule(4, 4, 4, 1.0, rng)
    with pytest.raises(InvalidArgumentError):
        LoraModule(4, 4, 5, 1.0, rng, allow_full_rank=True)


def test_lora_gradients_only_a_b(rng):
    lora = LoraModule(6, 6, 2, 1.0, rng)
    lora.B.data[:] = rng.normal(size=(6, 2))
    W = Parameter(rng.normal(size=(6, 6)), frozen=True)
    x = rng.normal(size=(3, 6))
    errs = ag.parameter_gradient_check(lambda: ag.tsum(apply_lora(Tensor(x), W, lora) ** 2), [lora.A, lora.B])
    assert max(errs.values()) < 1e-4
    assert W.grad is None


def test_apply_prefix_shapes_and_mask(rng):
    b, h, t, dh, p = 2, 2, 5, 4, 3
    keys, values = Tensor(rng.normal(size=(b, h, t, dh))), Tensor(rng.normal(size=(b, h, t, dh)))
    pk, pv = Tensor(rng.normal(size=(1, h, p, dh))), Tensor(rng.normal(size=(1, h, p, dh)))
    mask = np.zeros((b, 1, t, t))
    mask[:, :, :, -1] = -1e9
    k2, v2, m2 = apply_prefix(keys, values, (pk, pv), mask)
    assert k2.shape == (b, h, p + t, dh) and v2.shape == (b, h, p + t, dh)
    assert m2.shape == (b, 1, t, p + t)
    assert not m2[..., :p].any()
    np.testing.assert_array_equal(m2[..., p:], mask)
    k3, v3, m3 = apply_prefix(keys, values, None, mask)
    assert k3 is keys and m3 is mask


def test_prefix_module_shapes_and_default_length():
    cfg = PeftConfig(method="prefix")
    assert cfg.prefix_length == 20
    pm = PrefixModule(3, 16, cfg.prefix_length, 32, np.random.default_rng(0))
    prefixes = pm.all_prefixes()
    assert prefixes.shape == (3, 2, 20, 16)
    k, v = PrefixModule.layer_kv(prefixes, 1, n_heads=4)
    assert k.shape == v.shape == (1, 4, 20, 4)
    with pytest.raises(InvalidArgumentError):
        PrefixModule.layer_kv(prefixes, 3, 4)


def test_prefix_keys_extend_attention(rng):
    bb = build_backbone(TINY)
    model = inject_peft(bb, PeftConfig(method="prefix", prefix_length=20, prefix_reparam_width=8))
    ids = rng.integers(0, 40, size=(2, 6))
    hooks = model.peft.hooks()
    kv = hooks.prefix(0, TINY.n_heads)
    assert kv[0].shape[2] == 20
    _, pooled = model.encode(ids)
    assert pooled.shape == (2, 16)


def test_prefix_with_vanishing_attention_approaches_plain_model(rng):
    b, h, t, dh, p = 2, 2, 5, 4, 3
    q = Tensor(np.abs(rng.normal(size=(b, h, t, dh))) + 0.1)
    k, v = Tensor(rng.normal(size=(b, h, t, dh))), Tensor(rng.normal(size=(b, h, t, dh)))
    mask = np.zeros((b, 1, t, t))
    plain = scaled_dot_attention(q, k, v, mask).data
    # every query is positive, so a very negative prefix key gets ~zero softmax mass
    pk = Tensor(np.full((1, h, p, dh), -1e4))
    pv = Tensor(rng.normal(size=(1, h, p, dh)) * 100)
    k2, v2, m2 = apply_prefix(k, v, (pk, pv), mask)
    np.testing.assert_allclose(scaled_dot_attention(q, k2, v2, m2).data, plain, rtol=0, atol=1e-12)
    # a moderate prefix does change the output
    k3, v3, m3 = apply_prefix(k, v, (Tensor(np.zeros((1, h, p, dh))), pv), mask)
    assert np.abs(scaled_dot_attention(q, k3, v3, m3).data - plain).max() > 1e-3


def test_prefix_zero_length_is_identity(rng):
    bb = build_backbone(TINY).eval()
    ids = rng.integers(0, 40, size=(2, 6))
    _, plain = bb.encode(ids)
    pm = PrefixModule(TINY.n_layers, TINY.d_model, 0, 8, np.random.default_rng(0))
    prefixes = pm.all_prefixes()
    assert prefixes.shape == (TINY.n_layers, 2, 0, TINY.d_model)

    class Empty:
        def prefix(self, layer, n_heads):
            return PrefixModule.layer_kv(prefixes, layer, n_heads)

        def project(self, layer, which, x, proj):
            return proj(x)

        def attention_output(self, layer, out):
            return out

        def ffn_output(self, layer, ffn_input, out):
            return out

    _, out = bb.encode(ids, hooks=Empty())
    np.testing.assert_array_equal(out.data, plain.data)


@pytest.mark.parametrize("method", ["serial_adapter", "parallel_adapter", "lora"])
def test_injection_is_bitwise_identity_at_init(method):
    bb = build_backbone(TINY).eval()
    model = inject_peft(build_backbone(TINY), PeftConfig(method=method, bottleneck_r=4, lora_rank=2))
    model.backbone.eval()
    r = np.random.default_rng(7)
    for _ in range(20):
        ids = r.integers(0, 40, size=(3, 8))
        mask = np.ones_like(ids, dtype=bool)
        mask[0, 5:] = False
        h0, p0 = bb.encode(ids, mask)
        h1, p1 = model.encode(ids, mask)
        np.testing.assert_array_equal(h1.data, h0.data)
        np.testing.assert_array_equal(p1.data, p0.data)


@pytest.mark.parametrize("method", ["serial_adapter", "parallel_adapter", "lora", "prefix"])
def test_freeze_partition_after_injection(method):
    cfg = PeftConfig(method=method, bottleneck_r=4, lora_rank=2, prefix_length=3, prefix_reparam_width=8)
    model = inject_peft(build_backbone(TINY), cfg)
    for p in model.parameters():
        assert p.frozen == p.name.startswith("backbone."), p.name
        assert p.name.startswith(("backbone.", "peft."))
    assert count_parameters(model, "trainable").count == count_parameters(model, "peft.").count
    assert count_parameters(model, "peft.").count == peft_parameter_count(cfg, TINY.n_layers, TINY.d_model)


def test_module_counts_per_block():
    serial = inject_peft(build_backbone(TINY), PeftConfig(method="serial_adapter", bottleneck_r=4))
    parallel = inject_peft(build_backbone(TINY), PeftConfig(method="parallel_adapter", bottleneck_r=4))
    lora = inject_peft(build_backbone(TINY), PeftConfig(method="lora", lora_rank=2))
    assert len(serial.peft.attn_adapters) == len(serial.peft.ffn_adapters) == TINY.n_layers
    assert len(parallel.peft.ffn_adapters) == TINY.n_layers
    assert not hasattr(parallel.peft, "attn_adapters")
    names = {p.name for p in lora.peft.parameters()}
    assert "peft.query.0.A" in names and "peft.value.1.B" in names
    assert not any(".key." in n for n in names)


def test_capacity_monotonicity():
    d, L = 16, 2
    a1 = peft_parameter_count(PeftConfig(bottleneck_r=4), L, d)
    a2 = peft_parameter_count(PeftConfig(bottleneck_r=8), L, d)
    # weights double, biases: b_down doubles, b_up unchanged
    assert a2 - 2 * a1 == -2 * L * d
    l1 = peft_parameter_count(PeftConfig(method="lora", lora_rank=2), L, d)
    l2 = peft_parameter_count(PeftConfig(method="lora", lora_rank=4), L, d)
    assert l2 == 2 * l1


def test_peft_config_validation():
    with pytest.raises(ConfigError):
        PeftConfig(method="ia3").validate()
    with pytest.raises(ConfigError):
        PeftConfig(method="lora", lora_targets=()).validate()
    with pytest.raises(ConfigError):
        PeftConfig(bottleneck_r=0).validate()
    cfg = PeftConfig.from_dict({"method": "lora", "lora_targets": ["query"]})
    assert cfg.lora_targets == ("query",)
    assert PeftConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("method,expected,tol", [
    ("serial_adapter", 1.85, 0.3),
    ("parallel_adapter", 0.93, 0.2),
    ("lora", 0.46, 0.1),
])
def test_reference_trainable_fractions(method, expected, tol):
    bb = build_backbone(reference_125m_config(), initialize=False)
    model = inject_peft(bb, PeftConfig(method=method))
    pct = trainable_census(model)["peft_only"].percent
    assert abs(pct - expected) <= tol
    d, L = 768, 12
    if method == "lora":
        assert count_parameters(model, "peft.").count == 2 * d * 16 * 2 * L
