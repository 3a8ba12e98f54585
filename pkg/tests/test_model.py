import numpy as np
import pytest

import metasum.autodiff as ad
from helpers import end_to_end_grad_check, tiny_grad_check_model
from metasum import model as M
from metasum.model import ModelConfig, ParameterStore, Summarizer


@pytest.fixture()
def tiny_model():
    cfg = ModelConfig.tiny()
    return Summarizer.build(cfg, seed=0)


def _rand_hidden(rng, cfg, batch=2, seq=5):
    return ad.tensor(rng.normal(size=(batch, seq, cfg.hidden_dim)))


def test_config_validation_lists_problems():
    with pytest.raises(ValueError) as err:
        ModelConfig(hidden_dim=10, num_heads=3, adapter_dim=99)
    msg = str(err.value)
    assert "divisible" in msg and "adapter_dim" in msg


def test_sa_layer_pre_affine_statistics(tiny_model):
    # pre-affine layernorm output: rows have mean ~0, variance ~1
    rng = np.random.default_rng(0)
    cfg = tiny_model.cfg
    h = _rand_hidden(rng, cfg)
    p = tiny_model.params()
    identity_affine = {
        "enc.0.sa0.ln.gain": ad.tensor(np.ones(cfg.hidden_dim)),
        "enc.0.sa0.ln.bias": ad.tensor(np.zeros(cfg.hidden_dim)),
    }
    p.update(identity_affine)
    out = M.self_attention_layer(h, p, "enc.0.sa0", None, cfg).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-9
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-3  # eps=1e-5 shrinks variance


def test_sa_layer_zeroed_weights_collapse_to_layernorm(tiny_model):
    # zero MHA/FF weights and identity affine reduce SA(h) to LN(h)
    rng = np.random.default_rng(1)
    cfg = tiny_model.cfg
    h = _rand_hidden(rng, cfg)
    p = tiny_model.params()
    zeroed = {}
    for name, t in p.items():
        if name.startswith("enc.0.sa0.") and ".adapter." not in name and ".ln." not in name:
            zeroed[name] = ad.tensor(np.zeros(t.shape))
    p.update(zeroed)
    out = M.self_attention_layer(h, p, "enc.0.sa0", None, cfg)
    expected = ad.layernorm(h, eps=M.LAYERNORM_EPS)
    assert np.array_equal(out.data, expected.data)


def test_sa_layer_gradient_wrt_input(tiny_model):
    rng = np.random.default_rng(2)
    cfg = tiny_model.cfg
    p = tiny_model.params()

    def f(x):
        return ad.reduce_sum(M.self_attention_layer(x, p, "enc.0.sa0", None, cfg))

    x = ad.tensor(rng.normal(size=(1, 4, cfg.hidden_dim)))
    report = ad.grad_check(f, x, eps=1e-6, tol=1e-5)
    assert report.passed, report


def test_transformer_layer_is_sa_then_ff_ln(tiny_model):
    # l=1: TF(h) == LN(ADA(FF(ADA-SA(h)))) built from the exported pieces
    rng = np.random.default_rng(3)
    cfg = tiny_model.cfg
    h = _rand_hidden(rng, cfg)
    p = tiny_model.params()
    full = M.transformer_layer(h, p, "enc.0", cfg, n_sa=1, self_mask=None)
    inner = M.self_attention_layer(h, p, "enc.0.sa0", None, cfg)
    manual = M._ff(inner, p, "enc.0.ff", 0.0, None)
    manual = M.apply_adapter(manual, p, "enc.0.adapter")
    manual = M._ln(manual, p, "enc.0.ln")
    assert np.array_equal(full.data, manual.data)


def test_transformer_layer_ff_residual_flag():
    cfg = ModelConfig.tiny(ff_residual=True)
    model = Summarizer.build(cfg, seed=0)
    rng = np.random.default_rng(4)
    h = _rand_hidden(rng, cfg)
    p = model.params()
    with_res = M.transformer_layer(h, p, "enc.0", cfg, n_sa=1, self_mask=None)
    cfg_off = ModelConfig.tiny(ff_residual=False)
    without = M.transformer_layer(h, p, "enc.0", cfg_off, n_sa=1, self_mask=None)
    assert not np.allclose(with_res.data, without.data)


def test_decoder_causality(tiny_model):
    # changing target token t+1 never changes decoder output at position t
    rng = np.random.default_rng(5)
    cfg = tiny_model.cfg
    src = rng.integers(6, cfg.vocab_size, size=(1, 6))
    tgt_in = rng.integers(6, cfg.vocab_size, size=(1, 7))
    memory = tiny_model.encode(src)
    base = tiny_model.decode_logits(memory, src, tgt_in).data
    for t in range(tgt_in.shape[1] - 1):
        perturbed = tgt_in.copy()
        perturbed[0, t + 1] = (perturbed[0, t + 1] + 11) % (cfg.vocab_size - 6) + 6
        out = tiny_model.decode_logits(memory, src, perturbed).data
        assert np.array_equal(out[0, : t + 1], base[0, : t + 1]), f"position {t}"


def test_paper_config_forward_smoke():
    cfg = ModelConfig.paper()
    model = Summarizer.build(cfg, seed=0)
    rng = np.random.default_rng(6)
    src = rng.integers(6, cfg.vocab_size, size=(2, 16))
    tgt = rng.integers(6, cfg.vocab_size, size=(2, 8))
    tgt[:, 0] = 4
    loss, n = model.batch_nll(src, tgt)
    assert np.isfinite(loss.item())
    assert n == 2 * 7


def test_adapter_identity_at_zero_up(tiny_model):
    rng = np.random.default_rng(7)
    cfg = tiny_model.cfg
    h = _rand_hidden(rng, cfg)
    out = M.apply_adapter(h, tiny_model.params(), "enc.0.adapter")
    assert np.array_equal(out.data, h.data)


def test_adapter_down_zero_gives_bias_shift():
    # hidden=2, adapter=1 hand case: down=0 with bias 0.5, up=[2,-1], up_b=[0.3,0.1]
    # ADA(h) = up_w*relu(down_b) + up_b + h = h + [1.3, -0.4]
    p = {
        "a.down_w": ad.tensor([[0.0], [0.0]]),
        "a.down_b": ad.tensor([0.5]),
        "a.up_w": ad.tensor([[2.0, -1.0]]),
        "a.up_b": ad.tensor([0.3, 0.1]),
    }
    h = ad.tensor([[1.0, 2.0], [0.0, -1.0]])
    out = M.apply_adapter(h, p, "a")
    assert np.allclose(out.data, h.data + np.array([1.3, -0.4]), atol=1e-15)


def test_adapter_grad_check():
    rng = np.random.default_rng(8)
    hidden, bottleneck = 6, 3
    params = {
        "a.down_w": rng.normal(size=(hidden, bottleneck)),
        "a.down_b": rng.normal(size=(bottleneck,)),
        "a.up_w": rng.normal(size=(bottleneck, hidden)),
        "a.up_b": rng.normal(size=(hidden,)),
    }
    h = ad.tensor(rng.normal(size=(2, hidden)) + 1.0)
    for name, value in params.items():
        def f(x, name=name):
            p = {k: ad.tensor(v) for k, v in params.items()}
            p[name] = x
            return ad.reduce_sum(M.apply_adapter(h, p, "a"))

        assert ad.grad_check(f, ad.tensor(value), eps=1e-6, tol=1e-5).passed, name


def test_adapted_equals_unadapted_at_init(tiny_model):
    rng = np.random.default_rng(9)
    cfg = tiny_model.cfg
    for _ in range(10):
        src = rng.integers(6, cfg.vocab_size, size=(2, rng.integers(4, 10)))
        adapted = tiny_model.encode(src, adapters=True).data
        unadapted = tiny_model.encode(src, adapters=False).data
        assert np.abs(adapted - unadapted).max() < 1e-12


def test_adapter_counts_paper_config():
    cfg = ModelConfig.paper()
    names = [n for n, _, _ in M.iter_parameter_shapes(cfg)]
    enc_adapters = sum(1 for n in names if n.startswith("enc.") and n.endswith(".adapter.up_w"))
    dec_adapters = sum(1 for n in names if n.startswith("dec.") and n.endswith(".adapter.up_w"))
    assert enc_adapters == 12 * 2
    assert dec_adapters == 6 * 3
    assert enc_adapters + dec_adapters == 42


def test_gradient_flows_to_adapter_up(tiny_model):
    rng = np.random.default_rng(10)
    cfg = tiny_model.cfg
    src = rng.integers(6, cfg.vocab_size, size=(2, 6))
    tgt = rng.integers(6, cfg.vocab_size, size=(2, 5))
    tgt[:, 0] = 4
    up = tiny_model.store.meta["enc.0.adapter.up_w"]
    with ad.Tape() as tape:
        total, n = tiny_model.batch_nll(src, tgt)
        loss = ad.scale(total, 1.0 / n)
    grad = tape.backward(loss, wrt=[up])[up].data
    assert np.linalg.norm(grad) > 0.0


def test_uniform_logits_give_log_vocab_nll(tiny_model):
    rng = np.random.default_rng(11)
    cfg = tiny_model.cfg
    src = rng.integers(6, cfg.vocab_size, size=(1, 5))
    tgt = rng.integers(6, cfg.vocab_size, size=(1, 6))
    zero_head = {
        "out.w": ad.tensor(np.zeros((cfg.hidden_dim, cfg.vocab_size))),
        "out.b": ad.tensor(np.zeros(cfg.vocab_size)),
    }
    total, n = tiny_model.batch_nll(src, tgt, params=zero_head)
    assert abs(total.item() / n - np.log(cfg.vocab_size)) < 1e-12


def test_single_token_target_is_one_cross_entropy_step(tiny_model):
    rng = np.random.default_rng(12)
    cfg = tiny_model.cfg
    src = rng.integers(6, cfg.vocab_size, size=(1, 5))
    tgt = np.array([[4, 17]])  # [BOS] then one gold token
    memory = tiny_model.encode(src)
    total, n = tiny_model.decode_nll(memory, src, tgt)
    assert n == 1
    logits = tiny_model.decode_logits(memory, src, tgt[:, :1])
    step = ad.cross_entropy_with_logits(logits, np.array([[17]]))
    assert abs(total.item() - step.data[0, 0]) < 1e-12


def test_nll_monotone_decrease_overfitting_one_example():
    cfg = ModelConfig.tiny(vocab_size=40)
    model = Summarizer.build(cfg, seed=0)
    src = np.array([[2, 8, 9, 10, 3]])
    tgt = np.array([[4, 11, 12, 13, 5]])
    trainable = model.store.all()
    for t in trainable.values():
        t.requires_grad = True
    m_state = {k: np.zeros(v.shape) for k, v in trainable.items()}
    v_state = {k: np.zeros(v.shape) for k, v in trainable.items()}
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    losses = []
    for step in range(1, 51):
        with ad.Tape() as tape:
            total, n = model.batch_nll(src, tgt)
            loss = ad.scale(total, 1.0 / n)
        grads = tape.backward(loss)
        losses.append(loss.item())
        for k, t in trainable.items():
            g = grads[t].data
            m_state[k] = b1 * m_state[k] + (1 - b1) * g
            v_state[k] = b2 * v_state[k] + (1 - b2) * g * g
            t.data[...] -= lr * (m_state[k] / (1 - b1**step)) / (
                np.sqrt(v_state[k] / (1 - b2**step)) + eps
            )
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.2


def test_errors_on_bad_tokens_and_empty_target(tiny_model):
    cfg = tiny_model.cfg
    with pytest.raises(ValueError):
        tiny_model.encode(np.array([[cfg.vocab_size]]))
    src = np.array([[2, 8, 3]])
    memory = tiny_model.encode(src)
    with pytest.raises(ValueError):
        tiny_model.decode_nll(memory, src, np.array([[4]]))
    with pytest.raises(ValueError):
        tiny_model.encode(np.ones((1, cfg.max_src_len + 1), dtype=int))


def test_partition_soundness():
    cfg = ModelConfig.tiny()
    store = ParameterStore.initialize(cfg, np.random.default_rng(0))
    base, meta = set(store.base), set(store.meta)
    assert not base & meta
    assert base | meta == {n for n, _, _ in M.iter_parameter_shapes(cfg)}
    for name in meta:
        assert ".adapter." in name or ".ln." in name
    for name, tensor in store.meta.items():
        assert tensor.requires_grad, name
    for name, tensor in store.base.items():
        assert not tensor.requires_grad, name


def test_end_to_end_grad_check_tiny():
    model, src, tgt = tiny_grad_check_model(seed=0)
    worst = end_to_end_grad_check(model, src, tgt, seed=0, probes_per_tensor=6)
    assert worst < 1e-4


def test_trainable_parameter_count_paper():
    cfg = ModelConfig.paper()
    assert M.trainable_parameter_count(cfg, "adapter-only") == 4_228_224
    expected_full = sum(int(np.prod(s)) for _, s, _ in M.iter_parameter_shapes(cfg))
    assert M.trainable_parameter_count(cfg, "full") == expected_full
    assert abs(M.trainable_parameter_count(cfg, "adapter-only") - 4.23e6) / 4.23e6 < 1e-3


def test_trainable_count_zero_adapter_dim_is_layernorm_only():
    cfg = ModelConfig.tiny(adapter_dim=0)
    ln_blocks = cfg.enc_layers * (cfg.enc_sa_per_tf + 1) + cfg.dec_layers * (cfg.dec_sa_per_tf + 1)
    assert M.trainable_parameter_count(cfg, "adapter-only") == ln_blocks * 2 * cfg.hidden_dim


def test_trainable_count_matches_enumeration():
    cfg = ModelConfig.tiny(hidden_dim=8, num_heads=2, ff_dim=12, adapter_dim=2,
                           enc_layers=2, dec_layers=1)
    store = ParameterStore.initialize(cfg, np.random.default_rng(0))
    assert M.trainable_parameter_count(cfg, "adapter-only") == sum(
        t.size for t in store.meta.values()
    )
    assert M.trainable_parameter_count(cfg, "full") == sum(
        t.size for t in store.all().values()
    )


def test_checkpoint_roundtrip_and_deterministic_bytes(tmp_path):
    cfg = ModelConfig.tiny()
    model = Summarizer.build(cfg, seed=3)
    path_a = tmp_path / "a.ckpt"
    path_b = tmp_path / "b.ckpt"
    M.save_checkpoint(path_a, model.store.all(), cfg, extra={"step": 7})
    M.save_checkpoint(path_b, model.store.all(), cfg, extra={"step": 7})
    assert M.checkpoint_hash(path_a) == M.checkpoint_hash(path_b)

    arrays, loaded_cfg, extra = M.load_checkpoint(path_a)
    assert loaded_cfg == cfg
    assert extra == {"step": 7}
    for name, tensor in model.store.all().items():
        assert np.array_equal(arrays[name], tensor.data)

    other = Summarizer.build(cfg, seed=99)
    other.store.load_arrays(arrays)
    src = np.array([[2, 8, 9, 3]])
    assert np.array_equal(other.encode(src).data, model.encode(src).data)


def test_dropout_rates_applied_only_with_rng(tiny_model):
    cfg = ModelConfig.tiny(enc_dropout=0.5, dec_dropout=0.5)
    model = Summarizer.build(cfg, seed=0)
    src = np.array([[2, 8, 9, 3]])
    silent = model.encode(src).data  # no rng: deterministic eval path
    assert np.array_equal(silent, model.encode(src).data)
    noisy = model.encode(src, train_rng=np.random.default_rng(0)).data
    assert not np.array_equal(silent, noisy)
