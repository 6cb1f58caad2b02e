import numpy as np
import pytest

from tinylm.arch import ModelConfig
from tinylm.initializers import VARIANTS, InitScheme, initialize, specified_std


def wide_config(depth=4):
    # big enough matrices for tight sample statistics
    return ModelConfig(vocab_size=400, width=320, depth=depth, n_heads=4,
                       kv_groups=4, ffn_hidden=480)


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        InitScheme("xavier", 0.02, 0).validate()
    with pytest.raises(ValueError):
        InitScheme("constant", -0.1, 0).validate()


def test_same_seed_bit_identical():
    cfg = wide_config(depth=2)
    a = initialize(cfg, InitScheme("depth_adaptive", 0.02, seed=9))
    b = initialize(cfg, InitScheme("depth_adaptive", 0.02, seed=9))
    for name in a.tensors:
        assert np.array_equal(a[name].data, b[name].data), name


def test_different_seed_differs():
    cfg = wide_config(depth=1)
    a = initialize(cfg, InitScheme("constant", 0.02, seed=1))
    b = initialize(cfg, InitScheme("constant", 0.02, seed=2))
    assert not np.array_equal(a["embed"].data, b["embed"].data)


def test_constant_empirical_std_within_2_percent():
    cfg = wide_config(depth=1)
    sigma = 0.05
    store = initialize(cfg, InitScheme("constant", sigma, seed=0))
    w = store["layers.0.wq"].data  # 320*320 = 102400 entries
    assert w.size >= 1e5
    assert abs(w.std() - sigma) / sigma < 0.02


@pytest.mark.parametrize("variant", VARIANTS)
def test_empirical_std_matches_specification(variant):
    cfg = wide_config(depth=4)
    sigma = 0.02
    store = initialize(cfg, InitScheme(variant, sigma, seed=3))
    for name, t in store.tensors.items():
        if name.endswith("_norm"):
            assert np.array_equal(t.data, np.ones(t.shape))
            continue
        s = specified_std(InitScheme(variant, sigma, seed=3), cfg, name)
        if t.size >= 1e5:
            assert abs(t.data.std() - s) / s < 0.03, (variant, name)
        assert abs(t.data.mean()) < 3 * s / np.sqrt(t.size), (variant, name)


def test_gpt2_scaled_targets_residual_outputs():
    cfg = wide_config(depth=4)
    scheme = InitScheme("gpt2_scaled", 0.02, 0)
    scaled = 0.02 / 2.0  # sqrt(depth) = 2
    assert specified_std(scheme, cfg, "layers.1.wo") == pytest.approx(scaled)
    assert specified_std(scheme, cfg, "layers.1.wdown") == pytest.approx(scaled)
    for name in ("layers.1.wq", "layers.1.wk", "layers.1.wv", "layers.1.wgate",
                 "layers.1.wup", "embed", "head"):
        assert specified_std(scheme, cfg, name) == pytest.approx(0.02)


def test_internlm_scaled_targets_out_and_gate():
    cfg = wide_config(depth=4)
    scheme = InitScheme("internlm_scaled", 0.02, 0)
    scaled = 0.02 / 2.0
    assert specified_std(scheme, cfg, "layers.2.wo") == pytest.approx(scaled)
    assert specified_std(scheme, cfg, "layers.2.wgate") == pytest.approx(scaled)
    for name in ("layers.2.wq", "layers.2.wk", "layers.2.wv", "layers.2.wup",
                 "layers.2.wdown"):
        assert specified_std(scheme, cfg, name) == pytest.approx(0.02)


def test_depth_adaptive_endpoints():
    cfg = ModelConfig(vocab_size=300, width=8, depth=21, n_heads=2, kv_groups=2,
                      ffn_hidden=16)
    scheme = InitScheme("depth_adaptive", 0.02, 0)
    assert specified_std(scheme, cfg, "layers.0.wq") == pytest.approx(2**0.5 * 0.02)
    assert specified_std(scheme, cfg, "layers.20.wq") == pytest.approx(0.02)
    assert specified_std(scheme, cfg, "layers.0.wv") == pytest.approx(0.02 / 2**0.5)
    assert specified_std(scheme, cfg, "layers.20.wv") == pytest.approx(0.02)
    assert specified_std(scheme, cfg, "layers.7.wgate") == pytest.approx(0.02)


def test_depth_adaptive_monotone_specified_stds():
    cfg = wide_config(depth=6)
    scheme = InitScheme("depth_adaptive", 0.02, 0)
    qk = [specified_std(scheme, cfg, f"layers.{i}.wq") for i in range(6)]
    vo = [specified_std(scheme, cfg, f"layers.{i}.wo") for i in range(6)]
    assert all(a >= b for a, b in zip(qk, qk[1:]))
    assert all(a <= b for a, b in zip(vo, vo[1:]))


def test_depth_adaptive_single_layer_collapses_to_layer0():
    cfg = ModelConfig(vocab_size=300, width=8, depth=1, n_heads=2, kv_groups=2,
                      ffn_hidden=16)
    scheme = InitScheme("depth_adaptive", 0.02, 0)
    assert specified_std(scheme, cfg, "layers.0.wq") == pytest.approx(2**0.5 * 0.02)
    assert specified_std(scheme, cfg, "layers.0.wo") == pytest.approx(0.02 / 2**0.5)


def test_embedding_and_head_use_base_sigma():
    cfg = wide_config(depth=4)
    for variant in VARIANTS:
        scheme = InitScheme(variant, 0.03, 0)
        assert specified_std(scheme, cfg, "embed") == pytest.approx(0.03)
        assert specified_std(scheme, cfg, "head") == pytest.approx(0.03)


def test_store_validates_against_config():
    cfg = wide_config(depth=2)
    store = initialize(cfg, InitScheme("constant", 0.02, 0))
    store.validate(cfg)
