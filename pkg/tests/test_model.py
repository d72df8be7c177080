"""Model structure: parameter bookkeeping, pass-through initialization,
attention masking, source masking, and the checkpoint format."""

import dataclasses

import numpy as np
import pytest

from zerommt import autodiff as ad
from zerommt import model as m


def _example(params, src=(5, 6, 7), image=True):
    rng = np.random.default_rng(0)
    img = rng.standard_normal(params.config.image_dim) if image else None
    return list(src), img


# ---------------------------------------------------------------------------
# configuration and parameter store


def test_config_validation_errors():
    with pytest.raises(ValueError):
        m.ModelConfig(vocab_size=4).validate()
    with pytest.raises(ValueError):
        m.ModelConfig(d_model=10, n_heads=4).validate()
    with pytest.raises(ValueError):
        m.ModelConfig(d_model=8, n_heads=2, adapter_reduction=16).validate()
    with pytest.raises(ValueError):
        m.ModelConfig(n_layers_enc=0).validate()


def test_default_trainable_scalar_count():
    # 10 adapters x (64*8 + 8 + 8*64 + 64) + projector (16*64 + 64) = 12048
    params = m.build_model(m.ModelConfig(), seed=0)
    assert params.n_trainable_scalars() == 12048


def test_freeze_partitions_trainables(tiny_params):
    names = set(tiny_params.tensors)
    trainable = set(tiny_params.trainable_names())
    assert trainable == set(tiny_params.extra_names())
    assert trainable.isdisjoint(tiny_params.base_names())
    assert set(tiny_params.base_names()) | trainable == names


def test_adapter_up_projections_start_at_zero(tiny_params):
    for name in tiny_params.extra_names():
        if name.endswith(("up_w", "up_b")):
            assert np.all(tiny_params.tensors[name].data == 0.0)
    assert np.any(tiny_params.tensors["proj.w"].data != 0.0)


def test_build_model_deterministic(tiny_config):
    a = m.build_model(tiny_config, seed=3)
    b = m.build_model(dataclasses.replace(tiny_config), seed=3)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name].data, b.tensors[name].data)


def test_reinit_extras_is_deterministic_and_restores_passthrough(tiny_config):
    a = m.build_model(tiny_config, seed=0)
    b = m.build_model(tiny_config, seed=0)
    m.randomize_extras(a, seed=4)
    m.randomize_extras(b, seed=8)
    m.reinit_extras(a, seed=5)
    m.reinit_extras(b, seed=5)
    for name in a.extra_names():
        assert np.array_equal(a.tensors[name].data, b.tensors[name].data), name
        if name.endswith(("up_w", "up_b")):
            assert np.all(a.tensors[name].data == 0.0), name


def test_copy_load_extras_roundtrip(tiny_params):
    snap = tiny_params.copy_extras()
    m.randomize_extras(tiny_params, seed=9)
    tiny_params.load_extras(snap)
    for name, arr in snap.items():
        assert np.array_equal(tiny_params.tensors[name].data, arr)


# ---------------------------------------------------------------------------
# forward-pass behavior


def test_fresh_extras_are_exact_passthrough(tiny_params):
    """Zero adapter up-projections: extras change nothing without an image."""
    src, _ = _example(tiny_params, image=False)
    enc_base = m.encode(src, None, tiny_params, use_extras=False)
    enc_mm = m.encode(src, None, tiny_params, use_extras=True)
    assert np.array_equal(enc_base.states.data, enc_mm.states.data)
    prefix = [m.BOS, 5]
    p_base = m.decode_step(enc_base, prefix, tiny_params, use_extras=False)
    p_mm = m.decode_step(enc_mm, prefix, tiny_params, use_extras=True)
    assert np.array_equal(p_base, p_mm)


def test_visual_token_changes_encoder_output(tiny_params):
    m.randomize_extras(tiny_params, seed=1)
    src, img = _example(tiny_params)
    with_img = m.encode(src, img, tiny_params)
    without = m.encode(src, None, tiny_params)
    assert with_img.states.shape[1] == without.states.shape[1] + 1
    assert with_img.has_image and not without.has_image


def test_cross_attention_never_sees_visual_position(tiny_params):
    m.randomize_extras(tiny_params, seed=2)
    src, img = _example(tiny_params)
    enc = m.encode(src, img, tiny_params)
    assert not enc.text_valid[0, 0]
    assert enc.self_valid[0, 0]
    sink = {}
    m.decode_step(enc, [m.BOS, 5, 6], tiny_params, attn_sink=sink)
    cross = [sink[k] for k in sink if ".cross" in k]
    assert cross
    for probs in cross:
        assert np.all(probs[..., 0] == 0.0)
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


def test_decoder_self_attention_is_causal(tiny_params):
    src, img = _example(tiny_params)
    sink = {}
    enc = m.encode(src, img, tiny_params)
    m.decode_step(enc, [m.BOS, 5, 6, 7], tiny_params, attn_sink=sink)
    self_probs = [sink[k] for k in sink if ".self" in k]
    assert self_probs
    for probs in self_probs:
        t = probs.shape[-1]
        upper = np.triu_indices(t, k=1)
        assert np.all(probs[0, :, upper[0], upper[1]] == 0.0)


def test_encode_input_validation(tiny_params):
    with pytest.raises(ValueError):
        m.encode([], None, tiny_params)
    with pytest.raises(ValueError):
        m.encode([tiny_params.config.vocab_size], None, tiny_params)
    too_long = [5] * (tiny_params.config.max_len + 1)
    with pytest.raises(ValueError):
        m.encode(too_long, None, tiny_params)


def test_decode_step_requires_bos(tiny_params):
    enc = m.encode([5, 6], None, tiny_params)
    with pytest.raises(ValueError):
        m.decode_step(enc, [5, 6], tiny_params)


def test_decode_step_returns_distribution(tiny_params):
    enc = m.encode([5, 6], None, tiny_params)
    probs = m.decode_step(enc, [m.BOS], tiny_params)
    assert probs.shape == (tiny_params.config.vocab_size,)
    assert abs(probs.sum() - 1.0) < 1e-12
    assert np.all(probs >= 0.0)


def test_project_image_checks_dimension(tiny_params):
    with pytest.raises(ValueError):
        m.project_image(np.zeros(tiny_params.config.image_dim + 1), tiny_params)


# ---------------------------------------------------------------------------
# source masking


def test_apply_source_mask_count_rounds_half_up():
    rng = np.random.default_rng(0)
    for n, rate, want in [(4, 0.25, 1), (6, 0.25, 2), (5, 0.5, 3), (3, 0.1, 1)]:
        masked, chosen = m.apply_source_mask(list(range(10, 10 + n)), rate, rng)
        assert len(chosen) == want, (n, rate)
        assert all(masked[j] == m.MASK for j in chosen)
        assert all(masked[j] != m.MASK for j in range(n) if j not in chosen)


def test_apply_source_mask_edge_rates():
    rng = np.random.default_rng(1)
    src = [5, 6, 7, 8]
    assert m.apply_source_mask(src, 0.0, rng) == (src, ())
    masked, chosen = m.apply_source_mask(src, 1.0, rng)
    assert masked == [m.MASK] * 4 and chosen == (0, 1, 2, 3)
    with pytest.raises(ValueError):
        m.apply_source_mask(src, 1.5, rng)


def test_apply_source_mask_deterministic_in_rng():
    a = m.apply_source_mask([5, 6, 7, 8, 9], 0.4, np.random.default_rng(7))
    b = m.apply_source_mask([5, 6, 7, 8, 9], 0.4, np.random.default_rng(7))
    assert a == b


# ---------------------------------------------------------------------------
# checkpoint format


def test_checkpoint_roundtrip_bit_exact(tiny_params, tmp_path):
    m.randomize_extras(tiny_params, seed=4)
    path = tmp_path / "model.ckpt"
    m.save_checkpoint(path, tiny_params, meta={"stage": "test"})
    loaded, meta = m.load_checkpoint(path)
    assert meta == {"stage": "test"}
    assert loaded.config == tiny_params.config
    assert set(loaded.tensors) == set(tiny_params.tensors)
    for name, t in tiny_params.tensors.items():
        assert np.array_equal(loaded.tensors[name].data, t.data), name
        assert loaded.tensors[name].requires_grad == t.requires_grad
        assert loaded.is_extra[name] == tiny_params.is_extra[name]


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        m.load_checkpoint(path)


def test_base_bytes_tracks_only_base(tiny_params):
    before = tiny_params.base_bytes()
    m.randomize_extras(tiny_params, seed=6)
    assert tiny_params.base_bytes() == before
    tiny_params.tensors["embed"].data = tiny_params.tensors["embed"].data + 1.0
    assert tiny_params.base_bytes() != before
