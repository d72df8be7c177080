"""Optimizer correctness against a scalar Adam oracle, freezing
enforcement, batching, checkpoint selection, and the log format."""

import dataclasses
import math

import numpy as np
import pytest

from zerommt import autodiff as ad
from zerommt import model as m
from zerommt import synthcorpus as sc
from zerommt import training as tr
from zerommt.training import (
    AdamState,
    Checkpoint,
    FreezingViolation,
    PretrainConfig,
    TrainConfig,
    TrainData,
)


def _scalar_params(tiny_config, value=1.0, trainable=True):
    t = ad.Tensor(np.array([value]), requires_grad=trainable)
    return m.ModelParams(
        config=tiny_config, tensors={"x": t}, is_extra={"x": trainable}
    )


# ---------------------------------------------------------------------------
# Adam


def test_adam_matches_scalar_oracle(tiny_config):
    """Three updates on one scalar parameter, checked against a hand-rolled
    bias-corrected Adam."""
    config = TrainConfig(lr=0.1, beta1=0.9, beta2=0.99, eps_adam=1e-8)
    params = _scalar_params(tiny_config, value=1.0)
    state = AdamState()
    x = 1.0
    mm = vv = 0.0
    for t, g in enumerate([0.5, -1.5, 2.0], start=1):
        tr.adam_step(params, {"x": np.array([g])}, state, config)
        mm = 0.9 * mm + 0.1 * g
        vv = 0.99 * vv + 0.01 * g * g
        m_hat = mm / (1 - 0.9**t)
        v_hat = vv / (1 - 0.99**t)
        x = x - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert abs(params.tensors["x"].data[0] - x) < 1e-12, t
    assert state.step == 3


def test_adam_rejects_gradient_for_frozen_tensor(tiny_config):
    params = _scalar_params(tiny_config, trainable=False)
    with pytest.raises(FreezingViolation):
        tr.adam_step(params, {"x": np.array([1.0])}, AdamState(), TrainConfig())


def test_adam_skips_params_without_gradient(tiny_config):
    params = _scalar_params(tiny_config, value=2.0)
    tr.adam_step(params, {}, AdamState(), TrainConfig())
    assert params.tensors["x"].data[0] == 2.0


def test_train_config_validation():
    for bad in (
        dict(lr=0.0),
        dict(beta1=1.0),
        dict(batch_size=0),
        dict(mode="nope"),
    ):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    TrainConfig().validate()


# ---------------------------------------------------------------------------
# batching


def test_batches_cover_each_epoch_exactly_once():
    gen = tr._batches(6, 3, 4, np.random.default_rng(0))
    batches = list(gen)
    assert len(batches) == 4
    assert sorted(batches[0] + batches[1]) == list(range(6))
    assert sorted(batches[2] + batches[3]) == list(range(6))


def test_batches_deterministic_in_rng():
    a = list(tr._batches(10, 4, 7, np.random.default_rng(5)))
    b = list(tr._batches(10, 4, 7, np.random.default_rng(5)))
    assert a == b


# ---------------------------------------------------------------------------
# checkpoint selection


def _cp(step, acc, bleu):
    return Checkpoint(step=step, extras={}, contrastive_acc=acc, bleu=bleu)


def test_select_model_balances_both_metrics():
    # second checkpoint wins 0.5*1.0 + 0.5*1.0; others are dominated
    cps = [_cp(1, 50.0, 90.0), _cp(2, 70.0, 95.0), _cp(3, 60.0, 92.0)]
    assert tr.select_model(cps).step == 2


def test_select_model_tie_goes_to_earliest():
    cps = [_cp(1, 60.0, 90.0), _cp(2, 60.0, 90.0), _cp(3, 60.0, 90.0)]
    assert tr.select_model(cps).step == 1


def test_select_model_mixed_tradeoff():
    # normalized scores: a -> 0.5*1 + 0.5*0 = 0.5, b -> 0.5*0 + 0.5*1 = 0.5
    cps = [_cp(1, 70.0, 80.0), _cp(2, 50.0, 100.0)]
    assert tr.select_model(cps).step == 1


def test_select_model_rejects_empty():
    with pytest.raises(ValueError):
        tr.select_model([])


# ---------------------------------------------------------------------------
# log format


def test_log_rows_to_csv_layout():
    rows = [
        {"step": 1, "vmlm": 0.5, "kl": 0.25, "total": 0.525,
         "val_contrastive": "", "val_bleu": ""},
        {"step": 2, "vmlm": 0.4, "kl": 0.2, "total": 0.42,
         "val_contrastive": 62.5, "val_bleu": 88.0},
    ]
    text = tr.log_rows_to_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "step,vmlm,kl,total,val_contrastive,val_bleu"
    assert lines[1] == "1,0.5,0.25,0.525,,"
    assert lines[2] == "2,0.4,0.2,0.42,62.5,88.0"
    assert text.endswith("\n")


# ---------------------------------------------------------------------------
# end-to-end on a miniature world


@pytest.fixture(scope="module")
def mini_world():
    spec = sc.WorldSpec(
        n_plain_words=3, n_ambiguous_words=1, sent_len_min=2, sent_len_max=3,
        image_dim=4, seed=0,
    )
    world = sc.generate_world(spec, vocab_budget=16)
    sizes = sc.SplitSizes(
        pretrain_parallel=24, mmt_train=12, val_contrastive=2,
        val_translation=2, test_contrastive=2, test_translation=2,
    )
    return world, sc.generate_splits(world, sizes)


@pytest.fixture(scope="module")
def mini_base(mini_world):
    from conftest import TINY

    _, splits = mini_world
    config = dataclasses.replace(TINY)
    return tr.pretrain_base(
        splits.pretrain_parallel, config,
        PretrainConfig(max_steps=10, batch_size=8),
    )


def _mini_train_config(**overrides):
    defaults = dict(max_steps=6, batch_size=8, eval_every=3, lr=1e-3)
    defaults.update(overrides)
    return TrainConfig(**defaults)


def test_pretrain_freezes_base(mini_base):
    assert mini_base.trainable_names() == mini_base.extra_names()
    for name in mini_base.base_names():
        assert not mini_base.tensors[name].requires_grad


def test_train_runs_all_modes_without_touching_base(mini_world, mini_base):
    _, splits = mini_world
    data = TrainData(
        mmt_train=splits.mmt_train,
        val_contrastive=splits.val_contrastive,
        val_translation=splits.val_translation,
    )
    before = mini_base.base_bytes()
    for mode in tr.TRAIN_MODES:
        result = tr.train(_mini_train_config(mode=mode), data, mini_base)
        assert len(result.log_rows) == 6
        assert [cp.step for cp in result.checkpoints] == [3, 6]
        assert result.best in result.checkpoints
        assert result.params.base_bytes() == before
        kl_col = [r["kl"] for r in result.log_rows]
        vmlm_col = [r["vmlm"] for r in result.log_rows]
        if mode == "no_kl":
            assert all(v == 0.0 for v in kl_col)
        if mode == "no_vmlm":
            assert all(v == 0.0 for v in vmlm_col)
    assert mini_base.base_bytes() == before


def test_train_is_deterministic(mini_world, mini_base):
    _, splits = mini_world
    data = TrainData(
        mmt_train=splits.mmt_train,
        val_contrastive=splits.val_contrastive,
        val_translation=splits.val_translation,
    )
    a = tr.train(_mini_train_config(), data, mini_base)
    b = tr.train(_mini_train_config(), data, mini_base)
    assert tr.log_rows_to_csv(a.log_rows) == tr.log_rows_to_csv(b.log_rows)
    for name in a.params.extra_names():
        assert np.array_equal(
            a.params.tensors[name].data, b.params.tensors[name].data
        )


def test_train_rejects_empty_corpus(mini_base):
    data = TrainData(mmt_train=[], val_contrastive=[], val_translation=[])
    with pytest.raises(ValueError):
        tr.train(TrainConfig(), data, mini_base)


def test_clone_params_is_independent(mini_base):
    clone = tr.clone_params(mini_base)
    clone.tensors["embed"].data = clone.tensors["embed"].data + 1.0
    assert not np.array_equal(
        clone.tensors["embed"].data, mini_base.tensors["embed"].data
    )
