"""Shared fixtures: a tiny model configuration that keeps every structural
feature of the default one (both encoder/decoder depths, adapters, visual
projector) while making forward passes cheap."""

import dataclasses

import pytest

from zerommt import model as m

TINY = m.ModelConfig(
    vocab_size=16,
    d_model=8,
    n_heads=2,
    n_layers_enc=1,
    n_layers_dec=1,
    d_ffn=16,
    image_dim=4,
    adapter_reduction=4,
    max_len=10,
)


@pytest.fixture
def tiny_config():
    return dataclasses.replace(TINY)


@pytest.fixture
def tiny_params(tiny_config):
    return m.build_model(tiny_config, seed=0)
