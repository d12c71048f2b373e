import numpy as np
import pytest
import torch

from modetreg.fieldops import compose, upsample2
from modetreg.netcore import ParameterStore
from modetreg.pyramid import (MICRO_CONFIG, ModelConfig, count_parameters, describe, init_model,
                              register)
from modetreg.synthbench import generate_pair

DEFAULT_PARAMETER_COUNT = 940566


@pytest.fixture(scope="module")
def default_store():
    return init_model(ModelConfig(), seed=0)


@pytest.fixture(scope="module")
def pair32():
    return generate_pair((32, 32, 32), seed=21)


def test_config_validation():
    with pytest.raises(ValueError, match="5 head"):
        ModelConfig(heads=(8, 4, 2, 1))
    with pytest.raises(ValueError, match="non-increasing"):
        ModelConfig(heads=(2, 4, 2, 1, 1))
    with pytest.raises(ValueError, match="single head"):
        ModelConfig(heads=(8, 4, 2, 2, 1))
    with pytest.raises(ValueError, match="odd"):
        ModelConfig(neighborhood=4)
    cfg = ModelConfig()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert [cfg.heads_at(k) for k in (5, 4, 3, 2, 1)] == [8, 4, 2, 1, 1]


def test_parameter_count_pinned(default_store):
    assert count_parameters(default_store) == DEFAULT_PARAMETER_COUNT
    assert count_parameters(ParameterStore()) == 0


def test_cwm_only_on_multi_head_levels(default_store):
    names = default_store.names()
    assert {n.split(".")[0] for n in names if n.startswith("cwm")} == {"cwm5", "cwm4", "cwm3"}
    micro = init_model(MICRO_CONFIG)
    assert {n.split(".")[0] for n in micro.names() if n.startswith("cwm")} == {"cwm5", "cwm4"}


def test_describe_lists_levels():
    text = describe(ModelConfig())
    lines = text.splitlines()
    assert len(lines) == 6
    for line, (level, heads) in zip(lines[1:], [(5, 8), (4, 4), (3, 2), (2, 1), (1, 1)]):
        assert f"level {level}:" in line and f"{heads} head" in line


def test_trace_shapes(default_store, pair32):
    with torch.no_grad():
        out = register(pair32.fixed, pair32.moving, default_store)
    assert out.phi.shape == (3, 32, 32, 32)
    assert out.warped.shape == (1, 32, 32, 32)
    assert [t.level for t in out.trace] == [5, 4, 3, 2, 1]
    assert [tuple(t.field.shape[1:]) for t in out.trace] == [(4,) * 3, (8,) * 3, (16,) * 3, (16,) * 3, (32,) * 3]
    assert [t.subfields.shape[0] for t in out.trace] == [8, 4, 2, 1, 1]
    assert [None if t.weights is None else t.weights.shape[0] for t in out.trace] == [8, 4, 2, None, None]


def test_total_field_rebuilt_from_trace(default_store, pair32):
    torch.manual_seed(0)
    store = init_model(ModelConfig(), seed=1)
    with torch.no_grad():
        for name, t in store.items():
            if name.endswith("proj.weight"):
                t.normal_(0, 0.05)
        out = register(pair32.fixed, pair32.moving, store)
        fields = [t.field.double() for t in out.trace]
        phi = fields[0]
        phi = compose(upsample2(phi), fields[1])
        phi = compose(upsample2(phi), fields[2])
        phi = upsample2(compose(phi, fields[3]))
        phi = compose(phi, fields[4])
    assert torch.allclose(phi.float(), out.phi, atol=1e-5)
    assert out.phi.abs().max() > 1e-2


def test_identity_at_init(default_store):
    for seed in range(3):
        p = generate_pair((32, 32, 32), seed=100 + seed)
        with torch.no_grad():
            out = register(p.fixed, p.moving, default_store)
        assert out.phi.abs().max().item() <= 1e-2
        assert (out.warped - torch.from_numpy(p.moving.data.copy())).abs().max().item() <= 1e-3


def test_determinism(pair32):
    a = register(pair32.fixed, pair32.moving, init_model(seed=4))
    b = register(pair32.fixed, pair32.moving, init_model(seed=4))
    assert a.phi.detach().numpy().tobytes() == b.phi.detach().numpy().tobytes()


def test_shape_errors(default_store):
    with pytest.raises(ValueError, match="differ"):
        register(np.zeros((32, 32, 32)), np.zeros((32, 32, 16)), default_store)
    with pytest.raises(ValueError, match="divisible by 16"):
        register(np.zeros((24, 24, 24)), np.zeros((24, 24, 24)), default_store)
