import numpy as np
import pytest

from aslora import tensor as T
from aslora.adapters import AdapterConfig, apply_merge, trainable_param_count
from aslora.errors import ContractError, InputError
from aslora.model import ModelConfig, Transformer


def make(mode="aslora", L=4, d=16, alpha=8.0, share_n=1, seed=0, head="classification", **kw):
    mcfg = ModelConfig(num_layers=L, model_dim=d, num_heads=2, ffn_dim=32, vocab_size=20, max_seq_len=8,
                       task_head=head, **kw)
    acfg = AdapterConfig(rank=2, alpha=alpha, num_layers=L, model_dim=d, mode=mode, share_n=share_n)
    return Transformer(mcfg, acfg, seed)


def ids(rng, B=3, S=6, V=20):
    return rng.integers(0, V, size=(B, S))


def randomize_b(model, rng):
    for bank in model.banks.values():
        for g in bank.groups.values():
            g.B.data[:] = rng.normal(size=g.B.shape)


def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(model_dim=10, num_heads=4)
    with pytest.raises(ContractError):
        ModelConfig(task_head="ranking")
    with pytest.raises(ContractError):
        Transformer(ModelConfig(num_layers=2), AdapterConfig(rank=2, alpha=1.0, num_layers=3, model_dim=64), 0)


@pytest.mark.parametrize("mode", ["lora", "shared_a", "fixed_share", "aslora"])
def test_zero_init_equals_base_forward(mode, rng):
    model = make(mode=mode, share_n=2)
    x = ids(rng)
    np.testing.assert_array_equal(model.forward(x).data, model.base_forward(x).data)


def test_alpha_zero_is_base_model_for_any_b(rng):
    model = make(alpha=0.0)
    randomize_b(model, rng)
    x = ids(rng)
    np.testing.assert_array_equal(model.forward(x).data, model.base_forward(x).data)


def test_nonzero_b_changes_output(rng):
    model = make()
    randomize_b(model, rng)
    x = ids(rng)
    assert not np.allclose(model.forward(x).data, model.base_forward(x).data)


def test_batch_invariance(rng):
    model = make()
    randomize_b(model, rng)
    x = ids(rng, B=5)
    full = model.forward(x).data
    rows = np.concatenate([model.forward(x[i:i + 1]).data for i in range(5)])
    np.testing.assert_allclose(full, rows, atol=1e-5)


def test_input_errors():
    model = make()
    with pytest.raises(InputError):
        model.forward(np.zeros((1, 9), dtype=np.int64))
    with pytest.raises(InputError):
        model.forward(np.array([[0, 20]]))
    with pytest.raises(InputError):
        model.forward(np.array([[-1, 0]]))
    with pytest.raises(InputError):
        model.forward(np.array([[0.5, 1.0]]))


def test_one_dimensional_ids_are_a_batch_of_one(rng):
    model = make()
    x = ids(rng, B=1)
    np.testing.assert_array_equal(model.forward(x[0]).data, model.forward(x).data)


def test_merged_layers_share_delta_weight(rng):
    model = make()
    randomize_b(model, rng)
    apply_merge(model.banks["query"], 1, 3)
    np.testing.assert_array_equal(model.delta_weight("query", 1), model.delta_weight("query", 3))
    assert not np.array_equal(model.delta_weight("value", 1), model.delta_weight("value", 3))


def _adapter_tensors(model):
    return [n for n in model.named_trainables() if not n.startswith("head.")]


def test_trainable_lists_per_mode():
    lora = make(mode="lora", L=12)
    assert len(_adapter_tensors(lora)) == 48
    assert list(lora.named_trainables())[-2:] == ["head.W", "head.b"]
    shared = make(mode="shared_a", L=12)
    assert len(_adapter_tensors(shared)) == 2 + 24
    aslora = make(mode="aslora", L=12)
    for bank in aslora.banks.values():
        for _ in range(7):
            gids = sorted(bank.groups)
            apply_merge(bank, gids[0], gids[1])
    names = _adapter_tensors(aslora)
    assert sum(".A" in n for n in names) == 2 and sum(".B." in n for n in names) == 10
    assert aslora.adapter_param_count() == trainable_param_count(aslora.adapter_cfg, 7)


def test_trainables_exclude_base():
    model = make()
    trainable = {id(p) for p in model.trainable_parameters()}
    assert not any(id(p) in trainable for p in model.base.values())
    assert all(p.requires_grad for p in model.trainable_parameters())
    assert not any(p.requires_grad for p in model.base.values())


def test_backward_does_not_touch_base(rng):
    model = make()
    before = model.base_fingerprint()
    T.backward(model.loss(ids(rng), np.array([0, 1, 0])))
    assert all(p.grad is None for p in model.base.values())
    assert model.base_fingerprint() == before


def test_same_seed_same_weights():
    a, b = make(seed=5), make(seed=5)
    assert a.base_fingerprint() == b.base_fingerprint()
    assert a.base_fingerprint() != make(seed=6).base_fingerprint()


def test_regression_head_shape(rng):
    model = make(head="regression")
    out = model.forward(ids(rng))
    assert out.shape == (3,)
    loss = model.loss(ids(rng), np.zeros(3))
    assert loss.shape == ()


def test_float64_model(rng):
    with T.precision(np.float64):
        model = make()
        out = model.forward(ids(rng))
    assert out.dtype == np.float64
