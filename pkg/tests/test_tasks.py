import numpy as np
import pytest

from aslora import tensor as T
from aslora.adapters import AdapterConfig
from aslora.errors import ContractError
from aslora.model import ModelConfig, Transformer
from aslora.optim import AdamW
from aslora.tasks import Dataset, TaskSpec, evaluate, generate
from aslora.tensor import Tensor


@pytest.mark.parametrize("kind", ["copy_class", "layerwise_probe", "seq_regression"])
def test_generation_is_deterministic(kind):
    spec = TaskSpec(kind=kind, num_train=64, num_eval=32, seed=3, seq_len=8)
    a, b = generate(spec), generate(spec)
    for x, y in ((a.train, b.train), (a.eval, b.eval)):
        assert x.tokens.tobytes() == y.tokens.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()
    c = generate(TaskSpec(kind=kind, num_train=64, num_eval=32, seed=4, seq_len=8))
    assert c.train.tokens.tobytes() != a.train.tokens.tobytes()


@pytest.mark.parametrize("kind", ["copy_class", "layerwise_probe"])
def test_labels_are_balanced(kind):
    data = generate(TaskSpec(kind=kind, num_train=1000, num_eval=0, num_classes=2))
    assert np.bincount(data.train.labels).tolist() == [500, 500]


def test_odd_count_balanced_within_one():
    data = generate(TaskSpec(kind="copy_class", num_train=301, num_eval=0, num_classes=3))
    counts = np.bincount(data.train.labels)
    assert counts.max() - counts.min() <= 1


def test_noise_preserves_class_counts():
    clean = generate(TaskSpec(num_train=400, num_eval=0, seed=1))
    noisy = generate(TaskSpec(num_train=400, num_eval=0, seed=1, noise_rate=0.2))
    assert np.bincount(noisy.train.labels).tolist() == [200, 200]
    flipped = (clean.train.labels != noisy.train.labels).mean()
    assert flipped == pytest.approx(0.2, abs=0.01)


def test_train_and_eval_are_disjoint():
    data = generate(TaskSpec(kind="seq_regression", vocab_size=3, seq_len=4, num_train=60, num_eval=60))
    seen = {r.tobytes() for r in data.train.tokens}
    assert not any(r.tobytes() in seen for r in data.eval.tokens)
    assert len(data.eval) < 60  # duplicates were dropped


def test_probe_labels_are_parity_of_planted_markers():
    spec = TaskSpec(kind="layerwise_probe", depth=3, num_train=200, num_eval=0, seq_len=10)
    data = generate(spec)
    for row, label in zip(data.train.tokens, data.train.labels):
        markers = sorted(t for t in row if t < 2 * spec.depth)
        assert len(markers) == spec.depth
        assert [m // 2 for m in markers] == [0, 1, 2]
        assert sum(m % 2 for m in markers) % 2 == label


def test_copy_class_marker_is_label():
    data = generate(TaskSpec(kind="copy_class", num_classes=4, num_train=100, num_eval=0, seq_len=6))
    for row, label in zip(data.train.tokens, data.train.labels):
        assert [t for t in row if t < 4] == [label]


def test_spec_validation():
    with pytest.raises(ContractError):
        TaskSpec(kind="parity")
    with pytest.raises(ContractError):
        TaskSpec(noise_rate=1.0)
    with pytest.raises(ContractError):
        TaskSpec(kind="layerwise_probe", depth=40, seq_len=32, vocab_size=100)


def test_linear_probe_on_token_counts_reaches_ceiling():
    """copy_class is solvable by a bag-of-tokens linear model."""
    spec = TaskSpec(kind="copy_class", num_classes=3, num_train=300, num_eval=0, seq_len=8, vocab_size=20)
    data = generate(spec)
    counts = np.zeros((300, spec.vocab_size))
    np.add.at(counts, (np.repeat(np.arange(300), spec.seq_len), data.train.tokens.reshape(-1)), 1.0)
    W = Tensor(np.zeros((spec.vocab_size, 3)), requires_grad=True)
    opt = AdamW()
    X = Tensor(counts)
    for _ in range(200):
        T.backward(T.cross_entropy(T.matmul(X, W), data.train.labels))
        opt.step({"W": W}, 0.1)
    acc = (T.matmul(X, W).data.argmax(1) == data.train.labels).mean()
    assert acc == 1.0


def _tiny_model(head="classification"):
    mcfg = ModelConfig(num_layers=2, model_dim=16, num_heads=2, ffn_dim=32, vocab_size=16, max_seq_len=8,
                       task_head=head)
    return Transformer(mcfg, AdapterConfig(rank=2, alpha=4.0, num_layers=2, model_dim=16, mode="shared_a"), 0)


def test_untrained_accuracy_is_chance():
    model = _tiny_model()
    data = generate(TaskSpec(kind="layerwise_probe", num_train=1000, num_eval=0, seq_len=8, vocab_size=16))
    m = evaluate(model, data.train)
    assert m["accuracy"] == pytest.approx(0.5, abs=0.05)
    assert len(T.TAPE) == 0


def _fit(model, ds, steps, lr):
    opt = AdamW()
    for _ in range(steps):
        T.reset_tape()
        T.backward(model.loss(ds.tokens, ds.labels))
        opt.step(model.named_trainables(), lr)


def test_micro_set_is_memorized():
    data = generate(TaskSpec(kind="layerwise_probe", num_train=8, num_eval=0, seq_len=8, vocab_size=16))
    model = _tiny_model()
    _fit(model, data.train, 150, 0.05)
    assert evaluate(model, data.train)["accuracy"] == 1.0


def test_constant_regression_target_is_learned():
    data = generate(TaskSpec(kind="seq_regression", num_train=32, num_eval=0, seq_len=8, vocab_size=16))
    ds = Dataset(data.train.tokens, np.full(32, 0.7))
    model = _tiny_model("regression")
    _fit(model, ds, 200, 0.02)
    assert evaluate(model, ds)["mse"] < 1e-3


def test_evaluate_empty_dataset():
    model = _tiny_model()
    assert evaluate(model, Dataset(np.zeros((0, 8), np.int64), np.zeros(0, np.int64))) == {}
