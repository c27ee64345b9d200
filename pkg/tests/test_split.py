import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiersfl import nn, split
from hiersfl.errors import ContractViolation, InputError


@pytest.fixture
def mnist_stack():
    return nn.LayerStack.from_dims([784, 64, 32, 10])


def _batch(seed, rows=32, d=784, classes=10):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(rows, d)), rng.integers(0, classes, size=rows)


def test_cut_at_one_keeps_first_layer_on_client(mnist_stack):
    params = nn.init_params(mnist_stack, 0)
    client, server = split.split(mnist_stack, params, split.SplitSpec(1))
    assert client.params.shapes == (("dense", 784, 64),)
    assert len(client.params) + len(server.params) == len(params)
    assert split.join(client.params, server.params).equals(params)


@pytest.mark.parametrize("cut", [0, 3, -1])
def test_cut_index_out_of_range(mnist_stack, cut):
    with pytest.raises(InputError):
        split.split(mnist_stack, nn.init_params(mnist_stack, 0), split.SplitSpec(cut))


def test_zero_weight_client_gives_zero_smashed_data(mnist_stack):
    params = nn.ParamVector.zeros(mnist_stack.shapes)
    client, _ = split.split(mnist_stack, params, split.SplitSpec(1))
    x, y = _batch(0)
    smashed = split.client_forward(client, x, y)
    assert not np.any(smashed.activations)


def test_smashed_byte_size():
    smashed = split.SmashedData(0, np.zeros((32, 16)), np.zeros(32, dtype=int))
    assert smashed.byte_size == 32 * 16 * 8 + 32 * 8 == 4352
    assert split.smashed_bytes(32, 16) == 4352
    cut = split.CutGradient(0, np.zeros((32, 16)))
    assert cut.byte_size == 32 * 16 * 8


def test_smashed_rows_must_match_labels():
    with pytest.raises(ContractViolation):
        split.SmashedData(0, np.zeros((3, 2)), np.zeros(4, dtype=int))


def _split_vs_mono(stack, params, cut, x, y):
    acts, probs = nn.forward(stack, params, x)
    mono_loss = nn.loss_cross_entropy(probs, y)
    mono_grad = nn.backward(stack, params, acts, y)
    client, server = split.split(stack, params, split.SplitSpec(cut))
    smashed = split.client_forward(client, x, y)
    loss, cut_grad, s_grad = split.server_step(server, smashed)
    c_grad = split.client_backward(client, smashed, cut_grad)
    return loss, mono_loss, split.join(c_grad, s_grad).values, mono_grad.values, probs, server, smashed


@pytest.mark.parametrize("cut", [1, 2])
def test_split_pipeline_equals_monolithic(mnist_stack, cut):
    params = nn.init_params(mnist_stack, cut)
    x, y = _batch(cut)
    loss, mono_loss, g, mono_g, probs, server, smashed = _split_vs_mono(mnist_stack, params, cut, x, y)
    assert abs(loss - mono_loss) <= 1e-9
    assert np.max(np.abs(g - mono_g)) <= 1e-9
    # Forward composition matches too.
    _, server_probs = nn.forward(server.stack, server.params, smashed.activations)
    assert np.max(np.abs(server_probs - probs)) <= 1e-12
    assert loss == pytest.approx(nn.loss_cross_entropy(server_probs, y), abs=1e-15)


@given(seed=st.integers(0, 10_000), cut=st.integers(1, 3), rows=st.integers(1, 12))
@settings(max_examples=40, deadline=None)
def test_split_equivalence_property(seed, cut, rows):
    stack = nn.LayerStack.from_dims([9, 7, 6, 5, 4])
    params = nn.init_params(stack, seed)
    x, y = _batch(seed, rows, 9, 4)
    loss, mono_loss, g, mono_g, *_ = _split_vs_mono(stack, params, cut, x, y)
    assert abs(loss - mono_loss) <= 1e-9
    assert np.max(np.abs(g - mono_g)) <= 1e-9


def test_perfect_server_gives_zero_loss_and_cut_gradient():
    stack = nn.LayerStack.from_dims([3, 3, 3])
    w1 = np.eye(3)
    w2 = np.eye(3) * 80.0
    params = nn.ParamVector(np.concatenate([w1.ravel(), np.zeros(3), w2.ravel(), np.zeros(3)]), stack.shapes)
    client, server = split.split(stack, params, split.SplitSpec(1))
    smashed = split.client_forward(client, np.eye(3), [0, 1, 2])
    loss, cut_grad, s_grad = split.server_step(server, smashed)
    assert loss < 1e-12
    assert np.max(np.abs(cut_grad.gradient)) < 1e-30
    assert cut_grad.gradient.shape == smashed.activations.shape


def test_server_rejects_wrong_width(mnist_stack):
    _, server = split.split(mnist_stack, nn.init_params(mnist_stack, 0), split.SplitSpec(1))
    bad = split.SmashedData(0, np.zeros((2, 63)), np.zeros(2, dtype=int))
    with pytest.raises(ContractViolation):
        split.server_step(server, bad)


def test_client_forward_rejects_wrong_input(mnist_stack):
    client, _ = split.split(mnist_stack, nn.init_params(mnist_stack, 0), split.SplitSpec(1))
    with pytest.raises(ContractViolation):
        split.client_forward(client, np.zeros((2, 100)), [0, 1])
