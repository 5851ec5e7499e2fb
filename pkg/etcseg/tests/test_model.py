import numpy as np
import pytest

from etcseg.autodiff import Tensor, grad_check, no_grad, ops
from etcseg.errors import ConfigError, DimensionError, FormatError
from etcseg.services.model_service import (
    BRANCHES,
    TriBranchNet,
    architecture,
    decode_weights,
    encode_weights,
)
from etcseg.tests.conftest import TINY_WIDTHS


@pytest.fixture
def image(rng):
    return rng.normal(size=(2, 1, 8, 12))


def test_forward_shapes_and_nonnegative_evidence(tiny_net, image):
    fields = tiny_net(image)
    assert len(fields) == len(BRANCHES)
    for field in fields:
        assert field.e.shape == (2, 3, 8, 12)
        assert np.all(field.e.data >= 0)
        assert field.num_classes == 3


def test_untrained_heads_start_with_little_evidence(tiny_net, image):
    with no_grad():
        fields = tiny_net(image)
    # softplus(-2) ~ 0.127; weights are scaled down so logits stay near the bias
    for field in fields:
        assert field.e.data.mean() < 0.5


def test_branches_disagree_at_init(tiny_net, image):
    with no_grad():
        ecb, epb, efb = tiny_net(image)
    assert not np.allclose(ecb.e.data, epb.e.data)
    assert not np.allclose(epb.e.data, efb.e.data)


@pytest.mark.parametrize('shape', [(1, 1, 10, 8), (1, 2, 8, 8), (1, 8, 8)])
def test_bad_input_shapes(tiny_net, shape):
    with pytest.raises(DimensionError):
        tiny_net(np.zeros(shape))


def test_non_finite_input(tiny_net):
    x = np.zeros((1, 1, 8, 8))
    x[0, 0, 3, 3] = np.nan
    with pytest.raises(DimensionError):
        tiny_net(x)


def test_seed_determinism():
    a = TriBranchNet.initialize(seed=11, num_classes=2, widths=TINY_WIDTHS)
    b = TriBranchNet.initialize(seed=11, num_classes=2, widths=TINY_WIDTHS)
    c = TriBranchNet.initialize(seed=12, num_classes=2, widths=TINY_WIDTHS)
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()


def test_param_count_matches_architecture(tiny_net):
    expected = sum(int(np.prod(shape)) for _, shape in architecture(3, TINY_WIDTHS))
    assert tiny_net.param_count == expected
    assert [name for name, _ in tiny_net.named_parameters()] == [name for name, _ in architecture(3, TINY_WIDTHS)]


def test_upsampling_styles_shape_the_parameters():
    names = dict(architecture(3, TINY_WIDTHS))
    assert names['ecb.up2.weight'] == (4, 3, 2, 2)
    assert names['epb.up2.weight'] == (3, 4, 3, 3)
    assert names['efb.up1.weight'] == (2, 3, 3, 3)


def test_head_bias_init(tiny_net):
    for branch in BRANCHES:
        np.testing.assert_array_equal(tiny_net.params[f'{branch}.head.bias'].data, -2.0)


def test_invalid_architecture():
    with pytest.raises(ConfigError):
        TriBranchNet.initialize(seed=0, num_classes=1, widths=TINY_WIDTHS)
    with pytest.raises(ConfigError):
        TriBranchNet.initialize(seed=0, num_classes=3, widths=(2, 3))


def test_save_load_round_trip(tiny_net, tmp_path, image):
    path = tmp_path / 'w.etcw'
    tiny_net.save(path)
    loaded = TriBranchNet.load(path)
    assert loaded.checksum() == tiny_net.checksum()
    assert (loaded.num_classes, loaded.widths) == (3, TINY_WIDTHS)
    with no_grad():
        np.testing.assert_array_equal(loaded(image)[2].e.data, tiny_net(image)[2].e.data)


def test_copy_is_frozen_snapshot(tiny_net):
    snapshot = tiny_net.copy()
    assert snapshot.checksum() == tiny_net.checksum()
    assert not any(p.requires_grad for p in snapshot.parameters())
    tiny_net.params['ecb.head.bias'].data += 1.0
    assert snapshot.checksum() != tiny_net.checksum()


def test_load_arrays(tiny_net):
    other = TriBranchNet.initialize(seed=99, num_classes=3, widths=TINY_WIDTHS)
    other.load_arrays(tiny_net.state_arrays())
    assert other.checksum() == tiny_net.checksum()


class TestWeightFormat:
    def _payload(self, net):
        return encode_weights(net.num_classes, net.widths, net.state_arrays())

    def test_bad_header(self, tiny_net):
        payload = self._payload(tiny_net).replace(b'etcseg-weights', b'other-weights', 1)
        with pytest.raises(FormatError):
            decode_weights(payload)

    def test_missing_manifest(self):
        with pytest.raises(FormatError):
            decode_weights(b'etcseg-weights 1 K=3 widths=2,3,4')

    def test_truncated(self, tiny_net):
        with pytest.raises(FormatError):
            decode_weights(self._payload(tiny_net)[:-5])

    def test_trailing_bytes(self, tiny_net):
        with pytest.raises(FormatError):
            decode_weights(self._payload(tiny_net) + b'\x00\x00')

    def test_architecture_mismatch(self, tiny_net):
        payload = self._payload(tiny_net).replace(b'K=3', b'K=4', 1)
        with pytest.raises(FormatError):
            decode_weights(payload)

    def test_unknown_parameter(self, tiny_net):
        payload = self._payload(tiny_net).replace(b'encoder.enc1a.bias', b'encoder.extra.bias', 1)
        with pytest.raises(FormatError):
            decode_weights(payload)


def test_every_parameter_receives_gradient(tiny_net, image):
    fields = tiny_net(image)
    loss = ops.add(ops.add(ops.sum(fields[0].e), ops.sum(fields[1].e)), ops.sum(fields[2].e))
    loss.backward()
    for name, p in tiny_net.named_parameters():
        assert p.grad is not None and p.grad.shape == p.shape, name


@pytest.mark.parametrize('branch', BRANCHES)
def test_head_gradient_matches_finite_differences(tiny_net, rng, branch):
    x = rng.normal(size=(1, 1, 4, 4))
    index = BRANCHES.index(branch)
    weights = Tensor(rng.normal(size=(1, 3, 4, 4)))
    params = [tiny_net.params[f'{branch}.head.weight'], tiny_net.params[f'{branch}.head.bias']]

    def f(*_):
        return ops.sum(ops.mul(tiny_net(x)[index].e, weights))

    assert grad_check(f, params) < 1e-4


@pytest.mark.parametrize('branch', BRANCHES)
def test_encoder_receives_gradient_from_each_branch(tiny_net, image, branch):
    fields = tiny_net(image)
    ops.sum(fields[BRANCHES.index(branch)].e).backward()
    assert np.any(tiny_net.params['encoder.enc1a.weight'].grad != 0)
    other = next(b for b in BRANCHES if b != branch)
    assert tiny_net.params[f'{other}.head.weight'].grad is None


def test_network_gradient_matches_finite_differences(tiny_net, rng):
    x = rng.normal(size=(1, 1, 8, 8))
    readouts = [Tensor(rng.normal(size=(1, 3, 8, 8))) for _ in BRANCHES]
    names = ['encoder.enc1a.weight', 'ecb.up2.weight', 'epb.dec1.weight', 'efb.up1.weight',
             'ecb.head.bias', 'epb.head.bias', 'efb.head.bias']
    params = [tiny_net.params[name] for name in names]

    def f(*_):
        terms = [ops.sum(ops.mul(field.e, w)) for field, w in zip(tiny_net(x), readouts)]
        return ops.add(ops.add(terms[0], terms[1]), terms[2])

    assert grad_check(f, params) < 1e-3


def test_forward_is_per_sample(tiny_net, rng):
    x = rng.normal(size=(1, 1, 8, 8))
    with no_grad():
        single = tiny_net(x)
        doubled = tiny_net(np.concatenate([x, x]))
    for one, two in zip(single, doubled):
        for row in range(2):
            np.testing.assert_allclose(two.e.data[row], one.e.data[0], rtol=0, atol=1e-15)
