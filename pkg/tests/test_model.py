import pytest
import torch

from focseg.model import ModelConfig, Segmenter


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return Segmenter(ModelConfig())


def test_widths_double_then_cap():
    assert ModelConfig().widths() == [8, 16, 32, 64, 64]


@pytest.mark.parametrize("size, sizes", [(256, [128, 64, 32, 16, 8]), (128, [64, 32, 16, 8, 4])])
def test_encoder_shape_ladder(model, size, sizes):
    with torch.no_grad():
        st = model.encode(torch.rand(1, 3, size, size))
    assert [a.shape[-1] for a in st.activations[1:]] == sizes
    assert st.z_out.shape[-2:] == (sizes[-1], sizes[-1])


def test_encoder_rejects_indivisible_input(model):
    with pytest.raises(ValueError):
        model.encode(torch.rand(1, 3, 100, 100))


def test_batch_independence(model):
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        st = model.encode(torch.cat([x, x]))
    for a in st.activations:
        assert torch.equal(a[0], a[1])


def test_decoder_taps_and_probabilities(model):
    with torch.no_grad():
        z = model.encode(torch.rand(2, 3, 256, 256)).z_out
        out = model.decode_main(z)
        again = model.decode_main(z)
        aux = model.decode_aux(z)
    assert [t.shape[-1] for t in out.taps] == [16, 32, 64, 128, 256]
    assert torch.allclose(out.probs.sum(1), torch.ones(2, 256, 256), atol=1e-5)
    assert torch.equal(out.logits, again.logits)
    assert [t.shape for t in aux.taps] == [t.shape for t in out.taps]


def test_aux_equals_main_after_parameter_copy():
    torch.manual_seed(1)
    m = Segmenter(ModelConfig(base_width=4))
    m.G.load_state_dict(m.D.state_dict())
    with torch.no_grad():
        z = m.encode(torch.rand(1, 3, 64, 64)).z_out
        a, b = m.decode_main(z), m.decode_aux(z)
    assert torch.equal(a.logits, b.logits)


def test_groups_are_disjoint(model):
    names = {g: {id(p) for _, p in model.group_parameters(g)} for g in "EDG"}
    assert not (names["E"] & names["D"] or names["E"] & names["G"] or names["D"] & names["G"])
    assert sum(map(len, names.values())) == len(list(model.parameters()))
    d_shapes = [p.shape for _, p in model.group_parameters("D")]
    assert d_shapes == [p.shape for _, p in model.group_parameters("G")]


def test_aux_gradient_reaches_encoder_and_aux_only():
    torch.manual_seed(2)
    m = Segmenter(ModelConfig(base_width=4))
    st = m.encode_with_injection(torch.rand(2, 3, 64, 64), 2, seed=0)
    m.decode_aux(st.z_out).probs[:, 1].sum().backward()
    assert all(p.grad is None for p in m.D.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in m.E.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in m.G.parameters())


def test_injection_zero_bound_is_identity(model):
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        clean = model.encode(x)
        pert = model.encode_with_injection(x, 2, seed=5, noise_bound=0.0)
    for a, b in zip(clean.activations, pert.activations):
        assert torch.equal(a, b)


@pytest.mark.parametrize("depth", [1, 3, 5])
def test_injection_leaves_shallower_layers_alone(model, depth):
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        clean = model.encode(x)
        pert = model.encode_with_injection(x, depth, seed=5)
    for d in range(depth):
        assert torch.equal(clean.activations[d], pert.activations[d])
    for d in range(depth, 6):
        assert not torch.equal(clean.activations[d], pert.activations[d])
    z, zt = clean.activations[depth], pert.activations[depth]
    assert torch.all((zt - z).abs() <= 0.3 * z.abs() + 1e-6)


def test_injection_depth_range(model):
    for d in (0, 6):
        with pytest.raises(ValueError):
            model.encode_with_injection(torch.rand(1, 3, 64, 64), d, seed=0)


def test_forward_determinism(model):
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a = model.decode_aux(model.encode_with_injection(x, 3, seed=(1, 2)).z_out).logits
        b = model.decode_aux(model.encode_with_injection(x, 3, seed=(1, 2)).z_out).logits
    assert torch.equal(a, b)


def test_skip_connections_variant():
    torch.manual_seed(0)
    m = Segmenter(ModelConfig(base_width=4, skip_connections=True))
    with torch.no_grad():
        st = m.encode(torch.rand(1, 3, 64, 64))
        out = m.decode_main(st.z_out, st)
    assert out.probs.shape == (1, 2, 64, 64)
    with pytest.raises(ValueError):
        m.decode_main(st.z_out)
