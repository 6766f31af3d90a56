import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from admgs.errors import ContractViolationError, InvalidArgumentError
from admgs.fields import (
    GATE_BIAS_INIT,
    LIGHT_FLOOR,
    FieldDims,
    LightInput,
    Mlp,
    MlpGrads,
    NeuralFieldSet,
    build_light_input,
    gate_forward,
    light_forward,
    material_forward,
    mlp_backward,
    sky_forward,
    static_color,
    time_encoding,
)
from admgs.geom import sh_basis


def random_mlp(sizes, acts, seed=0):
    mlp = Mlp(sizes, acts, generator=torch.Generator().manual_seed(seed), zero_final=False)
    gen = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for b in mlp.biases:
            b.copy_(torch.randn(b.shape, generator=gen, dtype=torch.float64) * 0.3)
    return mlp


def torch_nn_twin(mlp):
    layers = []
    table = {"relu": torch.nn.ReLU, "sigmoid": torch.nn.Sigmoid, "softplus": torch.nn.Softplus,
             "identity": torch.nn.Identity}
    for W, b, kind in zip(mlp.weights, mlp.biases, mlp.activations):
        lin = torch.nn.Linear(W.shape[1], W.shape[0], dtype=torch.float64)
        with torch.no_grad():
            lin.weight.copy_(W)
            lin.bias.copy_(b)
        layers += [lin, table[kind]()]
    return torch.nn.Sequential(*layers)


ACT_SETS = [
    ["relu", "relu", "sigmoid"],
    ["relu", "softplus"],
    ["sigmoid", "identity"],
    ["softplus", "relu", "relu", "identity"],
]


class TestMlpBackward:
    @pytest.mark.parametrize("acts", ACT_SETS)
    def test_matches_torch_nn(self, acts):
        sizes = [5] + [7] * (len(acts) - 1) + [3]
        mlp = random_mlp(sizes, acts)
        twin = torch_nn_twin(mlp)
        x = torch.randn(11, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
        ybar = torch.randn(11, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(4))

        tape = mlp.forward_tape(x)
        ours = mlp_backward(tape, ybar)

        xr = x.clone().requires_grad_()
        y = twin(xr)
        torch.testing.assert_close(tape.output, y.detach(), rtol=0, atol=1e-14)
        (y * ybar).sum().backward()
        linears = [m for m in twin if isinstance(m, torch.nn.Linear)]
        for gw, gb, lin in zip(ours.weights, ours.biases, linears):
            torch.testing.assert_close(gw, lin.weight.grad, rtol=1e-12, atol=1e-13)
            torch.testing.assert_close(gb, lin.bias.grad, rtol=1e-12, atol=1e-13)
        torch.testing.assert_close(ours.inputs, xr.grad, rtol=1e-12, atol=1e-13)

    def test_matches_finite_differences(self):
        mlp = random_mlp([4, 6, 6, 2], ["softplus", "sigmoid", "identity"], seed=1)
        x = torch.randn(3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
        ybar = torch.randn(3, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(6))
        grads = mlp_backward(mlp.forward_tape(x), ybar)
        h = 1e-6

        def f():
            return float((mlp.forward_tape(x).output * ybar).sum())

        for param, g in [(mlp.weights[0], grads.weights[0]), (mlp.weights[2], grads.weights[2]),
                         (mlp.biases[1], grads.biases[1])]:
            for idx in list(np.ndindex(*param.shape))[:6]:
                with torch.no_grad():
                    orig = float(param[idx])
                    param[idx] = orig + h
                    up = f()
                    param[idx] = orig - h
                    down = f()
                    param[idx] = orig
                fd = (up - down) / (2 * h)
                assert abs(fd - float(g[idx])) < 1e-8 * max(1.0, abs(fd))

    def test_autograd_function_uses_same_backward(self):
        mlp = random_mlp([3, 8, 2], ["relu", "sigmoid"], seed=2)
        x = torch.randn(9, 3, dtype=torch.float64, requires_grad=True)
        ybar = torch.randn(9, 2, dtype=torch.float64)
        (mlp(x) * ybar).sum().backward()
        ours = mlp_backward(mlp.forward_tape(x.detach()), ybar)
        torch.testing.assert_close(mlp.weights[0].grad, ours.weights[0], rtol=0, atol=1e-15)
        torch.testing.assert_close(x.grad, ours.inputs, rtol=0, atol=1e-15)

    def test_tape_consumed_once(self):
        mlp = random_mlp([2, 3, 1], ["relu", "identity"])
        tape = mlp.forward_tape(torch.ones(1, 2, dtype=torch.float64))
        mlp_backward(tape, torch.ones(1, 1, dtype=torch.float64))
        with pytest.raises(ContractViolationError):
            mlp_backward(tape, torch.ones(1, 1, dtype=torch.float64))

    def test_accumulate(self):
        mlp = random_mlp([2, 4, 1], ["relu", "identity"])
        x1 = torch.randn(5, 2, dtype=torch.float64)
        x2 = torch.randn(5, 2, dtype=torch.float64)
        ybar = torch.ones(5, 1, dtype=torch.float64)
        acc = MlpGrads.zeros_like(mlp)
        mlp_backward(mlp.forward_tape(x1), ybar, acc)
        mlp_backward(mlp.forward_tape(x2), ybar, acc)
        joint = mlp_backward(mlp.forward_tape(torch.cat([x1, x2])), torch.ones(10, 1, dtype=torch.float64))
        for a, b in zip(acc.weights, joint.weights):
            torch.testing.assert_close(a, b)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_shapes(self, din, hidden, dout, seed):
        mlp = random_mlp([din, hidden, dout], ["relu", "sigmoid"], seed=seed)
        g = mlp_backward(mlp.forward_tape(torch.zeros(4, din, dtype=torch.float64)), torch.ones(4, dout))
        assert [w.shape for w in g.weights] == [w.shape for w in mlp.weights]
        assert g.inputs.shape == (4, din)

    def test_bad_input_width(self):
        mlp = random_mlp([3, 2], ["identity"])
        with pytest.raises(InvalidArgumentError):
            mlp(torch.zeros(1, 4, dtype=torch.float64))

    def test_bad_activation(self):
        with pytest.raises(InvalidArgumentError):
            Mlp([2, 2], ["tanh"], generator=torch.Generator())


class TestFieldSet:
    def setup_method(self):
        self.dims = FieldDims(geo=6, emb=4, material_hidden=(8,), light_hidden=(8,), sky_hidden=(8,),
                              gate_hidden=(8,), deform_hidden=(8,))
        self.fields = NeuralFieldSet.create(self.dims, seed=0)

    def test_initial_outputs(self):
        f = torch.randn(5, 6, dtype=torch.float64)
        e = torch.randn(4, dtype=torch.float64)
        # zero final layers: material 0.5, gate sigmoid(bias)
        torch.testing.assert_close(material_forward(self.fields, f), torch.full((5, 3), 0.5, dtype=torch.float64))
        g = gate_forward(self.fields, f, e)
        torch.testing.assert_close(g, torch.full((5,), 1 / (1 + np.exp(-GATE_BIAS_INIT)), dtype=torch.float64))

    def test_light_input_layout_and_positive(self):
        n = torch.tensor([[0.0, 0.0, 1.0]] * 2, dtype=torch.float64)
        v = torch.tensor([[1.0, 0.0, 0.0]] * 2, dtype=torch.float64)
        inp = build_light_input(n, n, v, torch.zeros(2, 6, dtype=torch.float64), torch.ones(4, dtype=torch.float64))
        assert len(inp) == self.dims.light_in == 4 + 25 + 16 + 6 + 4
        assert LightInput.LAYOUT == ("enc_n", "enc_r", "enc_v", "f_geo", "e_m")
        torch.testing.assert_close(inp.concat()[:, 4:29], sh_basis(n, 4))
        torch.testing.assert_close(inp.concat()[:, -4:], torch.ones(2, 4, dtype=torch.float64))
        L = light_forward(self.fields, inp)
        assert bool((L >= LIGHT_FLOOR).all())

    def test_light_strictly_positive_with_random_weights(self):
        gen = torch.Generator().manual_seed(9)
        with torch.no_grad():
            for t in self.fields.light.parameters():
                t.copy_(torch.randn(t.shape, generator=gen, dtype=torch.float64) * 5)
        d = torch.nn.functional.normalize(torch.randn(50, 3, dtype=torch.float64), dim=-1)
        inp = build_light_input(d, d, d, torch.randn(50, 6, dtype=torch.float64), torch.randn(4, dtype=torch.float64))
        assert bool((light_forward(self.fields, inp) > 0).all())

    def test_material_ignores_embedding(self):
        # material has no embedding input by construction
        assert self.fields.material.in_dim == self.dims.geo

    def test_sky_range(self):
        d = torch.nn.functional.normalize(torch.randn(7, 3, dtype=torch.float64), dim=-1)
        s = sky_forward(self.fields, d, torch.zeros(4, dtype=torch.float64))
        assert s.shape == (7, 3) and bool(((s > 0) & (s < 1)).all())

    def test_static_color(self):
        M = torch.tensor([[0.5, 0.2, 1.0]])
        L = torch.tensor([[2.0, 1.0, 0.3]])
        torch.testing.assert_close(static_color(M, L), torch.tensor([[1.0, 0.2, 0.3]]))

    def test_named_tensors_unique(self):
        names = self.fields.named_tensors()
        assert len({id(t) for t in names.values()}) == len(names)
        assert "light.w0" in names and "gate.b1" in names

    def test_time_encoding(self):
        enc = time_encoding(torch.tensor([0.0, 0.25], dtype=torch.float64))
        assert enc.shape == (2, 8)
        torch.testing.assert_close(enc[0], torch.tensor([0.0] * 4 + [1.0] * 4, dtype=torch.float64))
