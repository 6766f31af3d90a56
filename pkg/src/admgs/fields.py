"""Small fully-connected fields with a hand-derived reverse pass.

The MLP forward records a :class:`GradTape`; :func:`mlp_backward` replays
it to produce exact adjoints. The same routine backs a
``torch.autograd.Function`` so the fields slot into the autograd graph of
the rest of the renderer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ContractViolationError, InvalidArgumentError
from .geom import sh_basis

LIGHT_FLOOR = 1e-4
GATE_BIAS_INIT = 4.0
TIME_FREQUENCIES = 4

ACTIVATIONS = ("relu", "sigmoid", "softplus", "identity")


def _activate(kind: str, z: torch.Tensor) -> torch.Tensor:
    if kind == "relu":
        return torch.relu(z)
    if kind == "sigmoid":
        return torch.sigmoid(z)
    if kind == "softplus":
        return torch.logaddexp(z, torch.zeros_like(z))
    return z


def _activation_grad(kind: str, z: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    if kind == "relu":
        return (z > 0).to(z.dtype)
    if kind == "sigmoid":
        return a * (1.0 - a)
    if kind == "softplus":
        return torch.sigmoid(z)
    return torch.ones_like(z)


@dataclass
class GradTape:
    """Primal values of one MLP forward pass, consumed by one backward."""

    mlp: "Mlp"
    inputs: torch.Tensor
    pre_activations: list[torch.Tensor]
    activations: list[torch.Tensor]
    consumed: bool = False

    @property
    def output(self) -> torch.Tensor:
        return self.activations[-1]


@dataclass
class MlpGrads:
    weights: list[torch.Tensor]
    biases: list[torch.Tensor]
    inputs: torch.Tensor | None = None

    @classmethod
    def zeros_like(cls, mlp: "Mlp") -> "MlpGrads":
        return cls([torch.zeros_like(w) for w in mlp.weights], [torch.zeros_like(b) for b in mlp.biases])


def _run_forward(weights, biases, activations, x):
    zs, acts = [], []
    a = x
    for W, b, kind in zip(weights, biases, activations):
        z = a @ W.T + b
        a = _activate(kind, z)
        zs.append(z)
        acts.append(a)
    return zs, acts


def _run_backward(weights, activations, x, zs, acts, ybar):
    gws, gbs = [None] * len(weights), [None] * len(weights)
    abar = ybar
    for i in range(len(weights) - 1, -1, -1):
        dz = abar * _activation_grad(activations[i], zs[i], acts[i])
        prev = x if i == 0 else acts[i - 1]
        gws[i] = dz.T @ prev
        gbs[i] = dz.sum(0)
        abar = dz @ weights[i]
    return gws, gbs, abar


class _MlpFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, activations, x, *params):
        weights, biases = params[0::2], params[1::2]
        zs, acts = _run_forward(weights, biases, activations, x)
        ctx.activations = activations
        ctx.n_layers = len(weights)
        ctx.save_for_backward(x, *params, *zs, *acts)
        return acts[-1]

    @staticmethod
    def backward(ctx, ybar):
        n = ctx.n_layers
        saved = ctx.saved_tensors
        x = saved[0]
        params = saved[1 : 1 + 2 * n]
        zs = saved[1 + 2 * n : 1 + 3 * n]
        acts = saved[1 + 3 * n :]
        gws, gbs, xbar = _run_backward(params[0::2], ctx.activations, x, zs, acts, ybar)
        grads = []
        for gw, gb in zip(gws, gbs):
            grads += [gw, gb]
        return (None, xbar, *grads)


class Mlp:
    """Dense network with one activation name per layer."""

    def __init__(
        self,
        sizes: list[int],
        activations: list[str],
        *,
        generator: torch.Generator,
        dtype=torch.float64,
        zero_final: bool = True,
        final_bias: float = 0.0,
    ):
        if len(activations) != len(sizes) - 1:
            raise InvalidArgumentError("need one activation per layer")
        for kind in activations:
            if kind not in ACTIVATIONS:
                raise InvalidArgumentError(f"unknown activation {kind!r}")
        self.sizes = list(sizes)
        self.activations = tuple(activations)
        self.weights: list[torch.Tensor] = []
        self.biases: list[torch.Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            W = (torch.rand(fan_out, fan_in, generator=generator, dtype=torch.float64) * 2 - 1) * bound
            if last and zero_final:
                W.zero_()
            b = torch.full((fan_out,), final_bias if last else 0.0, dtype=torch.float64)
            self.weights.append(W.to(dtype).requires_grad_())
            self.biases.append(b.to(dtype).requires_grad_())

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[torch.Tensor]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def _check(self, x: torch.Tensor) -> None:
        if x.shape[-1] != self.in_dim:
            raise InvalidArgumentError(f"expected input width {self.in_dim}, got {x.shape[-1]}")

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        lead = x.shape[:-1]
        y = _MlpFunction.apply(self.activations, x.reshape(-1, self.in_dim), *self.parameters())
        return y.reshape(lead + (self.out_dim,))

    def forward_tape(self, x: torch.Tensor) -> GradTape:
        """Forward pass outside autograd, keeping what the backward needs."""
        self._check(x)
        with torch.no_grad():
            x2 = x.detach().reshape(-1, self.in_dim)
            zs, acts = _run_forward(
                [w.detach() for w in self.weights], [b.detach() for b in self.biases], self.activations, x2
            )
        return GradTape(self, x2, zs, acts)


def mlp_backward(tape: GradTape, output_adjoint: torch.Tensor, accumulate: MlpGrads | None = None) -> MlpGrads:
    """Exact adjoints of weights, biases and inputs for a recorded pass.

    With ``accumulate`` the parameter adjoints are added into that buffer,
    which is also returned.
    """
    if tape.consumed:
        raise ContractViolationError("gradient tape already consumed")
    ybar = output_adjoint.reshape(tape.output.shape).to(tape.output.dtype)
    mlp = tape.mlp
    with torch.no_grad():
        gws, gbs, xbar = _run_backward(
            [w.detach() for w in mlp.weights], mlp.activations, tape.inputs,
            tape.pre_activations, tape.activations, ybar,
        )
    tape.consumed = True
    if accumulate is None:
        return MlpGrads(gws, gbs, xbar)
    for acc, g in zip(accumulate.weights, gws):
        acc += g
    for acc, g in zip(accumulate.biases, gbs):
        acc += g
    accumulate.inputs = xbar if accumulate.inputs is None else accumulate.inputs + xbar
    return accumulate


@dataclass
class FieldDims:
    geo: int = 16
    emb: int = 16
    obj: int = 8
    material_hidden: tuple[int, ...] = (64, 64)
    light_hidden: tuple[int, ...] = (128, 128, 128)
    sky_hidden: tuple[int, ...] = (64, 64)
    gate_hidden: tuple[int, ...] = (32, 32)
    deform_hidden: tuple[int, ...] = (64, 64)

    @property
    def light_in(self) -> int:
        return 4 + 25 + 16 + self.geo + self.emb


@dataclass
class LightInput:
    """Fused light-field input; ``LAYOUT`` fixes the block order."""

    enc_n: torch.Tensor
    enc_r: torch.Tensor
    enc_v: torch.Tensor
    f_geo: torch.Tensor
    e_m: torch.Tensor

    LAYOUT = ("enc_n", "enc_r", "enc_v", "f_geo", "e_m")

    def concat(self) -> torch.Tensor:
        return torch.cat([getattr(self, name) for name in self.LAYOUT], dim=-1)

    def __len__(self) -> int:
        return self.concat().shape[-1]


def _stack_mlp(in_dim, hidden, out_dim, out_act, gen, dtype, **kw) -> Mlp:
    sizes = [in_dim, *hidden, out_dim]
    acts = ["relu"] * len(hidden) + [out_act]
    return Mlp(sizes, acts, generator=gen, dtype=dtype, **kw)


@dataclass
class NeuralFieldSet:
    dims: FieldDims
    material: Mlp
    light: Mlp
    sky: Mlp
    gate: Mlp
    deform: Mlp
    names: tuple[str, ...] = field(default=("material", "light", "sky", "gate", "deform"))

    @classmethod
    def create(cls, dims: FieldDims | None = None, seed: int = 0, dtype=torch.float64) -> "NeuralFieldSet":
        dims = dims or FieldDims()
        gen = torch.Generator().manual_seed(seed)
        return cls(
            dims=dims,
            material=_stack_mlp(dims.geo, dims.material_hidden, 3, "sigmoid", gen, dtype),
            light=_stack_mlp(dims.light_in, dims.light_hidden, 3, "softplus", gen, dtype),
            sky=_stack_mlp(16 + dims.emb, dims.sky_hidden, 3, "sigmoid", gen, dtype),
            gate=_stack_mlp(dims.geo + dims.emb, dims.gate_hidden, 1, "sigmoid", gen, dtype,
                            final_bias=GATE_BIAS_INIT),
            deform=_stack_mlp(3 + 2 * TIME_FREQUENCIES + dims.obj, dims.deform_hidden, 3, "identity", gen, dtype),
        )

    def mlps(self) -> dict[str, Mlp]:
        return {name: getattr(self, name) for name in self.names}

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, mlp in self.mlps().items():
            for i, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{name}.w{i}"] = W
                out[f"{name}.b{i}"] = b
        return out


def _expand_rows(e: torch.Tensor, n: int) -> torch.Tensor:
    return e.reshape(1, -1).expand(n, -1) if e.dim() == 1 else e


def material_forward(fields: NeuralFieldSet, f_geo: torch.Tensor) -> torch.Tensor:
    """Material in (0, 1)^3 from geometric features alone."""
    return fields.material(f_geo)


def build_light_input(n, r, v, f_geo, e_m) -> LightInput:
    f_geo = torch.as_tensor(f_geo)
    rows = f_geo.shape[0] if f_geo.dim() > 1 else None
    enc = [sh_basis(torch.as_tensor(d, dtype=f_geo.dtype), k, check=False) for d, k in ((n, 1), (r, 4), (v, 3))]
    e_m = torch.as_tensor(e_m, dtype=f_geo.dtype)
    if rows is not None:
        e_m = _expand_rows(e_m, rows)
    return LightInput(*enc, f_geo, e_m)


def light_forward(fields: NeuralFieldSet, inp: LightInput) -> torch.Tensor:
    """Strictly positive light: softplus output plus a small floor."""
    return fields.light(inp.concat()) + LIGHT_FLOOR


def gate_forward(fields: NeuralFieldSet, f_geo: torch.Tensor, e_m: torch.Tensor) -> torch.Tensor:
    rows = f_geo.shape[0] if f_geo.dim() > 1 else None
    e = _expand_rows(e_m, rows) if rows is not None else e_m
    return fields.gate(torch.cat([f_geo, e], dim=-1))[..., 0]


def sky_forward(fields: NeuralFieldSet, v: torch.Tensor, e_m: torch.Tensor) -> torch.Tensor:
    enc = sh_basis(v, 3, check=False)
    rows = enc.shape[0] if enc.dim() > 1 else None
    e = _expand_rows(e_m.to(enc.dtype), rows) if rows is not None else e_m
    return fields.sky(torch.cat([enc, e], dim=-1))


def static_color(M: torch.Tensor, L: torch.Tensor) -> torch.Tensor:
    return M * L


def time_encoding(t_norm: torch.Tensor) -> torch.Tensor:
    """Sinusoids of normalised time at ``TIME_FREQUENCIES`` octaves."""
    freqs = math.pi * 2.0 ** torch.arange(TIME_FREQUENCIES, dtype=t_norm.dtype)
    ang = t_norm.reshape(-1, 1) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
