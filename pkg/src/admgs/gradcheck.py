"""Analytic vs central finite-difference gradients of the full training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .fields import FieldDims, NeuralFieldSet
from .geom import Camera
from .losses import LossWeights, material_loss, normal_loss, photometric_loss, scale_flatness_loss, total_loss
from .pipeline import RenderOptions, apply_traversal_affine, render_view
from .scene import GaussianSet, SceneGraph, StaticNode, TraversalTable, sky_placement

REL_TOL = 1e-4
REL_FLOOR = 1e-6  # gradients below this magnitude are compared absolutely
FD_STEP = 1e-5

# class name -> tensor names (prefix match) inside the check problem
CLASSES = {
    "position": ["static.positions"],
    "scale": ["static.log_scales"],
    "rotation": ["static.rotations"],
    "opacity": ["static.opacity_logits"],
    "f_geo": ["static.features"],
    "material_mlp": ["fields.material."],
    "light_mlp": ["fields.light."],
    "gate_mlp": ["fields.gate."],
    "sky_mlp": ["fields.sky."],
    "embedding": ["traversal.embeddings"],
    "affine": ["traversal.affine_scale", "traversal.affine_bias"],
}


@dataclass
class ClassResult:
    name: str
    worst_rel: float
    worst_tensor: str
    worst_index: tuple
    samples: int

    @property
    def ok(self) -> bool:
        return self.worst_rel < REL_TOL


class GradCheckProblem:
    """Random float64 scene of at most 20 splats rendered at 16x16."""

    def __init__(self, seed: int = 0, size: int = 16, static_count: int = 14, sky_count: int = 6):
        rng = np.random.default_rng(seed)
        dtype = torch.float64
        dims = FieldDims(geo=6, emb=4, material_hidden=(8,), light_hidden=(8, 8), sky_hidden=(8,),
                         gate_hidden=(8,), deform_hidden=(8,))
        pos = rng.uniform(-0.6, 0.6, size=(static_count, 3))
        log_s = np.log(rng.uniform(0.12, 0.35, size=(static_count, 3)))
        rot = rng.normal(size=(static_count, 4))
        rot /= np.linalg.norm(rot, axis=1, keepdims=True)
        static = GaussianSet.create(pos, log_s, rot, rng.uniform(-1.0, 1.5, static_count),
                                    rng.normal(size=(static_count, dims.geo)), dtype=dtype)
        sky = sky_placement(6.0, sky_count, seed, dtype=dtype, opacity_logit=1.0)
        table = TraversalTable.create(2, dims.emb, seed=seed, dtype=dtype, init_std=0.5)
        with torch.no_grad():
            table.affine_scale.copy_(torch.tensor(rng.uniform(0.8, 1.2, (2, 3))))
            table.affine_bias.copy_(torch.tensor(rng.uniform(-0.05, 0.05, (2, 3))))
        self.scene = SceneGraph(StaticNode(static), sky, [], table)
        self.fields = NeuralFieldSet.create(dims, seed=seed, dtype=dtype)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for t in self.fields.named_tensors().values():
                t.copy_(torch.randn(t.shape, generator=gen, dtype=dtype) * 0.5)
        self.camera = Camera.look_at([0.3, -3.0, 0.8], [0.0, 0.0, 0.0], fx=20.0, width=size, height=size)
        self.m = 1
        self.weights = LossWeights(lambda_ssim=0.2, lambda_decomp=0.5, lambda_scale=0.3, delta=1.0)
        self.gt = torch.tensor(rng.uniform(0, 1, (size, size, 3)))
        self.gt_material = torch.tensor(rng.uniform(0, 1, (size, size, 3)))
        n = rng.normal(size=(size, size, 3))
        self.gt_normal = torch.tensor(n / np.linalg.norm(n, axis=-1, keepdims=True))
        self.mask = torch.tensor((rng.uniform(size=(size, size)) < 0.7).astype(np.float64))
        self.options = RenderOptions(background=(0.1, 0.2, 0.3))

    def parameters(self) -> dict[str, torch.Tensor]:
        out = {k: v for k, v in self.scene.named_tensors().items() if not k.startswith("sky.")}
        out.update({f"fields.{k}": v for k, v in self.fields.named_tensors().items()})
        return out

    def loss(self) -> torch.Tensor:
        out, _ = render_view(self.scene, self.fields, self.camera, self.m, 0.0, self.options)
        pred = apply_traversal_affine(out.rgb, self.m, self.scene.traversals, clamp=False)
        comps = {
            "photo": photometric_loss(pred, self.gt, self.weights.lambda_ssim),
            "material": material_loss(out.material_map, self.gt_material, self.mask),
            "normal": normal_loss(out.normal_map, self.gt_normal, self.mask),
            "scale": scale_flatness_loss(self.scene.static.gaussians.log_scales, self.weights.delta),
        }
        return total_loss(comps, self.weights)


def _relative(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), REL_FLOOR)


def run_grad_check(scale: str = "small", seed: int = 0) -> list[ClassResult]:
    """Compare analytic and central-difference gradients for every class.

    ``small`` samples 4 entries per class, ``full`` samples 24.
    """
    if scale not in ("small", "full"):
        raise ValueError("scale must be 'small' or 'full'")
    per_class = 4 if scale == "small" else 24
    prob = GradCheckProblem(seed)
    params = prob.parameters()
    loss = prob.loss()
    analytic = dict(zip(params, torch.autograd.grad(loss, list(params.values()), allow_unused=True)))
    rng = np.random.default_rng(seed + 1)
    results = []
    for cls, prefixes in CLASSES.items():
        names = [k for k in params if any(k == p or (p.endswith(".") and k.startswith(p)) for p in prefixes)]
        if cls == "embedding":
            # only the row of the rendered traversal carries a gradient
            pool = [(k, (prob.m, j)) for k in names for j in range(params[k].shape[1])]
        else:
            pool = [(k, idx) for k in names for idx in np.ndindex(*params[k].shape)]
        picks = rng.choice(len(pool), size=min(per_class, len(pool)), replace=False)
        worst = (0.0, "", ())
        for p in picks:
            name, idx = pool[p]
            t = params[name]
            with torch.no_grad():
                orig = float(t[idx])
                t[idx] = orig + FD_STEP
                up = float(prob.loss())
                t[idx] = orig - FD_STEP
                down = float(prob.loss())
                t[idx] = orig
            fd = (up - down) / (2 * FD_STEP)
            g = analytic[name]
            a = 0.0 if g is None else float(g[idx])
            rel = _relative(a, fd)
            if rel >= worst[0] or not worst[1]:
                worst = (rel, name, tuple(int(i) for i in idx))
        results.append(ClassResult(cls, worst[0], worst[1], worst[2], len(picks)))
    return results
