"""Decomposition, relighting and gating measurements against synthetic ground truth."""

from __future__ import annotations

import numpy as np
import torch

from .fields import gate_forward
from .losses import psnr
from .pipeline import shade_and_project
from .synth import SyntheticSceneSpec, render_gt
from .trainer import Dataset, TrainState, relight, render_frame

SHADOW_CONTRAST = 0.1  # minimum direct-sun light for a pixel to count in shadow scoring


def _static(data: dict) -> np.ndarray:
    return data["static_mask"] > 0.5


def _spec(dataset: Dataset) -> SyntheticSceneSpec:
    return SyntheticSceneSpec.from_dict(dataset.manifest["spec"])


def material_consistency(state: TrainState, dataset: Dataset, split: str | None = "test") -> float:
    """Mean absolute difference of exported material maps between every pair
    of traversal conditions rendered at the same pose. Pixels count when the
    ground truth marks them static under every condition."""
    spec = _spec(dataset)
    M = len(state.scene.traversals)
    frames = dataset.frames if split is None else dataset.split(split)
    diffs = []
    for f in frames:
        maps, masks = [], []
        for m in range(M):
            _, out = render_frame(state, f.camera, m, f.timestamp)
            maps.append(out.material_map.numpy())
            masks.append(render_gt(spec, f.camera, m)["static_mask"] > 0.5)
        mask = np.logical_and.reduce(masks)
        for i in range(M):
            for j in range(i + 1, M):
                diffs.append(np.abs(maps[i] - maps[j])[mask].mean())
    return float(np.mean(diffs))


def albedo_correlation(state: TrainState, dataset: Dataset, split: str | None = "test") -> np.ndarray:
    """Per-channel Pearson correlation of exported material vs GT albedo on static pixels."""
    pred, gt = [], []
    frames = dataset.frames if split is None else dataset.split(split)
    for f in frames:
        data = dataset.load(f)
        _, out = render_frame(state, f.camera, f.traversal, f.timestamp)
        mask = _static(data)
        pred.append(out.material_map.numpy()[mask])
        gt.append(data["gt_material"][mask])
    p, g = np.concatenate(pred), np.concatenate(gt)
    return np.array([np.corrcoef(p[:, c], g[:, c])[0, 1] for c in range(3)])


def predicted_shadow(relit: np.ndarray, albedo: np.ndarray, normal: np.ndarray, lighting) -> tuple[np.ndarray, np.ndarray]:
    """(shadow mask, scored pixels) for an image lit by ``lighting``.

    Illumination is estimated as image / GT albedo and called shadowed when it
    sits below halfway between the ambient level and the fully sunlit level.
    Only pixels whose direct-sun term exceeds ``SHADOW_CONTRAST`` are scored.
    """
    sun = np.asarray(lighting.sun_direction, dtype=np.float64)
    ndl = np.clip(normal @ sun, 0.0, None)
    direct = ndl[..., None] * np.asarray(lighting.sun_intensity)
    ambient = np.asarray(lighting.ambient)
    illum = relit / np.maximum(albedo, 1e-3)
    threshold = ambient + 0.5 * direct
    shadow = (illum < threshold).mean(-1) > 0.5
    scored = direct.mean(-1) > SHADOW_CONTRAST
    return shadow, scored


def relight_report(state: TrainState, dataset: Dataset, m_material: int, m_light: int,
                   split: str = "test", reference: int | None = None) -> dict:
    """Relight the held-out poses of ``m_material`` with the light of
    ``m_light`` and compare against the ground-truth render of ``reference``
    (default ``m_light``) at the same camera, on its static mask.

    Scoring against a traversal other than ``m_light`` is a negative control:
    the shadow IoU should then be low.
    """
    spec = _spec(dataset)
    ref = m_light if reference is None else reference
    lighting = spec.lighting[ref]
    psnrs, inter, union = [], 0, 0
    for f in dataset.split(split):
        if f.traversal != m_material:
            continue
        gt = render_gt(spec, f.camera, ref)
        mask = gt["static_mask"] > 0.5
        relit, _ = relight(state, f.camera, m_material, m_light, f.timestamp)
        relit = relit.numpy().astype(np.float64)
        psnrs.append(psnr(torch.from_numpy(relit[mask]), torch.from_numpy(gt["rgb"][mask].astype(np.float64))))
        shadow, scored = predicted_shadow(relit, gt["material"], gt["normal"], lighting)
        region = mask & scored
        inter += int((shadow & gt["cast_shadow"] & region).sum())
        union += int(((shadow | gt["cast_shadow"]) & region).sum())
    return {"psnr_db": float(np.mean(psnrs)), "shadow_iou": inter / union if union else float("nan"),
            "views": len(psnrs)}


def gate_values(state: TrainState, camera, m: int) -> np.ndarray:
    """Per static primitive gate attenuation under traversal ``m`` (visible ones only)."""
    with torch.no_grad():
        _, shading = shade_and_project(state.scene, state.fields, camera, m, 0.0, state.options())
    out = np.full(len(state.scene.static.gaussians), np.nan)
    out[shading.index.numpy()] = shading.attenuation.numpy()
    return out


def transient_gate(state: TrainState, dataset: Dataset, primitive: str) -> dict[int, float]:
    """Mean gate attenuation, per traversal, over the static primitives that
    were initialised from points sampled on the named ground-truth primitive.

    The gate depends only on the geometry feature and the traversal
    embedding, so no camera is involved.
    """
    spec = _spec(dataset)
    names = [p.name for p in spec.primitives]
    if primitive not in names:
        raise KeyError(primitive)
    owner = np.asarray(dataset.manifest["init_point_owner"])
    g = state.scene.static.gaussians
    if len(owner) != len(g):
        raise ValueError("static primitives no longer align with the initial point cloud")
    rows = torch.from_numpy(np.nonzero(owner == names.index(primitive))[0])
    table = state.scene.traversals
    out = {}
    with torch.no_grad():
        f_geo = g.features[rows]
        for m in range(len(table)):
            out[m] = float(gate_forward(state.fields, f_geo, table.embeddings[m].to(f_geo.dtype)).mean())
    return out
