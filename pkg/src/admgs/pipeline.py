"""Per-view rendering: compose the scene, shade every node, project, rasterize."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .fields import (
    NeuralFieldSet,
    build_light_input,
    gate_forward,
    light_forward,
    material_forward,
    sky_forward,
    static_color,
)
from .geom import Camera, covariance_from, normalize, project_gaussians, reflect, shortest_axis_normal
from .raster import RenderOutput, ShadedSplats, rasterize_forward
from .scene import NodeTag, SceneGraph, TraversalTable, compose_world


@dataclass
class RenderOptions:
    use_geometry_cues: bool = True  # feed SH(n) and SH(r) to the light field
    use_gate: bool = True
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class StaticShading:
    material: torch.Tensor
    light: torch.Tensor
    normal: torch.Tensor
    attenuation: torch.Tensor
    index: torch.Tensor  # static primitive index of each shaded row


GUARD_BAND = 1.3  # lateral cull at 1.3x the half-image extent around the principal point


def _in_guard_band(means2d: torch.Tensor, camera: Camera) -> torch.Tensor:
    """Drop splats centred far outside the image.

    Near the camera plane the EWA footprint of an off-screen splat explodes
    and would paint over the whole frame.
    """
    du = (means2d[:, 0] - camera.cx).abs() <= GUARD_BAND * 0.5 * camera.width
    dv = (means2d[:, 1] - camera.cy).abs() <= GUARD_BAND * 0.5 * camera.height
    return du & dv


def shade_and_project(
    scene: SceneGraph,
    fields: NeuralFieldSet,
    camera: Camera,
    m: int,
    tau: float = 0.0,
    options: RenderOptions | None = None,
    *,
    light_traversal: int | None = None,
) -> tuple[ShadedSplats, StaticShading]:
    """Build the shaded 2D splat list for one query.

    ``m`` selects geometry and gating; ``light_traversal`` (default ``m``)
    selects the embedding used by the light and sky fields.
    """
    opts = options or RenderOptions()
    table = scene.traversals
    table.check(m)
    lm = table.check(m if light_traversal is None else light_traversal)
    ws = compose_world(scene, m, tau, fields)
    dtype = ws.positions.dtype
    cam_center = torch.as_tensor(camera.center, dtype=dtype)

    covs = covariance_from(ws.log_scales, ws.rotations, check=False)
    proj = project_gaussians(ws.positions, covs, camera)
    keep = proj.visible & _in_guard_band(proj.means2d.detach(), camera)
    tag = ws.node_tag

    n = len(ws)
    color = torch.zeros(n, 3, dtype=dtype)
    normal = torch.zeros(n, 3, dtype=dtype)
    material = torch.zeros(n, 3, dtype=dtype)
    opacity = torch.sigmoid(ws.opacity_logits)

    st = torch.nonzero((tag == NodeTag.STATIC) & keep).squeeze(-1)
    pos = ws.positions[st]
    f_geo = ws.features[ws.source_index[st]]
    nrm = shortest_axis_normal(ws.log_scales[st], ws.rotations[st], pos, cam_center, check=False)
    view = normalize(cam_center - pos)
    refl = reflect(nrm, view, check=False)
    M = material_forward(fields, f_geo)
    inp = build_light_input(nrm, refl, view, f_geo, table.embeddings[lm].to(dtype))
    if not opts.use_geometry_cues:
        inp.enc_n = torch.zeros_like(inp.enc_n)
        inp.enc_r = torch.zeros_like(inp.enc_r)
    L = light_forward(fields, inp)
    if opts.use_gate:
        att = gate_forward(fields, f_geo, table.embeddings[m].to(dtype))
    else:
        att = torch.ones(len(st), dtype=dtype)
    color = color.index_put((st,), static_color(M, L))
    normal = normal.index_put((st,), nrm)
    material = material.index_put((st,), M)
    opacity = opacity.index_put((st,), opacity[st] * att)

    sky = torch.nonzero((tag == NodeTag.SKY) & keep).squeeze(-1)
    if len(sky):
        dirs = normalize(ws.positions[sky] - cam_center)
        color = color.index_put((sky,), sky_forward(fields, dirs, table.embeddings[lm].to(dtype)))

    obj = torch.nonzero(tag == NodeTag.OBJECT).squeeze(-1)
    if len(obj):
        # object rows sit between static and sky in compose order
        first = int(obj[0])
        obj_colors = torch.sigmoid(ws.object_colors)
        sel = obj[keep[obj]]
        color = color.index_put((sel,), obj_colors[sel - first])

    idx = torch.nonzero(keep).squeeze(-1)
    splats = ShadedSplats(
        proj.means2d[idx], proj.cov2d[idx], proj.depth[idx], opacity[idx],
        color[idx], normal[idx], material[idx], (tag[idx] == NodeTag.STATIC),
    )
    shading = StaticShading(M, L, nrm, att, ws.source_index[st])
    return splats, shading


def render_view(scene, fields, camera: Camera, m: int, tau: float = 0.0, options: RenderOptions | None = None,
                *, light_traversal: int | None = None) -> tuple[RenderOutput, StaticShading]:
    opts = options or RenderOptions()
    splats, shading = shade_and_project(scene, fields, camera, m, tau, opts, light_traversal=light_traversal)
    out = rasterize_forward(splats, camera.width, camera.height, background=opts.background)
    return out, shading


def apply_traversal_affine(render: torch.Tensor, m: int, table: TraversalTable, clamp: bool = True) -> torch.Tensor:
    """``s_m * I + b_m`` per pixel, optionally clamped to [0, 1]."""
    m = table.check(m)
    out = render * table.affine_scale[m].to(render.dtype) + table.affine_bias[m].to(render.dtype)
    return out.clamp(0.0, 1.0) if clamp else out
