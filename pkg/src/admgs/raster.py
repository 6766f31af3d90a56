"""Tile-based alpha-compositing splat rasterizer.

:func:`rasterize_forward` bins splats into 16x16 tiles, sorts each tile
front to back, expands each tile's list into per-pixel lists and
composites every covered pixel in one padded batch. The compositing core
has a hand-written reverse pass (:class:`_Composite`); :func:`composite_autograd` evaluates the same
expression with torch autograd and serves as the cross-check.
:func:`reference_render` is a deliberately naive numpy renderer used as an
oracle: one global depth sort, every splat visited for every pixel, no
early termination.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractViolationError, InvalidArgumentError

TILE = 16
SIGMA_CUT = 3.0
T_MIN = 1e-4
LAYERS = ("rgb", "alpha", "depth", "normal_map", "material_map", "static_mask")
SPLAT_FIELDS = ("means2d", "cov2d", "depth", "opacity", "color", "normal", "material")


@dataclass
class ShadedSplats:
    means2d: torch.Tensor  # (N, 2) pixel coordinates
    cov2d: torch.Tensor  # (N, 2, 2)
    depth: torch.Tensor  # (N,)
    opacity: torch.Tensor  # (N,) effective opacity in [0, 1]
    color: torch.Tensor  # (N, 3)
    normal: torch.Tensor  # (N, 3), zero rows for non-static splats
    material: torch.Tensor  # (N, 3), zero rows for non-static splats
    is_static: torch.Tensor  # (N,) bool

    def __len__(self) -> int:
        return self.means2d.shape[0]

    @classmethod
    def empty(cls, dtype=torch.float64) -> "ShadedSplats":
        z = lambda *s: torch.zeros(*s, dtype=dtype)  # noqa: E731
        return cls(z(0, 2), z(0, 2, 2), z(0), z(0), z(0, 3), z(0, 3), z(0, 3), torch.zeros(0, dtype=torch.bool))

    def subset(self, keep: torch.Tensor) -> "ShadedSplats":
        return ShadedSplats(*(getattr(self, f)[keep] for f in SPLAT_FIELDS), self.is_static[keep])


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W)
    normal_map: torch.Tensor  # (H, W, 3)
    material_map: torch.Tensor  # (H, W, 3)
    static_mask: torch.Tensor  # (H, W)
    cache: dict = field(default_factory=dict, repr=False)

    def layers(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in LAYERS}

    def numpy(self) -> dict[str, np.ndarray]:
        return {name: t.detach().cpu().numpy() for name, t in self.layers().items()}


def _check_size(width: int, height: int) -> None:
    if int(width) <= 0 or int(height) <= 0:
        raise InvalidArgumentError("image must have positive width and height")


def _conics(cov2d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return c / det, -b / det, a / det, det


@torch.no_grad()
def _bin_tiles(means: np.ndarray, cov: np.ndarray, depth: np.ndarray, width: int, height: int):
    """(tile id, splat id) pairs sorted by tile, then depth, then splat index."""
    n = means.shape[0]
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    r = SIGMA_CUT * np.sqrt(lam)
    x0 = np.maximum(np.ceil(means[:, 0] - r), 0)
    x1 = np.minimum(np.floor(means[:, 0] + r), width - 1)
    y0 = np.maximum(np.ceil(means[:, 1] - r), 0)
    y1 = np.minimum(np.floor(means[:, 1] + r), height - 1)
    hit = (x0 <= x1) & (y0 <= y1) & np.isfinite(r)
    tiles_x = (width + TILE - 1) // TILE
    ids = np.nonzero(hit)[0]
    tx0, tx1 = (x0[ids] // TILE).astype(np.int64), (x1[ids] // TILE).astype(np.int64)
    ty0, ty1 = (y0[ids] // TILE).astype(np.int64), (y1[ids] // TILE).astype(np.int64)
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    splat = np.repeat(ids, counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(counts.sum()) - start
    rep_nx = np.repeat(nx, counts)
    tx = np.repeat(tx0, counts) + local % rep_nx
    ty = np.repeat(ty0, counts) + local // rep_nx
    tile = ty * tiles_x + tx
    order = np.lexsort((splat, depth[splat], tile))
    return tile[order], splat[order], n


_MARGIN = 1e-3  # numpy pre-filter is looser than the final in-kernel cut


@torch.no_grad()
def _pixel_lists(means: np.ndarray, cov: np.ndarray, depth: np.ndarray, width: int, height: int):
    """Front-to-back splat list of every covered pixel.

    Tile pairs from :func:`_bin_tiles` are expanded to the pixels of the
    tile that fall inside the splat's bounding box and are kept when the
    pixel is (up to a small margin) inside the 3-sigma ellipse. Returns the
    flat pixel ids (Q,) and a (Q, K) gather table padded with ``n``.
    """
    tile, splat, n = _bin_tiles(means, cov, depth, width, height)
    if len(tile) == 0:
        return np.zeros(0, np.int64), np.zeros((0, 0), np.int64), n
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    mid = 0.5 * (a + c)
    r = SIGMA_CUT * np.sqrt(mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0)))
    tiles_x = (width + TILE - 1) // TILE
    tx, ty = (tile % tiles_x) * TILE, (tile // tiles_x) * TILE
    mx, my, rr = means[splat, 0], means[splat, 1], r[splat]
    x0 = np.maximum(np.maximum(np.ceil(mx - rr), tx), 0).astype(np.int64)
    x1 = np.minimum(np.minimum(np.floor(mx + rr), tx + TILE - 1), width - 1).astype(np.int64)
    y0 = np.maximum(np.maximum(np.ceil(my - rr), ty), 0).astype(np.int64)
    y1 = np.minimum(np.minimum(np.floor(my + rr), ty + TILE - 1), height - 1).astype(np.int64)
    nx, ny = np.maximum(x1 - x0 + 1, 0), np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    rep = lambda v: np.repeat(v, counts)  # noqa: E731
    local = np.arange(counts.sum()) - rep(np.cumsum(counts) - counts)
    sid = rep(splat)
    px = rep(x0) + local % rep(nx)
    py = rep(y0) + local // rep(nx)
    det = a * c - b * b
    dx, dy = px - means[sid, 0], py - means[sid, 1]
    maha = (c[sid] * dx * dx - 2.0 * b[sid] * dx * dy + a[sid] * dy * dy) / det[sid]
    ok = maha <= SIGMA_CUT**2 + _MARGIN
    pix, sid = py[ok] * width + px[ok], sid[ok]
    order = np.lexsort((sid, depth[sid], pix))
    pix, sid = pix[order], sid[order]
    uniq, first, per_pix = np.unique(pix, return_index=True, return_counts=True)
    slot = np.arange(len(pix)) - np.repeat(first, per_pix)
    gather = np.full((len(uniq), int(per_pix.max())), n, dtype=np.int64)
    gather[np.repeat(np.arange(len(uniq)), per_pix), slot] = sid
    return uniq, gather, n


def _pair_terms(means, conic, opacity, gather, pix_xy):
    """Per (pixel, slot) offsets, falloff and alpha. Padded slots get zero alpha."""
    n = means.shape[0]
    valid = gather < n
    g = gather.clamp_max(max(n - 1, 0))
    dx = pix_xy[:, 0:1] - means[:, 0][g]
    dy = pix_xy[:, 1:2] - means[:, 1][g]
    ca, cb, cc = conic[:, 0][g], conic[:, 1][g], conic[:, 2][g]
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    inside = (power.detach() >= -0.5 * SIGMA_CUT**2) & valid
    falloff = torch.where(inside, torch.exp(torch.where(inside, power, 0.0)), 0.0)
    return g, dx, dy, ca, cb, cc, inside, falloff, opacity[g] * falloff


def _transmittance(alpha: torch.Tensor, t_min: float) -> torch.Tensor:
    trans = torch.cumprod(1.0 - alpha, dim=-1)
    t_before = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    return t_before * (t_before.detach() >= t_min)


def composite_autograd(means, conic, opacity, values, gather, pix_xy, t_min):
    """Per-pixel front-to-back compositing, differentiated by torch autograd.

    ``means`` (N, 2), ``conic`` (N, 3) holding the inverse-covariance entries
    (xx, xy, yy), ``opacity`` (N,), ``values`` (N, C); ``gather`` (Q, K) lists
    each pixel's splats front to back, padded with N; ``pix_xy`` (Q, 2).
    Returns (Q, C) accumulated values.
    """
    g, *_, alpha = _pair_terms(means, conic, opacity, gather, pix_xy)
    w = alpha * _transmittance(alpha, t_min)
    return torch.einsum("qk,qkc->qc", w, values[g])


class _Composite(torch.autograd.Function):
    """Same expression as :func:`composite_autograd` with an explicit adjoint.

    For weights ``w_k = a_k T_k`` the derivative of an accumulated value
    with respect to ``a_k`` is ``T_k g_k - S_k / (1 - a_k)`` where ``g_k`` is
    the output adjoint dotted with value ``k`` and ``S_k`` sums ``w_j g_j``
    over the splats behind ``k``. Per-pair adjoints are scattered back to
    splats with one ``index_add``.
    """

    @staticmethod
    def forward(ctx, means, conic, opacity, values, gather, pix_xy, t_min):
        with torch.no_grad():
            g, dx, dy, ca, cb, cc, inside, falloff, alpha = _pair_terms(means, conic, opacity, gather, pix_xy)
            t_kept = _transmittance(alpha, t_min)
            w = alpha * t_kept
            vals = values[g]
            out = torch.einsum("qk,qkc->qc", w, vals)
        ctx.save_for_backward(g, dx, dy, ca, cb, cc, inside, falloff, alpha, t_kept, w, vals)
        ctx.n = means.shape[0]
        return out

    @staticmethod
    def backward(ctx, grad_out):
        g, dx, dy, ca, cb, cc, inside, falloff, alpha, t_kept, w, vals = ctx.saved_tensors
        n, c = ctx.n, vals.shape[-1]
        gk = torch.einsum("qc,qkc->qk", grad_out, vals)
        wg = w * gk
        behind = torch.flip(torch.cumsum(torch.flip(wg, [-1]), -1), [-1])
        behind = torch.cat([behind[..., 1:], torch.zeros_like(behind[..., :1])], dim=-1)
        d_alpha = torch.where(inside, t_kept * gk - behind / (1.0 - alpha).clamp_min(1e-12), 0.0)
        d_pow = d_alpha * alpha
        pair = torch.stack([
            d_pow * (ca * dx + cb * dy),  # mean x
            d_pow * (cc * dy + cb * dx),  # mean y
            d_pow * dx * dx * -0.5,
            d_pow * dx * dy * -1.0,
            d_pow * dy * dy * -0.5,
            d_alpha * falloff,
        ], dim=-1)
        pair = torch.cat([pair, w[..., None] * grad_out[:, None, :]], dim=-1)
        pair = torch.where(inside[..., None], pair, 0.0)
        acc = torch.zeros(n, 6 + c, dtype=pair.dtype).index_add_(0, g.reshape(-1), pair.reshape(-1, 6 + c))
        return acc[:, 0:2], acc[:, 2:5], acc[:, 5], acc[:, 6:], None, None, None


def rasterize_forward(
    splats: ShadedSplats,
    width: int,
    height: int,
    background=None,
    t_min: float = T_MIN,
    *,
    autograd_core: bool = False,
) -> RenderOutput:
    """Composite projected splats front to back, binned over 16x16 tiles.

    A splat covers a pixel when the pixel lies inside its 3-sigma ellipse.
    Per pixel, compositing stops once the transmittance in front of the
    next splat has fallen below ``t_min``.
    """
    _check_size(width, height)
    width, height = int(width), int(height)
    dtype = splats.means2d.dtype
    bg = torch.zeros(3, dtype=dtype) if background is None else torch.as_tensor(background, dtype=dtype)
    npix = width * height

    pix, gather, n = _pixel_lists(
        splats.means2d.detach().numpy(), splats.cov2d.detach().numpy(), splats.depth.detach().numpy(),
        width, height,
    )
    out = {
        "rgb": torch.zeros(npix, 3, dtype=dtype),
        "alpha": torch.zeros(npix, dtype=dtype),
        "depth": torch.zeros(npix, dtype=dtype),
        "normal_map": torch.zeros(npix, 3, dtype=dtype),
        "material_map": torch.zeros(npix, 3, dtype=dtype),
        "static_mask": torch.zeros(npix, dtype=dtype),
    }
    if len(pix) and n:
        ia, ib, ic, _ = _conics(splats.cov2d)
        st = splats.is_static.to(dtype)[:, None]
        values = torch.cat([
            splats.color, splats.normal * st, splats.material * st,
            splats.depth[:, None], st, torch.ones_like(st),
        ], dim=-1)
        pix_xy = torch.from_numpy(np.stack([pix % width, pix // width], 1).astype(np.float64)).to(dtype)
        composite = composite_autograd if autograd_core else _Composite.apply
        acc = composite(splats.means2d, torch.stack([ia, ib, ic], 1), splats.opacity, values,
                        torch.from_numpy(gather), pix_xy, float(t_min))
        flat = torch.from_numpy(pix)
        for name, lo, hi in (("rgb", 0, 3), ("normal_map", 3, 6), ("material_map", 6, 9),
                             ("depth", 9, 10), ("static_mask", 10, 11), ("alpha", 11, 12)):
            v = acc[:, lo:hi] if hi - lo == 3 else acc[:, lo]
            out[name] = out[name].index_put((flat,), v)

    out["rgb"] = out["rgb"] + (1.0 - out["alpha"])[:, None] * bg
    shaped = {
        k: v.reshape(height, width, 3) if v.dim() == 2 else v.reshape(height, width) for k, v in out.items()
    }
    return RenderOutput(**shaped, cache={"splats": splats, "size": (width, height), "consumed": False})


def rasterize_backward(render: RenderOutput, adjoints: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Adjoints of the splat inputs given adjoints of the output layers.

    Layers missing from ``adjoints`` contribute nothing. Fields of the
    forward inputs that do not require grad come back as zeros.
    """
    cache = render.cache
    if not cache or "splats" not in cache:
        raise ContractViolationError("render output carries no forward cache")
    if cache.get("consumed"):
        raise ContractViolationError("forward cache already consumed by a backward pass")
    splats: ShadedSplats = cache["splats"]
    outs, grads_out = [], []
    for name, adj in adjoints.items():
        if name not in LAYERS:
            raise ContractViolationError(f"unknown render layer {name!r}")
        layer = getattr(render, name)
        adj = torch.as_tensor(adj, dtype=layer.dtype)
        if adj.shape != layer.shape:
            raise ContractViolationError(f"adjoint for {name} has shape {tuple(adj.shape)}, expected {tuple(layer.shape)}")
        if layer.requires_grad:
            outs.append(layer)
            grads_out.append(adj)
    inputs = [getattr(splats, f) for f in SPLAT_FIELDS]
    wanted = [i for i, t in enumerate(inputs) if t.requires_grad]
    result = {f: torch.zeros_like(getattr(splats, f)) for f in SPLAT_FIELDS}
    if outs and wanted:
        grads = torch.autograd.grad(outs, [inputs[i] for i in wanted], grads_out, allow_unused=True)
        for i, g in zip(wanted, grads):
            if g is not None:
                result[SPLAT_FIELDS[i]] = g
    cache["consumed"] = True
    return result


def reference_render(splats: ShadedSplats, width: int, height: int, background=None) -> dict[str, np.ndarray]:
    """Brute-force per-pixel compositing over a single global depth sort."""
    _check_size(width, height)
    width, height = int(width), int(height)
    f = {name: getattr(splats, name).detach().cpu().numpy().astype(np.float64) for name in SPLAT_FIELDS}
    is_static = splats.is_static.detach().cpu().numpy().astype(np.float64)
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    T = np.ones((height, width))
    rgb = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    normal = np.zeros((height, width, 3))
    material = np.zeros((height, width, 3))
    static = np.zeros((height, width))
    n = len(f["depth"])
    for i in np.lexsort((np.arange(n), f["depth"])):
        inv = np.linalg.inv(f["cov2d"][i])
        dx = xs - f["means2d"][i, 0]
        dy = ys - f["means2d"][i, 1]
        maha = inv[0, 0] * dx * dx + 2.0 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        a = np.where(maha <= SIGMA_CUT**2, f["opacity"][i] * np.exp(-0.5 * maha), 0.0)
        wgt = a * T
        rgb += wgt[..., None] * f["color"][i]
        depth += wgt * f["depth"][i]
        normal += wgt[..., None] * f["normal"][i] * is_static[i]
        material += wgt[..., None] * f["material"][i] * is_static[i]
        static += wgt * is_static[i]
        T = T * (1.0 - a)
    alpha = 1.0 - T
    rgb += T[..., None] * bg
    return {
        "rgb": rgb, "alpha": alpha, "depth": depth,
        "normal_map": normal, "material_map": material, "static_mask": static,
    }
