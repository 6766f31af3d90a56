"""Training losses and image-quality metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError, TrainingDivergenceError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_decomp: float = 0.05
    lambda_scale: float = 0.01
    delta: float = 1.0
    normal_enabled: bool = True  # False keeps material supervision only

    def __post_init__(self):
        if self.delta <= 0:
            raise InvalidArgumentError("flatness threshold delta must be positive")
        for name in ("lambda_ssim", "lambda_decomp", "lambda_scale"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _as_chw(img: torch.Tensor) -> torch.Tensor:
    return img.unsqueeze(0) if img.dim() == 2 else img.permute(2, 0, 1)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over all fully-contained 11x11 windows, averaged over channels.

    Images are (H, W) or (H, W, C) with unit dynamic range.
    """
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    _same_shape(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidArgumentError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    x, y = _as_chw(a).unsqueeze(1), _as_chw(b).unsqueeze(1)  # (C, 1, H, W)
    win = gaussian_window(dtype=x.dtype)[None, None]
    mu_x, mu_y = F.conv2d(x, win), F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x * mu_x
    syy = F.conv2d(y * y, win) - mu_y * mu_y
    sxy = F.conv2d(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def photometric_loss(pred: torch.Tensor, gt: torch.Tensor, lambda_ssim: float = 0.2) -> torch.Tensor:
    _same_shape(pred, gt)
    l1 = (pred - gt).abs().mean()
    if lambda_ssim == 0:
        return l1
    return (1 - lambda_ssim) * l1 + lambda_ssim * (1 - ssim(pred, gt))


def _masked_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target)
    mask = torch.as_tensor(mask, dtype=pred.dtype)
    if mask.shape != pred.shape[:2]:
        raise InvalidArgumentError("mask must match the image height and width")
    mass = mask.sum()
    if float(mass) == 0.0:
        return pred.sum() * 0.0
    return ((pred - target).abs().sum(-1) * mask).sum() / mass


def normal_loss(pred_normal_map, pseudo_normal_map, mask_normal) -> torch.Tensor:
    """Masked L1 between normal maps, divided by the mask mass."""
    return _masked_l1(pred_normal_map, pseudo_normal_map, mask_normal)


def material_loss(pred_material_map, pseudo_material_map, mask_material) -> torch.Tensor:
    return _masked_l1(pred_material_map, pseudo_material_map, mask_material)


def scale_flatness_loss(log_scales: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Hinge on the log ratio of largest to smallest scale, averaged over splats.

    Ties are broken by a stable sort, so on an isotropic splat the smallest
    is the first axis and the largest the last. With ``max``/``min`` both
    would pick the same axis and the gradient would vanish exactly there.
    """
    if log_scales.shape[0] == 0:
        raise InvalidArgumentError("flatness loss needs at least one gaussian")
    ordered = torch.sort(log_scales, dim=-1, stable=True).values
    spread = ordered[..., -1] - ordered[..., 0]
    return torch.relu(delta - spread).mean()


COMPONENTS = ("photo", "material", "normal", "scale")


def total_loss(components: dict[str, torch.Tensor], weights: LossWeights, lambda_decomp: float | None = None):
    """Photometric term plus weighted decomposition and flatness terms.

    ``lambda_decomp`` overrides the configured weight (used by the warmup
    schedule).
    """
    for name in COMPONENTS:
        value = components[name]
        if not math.isfinite(float(value.detach())):
            raise TrainingDivergenceError(name, {k: float(v.detach()) for k, v in components.items()})
    ld = weights.lambda_decomp if lambda_decomp is None else lambda_decomp
    decomp = components["material"] + (components["normal"] if weights.normal_enabled else 0.0)
    return (
        components["photo"]
        + ld * decomp
        + weights.lambda_scale * components["scale"]
    )


def psnr(pred, gt) -> float:
    """PSNR in dB for unit dynamic range; ``inf`` for identical images."""
    pred, gt = torch.as_tensor(pred, dtype=torch.float64), torch.as_tensor(gt, dtype=torch.float64)
    _same_shape(pred, gt)
    return psnr_from_mse(float(((pred - gt) ** 2).mean()))


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else -10.0 * math.log10(mse)
