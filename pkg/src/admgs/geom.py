"""Vector, rotation and camera math plus the splat projection.

Everything here works on torch tensors with arbitrary leading batch
dimensions so the same code serves the unit-level API and the batched
training pipeline. Array-likes that are not tensors are promoted to float64
tensors and the result is handed back as a numpy array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .errors import DegenerateGeometryError, InvalidArgumentError

LOW_PASS = 0.3  # px^2 added to every projected covariance
NEAR_PLANE = 0.01
UNIT_TOL = 1e-6
MAX_SH_DEGREE = 4

# Real orthonormal SH normalisation constants, degree 0..4.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
SH_C4 = (
    2.5033429417967046,
    -1.7701307697799304,
    0.9461746957575601,
    -0.6690465435572892,
    0.10578554691520431,
    -0.6690465435572892,
    0.47308734787878004,
    -1.7701307697799304,
    0.6258357354491761,
)


def _as_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _out(x: torch.Tensor, to_numpy: bool):
    return x.detach().numpy() if to_numpy else x


def _check_unit(v: torch.Tensor, name: str, tol: float = UNIT_TOL) -> None:
    norms = torch.linalg.vector_norm(v.detach(), dim=-1)
    if v.shape[-1] != 3 or not bool(torch.all((norms - 1.0).abs() <= tol)):
        raise InvalidArgumentError(f"{name} must be a unit 3-vector")


def normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return v / torch.linalg.vector_norm(v, dim=-1, keepdim=True).clamp_min(eps)


def sh_basis(dirs, degree: int, check: bool = True):
    """Real orthonormal spherical harmonics up to ``degree``.

    Returns ``(degree + 1) ** 2`` values per direction ordered by ``l`` then
    ``m = -l..l``; the normalisation makes the basis orthonormal over the
    unit sphere.
    """
    if not isinstance(degree, (int, np.integer)) or not 0 <= degree <= MAX_SH_DEGREE:
        raise InvalidArgumentError(f"SH degree must be in [0, {MAX_SH_DEGREE}], got {degree!r}")
    d, to_np = _as_tensor(dirs)
    if check:
        _check_unit(d, "dir")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out += [
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * xy * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    if degree >= 4:
        out += [
            SH_C4[0] * xy * (xx - yy),
            SH_C4[1] * yz * (3 * xx - yy),
            SH_C4[2] * xy * (7 * zz - 1),
            SH_C4[3] * yz * (7 * zz - 3),
            SH_C4[4] * (zz * (35 * zz - 30) + 3),
            SH_C4[5] * xz * (7 * zz - 3),
            SH_C4[6] * (xx - yy) * (7 * zz - 1),
            SH_C4[7] * xz * (xx - 3 * yy),
            SH_C4[8] * (xx * (xx - 3 * yy) - yy * (3 * xx - yy)),
        ]
    return _out(torch.stack(out, dim=-1), to_np)


def reflect(n, v, check: bool = True):
    """Mirror ``v`` about the normal ``n``: ``2 (n.v) n - v``."""
    nt, to_np = _as_tensor(n)
    vt, _ = _as_tensor(v)
    if check:
        _check_unit(nt, "n")
        _check_unit(vt, "v")
    ndotv = (nt * vt).sum(-1, keepdim=True)
    return _out(2.0 * ndotv * nt - vt, to_np)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrix of a (w, x, y, z) quaternion; the input is normalised."""
    q = normalize(q)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R) -> np.ndarray:
    """(w, x, y, z) quaternion with non-negative w for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def slerp(q0, q1, t: float) -> np.ndarray:
    """Spherical interpolation between unit quaternions along the short arc."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1, dot = -q1, -dot
    if dot > 1.0 - 1e-12:
        q = q0 + t * (q1 - q0)
        return q / np.linalg.norm(q)
    theta = math.acos(min(dot, 1.0))
    s = math.sin(theta)
    return (math.sin((1 - t) * theta) * q0 + math.sin(t * theta) * q1) / s


def _check_quat(q: torch.Tensor) -> None:
    norms = torch.linalg.vector_norm(q.detach(), dim=-1)
    if not bool(torch.all((norms - 1.0).abs() <= 1e-6)):
        raise InvalidArgumentError("rotation quaternion must be unit-norm within 1e-6")


def covariance_from(log_scale, rotation, check: bool = True):
    """``R diag(exp(log_scale))^2 R^T``, symmetrised so storage is exactly symmetric."""
    s, to_np = _as_tensor(log_scale)
    q, _ = _as_tensor(rotation)
    if check:
        _check_quat(q)
    R = quat_to_rotmat(q)
    M = R * torch.exp(s).unsqueeze(-2)
    cov = M @ M.transpose(-1, -2)
    return _out(0.5 * (cov + cov.transpose(-1, -2)), to_np)


def shortest_axis_normal(log_scale, rotation, gaussian_center, camera_center, check: bool = True):
    """Rotation column of the smallest scale, flipped to face the camera.

    Ties pick the lowest axis index.
    """
    s, to_np = _as_tensor(log_scale)
    q, _ = _as_tensor(rotation)
    c, _ = _as_tensor(gaussian_center)
    cam, _ = _as_tensor(camera_center)
    if check:
        _check_quat(q)
    to_cam = cam.to(c.dtype) - c
    if check and bool(torch.any(torch.linalg.vector_norm(to_cam.detach(), dim=-1) == 0)):
        raise DegenerateGeometryError("camera center coincides with the gaussian center")
    R = quat_to_rotmat(q)
    idx = torch.argmin(s.detach(), dim=-1)
    idx = idx.unsqueeze(-1).unsqueeze(-1).expand(R.shape[:-1] + (1,))
    axis = torch.gather(R, -1, idx).squeeze(-1)
    sign = torch.where((axis * to_cam).sum(-1, keepdim=True).detach() < 0, -1.0, 1.0).to(axis.dtype)
    return _out(axis * sign, to_np)


@dataclass
class Camera:
    """Pinhole camera with an OpenCV-style frame (x right, y down, z forward).

    Pixel centres sit at integer coordinates, so pixel ``(row, col)`` maps
    to image point ``(col, row)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive")
        if not (int(self.width) > 0 and int(self.height) > 0):
            raise InvalidArgumentError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError("principal point outside the image")
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidArgumentError("camera rotation must be orthonormal with det +1")
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, fx, fy=None, width, height, cx=None, cy=None):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise DegenerateGeometryError("view direction parallel to up vector")
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(
            fx=fx,
            fy=fx if fy is None else fy,
            cx=(width - 1) / 2 if cx is None else cx,
            cy=(height - 1) / 2 if cy is None else cy,
            width=width,
            height=height,
            rotation=R,
            translation=-R @ eye,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(**d)

    def ray_directions(self) -> np.ndarray:
        """Unit world-space ray directions, shape (height, width, 3)."""
        cols, rows = np.meshgrid(np.arange(self.width), np.arange(self.height))
        d_cam = np.stack(
            [(cols - self.cx) / self.fx, (rows - self.cy) / self.fy, np.ones(cols.shape)], axis=-1
        )
        d = d_cam @ self.rotation  # R^T applied row-wise
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


class Splat2D(NamedTuple):
    mean: torch.Tensor
    cov2d: torch.Tensor
    depth: torch.Tensor


class Projection(NamedTuple):
    means2d: torch.Tensor  # (N, 2)
    cov2d: torch.Tensor  # (N, 2, 2)
    depth: torch.Tensor  # (N,)
    visible: torch.Tensor  # (N,) bool


def project_gaussians(centers: torch.Tensor, covs: torch.Tensor, camera: Camera) -> Projection:
    """EWA projection of a batch of 3D gaussians.

    Splats with camera depth at or below the near plane are flagged
    invisible; their returned values are finite placeholders.
    """
    W = torch.as_tensor(camera.rotation, dtype=centers.dtype)
    t = torch.as_tensor(camera.translation, dtype=centers.dtype)
    p = centers @ W.T + t
    z = p[:, 2]
    visible = z.detach() > NEAR_PLANE
    zs = torch.where(visible, z, torch.ones_like(z))
    x, y = p[:, 0], p[:, 1]
    means = torch.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], dim=-1)
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [
            camera.fx / zs, zero, -camera.fx * x / (zs * zs),
            zero, camera.fy / zs, -camera.fy * y / (zs * zs),
        ],
        dim=-1,
    ).reshape(-1, 2, 3)
    T = J @ W
    cov2d = T @ covs @ T.transpose(-1, -2)
    cov2d = 0.5 * (cov2d + cov2d.transpose(-1, -2))
    cov2d = cov2d + LOW_PASS * torch.eye(2, dtype=centers.dtype)
    return Projection(means, cov2d, z, visible)


def project_gaussian(center, cov, camera: Camera) -> Splat2D | None:
    """Single-splat projection; ``None`` means the splat was culled."""
    c, _ = _as_tensor(center)
    S, _ = _as_tensor(cov)
    proj = project_gaussians(c.reshape(1, 3), S.reshape(1, 3, 3), camera)
    if not bool(proj.visible[0]):
        return None
    return Splat2D(proj.means2d[0], proj.cov2d[0], proj.depth[0])
