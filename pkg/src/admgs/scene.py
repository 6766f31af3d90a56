"""Multi-traversal scene graph: static, sky and object nodes.

Gaussians are stored structure-of-arrays in :class:`GaussianSet`; every
learnable field is a leaf tensor so the optimizer can walk them by name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import torch

from .errors import InvalidArgumentError, MissingTraversalError
from .fields import NeuralFieldSet, time_encoding
from .geom import axis_angle_quat, quat_multiply, quat_to_rotmat, slerp

GAUSSIAN_FIELDS = ("positions", "log_scales", "rotations", "opacity_logits", "features", "color_logits")


class NodeTag(IntEnum):
    STATIC = 0
    OBJECT = 1
    SKY = 2


@dataclass
class GaussianPrimitive:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    f_geo: np.ndarray


@dataclass
class GaussianSet:
    """A batch of gaussians. ``features`` is f_geo for static splats and the
    optional ``color_logits`` give direct colour to object splats."""

    positions: torch.Tensor
    log_scales: torch.Tensor
    rotations: torch.Tensor
    opacity_logits: torch.Tensor
    features: torch.Tensor
    color_logits: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.positions[i].detach().numpy(),
            self.log_scales[i].detach().numpy(),
            self.rotations[i].detach().numpy(),
            float(self.opacity_logits[i].detach()),
            self.features[i].detach().numpy(),
        )

    @classmethod
    def create(cls, positions, log_scales, rotations=None, opacity_logits=None, features=None,
               color_logits=None, *, feature_dim: int = 16, dtype=torch.float64) -> "GaussianSet":
        def t(x):
            return torch.as_tensor(np.asarray(x, dtype=np.float64)).to(dtype).clone().requires_grad_()

        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if opacity_logits is None:
            opacity_logits = np.zeros(n)
        if features is None:
            features = np.zeros((n, feature_dim))
        return cls(
            t(positions),
            t(np.asarray(log_scales, dtype=np.float64).reshape(n, 3)),
            t(np.asarray(rotations, dtype=np.float64).reshape(n, 4)),
            t(np.asarray(opacity_logits, dtype=np.float64).reshape(n)),
            t(np.asarray(features, dtype=np.float64).reshape(n, -1 if n else feature_dim)),
            None if color_logits is None else t(np.asarray(color_logits, dtype=np.float64).reshape(n, 3)),
        )

    @classmethod
    def from_primitives(cls, prims: list[GaussianPrimitive], dtype=torch.float64) -> "GaussianSet":
        return cls.create(
            [p.position for p in prims], [p.log_scale for p in prims], [p.rotation for p in prims],
            [p.opacity_logit for p in prims], [p.f_geo for p in prims], dtype=dtype,
        )

    def named_tensors(self, prefix: str) -> dict[str, torch.Tensor]:
        out = {}
        for name in GAUSSIAN_FIELDS:
            value = getattr(self, name)
            if value is not None:
                out[f"{prefix}.{name}"] = value
        return out

    @torch.no_grad()
    def renormalize_rotations(self) -> None:
        self.rotations /= torch.linalg.vector_norm(self.rotations, dim=-1, keepdim=True).clamp_min(1e-12)


@dataclass
class RigidTransform:
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        R = quat_to_rotmat(torch.as_tensor(self.rotation, dtype=points.dtype))
        return points @ R.T + torch.as_tensor(self.translation, dtype=points.dtype)


@dataclass
class StaticNode:
    gaussians: GaussianSet

    def __post_init__(self):
        if len(self.gaussians) == 0:
            raise InvalidArgumentError("static node needs at least one gaussian")


@dataclass
class SkyNode:
    gaussians: GaussianSet
    radius: float


@dataclass
class ObjectNode:
    canonical: GaussianSet
    trajectory: list[tuple[float, RigidTransform]]
    object_feature: torch.Tensor

    def __post_init__(self):
        times = [t for t, _ in self.trajectory]
        if not times:
            raise InvalidArgumentError("object trajectory must not be empty")
        if any(b <= a for a, b in zip(times[:-1], times[1:])):
            raise InvalidArgumentError("trajectory timestamps must be strictly increasing")


@dataclass
class TraversalTable:
    embeddings: torch.Tensor  # (M, D_emb)
    affine_scale: torch.Tensor  # (M, 3)
    affine_bias: torch.Tensor  # (M, 3)

    @classmethod
    def create(cls, count: int, emb_dim: int = 16, *, seed: int = 0, dtype=torch.float64, init_std: float = 0.1):
        gen = torch.Generator().manual_seed(seed)
        emb = torch.randn(count, emb_dim, generator=gen, dtype=torch.float64) * init_std
        return cls(
            emb.to(dtype).requires_grad_(),
            torch.ones(count, 3, dtype=dtype).requires_grad_(),
            torch.zeros(count, 3, dtype=dtype).requires_grad_(),
        )

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def check(self, m: int) -> int:
        if not isinstance(m, (int, np.integer)) or not 0 <= m < len(self):
            raise MissingTraversalError(m)
        return int(m)

    def embedding(self, m: int) -> torch.Tensor:
        return self.embeddings[self.check(m)]

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {
            "traversal.embeddings": self.embeddings,
            "traversal.affine_scale": self.affine_scale,
            "traversal.affine_bias": self.affine_bias,
        }


@dataclass
class SceneGraph:
    static: StaticNode
    sky: SkyNode
    objects: list[ObjectNode] = field(default_factory=list)
    traversals: TraversalTable | None = None
    rigid_objects: bool = True

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = self.static.gaussians.named_tensors("static")
        out.update(self.sky.gaussians.named_tensors("sky"))
        for i, obj in enumerate(self.objects):
            out.update(obj.canonical.named_tensors(f"object{i}"))
            out[f"object{i}.feature"] = obj.object_feature
        out.update(self.traversals.named_tensors())
        return out

    def counts(self) -> dict[str, int]:
        return {
            "static": len(self.static.gaussians),
            "sky": len(self.sky.gaussians),
            "objects": [len(o.canonical) for o in self.objects],
        }


@dataclass
class WorldSplats:
    """Flat world-space splat list in static, objects, sky order."""

    positions: torch.Tensor
    log_scales: torch.Tensor
    rotations: torch.Tensor
    opacity_logits: torch.Tensor
    node_tag: torch.Tensor  # (N,) int64 of NodeTag
    source_index: torch.Tensor  # (N,) index inside the owning node
    object_index: torch.Tensor  # (N,) owning object, -1 otherwise
    features: torch.Tensor | None = None  # static f_geo rows only
    object_colors: torch.Tensor | None = None  # colour logits of object rows

    def __len__(self) -> int:
        return self.positions.shape[0]


def object_pose_at(trajectory: list[tuple[float, RigidTransform]], tau: float) -> RigidTransform | None:
    """Pose at ``tau``; ``None`` when ``tau`` lies outside the trajectory span."""
    if not trajectory:
        raise InvalidArgumentError("empty trajectory")
    times = [t for t, _ in trajectory]
    if tau < times[0] or tau > times[-1]:
        return None
    for t, pose in trajectory:
        if t == tau:
            return pose
    k = int(np.searchsorted(times, tau)) - 1
    (t0, p0), (t1, p1) = trajectory[k], trajectory[k + 1]
    w = (tau - t0) / (t1 - t0)
    return RigidTransform(slerp(p0.rotation, p1.rotation, w), (1 - w) * p0.translation + w * p1.translation)


def apply_deformation(obj: ObjectNode, tau: float, fields: NeuralFieldSet | None, rigid: bool = False) -> torch.Tensor:
    """Per-primitive canonical-frame offsets at time ``tau``."""
    pos = obj.canonical.positions
    if rigid or fields is None:
        return torch.zeros_like(pos)
    t0, t1 = obj.trajectory[0][0], obj.trajectory[-1][0]
    t_norm = 0.0 if t1 == t0 else (tau - t0) / (t1 - t0)
    enc = time_encoding(torch.tensor([t_norm], dtype=pos.dtype)).expand(pos.shape[0], -1)
    feat = obj.object_feature.to(pos.dtype).reshape(1, -1).expand(pos.shape[0], -1)
    return fields.deform(torch.cat([pos, enc, feat], dim=-1))


def compose_world(scene: SceneGraph, m: int, tau: float, fields: NeuralFieldSet | None = None) -> WorldSplats:
    scene.traversals.check(m)
    g = scene.static.gaussians
    dtype = g.positions.dtype
    parts = {k: [getattr(g, k)] for k in ("positions", "log_scales", "rotations", "opacity_logits")}
    tags = [torch.full((len(g),), NodeTag.STATIC, dtype=torch.int64)]
    src = [torch.arange(len(g))]
    owner = [torch.full((len(g),), -1, dtype=torch.int64)]
    colors = []
    for i, obj in enumerate(scene.objects):
        pose = object_pose_at(obj.trajectory, tau)
        if pose is None:
            continue
        c = obj.canonical
        local = c.positions + apply_deformation(obj, tau, fields, rigid=scene.rigid_objects)
        parts["positions"].append(pose.apply(local))
        parts["log_scales"].append(c.log_scales)
        q = torch.as_tensor(pose.rotation, dtype=dtype).expand(len(c), 4)
        parts["rotations"].append(quat_multiply(q, c.rotations))
        parts["opacity_logits"].append(c.opacity_logits)
        tags.append(torch.full((len(c),), NodeTag.OBJECT, dtype=torch.int64))
        src.append(torch.arange(len(c)))
        owner.append(torch.full((len(c),), i, dtype=torch.int64))
        colors.append(c.color_logits if c.color_logits is not None else torch.zeros(len(c), 3, dtype=dtype))
    s = scene.sky.gaussians
    for k in parts:
        parts[k].append(getattr(s, k))
    tags.append(torch.full((len(s),), NodeTag.SKY, dtype=torch.int64))
    src.append(torch.arange(len(s)))
    owner.append(torch.full((len(s),), -1, dtype=torch.int64))
    return WorldSplats(
        **{k: torch.cat(v) for k, v in parts.items()},
        node_tag=torch.cat(tags),
        source_index=torch.cat(src),
        object_index=torch.cat(owner),
        features=g.features,
        object_colors=torch.cat(colors) if colors else torch.zeros(0, 3, dtype=dtype),
    )


def fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count, dtype=np.float64) + 0.5
    z = 1.0 - 2.0 * i / count
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def lattice_spacing(count: int) -> float:
    """Expected angular spacing (radians) of a ``count``-point sphere lattice."""
    return math.sqrt(4.0 * math.pi / count)


def _frame_quat(normal: np.ndarray) -> np.ndarray:
    """Quaternion whose rotation maps the local z axis onto ``normal``."""
    from .geom import rotmat_to_quat

    z = normal / np.linalg.norm(normal)
    helper = np.array([1.0, 0, 0]) if abs(z[0]) < 0.9 else np.array([0, 1.0, 0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return rotmat_to_quat(np.stack([x, y, z], axis=1))


def sky_placement(radius: float, count: int, seed: int = 0, *, dtype=torch.float64,
                  opacity_logit: float = 4.0, feature_dim: int = 0) -> SkyNode:
    """Gaussians on a Fibonacci lattice of the far-field sphere.

    The tangential scales are 1.5x the lattice spacing, so neighbours
    overlap heavily and the sphere is covered without gaps. The radial axis
    is a hundred times thinner.
    ``seed`` only rotates the lattice about z, so the layout is a
    deterministic function of ``(count, seed)``.
    """
    if count < 1:
        raise InvalidArgumentError("sky needs at least one gaussian")
    if radius <= 0:
        raise InvalidArgumentError("sky radius must be positive")
    dirs = fibonacci_sphere(count)
    spin = np.random.default_rng(seed).uniform(0, 2 * math.pi)
    c, s = math.cos(spin), math.sin(spin)
    dirs = dirs @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]]).T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    positions = radius * dirs
    tangential = 1.5 * lattice_spacing(count) * radius
    log_scale = np.log([tangential, tangential, tangential / 100.0])
    rotations = np.stack([_frame_quat(d) for d in dirs])
    g = GaussianSet.create(
        positions, np.tile(log_scale, (count, 1)), rotations,
        np.full(count, opacity_logit), np.zeros((count, feature_dim)), dtype=dtype,
    )
    return SkyNode(g, float(radius))


def rotation_about_z(angle: float) -> RigidTransform:
    return RigidTransform(axis_angle_quat([0, 0, 1], angle), np.zeros(3))
