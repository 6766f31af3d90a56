"""Procedural multi-traversal datasets with known material x light factorisation.

Scenes are built from rectangles on the ground plane, axis-aligned boxes
and spheres with constant albedo. Each traversal has its own directional
sun and ambient term; frames are ray cast analytically, so every pixel
satisfies ``rgb = material * light`` before 8-bit quantisation.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .geom import Camera
from .io import write_pfm, write_ply, write_png

ALBEDO_FLOOR = 0.05
SHADOW_EPS = 1e-4
MANIFEST_VERSION = 1


@dataclass
class Primitive:
    kind: str  # "plane" | "box" | "sphere"
    params: dict
    albedo: tuple[float, float, float]
    spec_strength: float = 0.0
    shininess: float = 1.0
    present_in: list[int] | None = None  # None = every traversal
    name: str = ""

    def present(self, traversal: int) -> bool:
        return self.present_in is None or traversal in self.present_in

    @property
    def transient(self) -> bool:
        return self.present_in is not None


@dataclass
class Lighting:
    sun_direction: tuple[float, float, float]  # unit vector pointing at the sun
    sun_intensity: tuple[float, float, float]
    ambient: tuple[float, float, float]
    sky_zenith: tuple[float, float, float] = (0.35, 0.55, 0.85)
    sky_horizon: tuple[float, float, float] = (0.75, 0.8, 0.85)


@dataclass
class FrameSpec:
    eye: tuple[float, float, float]
    target: tuple[float, float, float]
    timestamp: float
    split: str = "train"


@dataclass
class SyntheticSceneSpec:
    name: str
    primitives: list[Primitive]
    lighting: list[Lighting]
    frames: list[list[FrameSpec]]  # per traversal
    width: int = 64
    height: int = 48
    focal: float = 60.0
    init_points: int = 2000
    seed: int = 0
    supersample: int = 1

    @property
    def num_traversals(self) -> int:
        return len(self.lighting)

    def validate(self) -> None:
        if len(self.frames) != self.num_traversals:
            raise InvalidArgumentError("need one frame list per traversal")
        for light in self.lighting:
            d = np.asarray(light.sun_direction)
            if abs(np.linalg.norm(d) - 1.0) > 1e-9:
                raise InvalidArgumentError("sun direction must be unit length")
            if min(light.sun_intensity) <= 0 or min(light.ambient) < 0:
                raise InvalidArgumentError("sun intensity must be positive and ambient non-negative")
        if self.num_traversals >= 2:
            for i in range(self.num_traversals):
                for j in range(i + 1, self.num_traversals):
                    a = np.asarray(self.lighting[i].sun_direction)
                    b = np.asarray(self.lighting[j].sun_direction)
                    if math.degrees(math.acos(np.clip(a @ b, -1, 1))) < 10.0:
                        raise InvalidArgumentError("sun directions must differ pairwise by at least 10 degrees")
            for t, frames in enumerate(self.frames):
                if not any(f.split == "test" for f in frames):
                    raise InvalidArgumentError(f"traversal {t} has no test frame")
        for p in self.primitives:
            if p.kind not in ("plane", "box", "sphere"):
                raise InvalidArgumentError(f"unknown primitive kind {p.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        d["primitives"] = [Primitive(**p) for p in d["primitives"]]
        d["lighting"] = [Lighting(**l) for l in d["lighting"]]
        d["frames"] = [[FrameSpec(**f) for f in fr] for fr in d["frames"]]
        return cls(**d)

    def camera(self, traversal: int, frame: int) -> Camera:
        f = self.frames[traversal][frame]
        return Camera.look_at(f.eye, f.target, fx=self.focal, width=self.width, height=self.height)


def spec_hash(spec: SyntheticSceneSpec) -> str:
    blob = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- ray casting


def _intersect(p: Primitive, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest positive hit distance (inf on miss) and outward normal."""
    n = o.shape[0]
    t = np.full(n, np.inf)
    nrm = np.zeros((n, 3))
    if p.kind == "plane":
        z = p.params.get("z", 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            th = (z - o[:, 2]) / d[:, 2]
        hit = o + th[:, None] * d
        (x0, x1), (y0, y1) = p.params["x"], p.params["y"]
        ok = (th > 0) & np.isfinite(th) & (hit[:, 0] >= x0) & (hit[:, 0] < x1) & (hit[:, 1] >= y0) & (hit[:, 1] < y1)
        t[ok] = th[ok]
        nrm[:, 2] = 1.0
    elif p.kind == "box":
        lo, hi = np.asarray(p.params["min"], float), np.asarray(p.params["max"], float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0, t1 = (lo - o) * inv, (hi - o) * inv
        tmin, tmax = np.minimum(t0, t1), np.maximum(t0, t1)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        near, far = tmin.max(1), tmax.min(1)
        axis = tmin.argmax(1)
        ok = (near <= far) & (near > 0)
        t[ok] = near[ok]
        sgn = -np.sign(d[np.arange(n), axis])
        nrm[np.arange(n), axis] = sgn
    else:
        c, r = np.asarray(p.params["center"], float), float(p.params["radius"])
        oc = o - c
        b = (oc * d).sum(1)
        disc = b * b - ((oc * oc).sum(1) - r * r)
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_near, t_far = -b - sq, -b + sq
        th = np.where(t_near > 0, t_near, t_far)
        ok = (disc >= 0) & (th > 0)
        t[ok] = th[ok]
        nrm = (o + np.where(ok, th, 0.0)[:, None] * d - c) / r
    return t, nrm


def cast(prims: list[Primitive], traversal: int, o: np.ndarray, d: np.ndarray):
    """Closest hit per ray: distance, primitive index (-1 on miss), normal."""
    n = o.shape[0]
    best = np.full(n, np.inf)
    idx = np.full(n, -1)
    normal = np.zeros((n, 3))
    for k, p in enumerate(prims):
        if not p.present(traversal):
            continue
        t, nrm = _intersect(p, o, d)
        closer = t < best
        best[closer] = t[closer]
        idx[closer] = k
        normal[closer] = nrm[closer]
    return best, idx, normal


def occluded(prims: list[Primitive], traversal: int, points: np.ndarray, normals: np.ndarray, sun: np.ndarray):
    o = points + SHADOW_EPS * normals
    d = np.broadcast_to(sun, points.shape)
    t, _, _ = cast(prims, traversal, o, d)
    return np.isfinite(t)


def analytic_shade(normal, albedo, spec, light: Lighting, view_dir, shadow=None):
    """Colour and light factor of surface points; ``color == albedo * light``.

    ``spec`` is ``(strength, shininess)``; ``shadow`` is 1 where the sun is
    blocked. The specular lobe is divided by the floored albedo so it lives
    in the light factor.
    """
    n = np.atleast_2d(np.asarray(normal, dtype=np.float64))
    v = np.atleast_2d(np.asarray(view_dir, dtype=np.float64))
    alb = np.atleast_2d(np.asarray(albedo, dtype=np.float64))
    strength = np.asarray(spec[0], dtype=np.float64).reshape(-1, 1)
    shininess = np.asarray(spec[1], dtype=np.float64).reshape(-1, 1)
    lit = np.ones((n.shape[0], 1)) if shadow is None else 1.0 - np.asarray(shadow, dtype=np.float64).reshape(-1, 1)
    sun_dir = np.asarray(light.sun_direction, dtype=np.float64)
    sun = np.asarray(light.sun_intensity, dtype=np.float64)
    ndotl = (n @ sun_dir).reshape(-1, 1)
    h = sun_dir + v
    h /= np.linalg.norm(h, axis=1, keepdims=True).clip(1e-12)
    ndoth = np.maximum((n * h).sum(1, keepdims=True), 0.0)
    facing = (ndotl > 0).astype(np.float64)
    diffuse = sun * np.maximum(ndotl, 0.0) * lit
    specular = facing * lit * strength * sun * ndoth**shininess / np.maximum(alb, ALBEDO_FLOOR)
    light_value = np.asarray(light.ambient) + diffuse + specular
    color = alb * light_value
    return color, light_value


def _render_samples(spec: SyntheticSceneSpec, camera: Camera, traversal: int) -> dict[str, np.ndarray]:
    light = spec.lighting[traversal]
    d = camera.ray_directions().reshape(-1, 3)
    o = np.broadcast_to(camera.center, d.shape).copy()
    t, idx, nrm = cast(spec.primitives, traversal, o, d)
    hit = idx >= 0
    nrm = np.where(((nrm * d).sum(1) > 0)[:, None], -nrm, nrm)  # camera-facing
    points = o + np.where(hit, t, 0.0)[:, None] * d
    albedo = np.ones((d.shape[0], 3))
    strength = np.zeros(d.shape[0])
    shininess = np.ones(d.shape[0])
    transient = np.zeros(d.shape[0], dtype=bool)
    for k, p in enumerate(spec.primitives):
        sel = idx == k
        albedo[sel] = p.albedo
        strength[sel] = p.spec_strength
        shininess[sel] = p.shininess
        transient[sel] = p.transient
    sun = np.asarray(light.sun_direction, dtype=np.float64)
    shadow = np.zeros(d.shape[0])
    facing = hit & ((nrm @ sun) > 0)
    if facing.any():
        shadow[facing] = occluded(spec.primitives, traversal, points[facing], nrm[facing], sun)
    _, light_value = analytic_shade(nrm, albedo, (strength, shininess), light, -d, shadow)
    # saturation is folded into the light factor so the product stays exact
    light_value = np.minimum(light_value, 1.0 / albedo)
    color = albedo * light_value
    up = np.clip(d[:, 2], 0.0, 1.0)[:, None]
    sky = (1 - up) * np.asarray(light.sky_horizon) + up * np.asarray(light.sky_zenith)
    return {
        "rgb": np.where(hit[:, None], color, sky),
        "material": np.where(hit[:, None], albedo, 1.0),
        "normal": np.where(hit[:, None], nrm, 0.0),
        "depth": np.where(hit, (points - camera.center) @ camera.rotation[2], 0.0),
        "hit": hit.astype(np.float64),
        "static": (hit & ~transient).astype(np.float64),
        "shadow": shadow,
        "primitive": idx,
    }


def render_gt(spec: SyntheticSceneSpec, camera: Camera, traversal: int) -> dict[str, np.ndarray]:
    """All ground-truth layers of one view under one traversal's lighting.

    With ``spec.supersample = s`` every pixel averages an s x s grid of
    rays. ``light`` is then defined as averaged colour over averaged albedo
    so the per-pixel product identity is kept exactly. ``static_mask`` is 1
    only where every sub-sample hits a non-transient surface.
    """
    s = int(spec.supersample)
    H, W = camera.height, camera.width
    fine = camera
    if s > 1:
        fine = Camera(
            camera.fx * s, camera.fy * s, (camera.cx + 0.5) * s - 0.5, (camera.cy + 0.5) * s - 0.5,
            W * s, H * s, camera.rotation, camera.translation,
        )
    smp = _render_samples(spec, fine, traversal)

    def pool(x):
        x = x.reshape(H, s, W, s, -1)
        return x.mean(axis=(1, 3))

    rgb = pool(smp["rgb"])
    material = pool(smp["material"])
    hit = pool(smp["hit"])[..., 0]
    normal = pool(smp["normal"])
    norm = np.linalg.norm(normal, axis=-1, keepdims=True)
    normal = np.where(norm > 1e-12, normal / np.maximum(norm, 1e-12), 0.0)
    depth = np.where(hit > 0, pool(smp["depth"])[..., 0] / np.maximum(hit, 1e-12), 0.0)
    centre = smp["primitive"].reshape(H, s, W, s)[:, s // 2, :, s // 2]
    return {
        "rgb": rgb,
        "material": material,
        "light": rgb / material,
        "normal": normal,
        "depth": depth,
        "static_mask": (pool(smp["static"])[..., 0] >= 1.0).astype(np.float64),
        "cast_shadow": pool(smp["shadow"])[..., 0] > 0.5,
        "primitive": centre,
        "coverage": hit,
    }


# ---------------------------------------------------------------- point cloud


def _grid_samples(rng, u0, u1, v0, v1, h):
    nu, nv = max(1, int(math.ceil((u1 - u0) / h))), max(1, int(math.ceil((v1 - v0) / h)))
    du, dv = (u1 - u0) / nu, (v1 - v0) / nv
    uu, vv = np.meshgrid(u0 + (np.arange(nu) + 0.5) * du, v0 + (np.arange(nv) + 0.5) * dv, indexing="ij")
    uu = uu.ravel() + rng.uniform(-0.25, 0.25, uu.size) * du
    vv = vv.ravel() + rng.uniform(-0.25, 0.25, vv.size) * dv
    return uu, vv


def _surface_area(p: Primitive) -> float:
    if p.kind == "plane":
        (x0, x1), (y0, y1) = p.params["x"], p.params["y"]
        return (x1 - x0) * (y1 - y0)
    if p.kind == "box":
        e = np.asarray(p.params["max"]) - np.asarray(p.params["min"])
        return 2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]) - e[0] * e[1]
    return 4 * math.pi * p.params["radius"] ** 2


def sample_point_cloud(spec: SyntheticSceneSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Jittered-grid surface samples with outward normals and owner index."""
    rng = np.random.default_rng(spec.seed + 7919)
    area = sum(_surface_area(p) for p in spec.primitives)
    h = math.sqrt(area / max(spec.init_points, 1))
    pts, nrms, owner = [], [], []
    grounded = [
        p for p in spec.primitives if p.kind == "box" and not p.transient and p.params["min"][2] <= 1e-9
    ]
    for k, p in enumerate(spec.primitives):
        if p.kind == "plane":
            (x0, x1), (y0, y1) = p.params["x"], p.params["y"]
            u, v = _grid_samples(rng, x0, x1, y0, y1, h)
            keep = np.ones(u.size, dtype=bool)
            for b in grounded:
                keep &= ~(
                    (u > b.params["min"][0]) & (u < b.params["max"][0])
                    & (v > b.params["min"][1]) & (v < b.params["max"][1])
                )
            P = np.stack([u, v, np.full(u.size, p.params.get("z", 0.0))], 1)[keep]
            N = np.tile([0.0, 0.0, 1.0], (len(P), 1))
        elif p.kind == "box":
            lo, hi = np.asarray(p.params["min"], float), np.asarray(p.params["max"], float)
            P, N = [], []
            for axis in range(3):
                for side, val in ((-1, lo[axis]), (1, hi[axis])):
                    if axis == 2 and side == -1 and lo[2] <= 1e-9:
                        continue  # face resting on the ground
                    a, b = [i for i in range(3) if i != axis]
                    u, v = _grid_samples(rng, lo[a], hi[a], lo[b], hi[b], h)
                    face = np.zeros((u.size, 3))
                    face[:, a], face[:, b], face[:, axis] = u, v, val
                    nn = np.zeros((u.size, 3))
                    nn[:, axis] = side
                    P.append(face)
                    N.append(nn)
            P, N = np.concatenate(P), np.concatenate(N)
        else:
            c, r = np.asarray(p.params["center"], float), float(p.params["radius"])
            count = max(1, int(round(_surface_area(p) / h**2)))
            from .scene import fibonacci_sphere

            N = fibonacci_sphere(count)
            P = c + r * N
        pts.append(P)
        nrms.append(N)
        owner.append(np.full(len(P), k))
    return np.concatenate(pts), np.concatenate(nrms), np.concatenate(owner)


# ---------------------------------------------------------------- datasets


def generate_dataset(spec: SyntheticSceneSpec, out_dir) -> dict:
    """Render every frame of ``spec`` into ``out_dir`` and write the manifest."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for m, frame_list in enumerate(spec.frames):
        for c, f in enumerate(frame_list):
            cam = spec.camera(m, c)
            layers = render_gt(spec, cam, m)
            stem = f"t{m:02d}_f{c:03d}"
            entry = {
                "traversal": m,
                "camera": c,
                "timestamp": f.timestamp,
                "split": f.split,
                "pose": {"rotation": cam.rotation.tolist(), "translation": cam.translation.tolist()},
            }
            write_png(out / f"{stem}_rgb.png", layers["rgb"])
            entry["rgb"] = f"{stem}_rgb.png"
            for key, arr in (
                ("gt_material", layers["material"]),
                ("gt_normal", layers["normal"]),
                ("gt_depth", layers["depth"]),
                ("gt_light", layers["light"]),
                ("static_mask", layers["static_mask"]),
            ):
                name = f"{stem}_{key}.pfm"
                write_pfm(out / name, arr)
                entry[key] = name
            frames.append(entry)
    pts, nrms, owner = sample_point_cloud(spec)
    write_ply(out / "init_points.ply", pts, nrms)
    cams = [np.asarray(f.eye, float) for fl in spec.frames for f in fl]
    manifest = {
        "format": "admgs-synthetic",
        "version": MANIFEST_VERSION,
        "suite": spec.name,
        "seed": spec.seed,
        "spec_hash": spec_hash(spec),
        "image_size": [spec.width, spec.height],
        "intrinsics": {
            "fx": spec.focal, "fy": spec.focal,
            "cx": (spec.width - 1) / 2, "cy": (spec.height - 1) / 2,
        },
        "num_traversals": spec.num_traversals,
        "scene_radius": float(max(np.linalg.norm(pts, axis=1).max(), max(np.linalg.norm(c) for c in cams))),
        "frames": frames,
        "init_point_cloud": "init_points.ply",
        "init_point_owner": owner.tolist(),
        "spec": spec.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


# ---------------------------------------------------------------- suites


def _sun(elevation_deg: float, azimuth_deg: float) -> tuple[float, float, float]:
    e, a = math.radians(elevation_deg), math.radians(azimuth_deg)
    return (math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e))


def _orbit(n: int, radius: float, height: float, start_deg: float, span_deg: float, *, test_every: int = 0,
           target=(0.0, 0.0, 0.0), offset: float = 0.0, dt: float = 0.1) -> list[FrameSpec]:
    frames = []
    for i in range(n):
        a = math.radians(start_deg + span_deg * i / max(n - 1, 1) + offset)
        eye = (radius * math.cos(a), radius * math.sin(a), height)
        split = "test" if test_every and i % test_every == test_every // 2 else "train"
        frames.append(FrameSpec(eye, tuple(target), round(i * dt, 6), split))
    return frames


def _street_ground(half: float = 3.2) -> list[Primitive]:
    return [
        Primitive("plane", {"x": [-half, half], "y": [-half, -0.7], "z": 0.0}, (0.6, 0.55, 0.45), name="sidewalk"),
        Primitive("plane", {"x": [-half, half], "y": [-0.7, 0.7], "z": 0.0}, (0.25, 0.25, 0.3), name="road"),
        Primitive("plane", {"x": [-half, half], "y": [0.7, half], "z": 0.0}, (0.3, 0.5, 0.22), name="verge"),
    ]


def _decomp_3trav() -> SyntheticSceneSpec:
    prims = _street_ground() + [
        Primitive("box", {"min": [0.9, 1.1, 0.0], "max": [1.9, 2.1, 1.2]}, (0.75, 0.35, 0.25), name="building"),
        Primitive("box", {"min": [-1.7, -2.0, 0.0], "max": [-1.1, -1.4, 0.9]}, (0.3, 0.45, 0.75), name="kiosk"),
        Primitive("sphere", {"center": [-0.9, 1.6, 0.45], "radius": 0.45}, (0.8, 0.7, 0.3),
                  spec_strength=0.15, shininess=20.0, name="tree"),
    ]
    lighting = [
        Lighting(_sun(65, 30), (0.45, 0.44, 0.42), (0.45, 0.46, 0.5), (0.55, 0.6, 0.7), (0.75, 0.77, 0.8)),
        Lighting(_sun(40, 140), (0.85, 0.8, 0.7), (0.2, 0.22, 0.28), (0.3, 0.5, 0.9), (0.7, 0.78, 0.88)),
        Lighting(_sun(35, 250), (0.8, 0.62, 0.45), (0.26, 0.22, 0.2), (0.45, 0.45, 0.7), (0.9, 0.7, 0.55)),
    ]
    frames = [
        _orbit(16, 4.2, 3.6, -60, 120, test_every=4, offset=3.0 * m, dt=0.1) for m in range(3)
    ]
    return SyntheticSceneSpec("decomp-3trav", prims, lighting, frames, 64, 48, 58.0, init_points=2600, seed=3,
                              supersample=3)


def _transient_2trav() -> SyntheticSceneSpec:
    prims = _street_ground() + [
        Primitive("box", {"min": [0.9, 1.1, 0.0], "max": [1.9, 2.1, 1.2]}, (0.75, 0.35, 0.25), name="building"),
        Primitive("box", {"min": [-0.6, -0.5, 0.0], "max": [0.2, 0.3, 0.7]}, (0.85, 0.8, 0.2),
                  present_in=[0], name="transient-box"),
    ]
    lighting = [
        Lighting(_sun(55, 60), (0.7, 0.68, 0.62), (0.3, 0.32, 0.36)),
        Lighting(_sun(40, 200), (0.75, 0.65, 0.5), (0.25, 0.24, 0.26)),
    ]
    frames = [_orbit(12, 4.2, 3.6, -50, 100, test_every=4, offset=2.0 * m) for m in range(2)]
    return SyntheticSceneSpec("transient-2trav", prims, lighting, frames, 48, 36, 44.0, init_points=1800, seed=5,
                              supersample=3)


def _specular_1trav() -> SyntheticSceneSpec:
    prims = [
        Primitive("plane", {"x": [-2.5, 2.5], "y": [-2.5, 2.5], "z": 0.0}, (0.45, 0.45, 0.45), name="ground"),
        Primitive("sphere", {"center": [0.0, 0.0, 0.6], "radius": 0.6}, (0.35, 0.5, 0.75),
                  spec_strength=0.35, shininess=40.0, name="glossy-sphere"),
    ]
    lighting = [Lighting(_sun(50, 45), (0.7, 0.7, 0.68), (0.25, 0.26, 0.3))]
    frames = [_orbit(12, 3.2, 2.4, 0, 150, test_every=4)]
    return SyntheticSceneSpec("specular-1trav", prims, lighting, frames, 48, 36, 44.0, init_points=1200, seed=11,
                              supersample=3)


def _sanity_1splat() -> SyntheticSceneSpec:
    # one flat surface filling every view: a constant image that a single
    # splat can represent, so the loss has no representational floor
    prims = [Primitive("plane", {"x": [-2.0, 2.0], "y": [-2.0, 2.0], "z": 0.0}, (0.8, 0.3, 0.2), name="floor")]
    lighting = [Lighting((0.0, 0.0, 1.0), (0.5, 0.5, 0.5), (0.3, 0.3, 0.3))]
    frames = [[FrameSpec((0.2 * (i - 1), -0.3, 3.0), (0, 0, 0), 0.1 * i, "test" if i == 1 else "train")
               for i in range(3)]]
    return SyntheticSceneSpec("sanity-1splat", prims, lighting, frames, 32, 32, 40.0, init_points=1, seed=1)


SUITES = {
    "sanity-1splat": _sanity_1splat,
    "decomp-3trav": _decomp_3trav,
    "transient-2trav": _transient_2trav,
    "specular-1trav": _specular_1trav,
}


def standard_suites() -> list[SyntheticSceneSpec]:
    return [make() for make in SUITES.values()]


def suite(name: str) -> SyntheticSceneSpec:
    try:
        return SUITES[name]()
    except KeyError:
        raise InvalidArgumentError(f"unknown suite {name!r}; available: {', '.join(SUITES)}") from None
