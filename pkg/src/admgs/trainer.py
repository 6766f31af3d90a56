"""Optimisation loop, evaluation, relighting and checkpoint round-trips."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import checkpoint as ckpt
from .errors import InvalidArgumentError, TrainingDivergenceError
from .fields import FieldDims, NeuralFieldSet
from .geom import Camera
from .io import read_pfm, read_ply, read_png
from .losses import LossWeights, material_loss, normal_loss, photometric_loss, psnr, scale_flatness_loss, ssim, total_loss
from .pipeline import RenderOptions, apply_traversal_affine, render_view
from .scene import GaussianSet, ObjectNode, RigidTransform, SceneGraph, SkyNode, StaticNode, TraversalTable, sky_placement

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-15

DEFAULT_LR = {
    "positions": 1.6e-4,
    "scales": 5e-3,
    "rotations": 1e-3,
    "opacity": 5e-2,
    "features": 2.5e-3,
    "mlp": 2.5e-3,
    "embeddings": 2.5e-3,
    "affine": 1e-3,
}


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    position_lr_final_ratio: float = 0.01
    loss: LossWeights = field(default_factory=LossWeights)
    warmup_iterations: int | None = None  # None: 10% of the run
    seed: int = 0
    reproducible: bool = True
    dtype: str = "float32"
    point_jitter: float = 0.0
    init_opacity: float = 0.1
    init_scale_factor: float = 0.5  # multiplies the nearest-neighbour spacing
    feature_init_std: float = 0.5
    embedding_init_std: float = 0.1
    sky_count: int = 300
    sky_radius_factor: float = 3.0
    use_gate: bool = True
    use_geometry_cues: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    geo_dim: int = 16
    emb_dim: int = 16
    checkpoint_every: int = 0
    threads: int | None = None

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        merged = dict(DEFAULT_LR)
        unknown = set(self.lr) - set(DEFAULT_LR)
        if unknown:
            raise InvalidArgumentError(f"unknown learning-rate groups: {sorted(unknown)}")
        merged.update(self.lr)
        self.lr = merged
        if any(v <= 0 for v in self.lr.values()):
            raise InvalidArgumentError("learning rates must be positive")
        if self.iterations < 0:
            raise InvalidArgumentError("iterations must be non-negative")
        if self.warmup_iterations is not None and self.warmup_iterations > self.iterations:
            raise InvalidArgumentError("warmup cannot exceed the iteration count")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgumentError("dtype must be float32 or float64")
        self.background = tuple(self.background)

    @property
    def torch_dtype(self):
        return torch.float32 if self.dtype == "float32" else torch.float64

    @property
    def warmup(self) -> int:
        return int(round(0.1 * self.iterations)) if self.warmup_iterations is None else self.warmup_iterations

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        d = copy.deepcopy(d)
        if "loss" in d and isinstance(d["loss"], dict):
            lk = {f.name for f in dc_fields(LossWeights)}
            bad = set(d["loss"]) - lk
            if bad:
                raise InvalidArgumentError(f"unknown config keys: {sorted('loss.' + b for b in bad)}")
        return cls(**d)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: dict[str, int] = field(default_factory=dict)
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS


@torch.no_grad()
def adam_update(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None], state: AdamState, lr) -> None:
    """Bias-corrected Adam, in place. ``lr`` is a float or a per-name dict.

    Parameters whose gradient is ``None`` are left untouched.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise InvalidArgumentError(f"gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
            state.step[name] = 0
        state.step[name] += 1
        t = state.step[name]
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        step_lr = lr[name] if isinstance(lr, dict) else lr
        p.sub_(step_lr * m_hat / (v_hat.sqrt() + state.eps))


def param_group(name: str) -> str:
    leaf = name.split(".")[-1]
    if name.startswith("traversal."):
        return "embeddings" if leaf == "embeddings" else "affine"
    if leaf == "positions":
        return "positions"
    if leaf == "log_scales":
        return "scales"
    if leaf == "rotations":
        return "rotations"
    if leaf == "opacity_logits":
        return "opacity"
    if leaf in ("features", "color_logits", "feature"):
        return "features"
    return "mlp"


# ---------------------------------------------------------------- dataset


@dataclass
class Frame:
    index: int
    traversal: int
    camera_id: int
    timestamp: float
    split: str
    camera: Camera
    files: dict


class Dataset:
    """Synthetic dataset directory loaded lazily and cached in memory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = json.loads((self.root / "manifest.json").read_text())
        intr = self.manifest["intrinsics"]
        w, h = self.manifest["image_size"]
        self.frames: list[Frame] = []
        for i, e in enumerate(self.manifest["frames"]):
            cam = Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"], w, h,
                         e["pose"]["rotation"], e["pose"]["translation"])
            files = {k: e[k] for k in ("rgb", "gt_material", "gt_normal", "gt_depth", "gt_light", "static_mask")}
            self.frames.append(Frame(i, e["traversal"], e["camera"], e["timestamp"], e["split"], cam, files))
        self._cache: dict[int, dict[str, np.ndarray]] = {}

    @property
    def num_traversals(self) -> int:
        return int(self.manifest["num_traversals"])

    def split(self, name: str) -> list[Frame]:
        return [f for f in self.frames if f.split == name]

    def load(self, frame: Frame) -> dict[str, np.ndarray]:
        if frame.index not in self._cache:
            out = {"rgb": read_png(self.root / frame.files["rgb"])}
            for key in ("gt_material", "gt_normal", "gt_depth", "gt_light", "static_mask"):
                out[key] = read_pfm(self.root / frame.files[key])
            self._cache[frame.index] = out
        return self._cache[frame.index]

    def init_points(self) -> tuple[np.ndarray, np.ndarray]:
        return read_ply(self.root / self.manifest["init_point_cloud"])

    @property
    def scene_radius(self) -> float:
        return float(self.manifest["scene_radius"])


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    config: TrainConfig
    scene: SceneGraph
    fields: NeuralFieldSet
    adam: AdamState
    iteration: int
    rng: np.random.Generator
    queues: dict = field(default_factory=dict)

    def params(self) -> dict[str, torch.Tensor]:
        out = {k: v for k, v in self.scene.named_tensors().items() if not k.startswith("sky.")}
        out.update({f"fields.{k}": v for k, v in self.fields.named_tensors().items()})
        return out

    def options(self) -> RenderOptions:
        return RenderOptions(self.config.use_geometry_cues, self.config.use_gate, self.config.background)


def initial_scene(points: np.ndarray, config: TrainConfig, num_traversals: int, scene_radius: float) -> SceneGraph:
    rng = np.random.default_rng(config.seed)
    dtype = config.torch_dtype
    pts = np.asarray(points, dtype=np.float64)
    if config.point_jitter > 0:
        pts = pts + rng.normal(scale=config.point_jitter, size=pts.shape)
    if len(pts) > 1:
        k = min(4, len(pts))
        dist, _ = cKDTree(pts).query(pts, k=k)
        nn = np.sqrt(np.mean(dist[:, 1:] ** 2, axis=1))
        nn = np.clip(nn, 1e-3, None)
    else:
        nn = np.full(len(pts), 0.1 * max(scene_radius, 1e-3))
    log_scale = np.repeat(np.log(config.init_scale_factor * nn)[:, None], 3, axis=1)
    logit = math.log(config.init_opacity / (1 - config.init_opacity))
    feats = rng.normal(scale=config.feature_init_std, size=(len(pts), config.geo_dim))
    static = GaussianSet.create(pts, log_scale, None, np.full(len(pts), logit), feats, dtype=dtype)
    sky = sky_placement(config.sky_radius_factor * scene_radius, config.sky_count, config.seed, dtype=dtype)
    table = TraversalTable.create(num_traversals, config.emb_dim, seed=config.seed, dtype=dtype,
                                  init_std=config.embedding_init_std)
    return SceneGraph(StaticNode(static), sky, [], table)


def initial_state(dataset: Dataset, config: TrainConfig) -> TrainState:
    pts, _ = dataset.init_points()
    scene = initial_scene(pts, config, dataset.num_traversals, dataset.scene_radius)
    dims = FieldDims(geo=config.geo_dim, emb=config.emb_dim)
    fields = NeuralFieldSet.create(dims, seed=config.seed, dtype=config.torch_dtype)
    return TrainState(config, scene, fields, AdamState(), 0, np.random.default_rng(config.seed))


def configure_determinism(config: TrainConfig) -> None:
    if config.threads:
        torch.set_num_threads(int(config.threads))
    if config.reproducible:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------- training


def _tensor(x: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def compute_losses(state: TrainState, frame: Frame, data: dict, lambda_decomp: float | None = None):
    """Render ``frame`` and return (total, components, render output)."""
    cfg = state.config
    dtype = cfg.torch_dtype
    out, _ = render_view(state.scene, state.fields, frame.camera, frame.traversal, frame.timestamp, state.options())
    pred = apply_traversal_affine(out.rgb, frame.traversal, state.scene.traversals)
    gt = _tensor(data["rgb"], dtype)
    mask = (_tensor(data["static_mask"], dtype) > 0.5).to(dtype)
    comps = {
        "photo": photometric_loss(pred, gt, cfg.loss.lambda_ssim),
        "material": material_loss(out.material_map, _tensor(data["gt_material"], dtype), mask),
        "normal": normal_loss(out.normal_map, _tensor(data["gt_normal"], dtype), mask),
        "scale": scale_flatness_loss(state.scene.static.gaussians.log_scales, cfg.loss.delta),
    }
    total = total_loss(comps, cfg.loss, lambda_decomp)
    return total, comps, out


def decomp_weight(config: TrainConfig, iteration: int) -> float:
    w = config.warmup
    if w <= 0:
        return config.loss.lambda_decomp
    return config.loss.lambda_decomp * min(1.0, iteration / w)


def next_frame(state: TrainState, dataset: Dataset) -> Frame:
    """Round-robin over traversals; frames within a traversal are reshuffled per pass."""
    train = dataset.split("train")
    travs = sorted({f.traversal for f in train})
    m = travs[state.iteration % len(travs)]
    queue = state.queues.get(m)
    if not queue:
        pool = [f.index for f in train if f.traversal == m]
        queue = [pool[i] for i in state.rng.permutation(len(pool))]
        state.queues[m] = queue
    return dataset.frames[queue.pop(0)]


def train_step(state: TrainState, dataset: Dataset, frame: Frame | None = None) -> dict:
    cfg = state.config
    frame = frame or next_frame(state, dataset)
    data = dataset.load(frame)
    lam = decomp_weight(cfg, state.iteration)
    params = state.params()
    for p in params.values():
        p.grad = None
    total, comps, _ = compute_losses(state, frame, data, lam)
    values = {k: float(v.detach()) for k, v in comps.items()}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad or not math.isfinite(float(total.detach())):
        # raised before the update, so the state still holds the last good parameters
        raise TrainingDivergenceError(bad[0] if bad else "total", values)
    total.backward()
    grads = {k: p.grad for k, p in params.items()}
    norms: dict[str, float] = {}
    for k, g in grads.items():
        if g is None:
            continue
        if not bool(torch.isfinite(g).all()):
            raise TrainingDivergenceError(f"grad:{k}", values)
        grp = param_group(k)
        norms[grp] = norms.get(grp, 0.0) + float((g.double() ** 2).sum())
    lr = {k: cfg.lr[param_group(k)] for k in params}
    if cfg.iterations > 0:
        decay = cfg.position_lr_final_ratio ** min(1.0, state.iteration / cfg.iterations)
        for k in lr:
            if param_group(k) == "positions":
                lr[k] *= decay
    adam_update(params, grads, state.adam, lr)
    state.scene.static.gaussians.renormalize_rotations()
    for obj in state.scene.objects:
        obj.canonical.renormalize_rotations()
    for p in params.values():
        p.grad = None
    record = {
        "iteration": state.iteration,
        "traversal": frame.traversal,
        "frame": frame.index,
        "lambda_decomp": lam,
        "total": float(total.detach()),
        **{k: float(v.detach()) for k, v in comps.items()},
        "grad_norms": {k: math.sqrt(v) for k, v in sorted(norms.items())},
    }
    state.iteration += 1
    return record


def train(state: TrainState, dataset: Dataset, iterations: int | None = None, *, log_path=None, timing_path=None,
          checkpoint_dir=None, progress=None) -> list[dict]:
    """Run ``iterations`` steps (default: up to the configured total)."""
    cfg = state.config
    configure_determinism(cfg)
    end = cfg.iterations if iterations is None else state.iteration + iterations
    records = []
    log = open(log_path, "a") if log_path else None
    timing = open(timing_path, "a") if timing_path else None
    try:
        while state.iteration < end:
            t0 = time.perf_counter()
            rec = train_step(state, dataset)
            elapsed = time.perf_counter() - t0
            records.append(rec)
            line = dict(rec) if cfg.reproducible else {**rec, "time_s": elapsed}
            if log:
                log.write(json.dumps(line, sort_keys=True) + "\n")
            if timing:
                timing.write(json.dumps({"iteration": rec["iteration"], "time_s": elapsed}) + "\n")
            if checkpoint_dir and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                save_state(state, Path(checkpoint_dir) / "last.ckpt")
            if progress:
                progress(rec)
    finally:
        if log:
            log.close()
        if timing:
            timing.close()
    return records


# ---------------------------------------------------------------- evaluation


def render_frame(state: TrainState, camera: Camera, m: int, tau: float = 0.0, *, light_traversal=None):
    """Affine-aligned, clamped image plus the raw render output."""
    with torch.no_grad():
        out, shading = render_view(state.scene, state.fields, camera, m, tau, state.options(),
                                   light_traversal=light_traversal)
        lm = m if light_traversal is None else light_traversal
        img = apply_traversal_affine(out.rgb, lm, state.scene.traversals)
    return img, out


def evaluate(state: TrainState, dataset: Dataset, split: str = "test") -> dict:
    frames = dataset.split(split)
    if not frames:
        raise InvalidArgumentError(f"split {split!r} is empty")
    views = []
    for f in frames:
        img, _ = render_frame(state, f.camera, f.traversal, f.timestamp)
        gt = torch.from_numpy(dataset.load(f)["rgb"]).to(torch.float64)
        pred = img.to(torch.float64)
        views.append({"frame": f.index, "traversal": f.traversal, "psnr_db": psnr(pred, gt),
                      "ssim": float(ssim(pred, gt))})
    agg = {
        "psnr_db": float(np.mean([v["psnr_db"] for v in views])),
        "ssim": float(np.mean([v["ssim"] for v in views])),
        "count": len(views),
    }
    return {"split": split, "views": views, "aggregate": agg}


def relight(state: TrainState, camera: Camera, m_material: int, m_light: int, tau: float = 0.0):
    """Static node keeps the traversal-invariant material and the gating of
    ``m_material``; light and sky are conditioned on ``m_light`` and its
    affine alignment is applied. Returns (image, render output)."""
    table = state.scene.traversals
    table.check(m_material)
    table.check(m_light)
    return render_frame(state, camera, m_material, tau, light_traversal=m_light)


# ---------------------------------------------------------------- checkpoints


def state_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    out = dict(state.scene.named_tensors())
    out.update({f"fields.{k}": v for k, v in state.fields.named_tensors().items()})
    for k in state.adam.m:
        out[f"adam.m.{k}"] = state.adam.m[k]
        out[f"adam.v.{k}"] = state.adam.v[k]
    return out


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def state_meta(state: TrainState) -> dict:
    return {
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "adam_steps": dict(sorted(state.adam.step.items())),
        "rng": _rng_state(state.rng),
        "queues": {str(k): list(v) for k, v in sorted(state.queues.items())},
        "counts": {"static": len(state.scene.static.gaussians), "sky": len(state.scene.sky.gaussians),
                   "traversals": len(state.scene.traversals)},
        "sky_radius": state.scene.sky.radius,
        "objects": [
            {"trajectory": [[t, p.rotation.tolist(), p.translation.tolist()] for t, p in o.trajectory],
             "has_colors": o.canonical.color_logits is not None}
            for o in state.scene.objects
        ],
        "field_dims": asdict(state.fields.dims),
    }


def save_state(state: TrainState, path) -> None:
    ckpt.save_checkpoint(path, state_tensors(state), state_meta(state))


def load_state(path) -> TrainState:
    tensors, meta = ckpt.load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    dtype = config.torch_dtype

    def leaf(name):
        return torch.from_numpy(tensors[name]).to(dtype).clone().requires_grad_()

    def gset(prefix):
        return GaussianSet(
            leaf(f"{prefix}.positions"), leaf(f"{prefix}.log_scales"), leaf(f"{prefix}.rotations"),
            leaf(f"{prefix}.opacity_logits"), leaf(f"{prefix}.features"),
            leaf(f"{prefix}.color_logits") if f"{prefix}.color_logits" in tensors else None,
        )

    objects = []
    for i, o in enumerate(meta["objects"]):
        traj = [(t, RigidTransform(q, tr)) for t, q, tr in o["trajectory"]]
        objects.append(ObjectNode(gset(f"object{i}"), traj, leaf(f"object{i}.feature")))
    table = TraversalTable(leaf("traversal.embeddings"), leaf("traversal.affine_scale"), leaf("traversal.affine_bias"))
    scene = SceneGraph(StaticNode(gset("static")), SkyNode(gset("sky"), meta["sky_radius"]), objects, table)
    dims = meta["field_dims"]
    dims = FieldDims(**{k: tuple(v) if isinstance(v, list) else v for k, v in dims.items()})
    fields = NeuralFieldSet.create(dims, seed=config.seed, dtype=dtype)
    for name, t in fields.named_tensors().items():
        with torch.no_grad():
            t.copy_(torch.from_numpy(tensors[f"fields.{name}"]).to(dtype))
    adam = AdamState()
    for name, step in meta["adam_steps"].items():
        adam.m[name] = torch.from_numpy(tensors[f"adam.m.{name}"]).to(dtype).clone()
        adam.v[name] = torch.from_numpy(tensors[f"adam.v.{name}"]).to(dtype).clone()
        adam.step[name] = int(step)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    queues = {int(k): list(v) for k, v in meta["queues"].items()}
    counts = meta["counts"]
    if len(scene.static.gaussians) != counts["static"] or len(scene.sky.gaussians) != counts["sky"]:
        raise ckpt.CheckpointError("primitive counts disagree with checkpoint metadata")
    return TrainState(config, scene, fields, adam, int(meta["iteration"]), rng, queues)
