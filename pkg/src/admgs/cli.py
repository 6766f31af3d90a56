"""``admgs`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 divergence.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import synth
from .errors import CheckpointError, InvalidArgumentError, MissingTraversalError, TrainingDivergenceError
from .geom import Camera
from .io import write_pfm, write_png
from .trainer import (
    Dataset,
    TrainConfig,
    configure_determinism,
    evaluate,
    initial_state,
    load_state,
    relight,
    render_frame,
    save_state,
    train,
)

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
ILLUMINATION_EPS = 0.01


class UsageError(Exception):
    pass


def build_id() -> str:
    """Content hash of the package sources, shortened like a git revision."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; unknown keys are rejected."""
    out = copy.deepcopy(config)
    for item in overrides:
        key, sep, value = item.lstrip("-").partition("=")
        if not sep:
            raise UsageError(f"override {item!r} must look like key=value")
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise UsageError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return out


def _threads(args) -> None:
    n = args.threads or os.environ.get("ADMGS_THREADS")
    if n:
        torch.set_num_threads(int(n))


def _echo(out: Path, command: str, effective: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "build_id": build_id(), "config": effective}
    (out / "config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _frame(dataset: Dataset, index: int):
    if not 0 <= index < len(dataset.frames):
        raise UsageError(f"frame {index} out of range (dataset has {len(dataset.frames)} frames)")
    return dataset.frames[index]


def _camera(args, dataset: Dataset | None) -> tuple[Camera, float]:
    if args.camera:
        cam = Camera.from_dict(json.loads(Path(args.camera).read_text()))
        return cam, float(args.timestamp)
    if dataset is None or args.frame is None:
        raise UsageError("give --frame with --data, or --camera")
    f = _frame(dataset, args.frame)
    return f.camera, f.timestamp


def _load(args):
    try:
        return load_state(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint {args.checkpoint} not found") from None


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.spec:
        spec = synth.SyntheticSceneSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        try:
            spec = synth.suite(args.suite)
        except InvalidArgumentError as exc:
            raise UsageError(str(exc)) from None
    out = Path(args.out)
    _echo(out, "gen-data", {"suite": spec.name, "seed": spec.seed})
    manifest = synth.generate_dataset(spec, out)
    print(f"{spec.name}: {len(manifest['frames'])} frames, {manifest['num_traversals']} traversals -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    dataset = Dataset(args.data)
    if args.resume:
        state = load_state(args.resume)
        if args.config or args.overrides:
            cfg = apply_overrides(state.config.to_dict(), args.overrides)
            state.config = TrainConfig.from_dict(cfg)
    else:
        base = TrainConfig().to_dict()
        if args.config:
            user = json.loads(Path(args.config).read_text())
            unknown = set(user) - set(base)
            if unknown:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
            base = apply_overrides(base, [f"{k}={json.dumps(v)}" for k, v in _flatten(user)])
        cfg = apply_overrides(base, args.overrides)
        try:
            state = initial_state(dataset, TrainConfig.from_dict(cfg))
        except InvalidArgumentError as exc:
            raise UsageError(str(exc)) from None
    if args.threads:
        state.config.threads = args.threads
    elif os.environ.get("ADMGS_THREADS"):
        state.config.threads = int(os.environ["ADMGS_THREADS"])
    _echo(out, "train", state.config.to_dict())
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    configure_determinism(state.config)
    try:
        train(state, dataset, log_path=out / "step_log.jsonl", timing_path=out / "timing.jsonl",
              checkpoint_dir=ckpt_dir,
              progress=(lambda r: print(f"iter {r['iteration']} loss {r['total']:.5f}")) if args.verbose else None)
    except TrainingDivergenceError as exc:
        save_state(state, ckpt_dir / "last_good.ckpt")
        print(f"training diverged at iteration {state.iteration}: {exc}; "
              f"last good state in {ckpt_dir / 'last_good.ckpt'}", file=sys.stderr)
        return EXIT_DIVERGED
    save_state(state, ckpt_dir / "final.ckpt")
    if dataset.split("test"):
        report = evaluate(state, dataset, "test")
        _write_eval(out, report)
        print(_eval_table(report))
    return EXIT_OK


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k in ("loss", "lr"):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def _write_layers(out: Path, name: str, arr: np.ndarray, preview: np.ndarray | None = None) -> None:
    write_pfm(out / f"{name}.pfm", arr.astype(np.float32))
    write_png(out / f"{name}.png", np.clip(arr if preview is None else preview, 0, 1))


def _render_common(args, decompose: bool) -> int:
    state = _load(args)
    dataset = Dataset(args.data) if args.data else None
    cam, tau = _camera(args, dataset)
    m = state.scene.traversals.check(args.traversal)
    out = Path(args.out)
    _echo(out, "decompose" if decompose else "render",
          {"checkpoint": str(args.checkpoint), "traversal": m, "frame": args.frame, "camera": cam.to_dict()})
    img, render = render_frame(state, cam, m, tau)
    _write_layers(out, "rgb", img.numpy())
    if decompose:
        layers = render.numpy()
        rgb = layers["rgb"]  # pre-affine
        material = layers["material_map"]
        illum = rgb / np.maximum(material, ILLUMINATION_EPS)
        _write_layers(out, "material", material)
        _write_layers(out, "illumination", illum, illum / max(float(illum.max()), 1.0))
        _write_layers(out, "normal", layers["normal_map"], (layers["normal_map"] + 1.0) / 2.0)
        depth = layers["depth"]
        _write_layers(out, "depth", depth, depth / max(float(depth.max()), 1e-9))
        _write_layers(out, "static_mask", layers["static_mask"])
        (out / "layers.json").write_text(json.dumps({
            "illumination": f"rgb / max(material, {ILLUMINATION_EPS}) on the pre-affine render",
            "normal_png": "(n + 1) / 2 per channel",
            "depth_png": "depth / max(depth)",
        }, indent=2) + "\n")
    return EXIT_OK


def cmd_render(args) -> int:
    return _render_common(args, decompose=False)


def cmd_decompose(args) -> int:
    return _render_common(args, decompose=True)


def cmd_relight(args) -> int:
    state = _load(args)
    dataset = Dataset(args.data)
    f = _frame(dataset, args.frame)
    out = Path(args.out)
    _echo(out, "relight", {"checkpoint": str(args.checkpoint), "material_traversal": args.material_traversal,
                           "light_traversal": args.light_traversal, "frame": args.frame})
    src, _ = render_frame(state, f.camera, args.material_traversal, f.timestamp)
    tgt, _ = render_frame(state, f.camera, args.light_traversal, f.timestamp)
    relit, render = relight(state, f.camera, args.material_traversal, args.light_traversal, f.timestamp)
    material = render.material_map.numpy()
    _write_layers(out, "relit", relit.numpy())
    strip = np.concatenate([src.numpy(), tgt.numpy(), material, relit.numpy()], axis=1)
    write_png(out / "strip.png", np.clip(strip, 0, 1))
    return EXIT_OK


def _eval_table(report: dict) -> str:
    lines = [f"{'frame':>6} {'trav':>4} {'psnr_db':>9} {'ssim':>7}"]
    for v in report["views"]:
        lines.append(f"{v['frame']:>6} {v['traversal']:>4} {v['psnr_db']:>9.3f} {v['ssim']:>7.4f}")
    a = report["aggregate"]
    lines.append(f"{'mean':>6} {'':>4} {a['psnr_db']:>9.3f} {a['ssim']:>7.4f}")
    return "\n".join(lines)


def _write_eval(out: Path, report: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"eval_{report['split']}.json").write_text(json.dumps(report, indent=2) + "\n")
    (out / f"eval_{report['split']}.txt").write_text(_eval_table(report) + "\n")


def cmd_eval(args) -> int:
    state = _load(args)
    dataset = Dataset(args.data)
    if not dataset.split(args.split):
        raise UsageError(f"split {args.split!r} is empty")
    out = Path(args.out)
    _echo(out, "eval", {"checkpoint": str(args.checkpoint), "split": args.split})
    report = evaluate(state, dataset, args.split)
    _write_eval(out, report)
    print(_eval_table(report))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import REL_TOL, run_grad_check

    torch.set_num_threads(1)
    results = run_grad_check(args.scale, args.seed)
    failed = [r for r in results if not r.ok]
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:<14} worst_rel={r.worst_rel:.3e} samples={r.samples} "
              f"at {r.worst_tensor}{list(r.worst_index)} {status}")
    if args.out:
        _echo(Path(args.out), "grad-check", {"scale": args.scale, "seed": args.seed})
        (Path(args.out) / "grad_check.json").write_text(json.dumps(
            [{"class": r.name, "worst_rel": r.worst_rel, "tensor": r.worst_tensor, "index": list(r.worst_index)}
             for r in results], indent=2) + "\n")
    if failed:
        for r in failed:
            print(f"gradient mismatch in class {r.name}: {r.worst_tensor}{list(r.worst_index)} "
                  f"relative error {r.worst_rel:.3e} >= {REL_TOL}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="admgs", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap torch worker threads (env ADMGS_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--suite")
    src.add_argument("--spec", help="JSON scene spec")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="optimise a scene on a dataset; extra --a.b=v flags override the config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--resume")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("render", cmd_render, "render RGB"),
                                 ("decompose", cmd_decompose, "export material, illumination, normal, depth")):
        r = sub.add_parser(name, help=helptext)
        r.add_argument("--checkpoint", required=True)
        r.add_argument("--traversal", type=int, required=True)
        r.add_argument("--data")
        r.add_argument("--frame", type=int)
        r.add_argument("--camera", help="JSON camera file instead of a dataset frame")
        r.add_argument("--timestamp", type=float, default=0.0)
        r.add_argument("--out", required=True)
        r.set_defaults(func=func)

    rl = sub.add_parser("relight", help="material of one traversal under the light of another")
    rl.add_argument("--checkpoint", required=True)
    rl.add_argument("--data", required=True)
    rl.add_argument("--material-traversal", type=int, required=True)
    rl.add_argument("--light-traversal", type=int, required=True)
    rl.add_argument("--frame", type=int, required=True)
    rl.add_argument("--out", required=True)
    rl.set_defaults(func=cmd_relight)

    e = sub.add_parser("eval", help="PSNR/SSIM on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("grad-check", help="analytic vs finite-difference gradients")
    gc.add_argument("--scale", choices=("small", "full"), default="small")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if extra and args.command != "train":
        print(f"admgs: unrecognised arguments: {' '.join(extra)}", file=sys.stderr)
        return EXIT_USAGE
    args.overrides = [e for e in extra]
    bad = [e for e in args.overrides if not e.startswith("--") or "=" not in e]
    if bad:
        print(f"admgs: overrides must look like --key=value: {' '.join(bad)}", file=sys.stderr)
        return EXIT_USAGE
    _threads(args)
    try:
        return args.func(args)
    except (UsageError, InvalidArgumentError, MissingTraversalError) as exc:
        print(f"admgs: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"admgs: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergenceError as exc:
        print(f"admgs: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
