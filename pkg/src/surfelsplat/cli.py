"""Command-line interface.

Every command resolves its configuration (defaults, then ``--config`` file,
then ``--set`` / named flags), validates all inputs, and only then creates
the output directory and writes ``config.json`` there. Exit status is 0 on
success, 1 when a check reports failure and 2 on invalid input.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .camera import Camera
from .dataset import DatasetError, SyntheticConfig, load_dataset, make_synthetic
from .imageio import read_png, write_pfm, write_png
from .inellipse import densify_layout, register_mesh
from .mesh import MeshError, load_mesh, loop_subdivide
from .metrics import ms_ssim, psnr, ssim
from .optim import TrainConfig, evaluate, fit, load_model
from .plotting import plot_loss_curves, plot_noise_ablation
from .render import render
from .scene import init_scene, load_scene, save_scene

NOISE_STDS = [0.0, 0.05, 0.1, 0.2]


class InputError(Exception):
    """Invalid command input; carries every problem that was found."""

    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


def default_config() -> dict:
    return {
        "seed": 0,
        "deterministic": True,
        "threads": None,
        "convert": {"subdivision_iters": 2, "fractal_depth": 1},
        "render": {"degree_cap": 3, "cull_backfaces": None},
        "train": TrainConfig().to_dict(),
        "synthetic": SyntheticConfig().to_dict(),
        "gradcheck": {"seeds": None, "suites": list(gc.SUITES)},
        "noise": {"stds": list(NOISE_STDS), "seeds": [0, 1, 2]},
    }


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}{key}"
        if key not in out:
            raise InputError(f"unknown config key '{where}'")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def _parse_set(item: str) -> dict:
    if "=" not in item:
        raise InputError(f"--set expects key.path=value, got '{item}'")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = value
    for part in reversed(key.split(".")):
        node = {part: node}
    return node


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise InputError(f"config file {path} is not valid JSON: {e}") from e
    for item in args.set or []:
        cfg = _merge(cfg, _parse_set(item))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.deterministic:
        cfg["deterministic"] = True
    # the top-level seed and determinism flag drive every section
    cfg["train"]["seed"] = cfg["synthetic"]["seed"] = int(cfg["seed"])
    cfg["train"]["deterministic"] = bool(cfg["deterministic"])
    return cfg


def _apply_threads(n):
    if n is None:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def _echo_config(out: Path, cfg: dict):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))


def _require_file(path, what, problems):
    if not Path(path).is_file():
        problems.append(f"{what} not found: {path}")
        return False
    return True


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2))


# ---------------------------------------------------------------------------
# commands


def cmd_convert(args, cfg) -> int:
    c = cfg["convert"]
    problems = []
    if int(c["subdivision_iters"]) < 0 or int(c["fractal_depth"]) < 0:
        problems.append("subdivision_iters and fractal_depth must be non-negative")
    mesh = None
    if _require_file(args.mesh, "mesh", problems):
        try:
            mesh = load_mesh(args.mesh)
        except MeshError as e:
            problems.append(str(e))
    if problems:
        raise InputError(problems)
    fine = loop_subdivide(mesh, int(c["subdivision_iters"]))
    depth = int(c["fractal_depth"])
    layout = densify_layout(fine.n_faces, depth)
    frames = register_mesh(fine.vertices, fine.faces, depth)
    scene = init_scene(frames, layout.face_id, layout.corner_tag,
                       meta={"source_mesh": str(Path(args.mesh).resolve()), **c})
    out = Path(args.out)
    _echo_config(out, cfg)
    save_scene(scene, out / "scene.msrf")
    print(f"{len(scene)} surfels from {fine.n_faces} faces -> {out / 'scene.msrf'}")
    return 0


def cmd_render(args, cfg) -> int:
    problems = []
    scene = camera = None
    if _require_file(args.scene, "scene", problems):
        try:
            scene = load_scene(args.scene)
        except (ValueError, OSError) as e:
            problems.append(str(e))
    if _require_file(args.camera, "camera", problems):
        try:
            camera = Camera.load(args.camera)
        except (ValueError, KeyError, json.JSONDecodeError) as e:
            problems.append(f"camera {args.camera}: {e}")
    cap = int(cfg["render"]["degree_cap"])
    if not 0 <= cap <= 3:
        problems.append("render.degree_cap must lie in 0..3")
    if problems:
        raise InputError(problems)
    cull = cfg["render"]["cull_backfaces"]
    if cull is None:
        cull = bool(scene.meta.get("cull_backfaces", False))
    buf = render(scene, camera, degree_cap=cap, cull_backfaces=bool(cull))
    out = Path(args.out)
    _echo_config(out, cfg)
    write_png(out / "color.png", buf.color)
    write_png(out / "alpha.png", buf.alpha)
    write_pfm(out / "depth.pfm", buf.depth)
    write_pfm(out / "normal.pfm", buf.normal)
    print(f"rendered {len(scene)} surfels at {camera.width}x{camera.height} -> {out}")
    return 0


def _train_config(cfg) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as e:
        raise InputError(f"train config: {e}") from e


def cmd_fit(args, cfg) -> int:
    problems = []
    dataset = None
    try:
        train_cfg = _train_config(cfg)
    except InputError as e:
        problems.extend(e.problems)
        train_cfg = None
    try:
        dataset = load_dataset(args.manifest)
    except DatasetError as e:
        problems.extend(e.problems)
    if dataset is not None and not dataset.train_ids:
        problems.append("every frame is held out; nothing to train on")
    if problems:
        raise InputError(problems)

    out = Path(args.out)
    _echo_config(out, cfg)
    every = max(1, args.log_every)

    def progress(row):
        if row["iteration"] % every == 0:
            print(f"it {row['iteration']:6d} stage {row['stage']} total {row['total']:.5f}", file=sys.stderr)

    result = fit(dataset, train_cfg, out_dir=out, progress=progress)
    if result.log:
        plot_loss_curves(result.log, out / "loss_curves.png")
    ids = dataset.held_out or list(range(len(dataset)))
    rows = evaluate(result.model, dataset, ids)
    # held-out renders next to their references, ready for `surfelsplat eval`
    render_dir, target_dir = out / "renders", out / "targets"
    render_dir.mkdir(exist_ok=True)
    target_dir.mkdir(exist_ok=True)
    for f in ids:
        fr = dataset.frames[f]
        img = result.model.render_frame(fr.mesh.vertices, fr.theta, fr.beta, fr.camera).color
        write_png(render_dir / f"frame_{f:04d}.png", img)
        write_png(target_dir / f"frame_{f:04d}.png", fr.image)
    report = {"held_out": _with_means(rows), "iterations": len(result.log)}
    _write_json(out / "eval.json", report)
    m = report["held_out"]["mean"]
    print(f"fit done: {len(result.log)} iterations, held-out PSNR {m['psnr']:.2f} dB, SSIM {m['ssim']:.4f}")
    return 0


def _with_means(rows) -> dict:
    keys = ("psnr", "ssim", "ms_ssim")
    mean = {k: float(np.mean([r[k] for r in rows])) if rows else float("nan") for k in keys}
    return {"frames": rows, "mean": mean}


def cmd_eval(args, cfg) -> int:
    rdir, gdir = Path(args.rendered), Path(args.reference)
    problems = [f"directory not found: {d}" for d in (rdir, gdir) if not d.is_dir()]
    if problems:
        raise InputError(problems)
    rnames = {p.name for p in rdir.glob("*.png")}
    gnames = {p.name for p in gdir.glob("*.png")}
    problems += [f"no reference for rendered {rdir / n}" for n in sorted(rnames - gnames)]
    problems += [f"no rendering for reference {gdir / n}" for n in sorted(gnames - rnames)]
    if not rnames & gnames and not problems:
        problems.append(f"no PNG files in {rdir}")
    pairs = []
    for name in sorted(rnames & gnames):
        a, b = read_png(rdir / name), read_png(gdir / name)
        if a.shape != b.shape:
            problems.append(f"{name}: size {a.shape} differs from reference {b.shape}")
        pairs.append((name, a, b))
    if problems:
        raise InputError(problems)
    rows = [{"frame": n, "psnr": psnr(a, b), "ssim": ssim(a, b), "ms_ssim": ms_ssim(a, b)} for n, a, b in pairs]
    report = _with_means(rows)
    if args.out:
        out = Path(args.out)
        _echo_config(out, cfg)
        _write_json(out / "metrics.json", report)
    print(json.dumps(report["mean"]))
    return 0


def cmd_make_synthetic(args, cfg) -> int:
    try:
        syn = SyntheticConfig(**cfg["synthetic"])
    except (TypeError, ValueError) as e:
        raise InputError(f"synthetic config: {e}") from e
    out = Path(args.out)
    manifest = make_synthetic(out, syn)
    _echo_config(out, cfg)
    print(f"{syn.frames} frames of {syn.size}x{syn.size} -> {manifest}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    g = cfg["gradcheck"]
    seeds = g["seeds"] if g["seeds"] is not None else [cfg["seed"]]
    unknown = [s for s in g["suites"] if s not in gc.SUITES]
    if unknown:
        raise InputError(f"unknown gradcheck suites: {unknown}; choose from {sorted(gc.SUITES)}")
    with gc.corrupted(*(args.corrupt or [])):
        reports = gc.run_all(seeds, g["suites"])
    lines = []
    for rep in reports:
        for grp in rep.groups:
            verdict = "ok" if grp.passed else "FAIL"
            lines.append({"suite": rep.name, "seed": rep.seed, "group": grp.group, "error": grp.error,
                          "checked": grp.checked, "passed": grp.passed})
            print(f"{rep.name:16s} seed {rep.seed:3d} {grp.group:14s} {grp.error:.3e} {verdict}")
    passed = all(r.passed for r in reports)
    worst = {}
    for rep in reports:
        worst[rep.name] = max(worst.get(rep.name, 0.0), rep.worst)
    print("worst per suite: " + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()))
    print("PASS" if passed else "FAIL")
    if args.out:
        out = Path(args.out)
        _echo_config(out, cfg)
        _write_json(out / "gradcheck.json", {"tolerance": gc.TOL, "passed": passed, "worst": worst, "groups": lines})
    return 0 if passed else 1


def noise_table(model, dataset, stds, seeds, frame_ids=None) -> list:
    """PSNR / SSIM / MS-SSIM per noise std, averaged over frames then over seeds."""
    ids = frame_ids if frame_ids is not None else (dataset.held_out or list(range(len(dataset))))
    table = []
    for std in stds:
        per_seed = []
        for seed in seeds:
            rows = evaluate(model, dataset, ids, noise_std=float(std), noise_seed=int(seed))
            per_seed.append({k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "ms_ssim")})
        p = [s["psnr"] for s in per_seed]
        table.append({
            "std": float(std),
            "psnr": float(np.mean(p)),
            "psnr_sd": float(np.std(p)),
            "ssim": float(np.mean([s["ssim"] for s in per_seed])),
            "ms_ssim": float(np.mean([s["ms_ssim"] for s in per_seed])),
            "per_seed": per_seed,
        })
    return table


def cmd_noise_ablation(args, cfg) -> int:
    problems = []
    dataset = None
    try:
        dataset = load_dataset(args.manifest)
    except DatasetError as e:
        problems.extend(e.problems)
    ckpt = Path(args.checkpoint)
    for name in ("scene.msrf", "net.mdnp"):
        _require_file(ckpt / name, "checkpoint file", problems)
    stds = args.stds if args.stds is not None else cfg["noise"]["stds"]
    if any(float(s) < 0 for s in stds):
        problems.append("noise stds must be non-negative")
    if problems:
        raise InputError(problems)
    model = load_model(ckpt, dataset)
    table = noise_table(model, dataset, stds, cfg["noise"]["seeds"])
    out = Path(args.out)
    _echo_config(out, cfg)
    _write_json(out / "noise_ablation.json", {"seeds": cfg["noise"]["seeds"], "rows": table})
    with (out / "noise_ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["std", "psnr", "psnr_sd", "ssim", "ms_ssim"])
        for r in table:
            w.writerow([r["std"], r["psnr"], r["psnr_sd"], r["ssim"], r["ms_ssim"]])
    plot_noise_ablation(table, out / "noise_ablation.png")
    for r in table:
        print(f"std {r['std']:.3f}  PSNR {r['psnr']:.3f} +- {r['psnr_sd']:.3f}  SSIM {r['ssim']:.4f}  MS-SSIM {r['ms_ssim']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (see README for the schema)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config value by dotted path, e.g. train.stage1_iters=100")
    common.add_argument("--seed", type=int, help="global seed (overrides config 'seed')")
    common.add_argument("--threads", type=int, help="cap on worker threads")
    common.add_argument("--deterministic", action="store_true", help="force ordered reductions (default on)")

    p = argparse.ArgumentParser(prog="surfelsplat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("convert", parents=[common], help="mesh OBJ -> surfel scene file")
    s.add_argument("mesh")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("render", parents=[common], help="scene + camera JSON -> color/alpha PNG, depth/normal PFM")
    s.add_argument("scene")
    s.add_argument("camera")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("fit", parents=[common], help="two-stage fit to a dataset manifest")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--log-every", type=int, default=250)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM/MS-SSIM between two directories of PNGs")
    s.add_argument("rendered")
    s.add_argument("reference")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("make-synthetic", parents=[common], help="write a self-rendered synthetic dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all analytic gradients")
    s.add_argument("--out")
    s.add_argument("--corrupt", action="append", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("noise-ablation", parents=[common], help="held-out metrics under pose-conditioning noise")
    s.add_argument("manifest")
    s.add_argument("checkpoint", help="directory holding scene.msrf and net.mdnp from 'fit'")
    s.add_argument("--out", required=True)
    s.add_argument("--stds", type=float, nargs="+")
    s.set_defaults(func=cmd_noise_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        _apply_threads(cfg["threads"])
        return args.func(args, cfg)
    except InputError as e:
        print(f"surfelsplat {args.command}: invalid input", file=sys.stderr)
        for msg in e.problems:
            print(f"  - {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
