"""Command-line interface.

Exit codes: 0 success, 2 configuration or argument problem, 3 file I/O
problem, 4 optimization divergence.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


def _fail_io(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_IO)


def _fail_config(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_CONFIG)


def _load_scene(path):
    from .sceneio import SceneFormatError, load_scene

    try:
        return load_scene(path)
    except FileNotFoundError:
        _fail_io(f"scene file not found: {path}")
    except (OSError, SceneFormatError, ValueError) as exc:
        _fail_io(f"cannot read scene {path}: {exc}")


@click.group()
def main():
    """Differentiable surface-splatting renderer and inverse-rendering tools."""


@main.command("render")
@click.argument("scene", type=click.Path())
@click.option("--out", default="render", show_default=True,
              help="Output path prefix.")
@click.option("--width", default=800, show_default=True)
@click.option("--height", default=600, show_default=True)
@click.option("--azimuth", default=0.0, show_default=True, help="Orbit angle, degrees.")
@click.option("--elevation", default=15.0, show_default=True)
@click.option("--radius", default=4.0, show_default=True)
@click.option("--fov", default=45.0, show_default=True)
@click.option("--target", default="0,0,0", show_default=True)
@click.option("--mode", type=click.Choice(["ibl", "albedo"]), default="ibl",
              show_default=True)
@click.option("--depth-mode", type=click.Choice(["interval", "ternary", "ternary-alpha"]),
              default="interval", show_default=True)
@click.option("--mip/--no-mip", default=True, show_default=True)
@click.option("--background", default="0,0,0", show_default=True)
@click.option("--workers", type=int, default=None)
@click.option("--alpha-out", is_flag=True, help="Also write the coverage image.")
@click.option("--depth-out", is_flag=True, help="Also write a normalized depth image.")
@click.option("--layers-out", is_flag=True, help="Also write the layer-count image.")
def cmd_render(scene, out, width, height, azimuth, elevation, radius, fov, target,
               mode, depth_mode, mip, background, workers, alpha_out, depth_out,
               layers_out):
    """Render a scene file to HDR and tone-mapped PNG images."""
    from .camera import Camera
    from .rasterizer import RenderOptions, render
    from .sceneio import write_hdr, write_png
    from .shading import tone_map

    cloud, env = _load_scene(scene)
    try:
        tgt = np.array([float(x) for x in target.split(",")], dtype=np.float64)
        bg = tuple(float(x) for x in background.split(","))
        if tgt.shape != (3,) or len(bg) != 3:
            raise ValueError
    except ValueError:
        _fail_config("--target and --background need three comma-separated numbers")
    az, el = np.deg2rad(azimuth), np.deg2rad(elevation)
    eye = tgt + radius * np.array(
        [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
    camera = Camera.perspective(width, height, fov, eye, tgt)
    if mode == "ibl" and env is None:
        _fail_config("scene has no environment light; use --mode albedo")
    options = RenderOptions(depth_mode=depth_mode, mip_enabled=mip, shade=mode,
                            background=bg, workers=workers)
    try:
        result = render(cloud, camera, options, env=env if mode == "ibl" else None)
    except ValueError as exc:
        _fail_config(str(exc))
    try:
        write_hdr(f"{out}.hdr", result.rgb)
        write_png(f"{out}.png", tone_map(result.rgb, "ldr"))
        if alpha_out:
            write_png(f"{out}_alpha.png", result.alpha)
        if depth_out:
            depth = result.depth.copy()
            covered = result.alpha > 0.0
            if covered.any():
                lo, hi = depth[covered].min(), depth[covered].max()
                depth = (depth - lo) / max(hi - lo, 1e-9)
                depth[~covered] = 0.0
            write_png(f"{out}_depth.png", depth)
        if layers_out:
            write_png(f"{out}_layers.png",
                      result.nlayers / max(result.nlayers.max(), 1))
    except OSError as exc:
        _fail_io(f"cannot write outputs: {exc}")
    click.echo(f"wrote {out}.hdr and {out}.png "
               f"({len(cloud)} surfels, {width}x{height})")


@main.command("fit")
@click.argument("dataset", type=click.Path())
@click.option("--out", default="fit_out", show_default=True,
              help="Output directory.")
@click.option("--steps", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--init-surfels", default=2000, show_default=True)
@click.option("--max-surfels", default=200000, show_default=True)
@click.option("--fixed-geometry", is_flag=True,
              help="Freeze centers, orientations, and scales.")
@click.option("--holdout", default="", help="Comma-separated view indices to hold out.")
@click.option("--checkpoint-interval", default=0, show_default=True)
@click.option("--resume", "resume_path", type=click.Path(), default=None,
              help="Checkpoint to continue from.")
@click.option("--workers", type=int, default=None)
def cmd_fit(dataset, out, steps, seed, init_surfels, max_surfels, fixed_geometry,
            holdout, checkpoint_interval, resume_path, workers):
    """Fit a surfel scene to a dataset of posed images."""
    from .sceneio import SceneFormatError, load_dataset, save_scene
    from .train import FitConfig, fit, resume

    try:
        data = load_dataset(dataset)
    except FileNotFoundError:
        _fail_io(f"dataset not found: {dataset}")
    except (OSError, SceneFormatError, json.JSONDecodeError, KeyError) as exc:
        _fail_io(f"cannot read dataset {dataset}: {exc}")
    try:
        hold = tuple(int(x) for x in holdout.split(",") if x.strip())
    except ValueError:
        _fail_config("--holdout needs comma-separated integers")
    if steps <= 0:
        _fail_config("--steps must be positive")
    os.makedirs(out, exist_ok=True)
    cfg = FitConfig(steps=steps, seed=seed, init_surfels=init_surfels,
                    max_surfels=max_surfels, fixed_geometry=fixed_geometry,
                    holdout=hold, checkpoint_interval=checkpoint_interval,
                    checkpoint_dir=os.path.join(out, "checkpoints")
                    if checkpoint_interval else None,
                    workers=workers)
    try:
        if resume_path:
            result = resume(resume_path, data, cfg)
        else:
            result = fit(data, cfg)
    except (OSError, SceneFormatError) as exc:
        _fail_io(str(exc))

    metrics_path = os.path.join(out, "metrics.csv")
    _write_metrics_csv(metrics_path, result.metrics)
    save_scene(os.path.join(out, "scene.npz"), result.cloud, result.env)
    if result.diverged:
        click.echo(f"diverged at step {result.steps_run}; wrote last good state "
                   f"to {out}/scene.npz", err=True)
        sys.exit(EXIT_DIVERGED)
    final = result.metrics[-1]["loss"] if result.metrics else float("nan")
    click.echo(f"fit finished: {result.steps_run} steps, {len(result.cloud)} surfels, "
               f"final loss {final:.6f}; outputs in {out}/")


def _write_metrics_csv(path, metrics):
    import csv

    if not metrics:
        return
    keys = ["step", "view", "phase", "loss", "photometric", "silhouette",
            "consolidation", "normal_consistency", "surfels"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(metrics)


@main.command("bench")
@click.argument("scene", type=click.Path())
@click.option("--frames", default=600, show_default=True)
@click.option("--warmup", default=200, show_default=True)
@click.option("--width", default=800, show_default=True)
@click.option("--height", default=600, show_default=True)
@click.option("--radius", default=4.0, show_default=True)
@click.option("--mode", type=click.Choice(["albedo", "ibl", "both"]), default="both",
              show_default=True)
@click.option("--workers", type=int, default=None)
def cmd_bench(scene, frames, warmup, width, height, radius, mode, workers):
    """Benchmark render throughput on an orbit around a scene."""
    from .bench import format_benchmark, run_benchmark
    from .rasterizer import RenderOptions

    cloud, env = _load_scene(scene)
    if frames <= 0 or warmup < 0:
        _fail_config("--frames must be positive and --warmup non-negative")
    modes = ("albedo", "ibl") if mode == "both" else (mode,)
    for m in modes:
        if m == "ibl" and env is None:
            click.echo("skipping ibl mode: scene has no environment light", err=True)
            continue
        opts = RenderOptions(shade=m, workers=workers)
        stats = run_benchmark(cloud, options=opts, env=env if m == "ibl" else None,
                              frames=frames, warmup=warmup, orbit_radius=radius,
                              width=width, height=height)
        click.echo(format_benchmark(stats))


@main.command("sample")
@click.argument("mesh", type=click.Path(), required=False)
@click.option("--shape", type=click.Choice(["icosphere", "torus"]), default=None,
              help="Built-in shape instead of a mesh file.")
@click.option("--mode", type=click.Choice(["iso", "aniso"]), default="iso",
              show_default=True)
@click.option("--per-face", default=5.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default="sampled.npz", show_default=True,
              help="Output scene (.npz) or point cloud (.ply).")
def cmd_sample(mesh, shape, mode, per_face, seed, out):
    """Sample a surfel cloud from a triangle mesh (OBJ) or built-in shape."""
    from .meshsample import icosphere_mesh, sample_mesh, torus_mesh
    from .sceneio import export_ply, save_scene

    if (mesh is None) == (shape is None):
        _fail_config("pass exactly one of MESH or --shape")
    if shape == "icosphere":
        verts, faces = icosphere_mesh(3)
    elif shape == "torus":
        verts, faces = torus_mesh()
    else:
        try:
            verts, faces = _read_obj(mesh)
        except FileNotFoundError:
            _fail_io(f"mesh not found: {mesh}")
        except (OSError, ValueError) as exc:
            _fail_io(f"cannot read mesh {mesh}: {exc}")
    cloud = sample_mesh(verts, faces, samples_per_face=per_face, mode=mode, seed=seed)
    try:
        if out.endswith(".ply"):
            export_ply(out, cloud)
        else:
            save_scene(out, cloud)
    except OSError as exc:
        _fail_io(f"cannot write {out}: {exc}")
    click.echo(f"sampled {len(cloud)} surfels from {len(faces)} faces -> {out}")


def _read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not faces:
        raise ValueError("no vertices or faces found")
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


@main.command("export-ply")
@click.argument("scene", type=click.Path())
@click.argument("out", type=click.Path())
def cmd_export_ply(scene, out):
    """Export a scene's surfels as a binary PLY point cloud."""
    from .sceneio import export_ply

    cloud, _ = _load_scene(scene)
    try:
        export_ply(out, cloud)
    except OSError as exc:
        _fail_io(f"cannot write {out}: {exc}")
    click.echo(f"wrote {len(cloud)} surfels to {out}")


@main.command("fixtures")
@click.argument("name", type=click.Choice(
    ["grid", "checkerboard", "two_spheres", "blob", "two_shells", "diffuse_sphere"]))
@click.option("--out", default=None, help="Output path (scene .npz, or directory "
              "for diffuse_sphere).")
@click.option("--seed", default=0, show_default=True)
def cmd_fixtures(name, out, seed):
    """Materialize a named test scene or dataset."""
    from . import fixtures as fx
    from .sceneio import save_dataset, save_scene

    try:
        if name == "diffuse_sphere":
            out = out or "diffuse_sphere_dataset"
            data = fx.make_diffuse_sphere_dataset(seed=seed)
            path = save_dataset(out, data["cameras"], data["images"],
                                data["masks"], extent=data["extent"])
            save_scene(os.path.join(out, "ground_truth.npz"), data["cloud"], data["env"])
            click.echo(f"wrote dataset {path} ({len(data['cameras'])} views)")
            return
        builders = {
            "grid": lambda: fx.make_grid_cloud(),
            "checkerboard": lambda: fx.make_checkerboard(seed=seed),
            "two_spheres": lambda: fx.make_two_spheres(seed=seed),
            "blob": lambda: fx.make_blob(seed=seed),
            "two_shells": lambda: fx.make_two_shells(seed=seed),
        }
        cloud = builders[name]()
        out = out or f"{name}.npz"
        save_scene(out, cloud, fx.make_env(seed))
        click.echo(f"wrote {name} ({len(cloud)} surfels) to {out}")
    except OSError as exc:
        _fail_io(f"cannot write fixture: {exc}")


@main.command("gradcheck")
@click.option("--scenes", default=20, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--json", "json_path", type=click.Path(), default=None,
              help="Also write the full report as JSON.")
def cmd_gradcheck(scenes, seed, json_path):
    """Run the finite-difference gradient validation sweep."""
    from .gradcheck import format_report, run_gradcheck

    if scenes <= 0:
        _fail_config("--scenes must be positive")
    try:
        report = run_gradcheck(n_scenes=scenes, seed=seed, json_path=json_path)
    except OSError as exc:
        _fail_io(str(exc))
    click.echo(format_report(report))
    if not report["ok"]:
        sys.exit(1)


if __name__ == "__main__":
    main()
