"""Finite-difference validation of the analytic gradients.

The probe loss is the sum of squared pixel errors of the linear render (color
and coverage) against fixed random targets, plus the depth-consolidation
penalty. Central differences only count when both displaced evaluations stay
on the same discrete branches as the base render: same layer structure, same
per-surfel pixel coverage, same culling, Jacobian, and shading lookup cells.
When a displacement crosses a branch the step shrinks; coordinates that never
stabilize are excluded and reported, capped at a small fraction.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from .backward import backward_image
from .camera import Camera
from .losses import consolidation_loss
from .rasterizer import RenderOptions, render
from .shading import EnvironmentLight
from .surfels import SurfelCloud

REL_TOL = 1e-3
ABS_TOL = 1e-6
MAX_UNSTABLE_FRAC = 0.02
FD_RETRIES = 6
FD_SHRINK = 0.25

SAMPLES_PER_CLASS = {
    "centers": 4, "quats": 4, "log_scales": 3, "albedo_raw": 3,
    "metallic_raw": 2, "roughness_raw": 2, "env_base_log": 4,
}


@dataclass
class CheckRecord:
    scene: int
    param: str
    index: tuple
    analytic: float
    fd: float
    error: float
    tol: float
    step: float
    status: str  # pass | fail | unstable


def make_scene(i: int, width: int = 64, height: int = 64):
    """Seeded random scene i: cloud, camera, env (None on albedo scenes),
    options, color and coverage targets, consolidation scale."""
    rng = np.random.default_rng(10_000 + i)
    n = int(rng.integers(20, 101))
    centers = rng.uniform(-0.8, 0.8, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    log_scales = np.log(rng.uniform(0.08, 0.3, size=(n, 2)))
    cloud = SurfelCloud(
        centers=centers, quats=quats, log_scales=log_scales,
        albedo_raw=rng.normal(0.0, 1.0, size=(n, 3)),
        metallic_raw=rng.normal(0.0, 1.0, size=n),
        roughness_raw=rng.normal(0.0, 1.0, size=n),
    )
    az = rng.uniform(0.0, 2.0 * np.pi)
    el = rng.uniform(-0.9, 0.9)
    eye = 3.2 * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
    camera = Camera.perspective(width, height, 45.0, eye, (0.0, 0.0, 0.0))
    shaded = i % 2 == 0
    env = None
    if shaded:
        env = EnvironmentLight(base_log=rng.normal(np.log(0.6), 0.3, size=(8, 16, 3)))
    options = RenderOptions(
        background=tuple(rng.uniform(0.0, 0.3, size=3)),
        mip_enabled=bool(i % 3 != 1),
        dtype=np.float64,
        shade="ibl" if shaded else "albedo",
        collect_stacks=True,
        with_cover_counts=True,
    )
    target_rgb = rng.uniform(0.0, 1.2, size=(height, width, 3))
    target_alpha = rng.uniform(0.0, 1.0, size=(height, width))
    cons_scale = 1.0 / (width * height)
    return cloud, camera, env, options, target_rgb, target_alpha, cons_scale


def branch_signature(res) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(res.nlayers).tobytes())
    h.update(np.ascontiguousarray(res.proj.cull_code).tobytes())
    h.update(np.ascontiguousarray(res.proj.jac_ok).tobytes())
    if res.cover_counts is not None:
        h.update(np.ascontiguousarray(res.cover_counts).tobytes())
    if res.shading_ctx is not None:
        h.update(np.ascontiguousarray(res.shading_ctx.cells).tobytes())
    return h.digest()


def _forward_loss(cloud, camera, env, options, target_rgb, target_alpha, cons_scale):
    res = render(cloud, camera, options, env=env)
    rgb = res.rgb.astype(np.float64)
    alpha = res.alpha.astype(np.float64)
    loss = float(np.sum((rgb - target_rgb) ** 2) + np.sum((alpha - target_alpha) ** 2))
    cons, _ = consolidation_loss(res.stacks, options.gamma, cons_scale)
    return loss + cons, branch_signature(res), res


def _analytic(cloud, camera, env, options, target_rgb, target_alpha, cons_scale):
    loss, sig, res = _forward_loss(cloud, camera, env, options, target_rgb,
                                   target_alpha, cons_scale)
    g_rgb = 2.0 * (res.rgb.astype(np.float64) - target_rgb)
    g_alpha = 2.0 * (res.alpha.astype(np.float64) - target_alpha)
    grads = backward_image(cloud, res, g_rgb=g_rgb, g_alpha=g_alpha,
                           cons_scale=cons_scale)
    table = {
        "centers": grads.centers, "quats": grads.quats,
        "log_scales": grads.log_scales, "albedo_raw": grads.albedo_raw,
        "metallic_raw": grads.metallic_raw, "roughness_raw": grads.roughness_raw,
        "env_base_log": grads.env_base_log,
    }
    return loss, sig, table


def _displaced(cloud, env, param, index, delta):
    if param == "env_base_log":
        env2 = env.copy()
        env2.base_log = env.base_log.copy()
        env2.base_log[index] += delta
        env2.refresh()
        return cloud, env2
    cloud2 = cloud.copy()
    arr = getattr(cloud2, param).copy()
    arr[index] += delta
    setattr(cloud2, param, arr)
    return cloud2, env


def check_scene(scene_id: int, rng: np.random.Generator,
                width: int = 64, height: int = 64) -> list[CheckRecord]:
    cloud, camera, env, options, t_rgb, t_alpha, cons_scale = make_scene(
        scene_id, width, height)
    _, base_sig, table = _analytic(cloud, camera, env, options, t_rgb, t_alpha,
                                   cons_scale)
    records = []
    for param, count in SAMPLES_PER_CLASS.items():
        if param == "env_base_log" and env is None:
            continue
        source = env.base_log if param == "env_base_log" else getattr(cloud, param)
        grad = table[param]
        if grad is None:
            continue
        flat_choices = rng.choice(source.size, size=min(count, source.size),
                                  replace=False)
        for flat in flat_choices:
            index = np.unravel_index(int(flat), source.shape)
            value = float(source[index])
            analytic = float(grad[index])
            h = 1e-4 * max(1.0, abs(value))
            status = "unstable"
            fd = float("nan")
            for _ in range(FD_RETRIES):
                c_plus, e_plus = _displaced(cloud, env, param, index, +h)
                lp, sig_p, _ = _forward_loss(c_plus, camera, e_plus, options,
                                             t_rgb, t_alpha, cons_scale)
                c_minus, e_minus = _displaced(cloud, env, param, index, -h)
                lm, sig_m, _ = _forward_loss(c_minus, camera, e_minus, options,
                                             t_rgb, t_alpha, cons_scale)
                if sig_p == base_sig and sig_m == base_sig:
                    fd = (lp - lm) / (2.0 * h)
                    status = "stable"
                    break
                h *= FD_SHRINK
            if status == "unstable":
                records.append(CheckRecord(scene_id, param, tuple(map(int, index)),
                                           analytic, fd, float("nan"), float("nan"),
                                           h, "unstable"))
                continue
            tol = max(REL_TOL * max(abs(analytic), abs(fd)), ABS_TOL)
            err = abs(analytic - fd)
            records.append(CheckRecord(scene_id, param, tuple(map(int, index)),
                                       analytic, fd, err, tol, h,
                                       "pass" if err <= tol else "fail"))
    return records


def run_gradcheck(n_scenes: int = 20, seed: int = 0, width: int = 64,
                  height: int = 64, json_path=None):
    """Full finite-difference sweep. Returns a report dict; writes JSON when
    json_path is given."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    records: list[CheckRecord] = []
    for i in range(n_scenes):
        records.extend(check_scene(i, rng, width, height))
    checked = [r for r in records if r.status != "unstable"]
    unstable = [r for r in records if r.status == "unstable"]
    failed = [r for r in checked if r.status == "fail"]
    frac_unstable = len(unstable) / max(len(records), 1)
    per_class: dict[str, dict] = {}
    for r in records:
        slot = per_class.setdefault(r.param, {"pass": 0, "fail": 0, "unstable": 0})
        slot["pass" if r.status == "pass" else
             ("fail" if r.status == "fail" else "unstable")] += 1
    report = {
        "scenes": n_scenes,
        "total": len(records),
        "checked": len(checked),
        "passed": len(checked) - len(failed),
        "failed": len(failed),
        "unstable": len(unstable),
        "unstable_frac": frac_unstable,
        "max_unstable_frac": MAX_UNSTABLE_FRAC,
        "elapsed_s": time.time() - t0,
        "ok": not failed and frac_unstable <= MAX_UNSTABLE_FRAC,
        "per_class": per_class,
        "failures": [asdict(r) for r in failed],
        "unstable_records": [asdict(r) for r in unstable],
    }
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(report, fh, indent=2, default=_json_safe)
    return report


def _json_safe(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def format_report(report) -> str:
    lines = [
        f"gradient check: {report['passed']}/{report['checked']} passed, "
        f"{report['failed']} failed, {report['unstable']} unstable "
        f"({report['unstable_frac']:.1%}, cap {report['max_unstable_frac']:.0%}), "
        f"{report['elapsed_s']:.1f}s",
    ]
    for param, slot in sorted(report["per_class"].items()):
        lines.append(f"  {param:14s} pass {slot['pass']:3d}  fail {slot['fail']:3d}"
                     f"  unstable {slot['unstable']:3d}")
    for rec in report["failures"]:
        lines.append(f"  FAIL scene {rec['scene']} {rec['param']}{rec['index']}: "
                     f"analytic {rec['analytic']:.6g} vs fd {rec['fd']:.6g} "
                     f"(err {rec['error']:.3g} > tol {rec['tol']:.3g})")
    lines.append("OK" if report["ok"] else "FAILED")
    return "\n".join(lines)
