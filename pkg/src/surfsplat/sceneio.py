"""Serialization: scenes, checkpoints, datasets, images, and point clouds.

Scenes and checkpoints are npz archives with a format version; arrays round
trip bit-exactly. Datasets are a JSON descriptor next to image files, with an
importer for the common transforms.json camera layout.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .camera import Camera, perspective_matrix
from .shading import EnvironmentLight
from .surfels import SurfelCloud, logit

SCENE_VERSION = 1
CHECKPOINT_VERSION = 1

CLOUD_KEYS = ("centers", "quats", "log_scales", "albedo_raw", "metallic_raw",
              "roughness_raw")


class SceneFormatError(ValueError):
    pass


def _cloud_arrays(cloud: SurfelCloud) -> dict[str, np.ndarray]:
    return {key: getattr(cloud, key) for key in CLOUD_KEYS}


def _cloud_from_arrays(data) -> SurfelCloud:
    missing = [k for k in CLOUD_KEYS if k not in data]
    if missing:
        raise SceneFormatError(f"missing arrays: {missing}")
    return SurfelCloud(**{k: np.array(data[k]) for k in CLOUD_KEYS})


def save_scene(path, cloud: SurfelCloud, env: EnvironmentLight | None = None) -> None:
    arrays = {"scene_version": np.asarray(SCENE_VERSION, dtype=np.int64)}
    arrays.update(_cloud_arrays(cloud))
    if env is not None:
        arrays["env_base_log"] = env.base_log
        arrays["env_levels"] = np.asarray(env.levels, dtype=np.int64)
    np.savez(path, **arrays)


def load_scene(path) -> tuple[SurfelCloud, EnvironmentLight | None]:
    with np.load(path) as data:
        if "scene_version" not in data:
            raise SceneFormatError(f"{path} is not a scene file")
        version = int(data["scene_version"])
        if version > SCENE_VERSION:
            raise SceneFormatError(f"scene version {version} is newer than supported")
        cloud = _cloud_from_arrays(data)
        env = None
        if "env_base_log" in data:
            env = EnvironmentLight(base_log=np.array(data["env_base_log"]),
                                   levels=int(data["env_levels"]))
    return cloud, env


def save_checkpoint(path, cloud: SurfelCloud, env: EnvironmentLight, optimizer,
                    step: int, knn_neighbors: np.ndarray, knn_mean_dist: np.ndarray,
                    extra: dict | None = None) -> None:
    arrays = {
        "checkpoint_version": np.asarray(CHECKPOINT_VERSION, dtype=np.int64),
        "step": np.asarray(step, dtype=np.int64),
        "env_base_log": env.base_log,
        "env_levels": np.asarray(env.levels, dtype=np.int64),
        "knn_neighbors": knn_neighbors,
        "knn_mean_dist": knn_mean_dist,
    }
    arrays.update(_cloud_arrays(cloud))
    arrays.update(optimizer.state_arrays())
    for key, val in (extra or {}).items():
        arrays[f"extra_{key}"] = np.asarray(val)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns (cloud, env, optimizer_arrays, step, knn arrays, extra)."""
    with np.load(path) as data:
        if "checkpoint_version" not in data:
            raise SceneFormatError(f"{path} is not a checkpoint")
        version = int(data["checkpoint_version"])
        if version > CHECKPOINT_VERSION:
            raise SceneFormatError(f"checkpoint version {version} is newer than supported")
        cloud = _cloud_from_arrays(data)
        env = EnvironmentLight(base_log=np.array(data["env_base_log"]),
                               levels=int(data["env_levels"]))
        step = int(data["step"])
        knn_neighbors = np.array(data["knn_neighbors"])
        knn_mean_dist = np.array(data["knn_mean_dist"])
        opt_arrays = {k: np.array(data[k]) for k in data.files if k.startswith("adam_")}
        extra = {k[len("extra_"):]: np.array(data[k])
                 for k in data.files if k.startswith("extra_")}
    return cloud, env, opt_arrays, step, knn_neighbors, knn_mean_dist, extra


def write_png(path, image) -> None:
    """8-bit PNG from a [0, 1] float image (grayscale or RGB)."""
    from PIL import Image

    arr = np.asarray(image, dtype=np.float64)
    u8 = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(u8).save(path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 255.0


def write_hdr(path, image) -> None:
    """Radiance HDR from a linear float RGB image."""
    import cv2

    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("HDR output needs an (H, W, 3) image")
    if not cv2.imwrite(str(path), arr[:, :, ::-1]):
        raise IOError(f"failed to write {path}")


def read_hdr(path) -> np.ndarray:
    import cv2

    arr = cv2.imread(str(path), cv2.IMREAD_ANYCOLOR | cv2.IMREAD_ANYDEPTH)
    if arr is None:
        raise IOError(f"failed to read {path}")
    return np.asarray(arr[:, :, ::-1], dtype=np.float32)


def load_image(path) -> np.ndarray:
    """Target image loader. .npy holds exact linear values, .hdr linear
    Radiance, .png is treated as already-tone-mapped [0, 1] data."""
    path = str(path)
    if path.endswith(".npy"):
        return np.load(path)
    if path.endswith(".hdr"):
        return read_hdr(path)
    if path.endswith(".png"):
        return read_png(path)
    raise SceneFormatError(f"unsupported image format: {path}")


def save_dataset(root, cameras, images, masks=None, extent: float = 1.0) -> str:
    """Write images as .npy plus a JSON descriptor. Returns descriptor path."""
    os.makedirs(root, exist_ok=True)
    frames = []
    for i, (cam, img) in enumerate(zip(cameras, images)):
        img_name = f"view_{i:03d}.npy"
        np.save(os.path.join(root, img_name), np.asarray(img, dtype=np.float32))
        frame = {
            "image": img_name,
            "view": np.asarray(cam.view).tolist(),
            "proj": np.asarray(cam.proj).tolist(),
            "width": cam.width,
            "height": cam.height,
        }
        if masks is not None:
            mask_name = f"mask_{i:03d}.npy"
            np.save(os.path.join(root, mask_name),
                    np.asarray(masks[i], dtype=np.float32))
            frame["mask"] = mask_name
        frames.append(frame)
    desc = {"format": "surfsplat-dataset", "version": 1, "extent": extent,
            "frames": frames}
    desc_path = os.path.join(root, "dataset.json")
    with open(desc_path, "w") as fh:
        json.dump(desc, fh, indent=2)
    return desc_path


def load_dataset(path):
    """Load a dataset descriptor (ours, or a transforms.json camera file).

    Returns a dict with cameras, images, masks (None entries when absent),
    and extent.
    """
    path = str(path)
    with open(path) as fh:
        desc = json.load(fh)
    root = os.path.dirname(path)
    if desc.get("format") == "surfsplat-dataset":
        cameras, images, masks = [], [], []
        for frame in desc["frames"]:
            cameras.append(Camera(np.asarray(frame["view"]), np.asarray(frame["proj"]),
                                  frame["width"], frame["height"]))
            images.append(load_image(os.path.join(root, frame["image"])))
            masks.append(load_image(os.path.join(root, frame["mask"]))
                         if "mask" in frame else None)
        return {"cameras": cameras, "images": images, "masks": masks,
                "extent": float(desc.get("extent", 1.0))}
    if "frames" in desc and ("camera_angle_x" in desc or "fl_x" in desc):
        return _load_transforms(desc, root)
    raise SceneFormatError(f"unrecognized dataset descriptor: {path}")


def _load_transforms(desc, root):
    """transforms.json: camera-to-world matrices, camera looking down -z with
    +y up, shared horizontal field of view."""
    cameras, images, masks = [], [], []
    extent = float(desc.get("extent", 1.0))
    for frame in desc["frames"]:
        img_path = os.path.join(root, frame["file_path"])
        if not os.path.splitext(img_path)[1]:
            img_path += ".png"
        img = load_image(img_path)
        h, w = img.shape[:2]
        if "camera_angle_x" in desc:
            fov_x = float(desc["camera_angle_x"])
            focal = 0.5 * w / np.tan(0.5 * fov_x)
        else:
            focal = float(desc["fl_x"])
        fov_y = 2.0 * np.arctan(0.5 * h / focal)
        proj = perspective_matrix(fov_y, w / h)
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        view = np.linalg.inv(c2w)
        cameras.append(Camera(view, proj, w, h))
        if img.ndim == 3 and img.shape[2] == 4:
            masks.append(img[:, :, 3])
            img = img[:, :, :3]
        else:
            masks.append(None)
        images.append(img)
    return {"cameras": cameras, "images": images, "masks": masks, "extent": extent}


PLY_PROPS = ("x", "y", "z", "nx", "ny", "nz", "scale_u", "scale_v",
             "albedo_r", "albedo_g", "albedo_b", "metallic", "roughness")


def export_ply(path, cloud: SurfelCloud) -> None:
    """Binary little-endian PLY: positions, normals, per-axis scales, and
    activated material values, one float32 property each."""
    n = len(cloud)
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
        + [f"property float {name}" for name in PLY_PROPS]
        + ["end_header", ""])
    normals = cloud.normals.astype(np.float32)
    rows = np.empty((n, len(PLY_PROPS)), dtype="<f4")
    rows[:, 0:3] = cloud.centers
    rows[:, 3:6] = normals
    rows[:, 6:8] = cloud.scales
    rows[:, 8:11] = cloud.albedo
    rows[:, 11] = cloud.metallic
    rows[:, 12] = cloud.roughness
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rows.tobytes())


def import_ply(path) -> SurfelCloud:
    """Read a PLY written by export_ply (tolerates extra float properties)."""
    with open(path, "rb") as fh:
        first = fh.readline().strip()
        if first != b"ply":
            raise SceneFormatError(f"{path} is not a PLY file")
        fmt = None
        count = 0
        props: list[str] = []
        while True:
            line = fh.readline()
            if not line:
                raise SceneFormatError("unterminated PLY header")
            tokens = line.strip().decode("ascii").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                if tokens[1] != "vertex":
                    raise SceneFormatError("only vertex elements are supported")
                count = int(tokens[2])
            elif tokens[0] == "property":
                if tokens[1] != "float":
                    raise SceneFormatError("only float properties are supported")
                props.append(tokens[2])
            elif tokens[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise SceneFormatError(f"unsupported PLY format {fmt}")
        missing = [p for p in PLY_PROPS if p not in props]
        if missing:
            raise SceneFormatError(f"missing PLY properties: {missing}")
        raw = fh.read(4 * len(props) * count)
        if len(raw) != 4 * len(props) * count:
            raise SceneFormatError("truncated PLY payload")
    rows = np.frombuffer(raw, dtype="<f4").reshape(count, len(props))
    col = {name: rows[:, i] for i, name in enumerate(props)}
    centers = np.stack([col["x"], col["y"], col["z"]], axis=1)
    normals = np.stack([col["nx"], col["ny"], col["nz"]], axis=1).astype(np.float64)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise SceneFormatError("zero-length normal in PLY")
    scales = np.stack([col["scale_u"], col["scale_v"]], axis=1).astype(np.float64)
    if np.any(scales <= 0):
        raise SceneFormatError("non-positive scale in PLY")
    albedo = np.stack([col["albedo_r"], col["albedo_g"], col["albedo_b"]], axis=1)
    clip = lambda x: np.clip(np.asarray(x, dtype=np.float64), 1e-5, 1.0 - 1e-5)
    return SurfelCloud(
        centers=centers.astype(np.float32),
        quats=_quats_for(normals / norms),
        log_scales=np.log(scales).astype(np.float32),
        albedo_raw=logit(clip(albedo)).astype(np.float32),
        metallic_raw=logit(clip(col["metallic"])).astype(np.float32),
        roughness_raw=logit(clip(col["roughness"])).astype(np.float32),
    )


def _quats_for(normals):
    from .surfels import quats_from_normals

    return quats_from_normals(normals).astype(np.float32)
