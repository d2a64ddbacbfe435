"""Versioned binary persistence for datasets and checkpoints.

Layout (all integers little-endian):
  magic "SPLQ1" | version u32 | flags u32 | dtype-size u8 | K u32 | N u32
  camera (fx fy cx cy near far f64, width height u32) | scene_extent f64
  background 3xf64 | config JSON (u32 length + utf8)
then, gated by flags, in this order:
  CLOUD  positions/rotations/log_scales/opacity_logits/colors (stored dtype)
  NET    parameter count u64 + flat array (stored dtype)
  FRAMES rotations Nx3x3 f64, translations Nx3 f64, timestamps N f64,
         image paths JSON (relative to the scene file)
  GT     true-cloud block (f64) + subject mask u8 + motion arrays + amplitude/frequency f64

Images live as separate PNGs referenced by relative path; frame images are
quantized to the 8-bit grid before saving, so load(save(x)) is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .deformation import DeformationNet
from .errors import SceneFileError
from .model import Model
from .scene import CameraModel, Dataset, FrameRecord, GaussianCloud
from .scenegen import TrueTrajectory

MAGIC = b"SPLQ1"
VERSION = 1

FLAG_CLOUD = 1
FLAG_NET = 2
FLAG_FRAMES = 4
FLAG_GT = 8

_CLOUD_SHAPES = (("positions", 3), ("rotations", 4), ("log_scales", 3), ("opacity_logits", 0), ("colors", 3))


@dataclass
class SceneFile:
    camera: CameraModel
    scene_extent: float
    background: tuple = (0.0, 0.0, 0.0)
    config: dict = field(default_factory=dict)
    cloud: GaussianCloud | None = None
    net_params: np.ndarray | None = None
    frame_rotations: np.ndarray | None = None
    frame_translations: np.ndarray | None = None
    frame_timestamps: np.ndarray | None = None
    image_paths: list | None = None
    gt: dict | None = None


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise SceneFileError(
                f"truncated scene file: wanted {n} bytes at offset {self.off}, "
                f"only {len(self.data) - self.off} remain"
            )
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self, n: int = 1):
        vals = struct.unpack(f"<{n}d", self.take(8 * n))
        return vals[0] if n == 1 else vals

    def array(self, dtype: str, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 0
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    def blob(self) -> bytes:
        return self.take(self.u32())


def _dtype_str(size: int) -> str:
    if size == 4:
        return "<f4"
    if size == 8:
        return "<f8"
    raise SceneFileError(f"unsupported stored dtype size {size}")


def save_scene(path, scene: SceneFile) -> None:
    path = Path(path)
    flags = 0
    if scene.cloud is not None:
        flags |= FLAG_CLOUD
    if scene.net_params is not None:
        flags |= FLAG_NET
    if scene.frame_timestamps is not None:
        flags |= FLAG_FRAMES
    if scene.gt is not None:
        flags |= FLAG_GT

    if scene.cloud is not None:
        dsize = scene.cloud.dtype.itemsize
    elif scene.net_params is not None:
        dsize = scene.net_params.dtype.itemsize
    else:
        dsize = 4
    dt = _dtype_str(dsize)

    K = scene.cloud.count if scene.cloud is not None else 0
    N = len(scene.frame_timestamps) if scene.frame_timestamps is not None else 0
    cam = scene.camera

    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, flags)
    out += struct.pack("<B", dsize)
    out += struct.pack("<II", K, N)
    out += struct.pack("<6d", cam.fx, cam.fy, cam.cx, cam.cy, cam.near, cam.far)
    out += struct.pack("<II", cam.width, cam.height)
    out += struct.pack("<d", scene.scene_extent)
    out += struct.pack("<3d", *scene.background)
    cfg = json.dumps(scene.config, sort_keys=True).encode()
    out += struct.pack("<I", len(cfg)) + cfg

    if scene.cloud is not None:
        for name, _ in _CLOUD_SHAPES:
            out += getattr(scene.cloud, name).astype(dt, copy=False).tobytes()
    if scene.net_params is not None:
        out += struct.pack("<Q", scene.net_params.size)
        out += scene.net_params.astype(dt, copy=False).tobytes()
    if scene.frame_timestamps is not None:
        out += np.ascontiguousarray(scene.frame_rotations, dtype="<f8").tobytes()
        out += np.ascontiguousarray(scene.frame_translations, dtype="<f8").tobytes()
        out += np.ascontiguousarray(scene.frame_timestamps, dtype="<f8").tobytes()
        paths = json.dumps(scene.image_paths or [""] * N).encode()
        out += struct.pack("<I", len(paths)) + paths
    if scene.gt is not None:
        gt = scene.gt
        kg = gt["positions"].shape[0]
        out += struct.pack("<I", kg)
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors"):
            out += np.ascontiguousarray(gt[name], dtype="<f8").tobytes()
        out += np.ascontiguousarray(gt["subject_mask"], dtype=np.uint8).tobytes()
        out += np.ascontiguousarray(gt["directions"], dtype="<f8").tobytes()
        out += np.ascontiguousarray(gt["phases"], dtype="<f8").tobytes()
        out += struct.pack("<2d", gt["amplitude"], gt["frequency"])

    path.write_bytes(bytes(out))


def load_scene(path) -> SceneFile:
    path = Path(path)
    r = _Reader(path.read_bytes())
    magic = r.take(5)
    if magic != MAGIC:
        raise SceneFileError(f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    version = r.u32()
    if version != VERSION:
        raise SceneFileError(f"unsupported scene file version {version}")
    flags = r.u32()
    dsize = r.u8()
    dt = _dtype_str(dsize)
    K = r.u32()
    N = r.u32()
    fx, fy, cx, cy, near, far = r.f64(6)
    width = r.u32()
    height = r.u32()
    extent = r.f64()
    background = tuple(r.f64(3))
    config = json.loads(r.blob().decode() or "{}")

    camera = CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height, near=near, far=far)
    scene = SceneFile(camera=camera, scene_extent=extent, background=background, config=config)

    if flags & FLAG_CLOUD:
        arrays = []
        for name, dim in _CLOUD_SHAPES:
            shape = (K, dim) if dim else (K,)
            arrays.append(r.array(dt, shape))
        scene.cloud = GaussianCloud(*arrays)
    if flags & FLAG_NET:
        n = r.u64()
        scene.net_params = r.array(dt, (n,))
    if flags & FLAG_FRAMES:
        scene.frame_rotations = r.array("<f8", (N, 3, 3))
        scene.frame_translations = r.array("<f8", (N, 3))
        scene.frame_timestamps = r.array("<f8", (N,))
        scene.image_paths = json.loads(r.blob().decode())
    if flags & FLAG_GT:
        kg = r.u32()
        gt = {}
        for name, dim in _CLOUD_SHAPES:
            shape = (kg, dim) if dim else (kg,)
            gt[name] = r.array("<f8", shape)
        gt["subject_mask"] = r.array(np.uint8, (kg,)).astype(bool)
        gt["directions"] = r.array("<f8", (kg, 3))
        gt["phases"] = r.array("<f8", (kg,))
        gt["amplitude"], gt["frequency"] = r.f64(2)
        scene.gt = gt
    return scene


def write_png(path, image: np.ndarray) -> None:
    u8 = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255


def png_bytes(image: np.ndarray) -> bytes:
    import io

    u8 = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="PNG")
    return buf.getvalue()


def _gt_dict(trajectory: TrueTrajectory) -> dict:
    c = trajectory.canonical
    return {
        "positions": c.positions,
        "rotations": c.rotations,
        "log_scales": c.log_scales,
        "opacity_logits": c.opacity_logits,
        "colors": c.colors,
        "subject_mask": trajectory.subject_mask,
        "directions": trajectory.directions,
        "phases": trajectory.phases,
        "amplitude": trajectory.amplitude,
        "frequency": trajectory.frequency,
    }


def _gt_trajectory(gt: dict, camera: CameraModel, background) -> TrueTrajectory:
    cloud = GaussianCloud(
        gt["positions"], gt["rotations"], gt["log_scales"], gt["opacity_logits"], gt["colors"]
    )
    return TrueTrajectory(
        canonical=cloud,
        subject_mask=gt["subject_mask"],
        directions=gt["directions"],
        phases=gt["phases"],
        amplitude=float(gt["amplitude"]),
        frequency=float(gt["frequency"]),
        camera=camera,
        background=np.asarray(background, dtype=np.float64),
    )


def save_dataset(path, dataset: Dataset) -> None:
    """Scene file plus an images/ directory of per-frame PNGs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img_dir = path.parent / "images"
    img_dir.mkdir(exist_ok=True)
    paths = []
    for frame in dataset.frames:
        rel = f"images/frame_{frame.index:04d}.png"
        write_png(path.parent / rel, frame.image)
        paths.append(rel)

    trajectory = dataset.meta.get("trajectory")
    scene = SceneFile(
        camera=dataset.camera,
        scene_extent=dataset.scene_extent,
        background=tuple(trajectory.background) if trajectory is not None else (0.0, 0.0, 0.0),
        config={},
        frame_rotations=np.stack([f.rotation for f in dataset.frames]),
        frame_translations=np.stack([f.translation for f in dataset.frames]),
        frame_timestamps=np.array([f.timestamp for f in dataset.frames]),
        image_paths=paths,
        gt=_gt_dict(trajectory) if trajectory is not None else None,
    )
    save_scene(path, scene)


def load_dataset(path) -> Dataset:
    path = Path(path)
    scene = load_scene(path)
    if scene.frame_timestamps is None:
        raise SceneFileError("scene file has no frame section")
    frames = []
    for n, t in enumerate(scene.frame_timestamps):
        rel = scene.image_paths[n]
        if not rel:
            raise SceneFileError(f"frame {n} has no image path; not a dataset file")
        frames.append(
            FrameRecord(
                image=read_png(path.parent / rel),
                rotation=scene.frame_rotations[n],
                translation=scene.frame_translations[n],
                timestamp=float(t),
                index=n,
            )
        )
    meta = {}
    if scene.gt is not None:
        meta["trajectory"] = _gt_trajectory(scene.gt, scene.camera, scene.background)
    return Dataset(frames=frames, camera=scene.camera, scene_extent=scene.scene_extent, meta=meta)


def checkpoint_dataset(scene: SceneFile) -> Dataset:
    """Reconstruct the training dataset from a checkpoint's embedded GT motion.

    Frames are re-rendered from the true trajectory at their own timestamps, so
    a regenerated dataset is bit-identical to the one the scene was trained on.
    """
    if scene.gt is None:
        raise SceneFileError("checkpoint carries no ground-truth section")
    if scene.frame_timestamps is None:
        raise SceneFileError("checkpoint carries no frame section")
    from .scenegen import quantize_image

    trajectory = _gt_trajectory(scene.gt, scene.camera, scene.background)
    frames = []
    for n, t in enumerate(scene.frame_timestamps):
        pose = (scene.frame_rotations[n], scene.frame_translations[n])
        frames.append(
            FrameRecord(
                image=quantize_image(trajectory.render_gt(float(t), pose)),
                rotation=pose[0],
                translation=pose[1],
                timestamp=float(t),
                index=n,
            )
        )
    return Dataset(
        frames=frames,
        camera=scene.camera,
        scene_extent=scene.scene_extent,
        meta={"trajectory": trajectory},
    )


def save_checkpoint(path, model: Model, dataset: Dataset, config: dict | None = None) -> None:
    """Persist a trained model together with the capture's poses and GT motion."""
    trajectory = dataset.meta.get("trajectory")
    scene = SceneFile(
        camera=model.camera,
        scene_extent=dataset.scene_extent,
        background=tuple(model.background),
        config=config or {},
        cloud=model.cloud,
        net_params=model.net.params,
        frame_rotations=np.stack([f.rotation for f in dataset.frames]),
        frame_translations=np.stack([f.translation for f in dataset.frames]),
        frame_timestamps=np.array([f.timestamp for f in dataset.frames]),
        image_paths=dataset.meta.get("image_paths"),
        gt=_gt_dict(trajectory) if trajectory is not None else None,
    )
    save_scene(path, scene)


def load_checkpoint(path):
    """Returns (Model, poses list, timestamps, SceneFile)."""
    scene = load_scene(path)
    if scene.cloud is None or scene.net_params is None:
        raise SceneFileError("scene file is not a checkpoint (missing cloud or net)")
    model = Model(
        cloud=scene.cloud,
        net=DeformationNet(scene.net_params),
        camera=scene.camera,
        background=tuple(scene.background),
    )
    poses = [
        (scene.frame_rotations[n], scene.frame_translations[n])
        for n in range(len(scene.frame_timestamps))
    ]
    return model, poses, list(map(float, scene.frame_timestamps)), scene
