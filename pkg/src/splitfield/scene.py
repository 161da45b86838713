"""Synthetic box scenes, pinhole cameras, ground-truth rendering and the on-disk dataset format.

Coordinates are right-handed with +y up. A view direction is given by azimuth
``phi`` (from +x towards +z) and polar angle ``theta`` (from +y):
``(sin t cos p, cos t, sin t sin p)``, so ``phi=0, theta=pi/2`` looks along +x.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nerf import ContractError, composite, box_exit, T_NEAR, T_FAR

D435I_HFOV = math.radians(69.0)
D435I_VFOV = math.radians(42.0)


@dataclass
class CameraPose:
    position: np.ndarray
    phi: float
    theta: float
    hfov: float = D435I_HFOV
    vfov: float = D435I_VFOV

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if np.abs(self.position).max() > 1.0 + 1e-9:
            raise ContractError(f"camera position {self.position} outside [-1,1]^3")
        if not (0 < self.hfov < math.pi and 0 < self.vfov < math.pi):
            raise ContractError(f"fields of view must lie in (0, pi): {self.hfov}, {self.vfov}")

    def forward(self) -> np.ndarray:
        return view_direction(self.phi, self.theta)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(forward, right, up). ``right`` comes from d/dphi so it is defined at the poles."""
        f = self.forward()
        right = np.array([-math.sin(self.phi), 0.0, math.cos(self.phi)])
        up = np.cross(right, f)
        return f, right, up / np.linalg.norm(up)

    def to_dict(self) -> dict:
        return {"p": [float(v) for v in self.position], "phi": float(self.phi), "theta": float(self.theta)}


def view_direction(phi: float, theta: float) -> np.ndarray:
    st = math.sin(theta)
    return np.array([st * math.cos(phi), math.cos(theta), st * math.sin(phi)])


def look_at(position, target, hfov: float = D435I_HFOV, vfov: float = D435I_VFOV) -> CameraPose:
    d = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
    d /= np.linalg.norm(d)
    theta = math.acos(float(np.clip(d[1], -1.0, 1.0)))
    phi = math.atan2(d[2], d[0]) % (2 * math.pi)
    return CameraPose(position, phi, theta, hfov, vfov)


def generate_rays(pose: CameraPose, width: int, height: int, pixels=None):
    """Unit ray directions for flat pixel ids (row-major). Returns ``(origins, dirs)``.

    Pixel centres span the field of view edge to edge: column 0 and column
    ``width-1`` sit at -hfov/2 and +hfov/2.
    """
    if pixels is None:
        pixels = np.arange(width * height)
    pixels = np.asarray(pixels, dtype=np.int64)
    if pixels.size and (pixels.min() < 0 or pixels.max() >= width * height):
        raise ContractError("pixel index outside the image")
    col = pixels % width
    row = pixels // width
    u = 2.0 * col / max(width - 1, 1) - 1.0 if width > 1 else np.zeros(pixels.shape)
    v = 1.0 - 2.0 * row / max(height - 1, 1) if height > 1 else np.zeros(pixels.shape)
    f, right, up = pose.basis()
    dirs = (
        f[None, :]
        + (u * math.tan(pose.hfov / 2))[:, None] * right[None, :]
        + (v * math.tan(pose.vfov / 2))[:, None] * up[None, :]
    )
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return origins, dirs


# ---------------------------------------------------------------- scene


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray
    density: float

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.color = np.asarray(self.color, dtype=float)
        if np.any(self.lo < -1 - 1e-12) or np.any(self.hi > 1 + 1e-12) or np.any(self.lo >= self.hi):
            raise ContractError(f"box [{self.lo}, {self.hi}] must be non-empty and inside [-1,1]^3")
        if self.density < 0:
            raise ContractError("box density must be non-negative")

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))


@dataclass
class SyntheticScene:
    boxes: list[Box] = field(default_factory=list)

    def field(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Density and color at points ``x`` (N,3); the smallest containing box wins."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sigma = np.zeros(x.shape[0])
        color = np.zeros((x.shape[0], 3))
        best = np.full(x.shape[0], np.inf)
        for b in self.boxes:
            inside = np.all((x >= b.lo) & (x <= b.hi), axis=1) & (b.volume < best)
            sigma[inside] = b.density
            color[inside] = b.color
            best[inside] = b.volume
        return sigma, color


def scene_field(x, scene: SyntheticScene) -> tuple[float, np.ndarray]:
    s, c = scene.field(np.asarray(x, dtype=float).reshape(1, 3))
    return float(s[0]), c[0]


def default_scene() -> SyntheticScene:
    """Five-box room: floor, back wall, two cubes and a tall slab."""
    return SyntheticScene(
        [
            Box([-1.0, -1.0, -1.0], [1.0, -0.8, 1.0], [0.75, 0.7, 0.6], 50.0),  # floor
            Box([-1.0, -0.8, 0.8], [1.0, 1.0, 1.0], [0.35, 0.45, 0.75], 50.0),  # back wall
            Box([-0.65, -0.8, 0.0], [-0.25, -0.4, 0.4], [0.9, 0.15, 0.1], 50.0),  # red cube
            Box([0.2, -0.8, 0.25], [0.5, -0.5, 0.55], [0.1, 0.8, 0.2], 50.0),  # green cube
            Box([0.55, -0.8, 0.45], [0.75, 0.5, 0.7], [0.95, 0.85, 0.2], 50.0),  # tall slab
        ]
    )


def default_target() -> np.ndarray:
    return np.array([0.0, -0.45, 0.4])


def pose_ring(n: int, radius: float = 0.75, height: float = 0.05, arc: float = math.radians(140),
              target=None, hfov: float = D435I_HFOV, vfov: float = D435I_VFOV) -> list[CameraPose]:
    """Cameras on an arc in front of the back wall, all looking at the scene centre."""
    target = default_target() if target is None else np.asarray(target, dtype=float)
    poses = []
    for k in range(n):
        a = -arc / 2 + (arc * k / (n - 1) if n > 1 else arc / 2)
        pos = np.array([radius * math.sin(a), height + 0.1 * math.cos(3 * a), -radius * math.cos(a) + 0.1])
        poses.append(look_at(np.clip(pos, -1, 1), target, hfov, vfov))
    return poses


DEPTH_STEP = 0.01


def _segments(scene: SyntheticScene, origins, dirs, t_near: float, t_far: float):
    """Segment each ray at every box-face crossing plus a uniform ``DEPTH_STEP`` grid.

    Face crossings make color exact; the extra grid keeps midpoint depth close to
    the true expected termination depth inside thick boxes.
    """
    far = np.maximum(np.minimum(t_far, box_exit(origins, dirs)), t_near + 1e-9)
    cuts = [np.full(origins.shape[0], t_near), far]
    n_grid = int(math.ceil((t_far - t_near) / DEPTH_STEP))
    cuts.extend(np.full(origins.shape[0], t_near + k * DEPTH_STEP) for k in range(1, n_grid))
    with np.errstate(divide="ignore", invalid="ignore"):
        for b in scene.boxes:
            for lim in (b.lo, b.hi):
                t = (lim[None, :] - origins) / dirs
                t = np.where(np.isfinite(t), t, t_near)
                cuts.extend(t.T)
    t = np.sort(np.clip(np.stack(cuts, axis=1), t_near, far[:, None]), axis=1)
    deltas = np.diff(t, axis=1)
    mids = 0.5 * (t[:, 1:] + t[:, :-1])
    return deltas, mids


def oracle_render(pose: CameraPose, scene: SyntheticScene, width: int, height: int,
                  t_near: float = T_NEAR, t_far: float = T_FAR):
    """Ground-truth color (H,W,3) and depth (H,W) images; exact for box scenes."""
    origins, dirs = generate_rays(pose, width, height)
    return render_field(scene, origins, dirs, t_near, t_far, (height, width))


def render_field(scene: SyntheticScene, origins, dirs, t_near=T_NEAR, t_far=T_FAR, shape=None):
    deltas, mids = _segments(scene, origins, dirs, t_near, t_far)
    pts = origins[:, None, :] + mids[:, :, None] * dirs[:, None, :]
    sigma, color = scene.field(pts.reshape(-1, 3))
    r, p = deltas.shape
    c, d, _ = composite(sigma.reshape(r, p), color.reshape(r, p, 3), deltas, mids)
    c, d = c.value, d.value
    if shape is not None:
        c, d = c.reshape(shape + (3,)), d.reshape(shape)
    return c, d


# ---------------------------------------------------------------- dataset I/O


class DatasetError(Exception):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class ManifestError(DatasetError):
    pass


@dataclass
class Dataset:
    images: list[np.ndarray]  # each (H, W, 3) float in [0,1]
    poses: list[CameraPose]
    width: int
    height: int
    names: list[str] = field(default_factory=list)
    hfov: float = D435I_HFOV
    vfov: float = D435I_VFOV

    def __post_init__(self):
        if len(self.images) != len(self.poses):
            raise DimensionMismatchError(f"{len(self.images)} images but {len(self.poses)} poses")
        if not self.names:
            self.names = [f"img_{i:03d}.ppm" for i in range(len(self.images))]
        for img in self.images:
            if img.shape != (self.height, self.width, 3):
                raise DimensionMismatchError(f"image shape {img.shape} != {(self.height, self.width, 3)}")

    def __len__(self):
        return len(self.images)

    def pixels(self) -> np.ndarray:
        """All labels flattened to (n_images * H * W, 3)."""
        return np.concatenate([im.reshape(-1, 3) for im in self.images])


def quantize8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img) -> None:
    arr = img if np.asarray(img).dtype == np.uint8 else quantize8(img)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr[..., :3]).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file with maxval 255 into a uint8 (H, W, 3) array."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise MissingFileError(f"missing image file: {path}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ManifestError(f"truncated PPM header in {path}")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ManifestError(f"{path}: only P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = data[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ManifestError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def save_dataset(directory, ds: Dataset) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in zip(ds.names, ds.images):
        write_ppm(out / name, img)
    manifest = {
        "images": list(ds.names),
        "poses": [p.to_dict() for p in ds.poses],
        "hfov": ds.hfov,
        "vfov": ds.vfov,
        "width": ds.width,
        "height": ds.height,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise MissingFileError(f"missing manifest: {mpath}")
    try:
        m = json.loads(mpath.read_text())
        names = list(m["images"])
        width, height = int(m["width"]), int(m["height"])
        hfov, vfov = float(m["hfov"]), float(m["vfov"])
        poses = [CameraPose(p["p"], float(p["phi"]), float(p["theta"]), hfov, vfov) for p in m["poses"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"malformed manifest {mpath}: {exc}") from exc
    if len(names) != len(poses):
        raise ManifestError(f"{mpath}: {len(names)} images but {len(poses)} poses")
    images = []
    for name in names:
        arr = read_ppm(root / name)
        if arr.shape != (height, width, 3):
            raise DimensionMismatchError(
                f"{root / name}: {arr.shape[1]}x{arr.shape[0]} does not match manifest {width}x{height}"
            )
        images.append(arr.astype(float) / 255.0)
    return Dataset(images, poses, width, height, names, hfov, vfov)


def make_dataset(scene: SyntheticScene, poses: list[CameraPose], width: int, height: int,
                 quantize: bool = True) -> Dataset:
    """Oracle-render ``scene`` at every pose; quantizing matches what a save/load round trip yields."""
    imgs = []
    for pose in poses:
        c, _ = oracle_render(pose, scene, width, height)
        imgs.append(quantize8(c).astype(float) / 255.0 if quantize else c)
    return Dataset(imgs, poses, width, height, hfov=poses[0].hfov if poses else D435I_HFOV,
                   vfov=poses[0].vfov if poses else D435I_VFOV)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
