"""Synthetic scenes: textured backgrounds, a moving occluder (disk,
rectangle or triangle), and the exact cast-shadow mask obtained by
translating the occluder shape along the light direction.

Masks are rasterized analytically at pixel centers, so every mask pixel is
derivable from the scene geometry. Motion is rigid translation of the
occluder+shadow pair, which makes the stored flow fields exact: the
displacement vector on the moving support, zero on the static background.

On-disk layout (all formats from `formats`):

    root/labeled/images/%05d.ppm   root/labeled/masks/%05d.pgm
    root/videos/<id>/frames/%05d.ppm
    root/videos/<id>/flow_fwd/%05d.flo   (index t holds flow t -> t+1)
    root/videos/<id>/flow_bwd/%05d.flo   (index t holds flow t -> t-1)
    root/videos/<id>/masks/%05d.pgm      (optional; needed for evaluation)
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import read_flo, read_pgm, read_ppm, write_flo, write_pgm, write_ppm

TEXTURE_FAMILIES = ("blobs", "stripes")
SHAPE_KINDS = ("disk", "rectangle", "triangle")
TRAJECTORIES = ("linear", "sinusoidal", "mixed")
MARGIN = 2.0


class GenerationError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def worker_count():
    env = os.environ.get("STICT_THREADS", "")
    if env.strip():
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


@dataclass
class SceneSpec:
    """Ranges and families one domain's scenes are drawn from."""

    resolution: int = 64
    frame_count: int = 24
    texture_family: str = "blobs"
    shapes: tuple = SHAPE_KINDS
    size_range: tuple = (6.0, 14.0)
    darkening_range: tuple = (0.25, 0.6)
    light_range: tuple = (8.0, 16.0)
    speed_range: tuple = (0.5, 2.5)
    trajectory: str = "mixed"

    def validate(self):
        if self.resolution < 16 or self.resolution % 16:
            raise GenerationError(f"resolution {self.resolution} must be a multiple of 16")
        if self.frame_count < 3:
            raise GenerationError("videos need at least 3 frames")
        if self.texture_family not in TEXTURE_FAMILIES:
            raise GenerationError(f"unknown texture family {self.texture_family!r}")
        if not self.shapes or any(s not in SHAPE_KINDS for s in self.shapes):
            raise GenerationError(f"bad shape list {self.shapes}")
        if self.trajectory not in TRAJECTORIES:
            raise GenerationError(f"unknown trajectory {self.trajectory!r}")
        for lo, hi, name in (
            (*self.size_range, "size"),
            (*self.darkening_range, "darkening"),
            (*self.light_range, "light"),
            (*self.speed_range, "speed"),
        ):
            if lo > hi or lo < 0:
                raise GenerationError(f"bad {name} range ({lo}, {hi})")
        if self.darkening_range[1] > 1.0:
            raise GenerationError("darkening factor cannot exceed 1.0")
        return self


@dataclass
class LabeledSample:
    frame: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, H, W) float32 in {0, 1}


@dataclass
class VideoClip:
    vid: str
    frames: np.ndarray  # (T, 3, H, W) float32
    flow_fwd: np.ndarray  # (T-1, 2, H, W); [t] maps frame t onto t+1
    flow_bwd: np.ndarray  # (T-1, 2, H, W); [t-1] maps frame t onto t-1
    masks: np.ndarray = None  # (T, 1, H, W) or None for unlabeled-only clips

    @property
    def length(self):
        return self.frames.shape[0]

    def fwd(self, t):
        return self.flow_fwd[t]

    def bwd(self, t):
        return self.flow_bwd[t - 1]


@dataclass
class Dataset:
    labeled: list = field(default_factory=list)
    videos: list = field(default_factory=list)


# -- rasterization ----------------------------------------------------------


def _resize_bilinear(img, out):
    """Plain numpy half-pixel bilinear resize for texture synthesis."""
    c, h, w = img.shape

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(h, out)
    x0, x1, fx = axis(w, out)
    top = img[:, y0][:, :, x0] * (1 - fy)[None, :, None] + img[:, y1][:, :, x0] * fy[None, :, None]
    bot = img[:, y0][:, :, x1] * (1 - fy)[None, :, None] + img[:, y1][:, :, x1] * fy[None, :, None]
    return top * (1 - fx)[None, None, :] + bot * fx[None, None, :]


def _texture(family, res, rng):
    if family == "blobs":
        coarse = rng.random((3, 4, 4))
        tex = _resize_bilinear(coarse, res)
        base = rng.uniform(0.35, 0.6, size=(3, 1, 1))
        return np.clip(base + (tex - 0.5) * 0.5, 0.0, 1.0)
    # stripes
    theta = rng.uniform(0, np.pi)
    yy, xx = np.meshgrid(np.arange(res) + 0.5, np.arange(res) + 0.5, indexing="ij")
    proj = (xx * np.cos(theta) + yy * np.sin(theta)) / res
    tex = np.empty((3, res, res))
    for c in range(3):
        freq = rng.uniform(2.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        base = rng.uniform(0.4, 0.7)
        amp = rng.uniform(0.1, 0.25)
        tex[c] = base + amp * np.sin(2 * np.pi * freq * proj + phase)
    return np.clip(tex, 0.0, 1.0)


def _inside(kind, cx, cy, size, angle, aspect, res):
    """Boolean mask of pixel centers inside the shape at (cx, cy)."""
    yy, xx = np.meshgrid(np.arange(res) + 0.5, np.arange(res) + 0.5, indexing="ij")
    dx, dy = xx - cx, yy - cy
    if kind == "disk":
        return dx * dx + dy * dy <= size * size
    ca, sa = np.cos(angle), np.sin(angle)
    rx = dx * ca + dy * sa
    ry = -dx * sa + dy * ca
    if kind == "rectangle":
        return (np.abs(rx) <= size) & (np.abs(ry) <= size * aspect)
    # triangle: circumradius `size`, vertices every 120 degrees
    verts = [(size * np.cos(a), size * np.sin(a)) for a in (0, 2 * np.pi / 3, 4 * np.pi / 3)]
    inside = np.ones_like(rx, dtype=bool)
    for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
        cross = (x1 - x0) * (ry - y0) - (y1 - y0) * (rx - x0)
        inside &= cross >= 0
    return inside


@dataclass
class _Scene:
    kind: str
    size: float
    angle: float
    aspect: float
    light: np.ndarray  # shadow offset vector (2,)
    darkening: float
    color: np.ndarray  # occluder RGB (3,)
    tex: np.ndarray  # (3, res, res)


def _sample_scene(spec, rng):
    kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
    size = rng.uniform(*spec.size_range)
    angle = rng.uniform(0, 2 * np.pi)
    aspect = rng.uniform(0.5, 1.2)
    mag = rng.uniform(*spec.light_range)
    direction = rng.uniform(0, 2 * np.pi)
    light = np.array([mag * np.cos(direction), mag * np.sin(direction)])
    darkening = rng.uniform(*spec.darkening_range)
    color = rng.uniform(0.55, 1.0, size=3)
    tex = _texture(spec.texture_family, spec.resolution, rng)
    return _Scene(kind, size, angle, aspect, light, darkening, color, tex)


def _feasible_interval(res, light_axis):
    lo = MARGIN + max(0.0, -light_axis)
    hi = res - 1 - MARGIN - max(0.0, light_axis)
    if lo >= hi:
        raise GenerationError("shadow fully off-frame: light offset exceeds the frame")
    return lo, hi


def _render(scene, cx, cy, res):
    body = _inside(scene.kind, cx, cy, scene.size, scene.angle, scene.aspect, res)
    shadow = _inside(
        scene.kind, cx + scene.light[0], cy + scene.light[1], scene.size, scene.angle, scene.aspect, res
    )
    mask = shadow & ~body
    img = scene.tex.copy()
    img[:, shadow] *= scene.darkening
    img[:, body] = scene.color[:, None]
    frame_u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return frame_u8, mask, body | shadow


def frame_to_float(frame_u8):
    return frame_u8.astype(np.float32) / 255.0


def gen_labeled(spec, n, rng):
    """n independent stills with exact shadow masks."""
    spec.validate()
    if n <= 0:
        raise GenerationError("n must be positive")
    seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=n)]

    def build(seed):
        r = np.random.default_rng(seed)
        scene = _sample_scene(spec, r)
        res = spec.resolution
        x_lo, x_hi = _feasible_interval(res, scene.light[0])
        y_lo, y_hi = _feasible_interval(res, scene.light[1])
        cx, cy = r.uniform(x_lo, x_hi), r.uniform(y_lo, y_hi)
        frame_u8, mask, _ = _render(scene, cx, cy, res)
        return LabeledSample(frame_to_float(frame_u8), mask[None].astype(np.float32))

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(build, seeds))


def _trajectory_positions(spec, scene, rng):
    res, T = spec.resolution, spec.frame_count
    x_lo, x_hi = _feasible_interval(res, scene.light[0])
    y_lo, y_hi = _feasible_interval(res, scene.light[1])
    kind = spec.trajectory
    if kind == "mixed":
        kind = "linear" if rng.random() < 0.5 else "sinusoidal"
    if kind == "linear":
        speed = rng.uniform(*spec.speed_range)
        theta = rng.uniform(0, 2 * np.pi)
        v = np.array([speed * np.cos(theta), speed * np.sin(theta)])
        pos0 = np.empty(2)
        for ax, (lo, hi) in enumerate(((x_lo, x_hi), (y_lo, y_hi))):
            span = v[ax] * (T - 1)
            limit = (hi - lo) * 0.95
            if abs(span) > limit:  # keep the whole path in frame
                v[ax] *= limit / abs(span)
                span = v[ax] * (T - 1)
            a = lo - min(0.0, span)
            b = hi - max(0.0, span)
            pos0[ax] = rng.uniform(a, b)
        return np.array([pos0 + v * t for t in range(T)])
    # sinusoidal
    omega = 2 * np.pi * rng.uniform(1.0, 2.0) / T
    speed = rng.uniform(*spec.speed_range)
    pos = np.empty((T, 2))
    for ax, (lo, hi) in enumerate(((x_lo, x_hi), (y_lo, y_hi))):
        amp = min(speed / omega, (hi - lo) / 2 * 0.95)
        center = rng.uniform(lo + amp, hi - amp)
        phase = rng.uniform(0, 2 * np.pi)
        pos[:, ax] = center + amp * np.sin(omega * np.arange(T) + phase)
    return pos


def gen_video(spec, rng):
    """One clip: T frames, per-frame exact masks, and T-1 exact flow fields
    per direction (displacement on the moving support, zero elsewhere)."""
    spec.validate()
    r = np.random.default_rng(int(rng.integers(0, 2**63 - 1)))
    scene = _sample_scene(spec, r)
    pos = _trajectory_positions(spec, scene, r)
    res, T = spec.resolution, spec.frame_count

    frames = np.empty((T, 3, res, res), dtype=np.float32)
    masks = np.empty((T, 1, res, res), dtype=np.float32)
    supports = []
    for t in range(T):
        frame_u8, mask, support = _render(scene, pos[t, 0], pos[t, 1], res)
        frames[t] = frame_to_float(frame_u8)
        masks[t] = mask[None]
        supports.append(support)

    flow_fwd = np.zeros((T - 1, 2, res, res), dtype=np.float32)
    flow_bwd = np.zeros((T - 1, 2, res, res), dtype=np.float32)
    for t in range(T - 1):
        disp = pos[t + 1] - pos[t]
        flow_fwd[t, 0][supports[t]] = disp[0]
        flow_fwd[t, 1][supports[t]] = disp[1]
    for t in range(1, T):
        disp = pos[t - 1] - pos[t]
        flow_bwd[t - 1, 0][supports[t]] = disp[0]
        flow_bwd[t - 1, 1][supports[t]] = disp[1]
    return frames, masks, flow_fwd, flow_bwd


# -- disk layout -------------------------------------------------------------


def write_labeled(root, samples):
    root = Path(root)
    (root / "labeled" / "images").mkdir(parents=True, exist_ok=True)
    (root / "labeled" / "masks").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        rgb = np.rint(s.frame * 255.0).astype(np.uint8).transpose(1, 2, 0)
        write_ppm(root / "labeled" / "images" / f"{i:05d}.ppm", rgb)
        write_pgm(root / "labeled" / "masks" / f"{i:05d}.pgm", (s.mask[0] * 255).astype(np.uint8))


def write_video(root, vid, frames, masks, flow_fwd, flow_bwd, with_masks=True):
    base = Path(root) / "videos" / vid
    for sub in ("frames", "flow_fwd", "flow_bwd") + (("masks",) if with_masks else ()):
        (base / sub).mkdir(parents=True, exist_ok=True)
    T = frames.shape[0]
    for t in range(T):
        rgb = np.rint(frames[t] * 255.0).astype(np.uint8).transpose(1, 2, 0)
        write_ppm(base / "frames" / f"{t:05d}.ppm", rgb)
        if with_masks:
            write_pgm(base / "masks" / f"{t:05d}.pgm", (masks[t, 0] * 255).astype(np.uint8))
    for t in range(T - 1):
        write_flo(base / "flow_fwd" / f"{t:05d}.flo", flow_fwd[t])
    for t in range(1, T):
        write_flo(base / "flow_bwd" / f"{t:05d}.flo", flow_bwd[t - 1])


def load_dataset(root):
    """Validate the directory layout and load everything into memory.

    Frames come back normalized to [0, 1]; masks to {0, 1}. Videos without
    a masks directory load as unlabeled-only (evaluation refuses them).
    """
    root = Path(root)
    ds = Dataset()

    labeled_dir = root / "labeled"
    if labeled_dir.is_dir():
        images = sorted((labeled_dir / "images").glob("*.ppm"))
        for img_path in images:
            mask_path = labeled_dir / "masks" / (img_path.stem + ".pgm")
            if not mask_path.exists():
                raise DatasetError(f"missing mask for labeled image {img_path.name}")
            rgb = read_ppm(img_path)
            mask = read_pgm(mask_path)
            if mask.shape != rgb.shape[:2]:
                raise DatasetError(f"mask/image extent mismatch for {img_path.name}")
            ds.labeled.append(
                LabeledSample(
                    frame_to_float(rgb.transpose(2, 0, 1)),
                    (mask > 127).astype(np.float32)[None],
                )
            )

    videos_dir = root / "videos"
    if videos_dir.is_dir():
        for vdir in sorted(p for p in videos_dir.iterdir() if p.is_dir()):
            frame_paths = sorted((vdir / "frames").glob("*.ppm"))
            T = len(frame_paths)
            if T < 3:
                raise DatasetError(f"video {vdir.name}: needs at least 3 frames, found {T}")
            fwd_paths = sorted((vdir / "flow_fwd").glob("*.flo"))
            bwd_paths = sorted((vdir / "flow_bwd").glob("*.flo"))
            if len(fwd_paths) != T - 1:
                raise DatasetError(f"video {vdir.name}: expected {T - 1} forward flows, found {len(fwd_paths)}")
            if len(bwd_paths) != T - 1:
                raise DatasetError(f"video {vdir.name}: expected {T - 1} backward flows, found {len(bwd_paths)}")
            frames = np.stack([frame_to_float(read_ppm(p).transpose(2, 0, 1)) for p in frame_paths])
            flow_fwd = np.stack([read_flo(p) for p in fwd_paths])
            flow_bwd = np.stack([read_flo(p) for p in bwd_paths])
            masks = None
            mask_dir = vdir / "masks"
            if mask_dir.is_dir():
                mask_paths = sorted(mask_dir.glob("*.pgm"))
                if len(mask_paths) != T:
                    raise DatasetError(f"video {vdir.name}: {len(mask_paths)} masks for {T} frames")
                masks = np.stack([(read_pgm(p) > 127).astype(np.float32)[None] for p in mask_paths])
            ds.videos.append(VideoClip(vdir.name, frames, flow_fwd, flow_bwd, masks))
    return ds


def generate_dataset(root, image_spec, video_spec, labeled_count, video_count, seed, labeled_only=False):
    """Emit the full on-disk dataset plus a manifest; deterministic in seed."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    samples = gen_labeled(image_spec, labeled_count, rng)
    write_labeled(root, samples)
    video_seeds = []
    if not labeled_only:
        video_seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=video_count)]

        def build(args):
            i, vseed = args
            clip = gen_video(video_spec, np.random.default_rng(vseed))
            return i, clip

        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            for i, (frames, masks, fwd, bwd) in pool.map(build, enumerate(video_seeds)):
                write_video(root, f"vid_{i:03d}", frames, masks, fwd, bwd)
    manifest = [
        f"seed = {seed}",
        f"labeled_count = {labeled_count}",
        f"video_count = {0 if labeled_only else video_count}",
        f"frame_count = {video_spec.frame_count}",
        f"resolution = {image_spec.resolution}",
        f"video_seeds = {','.join(str(s) for s in video_seeds)}",
    ]
    (root / "manifest.txt").write_text("\n".join(manifest) + "\n")
