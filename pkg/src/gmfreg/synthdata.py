"""Synthetic multimodal registration scenes.

Each scene is a handful of coloured axis-aligned boxes seen by an RGB-D style
sensor: the point clouds are back-projected from the rendered views, so every
point is visible in its own image.  The source frame is moved by a random
rigid motion to produce the target frame, and a fixed camera is attached to
each frame.  Some boxes come in congruent pairs that differ only in colour;
"ambiguous" outliers match a point on one twin with the mirrored point on the
other, so geometry alone cannot tell them apart from inliers.

Randomness comes from numpy's Philox4x64-10 counter-based generator keyed by
``(seed, stream)`` so every stream is reproducible from the config alone.
"""

from __future__ import annotations

import colorsys
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    INLIER_THRESHOLD_M,
    CorrespondenceSet,
    PinholeCamera,
    RigidTransform,
    apply_transform,
    axis_angle_matrix,
    correspondence_residuals,
    project_points,
)

OUTLIER_MIN_DIST_M = 0.15
BACKGROUND_RGB = (0.12, 0.12, 0.12)

KIND_INLIER = 0
KIND_PLAIN = 1
KIND_AMBIGUOUS = 2

# Table of brightness intervals used in the lighting-robustness experiments.
LIGHTING_INTERVALS = ((0.3, 1.8), (0.5, 1.5), (0.75, 1.25), (0.9, 1.1))

FOCAL_SCALE = 0.9

_STREAM_GEOMETRY = 0
_STREAM_CORRS = 1
_STREAM_POINTS = 2


class FormatError(ValueError):
    pass


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class SceneConfig:
    n_primitives: int = 6
    n_correspondences: int = 512
    inlier_ratio: float = 0.4
    ambiguous_fraction: float = 0.5
    height: int = 80
    width: int = 80
    noise_sigma_3d: float = 0.01
    seed: int = 0
    n_points: int = 2048
    max_rotation_deg: float = 60.0
    max_translation_m: float = 1.0
    # systematic principal-point error of the *recorded* cameras, in pixels;
    # images are always rendered with the true camera
    calib_offset_px: float = 0.0

    def __post_init__(self):
        problems = []
        if self.n_primitives < 1:
            problems.append("n_primitives must be >= 1")
        if self.n_correspondences < 1:
            problems.append("n_correspondences must be >= 1")
        if not 0.0 < self.inlier_ratio <= 1.0:
            problems.append("inlier_ratio must lie in (0, 1]")
        if not 0.0 <= self.ambiguous_fraction <= 1.0:
            problems.append("ambiguous_fraction must lie in [0, 1]")
        if self.ambiguous_fraction > 0 and self.n_primitives < 2:
            problems.append("ambiguous outliers need at least two primitives")
        if self.height <= 0 or self.width <= 0 or self.height % 8 or self.width % 8:
            problems.append("image dims must be positive multiples of 8")
        if not 0.0 <= self.noise_sigma_3d < INLIER_THRESHOLD_M:
            problems.append("noise_sigma_3d must lie in [0, 0.1)")
        if self.n_points < 16:
            problems.append("n_points must be >= 16")
        if not 0.0 <= self.max_rotation_deg <= 180.0:
            problems.append("max_rotation_deg must lie in [0, 180]")
        if self.max_translation_m < 0:
            problems.append("max_translation_m must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))

    def with_seed(self, seed: int) -> "SceneConfig":
        return SceneConfig(**{**asdict(self), "seed": int(seed)})


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    color: tuple[float, float, float]
    twin: int = -1  # index of the congruent partner, -1 if none

    def corners(self) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.size, dtype=np.float64) / 2
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return c + signs * h


# faces as corner index quads (consistent winding) plus outward axis
_BOX_FACES = (
    ((0, 1, 3, 2), (-1, 0, 0)),
    ((4, 6, 7, 5), (1, 0, 0)),
    ((0, 4, 5, 1), (0, -1, 0)),
    ((2, 3, 7, 6), (0, 1, 0)),
    ((0, 2, 6, 4), (0, 0, -1)),
    ((1, 5, 7, 3), (0, 0, 1)),
)


@dataclass
class ScenePair:
    src_points: np.ndarray
    src_colors: np.ndarray
    tgt_points: np.ndarray
    tgt_colors: np.ndarray
    src_image: np.ndarray
    tgt_image: np.ndarray
    src_camera: PinholeCamera
    tgt_camera: PinholeCamera
    gt_transform: RigidTransform
    corrs: CorrespondenceSet
    primitives: tuple[Box, ...] = ()
    seed: int = 0
    render_camera: PinholeCamera | None = None

    @property
    def height(self) -> int:
        return self.src_image.shape[0]

    @property
    def width(self) -> int:
        return self.src_image.shape[1]


def default_camera(height: int, width: int, offset_px: float = 0.0) -> PinholeCamera:
    f = FOCAL_SCALE * width
    # sensor frame origin sits at the scene centre, 4 m in front of the lens
    pose = RigidTransform(np.eye(3), (0.0, 0.0, 4.0))
    return PinholeCamera(f, f, width / 2 + offset_px, height / 2 + offset_px, pose)


def _palette(n: int, rng: np.random.Generator) -> list[tuple[float, float, float]]:
    slots = max(n, 8)
    offset = rng.uniform(0.0, 1.0 / slots)
    hues = rng.permutation(slots)[:n] / slots + offset
    return [tuple(float(c) for c in colorsys.hsv_to_rgb(h % 1.0, 0.85, 0.9)) for h in hues]


def _place_boxes(cfg: SceneConfig, rng: np.random.Generator) -> tuple[Box, ...]:
    n = cfg.n_primitives
    n_pairs = n // 2 if cfg.ambiguous_fraction > 0 else 0
    colors = _palette(n, rng)
    sizes = []
    for i in range(n_pairs):
        s = tuple(rng.uniform(0.45, 0.8, size=3))
        sizes += [s, s]
    for i in range(n - 2 * n_pairs):
        sizes.append(tuple(rng.uniform(0.45, 0.8, size=3)))

    lo = np.array([-1.3, -1.3, -0.6])
    hi = np.array([1.3, 1.3, 0.6])
    centers: list[np.ndarray] = []
    gap = 0.1

    def free(c, size, placed) -> bool:
        half = np.asarray(size) / 2
        return all(np.any(np.abs(c - o) > half + np.asarray(os) / 2 + gap) for o, os in placed)

    i = 0
    for _ in range(200):
        centers = []
        placed: list = []
        ok = True
        i = 0
        while i < n and ok:
            size = sizes[i]
            for _ in range(200):
                c = rng.uniform(lo, hi)
                if not free(c, size, placed):
                    continue
                if i < 2 * n_pairs:
                    # twins sit side by side so that the displacement between
                    # them looks like a plausible sensor motion
                    axis = rng.integers(0, 2)
                    step = np.zeros(3)
                    step[axis] = (size[axis] + rng.uniform(0.1, 0.35)) * rng.choice([-1.0, 1.0])
                    c2 = c + step
                    if np.any(c2 < lo) or np.any(c2 > hi) or not free(c2, size, placed + [(c, size)]):
                        continue
                    centers += [c, c2]
                    placed += [(c, size), (c2, size)]
                    i += 2
                else:
                    centers.append(c)
                    placed.append((c, size))
                    i += 1
                break
            else:
                ok = False
        if ok:
            break
    else:
        raise RuntimeError("could not place primitives without overlap; lower n_primitives")

    boxes = []
    for i in range(n):
        twin = -1
        if i < 2 * n_pairs:
            twin = i + 1 if i % 2 == 0 else i - 1
        boxes.append(Box(tuple(float(v) for v in centers[i]), tuple(float(v) for v in sizes[i]), colors[i], twin))
    return tuple(boxes)


def _random_transform(cfg: SceneConfig, rng: np.random.Generator) -> RigidTransform:
    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(0.0, cfg.max_rotation_deg))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(0.0, cfg.max_translation_m)
    # round to float32 so the stored dataset reproduces the transform exactly
    R = axis_angle_matrix(axis, angle).astype(np.float32).astype(np.float64)
    return RigidTransform(R, t.astype(np.float32).astype(np.float64))


@dataclass
class _View:
    image: np.ndarray  # H x W x 3
    face_id: np.ndarray  # H x W, -1 for background
    faces: list  # (box index, face index, frame-space corners 4x3, outward normal)


def _render(boxes, T: RigidTransform, cam: PinholeCamera, height: int, width: int) -> _View:
    """Flat-shaded painter's algorithm: visible faces are drawn far to near."""
    cam_center = apply_transform(cam.pose.inverse(), np.zeros((1, 3)))[0]
    faces = []
    for bi, box in enumerate(boxes):
        corners = apply_transform(T, box.corners())
        for fi, (quad, normal) in enumerate(_BOX_FACES):
            pts = corners[list(quad)]
            n = T.R @ np.asarray(normal, dtype=np.float64)
            centroid = pts.mean(axis=0)
            if np.dot(n, cam_center - centroid) <= 0:
                continue
            depth = apply_transform(cam.pose, centroid[None])[0, 2]
            faces.append((depth, bi, fi, pts, n))
    faces.sort(key=lambda f: -f[0])

    image = np.empty((height, width, 3), dtype=np.float32)
    image[:] = BACKGROUND_RGB
    face_id = np.full((height, width), -1, dtype=np.int32)
    jj, ii = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    pix = np.stack([jj.ravel(), ii.ravel()], axis=1)
    kept = []
    for k, (_, bi, fi, pts, n) in enumerate(faces):
        uv, valid = project_points(cam, pts)
        if not valid.all():
            continue
        mask = _inside_convex(pix, uv).reshape(height, width)
        image[mask] = boxes[bi].color
        face_id[mask] = len(kept)
        kept.append((bi, fi, pts, n))
    return _View(image, face_id, kept)


def _inside_convex(pix: np.ndarray, poly: np.ndarray) -> np.ndarray:
    edges = np.roll(poly, -1, axis=0) - poly
    rel = pix[:, None, :] - poly[None, :, :]
    cross = edges[None, :, 0] * rel[:, :, 1] - edges[None, :, 1] * rel[:, :, 0]
    return np.all(cross >= 0, axis=1) | np.all(cross <= 0, axis=1)


def _backproject(view: _View, cam: PinholeCamera, n: int, rng: np.random.Generator, boxes, T: RigidTransform):
    """Sample ``n`` surface points (frame coordinates) through covered pixels."""
    covered = np.flatnonzero(view.face_id.ravel() >= 0)
    if covered.size == 0:
        raise RuntimeError("nothing visible in the rendered view")
    width = view.face_id.shape[1]
    pick = covered[rng.integers(0, covered.size, size=n)]
    u = pick % width + rng.uniform(0.0, 1.0, size=n)
    v = pick // width + rng.uniform(0.0, 1.0, size=n)
    ids = view.face_id.ravel()[pick]
    rays = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones(n)], axis=1)
    to_frame = cam.pose.inverse()
    origin = to_frame.t
    dirs = rays @ to_frame.R.T
    pts = np.empty((n, 3))
    box_idx = np.empty(n, dtype=np.int64)
    for k, (bi, fi, quad, normal) in enumerate(view.faces):
        sel = ids == k
        if not sel.any():
            continue
        s = np.dot(quad[0] - origin, normal) / (dirs[sel] @ normal)
        hit = T.inverse().apply(origin + s[:, None] * dirs[sel])
        # sub-pixel rays near a silhouette can miss the face rectangle
        lo = np.asarray(boxes[bi].center) - np.asarray(boxes[bi].size) / 2
        hi = np.asarray(boxes[bi].center) + np.asarray(boxes[bi].size) / 2
        pts[sel] = T.apply(np.clip(hit, lo, hi))
        box_idx[sel] = bi
    return pts, box_idx


def _visible_on(view: _View, cam: PinholeCamera, pts: np.ndarray, box_idx: np.ndarray) -> np.ndarray:
    """True where each point projects onto a pixel showing its own box face
    within 2 cm of the face plane."""
    uv, valid = project_points(cam, pts)
    h, w = view.face_id.shape
    ok = valid & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    out = np.zeros(len(pts), dtype=bool)
    idx = np.flatnonzero(ok)
    fid = view.face_id[uv[idx, 1].astype(int), uv[idx, 0].astype(int)]
    for j, k in zip(idx, fid):
        if k < 0:
            continue
        bi, _, quad, normal = view.faces[k]
        out[j] = bi == box_idx[j] and abs(np.dot(pts[j] - quad[0], normal)) < 0.02
    return out


def _ball(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0))


def generate_scene(cfg: SceneConfig) -> ScenePair:
    """Build one labelled scene pair; a pure function of ``cfg``."""
    rng = make_rng(cfg.seed, _STREAM_GEOMETRY)
    boxes = _place_boxes(cfg, rng)
    T = _random_transform(cfg, rng)
    cam = default_camera(cfg.height, cfg.width)
    recorded = default_camera(cfg.height, cfg.width, cfg.calib_offset_px)

    src_view = _render(boxes, RigidTransform(), cam, cfg.height, cfg.width)
    tgt_view = _render(boxes, T, cam, cfg.height, cfg.width)
    prng = make_rng(cfg.seed, _STREAM_POINTS)
    src_pts, src_box = _backproject(src_view, cam, cfg.n_points, prng, boxes, RigidTransform())
    tgt_pts, tgt_box = _backproject(tgt_view, cam, cfg.n_points, prng, boxes, T)
    colors = np.asarray([b.color for b in boxes], dtype=np.float32)

    scene = ScenePair(
        src_points=src_pts.astype(np.float32),
        src_colors=colors[src_box],
        tgt_points=tgt_pts.astype(np.float32),
        tgt_colors=colors[tgt_box],
        src_image=src_view.image,
        tgt_image=tgt_view.image,
        src_camera=recorded,
        tgt_camera=recorded,
        gt_transform=T,
        corrs=CorrespondenceSet(np.zeros((0, 3)), np.zeros((0, 3))),
        primitives=boxes,
        seed=cfg.seed,
        render_camera=cam,
    )
    scene.corrs = sample_correspondences(scene, cfg)
    return scene


def _point_box(boxes, pts: np.ndarray) -> np.ndarray:
    """Index of the box whose surface is nearest to each point."""
    dist = np.empty((len(pts), len(boxes)))
    for i, b in enumerate(boxes):
        rel = np.abs(pts - np.asarray(b.center)) - np.asarray(b.size) / 2
        outside = np.linalg.norm(np.maximum(rel, 0.0), axis=1)
        inside = np.minimum(rel.max(axis=1), 0.0)
        dist[:, i] = np.abs(outside + inside)
    return dist.argmin(axis=1)


def sample_correspondences(scene: ScenePair, cfg: SceneConfig) -> CorrespondenceSet:
    """Draw labelled putative matches: inliers ``(p, T p + e)`` with
    ``|e| <= noise_sigma_3d``, plain outliers at random positions inside the
    target bounds, and ambiguous outliers mapped onto a congruent twin box."""
    rng = make_rng(cfg.seed, _STREAM_CORRS)
    T = scene.gt_transform
    boxes = scene.primitives
    cam = scene.render_camera or default_camera(scene.height, scene.width)
    n = cfg.n_correspondences
    n_in = int(np.floor(cfg.inlier_ratio * n))
    n_out = n - n_in
    n_amb = int(np.floor(cfg.ambiguous_fraction * n_out)) if boxes else 0
    if n_amb and not any(b.twin >= 0 for b in boxes):
        n_amb = 0
    n_plain = n_out - n_amb

    p_all = np.asarray(scene.src_points, dtype=np.float64)
    box_of = _point_box(boxes, p_all)
    tgt_view = _render(boxes, T, cam, scene.height, scene.width)

    def pick(candidates: np.ndarray, fallback: np.ndarray, k: int) -> np.ndarray:
        pool = candidates if candidates.size else fallback
        replace = pool.size < k
        return rng.choice(pool, size=k, replace=replace)

    every = np.arange(len(p_all))
    visible = _visible_on(tgt_view, cam, apply_transform(T, p_all), box_of)
    in_idx = pick(np.flatnonzero(visible), every, n_in)
    p_in = p_all[in_idx]
    q_in = apply_transform(T, p_in) + _ball(rng, n_in, cfg.noise_sigma_3d)

    twin = np.array([b.twin for b in boxes] or [-1])[box_of]
    shift = np.zeros_like(p_all)
    has_twin = twin >= 0
    if has_twin.any():
        centers = np.asarray([b.center for b in boxes])
        shift[has_twin] = centers[twin[has_twin]] - centers[box_of[has_twin]]
    twin_pts = p_all + shift
    twin_visible = has_twin & _visible_on(tgt_view, cam, apply_transform(T, twin_pts), np.where(has_twin, twin, -2))
    amb_idx = pick(np.flatnonzero(twin_visible), np.flatnonzero(has_twin), n_amb)
    p_amb = p_all[amb_idx]
    q_amb = apply_transform(T, twin_pts[amb_idx]) + _ball(rng, n_amb, cfg.noise_sigma_3d)

    tgt = np.asarray(scene.tgt_points, dtype=np.float64)
    lo, hi = tgt.min(axis=0), tgt.max(axis=0)
    plain_idx = rng.integers(0, len(p_all), size=n_plain)
    p_plain = p_all[plain_idx]
    gt_plain = apply_transform(T, p_plain)
    q_plain = np.empty((n_plain, 3))
    for i in range(n_plain):
        while True:
            cand = rng.uniform(lo, hi)
            if np.linalg.norm(cand - gt_plain[i]) > OUTLIER_MIN_DIST_M:
                break
        q_plain[i] = cand

    p = np.concatenate([p_in, p_amb, p_plain]).astype(np.float32)
    q = np.concatenate([q_in, q_amb, q_plain]).astype(np.float32)
    kinds = np.concatenate(
        [np.full(n_in, KIND_INLIER), np.full(n_amb, KIND_AMBIGUOUS), np.full(n_plain, KIND_PLAIN)]
    ).astype(np.uint8)
    order = rng.permutation(n)
    corrs = CorrespondenceSet(p[order], q[order], kinds[order] == KIND_INLIER, kinds[order])
    residual = correspondence_residuals(corrs, T)
    bad = (residual < INLIER_THRESHOLD_M) != corrs.labels
    if bad.any():
        raise AssertionError(f"{int(bad.sum())} correspondences violate the residual labelling rule")
    return corrs


def generate_dataset(cfg: SceneConfig, n_scenes: int, first_seed: int | None = None) -> list[ScenePair]:
    start = cfg.seed if first_seed is None else first_seed
    return [generate_scene(cfg.with_seed(start + i)) for i in range(n_scenes)]


# --- image perturbations ----------------------------------------------------


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {img.shape}")
    return img


def _bilinear_upsample(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    gy = np.linspace(0.0, grid.shape[0] - 1, height)
    gx = np.linspace(0.0, grid.shape[1] - 1, width)
    y0 = np.minimum(np.floor(gy).astype(int), grid.shape[0] - 2)
    x0 = np.minimum(np.floor(gx).astype(int), grid.shape[1] - 2)
    fy = (gy - y0)[:, None]
    fx = (gx - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def perturb_lighting(img: np.ndarray, mode: str, interval, seed: int) -> np.ndarray:
    """Multiply by a brightness map: one global factor (``even``) or a smooth
    field bilinearly upsampled from a 4x4 grid of factors (``uneven``)."""
    img = _check_image(img)
    lo, hi = (float(v) for v in interval)
    if not 0.0 < lo <= hi:
        raise ValueError(f"invalid brightness interval [{lo}, {hi}]")
    rng = make_rng(seed, 7)
    if mode == "even":
        factor = rng.uniform(lo, hi)
        out = img * np.float32(factor)
    elif mode == "uneven":
        field = _bilinear_upsample(rng.uniform(lo, hi, size=(4, 4)), img.shape[0], img.shape[1])
        out = img * field[:, :, None].astype(np.float32)
    else:
        raise ValueError(f"unknown lighting mode {mode!r}")
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def perturb_noise(img: np.ndarray, kind: str, amount: float, seed: int) -> np.ndarray:
    """Additive uniform (``random``, amplitude), impulse (``salt``, density)
    or additive Gaussian (``gaussian``, sigma) noise, clamped to [0, 1]."""
    img = _check_image(img)
    amount = float(amount)
    rng = make_rng(seed, 8)
    h, w = img.shape[:2]
    if kind == "random":
        if amount < 0:
            raise ValueError("amplitude must be >= 0")
        out = img + rng.uniform(-amount, amount, size=img.shape).astype(np.float32)
    elif kind == "gaussian":
        if amount < 0:
            raise ValueError("sigma must be >= 0")
        out = img + (amount * rng.standard_normal(size=img.shape)).astype(np.float32)
    elif kind == "salt":
        if not 0.0 <= amount <= 1.0:
            raise ValueError("density must lie in [0, 1]")
        out = img.copy()
        count = int(round(amount * h * w))
        chosen = rng.permutation(h * w)[:count]
        salt = rng.integers(0, 2, size=count).astype(img.dtype)
        out.reshape(-1, 3)[chosen] = salt[:, None]
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


# --- dataset files -----------------------------------------------------------

DATASET_MAGIC = b"GMFD"
DATASET_VERSION = 1


def _camera_json(cam: PinholeCamera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy}


def _camera_from(d: dict, pose: np.ndarray) -> PinholeCamera:
    return PinholeCamera(d["fx"], d["fy"], d["cx"], d["cy"], RigidTransform(pose[:9].reshape(3, 3), pose[9:]))


def _pose_block(T: RigidTransform) -> np.ndarray:
    return np.concatenate([T.R.ravel(), T.t]).astype(np.float32)


def write_dataset(scenes, path) -> None:
    chunks = [DATASET_MAGIC, struct.pack("<BI", DATASET_VERSION, len(scenes))]
    for s in scenes:
        cams = [s.src_camera, s.tgt_camera, s.render_camera or s.src_camera]
        manifest = {
            "seed": s.seed,
            "height": s.height,
            "width": s.width,
            "n_src": len(s.src_points),
            "n_tgt": len(s.tgt_points),
            "n_corrs": len(s.corrs),
            "has_kinds": s.corrs.kinds is not None,
            "cameras": [_camera_json(c) for c in cams],
            "primitives": [{"center": b.center, "size": b.size, "color": b.color, "twin": b.twin} for b in s.primitives],
        }
        text = json.dumps(manifest, sort_keys=True).encode("utf-8")
        labels = s.corrs.labels if s.corrs.labels is not None else np.zeros(len(s.corrs), dtype=bool)
        kinds = s.corrs.kinds if s.corrs.kinds is not None else np.zeros(len(s.corrs), dtype=np.uint8)
        blocks = [
            s.src_points, s.src_colors, s.tgt_points, s.tgt_colors, s.src_image, s.tgt_image,
            _pose_block(s.gt_transform), *[_pose_block(c.pose) for c in cams], s.corrs.p, s.corrs.q,
        ]
        chunks.append(struct.pack("<I", len(text)))
        chunks.append(text)
        for b in blocks:
            chunks.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
        chunks.append(np.asarray(labels, dtype=np.uint8).tobytes())
        chunks.append(np.asarray(kinds, dtype=np.uint8).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_dataset(path) -> list[ScenePair]:
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a GMFD dataset (bad magic)")
    if len(buf) < 9:
        raise FormatError(f"{path}: truncated header")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    pos = 9

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise FormatError(f"{path}: truncated at byte {pos}")
        out = buf[pos:pos + nbytes]
        pos += nbytes
        return out

    def floats(*shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)

    scenes = []
    for _ in range(count):
        (mlen,) = struct.unpack("<I", take(4))
        try:
            m = json.loads(take(mlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt scene manifest") from exc
        h, w = m["height"], m["width"]
        src_pts = floats(m["n_src"], 3)
        src_col = floats(m["n_src"], 3)
        tgt_pts = floats(m["n_tgt"], 3)
        tgt_col = floats(m["n_tgt"], 3)
        src_img = floats(h, w, 3)
        tgt_img = floats(h, w, 3)
        gt = floats(12).astype(np.float64)
        poses = [floats(12).astype(np.float64) for _ in range(3)]
        p = floats(m["n_corrs"], 3)
        q = floats(m["n_corrs"], 3)
        labels = np.frombuffer(take(m["n_corrs"]), dtype=np.uint8).astype(bool)
        kinds = np.frombuffer(take(m["n_corrs"]), dtype=np.uint8).copy()
        cams = [_camera_from(c, pose) for c, pose in zip(m["cameras"], poses)]
        prims = tuple(
            Box(tuple(b["center"]), tuple(b["size"]), tuple(b["color"]), b["twin"]) for b in m["primitives"]
        )
        scenes.append(
            ScenePair(
                src_points=src_pts, src_colors=src_col, tgt_points=tgt_pts, tgt_colors=tgt_col,
                src_image=src_img, tgt_image=tgt_img, src_camera=cams[0], tgt_camera=cams[1],
                gt_transform=RigidTransform(gt[:9].reshape(3, 3), gt[9:]),
                corrs=CorrespondenceSet(p, q, labels, kinds if m["has_kinds"] else None),
                primitives=prims, seed=m["seed"], render_camera=cams[2],
            )
        )
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return scenes
