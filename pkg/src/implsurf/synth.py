"""Synthetic scenes with analytic signed-distance oracles.

Each scene is a voxel intensity volume plus, per organ, an exact (or
tightly bounded) SDF and a high-resolution ground-truth mesh. The volume's
world frame is the normalized cube: world coordinates coincide with
normalized [-1, 1] coordinates, so meshes, query points, and SDFs share
one coordinate system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from . import geometry
from .errors import InvalidArgument, SceneSpecError
from .geometry import ImplicitShape, TriMesh
from .volume import VolumeGrid, voxel_center_coords

ORGAN_BOX = 0.9  # organ bounding boxes must stay inside [-ORGAN_BOX, ORGAN_BOX]^3


# ---------------------------------------------------------------------------
# SDF primitives
# ---------------------------------------------------------------------------

class Sphere(ImplicitShape):
    def __init__(self, center, radius: float):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.bbox_lo = self.center - self.radius
        self.bbox_hi = self.center + self.radius

    def sdf(self, pts):
        p = np.asarray(pts, dtype=np.float64) - self.center
        return np.linalg.norm(p, axis=-1) - self.radius

    def to_dict(self):
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius}


class Ellipsoid(ImplicitShape):
    """Axis-aligned ellipsoid with an exact Euclidean SDF.

    The closest surface point solves sum((r_i p_i / (t + r_i^2))^2) = 1 for
    the unique root t > -min(r^2); bisection brackets it, Newton polishes.
    Accuracy is well below 1e-6 over the scene box.
    """

    def __init__(self, center, radii):
        self.center = np.asarray(center, dtype=np.float64)
        self.radii = np.asarray(radii, dtype=np.float64)
        if (self.radii <= 0).any():
            raise InvalidArgument("ellipsoid radii must be positive")
        self.bbox_lo = self.center - self.radii
        self.bbox_hi = self.center + self.radii

    def sdf(self, pts):
        p = np.asarray(pts, dtype=np.float64) - self.center
        shape = p.shape[:-1]
        a = np.abs(p.reshape(-1, 3))
        r = self.radii
        if np.allclose(r, r[0]):
            d = np.linalg.norm(a, axis=1) - r[0]
            return d.reshape(shape)
        # floor tiny components: the solve is continuous in a, so the
        # induced error is below 1e-10 over the scene box
        a = np.maximum(a, 1e-12 * r.max())
        rr = r * r
        k = ((a / r) ** 2).sum(axis=1)
        ra2 = (r * a) ** 2
        lo = np.full(len(a), -rr.min() + 1e-300)
        hi = np.sqrt(ra2.sum(axis=1))
        # the root can sit within ~|a|*r of the lower bracket edge for
        # near-axis interior points (a floored at 1e-12), so bisect deep
        # enough to resolve that scale before polishing
        for _ in range(50):
            mid = 0.5 * (lo + hi)
            f = (ra2 / (mid[:, None] + rr[None, :]) ** 2).sum(axis=1) - 1.0
            gt = f > 0
            lo = np.where(gt, mid, lo)
            hi = np.where(gt, hi, mid)
        t = 0.5 * (lo + hi)
        for _ in range(4):
            denom = t[:, None] + rr[None, :]
            f = (ra2 / denom ** 2).sum(axis=1) - 1.0
            fp = -2.0 * (ra2 / denom ** 3).sum(axis=1)
            step = f / np.where(fp != 0.0, fp, -1.0)
            tn = t - step
            t = np.where((tn > lo) & (tn < hi), tn, t)
        denom = t[:, None] + rr[None, :]
        d = np.abs(t) * np.sqrt(((a / denom) ** 2).sum(axis=1))
        return np.where(k < 1.0, -d, d).reshape(shape)

    def to_dict(self):
        return {"type": "ellipsoid", "center": self.center.tolist(), "radii": self.radii.tolist()}


class Capsule(ImplicitShape):
    def __init__(self, a, b, radius: float):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.radius = float(radius)
        self.bbox_lo = np.minimum(self.a, self.b) - self.radius
        self.bbox_hi = np.maximum(self.a, self.b) + self.radius

    def sdf(self, pts):
        p = np.asarray(pts, dtype=np.float64)
        ab = self.b - self.a
        denom = float(ab @ ab)
        pa = p - self.a
        t = np.clip((pa @ ab) / denom, 0.0, 1.0) if denom > 0 else np.zeros(p.shape[:-1])
        closest = self.a + t[..., None] * ab
        return np.linalg.norm(p - closest, axis=-1) - self.radius

    def to_dict(self):
        return {
            "type": "capsule",
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "radius": self.radius,
        }


class SmoothUnion(ImplicitShape):
    """Polynomial smooth minimum of two fields; deviates from the exact
    distance by at most k/4 near the blend region (sign-safe beyond that)."""

    def __init__(self, s1: ImplicitShape, s2: ImplicitShape, k: float):
        self.s1, self.s2, self.k = s1, s2, float(k)
        self.bbox_lo = np.minimum(s1.bbox_lo, s2.bbox_lo) - self.k
        self.bbox_hi = np.maximum(s1.bbox_hi, s2.bbox_hi) + self.k

    def sdf(self, pts):
        d1 = self.s1.sdf(pts)
        d2 = self.s2.sdf(pts)
        h = np.clip(0.5 + 0.5 * (d2 - d1) / self.k, 0.0, 1.0)
        return d2 + (d1 - d2) * h - self.k * h * (1.0 - h)

    def to_dict(self):
        return {"type": "smooth_union", "s1": self.s1.to_dict(), "s2": self.s2.to_dict(), "k": self.k}


class SinusoidalPerturb(ImplicitShape):
    """Base field plus a bounded sinusoidal displacement (lumpy surfaces).

    The result is a pseudo-SDF: sign is guaranteed correct wherever the base
    distance exceeds the amplitude, and the displacement is bounded by it.
    """

    def __init__(self, base: ImplicitShape, amplitude: float, frequency: float, phase=(0.0, 0.0, 0.0)):
        self.base = base
        self.amplitude = float(amplitude)
        self.frequency = float(frequency)
        self.phase = np.asarray(phase, dtype=np.float64)
        self.bbox_lo = base.bbox_lo - self.amplitude
        self.bbox_hi = base.bbox_hi + self.amplitude

    def sdf(self, pts):
        p = np.asarray(pts, dtype=np.float64)
        s = np.sin(self.frequency * np.pi * p + self.phase)
        return self.base.sdf(p) + self.amplitude * s[..., 0] * s[..., 1] * s[..., 2]

    def to_dict(self):
        return {
            "type": "sinusoidal_perturb",
            "base": self.base.to_dict(),
            "amplitude": self.amplitude,
            "frequency": self.frequency,
            "phase": self.phase.tolist(),
        }


class TransformedShape(ImplicitShape):
    """A shape under an affine map: field value at p is base(A^-1 p).

    Occupancy (the sign) is exact; distances are scaled by the map, so this
    is a pseudo-SDF under anisotropic scaling.
    """

    def __init__(self, base: ImplicitShape, matrix: np.ndarray):
        self.base = base
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.inverse = np.linalg.inv(self.matrix)
        corners = np.array(
            [[lo if i & (1 << k) == 0 else hi for k, (lo, hi) in enumerate(zip(base.bbox_lo, base.bbox_hi))]
             for i in range(8)]
        )
        mapped = corners @ self.matrix[:3, :3].T + self.matrix[:3, 3]
        self.bbox_lo = mapped.min(axis=0)
        self.bbox_hi = mapped.max(axis=0)

    def sdf(self, pts):
        p = np.asarray(pts, dtype=np.float64)
        q = p @ self.inverse[:3, :3].T + self.inverse[:3, 3]
        return self.base.sdf(q)

    def to_dict(self):
        return {"type": "transformed", "base": self.base.to_dict(), "matrix": self.matrix.tolist()}


def shape_from_dict(d: dict) -> ImplicitShape:
    kind = d["type"]
    if kind == "sphere":
        return Sphere(d["center"], d["radius"])
    if kind == "ellipsoid":
        return Ellipsoid(d["center"], d["radii"])
    if kind == "capsule":
        return Capsule(d["a"], d["b"], d["radius"])
    if kind == "smooth_union":
        return SmoothUnion(shape_from_dict(d["s1"]), shape_from_dict(d["s2"]), d["k"])
    if kind == "sinusoidal_perturb":
        return SinusoidalPerturb(
            shape_from_dict(d["base"]), d["amplitude"], d["frequency"], d["phase"]
        )
    if kind == "transformed":
        return TransformedShape(shape_from_dict(d["base"]), np.asarray(d["matrix"]))
    raise InvalidArgument(f"unknown shape type {kind!r}")


def sdf_eval(primitive: ImplicitShape, p) -> np.ndarray:
    """Signed distance of points to a primitive (negative inside)."""
    return primitive.sdf(np.asarray(p, dtype=np.float64))


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OrganSpec:
    shape: ImplicitShape
    level: float
    name: str


@dataclass(frozen=True)
class SceneSpec:
    organs: list[OrganSpec]
    dims: int = 32
    background: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "organs": [
                {"shape": o.shape.to_dict(), "level": o.level, "name": o.name}
                for o in self.organs
            ],
            "dims": self.dims,
            "background": self.background,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        organs = [
            OrganSpec(shape_from_dict(o["shape"]), o["level"], o["name"])
            for o in d["organs"]
        ]
        return cls(organs, d["dims"], d["background"], d["noise_std"], d["seed"])


@dataclass(frozen=True)
class Scene:
    volume: VolumeGrid
    shapes: list[ImplicitShape]
    meshes: list[TriMesh]
    spec: SceneSpec

    @property
    def organ_names(self) -> list[str]:
        return [o.name for o in self.spec.organs]


def normalized_frame(dims: int) -> tuple[tuple, tuple]:
    """Spacing and origin mapping a dims^3 grid onto the [-1, 1] cube."""
    s = 2.0 / dims
    return (s, s, s), (-1.0 + 1.0 / dims,) * 3


def shape_to_mesh(shape: ImplicitShape, fine: int, smooth_iterations: int = 2) -> TriMesh:
    """Mesh a shape by marching cubes on a fine SDF grid over its bounding
    box (padded a few cells), then light Laplacian smoothing.

    ``fine`` is the full-cube resolution the grid step is derived from; only
    the bounding-box portion is evaluated.
    """
    h = 2.0 / fine
    lo_idx = np.floor((shape.bbox_lo + 1.0) / h).astype(np.int64) - 3
    hi_idx = np.ceil((shape.bbox_hi + 1.0) / h).astype(np.int64) + 3
    lo_idx = np.clip(lo_idx, 0, fine - 1)
    hi_idx = np.clip(hi_idx, 1, fine)
    nd = hi_idx - lo_idx
    cx = -1.0 + (2.0 * (lo_idx[0] + np.arange(nd[0])) + 1.0) / fine
    cy = -1.0 + (2.0 * (lo_idx[1] + np.arange(nd[1])) + 1.0) / fine
    cz = -1.0 + (2.0 * (lo_idx[2] + np.arange(nd[2])) + 1.0) / fine
    zz, yy, xx = np.meshgrid(cz, cy, cx, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    vals = -shape.sdf(pts).reshape(nd[2], nd[1], nd[0])
    grid = VolumeGrid(
        vals.astype(np.float64),
        (h, h, h),
        tuple(-1.0 + (2.0 * lo_idx + 1.0) / fine),
    )
    mesh = geometry.marching_cubes(grid, 0.0)
    if smooth_iterations > 0:
        mesh = geometry.smooth_mesh(mesh, smooth_iterations, 0.3)
    return mesh


def generate_scene(spec: SceneSpec) -> Scene:
    """Render intensities (indicator levels, one 3^3 box pass, noise) and
    attach per-organ oracles and high-resolution ground-truth meshes."""
    for o in spec.organs:
        if (o.shape.bbox_lo < -ORGAN_BOX).any() or (o.shape.bbox_hi > ORGAN_BOX).any():
            raise SceneSpecError(f"organ {o.name!r} bounding box leaves [-{ORGAN_BOX}, {ORGAN_BOX}]^3")
    rng = np.random.default_rng(spec.seed)
    D = spec.dims
    pts = voxel_center_coords((D, D, D))
    sdfs = [o.shape.sdf(pts).reshape(D, D, D) for o in spec.organs]
    if len(sdfs) == 2:
        voxel = 2.0 / D
        overlap = np.minimum(-sdfs[0], -sdfs[1]).max()
        if overlap > 0.5 * voxel:
            raise SceneSpecError(
                f"organ interiors overlap by {overlap:.4f} (> half a voxel {0.5 * voxel:.4f})"
            )
    intensity = np.full((D, D, D), spec.background, dtype=np.float64)
    for o, s in zip(spec.organs, sdfs):
        intensity += o.level * (s < 0)
    intensity = uniform_filter(intensity, size=3, mode="nearest")
    if spec.noise_std > 0:
        intensity += rng.normal(0.0, spec.noise_std, size=intensity.shape)
    spacing, origin = normalized_frame(D)
    vol = VolumeGrid(intensity.astype(np.float32), spacing, origin, fill=spec.background)
    shapes = [o.shape for o in spec.organs]
    meshes = [shape_to_mesh(o.shape, 4 * D) for o in spec.organs]
    return Scene(vol, shapes, meshes, spec)


# ---------------------------------------------------------------------------
# randomized scene templates and dataset splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneTemplate:
    """Randomization ranges for a family of scenes.

    kind "single": one lumpy ellipsoid (large-organ analog).
    kind "two_organ": lumpy ellipsoid plus a thin capsule placed in near
    contact (gap at most one voxel), the large/small organ pairing.
    """

    kind: str = "single"
    dims: int = 32
    noise_std: float = 0.03
    background: float = 0.0
    level_large: float = 1.0
    level_small: float = 0.6
    radii_range: tuple[float, float] = (0.30, 0.42)
    center_range: float = 0.10
    perturb_amp: tuple[float, float] = (0.005, 0.020)
    perturb_freq: tuple[float, float] = (2.0, 4.0)
    capsule_radius: tuple[float, float] = (0.05, 0.08)
    capsule_half_len: tuple[float, float] = (0.20, 0.32)
    contact_gap: tuple[float, float] = (0.012, 0.025)

    def sample(self, seed: int) -> SceneSpec:
        rng = np.random.default_rng(seed)
        radii = rng.uniform(*self.radii_range, size=3)
        center = rng.uniform(-self.center_range, self.center_range, size=3)
        amp = rng.uniform(*self.perturb_amp)
        freq = rng.uniform(*self.perturb_freq)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
        large = SinusoidalPerturb(Ellipsoid(center, radii), amp, freq, phase)
        organs = [OrganSpec(large, self.level_large, "large")]
        if self.kind == "two_organ":
            rc = rng.uniform(*self.capsule_radius)
            hl = rng.uniform(*self.capsule_half_len)
            gap = rng.uniform(*self.contact_gap)
            x = center[0] + radii[0] + amp + gap + rc
            a = np.array([x, center[1] - hl, center[2]])
            b = np.array([x, center[1] + hl, center[2]])
            small = Capsule(a, b, rc)
            organs.append(OrganSpec(small, self.level_small, "small"))
        elif self.kind != "single":
            raise InvalidArgument(f"unknown template kind {self.kind!r}")
        return SceneSpec(
            organs,
            dims=self.dims,
            background=self.background,
            noise_std=self.noise_std,
            seed=int(rng.integers(0, 2 ** 63 - 1)),
        )


@dataclass(frozen=True)
class SceneDataset:
    scenes: list[Scene]
    train_idx: list[int]
    val_idx: list[int]
    test_idx: list[int]

    def split(self, name: str) -> list[Scene]:
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]
        return [self.scenes[i] for i in idx]


def save_scene(directory, name: str, scene: Scene) -> None:
    """Persist volume, ground-truth meshes, and the full generating spec."""
    import json
    from pathlib import Path

    from .geometry import save_obj
    from .volume import save_vol

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_vol(d / f"{name}.vol", scene.volume, meta={"seed": scene.spec.seed})
    (d / f"{name}.spec.json").write_text(
        json.dumps(scene.spec.to_dict(), sort_keys=True, indent=1) + "\n"
    )
    for organ, mesh in zip(scene.spec.organs, scene.meshes):
        save_obj(d / f"{name}.{organ.name}.obj", mesh)


def load_scene(directory, name: str) -> Scene:
    import json
    from pathlib import Path

    from .geometry import load_obj
    from .volume import load_vol

    d = Path(directory)
    spec = SceneSpec.from_dict(json.loads((d / f"{name}.spec.json").read_text()))
    vol = load_vol(d / f"{name}.vol")
    meshes = [load_obj(d / f"{name}.{o.name}.obj") for o in spec.organs]
    return Scene(vol, [o.shape for o in spec.organs], meshes, spec)


def make_dataset(n_scenes: int, template: SceneTemplate, seed: int) -> SceneDataset:
    """Generate n randomized scenes and a deterministic 50/25/25 split."""
    if n_scenes < 3:
        raise InvalidArgument("need at least 3 scenes for a train/val/test split")
    root = np.random.SeedSequence(seed)
    children = root.spawn(n_scenes)
    scene_seeds = [int(c.generate_state(1)[0]) for c in children]
    if len(set(scene_seeds)) != n_scenes:
        raise InvalidArgument("scene seed collision; change the root seed")
    scenes = [generate_scene(template.sample(s)) for s in scene_seeds]
    order = np.random.default_rng(seed).permutation(n_scenes)
    n_train = int(round(0.5 * n_scenes))
    n_val = int(round(0.25 * n_scenes))
    return SceneDataset(
        scenes,
        [int(i) for i in order[:n_train]],
        [int(i) for i in order[n_train:n_train + n_val]],
        [int(i) for i in order[n_train + n_val:]],
    )
