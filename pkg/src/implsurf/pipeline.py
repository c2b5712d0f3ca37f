"""Training loops, dense and patch-blended inference, reconstruction,
checkpoints.

Determinism contract: all randomness is drawn from generators keyed by
(seed, domain, step/epoch), so a fixed seed reproduces the run bitwise in
single-threaded mode and training can resume from a checkpoint onto the
identical trajectory.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug
from . import autodiff as ad
from . import geometry, model
from .errors import ConfigError, DegenerateInput, InvalidArgument, LayoutError, NumericFailure
from .geometry import TriMesh
from .model import ModelConfig, ModelParams
from .sampling import CoordinateFrame, QuerySet, to_patch_frame
from .volume import (
    VolumeGrid,
    extract_patch,
    is_background_patch,
    plan_patches,
    scaled_frame,
    voxel_center_coords,
)

_RNG_SHUFFLE = 1
_RNG_STEP = 2
_RNG_VAL = 3


def _rng(seed: int, domain: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, domain, index)))


@dataclass
class TrainConfig:
    """Everything a training run needs; defaults are desk-scale, not from
    any reported protocol (the source work does not state them)."""

    mode: str = "whole"  # "whole" or "patch"
    epochs: int = 50
    batch_size: int = 2
    points_per_volume: int = 1024
    lr: float = 1e-4
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    augment: bool = False
    augment_config: aug.AugmentConfig = field(default_factory=aug.AugmentConfig)
    decoder_variant: str = "multi"
    seed: int = 0
    base_channels: int = 8
    hidden_dim: int | None = None
    include_raw_input_scale: bool = True
    patch_size: int = 32
    n_min: int = 64
    max_patch_tries: int = 50
    val_every: int = 0  # epochs between validation passes; 0 disables

    def __post_init__(self):
        if self.mode not in ("whole", "patch"):
            raise InvalidArgument(f"mode must be 'whole' or 'patch', got {self.mode!r}")
        if self.batch_size < 1 or self.points_per_volume < 1:
            raise InvalidArgument("batch size and points per volume must be >= 1")

    def model_config(self, organs: int) -> ModelConfig:
        return ModelConfig(
            model.EncoderConfig(self.base_channels, 5, self.include_raw_input_scale),
            model.DecoderConfig(self.decoder_variant, organs, self.hidden_dim),
        )

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        if "augment_config" in d and isinstance(d["augment_config"], dict):
            ac = d["augment_config"]
            ac["scale_range"] = tuple(ac.get("scale_range", (0.9, 1.1)))
            d["augment_config"] = aug.AugmentConfig(**ac)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass(frozen=True)
class TrainExample:
    volume: VolumeGrid
    queryset: QuerySet


@dataclass
class TraceRow:
    step: int
    epoch: int
    loss: float
    per_organ: list[float]
    val_loss: float | None = None


def save_trace(path: str | Path, trace: list[TraceRow]) -> None:
    organs = len(trace[0].per_organ) if trace else 0
    header = "step,epoch,loss," + ",".join(f"loss_organ{i}" for i in range(organs)) + ",val_loss"
    lines = [header]
    for r in trace:
        organ_cols = ",".join(f"{x:.8g}" for x in r.per_organ)
        val = "" if r.val_loss is None else f"{r.val_loss:.8g}"
        lines.append(f"{r.step},{r.epoch},{r.loss:.8g},{organ_cols},{val}")
    Path(path).write_text("\n".join(lines) + "\n")


def _per_organ_losses(logits: np.ndarray, labels: np.ndarray, variant: str) -> list[float]:
    if variant == "multi":
        x = logits
        y = labels
        per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
        return [float(per[:, k, :].mean()) for k in range(labels.shape[1])]
    # single decoder: per-organ breakdown is not separable; report the total
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0, :] + np.log(np.exp(logits - m).sum(axis=1))
    ids = model.labels_to_class_ids(labels)
    picked = np.take_along_axis(logits, ids[:, None, :], axis=1)[:, 0, :]
    total = float((lse - picked).mean())
    return [total] * labels.shape[1]


def _draw_example(
    ex: TrainExample,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[VolumeGrid, np.ndarray, np.ndarray]:
    """One training instance: (input volume, points (n,3), labels (c,n))."""
    vol, qs = ex.volume, ex.queryset
    if cfg.augment:
        wvol, wqs = aug.apply_paired(vol, qs, cfg.augment_config, rng)
        if wqs.n >= cfg.n_min:
            vol, qs = wvol, wqs
    if cfg.mode == "patch":
        dims = np.asarray(vol.dims)
        patch = np.asarray((cfg.patch_size,) * 3)
        if (patch > dims).any():
            raise InvalidArgument(f"patch size {cfg.patch_size} exceeds volume dims {vol.dims}")
        frame = CoordinateFrame.of(vol)
        best = None
        for _ in range(cfg.max_patch_tries):
            off = tuple(int(o) for o in rng.integers(0, dims - patch + 1))
            pv = extract_patch(vol, off, tuple(patch))
            if is_background_patch(pv):
                continue
            pq = to_patch_frame(qs, off, tuple(patch), frame)
            if best is None or pq.n > best[1].n:
                best = (pv, pq)
            if pq.n >= cfg.n_min:
                break
        if best is None:
            raise DegenerateInput("all sampled patches were background")
        vol, qs = best
    if qs.n == 0:
        raise DegenerateInput("query set is empty")
    idx = rng.integers(0, qs.n, size=cfg.points_per_volume)
    return vol, qs.coords[idx], qs.labels[idx].T.astype(np.float32)


def _loss_on(
    params: ModelParams,
    vols: list[VolumeGrid],
    pts: np.ndarray,
    labels: np.ndarray,
    mode: str,
) -> tuple[ad.Tensor, ad.Tensor]:
    x = model.volumes_to_batch(vols, params.parameters()[0].dtype)
    pyr = model.encode(x, params, mode)
    feats = model.query_features(pyr, pts)
    logits = model.decode(feats, params)
    return model.loss(logits, labels, params.config), logits


def _validation_loss(params: ModelParams, val: list[TrainExample], cfg: TrainConfig, epoch: int) -> float:
    rng = _rng(cfg.seed, _RNG_VAL, epoch)
    total = 0.0
    with ad.no_grad():
        for ex in val:
            idx = rng.integers(0, ex.queryset.n, size=cfg.points_per_volume)
            pts = ex.queryset.coords[idx][None]
            labels = ex.queryset.labels[idx].T.astype(np.float32)[None]
            lt, _ = _loss_on(params, [ex.volume], pts, labels, "eval")
            total += float(lt.data)
    return total / len(val)


def train(
    dataset: list[TrainExample],
    cfg: TrainConfig,
    val_dataset: list[TrainExample] | None = None,
    resume: ModelParams | None = None,
) -> tuple[ModelParams, list[TraceRow]]:
    """Optimize a fresh (or resumed) model on the dataset.

    Returns the final parameters (or the best-validation copy when
    ``val_every`` is active and a validation set is given) plus the loss
    trace. With a fixed seed the run is bitwise reproducible and a resumed
    checkpoint continues the identical trajectory.
    """
    if not dataset:
        raise DegenerateInput("training dataset is empty")
    if all(is_background_patch(ex.volume) for ex in dataset):
        raise DegenerateInput("every training volume is constant background")
    organs = dataset[0].queryset.c
    if any(ex.queryset.c != organs for ex in dataset):
        raise InvalidArgument("inconsistent organ counts across query sets")
    config = cfg.model_config(organs)
    if cfg.mode == "whole":
        dims = dataset[0].volume.dims
        if any(ex.volume.dims != dims for ex in dataset):
            raise InvalidArgument("whole-image mode requires uniform volume dims")

    if resume is not None:
        model.check_fingerprint(resume, config.fingerprint())
        params = resume
    else:
        params = model.init_params(config, cfg.seed)

    steps_per_epoch = max(1, -(-len(dataset) // cfg.batch_size))
    start_epoch = params.step // steps_per_epoch
    trace: list[TraceRow] = []
    best: tuple[float, ModelParams] | None = None

    for epoch in range(start_epoch, cfg.epochs):
        order = _rng(cfg.seed, _RNG_SHUFFLE, epoch).permutation(len(dataset))
        for bstart in range(0, len(dataset), cfg.batch_size):
            step = params.step
            rng = _rng(cfg.seed, _RNG_STEP, step)
            batch = [dataset[i] for i in order[bstart:bstart + cfg.batch_size]]
            vols, pts_list, label_list = [], [], []
            for ex in batch:
                v, p, l = _draw_example(ex, cfg, rng)
                vols.append(v)
                pts_list.append(p)
                label_list.append(l)
            pts = np.stack(pts_list)
            labels = np.stack(label_list)
            params.zero_grad()
            loss_t, logits = _loss_on(params, vols, pts, labels, "train")
            loss_val = float(loss_t.data)
            if not np.isfinite(loss_val):
                raise NumericFailure(f"non-finite loss at step {step}")
            ad.backward(loss_t)
            ad.adam_step(
                params.parameters(), params.adam,
                lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay,
            )
            params.step += 1
            trace.append(
                TraceRow(step, epoch, loss_val,
                         _per_organ_losses(logits.data, labels, cfg.decoder_variant))
            )
        if cfg.val_every > 0 and val_dataset and (epoch + 1) % cfg.val_every == 0:
            vl = _validation_loss(params, val_dataset, cfg, epoch)
            trace[-1].val_loss = vl
            if best is None or vl < best[0]:
                best = (vl, params.copy())
    if best is not None:
        return best[1], trace
    return params, trace


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _dense_probs(
    params: ModelParams,
    v: VolumeGrid,
    out_dims: tuple[int, int, int],
    chunk: int = 65536,
) -> np.ndarray:
    """Per-organ probabilities on the out_dims voxel-center lattice: (c, oz, oy, ox)."""
    c = params.config.decoder.organs
    coords = voxel_center_coords(out_dims)
    out = np.empty((c, coords.shape[0]), dtype=np.float32)
    with ad.no_grad():
        x = model.volumes_to_batch([v], params.parameters()[0].dtype)
        pyr = model.encode(x, params, "eval")
        for s in range(0, coords.shape[0], chunk):
            pts = coords[s:s + chunk][None]
            feats = model.query_features(pyr, pts)
            logits = model.decode(feats, params)
            if params.config.decoder.variant == "multi":
                probs = ad.sigmoid(logits.data)[0]
            else:
                probs = ad.softmax(logits.data, axis=1)[0, 1:, :]
            out[:, s:s + chunk] = probs
    return out.reshape(c, out_dims[2], out_dims[1], out_dims[0])


def infer_dense(
    params: ModelParams,
    v: VolumeGrid,
    out_dims: tuple[int, int, int] | int,
    chunk: int = 65536,
) -> list[VolumeGrid]:
    """Encode once, decode every out-grid voxel center; one grid per organ."""
    if isinstance(out_dims, int):
        out_dims = (out_dims,) * 3
    probs = _dense_probs(params, v, out_dims, chunk)
    spacing, origin = scaled_frame(v, out_dims)
    return [VolumeGrid(p, spacing, origin) for p in probs]


@dataclass(frozen=True)
class HannWindow3D:
    """Separable periodic Hann window: w[i] = 0.5 (1 - cos(2 pi i / N)).

    With hop N/2 per axis the shifted windows overlap-add to exactly 1 in
    the interior (constant overlap-add).
    """

    size: tuple[int, int, int]
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        ws = [hann_window_1d(n) for n in self.size]
        w = ws[2][:, None, None] * ws[1][None, :, None] * ws[0][None, None, :]
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)


def hann_window_1d(n: int, phase: float = 0.0) -> np.ndarray:
    """Periodic Hann samples w[i] = 0.5 (1 - cos(2 pi (i + phase) / n))."""
    i = np.arange(n, dtype=np.float64) + phase
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * i / n))


def _blend_window(patch_size: tuple[int, int, int], out_scale: int) -> np.ndarray:
    """Blending weights at output voxel centers.

    The continuous Hann profile over a patch is evaluated at the half-voxel
    centers of the refined output lattice (phase 0.5), which keeps the
    overlap-add identity exact at hop patch/2 and makes every covered
    output voxel's weight strictly positive.
    """
    ws = [hann_window_1d(n * out_scale, phase=0.5) for n in patch_size]
    return ws[2][:, None, None] * ws[1][None, :, None] * ws[0][None, None, :]


def infer_patchwise(
    params: ModelParams,
    v: VolumeGrid,
    patch_size: int | tuple[int, int, int],
    stride: int | tuple[int, int, int],
    out_scale: int = 1,
    chunk: int = 65536,
) -> list[VolumeGrid]:
    """Evaluate overlapping patches and Hann-blend them into one grid set.

    Requires stride = patch/2 (constant overlap-add). Blending normalizes
    per-voxel by the accumulated window weight, so outputs are convex
    combinations of patch probabilities; a volume of exactly one patch
    reproduces dense inference bitwise.
    """
    if isinstance(patch_size, int):
        patch_size = (patch_size,) * 3
    if isinstance(stride, int):
        stride = (stride,) * 3
    if any(2 * s != p for s, p in zip(stride, patch_size)):
        raise InvalidArgument(f"patch blending requires stride = patch/2, got {stride} vs {patch_size}")
    layout = plan_patches(v.dims, patch_size, stride)
    pdx, pdy, pdz = layout.padded_dims
    fill = v.fill if v.fill is not None else float(v.values.min())
    padded_vals = np.full((pdz, pdy, pdx), fill, dtype=v.values.dtype)
    dx, dy, dz = v.dims
    padded_vals[:dz, :dy, :dx] = v.values
    padded = VolumeGrid(padded_vals, v.spacing, v.origin, fill)

    s = int(out_scale)
    w3d = _blend_window(patch_size, s)
    den = np.zeros((pdz * s, pdy * s, pdx * s), dtype=np.float64)
    for ox, oy, oz in layout.offsets:
        den[
            oz * s: (oz + patch_size[2]) * s,
            oy * s: (oy + patch_size[1]) * s,
            ox * s: (ox + patch_size[0]) * s,
        ] += w3d
    if (den[: dz * s, : dy * s, : dx * s] <= 0).any():
        raise LayoutError("patch layout left an output voxel with zero blend weight")

    c = params.config.decoder.organs
    num = np.zeros((c, pdz * s, pdy * s, pdx * s), dtype=np.float64)
    out_patch = tuple(p * s for p in patch_size)
    for ox, oy, oz in layout.offsets:
        pvol = extract_patch(padded, (ox, oy, oz), patch_size)
        probs = _dense_probs(params, pvol, out_patch, chunk)
        region = (
            slice(oz * s, (oz + patch_size[2]) * s),
            slice(oy * s, (oy + patch_size[1]) * s),
            slice(ox * s, (ox + patch_size[0]) * s),
        )
        num[(slice(None),) + region] += probs * (w3d / den[region])

    out_dims = (dx * s, dy * s, dz * s)
    spacing, origin = scaled_frame(v, out_dims)
    cropped = num[:, : dz * s, : dy * s, : dx * s].astype(np.float32)
    return [VolumeGrid(p, spacing, origin) for p in cropped]


def reconstruct(
    occ: VolumeGrid,
    iso: float = 0.5,
    smooth_iterations: int = 5,
    smooth_lambda: float = 0.5,
) -> TriMesh:
    """Marching cubes at the iso level, then Laplacian smoothing."""
    mesh = geometry.marching_cubes(occ, iso)
    if mesh.is_empty() or smooth_iterations == 0:
        return mesh
    return geometry.smooth_mesh(mesh, smooth_iterations, smooth_lambda)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest at <path>, raw payload at <path>.raw with all
# arrays little-endian in manifest order
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    path = Path(path)
    entries = []
    blobs = []

    def put(name: str, arr: np.ndarray):
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt})
        blobs.append(np.ascontiguousarray(arr).astype(dt).tobytes())

    for name, t in params.tensors.items():
        put(f"param:{name}", t.data)
    for name, st in params.bn_states.items():
        put(f"bn_mean:{name}", st.mean)
        put(f"bn_var:{name}", st.var)
    for i, m in enumerate(params.adam.m):
        put(f"adam_m:{i}", m)
    for i, vv in enumerate(params.adam.v):
        put(f"adam_v:{i}", vv)

    manifest = {
        "format": "implsurf-ckpt-v1",
        "fingerprint": params.fingerprint,
        "config": params.config.to_dict(),
        "seed": params.seed,
        "step": params.step,
        "adam_step": params.adam.step,
        "tensors": entries,
        "payload": path.name + ".raw",
    }
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    Path(str(path) + ".raw").write_bytes(b"".join(blobs))


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> ModelParams:
    path = Path(path)
    manifest = json.loads(path.read_text())
    config = ModelConfig.from_dict(manifest["config"])
    if manifest["fingerprint"] != config.fingerprint():
        raise ConfigError("checkpoint fingerprint does not match its stored config")
    if expected_config is not None and expected_config.fingerprint() != config.fingerprint():
        raise ConfigError(
            f"checkpoint fingerprint {config.fingerprint()} does not match requested "
            f"config {expected_config.fingerprint()}"
        )
    raw = Path(str(path) + ".raw").read_bytes()
    arrays = {}
    offset = 0
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(e["shape"]).copy()
        offset += count * dt.itemsize
        arrays[e["name"]] = arr

    params = model.init_params(config, manifest["seed"])
    for name, t in params.tensors.items():
        t.data = arrays[f"param:{name}"].astype(t.data.dtype)
    for name, st in params.bn_states.items():
        st.mean[:] = arrays[f"bn_mean:{name}"]
        st.var[:] = arrays[f"bn_var:{name}"]
    for i in range(len(params.adam.m)):
        params.adam.m[i][:] = arrays[f"adam_m:{i}"]
        params.adam.v[i][:] = arrays[f"adam_v:{i}"]
    params.adam.step = manifest["adam_step"]
    params.step = manifest["step"]
    return params
