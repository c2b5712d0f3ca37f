"""Reproducible end-to-end experiment presets.

These functions are the building blocks behind the ``repro`` CLI command
and the acceptance suite: generate scenes, build query sets, train, infer,
reconstruct, and score. Every preset is a pure function of its arguments
(seed included), so a rerun reproduces results bitwise in single-threaded
mode.
"""

from __future__ import annotations

import numpy as np

from . import augment as aug
from . import geometry, metrics, pipeline
from .geometry import TriMesh
from .sampling import QuerySet, SampleBudget, build_queryset, points_with_occupancy_from_highres
from .synth import Scene, SceneTemplate, make_dataset
from .pipeline import TrainConfig, TrainExample
from .volume import VolumeGrid, normalize, resample, voxel_center_coords

_QS_DOMAIN = 0x5A11


def voxelized_gt(scene: Scene, dims: int) -> list[VolumeGrid]:
    """Per-organ 0/1 grids from the analytic oracles at voxel centers."""
    pts = voxel_center_coords((dims, dims, dims))
    spacing = (2.0 / dims,) * 3
    origin = (-1.0 + 1.0 / dims,) * 3
    return [
        VolumeGrid(
            (s.sdf(pts) < 0).reshape(dims, dims, dims).astype(np.float32),
            spacing,
            origin,
        )
        for s in scene.shapes
    ]


def scene_examples(
    scenes: list[Scene],
    seed: int,
    volume_points: int = 4096,
    boundary_points: int = 2048,
    resample_to: int | None = None,
    seg_label_dims: int | None = None,
) -> list[TrainExample]:
    """Normalize volumes and build query sets for a list of scenes.

    ``resample_to`` optionally downsamples the input volumes (query points
    are resolution-independent). ``seg_label_dims`` switches labels from the
    exact analytic source to nearest-voxel lookups in a mask of that
    resolution (the segmentation-derived labeling regime).
    """
    out = []
    for i, scene in enumerate(scenes):
        vol, _ = normalize(scene.volume)
        if resample_to is not None:
            vol = resample(vol, (resample_to,) * 3)
        rng = np.random.default_rng(np.random.SeedSequence((seed, _QS_DOMAIN, i)))
        budget = SampleBudget(volume_points, (boundary_points,) * len(scene.shapes))
        qs = build_queryset(scene.shapes, scene.meshes, vol, budget, rng)
        if seg_label_dims is not None:
            masks = voxelized_gt(scene, seg_label_dims)
            labels = np.stack(
                [
                    points_with_occupancy_from_highres(s, m, qs.coords)[1]
                    for s, m in zip(scene.shapes, masks)
                ],
                axis=1,
            )
            qs = QuerySet(qs.coords, labels, qs.tags)
        out.append(TrainExample(vol, qs))
    return out


def nn_upsample_baseline(grid: VolumeGrid, factor: int, iso: float = 0.5) -> VolumeGrid:
    """The explicit-representation baseline: threshold the prediction at its
    native resolution and nearest-neighbour upsample the binary mask."""
    binary = (grid.values > iso).astype(np.float32)
    up = binary.repeat(factor, axis=0).repeat(factor, axis=1).repeat(factor, axis=2)
    dims = tuple(d * factor for d in grid.dims)
    from .volume import scaled_frame

    spacing, origin = scaled_frame(grid, dims)
    return VolumeGrid(up, spacing, origin)


def _mesh_points(mesh: TriMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    return geometry.sample_surface_points(mesh, n, [(1.0, 0.0)], rng)


def score_scene(
    pred_grids: list[VolumeGrid],
    scene: Scene,
    gt_dims: int,
    n_points: int = 4096,
    seed: int = 0,
    iso: float = 0.5,
) -> list[dict]:
    """Per-organ metrics of predicted occupancy grids against the oracles.

    IoU compares the binarized grid to the SDF-voxelized ground truth at
    the grid resolution; distances compare reconstructed-mesh samples to
    ground-truth-mesh samples.
    """
    gts = voxelized_gt(scene, gt_dims)
    rows = []
    for k, (grid, gt) in enumerate(zip(pred_grids, gts)):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE7A1, k)))
        mesh = pipeline.reconstruct(grid, iso)
        row = {"organ": scene.organ_names[k], "iou": metrics.iou(grid, gt, iso)}
        if mesh.is_empty():
            row.update({"hd90": float("inf"), "assd": float("inf"), "chamfer": float("inf")})
        else:
            pp = _mesh_points(mesh, n_points, rng)
            gp = _mesh_points(scene.meshes[k], n_points, rng)
            row.update(
                {"hd90": metrics.hd90(pp, gp), "assd": metrics.assd(pp, gp), "chamfer": metrics.chamfer(pp, gp)}
            )
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# preset: single-organ whole-image pipeline + explicit baseline
# ---------------------------------------------------------------------------

def run_single_organ(
    seed: int = 7,
    n_scenes: int = 20,
    dims: int = 32,
    epochs: int = 60,
    out_scale: int = 2,
    train_overrides: dict | None = None,
) -> dict:
    """Train on lumpy-ellipsoid scenes, reconstruct at 2x resolution, and
    score against the oracles and the thresholded nearest-neighbour
    upsampling baseline."""
    template = SceneTemplate(kind="single", dims=dims)
    ds = make_dataset(n_scenes, template, seed)
    examples = scene_examples(ds.scenes, seed)
    cfg = TrainConfig(
        mode="whole",
        epochs=epochs,
        lr=1e-3,
        decoder_variant="multi",
        seed=seed,
        val_every=0,
        **(train_overrides or {}),
    )
    train_ex = [examples[i] for i in ds.train_idx]
    val_ex = [examples[i] for i in ds.val_idx]
    params, trace = pipeline.train(train_ex, cfg, val_dataset=val_ex)

    out_dims = dims * out_scale
    per_scene = []
    for i in ds.test_idx:
        scene = ds.scenes[i]
        vol = examples[i].volume
        grids = pipeline.infer_dense(params, vol, out_dims)
        rows = score_scene(grids, scene, out_dims, seed=seed)
        base_grid = nn_upsample_baseline(pipeline.infer_dense(params, vol, dims)[0], out_scale)
        base_rows = score_scene([base_grid], scene, out_dims, seed=seed)
        per_scene.append(
            {
                "scene": i,
                "implicit": rows[0],
                "explicit_baseline": base_rows[0],
            }
        )
    summary = {
        "preset": "single-organ",
        "seed": seed,
        "fingerprint": params.fingerprint,
        "final_train_loss": trace[-1].loss,
        "epoch_mean_losses": _epoch_means(trace),
        "scenes": per_scene,
        "mean_iou": float(np.mean([s["implicit"]["iou"] for s in per_scene])),
        "mean_chamfer": float(np.mean([s["implicit"]["chamfer"] for s in per_scene])),
        "mean_chamfer_baseline": float(
            np.mean([s["explicit_baseline"]["chamfer"] for s in per_scene])
        ),
    }
    return {"summary": summary, "params": params, "trace": trace, "dataset": ds, "examples": examples}


def _epoch_means(trace) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for r in trace:
        by_epoch.setdefault(r.epoch, []).append(r.loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


# ---------------------------------------------------------------------------
# preset: labeling-regime ablation (exact vs mask-derived labels)
# ---------------------------------------------------------------------------

def run_labels_ablation(
    seed: int = 3,
    n_scenes: int = 8,
    dims: int = 32,
    epochs: int = 40,
    mask_dims: int = 32,
) -> dict:
    """Same scenes and seeds, two labeling regimes; reports mean test ASSD
    for each (exact labels should not be worse)."""
    template = SceneTemplate(kind="single", dims=dims)
    ds = make_dataset(n_scenes, template, seed)
    out = {"preset": "labels-ablation", "seed": seed}
    for regime, seg_dims in (("exact", None), ("seg", mask_dims)):
        examples = scene_examples(ds.scenes, seed, seg_label_dims=seg_dims)
        cfg = TrainConfig(mode="whole", epochs=epochs, lr=1e-3, decoder_variant="multi", seed=seed)
        params, _ = pipeline.train([examples[i] for i in ds.train_idx], cfg)
        assds = []
        for i in ds.test_idx:
            grids = pipeline.infer_dense(params, examples[i].volume, dims * 2)
            rows = score_scene(grids, ds.scenes[i], dims * 2, seed=seed)
            assds.append(rows[0]["assd"])
        out[f"assd_{regime}"] = float(np.mean(assds))
    return out


# ---------------------------------------------------------------------------
# preset: multi-organ decoder ablation on contact scenes
# ---------------------------------------------------------------------------

def run_multiorgan(
    variant: str,
    seed: int = 5,
    n_scenes: int = 8,
    dims: int = 32,
    epochs: int = 50,
    hidden_dim: int = 256,
) -> dict:
    """Two-organ contact scenes with either decoder layout; reports mean
    per-organ IoU at 2x resolution on the test split."""
    template = SceneTemplate(kind="two_organ", dims=dims)
    ds = make_dataset(n_scenes, template, seed)
    examples = scene_examples(ds.scenes, seed)
    cfg = TrainConfig(
        mode="whole",
        epochs=epochs,
        lr=1e-3,
        decoder_variant=variant,
        hidden_dim=hidden_dim,
        seed=seed,
    )
    params, trace = pipeline.train([examples[i] for i in ds.train_idx], cfg)
    ious = {"large": [], "small": []}
    for i in ds.test_idx:
        grids = pipeline.infer_dense(params, examples[i].volume, dims * 2)
        rows = score_scene(grids, ds.scenes[i], dims * 2, seed=seed)
        for row in rows:
            ious[row["organ"]].append(row["iou"])
    return {
        "preset": f"multi-{variant}",
        "seed": seed,
        "fingerprint": params.fingerprint,
        "final_train_loss": trace[-1].loss,
        "iou_large": float(np.mean(ious["large"])),
        "iou_small": float(np.mean(ious["small"])),
    }


# ---------------------------------------------------------------------------
# preset: patch-wise vs downsampled whole-image training on 64^3 scenes
# ---------------------------------------------------------------------------

def run_patch_vs_whole(
    arm: str,
    seed: int = 9,
    n_scenes: int = 6,
    dims: int = 64,
    epochs: int = 40,
    patch_size: int = 32,
) -> dict:
    """Thin-capsule small organ at 64^3: either patch-wise training and
    blended inference at full resolution, or whole-image training after
    downsampling to the patch resolution (with 2x super-resolved output)."""
    template = SceneTemplate(kind="two_organ", dims=dims)
    ds = make_dataset(n_scenes, template, seed)
    if arm == "patch":
        examples = scene_examples(ds.scenes, seed)
        cfg = TrainConfig(
            mode="patch",
            patch_size=patch_size,
            epochs=epochs,
            lr=1e-3,
            decoder_variant="multi",
            hidden_dim=256,
            seed=seed,
        )
    elif arm == "whole":
        examples = scene_examples(ds.scenes, seed, resample_to=patch_size)
        cfg = TrainConfig(
            mode="whole", epochs=epochs, lr=1e-3, decoder_variant="multi", hidden_dim=256, seed=seed
        )
    else:
        raise ValueError(f"arm must be 'patch' or 'whole', got {arm!r}")
    params, _ = pipeline.train([examples[i] for i in ds.train_idx], cfg)
    chamfers = {"large": [], "small": []}
    for i in ds.test_idx:
        if arm == "patch":
            grids = pipeline.infer_patchwise(
                params, examples[i].volume, patch_size, patch_size // 2, out_scale=1
            )
            gt_dims = dims
        else:
            grids = pipeline.infer_dense(params, examples[i].volume, dims)
            gt_dims = dims
        rows = score_scene(grids, ds.scenes[i], gt_dims, seed=seed)
        for row in rows:
            chamfers[row["organ"]].append(row["chamfer"])
    return {
        "preset": f"patch-vs-whole[{arm}]",
        "seed": seed,
        "chamfer_large": float(np.mean(chamfers["large"])),
        "chamfer_small": float(np.mean(chamfers["small"])),
    }


# ---------------------------------------------------------------------------
# preset: paired augmentation on/off, evaluated under held-out poses
# ---------------------------------------------------------------------------

def run_augmentation(
    enabled: bool,
    seed: int = 13,
    n_scenes: int = 8,
    dims: int = 32,
    epochs: int = 40,
    poses_per_scene: int = 2,
) -> dict:
    """Train with or without paired affine augmentation and evaluate HD90 on
    test scenes presented under held-out random affine poses."""
    template = SceneTemplate(kind="single", dims=dims)
    ds = make_dataset(n_scenes, template, seed)
    examples = scene_examples(ds.scenes, seed)
    cfg = TrainConfig(
        mode="whole",
        epochs=epochs,
        lr=1e-3,
        decoder_variant="multi",
        seed=seed,
        augment=enabled,
    )
    params, _ = pipeline.train([examples[i] for i in ds.train_idx], cfg)
    pose_cfg = aug.AugmentConfig()
    hd90s = []
    for i in ds.test_idx:
        scene = ds.scenes[i]
        for p in range(poses_per_scene):
            pose_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xAF1E, i, p)))
            a = aug.sample_affine(pose_cfg, pose_rng)
            warped = aug.warp_volume(examples[i].volume, a)
            grids = pipeline.infer_dense(params, warped, dims * 2)
            mesh = pipeline.reconstruct(grids[0], 0.5)
            gt_mesh = TriMesh(
                aug.transform_points(scene.meshes[0].vertices, a), scene.meshes[0].triangles
            )
            rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE7A2, i, p)))
            if mesh.is_empty():
                hd90s.append(float("inf"))
                continue
            pp = _mesh_points(mesh, 4096, rng)
            gp = _mesh_points(gt_mesh, 4096, rng)
            hd90s.append(metrics.hd90(pp, gp))
    return {
        "preset": f"augment-{'on' if enabled else 'off'}",
        "seed": seed,
        "mean_hd90": float(np.mean(hd90s)),
        "hd90s": hd90s,
    }
