"""Command-line entry point.

Subcommands: synth, sample, train, reconstruct, evaluate, gradcheck, repro.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import backend, geometry, metrics, pipeline, presets, synth
from .errors import ImplsurfError, NumericFailure
from .sampling import SampleBudget, build_queryset, load_queryset, save_queryset
from .volume import load_vol, normalize

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _scene_names(data_dir: Path) -> list[str]:
    return sorted(p.name[: -len(".spec.json")] for p in data_dir.glob("*.spec.json"))


def cmd_synth(args) -> int:
    template = synth.SceneTemplate(kind=args.template, dims=args.dims, noise_std=args.noise)
    ds = synth.make_dataset(args.scenes, template, args.seed)
    out = Path(args.out)
    names = [f"scene_{i:03d}" for i in range(len(ds.scenes))]
    for name, scene in zip(names, ds.scenes):
        synth.save_scene(out, name, scene)
    _write_json(
        out / "split.json",
        {
            "seed": args.seed,
            "template": asdict(template),
            "names": names,
            "train": ds.train_idx,
            "val": ds.val_idx,
            "test": ds.test_idx,
        },
    )
    print(f"wrote {len(ds.scenes)} scenes to {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = _scene_names(data)
    for i, name in enumerate(names):
        scene = synth.load_scene(data, name)
        rng = np.random.default_rng(np.random.SeedSequence((args.seed, i)))
        budget = SampleBudget(args.volume_points, (args.boundary_points,) * len(scene.shapes))
        qs = build_queryset(scene.shapes, scene.meshes, scene.volume, budget, rng)
        save_queryset(out / f"{name}.qry", qs, meta={"seed": args.seed, "scene": name})
    print(f"wrote {len(names)} query sets to {out}")
    return EXIT_OK


def _load_examples(data: Path, querysets: Path) -> tuple[list, dict]:
    names = _scene_names(data)
    split = json.loads((data / "split.json").read_text()) if (data / "split.json").exists() else None
    examples = []
    for name in names:
        scene = synth.load_scene(data, name)
        vol, _ = normalize(scene.volume)
        qs = load_queryset(querysets / f"{name}.qry")
        examples.append(pipeline.TrainExample(vol, qs))
    return examples, split


def cmd_train(args) -> int:
    cfg = pipeline.TrainConfig.from_json(Path(args.config).read_text())
    if args.seed is not None:
        cfg.seed = args.seed
    examples, split = _load_examples(Path(args.data), Path(args.querysets))
    if split:
        train_ex = [examples[i] for i in split["train"]]
        val_ex = [examples[i] for i in split["val"]]
    else:
        train_ex, val_ex = examples, None
    params, trace = pipeline.train(train_ex, cfg, val_dataset=val_ex)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.save_checkpoint(out, params)
    pipeline.save_trace(Path(str(out) + ".trace.csv"), trace)
    print(f"trained {params.step} steps; final loss {trace[-1].loss:.6f}; checkpoint {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    params = pipeline.load_checkpoint(args.ckpt)
    vol = load_vol(args.volume)
    if not args.no_normalize:
        vol, _ = normalize(vol)
    if args.mode == "dense":
        dims = tuple(d * args.out_scale for d in vol.dims)
        grids = pipeline.infer_dense(params, vol, dims)
    else:
        grids = pipeline.infer_patchwise(
            params, vol, args.patch_size, args.patch_size // 2, out_scale=args.out_scale
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for k, grid in enumerate(grids):
        mesh = pipeline.reconstruct(grid, args.iso)
        geometry.save_obj(f"{out}.organ{k}.obj", mesh, comment=f"fingerprint={params.fingerprint}")
        if args.save_occupancy:
            from .volume import save_vol

            save_vol(f"{out}.organ{k}.vol", grid, meta={"fingerprint": params.fingerprint})
    print(f"reconstructed {len(grids)} organ mesh(es) at {out}.organ*.obj")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.pred_grid or args.gt_grid:
        if not (args.pred_grid and args.gt_grid):
            raise ImplsurfError("grid IoU needs both --pred-grid and --gt-grid")
        iou = metrics.iou(load_vol(args.pred_grid), load_vol(args.gt_grid), args.iso)
        print(f"IoU: {iou:.4f}%")
        if args.out:
            _write_json(Path(args.out), {"iou": iou, "seed": args.seed})
        return EXIT_OK
    preds = [geometry.load_obj(p) for p in args.pred]
    if args.scene:
        spec_path = Path(args.scene)
        spec = synth.SceneSpec.from_dict(json.loads(spec_path.read_text()))
        gts = [o.shape for o in spec.organs]
        names = [o.name for o in spec.organs]
    else:
        gts = [geometry.load_obj(p) for p in args.gt]
        names = None
    report = metrics.evaluate(
        preds, gts, n_surface_points=args.points, voxel_dims=(args.voxel_dims,) * 3,
        seed=args.seed, organ_names=names,
    )
    report.meta["seed"] = args.seed
    print(report.format_table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(seed=args.seed)
    ok = True
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:24s} rel_err={r.rel_error:.3e}")
        ok = ok and r.passed
    if not ok:
        raise NumericFailure("gradient check failed")
    print("all gradient checks passed")
    return EXIT_OK


_PRESETS = (
    "single-organ",
    "labels-ablation",
    "multi-single",
    "multi-multi",
    "patch",
    "whole-small",
    "augment-on",
    "augment-off",
)


def cmd_repro(args) -> int:
    kw = {}
    if args.scenes is not None:
        kw["n_scenes"] = args.scenes
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    if args.dims is not None:
        kw["dims"] = args.dims
    out = Path(args.out)
    name = args.preset
    if name == "single-organ":
        res = presets.run_single_organ(seed=args.seed, **kw)
        _write_json(out / "report.json", res["summary"])
        pipeline.save_checkpoint(out / "checkpoint.json", res["params"])
        pipeline.save_trace(out / "trace.csv", res["trace"])
        s = res["summary"]
        print(
            f"single-organ: mean IoU {s['mean_iou']:.2f}%, chamfer {s['mean_chamfer']:.6f} "
            f"(baseline {s['mean_chamfer_baseline']:.6f})"
        )
    elif name == "labels-ablation":
        res = presets.run_labels_ablation(seed=args.seed, **kw)
        _write_json(out / "report.json", res)
        print(f"labels-ablation: ASSD exact {res['assd_exact']:.5f} vs seg {res['assd_seg']:.5f}")
    elif name in ("multi-single", "multi-multi"):
        variant = "single" if name.endswith("single") else "multi"
        res = presets.run_multiorgan(variant, seed=args.seed, **kw)
        _write_json(out / "report.json", res)
        print(f"{name}: IoU large {res['iou_large']:.2f}%, small {res['iou_small']:.2f}%")
    elif name in ("patch", "whole-small"):
        arm = "patch" if name == "patch" else "whole"
        res = presets.run_patch_vs_whole(arm, seed=args.seed, **kw)
        _write_json(out / "report.json", res)
        print(f"{name}: chamfer large {res['chamfer_large']:.6f}, small {res['chamfer_small']:.6f}")
    else:
        enabled = name == "augment-on"
        res = presets.run_augmentation(enabled, seed=args.seed, **kw)
        _write_json(out / "report.json", res)
        print(f"{name}: mean HD90 {res['mean_hd90']:.5f}")
    return EXIT_OK


def build_parser() -> _Parser:
    p = _Parser(prog="implsurf", description="Implicit multi-organ surface reconstruction")
    p.add_argument("--threads", type=int, default=1, help="cap kernel worker threads")
    p.add_argument("--deterministic", action="store_true",
                   help="force sequential accumulation (single thread)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic scene dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenes", type=int, default=8)
    sp.add_argument("--template", choices=("single", "two_organ"), default="single")
    sp.add_argument("--dims", type=int, default=32)
    sp.add_argument("--noise", type=float, default=0.03)
    sp.add_argument("--seed", type=int, required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("sample", help="build query sets for a scene dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--volume-points", type=int, default=4096)
    sp.add_argument("--boundary-points", type=int, default=2048)
    sp.add_argument("--seed", type=int, required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("train", help="train a model on scenes + query sets")
    sp.add_argument("--data", required=True)
    sp.add_argument("--querysets", required=True)
    sp.add_argument("--config", required=True, help="TrainConfig JSON file")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("reconstruct", help="inference + marching cubes -> OBJ")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--volume", required=True)
    sp.add_argument("--out", required=True, help="output prefix")
    sp.add_argument("--mode", choices=("dense", "patch"), default="dense")
    sp.add_argument("--out-scale", type=int, default=2)
    sp.add_argument("--patch-size", type=int, default=32)
    sp.add_argument("--iso", type=float, default=0.5)
    sp.add_argument("--no-normalize", action="store_true")
    sp.add_argument("--save-occupancy", action="store_true")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("evaluate", help="score predicted surfaces or grids")
    sp.add_argument("--pred", action="append", default=[], help="predicted mesh OBJ (repeatable)")
    sp.add_argument("--gt", action="append", default=[], help="ground-truth mesh OBJ (repeatable)")
    sp.add_argument("--scene", default=None, help="scene spec JSON (analytic ground truth)")
    sp.add_argument("--pred-grid", default=None, help="predicted occupancy .vol (grid IoU)")
    sp.add_argument("--gt-grid", default=None, help="ground-truth occupancy .vol (grid IoU)")
    sp.add_argument("--points", type=int, default=10000)
    sp.add_argument("--voxel-dims", type=int, default=64)
    sp.add_argument("--iso", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None, help="report JSON path")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference checks for all operators")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("repro", help="run a named end-to-end preset")
    sp.add_argument("preset", choices=_PRESETS)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenes", type=int, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--dims", type=int, default=None)
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    backend.set_num_threads(1 if args.deterministic else args.threads)
    try:
        return args.func(args)
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ImplsurfError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
