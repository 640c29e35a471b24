"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("cadalign")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path):
    with open(path) as f:
        return json.load(f)


def _write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_scenes(args):
    from .fusion import save_frame
    from .synth import SceneSpec, generate_scene, render_scene_frames, save_scene, write_manifest

    doc = _read_json(args.spec) if args.spec else {}
    n = int(doc.pop("n_scenes", 1)) if args.n is None else args.n
    if n < 1:
        raise UsageError("number of scenes must be >= 1")
    base = SceneSpec.from_json(doc)
    if args.seed is not None:
        base.seed = args.seed
    out = Path(args.out)
    entries = []
    for i in range(n):
        spec = SceneSpec.from_json({**base.to_json(), "seed": base.seed + i})
        gt = generate_scene(spec)
        d = out / gt.scene_id
        files = save_scene(gt, d)
        if args.save_frames:
            (d / "frames").mkdir(exist_ok=True)
            for k, fr in enumerate(render_scene_frames(gt)):
                save_frame(fr, d / "frames" / f"frame_{k:04d}")
        entries.append({"scene_id": gt.scene_id, "dir": gt.scene_id, "seed": spec.seed,
                        "objects": len(gt.objects), "dropped": gt.dropped, "files": files})
        log.info("%s: %d objects (%d dropped)", gt.scene_id, len(gt.objects), len(gt.dropped))
    write_manifest(out, entries)
    print(f"wrote {n} scene(s) to {out}")
    return EXIT_OK


def _frame_bounds(frames, margin):
    pts = []
    for fr in frames:
        origin, dirs = fr.camera.pixel_rays()
        d = fr.depth.reshape(-1)
        ok = np.isfinite(d) & (d > 0)
        pts.append(origin + dirs[ok] * d[ok, None])
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    if len(pts) == 0:
        raise ValueError("frames contain no valid depth")
    return pts.min(axis=0) - margin, pts.max(axis=0) + margin


def cmd_fuse(args):
    from .fusion import fuse_frames, load_frame
    from .geometry import write_vxg

    stems = sorted(p.with_suffix("") for p in Path(args.frames).glob("*.npy"))
    if not stems:
        raise ValueError(f"no depth frames (*.npy + *.json) in {args.frames}")
    frames = [load_frame(s) for s in stems]
    vs = args.voxel_size
    if args.origin and args.dims:
        origin = np.asarray(args.origin, dtype=np.float64)
        dims = tuple(args.dims)
    elif args.origin or args.dims:
        raise UsageError("--origin and --dims must be given together")
    else:
        lo, hi = _frame_bounds(frames, args.trunc)
        origin = lo
        dims = tuple(int(n) for n in np.ceil((hi - lo) / vs).astype(int) + 1)
    grid = fuse_frames(frames, dims, origin, vs, args.trunc)
    write_vxg(grid, args.out)
    print(f"fused {len(frames)} frame(s) into {dims} grid -> {args.out}")
    return EXIT_OK


def cmd_align(args):
    from .evaluation import align_scene, build_store
    from .retrieval import DescriptorStore
    from .synth import load_scene, perturb_gt, scene_dirs

    store = DescriptorStore.load(args.store) if args.store else build_store()
    dirs = scene_dirs(args.scene)
    if not dirs:
        raise ValueError(f"no scenes found under {args.scene}")
    results = []
    for d in dirs:
        gt = load_scene(d)
        if args.noc_sigma or args.mask_flip or args.center_jitter:
            gt = perturb_gt(gt, args.noc_sigma, args.mask_flip, args.center_jitter,
                            seed=args.seed or 0)
        if not gt.objects:
            log.warning("%s has no objects", gt.scene_id)
            results.append({"scene_id": gt.scene_id, "total_ms": 0.0, "objects": [],
                            "errors": []})
            continue
        res = align_scene(gt.scan, gt.crops(), store, gt.scene_id,
                          category_filter=not args.no_category_filter,
                          translation=args.translation)
        results.append(res.to_json())
        print(f"{gt.scene_id}: {len(res.objects)} aligned, {len(res.errors)} error(s), "
              f"{res.total_ms:.1f} ms")
    _write_json({"results": results}, args.out)
    return EXIT_OK


def cmd_eval(args):
    from .evaluation import AlignmentResult, evaluate
    from .synth import load_scene, scene_dirs

    doc = _read_json(args.results)
    results = [AlignmentResult.from_json(r) for r in doc["results"]]
    gts = [load_scene(d, with_scan=False) for d in scene_dirs(args.gt)]
    report = evaluate(results, gts)
    if args.out:
        _write_json(report.to_json(), args.out)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_bench(args):
    from .evaluation import BENCH_SIZES, bench, format_bench

    sizes = [s.strip() for s in args.sizes.split(",") if s.strip()]
    bad = [s for s in sizes if s not in BENCH_SIZES]
    if bad or not sizes:
        raise UsageError(f"unknown sizes {bad}; choose from {sorted(BENCH_SIZES)}")
    rows = bench(sizes, seed=args.seed or 0, repeats=args.repeats, n_frames=args.frames)
    print(format_bench(rows))
    if args.out:
        _write_json({"rows": rows}, args.out)
    return EXIT_OK


def cmd_procrustes_check(args):
    from .procrustes import CorrespondenceSet, residual, solve_rotation, solve_similarity

    doc = _read_json(args.input)
    c = CorrespondenceSet(doc["p_cad"], doc["p_scan"], doc.get("weight"))
    sol = solve_rotation(c)
    R = sol.rotation
    Rs, s, t = solve_similarity(c)
    out = {"rotation": R.tolist(), "det": float(np.linalg.det(R)),
           "singular_values": sol.singular_values.tolist(),
           "reflection_corrected": bool(sol.d < 0),
           "residual": float(residual(c, R)),
           "similarity": {"rotation": Rs.tolist(), "scale": float(s), "translation": t.tolist()}}
    if "rotation_gt" in doc:
        from .geometry import rotation_angle_deg
        out["angle_error_deg"] = rotation_angle_deg(R, np.asarray(doc["rotation_gt"]))
    print(json.dumps(out, indent=1))
    return EXIT_OK


def cmd_build_store(args):
    from .evaluation import build_store

    store = build_store(dims=(args.dims,) * 3)
    store.save(args.out)
    print(f"stored {len(store)} descriptors in {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="cadalign", description="CAD-to-scan alignment harness")
    p.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-scenes", help="generate synthetic scenes")
    g.add_argument("--spec", help="scene spec JSON (SceneSpec fields, optional n_scenes)")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=None, help="number of scenes")
    g.add_argument("--save-frames", action="store_true", help="also write depth frames")
    g.set_defaults(func=cmd_gen_scenes)

    f = sub.add_parser("fuse", help="fuse depth frames into a TSDF grid")
    f.add_argument("--frames", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--voxel-size", type=float, default=0.03)
    f.add_argument("--trunc", type=float, default=0.15)
    f.add_argument("--origin", type=float, nargs=3)
    f.add_argument("--dims", type=int, nargs=3)
    f.set_defaults(func=cmd_fuse)

    a = sub.add_parser("align", help="align CAD models to scene crops")
    a.add_argument("--scene", required=True, help="scene or dataset directory")
    a.add_argument("--store", help="descriptor store directory (library store by default)")
    a.add_argument("--out", required=True)
    a.add_argument("--no-category-filter", action="store_true")
    a.add_argument("--translation", choices=["centroid", "center"], default="centroid")
    a.add_argument("--noc-sigma", type=float, default=0.0)
    a.add_argument("--mask-flip", type=float, default=0.0)
    a.add_argument("--center-jitter", type=float, default=0.0)
    a.set_defaults(func=cmd_align)

    e = sub.add_parser("eval", help="score alignments against ground truth")
    e.add_argument("--results", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out")
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time the alignment pipeline")
    b.add_argument("--sizes", default="small")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--frames", type=int, default=24)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("procrustes-check", help="solve a correspondence file")
    c.add_argument("--input", required=True)
    c.set_defaults(func=cmd_procrustes_check)

    s = sub.add_parser("build-store", help="descriptor store of the shape library")
    s.add_argument("--out", required=True)
    s.add_argument("--dims", type=int, default=32)
    s.set_defaults(func=cmd_build_store)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cadalign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"cadalign: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
