"""Scene-level alignment pipeline, the 20 cm / 20 deg / 20 % accuracy metric,
accuracy reports and a timing benchmark."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import shapes as shp
from .correspondence import align_object, estimate_scale
from .fusion import cad_unsigned_df, points_unsigned_df
from .geometry import CellType, Pose9DoF
from .retrieval import DescriptorStore, geometric_descriptor, nearest
from .symmetry import EVAL_STEP_DEG, SymmetryClass, sym_rotation_error_deg

MAX_TRANSLATION_M = 0.20
MAX_ROTATION_DEG = 20.0
MAX_SCALE_RATIO_ERR = 0.20
MATCH_RADIUS_M = 0.5

# reference runtimes (s) and grid sizes (x, y, z voxels; y up) per scene size
BENCH_SIZES = {
    "small": {"dims": (128, 48, 96), "objects": 7, "reference_s": 0.62},
    "medium": {"dims": (144, 64, 128), "objects": 16, "reference_s": 1.11},
    "large": {"dims": (256, 64, 320), "objects": 20, "reference_s": 2.60},
}


# --------------------------------------------------------------------------
# metric
# --------------------------------------------------------------------------

def alignment_errors(pred, gt, symmetry=SymmetryClass.NONE, step_deg=EVAL_STEP_DEG):
    """(translation m, symmetry-aware rotation deg, max per-axis scale ratio error)."""
    dt = float(np.linalg.norm(pred.translation - gt.translation))
    dr = sym_rotation_error_deg(pred.rotation, gt.rotation, symmetry, step_deg)
    ds = float(np.max(np.abs(pred.scale / gt.scale - 1.0)))
    return dt, dr, ds


def accept_alignment(pred_pose, pred_category, gt_pose, gt_category,
                     symmetry=SymmetryClass.NONE):
    """True when categories match and the pose is within 20 cm, 20 deg and 20 %."""
    if pred_category != gt_category:
        return False
    dt, dr, ds = alignment_errors(pred_pose, gt_pose, symmetry)
    return dt <= MAX_TRANSLATION_M and dr <= MAX_ROTATION_DEG and ds <= MAX_SCALE_RATIO_ERR


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

@dataclass
class ObjectResult:
    object_id: str
    cad_id: str
    category: str
    pose: Pose9DoF
    timings_ms: dict

    def to_json(self):
        return {"object_id": self.object_id, "cad_id": self.cad_id,
                "category": self.category, "pose": self.pose.to_json(),
                "timings_ms": self.timings_ms}

    @classmethod
    def from_json(cls, obj):
        return cls(str(obj["object_id"]), obj["cad_id"], obj["category"],
                   Pose9DoF.from_json(obj["pose"]), dict(obj["timings_ms"]))


@dataclass
class AlignmentResult:
    """Per-object predictions of one scene; failed objects land in ``errors``."""

    scene_id: str
    objects: list = field(default_factory=list)
    errors: list = field(default_factory=list)  # [{"object_id", "error"}]
    total_ms: float = 0.0

    def to_json(self):
        return {"scene_id": self.scene_id, "total_ms": self.total_ms,
                "objects": [o.to_json() for o in self.objects], "errors": self.errors}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["scene_id"], [ObjectResult.from_json(o) for o in obj["objects"]],
                   list(obj.get("errors", [])), float(obj.get("total_ms", 0.0)))


def _ms(t0):
    return max(0.0, (time.perf_counter() - t0) * 1e3)


def scan_descriptor(crop):
    """Descriptor of the masked NOC points, viewed as a partial CAD surface."""
    pts = crop.noc.grid.data[crop.mask.selected()]
    return geometric_descriptor(points_unsigned_df(pts))


def align_scene(scan, crops, store, scene_id="scene", category_filter=True, pool=None,
                translation="centroid"):
    """Align every crop and retrieve a CAD model for it.

    Parameters
    ----------
    scan : VoxelGrid or None
        Fused TSDF of the scene (checked for type only; the crops carry the
        correspondences).
    crops : list of ObjectCrop
    store : DescriptorStore
    category_filter : bool
        Restrict retrieval to the crop's category when it has one.
    pool : iterable of str, optional
        Allowed CAD ids (per-scene model pool).

    Errors raised while handling one crop are recorded and the remaining
    crops are still processed.
    """
    if not crops:
        raise ValueError("align_scene needs at least one crop")
    if scan is not None and scan.cell_type is not CellType.TSDF:
        raise ValueError("scan must be a TSDF grid")
    t_scene = time.perf_counter()
    result = AlignmentResult(scene_id)
    for crop in crops:
        timings = {}
        try:
            t0 = time.perf_counter()
            if crop.scale is None:
                crop = replace(crop, scale=estimate_scale(crop))
            timings["scale"] = _ms(t0)

            t0 = time.perf_counter()
            pose = align_object(crop, translation=translation)
            timings["alignment"] = _ms(t0)

            t0 = time.perf_counter()
            cat = crop.category if category_filter else None
            cad_id, _ = nearest(store, scan_descriptor(crop), 1, category=cat, pool=pool)[0]
            timings["retrieval"] = _ms(t0)
        except Exception as exc:  # isolate per-object failures
            result.errors.append({"object_id": crop.object_id,
                                  "error": f"{type(exc).__name__}: {exc}"})
            continue
        result.objects.append(ObjectResult(crop.object_id, cad_id, store.category_of(cad_id),
                                           pose, timings))
    result.total_ms = _ms(t_scene)
    return result


def build_store(shape_ids=None, dims=(32, 32, 32)):
    """Descriptor store over the library shapes (id = shape id)."""
    store = DescriptorStore()
    for sid in sorted(shape_ids or shp.LIBRARY):
        df = cad_unsigned_df(shp.make_shape(sid), dims)
        store.add(sid, shp.shape_category(sid), geometric_descriptor(df))
    return store


# --------------------------------------------------------------------------
# accuracy report
# --------------------------------------------------------------------------

@dataclass
class AccuracyReport:
    per_category: dict  # category -> {"accepted", "total", "accuracy"}
    class_average: float
    instance_average: float
    accepted: int
    total: int
    unmatched_predictions: int = 0
    records: list = field(default_factory=list)

    def to_json(self):
        return {"per_category": self.per_category, "class_average": self.class_average,
                "instance_average": self.instance_average, "accepted": self.accepted,
                "total": self.total, "unmatched_predictions": self.unmatched_predictions,
                "records": self.records}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "accepted", "total", "accuracy"])
        for cat in sorted(self.per_category):
            e = self.per_category[cat]
            w.writerow([cat, e["accepted"], e["total"], f"{e['accuracy']:.4f}"])
        w.writerow(["class_average", "", "", f"{self.class_average:.4f}"])
        w.writerow(["instance_average", self.accepted, self.total,
                    f"{self.instance_average:.4f}"])
        return buf.getvalue()


def _match(preds, gts, radius):
    """Greedy one-to-one matching by center distance, ties by ids."""
    cand = []
    for p in preds:
        for g in gts:
            d = float(np.linalg.norm(p.pose.translation - g.pose.translation))
            if d <= radius:
                cand.append((d, p.object_id, g.object_id))
    cand.sort()
    used_p, used_g, pairs = set(), set(), {}
    for _, pid, gid in cand:
        if pid in used_p or gid in used_g:
            continue
        used_p.add(pid)
        used_g.add(gid)
        pairs[gid] = pid
    return pairs


def evaluate(results, gts, match_radius=MATCH_RADIUS_M):
    """Accuracy of predicted alignments against scene ground truth.

    Every ground-truth object counts once. It is accepted when matched to a
    prediction that passes :func:`accept_alignment`; unmatched ground truth
    counts as a failure. Predictions left unmatched are counted separately.
    """
    by_scene = {r.scene_id: r for r in results}
    gt_by_scene = {g.scene_id: g for g in gts}
    if len(by_scene) != len(results) or len(gt_by_scene) != len(gts):
        raise ValueError("duplicate scene ids")
    if set(by_scene) != set(gt_by_scene):
        missing = sorted(set(gt_by_scene) ^ set(by_scene))
        raise ValueError(f"result and ground-truth scene sets differ: {missing}")

    counts = {}
    records = []
    unmatched = 0
    for sid in sorted(gt_by_scene):
        gt, res = gt_by_scene[sid], by_scene[sid]
        ids = [o.object_id for o in res.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate predicted object ids in scene {sid}")
        preds = {o.object_id: o for o in res.objects}
        pairs = _match(res.objects, gt.objects, match_radius)
        unmatched += len(preds) - len(pairs)
        for g in sorted(gt.objects, key=lambda o: o.object_id):
            acc, tot = counts.get(g.category, (0, 0))
            rec = {"scene_id": sid, "gt_object": g.object_id, "category": g.category,
                   "pred_object": pairs.get(g.object_id), "accepted": False}
            if g.object_id in pairs:
                p = preds[pairs[g.object_id]]
                dt, dr, ds = alignment_errors(p.pose, g.pose, g.symmetry)
                rec.update(translation_err_m=dt, rotation_err_deg=dr, scale_err=ds,
                           pred_category=p.category)
                rec["accepted"] = bool(accept_alignment(p.pose, p.category, g.pose,
                                                        g.category, g.symmetry))
            counts[g.category] = (acc + int(rec["accepted"]), tot + 1)
            records.append(rec)

    per_cat = {c: {"accepted": a, "total": t, "accuracy": 100.0 * a / t}
               for c, (a, t) in sorted(counts.items())}
    accepted = sum(a for a, _ in counts.values())
    total = sum(t for _, t in counts.values())
    class_avg = float(np.mean([e["accuracy"] for e in per_cat.values()])) if per_cat else 0.0
    inst_avg = 100.0 * accepted / total if total else 0.0
    return AccuracyReport(per_cat, class_avg, inst_avg, accepted, total, unmatched, records)


# --------------------------------------------------------------------------
# benchmark
# --------------------------------------------------------------------------

def bench_scene_spec(size, seed=0, n_frames=24):
    from .synth import SceneSpec

    cfg = BENCH_SIZES[size]
    n = cfg["objects"]
    return SceneSpec(seed=seed, grid_dims=cfg["dims"], n_objects=(n, n), n_frames=n_frames)


def bench(sizes=("small",), seed=0, repeats=3, n_frames=24, store=None):
    """Time the alignment pipeline on generated scenes of the given sizes.

    Scene generation is not timed. Reported seconds are the best of
    ``repeats`` runs of :func:`align_scene`, next to the reference runtime
    (which includes network inference on a GPU and is context only).
    """
    from .synth import generate_scene

    store = store or build_store()
    rows = []
    for size in sizes:
        if size not in BENCH_SIZES:
            raise ValueError(f"unknown scene size {size!r}; choose from {sorted(BENCH_SIZES)}")
        gt = generate_scene(bench_scene_spec(size, seed, n_frames))
        best = np.inf
        res = None
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            res = align_scene(gt.scan, gt.crops(), store, gt.scene_id)
            best = min(best, time.perf_counter() - t0)
        rows.append({"size": size, "dims": list(BENCH_SIZES[size]["dims"]),
                     "objects": len(gt.objects), "aligned": len(res.objects),
                     "errors": len(res.errors), "seconds": best,
                     "reference_seconds": BENCH_SIZES[size]["reference_s"]})
    return rows


def format_bench(rows):
    lines = [f"{'size':<8}{'dims':<16}{'objects':>8}{'ours (s)':>10}{'ref (s)':>9}"]
    for r in rows:
        dims = "x".join(str(d) for d in r["dims"])
        lines.append(f"{r['size']:<8}{dims:<16}{r['objects']:>8}{r['seconds']:>10.3f}"
                     f"{r['reference_seconds']:>9.2f}")
    lines.append("reference times include GPU network inference; not directly comparable")
    return "\n".join(lines)


def dump_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=1)
