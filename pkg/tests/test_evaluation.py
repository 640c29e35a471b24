import json
from dataclasses import replace

import numpy as np
import pytest

from cadalign.correspondence import with_mask
from cadalign.evaluation import (BENCH_SIZES, AlignmentResult, ObjectResult, accept_alignment,
                                 align_scene, alignment_errors, bench, evaluate, format_bench)
from cadalign.geometry import Pose9DoF, matrix_to_quat, random_rotation, rot_y
from cadalign.symmetry import SymmetryClass, symmetry_group
from cadalign.synth import SceneGroundTruth, SceneObject


def pose(t=(0, 0, 0), R=np.eye(3), s=(1, 1, 1)):
    return Pose9DoF(t, matrix_to_quat(R), s)


# --------------------------------------------------------------------------
# acceptance metric
# --------------------------------------------------------------------------

def test_accept_examples():
    gt = pose((1, 2, 3), rot_y(30), (1, 2, 1))
    assert accept_alignment(gt, "a", gt, "a")
    off = pose((1.25, 2, 3), rot_y(30), (1, 2, 1))
    assert not accept_alignment(off, "a", gt, "a")
    turned = pose((1, 2, 3), rot_y(30) @ rot_y(90), (1, 2, 1))
    assert accept_alignment(turned, "a", gt, "a", SymmetryClass.FOUR_FOLD)
    assert not accept_alignment(turned, "a", gt, "a", SymmetryClass.NONE)
    assert not accept_alignment(gt, "b", gt, "a")


def test_accept_thresholds_inclusive_and_scale_max_axis():
    gt = pose()
    assert accept_alignment(pose((0.2, 0, 0)), "a", gt, "a")
    assert not accept_alignment(pose((0.2001, 0, 0)), "a", gt, "a")
    assert accept_alignment(pose(R=rot_y(19.9)), "a", gt, "a")
    assert not accept_alignment(pose(R=rot_y(20.1)), "a", gt, "a")
    assert accept_alignment(pose(s=(1.2, 0.8, 1.0)), "a", gt, "a")
    assert not accept_alignment(pose(s=(1.0, 1.0, 1.21)), "a", gt, "a")
    assert not accept_alignment(pose(s=(1.0, 0.79, 1.0)), "a", gt, "a")


@pytest.mark.parametrize("s", list(SymmetryClass))
def test_accept_invariant_under_group(rng, s):
    G = symmetry_group(s, 1.0)
    for _ in range(50):
        R = random_rotation(rng)
        gt = pose(rng.normal(size=3), R, rng.uniform(0.5, 2, 3))
        pred = pose(gt.translation + rng.normal(0, 0.1, 3),
                    R @ rot_y(rng.uniform(-30, 30)), gt.scale * rng.uniform(0.85, 1.15, 3))
        g = G[rng.integers(len(G))]
        gt2 = pose(gt.translation, R @ g, gt.scale)
        assert accept_alignment(pred, "c", gt, "c", s) == accept_alignment(pred, "c", gt2, "c", s)


def test_alignment_errors_values():
    dt, dr, ds = alignment_errors(pose((3, 4, 0), rot_y(10), (1.1, 1, 1)), pose())
    assert dt == pytest.approx(5.0) and dr == pytest.approx(10.0) and ds == pytest.approx(0.1)


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

def test_align_scene_zero_noise(small_scene, library_store):
    res = align_scene(small_scene.scan, small_scene.crops(), library_store, small_scene.scene_id)
    assert len(res.objects) == len(small_scene.objects) and res.errors == []
    rep = evaluate([res], [small_scene])
    assert rep.instance_average == 100.0 and rep.class_average == 100.0
    for o in res.objects:
        assert all(v >= 0 for v in o.timings_ms.values())
        assert set(o.timings_ms) == {"scale", "alignment", "retrieval"}
    assert res.total_ms >= 0


def test_align_scene_deterministic(small_scene, library_store):
    a = align_scene(small_scene.scan, small_scene.crops(), library_store)
    b = align_scene(small_scene.scan, small_scene.crops(), library_store)
    assert [o.pose for o in a.objects] == [o.pose for o in b.objects]
    assert [o.cad_id for o in a.objects] == [o.cad_id for o in b.objects]


def test_align_scene_isolates_errors(small_scene, library_store):
    crops = small_scene.crops()[:8]
    bad = with_mask(crops[2], np.zeros(crops[2].mask.grid.dims))
    crops = crops[:2] + [bad] + crops[3:]
    res = align_scene(small_scene.scan, crops, library_store)
    assert len(res.objects) == len(crops) - 1 and len(res.errors) == 1
    assert res.errors[0]["object_id"] == bad.object_id
    assert "TooFewMasked" in res.errors[0]["error"]


def test_align_scene_preconditions(small_scene, library_store):
    with pytest.raises(ValueError):
        align_scene(small_scene.scan, [], library_store)


def test_align_scene_estimates_missing_scale(small_scene, library_store):
    crops = [replace(c, scale=None) for c in small_scene.crops()]
    res = align_scene(small_scene.scan, crops, library_store, small_scene.scene_id)
    assert evaluate([res], [small_scene]).instance_average == 100.0


def test_align_scene_pool_filter(small_scene, library_store):
    res = align_scene(small_scene.scan, small_scene.crops(), library_store,
                      category_filter=False, pool=["ball"])
    assert {o.cad_id for o in res.objects} == {"ball"}


def test_result_json_round_trip(small_scene, library_store):
    res = align_scene(small_scene.scan, small_scene.crops(), library_store, small_scene.scene_id)
    back = AlignmentResult.from_json(json.loads(json.dumps(res.to_json())))
    assert back.scene_id == res.scene_id
    assert [o.pose for o in back.objects] == [o.pose for o in res.objects]


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------

def fixture_scene(cats, sid="s0"):
    objs = []
    for k, c in enumerate(cats):
        p = pose((2.0 * k, 0, 0))
        objs.append(SceneObject(str(k), "x", c, p, SymmetryClass.NONE, None))
    return SceneGroundTruth(sid, None, objs, None)


def exact_result(gt, bad=()):
    objs = []
    for o in gt.objects:
        t = o.pose.translation + (0.3 if o.object_id in bad else 0.0)
        objs.append(ObjectResult(o.object_id, "cad", o.category, pose(t), {}))
    return AlignmentResult(gt.scene_id, objs)


def test_evaluate_all_exact():
    gt = fixture_scene(["a", "b", "a"])
    rep = evaluate([exact_result(gt)], [gt])
    assert rep.instance_average == 100 and rep.class_average == 100
    assert all(e["accuracy"] == 100 for e in rep.per_category.values())


def test_evaluate_half_perturbed():
    gt = fixture_scene(["a"] * 10)
    rep = evaluate([exact_result(gt, bad={"0", "2", "4", "6", "8"})], [gt])
    assert rep.instance_average == pytest.approx(50.0)


def test_evaluate_class_average_hand_computed():
    gt = fixture_scene(["A", "A", "B", "B"])
    rep = evaluate([exact_result(gt, bad={"2", "3"})], [gt])
    assert rep.per_category["A"]["accuracy"] == 100 and rep.per_category["B"]["accuracy"] == 0
    assert rep.class_average == pytest.approx(50.0) and rep.instance_average == pytest.approx(50.0)


def test_evaluate_class_average_unweighted():
    gt = fixture_scene(["A", "A", "A", "B"])
    rep = evaluate([exact_result(gt, bad={"3"})], [gt])
    assert rep.class_average == pytest.approx(50.0)
    assert rep.instance_average == pytest.approx(75.0)


def test_evaluate_permutation_invariant(rng):
    gts = [fixture_scene(["a", "b", "c", "a"], f"s{i}") for i in range(3)]
    results = [exact_result(g, bad={"1"}) for g in gts]
    ref = evaluate(results, gts).to_json()
    for _ in range(5):
        shuffled = []
        for r in rng.permutation(len(results)):
            res = results[r]
            objs = [res.objects[i] for i in rng.permutation(len(res.objects))]
            shuffled.append(AlignmentResult(res.scene_id, objs))
        gts_perm = [gts[i] for i in rng.permutation(len(gts))]
        assert evaluate(shuffled, gts_perm).to_json() == ref


def test_evaluate_unmatched_and_missing():
    gt = fixture_scene(["a", "a"])
    res = exact_result(gt)
    res.objects = res.objects[:1] + [ObjectResult("9", "cad", "a", pose((50, 0, 0)), {})]
    rep = evaluate([res], [gt])
    assert rep.accepted == 1 and rep.total == 2 and rep.unmatched_predictions == 1
    assert 0 <= rep.instance_average <= 100


def test_evaluate_one_to_one_matching():
    gt = fixture_scene(["a", "a"])
    # two predictions both near GT 0: only one can claim it
    objs = [ObjectResult("p", "cad", "a", pose((0.05, 0, 0)), {}),
            ObjectResult("q", "cad", "a", pose((0.0, 0, 0)), {})]
    rep = evaluate([AlignmentResult("s0", objs)], [gt])
    assert rep.accepted == 1 and rep.unmatched_predictions == 1
    assert rep.records[0]["pred_object"] == "q"


def test_evaluate_category_mismatch_fails():
    gt = fixture_scene(["a"])
    res = AlignmentResult("s0", [ObjectResult("0", "cad", "b", pose(), {})])
    assert evaluate([res], [gt]).accepted == 0


def test_evaluate_mismatched_scenes():
    with pytest.raises(ValueError):
        evaluate([AlignmentResult("x")], [fixture_scene(["a"], "y")])


def test_report_csv():
    gt = fixture_scene(["A", "B"])
    csv = evaluate([exact_result(gt)], [gt]).to_csv().splitlines()
    assert csv[0] == "category,accepted,total,accuracy"
    assert csv[-1] == "instance_average,2,2,100.0000"


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

def test_bench_reference_table():
    assert BENCH_SIZES["small"]["reference_s"] == 0.62
    assert BENCH_SIZES["medium"]["reference_s"] == 1.11
    assert BENCH_SIZES["large"]["reference_s"] == 2.60
    assert BENCH_SIZES["small"]["objects"] == 7
    # x, y (up), z: the 128 x 96 footprint with 48 voxels of height
    assert BENCH_SIZES["small"]["dims"] == (128, 48, 96)


def test_bench_rows(library_store):
    rows = bench(["small"], repeats=1, n_frames=6, store=library_store)
    assert rows[0]["objects"] >= 1 and rows[0]["seconds"] > 0
    assert "0.62" in format_bench(rows)
    with pytest.raises(ValueError):
        bench(["huge"])
