import numpy as np
import pytest

from cadalign.correspondence import align_object
from cadalign.evaluation import accept_alignment
from cadalign.geometry import Pose9DoF, matrix_to_quat, pose_bounding_box, rot_y
from cadalign.synth import (SHAPE_HALF, PlacementError, SceneSpec, generate_scene, load_scene,
                            perturb_crop, perturb_gt, render_scene_frames, save_scene,
                            scene_dirs, write_manifest)

FAST = dict(n_frames=8, image_size=(160, 120))


def explicit(shape_id, pose, **kw):
    return SceneSpec(room=(3.0, 2.0, 3.0), objects=[{"shape_id": shape_id, "pose": pose.to_json()}],
                     **{**FAST, **kw})


def test_determinism():
    a = generate_scene(SceneSpec(seed=11, **FAST))
    b = generate_scene(SceneSpec(seed=11, **FAST))
    assert np.array_equal(a.scan.data, b.scan.data)
    assert [o.pose for o in a.objects] == [o.pose for o in b.objects]
    for oa, ob in zip(a.objects, b.objects):
        assert np.array_equal(oa.crop.noc.grid.data, ob.crop.noc.grid.data)
        assert np.array_equal(oa.crop.mask.grid.data, ob.crop.mask.grid.data)


def test_single_box_noc_round_trip():
    pose = Pose9DoF((1.5, 0.4, 1.5))
    gt = generate_scene(explicit("cabinet_cube", pose))
    assert len(gt.objects) == 1
    crop = gt.objects[0].crop
    sel = crop.mask.selected()
    assert sel.sum() > 100
    world = crop.noc.grid.centers()[sel]
    err = np.linalg.norm(pose.apply(crop.noc.grid.data[sel]) - world, axis=1)
    assert err.max() <= crop.noc.grid.voxel_size


def test_masked_voxels_lie_on_the_object_surface():
    pose = Pose9DoF((1.5, 0.4, 1.5), matrix_to_quat(rot_y(30)))
    gt = generate_scene(explicit("chair_l", pose))
    crop = gt.objects[0].crop
    from cadalign.shapes import make_shape
    local = crop.noc.grid.data[crop.mask.selected()]
    assert np.all(make_shape("chair_l").unsigned_distance(local) <= 2.0 * gt.spec.voxel_size)


def test_fully_occluded_object_dropped():
    pose = Pose9DoF((1.5, 0.4, 1.5))
    occluder = {"center": [1.5, 0.6, 1.5], "extents": [1.6, 1.2, 1.6]}
    gt = generate_scene(explicit("ball", pose, occluders=[occluder]))
    assert gt.objects == [] and gt.dropped == ["0"]


def test_scene_constraints(small_scene):
    gt = small_scene
    X, H, Z = gt.spec.room
    assert 6 <= len(gt.objects) + len(gt.dropped) <= 10
    boxes = [o.box for o in gt.objects]
    for i, a in enumerate(boxes):
        for b in boxes[i + 1:]:
            assert a.iou(b) <= 0.3
    for o in gt.objects:
        sb = pose_bounding_box(o.pose, SHAPE_HALF)
        assert np.all(sb.lo >= [-1e-9, -1e-9, -1e-9]) and np.all(sb.hi <= [X, H, Z])
        assert np.all((o.pose.scale >= 0.5) & (o.pose.scale <= 2.0))


def test_gt_consistency_round_trip(small_scene):
    for o in small_scene.objects:
        assert accept_alignment(align_object(o.crop), o.category, o.pose, o.category, o.symmetry)


def test_placement_failure():
    with pytest.raises(PlacementError, match="max_iou"):
        generate_scene(SceneSpec(room=(1.0, 2.5, 1.0), n_objects=(10, 10), max_retries=20, **FAST))


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(depth_noise=-1)
    with pytest.raises(ValueError):
        SceneSpec(scale_range=(0, 1))
    with pytest.raises(ValueError):
        SceneSpec(shapes=("teapot",))


def test_spec_json_round_trip():
    spec = SceneSpec(seed=4, grid_dims=(64, 32, 48))
    back = SceneSpec.from_json(spec.to_json())
    assert back == spec
    assert back.room == pytest.approx((64 * 0.0468, 32 * 0.0468, 48 * 0.0468))


# --------------------------------------------------------------------------
# perturbation
# --------------------------------------------------------------------------

def test_perturb_zero_is_identity(small_scene):
    p = perturb_gt(small_scene)
    for a, b in zip(small_scene.objects, p.objects):
        assert np.array_equal(a.crop.noc.grid.data, b.crop.noc.grid.data)
        assert np.array_equal(a.crop.mask.grid.data, b.crop.mask.grid.data)
        assert np.array_equal(a.crop.center, b.crop.center)


def test_perturb_noc_noise_statistics(small_scene):
    p = perturb_gt(small_scene, noc_sigma=0.01, seed=3)
    res = []
    for a, b in zip(small_scene.objects, p.objects):
        clean = a.crop.noc.grid.data
        inner = np.all(np.abs(clean) < 0.45, axis=-1)  # away from the clamp
        res.append((b.crop.noc.grid.data - clean)[inner].ravel())
    res = np.concatenate(res)
    assert res.size >= 1e5
    assert abs(res.std() - 0.01) <= 0.001


def test_perturb_is_deterministic(small_scene):
    a = perturb_gt(small_scene, 0.01, 0.05, 0.1, seed=8)
    b = perturb_gt(small_scene, 0.01, 0.05, 0.1, seed=8)
    for x, y in zip(a.objects, b.objects):
        assert np.array_equal(x.crop.noc.grid.data, y.crop.noc.grid.data)
        assert np.array_equal(x.crop.center, y.crop.center)


def test_perturb_full_flip_inverts_mask(small_scene):
    crop = small_scene.objects[0].crop
    rng = np.random.default_rng(0)
    flipped = perturb_crop(crop, 0.0, 1.0, 0.0, rng)
    sup = crop.support.data
    assert np.array_equal(flipped.mask.grid.data[sup], 1.0 - crop.mask.grid.data[sup])
    assert np.array_equal(flipped.mask.grid.data[~sup], crop.mask.grid.data[~sup])
    from dataclasses import replace
    bare = replace(crop, support=None)
    full = perturb_crop(bare, 0.0, 1.0, 0.0, rng)
    assert np.array_equal(full.mask.grid.data, 1.0 - crop.mask.grid.data)


def test_perturb_center_jitter_bounded(small_scene):
    p = perturb_gt(small_scene, center_jitter=0.05, seed=1)
    for a, b in zip(small_scene.objects, p.objects):
        assert np.all(np.abs(b.crop.center - a.crop.center) <= 0.05)


def test_perturb_rejects_negative(small_scene):
    with pytest.raises(ValueError):
        perturb_gt(small_scene, noc_sigma=-0.1)


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path, small_scene):
    files = save_scene(small_scene, tmp_path / "s")
    write_manifest(tmp_path, [{"scene_id": small_scene.scene_id, "dir": "s", "files": files}])
    assert scene_dirs(tmp_path) == [tmp_path / "s"]
    back = load_scene(tmp_path / "s")
    assert back.scene_id == small_scene.scene_id and back.spec == small_scene.spec
    assert np.allclose(back.scan.data, small_scene.scan.data, atol=1e-6)
    for a, b in zip(small_scene.objects, back.objects):
        assert a.pose == b.pose and a.symmetry is b.symmetry and a.category == b.category
        assert np.array_equal(a.crop.mask.selected(), b.crop.mask.selected())


def test_render_scene_frames_reproduce_scan():
    from cadalign.fusion import empty_tsdf, integrate_frame
    from cadalign.synth import scan_grid_frame
    gt = generate_scene(SceneSpec(seed=5, n_frames=3, image_size=(80, 60)))
    dims, origin = scan_grid_frame(gt.spec)
    g = empty_tsdf(dims, origin, gt.spec.voxel_size, gt.spec.trunc)
    for f in render_scene_frames(gt):
        g = integrate_frame(g, f, gt.spec.trunc)
    assert np.array_equal(g.data, gt.scan.data)


def test_large_scene_memory():
    import tracemalloc
    spec = SceneSpec(grid_dims=(256, 64, 320), n_objects=(20, 20), n_frames=2,
                     image_size=(80, 60), seed=1)
    tracemalloc.start()
    gt = generate_scene(spec)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert gt.scan.dims == (256, 67, 320)
    assert peak < 4 * 2 ** 30
