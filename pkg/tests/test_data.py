import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posereg.data import (Annotation, AnnotationError, AugmentParams, SimilarityTransform, SyntheticSpec, augment,
                          crop_box, crop_normalize, from_crop, load_annotations, load_dataset, parse_annotation,
                          read_image, render_layers, synth_generate, warp, write_annotations, write_image,
                          write_synthetic)
from posereg.model import Pose


def record(n=2, **kw):
    rec = {"image": "a.png", "joints": list(range(2 * n)), "visibility": [1] * n,
           "center": [10.0, 12.0], "scale": 0.5}
    rec.update(kw)
    return json.dumps(rec)


def test_two_line_file(tmp_path):
    path = tmp_path / "ann.jsonl"
    path.write_text(record() + "\n\n" + record(3) + "\n")
    anns = load_annotations(path)
    assert len(anns) == 2 and anns[1].joints.shape == (3, 2)


def test_wrong_arity_names_the_line(tmp_path):
    path = tmp_path / "ann.jsonl"
    path.write_text(record() + "\n" + record(joints=[1, 2, 3]) + "\n")
    with pytest.raises(AnnotationError, match="line 2"):
        load_annotations(path)


@pytest.mark.parametrize("bad", [
    "not json", record(visibility=[1, 2]), record(scale=0), record(center=[1.0]),
    json.dumps({"joints": [1, 2]}),
])
def test_malformed_records(bad):
    with pytest.raises(AnnotationError):
        parse_annotation(bad, 7)


def test_joint_count_check():
    with pytest.raises(AnnotationError, match="expected 8"):
        parse_annotation(record(2), 1, num_joints=8)


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    anns = [Annotation(f"img/{i}.png", rng.random((5, 2)) * 100, rng.random(5) > 0.5, rng.random(2) * 50,
                       float(rng.uniform(0.2, 3))) for i in range(4)]
    path = tmp_path / "ann.jsonl"
    write_annotations(path, anns)
    back = load_annotations(path)
    for a, b in zip(anns, back):
        assert a.image == b.image and a.scale == b.scale
        assert np.array_equal(a.joints, b.joints) and np.array_equal(a.visibility, b.visibility)
        assert np.array_equal(a.center, b.center)


def test_crop_center_and_corner():
    ann = Annotation(None, [[100.0, 80.0], [100.0 - 50, 80.0 - 50]], [1, 1], [100.0, 80.0], 0.5)
    _, pose = crop_normalize(np.zeros((3, 200, 200)), ann, 16)
    assert np.allclose(pose.joints[0], [0.5, 0.5], atol=1e-15)
    assert np.allclose(pose.joints[1], [0.0, 0.0], atol=1e-15)


def test_crop_marks_outside_joints_invisible():
    ann = Annotation(None, [[100.0, 80.0], [300.0, 80.0]], [1, 1], [100.0, 80.0], 0.5)
    _, pose = crop_normalize(np.zeros((3, 200, 200)), ann, 16)
    assert pose.visibility.tolist() == [True, False]


def test_inverse_crop_recovers_pixels():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pix = rng.uniform(0, 300, size=(6, 2))
        ann = Annotation(None, pix, np.ones(6), rng.uniform(50, 250, 2), rng.uniform(0.3, 2))
        _, pose = crop_normalize(np.zeros((3, 8, 8)), ann, 8)
        assert np.abs(from_crop(pose.joints, crop_box(ann)) - pix).max() < 0.51


def test_crop_image_content_follows_joint():
    img = np.zeros((3, 100, 100))
    img[:, 37, 61] = 1.0                                  # pixel centre (61.5, 37.5)
    ann = Annotation(None, [[61.5, 37.5]], [1], [50.0, 50.0], 64 / 200)
    crop, pose = crop_normalize(img, ann, 64)
    j, i = np.unravel_index(crop[0].argmax(), crop[0].shape)
    back = from_crop([[(i + 0.5) / 64, (j + 0.5) / 64]], crop_box(ann))[0]
    assert np.abs(back - [61.5, 37.5]).max() < 0.51


def test_identity_augmentation():
    pose = Pose(np.random.default_rng(2).random((8, 2)))
    img = np.random.default_rng(3).random((3, 16, 16))
    out, p = warp(img, pose, SimilarityTransform(0.0, 1.0))
    assert np.abs(p.joints - pose.joints).max() < 1e-12
    assert np.allclose(out, img, atol=1e-12)


def test_quarter_turn_example():
    got = SimilarityTransform(90.0).apply([[0.75, 0.5]])[0]
    assert np.allclose(got, [0.5, 0.75], atol=1e-15)


def test_rotated_image_moves_with_joint():
    img = np.zeros((3, 32, 32))
    img[:, 15:17, 22:26] = 1.0                   # blob centred at (0.75, 0.5)
    pose = Pose([[0.75, 0.5]])
    out, p = warp(img, pose, SimilarityTransform(90.0))
    ys, xs = np.nonzero(out[0] > 0.5)
    centroid = [(xs.mean() + 0.5) / 32, (ys.mean() + 0.5) / 32]
    assert np.abs(np.array(centroid) - p.joints[0]).max() < 1.0 / 32


def test_augment_deterministic_under_seed():
    img = np.random.default_rng(4).random((3, 16, 16))
    pose = Pose(np.random.default_rng(5).random((4, 2)))
    a = augment(img, pose, AugmentParams(seed=9))
    b = augment(img, pose, AugmentParams(seed=9))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1].joints, b[1].joints)


def test_augment_params_validation():
    with pytest.raises(ValueError):
        augment(np.zeros((3, 4, 4)), Pose(np.zeros((1, 2))), AugmentParams(scale_range=(0, 1)))


@settings(max_examples=100, deadline=None)
@given(st.floats(-180, 180), st.floats(0.5, 2.0), st.integers(0, 2 ** 31))
def test_forward_inverse_consistency_and_visibility(angle, scale, seed):
    rng = np.random.default_rng(seed)
    joints = rng.uniform(-0.2, 1.2, size=(6, 2))
    vis = rng.random(6) > 0.3
    t = SimilarityTransform(angle, scale)
    assert np.abs(t.invert(t.apply(joints)) - joints).max() < 1e-9
    _, p = warp(np.zeros((3, 4, 4)), Pose(joints, visibility=vis), t)
    outside = np.any((p.joints < 0) | (p.joints > 1), axis=1)
    assert not np.any(p.visibility & outside)
    assert not np.any(p.visibility & ~vis)


def test_synth_empty_and_deterministic():
    assert synth_generate(SyntheticSpec(), 0) == []
    a, b = synth_generate(SyntheticSpec(seed=3), 3), synth_generate(SyntheticSpec(seed=3), 3)
    for (ia, pa), (ib, pb) in zip(a, b):
        assert np.array_equal(ia, ib) and np.array_equal(pa.joints, pb.joints)


def test_synth_blobs_sit_on_joints():
    spec = SyntheticSpec(seed=4)
    for img, pose in synth_generate(spec, 10):
        pix = pose.joints * spec.canvas
        layers = render_layers(spec, pix)
        for n, layer in enumerate(layers):
            j, i = np.unravel_index(layer.argmax(), layer.shape)
            assert np.abs(np.array([i + 0.5, j + 0.5]) - pix[n]).max() <= 1.0
            # the rendered image carries the joint's own colour at that pixel
            col = spec.colors[n]
            assert np.dot(img[:, j, i], col) / np.linalg.norm(col) > 0.5


def test_synth_rejects_infeasible_geometry():
    with pytest.raises(ValueError):
        synth_generate(SyntheticSpec(canvas=32), 1)
    with pytest.raises(ValueError):
        synth_generate(SyntheticSpec(blob_sigma=4.0), 1)


def test_image_io_and_dataset_round_trip(tmp_path):
    samples = synth_generate(SyntheticSpec(seed=5), 4)
    path = write_synthetic(tmp_path, samples, 64)
    loaded = load_dataset(path, 64, num_joints=8)
    for (img, pose), (limg, lpose) in zip(samples, loaded):
        assert np.abs(limg - img).max() <= 0.5 / 255 + 1e-12
        assert np.allclose(lpose.joints, pose.joints, atol=1e-12)
    write_image(tmp_path / "x.png", samples[0][0])
    assert read_image(tmp_path / "x.png").shape == (3, 64, 64)
