import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelfuse import tensor as T
from skelfuse.errors import ShapeError, UsageError
from skelfuse.graph import default_template
from skelfuse.rng import Rng
from skelfuse.stroi import (
    JointTrack,
    StRoiGrid,
    apply_joint_weights,
    assemble_stroi,
    compute_channel_stats,
    crop_patch,
    jittered_sample_indices,
    map_vertex_weights_to_parts,
    preprocess_for_net,
    resize_bilinear,
    temporal_sample_indices,
    weight_grid_batch,
)

F = np.float32


# ------------------------------------------------------------ sampling


def test_sample_indices_bin_centers():
    assert temporal_sample_indices(10, 5) == [1, 3, 5, 7, 9]


def test_sample_indices_identity():
    assert temporal_sample_indices(5, 5) == [0, 1, 2, 3, 4]


def test_sample_indices_short_sequence_clamps():
    assert temporal_sample_indices(3, 5) == [0, 0, 1, 2, 2]


def test_sample_indices_rejects_bad_args():
    with pytest.raises(UsageError):
        temporal_sample_indices(0, 5)


@given(st.integers(1, 200), st.integers(1, 40))
@settings(max_examples=60, deadline=None)
def test_sample_indices_monotone_in_range_distinct(total, samples):
    idx = temporal_sample_indices(total, samples)
    assert len(idx) == samples
    assert all(0 <= i < total for i in idx)
    assert all(a <= b for a, b in zip(idx, idx[1:]))
    if total >= samples:
        assert len(set(idx)) == samples


@given(st.integers(1, 100), st.integers(1, 20), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_jittered_indices_stay_in_their_bins(total, samples, seed):
    idx = jittered_sample_indices(total, samples, Rng(seed))
    assert len(idx) == samples
    for l, i in enumerate(idx):
        lo = (l * total) // samples
        hi = max(((l + 1) * total) // samples, lo + 1)
        assert lo <= i < max(hi, lo + 1)
        assert 0 <= i < total


# ------------------------------------------------------------ cropping


def test_crop_patch_interior_window():
    frame = np.arange(100 * 100 * 3, dtype=np.float32).reshape(100, 100, 3)
    out = crop_patch(frame, (50, 50), 48)
    assert out.shape == (48, 48, 3)
    # rows/cols 26..73 inclusive
    assert np.array_equal(out, frame[26:74, 26:74])


def test_crop_patch_corner_zero_margins():
    frame = np.full((64, 64, 3), 255, dtype=np.uint8)
    out = crop_patch(frame, (0, 0), 48)
    assert not out[:24, :, :].any()       # top margin
    assert not out[:, :24, :].any()       # left margin
    assert np.all(out[24:, 24:, :] == 1.0)


def test_crop_patch_constant_frame():
    frame = np.full((60, 60, 3), 255, dtype=np.uint8)
    out = crop_patch(frame, (30, 30), 16)
    assert np.all(out == 1.0)


def test_crop_patch_zero_confidence():
    frame = np.full((60, 60, 3), 255, dtype=np.uint8)
    assert not crop_patch(frame, (30, 30), 16, confidence=0.0).any()


# ------------------------------------------------------------ assembly


def _solid_track(t, m, x, y):
    pix = np.zeros((t, m, 2), dtype=F)
    pix[:, :, 0] = x
    pix[:, :, 1] = y
    return JointTrack(pixels=pix, confidence=np.ones((t, m), dtype=F))


def test_assemble_paper_geometry_sizes():
    tpl = default_template()
    frames = np.zeros((6, 520, 520, 3), dtype=np.uint8)
    track = _solid_track(6, tpl.joint_count, 260, 260)
    g96 = assemble_stroi(frames, track, tpl, k_roi=5, l_samples=5, patch=96)
    assert g96.image.shape == (3, 480, 480)
    g48 = assemble_stroi(frames, track, tpl, k_roi=5, l_samples=5, patch=48)
    assert g48.image.shape == (3, 240, 240)


def test_assemble_block_placement_bit_exact():
    tpl = default_template()
    t, p, l = 7, 8, 5
    frames = np.zeros((t, 96, 96, 3), dtype=np.uint8)
    # give every part joint its own greyscale sentinel at a distinct spot
    track_pix = np.zeros((t, tpl.joint_count, 2), dtype=F)
    sentinels = {}
    for j, (_, joint) in enumerate(tpl.parts):
        x, y = 12 + 14 * j, 40
        track_pix[:, joint] = (x, y)
        value = 40 + 20 * j
        frames[:, y - p // 2:y + p // 2, x - p // 2:x + p // 2] = value
        sentinels[j] = value
    track = JointTrack(pixels=track_pix, confidence=np.ones((t, tpl.joint_count), dtype=F))
    grid = assemble_stroi(frames, track, tpl, k_roi=5, l_samples=l, patch=p)
    for j, value in sentinels.items():
        block = grid.image[:, j * p:(j + 1) * p, :]
        assert np.all(block == F(value) / F(255.0))


def test_assemble_two_subject_layout_golden():
    tpl = default_template()
    t, p, l = 4, 8, 5
    m = tpl.joint_count
    # subject 1 sees a solid red frame, subject 2 a solid blue frame region
    frames = np.zeros((t, 96, 96, 3), dtype=np.uint8)
    frames[:, :, :48] = (200, 0, 0)
    frames[:, :, 48:] = (0, 0, 200)
    track1 = _solid_track(t, m, 24, 48)
    track2 = _solid_track(t, m, 72, 48)
    grid = assemble_stroi(frames, [track1, track2], tpl, k_roi=5, l_samples=l, patch=p)
    assert grid.subject_count == 2
    assert grid.image.shape == (3, 5 * p, 5 * p)
    half = grid.image.shape[2] // 2
    red, blue = F(200) / F(255), F(200) / F(255)
    assert np.all(grid.image[0, :, :half] == red)
    assert not grid.image[2, :, :half].any()
    assert np.all(grid.image[2, :, half:] == blue)
    assert not grid.image[0, :, half:].any()


def test_assemble_missing_second_subject_zero_half():
    tpl = default_template()
    frames = np.full((3, 64, 64, 3), 255, dtype=np.uint8)
    track = _solid_track(3, tpl.joint_count, 32, 32)
    # single-subject grid fills the full width
    grid = assemble_stroi(frames, track, tpl, k_roi=5, l_samples=5, patch=8)
    assert grid.image.all()
    # two-subject layout with the second performer absent: right half black
    duo = assemble_stroi(frames, track, tpl, k_roi=5, l_samples=5, patch=8,
                         subjects=2)
    half = duo.image.shape[2] // 2
    assert duo.image[:, :, :half].all()
    assert not duo.image[:, :, half:].any()
    assert duo.subject_count == 2


def test_assemble_rejects_k_mismatch():
    tpl = default_template()
    frames = np.zeros((2, 32, 32, 3), dtype=np.uint8)
    with pytest.raises(UsageError):
        assemble_stroi(frames, _solid_track(2, tpl.joint_count, 16, 16), tpl,
                       k_roi=4, l_samples=5, patch=8)


# ------------------------------------------------------------ weighting


def make_grid(k=5, l=5, p=8, seed=21):
    img = Rng(seed).uniform(0.0, 1.0, (3, k * p, l * p))
    return StRoiGrid(image=img, k_roi=k, l_samples=l, patch=p)


def test_map_weights_identity():
    tpl = default_template()
    out = map_vertex_weights_to_parts(np.ones(tpl.joint_count, dtype=F), tpl)
    assert out.tolist() == [1.0] * 5


def test_map_weights_division_by_max():
    tpl = default_template()
    w = np.full(tpl.joint_count, 2.0, dtype=F)
    w[7] = 4.0  # left hand
    out = map_vertex_weights_to_parts(w, tpl)
    assert out.tolist() == [0.5, 1.0, 0.5, 0.5, 0.5]


def test_map_weights_zero_fallback():
    tpl = default_template()
    out = map_vertex_weights_to_parts(np.zeros(tpl.joint_count, dtype=F), tpl)
    assert out.tolist() == [1.0] * 5


def test_apply_identity_weights_bit_exact():
    grid = make_grid()
    out = apply_joint_weights(grid, np.ones(5, dtype=F))
    assert out.image.tobytes() == grid.image.tobytes()


def test_apply_zero_weight_annihilates_block():
    grid = make_grid()
    w = np.ones(5, dtype=F)
    w[2] = 0.0
    out = apply_joint_weights(grid, w)
    p = grid.patch
    assert not out.image[:, 2 * p:3 * p, :].any()
    assert np.array_equal(out.image[:, :2 * p, :], grid.image[:, :2 * p, :])


def test_apply_halves_block_zero():
    grid = make_grid()
    w = np.ones(5, dtype=F)
    w[0] = 0.5
    out = apply_joint_weights(grid, w)
    p = grid.patch
    assert np.array_equal(out.image[:, :p, :], grid.image[:, :p, :] * F(0.5))


def test_apply_rejects_negative_weight():
    with pytest.raises(UsageError):
        apply_joint_weights(make_grid(), np.array([1, 1, -0.1, 1, 1], dtype=F))


def test_apply_linearity():
    a, b = make_grid(seed=1), make_grid(seed=2)
    w = Rng(3).uniform(0.0, 1.0, 5)
    summed = StRoiGrid(image=a.image + b.image, k_roi=5, l_samples=5, patch=8)
    lhs = apply_joint_weights(summed, w).image
    rhs = apply_joint_weights(a, w).image + apply_joint_weights(b, w).image
    assert np.abs(lhs - rhs).max() < 1e-6
    lam = F(3.0)
    scaled = StRoiGrid(image=lam * a.image, k_roi=5, l_samples=5, patch=8)
    assert np.abs(apply_joint_weights(scaled, w).image
                  - lam * apply_joint_weights(a, w).image).max() < 1e-6


def test_apply_two_subject_weights_per_half():
    grid = make_grid()
    grid.subject_count = 2
    w = np.ones((2, 5), dtype=F)
    w[1, :] = 0.0
    out = apply_joint_weights(grid, w)
    half = grid.image.shape[2] // 2
    assert np.array_equal(out.image[:, :, :half], grid.image[:, :, :half])
    assert not out.image[:, :, half:].any()


def test_weight_grid_batch_matches_numpy_path_and_grads():
    grid = make_grid(seed=9)
    w = Rng(10).uniform(0.1, 1.0, (1, 5))
    taped = weight_grid_batch(T.Tensor(grid.image[None]), T.Tensor(w), grid.patch)
    ref = apply_joint_weights(grid, w[0]).image
    assert np.abs(taped.data[0] - ref).max() < 1e-6

    grids_const = T.Tensor(grid.image[None])

    def fn(t):
        return weight_grid_batch(grids_const, t, grid.patch)

    assert T.finite_diff_check(fn, T.Tensor(w)) < 1e-3


def test_soft_weighting_gradient_reaches_weights():
    grid = make_grid(seed=11)
    w = T.Tensor(Rng(12).uniform(0.2, 1.0, (1, 5)), requires_grad=True)
    with T.Tape() as tape:
        out = weight_grid_batch(T.Tensor(grid.image[None]), w, grid.patch)
        loss = T.reduce_mean(T.square(out), axes=(0, 1, 2, 3))
        T.backward(loss, tape)
    assert w.grad is not None and np.abs(w.grad).max() > 0


# ------------------------------------------------------------ preprocessing


def test_resize_same_size_identity():
    img = Rng(13).uniform(0, 1, (3, 16, 16))
    out = resize_bilinear(img, 16)
    assert np.abs(out - img).max() < 1e-6


def test_resize_checkerboard_average():
    img = np.zeros((3, 2, 2), dtype=F)
    img[:, 0, 0] = 1.0
    img[:, 1, 1] = 1.0
    out = resize_bilinear(img, 1)
    assert np.allclose(out, 0.5, atol=1e-6)


def test_preprocess_constant_image():
    img = np.full((3, 8, 8), 0.25, dtype=F)
    mean = np.array([0.5, 0.5, 0.5], dtype=F)
    std = np.array([0.1, 0.2, 0.4], dtype=F)
    out = preprocess_for_net(img, 4, stats=(mean, std))
    for c, expect in enumerate((0.25 - 0.5) / np.array([0.1, 0.2, 0.4])):
        assert np.allclose(out[c], expect, atol=1e-5)


def test_preprocess_tensor_path_matches_numpy():
    img = Rng(14).uniform(0, 1, (3, 12, 10))
    stats = (np.array([0.4, 0.4, 0.4], dtype=F), np.array([0.3, 0.3, 0.3], dtype=F))
    a = preprocess_for_net(img, 6, stats=stats)
    b = preprocess_for_net(T.Tensor(img), 6, stats=stats).data
    assert np.abs(a - b).max() < 1e-6


def test_channel_stats_shapes():
    imgs = Rng(15).uniform(0, 1, (10, 3, 6, 6))
    mean, std = compute_channel_stats(imgs)
    assert mean.shape == (3,) and std.shape == (3,)
    assert np.all(std >= 1e-6)
