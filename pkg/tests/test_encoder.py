import math

import numpy as np
import pytest

from gpa3d.encoder import (
    N_STATS, BevGrid, EncoderParams, encode, encode_backward, extract_sequences, project_boxes, rasterize,
    scatter_sequence_grads,
)
from gpa3d.geometry import Box3D, Scene, group_index

from oracles import central_diff, grad_rel_err

UNIT = BevGrid(x_range=(0.0, 8.0), y_range=(0.0, 8.0), cell_size=1.0)


def sparse_stats(rng, h, w, fill=0.4):
    s = rng.normal(0, 1, (h, w, N_STATS))
    s[rng.uniform(size=(h, w)) > fill] = 0.0
    return s


# -- grid and rasterisation ------------------------------------------------

def test_grid_shape_defaults():
    g = BevGrid()
    assert (g.H, g.W) == (64, 64)
    with pytest.raises(ValueError):
        BevGrid(cell_size=0.0)
    with pytest.raises(ValueError):
        BevGrid(x_range=(0.0, 0.0))


def test_rasterize_empty():
    assert not rasterize(Scene("e", np.zeros((0, 4))), UNIT).any()


def test_rasterize_single_point_at_cell_center():
    stats = rasterize(np.array([[2.5, 3.5, 1.0, 0.5]]), UNIT)
    np.testing.assert_allclose(stats[3, 2], [math.log(2), 1, 1, 0.5, 0, 0, 0, 1], atol=1e-12)
    stats[3, 2] = 0
    assert not stats.any()


def test_rasterize_outside_range_ignored():
    pts = np.array([[-0.1, 1, 0, 0], [8.0, 1, 0, 0], [1, 8.5, 0, 0]], dtype=float)
    assert not rasterize(pts, UNIT).any()


def test_rasterize_statistics_by_hand():
    pts = np.array([[0.2, 0.9, 1.0, 0.1], [0.7, 0.4, 3.0, 0.3], [0.5, 0.5, 2.0, 0.8]])
    s = rasterize(pts, UNIT)[0, 0]
    z = pts[:, 2]
    expected = [math.log(4), z.mean(), z.max(), pts[:, 3].mean(), z.std(),
                np.abs(pts[:, 0] - 0.5).mean(), np.abs(pts[:, 1] - 0.5).mean(), 1.0]
    np.testing.assert_allclose(s, expected, atol=1e-12)


# -- encode ---------------------------------------------------------------

def test_zero_params_give_zero_features():
    rng = np.random.default_rng(0)
    p = EncoderParams(np.zeros((4, N_STATS * 9)), np.zeros(4), 3)
    assert not encode(sparse_stats(rng, 6, 6), p).features.any()


def test_identity_weights_give_tanh_of_stats():
    rng = np.random.default_rng(1)
    stats = sparse_stats(rng, 5, 7)
    f = encode(stats, EncoderParams(np.eye(N_STATS), np.zeros(N_STATS), 1)).features
    np.testing.assert_allclose(f, np.tanh(stats), atol=1e-15)
    assert (np.abs(f) < 1).all()


@pytest.mark.parametrize("patch", [1, 3, 5])
def test_sparse_and_dense_routes_agree(patch):
    rng = np.random.default_rng(patch)
    stats = sparse_stats(rng, 9, 11, 0.2)
    p = EncoderParams.init(6, patch, seed=3)
    p.bias[:] = rng.normal(size=6)
    a, b = encode(stats, p, method="sparse"), encode(stats, p, method="dense")
    np.testing.assert_allclose(a.features, b.features, atol=1e-13)
    g = rng.normal(size=a.features.shape)
    for x, y in zip(encode_backward(a, g), encode_backward(b, g)):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_patch_layer_matches_explicit_convolution():
    rng = np.random.default_rng(2)
    stats = sparse_stats(rng, 6, 5, 0.5)
    p = EncoderParams.init(3, 3, seed=1)
    f = encode(stats, p).features
    w = p.weight.reshape(3, 3, 3, N_STATS)  # (C, dy, dx, stat)
    pad = np.pad(stats, ((1, 1), (1, 1), (0, 0)))
    for y in range(6):
        for x in range(5):
            pre = p.bias + np.einsum("cijd,ijd->c", w, pad[y:y + 3, x:x + 3])
            np.testing.assert_allclose(f[y, x], np.tanh(pre), atol=1e-13)


def test_bad_shapes_and_method():
    p = EncoderParams.init(4, 3)
    with pytest.raises(ValueError):
        encode(np.zeros((4, 4, N_STATS)), EncoderParams.init(4, 1).__class__(np.zeros((4, 5)), np.zeros(4), 1))
    with pytest.raises(ValueError):
        encode(np.zeros((4, 4, N_STATS)), p, method="fft")
    with pytest.raises(ValueError):
        EncoderParams.init(4, 2)


def _fd_check(rng, patch, method):
    h, w, c = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
    stats = sparse_stats(rng, h, w, 0.5)
    p = EncoderParams.init(c, patch, seed=int(rng.integers(1 << 30)), scale=1.5)
    p.bias[:] = rng.normal(0, 0.5, c)
    g = rng.normal(size=(h, w, c))

    def loss():
        return float((g * encode(stats, p, method=method).features).sum())

    gw, gb = encode_backward(encode(stats, p, method=method), g)
    return (grad_rel_err(gw, central_diff(loss, p.weight, h=1e-4)),
            grad_rel_err(gb, central_diff(loss, p.bias, h=1e-4)))


@pytest.mark.parametrize("method", ["sparse", "dense"])
def test_encoder_gradient_finite_differences(method):
    rng = np.random.default_rng(10)
    worst = 0.0
    for i in range(100):
        worst = max(worst, *_fd_check(rng, [1, 3][i % 2], method))
    assert worst <= 1e-4


def test_backward_zero_upstream():
    rng = np.random.default_rng(3)
    fm = encode(sparse_stats(rng, 4, 4), EncoderParams.init(3, 3))
    gw, gb = encode_backward(fm, np.zeros(fm.features.shape))
    assert not gw.any() and not gb.any()


def test_backward_single_cell_is_outer_product():
    rng = np.random.default_rng(4)
    stats = sparse_stats(rng, 4, 4, 1.0)
    fm = encode(stats, EncoderParams.init(5, 1, seed=2))
    g = np.zeros(fm.features.shape)
    g[2, 1] = rng.normal(size=5)
    gw, gb = encode_backward(fm, g)
    local = (1 - fm.features[2, 1] ** 2) * g[2, 1]
    np.testing.assert_allclose(gw, np.outer(local, stats[2, 1]), atol=1e-14)
    np.testing.assert_allclose(gb, local, atol=1e-14)


def test_backward_linear_in_upstream():
    rng = np.random.default_rng(5)
    fm = encode(sparse_stats(rng, 5, 5), EncoderParams.init(3, 3))
    g1, g2 = rng.normal(size=fm.features.shape), rng.normal(size=fm.features.shape)
    a, b, s = encode_backward(fm, g1), encode_backward(fm, g2), encode_backward(fm, g1 + g2)
    np.testing.assert_allclose(s[0], a[0] + b[0], atol=1e-12)
    np.testing.assert_allclose(s[1], a[1] + b[1], atol=1e-12)


def test_backward_requires_cache():
    fm = encode(np.zeros((3, 3, N_STATS)), EncoderParams.init(2, 1), method="dense")
    fm.inputs = None
    with pytest.raises(ValueError, match="no cached inputs"):
        encode_backward(fm, np.zeros(fm.features.shape))


# -- projection and sequences ---------------------------------------------

def fmap_with_points(pts, c=4, grid=UNIT):
    return encode(rasterize(np.asarray(pts, dtype=float), grid), EncoderParams.init(c, 1, seed=0), grid)


def test_no_boxes_empty_sequences():
    fm = fmap_with_points([[1, 1, 0, 0]])
    seq = extract_sequences(fm, [], 8, np.random.default_rng(0))
    assert len(seq) == 0 and seq.bg.shape == (0, 4)


def test_four_cell_box():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(0, 8, (300, 2)), rng.uniform(0, 1, (300, 2))])
    fm = fmap_with_points(pts)
    box = Box3D(5.0, 5.0, 0.0, 1.0, 2.0, 2.0, 0.0)
    seq = extract_sequences(fm, [box], 8, np.random.default_rng(1))
    assert len(seq) == 4 and seq.bg.shape[0] == 4
    assert sorted(map(tuple, seq.fg_cells)) == [(4, 4), (4, 5), (5, 4), (5, 5)]
    assert (seq.fg_group == group_index(box, 8)).all()
    proj = project_boxes(UNIT, [box], 8)
    assert not proj.fg[seq.bg_cells[:, 0], seq.bg_cells[:, 1]].any()
    assert fm.occupancy[seq.bg_cells[:, 0], seq.bg_cells[:, 1]].all()
    np.testing.assert_array_equal(seq.fg, fm.features[seq.fg_cells[:, 0], seq.fg_cells[:, 1]])


def test_bg_falls_back_to_unoccupied_cells():
    # every occupied cell is foreground
    box = Box3D(4.0, 4.0, 0.0, 1.0, 2.0, 2.0, 0.3)
    pts = [[3.5, 3.5, 0, 0], [4.5, 4.5, 0, 0]]
    fm = fmap_with_points(pts)
    seq = extract_sequences(fm, [box], 8, np.random.default_rng(0))
    assert len(seq) == seq.bg.shape[0] > 0
    assert not fm.occupancy[seq.bg_cells[:, 0], seq.bg_cells[:, 1]].any()


def test_bg_mixes_occupied_then_free():
    rng = np.random.default_rng(3)
    box = Box3D(4.5, 4.5, 0.0, 1.0, 3.0, 3.0, 0.0)  # 9 cells
    fm = fmap_with_points([[0.5, 0.5, 0, 0], [7.5, 7.5, 0, 0]])
    seq = extract_sequences(fm, [box], 8, rng)
    occ = fm.occupancy[seq.bg_cells[:, 0], seq.bg_cells[:, 1]]
    assert len(seq) == 9 and occ.sum() == 2


def test_box_covering_whole_grid_keeps_lengths_equal():
    grid = BevGrid(x_range=(0.0, 3.0), y_range=(0.0, 2.0), cell_size=1.0)
    fm = fmap_with_points([[0.5, 0.5, 0, 0]], grid=grid)
    seq = extract_sequences(fm, [Box3D(1.5, 1.0, 0, 1, 10, 10, 0)], 4, np.random.default_rng(0))
    assert len(seq) == seq.bg.shape[0] == 0


def test_sequences_reproducible_and_fg_seed_independent():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(0, 8, (400, 2)), rng.uniform(0, 1, (400, 2))])
    fm = fmap_with_points(pts)
    boxes = [Box3D(2.0, 2.0, 0, 1, 1.8, 3.0, 0.4), Box3D(6.0, 5.5, 0, 1, 1.5, 2.5, 2.0)]
    a = extract_sequences(fm, boxes, 8, np.random.default_rng(7))
    b = extract_sequences(fm, boxes, 8, np.random.default_rng(7))
    c = extract_sequences(fm, boxes, 8, np.random.default_rng(8))
    np.testing.assert_array_equal(a.bg_cells, b.bg_cells)
    np.testing.assert_array_equal(a.fg_cells, c.fg_cells)
    assert not np.array_equal(a.bg_cells, c.bg_cells)
    for q, bid in zip(a.fg_group, a.fg_box):
        assert q == group_index(boxes[bid], 8)


def test_overlapping_boxes_nearest_center_wins():
    grid = BevGrid(x_range=(0.0, 10.0), y_range=(0.0, 4.0), cell_size=1.0)
    a = Box3D(3.0, 2.0, 0, 1, 2.0, 4.0, 0.0)  # x in [1, 5]
    b = Box3D(5.5, 2.0, 0, 1, 2.0, 4.0, 0.0)  # x in [3.5, 7.5]
    proj = project_boxes(grid, [a, b], 8)
    # centers 3.5, 4.5 lie in both; 4.5 is nearer b (1.0 vs 1.5), 3.5 is nearer a
    assert proj.box_id[1, 3] == 0 and proj.box_id[1, 4] == 1
    assert proj.group[1, 4] == group_index(b, 8)


def test_scatter_sequence_grads_accumulates():
    fm = fmap_with_points([[0.5, 0.5, 0, 0]])
    seq = extract_sequences(fm, [Box3D(5.0, 5.0, 0, 1, 2, 2, 0)], 8, np.random.default_rng(0))
    g_fg, g_bg = np.ones_like(seq.fg), 2 * np.ones_like(seq.bg)
    out = scatter_sequence_grads(fm.features.shape, seq, g_fg, g_bg)
    assert out.sum() == pytest.approx(4 * 4 * 1 + 4 * 4 * 2)


# -- fixed input standardisation -------------------------------------------

from gpa3d.encoder import OCC, fit_input_norm, normalise_stats  # noqa: E402


def occupied_stats(rng, h, w, fill=0.4):
    s = rng.normal(2.0, 3.0, (h, w, N_STATS))
    occ = rng.uniform(size=(h, w)) < fill
    s[~occ] = 0.0
    s[..., OCC] = occ
    return s


def normed_params(rng, c, patch):
    p = EncoderParams.init(c, patch, seed=int(rng.integers(1 << 30)), scale=1.5)
    shift, scale = rng.normal(size=N_STATS), rng.uniform(0.5, 2.0, N_STATS)
    shift[OCC], scale[OCC] = 0.0, 1.0
    return EncoderParams(p.weight, rng.normal(0, 0.5, c), patch, shift, scale)


def test_normalisation_keeps_empty_cells_zero_and_is_linear():
    rng = np.random.default_rng(20)
    s1, s2 = occupied_stats(rng, 6, 7), occupied_stats(rng, 6, 7)
    p = normed_params(rng, 3, 1)
    n1 = normalise_stats(s1, p)
    assert not n1[s1[..., OCC] == 0].any()
    np.testing.assert_array_equal(n1[..., OCC], s1[..., OCC])
    np.testing.assert_allclose(normalise_stats(2.0 * s1 - s2, p), 2.0 * n1 - normalise_stats(s2, p), atol=1e-12)
    occ = s1[..., OCC] > 0
    np.testing.assert_allclose(n1[occ], (s1[occ] - p.input_shift) / p.input_scale, atol=1e-14)


def test_fit_input_norm_standardises_occupied_cells():
    rng = np.random.default_rng(21)
    maps = [occupied_stats(rng, 8, 8, 0.5) for _ in range(3)]
    maps[0][..., 2] = np.where(maps[0][..., OCC] > 0, 4.0, 0.0)
    for m in maps[1:]:
        m[..., 2] = np.where(m[..., OCC] > 0, 4.0, 0.0)  # constant statistic
    shift, scale = fit_input_norm(maps)
    assert shift[OCC] == 0.0 and scale[OCC] == 1.0 and scale[2] == 1.0 and shift[2] == 4.0
    occ = np.concatenate([m[..., OCC].ravel() for m in maps]) > 0
    p = EncoderParams(np.zeros((1, N_STATS)), np.zeros(1), 1, shift, scale)
    z = np.concatenate([normalise_stats(m, p).reshape(-1, N_STATS) for m in maps])[occ]
    keep = [i for i in range(N_STATS) if i not in (OCC, 2)]
    np.testing.assert_allclose(z[:, keep].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z[:, keep].std(axis=0), 1.0, atol=1e-12)
    assert fit_input_norm([])[0].tolist() == [0.0] * N_STATS


def test_normalisation_validation():
    w, b = np.zeros((2, N_STATS)), np.zeros(2)
    bad_shift = np.zeros(N_STATS)
    bad_shift[OCC] = 1.0
    with pytest.raises(ValueError):
        EncoderParams(w, b, 1, bad_shift, np.ones(N_STATS))
    bad_scale = np.ones(N_STATS)
    bad_scale[0] = 0.0
    with pytest.raises(ValueError):
        EncoderParams(w, b, 1, np.zeros(N_STATS), bad_scale)
    bad_scale = np.ones(N_STATS)
    bad_scale[OCC] = 2.0
    with pytest.raises(ValueError):
        EncoderParams(w, b, 1, np.zeros(N_STATS), bad_scale)


@pytest.mark.parametrize("patch", [1, 3, 5])
def test_normalised_routes_agree(patch):
    rng = np.random.default_rng(30 + patch)
    stats = occupied_stats(rng, 9, 11, 0.2)
    p = normed_params(rng, 5, patch)
    a, b = encode(stats, p, method="sparse"), encode(stats, p, method="dense")
    np.testing.assert_allclose(a.features, b.features, atol=1e-13)
    g = rng.normal(size=a.features.shape)
    for x, y in zip(encode_backward(a, g), encode_backward(b, g)):
        np.testing.assert_allclose(x, y, atol=1e-12)
    # normalising is the same as feeding the pre-normalised map to an identity-normalised encoder
    plain = EncoderParams(p.weight, p.bias, patch)
    np.testing.assert_allclose(a.features, encode(normalise_stats(stats, p), plain).features, atol=1e-13)


@pytest.mark.parametrize("method", ["sparse", "dense"])
def test_normalised_gradient_finite_differences(method):
    rng = np.random.default_rng(40)
    worst = 0.0
    for i in range(40):
        h, w, c = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
        stats = occupied_stats(rng, h, w, 0.5)
        p = normed_params(rng, c, [1, 3][i % 2])
        g = rng.normal(size=(h, w, c))

        def loss():
            return float((g * encode(stats, p, method=method).features).sum())

        gw, gb = encode_backward(encode(stats, p, method=method), g)
        worst = max(worst, grad_rel_err(gw, central_diff(loss, p.weight, h=1e-5)),
                    grad_rel_err(gb, central_diff(loss, p.bias, h=1e-5)))
    assert worst <= 1e-4
