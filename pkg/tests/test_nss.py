import numpy as np
import pytest

from gpa3d.encoder import BevGrid, BevFeatureMap
from gpa3d.head import HeadParams, detection_loss, head_forward
from gpa3d.geometry import Box3D
from gpa3d.nss import NoiseMask, apply_mask, build_mask, write_pgm
from gpa3d.prototypes import PrototypeBank

GRID = BevGrid(x_range=(0.0, 4.0), y_range=(0.0, 3.0), cell_size=1.0)


def fmap_from(features):
    f = np.asarray(features, dtype=float)
    h, w, _ = f.shape
    return BevFeatureMap(GRID, f, np.zeros((h, w, 8)), np.ones((h, w), dtype=bool))


def bank_with_background(bg):
    c = len(bg)
    return PrototypeBank(np.vstack([np.eye(c)[:2], np.asarray(bg, dtype=float)]))


def single_cell(feature, bg, alpha=0.0):
    f = np.zeros((3, 4, len(feature)))
    f[:] = [0.0, 1.0, 0.0]  # every other cell orthogonal to the background prototype
    f[1, 2] = feature
    fg = np.zeros((3, 4), dtype=bool)
    fg[1, 2] = True
    return build_mask(fmap_from(f), fg, bank_with_background(bg), alpha)


def test_feature_equal_to_background_gets_alpha():
    assert single_cell([1.0, 0, 0], [1.0, 0, 0], 0.25).values[1, 2] == 0.25


def test_orthogonal_feature_kept():
    assert single_cell([0, 0, 1.0], [1.0, 0, 0]).values[1, 2] == 1.0


def test_threshold_is_strict():
    # a 3-4-5 style construction gives cosine exactly 0.3 in binary floating point
    f = np.array([0.3, np.sqrt(1 - 0.09), 0.0])
    g = np.array([1.0, 0.0, 0.0])
    sim = float(f @ g / (np.linalg.norm(f) * np.linalg.norm(g)))
    assert sim == 0.3
    assert single_cell(f, g).values[1, 2] == 1.0
    f2 = np.array([np.nextafter(0.3, 1.0), np.sqrt(1 - 0.09), 0.0])
    assert single_cell(f2, g).values[1, 2] == 0.0


def test_degenerate_feature_is_suppressed():
    assert single_cell([0.0, 0.0, 0.0], [1.0, 0, 0], 0.5).values[1, 2] == 0.5


def test_background_cells_always_one_and_two_values_only():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(3, 4, 3))
    fg = rng.uniform(size=(3, 4)) < 0.5
    bank = bank_with_background(rng.normal(size=3))
    for alpha in (0.0, 0.5):
        m = build_mask(fmap_from(f), fg, bank, alpha)
        assert (m.values[~fg] == 1.0).all()
        assert set(np.unique(m.values)) <= {alpha, 1.0}
        assert (m.suppressed == (m.values == alpha)).all()


def test_cell_list_and_bool_mask_agree():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(3, 4, 3))
    fg = rng.uniform(size=(3, 4)) < 0.5
    bank = bank_with_background(rng.normal(size=3))
    a = build_mask(fmap_from(f), fg, bank, 0.0)
    b = build_mask(fmap_from(f), np.argwhere(fg), bank, 0.0)
    np.testing.assert_array_equal(a.values, b.values)


def test_mask_idempotent():
    rng = np.random.default_rng(2)
    fm = fmap_from(rng.normal(size=(3, 4, 3)))
    fg = rng.uniform(size=(3, 4)) < 0.6
    bank = bank_with_background(rng.normal(size=3))
    np.testing.assert_array_equal(build_mask(fm, fg, bank, 0.0).values, build_mask(fm, fg, bank, 0.0).values)


def test_alpha_range():
    fm = fmap_from(np.ones((3, 4, 3)))
    with pytest.raises(ValueError):
        build_mask(fm, np.zeros((3, 4), bool), bank_with_background([1.0, 0, 0]), 1.0)


def test_apply_mask_ones_unchanged_and_scaling():
    rng = np.random.default_rng(3)
    loss = rng.uniform(size=(3, 4))
    grads = rng.normal(size=(3, 4, 5))
    ones = np.ones((3, 4))
    total, g = apply_mask(loss, ones, grads)
    assert total == pytest.approx(loss.sum()) and np.array_equal(g, grads)
    m = np.ones((3, 4))
    m[0, 0], m[2, 3] = 0.0, 0.5
    total, g = apply_mask(loss, NoiseMask(m, 0.5), grads)
    assert total == pytest.approx(loss.sum() - loss[0, 0] - 0.5 * loss[2, 3])
    assert not g[0, 0].any()
    np.testing.assert_array_equal(g[2, 3], 0.5 * grads[2, 3])


def test_masked_detection_gradient_equals_mask_times_per_cell_gradient():
    # the head gradient of each cell's loss, scaled by its mask value, sums to the masked gradient
    rng = np.random.default_rng(4)
    fm = fmap_from(np.tanh(rng.normal(size=(3, 4, 3))))
    hp = HeadParams(rng.normal(size=3), 0.1, rng.normal(size=(8, 3)), rng.normal(size=8))
    labels = [Box3D(1.5, 1.5, 0, 1, 1.8, 2.2, 0.3)]
    out = head_forward(fm, hp)
    m = rng.choice([0.0, 0.5, 1.0], size=(3, 4))
    masked = detection_loss(fm, out, hp, labels, m)
    acc = np.zeros_like(masked.grad_features)
    for iy in range(3):
        for ix in range(4):
            one = np.zeros((3, 4))
            one[iy, ix] = 1.0
            acc += m[iy, ix] * detection_loss(fm, out, hp, labels, one).grad_features
    np.testing.assert_allclose(masked.grad_features, acc, atol=1e-15)


def test_pgm_dump(tmp_path):
    m = np.ones((3, 4))
    m[0, 1] = 0.5
    write_pgm(tmp_path / "m.pgm", NoiseMask(m, 0.5))
    raw = (tmp_path / "m.pgm").read_bytes()
    header = b"P5\n4 3\n255\n"
    assert raw.startswith(header)
    img = np.frombuffer(raw[len(header):], dtype=np.uint8).reshape(3, 4)
    # top image row is the largest y, so grid row 0 is the last image row
    assert img[2, 1] == 128 and (img[:2] == 255).all()
