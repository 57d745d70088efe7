import math
from pathlib import Path

import numpy as np
import pytest
from pyfakefs.fake_filesystem import FakeFilesystem

from patchseek.errors import AnnotationError, FormatError, ParameterError, ShapeError
from patchseek.gridcore import Grid2D
from patchseek.labelgen import (
    BoundingBox,
    GaussianSpec,
    HybridMode,
    Provenance,
    PseudoMask,
    box_footprint,
    gaussian_mask,
    hybrid_mask,
    load_mask_pgm,
    nearest_cell,
    save_mask_pgm,
)


def external(values: np.ndarray) -> PseudoMask:
    return PseudoMask(Grid2D(values), Provenance.EXTERNAL)


def test_box_rejects_non_positive_extent() -> None:
    with pytest.raises(AnnotationError):
        BoundingBox(xc=1, yc=1, w=0, h=2)


def test_box_corners() -> None:
    box = BoundingBox.from_corners(2, 4, 10, 8, category=3)
    assert (box.xc, box.yc, box.w, box.h) == (6, 6, 8, 4)
    assert box.corners == (2, 4, 10, 8)
    assert box.scaled(2).corners == (1, 2, 5, 4)
    assert box.scaled(2).category == 3


@pytest.mark.parametrize("tau", [0, 1, -0.2, 1.5])
def test_tau_must_be_inside_unit_interval(tau: float) -> None:
    with pytest.raises(ParameterError):
        GaussianSpec(tau=tau)


@pytest.mark.parametrize(
    "coordinate, expected",
    [(0.0, 0), (0.4, 0), (0.5, 0), (0.6, 1), (3.5, 3), (-2.0, 0), (42.0, 9)],
)
def test_nearest_cell(coordinate: float, expected: int) -> None:
    assert nearest_cell(coordinate, 10) == expected


def test_empty_box_list_gives_zero_mask() -> None:
    mask = gaussian_mask([], (5, 7))
    assert mask.provenance is Provenance.GAUSSIAN
    assert not mask.grid.values.any()


def test_non_positive_shape_is_rejected() -> None:
    with pytest.raises(ShapeError):
        gaussian_mask([], (0, 3))


def test_single_box_values() -> None:
    values = gaussian_mask([BoundingBox(xc=8, yc=8, w=8, h=8)], (16, 16)).grid.values
    assert values[8, 8] == 1.0
    assert values[12, 12] == pytest.approx(0.5, abs=1e-12)
    assert values[8, 12] == pytest.approx(math.sqrt(0.5), abs=1e-12)
    assert values.max() == 1.0
    assert values.min() >= 0


def test_center_is_one_and_corners_are_tau(rng: np.random.Generator) -> None:
    for _ in range(100):
        half_w, half_h = rng.integers(1, 6, size=2)
        xc, yc = rng.integers(6, 26, size=2)
        tau = rng.uniform(0.2, 0.8)
        box = BoundingBox(xc=xc, yc=yc, w=2 * half_w, h=2 * half_h)
        values = gaussian_mask([box], (32, 32), GaussianSpec(tau=tau)).grid.values
        assert values[yc, xc] == pytest.approx(1.0, abs=1e-9)
        for dy in (-half_h, half_h):
            for dx in (-half_w, half_w):
                assert values[yc + dy, xc + dx] == pytest.approx(tau, abs=1e-9)
        assert np.unravel_index(values.argmax(), values.shape) == (yc, xc)


def test_level_set_stays_inside_scaled_footprint(rng: np.random.Generator) -> None:
    for _ in range(100):
        box = BoundingBox(
            xc=rng.uniform(4, 20),
            yc=rng.uniform(4, 20),
            w=rng.uniform(0.5, 8),
            h=rng.uniform(0.5, 8),
        )
        tau = rng.uniform(0.2, 0.8)
        values = gaussian_mask([box], (24, 24), GaussianSpec(tau=tau)).grid.values
        rows, cols = np.nonzero(values >= tau)
        radius_x = math.sqrt(2) * box.w / 2 + 1
        radius_y = math.sqrt(2) * box.h / 2 + 1
        assert (np.abs(cols - box.xc) <= radius_x).all()
        assert (np.abs(rows - box.yc) <= radius_y).all()
        assert values[nearest_cell(box.yc, 24), nearest_cell(box.xc, 24)] == values.max()


def test_overlapping_boxes_combine_by_maximum() -> None:
    first = BoundingBox(xc=5, yc=5, w=6, h=4)
    second = BoundingBox(xc=8.5, yc=6, w=3, h=5)
    both = gaussian_mask([first, second], (12, 14)).grid.values
    single = [gaussian_mask([box], (12, 14)).grid.values for box in (first, second)]
    np.testing.assert_array_equal(both, np.maximum(*single))
    repeated = gaussian_mask([first, first], (12, 14)).grid.values
    np.testing.assert_array_equal(repeated, single[0])


def test_box_partly_outside_the_grid() -> None:
    values = gaussian_mask([BoundingBox(xc=-1, yc=2, w=4, h=4)], (6, 6)).grid.values
    assert 0 < values[2, 0] < 1
    assert values.max() == values[2, 0]


def test_small_values_are_flushed() -> None:
    values = gaussian_mask([BoundingBox(xc=2, yc=2, w=1, h=1)], (40, 40)).grid.values
    assert not values[20:, 20:].any()


def test_footprint_contains_the_center_cell() -> None:
    rows, cols = box_footprint(BoundingBox(xc=3.3, yc=1.7, w=0.4, h=0.2), (5, 5))
    assert (rows.start, rows.stop) == (2, 3)
    assert (cols.start, cols.stop) == (3, 4)
    rows, cols = box_footprint(BoundingBox(xc=4, yc=4, w=4, h=2), (10, 5))
    assert (rows.start, rows.stop) == (3, 6)
    assert (cols.start, cols.stop) == (2, 5)


@pytest.mark.parametrize("mode", list(HybridMode))
def test_hybrid_with_zero_external_keeps_gaussian(
    rng: np.random.Generator,
    mode: HybridMode,
) -> None:
    for _ in range(20):
        box = BoundingBox(xc=rng.uniform(2, 14), yc=rng.uniform(2, 14), w=3, h=5)
        gaussian = gaussian_mask([box], (16, 16))
        mixed = hybrid_mask(gaussian, external(np.zeros((16, 16))), mode, [box])
        assert mixed.provenance is Provenance.HYBRID
        if mode is HybridMode.PER_IMAGE:
            np.testing.assert_array_equal(mixed.grid.values, gaussian.grid.values)
        else:
            footprint = box_footprint(box, (16, 16))
            expected = np.zeros((16, 16))
            expected[footprint] = gaussian.grid.values[footprint]
            np.testing.assert_array_equal(mixed.grid.values, expected)


def test_hybrid_with_all_ones_external_keeps_gaussian() -> None:
    gaussian = gaussian_mask([BoundingBox(xc=4, yc=4, w=4, h=4)], (8, 8))
    mixed = hybrid_mask(gaussian, external(np.ones((8, 8))), HybridMode.PER_IMAGE)
    np.testing.assert_array_equal(mixed.grid.values, gaussian.grid.values)


def test_per_image_product(rng: np.random.Generator) -> None:
    for _ in range(100):
        box = BoundingBox(xc=rng.uniform(0, 12), yc=rng.uniform(0, 10), w=5, h=3)
        gaussian = gaussian_mask([box], (10, 12))
        shape_prior = rng.random((10, 12))
        mixed = hybrid_mask(gaussian, external(shape_prior), "per_image")
        expected = np.zeros((10, 12))
        for row in range(10):
            for col in range(12):
                expected[row, col] = shape_prior[row, col] * gaussian.grid.values[row, col]
        np.testing.assert_array_equal(mixed.grid.values, expected)
        assert (mixed.grid.values <= gaussian.grid.values).all()


def test_per_box_only_modulates_boxes_the_external_mask_covers() -> None:
    found = BoundingBox(xc=4, yc=4, w=4, h=4)
    missed = BoundingBox(xc=12, yc=12, w=4, h=4)
    gaussian = gaussian_mask([found, missed], (16, 16))
    blob = np.zeros((16, 16))
    blob[3:6, 3:6] = 1
    mixed = hybrid_mask(gaussian, external(blob), HybridMode.PER_BOX, [found, missed])

    expected = np.zeros((16, 16))
    found_cells = box_footprint(found, (16, 16))
    missed_cells = box_footprint(missed, (16, 16))
    expected[found_cells] = gaussian.grid.values[found_cells] * blob[found_cells]
    expected[missed_cells] = gaussian.grid.values[missed_cells]
    np.testing.assert_array_equal(mixed.grid.values, expected)


def test_hybrid_rejects_shape_mismatch() -> None:
    with pytest.raises(ShapeError):
        hybrid_mask(gaussian_mask([], (4, 4)), external(np.zeros((4, 5))))


def test_load_mask_scales_by_maxval(fs: FakeFilesystem) -> None:
    Path("/mask.pgm").write_bytes(b"P2\n2 2\n255\n0 255\n128 255\n")
    mask = load_mask_pgm("/mask.pgm")
    assert mask.provenance is Provenance.EXTERNAL
    np.testing.assert_allclose(mask.grid.values, [[0, 1], [128 / 255, 1]])

    Path("/ones.pgm").write_bytes(b"P2\n2 1\n1\n1 1\n")
    np.testing.assert_array_equal(load_mask_pgm("/ones.pgm").grid.values, [[1, 1]])


def test_load_mask_rejects_color_maps(fs: FakeFilesystem) -> None:
    Path("/color.ppm").write_bytes(b"P3\n1 1\n255\n1 2 3\n")
    with pytest.raises(FormatError):
        load_mask_pgm("/color.ppm")


@pytest.mark.parametrize("binary", [True, False])
def test_saved_mask_is_read_back_within_half_a_level(
    fs: FakeFilesystem,
    rng: np.random.Generator,
    binary: bool,
) -> None:
    values = rng.random((9, 11))
    save_mask_pgm(Grid2D(values), "/saved.pgm", binary=binary)
    loaded = load_mask_pgm("/saved.pgm").grid.values
    assert np.abs(loaded - values).max() <= 1 / 510 + 1e-12
