import itertools
from pathlib import Path
from typing import List, Set, Tuple

import numpy as np
import pytest
from pyfakefs.fake_filesystem import FakeFilesystem
from tests.conftest import blob_mask, make_mask

from patchseek.errors import ParameterError, ParseError, ShapeError
from patchseek.gridcore import BitGrid, FeatureStack
from patchseek.slicer import (
    Center,
    CenterSet,
    PatchBox,
    PatchPlan,
    Strategy,
    activation,
    adjust_patch,
    dump_plan,
    estimate_sizes,
    extract_patches,
    load_plan,
    local_maxima,
    patch_size_for,
    remove_overlap,
    select_tokens,
    slice_greedy,
    slice_mask,
    slice_parallel,
    slice_uniform,
    uniform_cell_count,
)


def centers_of(*coordinates: Tuple[int, int]) -> CenterSet:
    return CenterSet(Center(y=y, x=x, score=1.0) for x, y in coordinates)


def scan_maxima(values: np.ndarray, threshold: float) -> List[Tuple[int, int]]:
    height, width = values.shape
    found = []
    for y in range(height):
        for x in range(width):
            window = values[max(y - 1, 0) : y + 2, max(x - 1, 0) : x + 2]
            if values[y, x] >= threshold and values[y, x] == window.max():
                found.append((x, y))
    return found


def minimum_cover(centers: CenterSet, grid_shape: Tuple[int, int], patch: int) -> int:
    height, width = grid_shape
    points = centers.coordinates
    if not points:
        return 0
    coverages: Set[frozenset] = set()
    for y1 in range(height - patch + 1):
        for x1 in range(width - patch + 1):
            box = PatchBox(x1, y1, x1 + patch, y1 + patch)
            covered = frozenset(index for index, (x, y) in enumerate(points) if box.contains(x, y))
            if covered:
                coverages.add(covered)
    everything = frozenset(range(len(points)))
    for count in range(1, len(points) + 1):
        for choice in itertools.combinations(coverages, count):
            if frozenset().union(*choice) == everything:
                return count
    raise AssertionError("centers cannot be covered")


def random_mask(rng: np.random.Generator) -> np.ndarray:
    height, width = rng.integers(6, 25, size=2)
    values = rng.random((height, width))
    values[values < rng.uniform(0.3, 0.9)] = 0
    return values


def test_activation_is_inclusive() -> None:
    assert not activation(make_mask(np.full((3, 3), 0.49))).bits.any()
    bits = activation(make_mask(np.array([[0.5, 0.4999]]))).bits
    np.testing.assert_array_equal(bits, [[True, False]])


def test_activation_matches_comparison(rng: np.random.Generator) -> None:
    values = rng.random((9, 7))
    np.testing.assert_array_equal(activation(make_mask(values), 0.3).bits, values >= 0.3)


@pytest.mark.parametrize("threshold", [0, 1, 1.2])
def test_activation_threshold_range(threshold: float) -> None:
    with pytest.raises(ParameterError):
        activation(make_mask(np.zeros((2, 2))), threshold)


def test_zero_mask_has_no_centers() -> None:
    mask = make_mask(np.zeros((6, 6)))
    assert not len(local_maxima(mask, activation(mask)))


def test_impulse_is_the_only_center() -> None:
    values = np.zeros((10, 10))
    values[5, 5] = 0.9
    mask = make_mask(values)
    centers = local_maxima(mask, activation(mask))
    assert centers.coordinates == [(5, 5)]
    assert list(centers)[0].score == 0.9


def test_plateau_keeps_a_center_every_other_cell() -> None:
    mask = make_mask(np.full((4, 5), 0.8))
    assert local_maxima(mask, activation(mask)).coordinates == [
        (0, 0),
        (2, 0),
        (4, 0),
        (0, 2),
        (2, 2),
        (4, 2),
    ]


def test_tied_pair_keeps_the_first_cell() -> None:
    values = np.zeros((5, 5))
    values[2, 2] = 0.9
    values[3, 3] = 0.9
    mask = make_mask(values)
    assert local_maxima(mask, activation(mask)).coordinates == [(2, 2)]


def test_centers_match_neighbourhood_scan(rng: np.random.Generator) -> None:
    for _ in range(50):
        values = random_mask(rng)
        mask = make_mask(values)
        found = local_maxima(mask, activation(mask)).coordinates
        assert found == sorted(scan_maxima(values, 0.5), key=lambda point: (point[1], point[0]))


def test_two_separated_peaks_are_found() -> None:
    rows, cols = np.mgrid[0:12, 0:12]
    values = np.maximum(
        np.exp(-((cols - 3) ** 2 + (rows - 4) ** 2) / 4),
        np.exp(-((cols - 7) ** 2 + (rows - 8) ** 2) / 4),
    )
    mask = make_mask(values)
    assert local_maxima(mask, activation(mask)).coordinates == [(3, 4), (7, 8)]


def test_local_maxima_shape_mismatch() -> None:
    with pytest.raises(ShapeError):
        local_maxima(make_mask(np.zeros((3, 3))), BitGrid(np.zeros((3, 4))))


def test_size_estimates() -> None:
    bits = np.zeros((15, 15), dtype=bool)
    bits[2, 2] = True
    bits[9:12, 9:12] = True
    sizes = estimate_sizes(BitGrid(bits), centers_of((2, 2), (10, 10)))
    assert sizes == pytest.approx([1 / 81, 9 / 81])

    full = BitGrid(np.ones((12, 12), dtype=bool))
    assert estimate_sizes(full, centers_of((6, 6))) == pytest.approx([1.0])


@pytest.mark.parametrize(
    "grid_shape, k, expected",
    [((108, 192), 8, (24, 14)), ((64, 64), 8, (8, 8)), ((10, 7), 1, (7, 10))],
)
def test_patch_size(grid_shape: Tuple[int, int], k: int, expected: Tuple[int, int]) -> None:
    assert patch_size_for(grid_shape, k) == expected


@pytest.mark.parametrize("k", [0, 11])
def test_patch_size_rejects_k(k: int) -> None:
    with pytest.raises(ParameterError):
        patch_size_for((10, 12), k)


def test_uniform_keeps_cells_with_centers() -> None:
    act = BitGrid(np.zeros((64, 64), dtype=bool))
    assert not len(slice_uniform(act, CenterSet(), 8))

    plan = slice_uniform(act, centers_of((1, 1), (2, 3), (20, 9), (63, 63)), 8)
    assert plan.strategy is Strategy.UNIFORM
    assert plan.boxes == (
        PatchBox(0, 0, 8, 8),
        PatchBox(16, 8, 24, 16),
        PatchBox(56, 56, 64, 64),
    )
    assert uniform_cell_count((64, 64), 8) == 64


def test_uniform_cells_at_the_border_are_full_size() -> None:
    act = BitGrid(np.zeros((10, 14), dtype=bool))
    plan = slice_uniform(act, centers_of((13, 9)), 4)
    assert (plan.patch_w, plan.patch_h) == (4, 3)
    assert plan.boxes == (PatchBox(10, 7, 14, 10),)


def test_adjust_drops_empty_leading_margin() -> None:
    bits = np.zeros((12, 12), dtype=bool)
    bits[4:6, 5:7] = True
    act = BitGrid(bits)
    assert adjust_patch(PatchBox(2, 3, 6, 7), act) == PatchBox(5, 4, 9, 8)
    assert adjust_patch(PatchBox(5, 4, 9, 8), act) == PatchBox(5, 4, 9, 8)
    assert adjust_patch(PatchBox(0, 8, 4, 12), act) == PatchBox(0, 8, 4, 12)


def test_adjust_keeps_the_box_in_bounds() -> None:
    bits = np.zeros((8, 8), dtype=bool)
    bits[6, 7] = True
    assert adjust_patch(PatchBox(4, 4, 8, 8), BitGrid(bits)) == PatchBox(4, 4, 8, 8)


def test_adjust_never_evicts_activated_cells(rng: np.random.Generator) -> None:
    for _ in range(1000):
        height, width = rng.integers(4, 20, size=2)
        act = BitGrid(rng.random((height, width)) > rng.uniform(0.5, 0.95))
        patch_w = int(rng.integers(1, width + 1))
        patch_h = int(rng.integers(1, height + 1))
        x1 = int(rng.integers(0, width - patch_w + 1))
        y1 = int(rng.integers(0, height - patch_h + 1))
        box = PatchBox(x1, y1, x1 + patch_w, y1 + patch_h)
        moved = adjust_patch(box, act)
        assert (moved.width, moved.height) == (patch_w, patch_h)
        assert moved.clamped(height, width) == moved
        rows, cols = np.nonzero(act.bits)
        for row, col in zip(rows, cols):
            if box.contains(col, row):
                assert moved.contains(col, row)


def test_greedy_on_empty_mask() -> None:
    assert not len(slice_greedy(make_mask(np.zeros((16, 16))), 4))


def test_greedy_single_blob() -> None:
    plan = slice_greedy(blob_mask((16, 16), [(6, 6, 2, 2)]), 4)
    assert plan.strategy is Strategy.GREEDY
    assert plan.boxes == (PatchBox(6, 6, 10, 10),)


def test_greedy_takes_the_larger_blob_first() -> None:
    plan = slice_greedy(blob_mask((16, 16), [(1, 1, 2, 2), (11, 11, 3, 3)]), 4)
    assert plan.boxes == (PatchBox(11, 11, 15, 15), PatchBox(1, 1, 5, 5))


def test_parallel_on_empty_mask() -> None:
    assert not len(slice_parallel(make_mask(np.zeros((16, 16))), 4))


def test_parallel_merges_candidates_that_meet() -> None:
    values = np.zeros((14, 14))
    values[1, 10:14] = 0.9
    values[1, 10] = 1.0
    values[1, 13] = 1.0
    mask = make_mask(values)
    centers = local_maxima(mask, activation(mask))
    assert centers.coordinates == [(10, 1), (13, 1)]
    assert len(slice_uniform(activation(mask), centers, 4)) == 2
    plan = slice_parallel(mask, 4)
    assert plan.strategy is Strategy.PARALLEL
    assert plan.boxes == (PatchBox(10, 1, 14, 5),)


def test_parallel_matches_greedy_on_an_isolated_blob() -> None:
    mask = blob_mask((16, 16), [(5, 5, 2, 2)])
    assert slice_parallel(mask, 4).boxes == slice_greedy(mask, 4).boxes == (PatchBox(5, 5, 9, 9),)


def test_remove_overlap() -> None:
    boxes = [PatchBox(0, 0, 4, 4), PatchBox(0, 0, 4, 4), PatchBox(2, 0, 6, 4), PatchBox(0, 0, 4, 4)]
    assert remove_overlap(boxes) == [PatchBox(0, 0, 4, 4), PatchBox(2, 0, 6, 4)]


def test_plans_cover_every_center(rng: np.random.Generator) -> None:
    for _ in range(1000):
        mask = make_mask(random_mask(rng))
        k = int(rng.integers(1, min(mask.shape) // 2 + 1))
        centers = local_maxima(mask, activation(mask))
        uniform_count = len(slice_uniform(activation(mask), centers, k))
        for plan in (slice_greedy(mask, k), slice_parallel(mask, k)):
            for box in plan.boxes:
                assert (box.width, box.height) == (plan.patch_w, plan.patch_h)
                assert box.clamped(*mask.shape) == box
            for x, y in centers.coordinates:
                assert plan.covered(x, y)
        assert len(slice_parallel(mask, k)) <= uniform_count


def random_blobs(rng: np.random.Generator, size: int, count: int) -> list:
    return [
        (
            int(rng.integers(0, size - 1)),
            int(rng.integers(0, size - 1)),
            int(rng.integers(1, 3)),
            int(rng.integers(1, 3)),
        )
        for _ in range(count)
    ]


@pytest.mark.parametrize("size, k", [(8, 2), (12, 3)])
def test_greedy_never_beats_minimum_cover(rng: np.random.Generator, size: int, k: int) -> None:
    for _ in range(100):
        mask = blob_mask((size, size), random_blobs(rng, size, int(rng.integers(1, 5))))
        centers = local_maxima(mask, activation(mask))
        plan = slice_greedy(mask, k)
        assert (plan.patch_w, plan.patch_h) == (4, 4)
        assert len(plan) >= minimum_cover(centers, (size, size), 4)


@pytest.mark.parametrize("size, k", [(8, 2), (12, 3)])
def test_greedy_is_optimal_on_a_single_cluster(
    rng: np.random.Generator,
    size: int,
    k: int,
) -> None:
    for _ in range(100):
        mask = blob_mask((size, size), random_blobs(rng, size, 1))
        centers = local_maxima(mask, activation(mask))
        assert len(centers) == 1
        assert len(slice_greedy(mask, k)) == minimum_cover(centers, (size, size), 4) == 1


def test_slice_mask_dispatches_on_strategy() -> None:
    mask = blob_mask((16, 16), [(5, 5, 2, 2)])
    for strategy in Strategy:
        plan, centers = slice_mask(mask, 4, strategy.value)
        assert plan.strategy is strategy
        assert centers.coordinates == [(5, 5)]
        assert plan.covered(5, 5)


def test_select_tokens() -> None:
    assert not len(select_tokens(make_mask(np.zeros((4, 4)))))
    values = np.zeros((4, 5))
    for x, y in [(0, 0), (4, 0), (2, 1), (1, 3), (3, 3)]:
        values[y, x] = 0.7
    assert select_tokens(make_mask(values)).tokens == ((0, 0), (4, 0), (2, 1), (1, 3), (3, 3))


def test_select_tokens_matches_threshold(rng: np.random.Generator) -> None:
    values = rng.random((6, 9))
    rows, cols = np.nonzero(values >= 0.5)
    assert select_tokens(make_mask(values)).tokens == tuple(zip(cols.tolist(), rows.tolist()))


def test_extract_patches(rng: np.random.Generator) -> None:
    features = FeatureStack(rng.normal(size=(3, 8, 10)))
    whole = PatchPlan(Strategy.GREEDY, 1, 10, 8, [PatchBox(0, 0, 10, 8)])
    (patch,) = extract_patches(features, whole)
    np.testing.assert_array_equal(patch.values, features.values)

    plan = PatchPlan(Strategy.GREEDY, 4, 3, 2, [PatchBox(0, 0, 3, 2), PatchBox(6, 5, 9, 7)])
    first, second = extract_patches(features, plan)
    np.testing.assert_array_equal(first.values, features.values[:, 0:2, 0:3])
    np.testing.assert_array_equal(second.values, features.values[:, 5:7, 6:9])
    assert extract_patches(features, PatchPlan(Strategy.GREEDY, 4, 3, 2, [])) == []


def test_extract_patches_rejects_boxes_outside() -> None:
    plan = PatchPlan(Strategy.UNIFORM, 2, 4, 4, [PatchBox(6, 0, 10, 4)])
    with pytest.raises(ShapeError):
        extract_patches(FeatureStack(np.zeros((1, 8, 8))), plan)


def test_plan_rejects_boxes_of_another_size() -> None:
    with pytest.raises(ShapeError):
        PatchPlan(Strategy.GREEDY, 2, 4, 4, [PatchBox(0, 0, 4, 3)])


def test_plan_is_read_back(fs: FakeFilesystem) -> None:
    plan = PatchPlan(Strategy.PARALLEL, 3, 4, 5, [PatchBox(0, 0, 4, 5), PatchBox(7, 2, 11, 7)])
    dump_plan(plan, "/plan.txt")
    assert Path("/plan.txt").read_text() == "parallel 3 4 5\n0 0 4 5\n7 2 11 7\n"
    assert load_plan("/plan.txt") == plan


@pytest.mark.parametrize(
    "content, line_number",
    [
        ("", 1),
        ("diagonal 3 4 4\n", 1),
        ("greedy 3 4 4\n0 0 4 4\n1 2 3\n", 3),
        ("greedy 3 4 4\n0 0 4 4\n\n0 0 5 4\n", None),
    ],
)
def test_malformed_plans_are_rejected(
    fs: FakeFilesystem,
    content: str,
    line_number: int,
) -> None:
    Path("/plan.txt").write_text(content)
    with pytest.raises(ParseError) as error:
        load_plan("/plan.txt")
    assert error.value.line_number == line_number
