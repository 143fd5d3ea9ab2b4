import numpy as np

from dvio import fast
from oracles import segment_test_corners


def test_constant_image_has_no_corners():
    img = np.full((32, 32), 77, dtype=np.uint8)
    out = fast.detect_region(img, 20, 0, 0, 32, 32)
    assert out.shape == (0, 3)


def test_bright_impulse_detected_with_positive_score():
    img = np.zeros((16, 16), dtype=np.uint8)
    img[8, 8] = 200
    out = fast.detect_region(img, 20, 0, 0, 16, 16)
    found = {(x, y): s for x, y, s in out}
    assert (8, 8) in found
    assert found[(8, 8)] > 0
    # score is the largest threshold still passing: all ring diffs are -200
    assert found[(8, 8)] == 199


def test_matches_bruteforce_oracle_on_random_images():
    rng = np.random.default_rng(0)
    for trial in range(20):
        img = rng.integers(0, 256, size=(48, 48), dtype=np.uint8)
        ours = {(x, y) for x, y, _ in fast.detect_region(img, 20, 0, 0, 48, 48)}
        ref = segment_test_corners(img, 20)
        assert ours == ref, f"trial {trial}: sets differ"


def test_union_over_grid_cells_equals_full_region():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(60, 80), dtype=np.uint8)
    full = {(x, y) for x, y, _ in fast.detect_region(img, 20, 0, 0, 80, 60)}
    tiled = set()
    for y0 in range(0, 60, 20):
        for x0 in range(0, 80, 20):
            cell = fast.detect_cell(img, (x0, y0, x0 + 20, y0 + 20), 20)
            tiled |= {(x, y) for x, y, _ in cell}
    assert tiled == full


def test_masked_pixels_excluded():
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, size=(40, 40), dtype=np.uint8)
    blocked = np.zeros((40, 40), dtype=bool)
    blocked[:, :20] = True
    out = fast.detect_region(img, 20, 0, 0, 40, 40, blocked)
    assert out.shape[0] > 0
    assert np.all(out[:, 0] >= 20)


def test_cell_candidates_sorted_by_score_then_pixel_order():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, size=(40, 40), dtype=np.uint8)
    out = fast.detect_cell(img, (0, 0, 40, 40), 15)
    scores = out[:, 2]
    assert np.all(np.diff(scores) <= 0)
    for k in range(len(out) - 1):
        if scores[k] == scores[k + 1]:
            y0, y1 = out[k, 1], out[k + 1, 1]
            assert (y0, out[k, 0]) < (y1, out[k + 1, 0])


def test_scores_are_max_threshold_preserving_cornerness():
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, size=(40, 40), dtype=np.uint8)
    out = fast.detect_region(img, 20, 0, 0, 40, 40)
    for x, y, s in out[:25]:
        assert (int(x), int(y)) in segment_test_corners(img, int(s)), "should pass at own score"
        assert (int(x), int(y)) not in segment_test_corners(img, int(s) + 1), (
            "must fail just above the score"
        )
