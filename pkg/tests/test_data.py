import numpy as np
import pytest

from icpe.data import (CLASS_NAMES, Dataset, InsufficientData, ShapeWorldSpec, few_shot_subset,
                       generate_dataset, load_dataset, render_mask, sample_episode, save_dataset)
from icpe.pnm import read_pgm, read_ppm, write_pgm, write_ppm
from icpe.rng import Rng, derive_seed

SPEC = ShapeWorldSpec(seed=3, supports_per_class=4)


@pytest.fixture(scope="module")
def world():
    return generate_dataset(SPEC, 40)


def test_same_seed_gives_identical_dataset(world):
    again = generate_dataset(SPEC, 40)
    for a, b in zip(world.images, again.images):
        assert a.image.tobytes() == b.image.tobytes() and a.boxes == b.boxes
    for a, b in zip(world.supports, again.supports):
        assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()


def test_different_seed_differs():
    other = generate_dataset(ShapeWorldSpec(seed=4, supports_per_class=4), 5)
    base = generate_dataset(SPEC, 5)
    assert any(a.image.tobytes() != b.image.tobytes() for a, b in zip(base.images, other.images))


def test_generation_is_order_independent():
    from icpe.data import render_scene
    full = generate_dataset(SPEC, 12)
    assert render_scene(SPEC, 11).image.tobytes() == full.images[11].image.tobytes()


def test_boxes_valid_and_separated(world):
    size = SPEC.image_size
    from icpe.boxes import iou
    for im in world.images:
        assert 1 <= len(im.boxes) <= 3
        assert im.image.shape == (size, size, 3) and im.image.dtype == np.uint8
        for b in im.boxes:
            assert 0 <= b.x1 < b.x2 <= size and 0 <= b.y1 < b.y2 <= size
        for i, a in enumerate(im.boxes):
            for b in im.boxes[i + 1:]:
                assert iou(a, b) < 0.2


@pytest.mark.parametrize("s", [8, 16, 23])
def test_square_mask_has_s_squared_pixels(s):
    m = render_mask(CLASS_NAMES.index("square"), 10, 5, s, 64)
    assert m.sum() == s * s


def test_every_class_drawable_at_all_scales():
    for cid in range(len(CLASS_NAMES)):
        for s in range(14, 41):
            assert render_mask(cid, 0, 0, s, 64).sum() > 0


def test_supports_centered_with_exact_masks(world):
    for s in world.supports:
        assert set(np.unique(s.mask)) <= {0, 1} and s.mask.sum() > 0
        ys, xs = np.nonzero(s.mask)
        cy, cx = (ys.min() + ys.max() + 1) / 2, (xs.min() + xs.max() + 1) / 2
        assert abs(cy - 32) <= 3 and abs(cx - 32) <= 3


def test_spec_rejects_overlapping_splits():
    with pytest.raises(ValueError):
        ShapeWorldSpec(base_classes=(0, 1), novel_classes=(1, 2))


def test_episode_shapes_and_labels(world):
    ep = sample_episode(world, (0, 1, 2), 1, 2, Rng(5))
    assert ep.classes == [0, 1, 2]
    for cid, sups in ep.supports.items():
        assert len(sups) == 1 and all(s.class_id == cid for s in sups)
    for q in ep.queries:
        assert q.classes <= {0, 1, 2}


def test_episode_reproducible_and_without_replacement(world):
    a = sample_episode(world, (3, 4), 3, 1, Rng(6))
    b = sample_episode(world, (3, 4), 3, 1, Rng(6))
    assert [s.index for s in a.supports[3]] == [s.index for s in b.supports[3]]
    assert len({s.index for s in a.supports[4]}) == 3


def test_insufficient_supports_names_the_class(world):
    with pytest.raises(InsufficientData, match="star"):
        sample_episode(world, (7,), 5, 1, Rng(0))


def test_access_log_records_queries(world):
    log = []
    ep = sample_episode(world, SPEC.base_classes, 1, 2, Rng(7), log)
    assert log == [q.index for q in ep.queries]


def test_few_shot_subset_is_balanced(world):
    fs = few_shot_subset(world, SPEC.base_classes, SPEC.novel_classes, 2, Rng(8))
    for cid in SPEC.all_classes:
        assert len(fs.supports_of(cid)) == 2
        assert len(fs.images_with(cid)) >= 1
    for im in fs.images:
        assert len(im.classes & set(SPEC.novel_classes)) <= 1


def test_disk_round_trip_is_bit_exact(world, tmp_path):
    save_dataset(world, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.spec == world.spec
    assert len(back.images) == len(world.images) and len(back.supports) == len(world.supports)
    for a, b in zip(world.images, back.images):
        assert a.image.tobytes() == b.image.tobytes() and a.boxes == b.boxes and a.index == b.index
    for a, b in zip(world.supports, back.supports):
        assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()
        assert a.class_id == b.class_id
    first = (tmp_path / "ds" / "manifest.txt").read_text().splitlines()[0]
    assert first == "icpe-dataset 1"


def test_pnm_round_trip(tmp_path):
    rgb = (np.arange(4 * 5 * 3) % 256).astype(np.uint8).reshape(4, 5, 3)
    write_ppm(tmp_path / "a.ppm", rgb)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), rgb)
    gray = (np.arange(12) * 20).astype(np.uint8).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", gray)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), gray)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")


def test_rng_streams_are_deterministic_and_in_range():
    a, b = Rng(derive_seed(1, "x")), Rng(derive_seed(1, "x"))
    assert [a.next_u64() for _ in range(5)] == [b.next_u64() for _ in range(5)]
    r = Rng(2)
    vals = [r.randint(3, 5) for _ in range(300)]
    assert set(vals) == {3, 4, 5}
    u = r.uniform_array((1000,), -1, 1)
    assert u.min() >= -1 and u.max() < 1
    assert derive_seed(1, "x") != derive_seed(1, "y")


def test_dataset_helpers_on_empty_world():
    ds = Dataset(SPEC, [], [])
    assert ds.supports_of(0) == [] and ds.images_within((0,)) == []
