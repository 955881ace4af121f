import math
from fractions import Fraction

import pytest

from icpe.boxes import Detection, iou
from icpe.data import ShapeWorldSpec, generate_dataset
from icpe.evaluation import evaluate_detector, fingerprint, parse_report_rows, voc_ap
from icpe.rng import Rng


def naive_ap(detections, gts, thresh=0.5, exact=False):
    """PR curve rebuilt point by point; the envelope at each rank is a fresh
    max over every later rank."""
    n_gt = sum(len(v) for v in gts.values())
    ranked = sorted(enumerate(detections), key=lambda t: (-t[1][1], t[0]))
    taken = set()
    hits = []
    for _, (img, _, box) in ranked:
        cands = [(iou(box, g), j) for j, g in enumerate(gts.get(img, []))]
        best = max(cands, key=lambda t: (t[0], -t[1]), default=(-1.0, -1))
        ok = best[0] >= thresh and (img, best[1]) not in taken
        if ok:
            taken.add((img, best[1]))
        hits.append(ok)
    frac = Fraction if exact else float
    prec = [frac(sum(hits[:r + 1])) / (r + 1) for r in range(len(hits))]
    area = [max(prec[r:]) for r in range(len(hits)) if hits[r]]
    if exact:
        return sum(area, Fraction(0)) / n_gt
    return math.fsum(area) / n_gt


def random_instance(rng):
    gts, dets = {}, []
    for img in range(rng.randint(1, 3)):
        boxes = []
        for _ in range(rng.randint(0, 3)):
            x, y = rng.randint(0, 20), rng.randint(0, 20)
            boxes.append((x, y, x + rng.randint(3, 8), y + rng.randint(3, 8)))
        gts[img] = boxes
    if not any(gts.values()):
        gts[0] = [(0, 0, 5, 5)]
    for _ in range(rng.randint(0, 10)):
        img = rng.randint(0, len(gts) - 1)
        if gts[img] and rng.uniform(0, 1) < 0.6:
            g = gts[img][rng.randint(0, len(gts[img]) - 1)]
            d = rng.randint(-2, 2)
            box = (g[0] + d, g[1], g[2] + d, g[3])
        else:
            x, y = rng.randint(0, 20), rng.randint(0, 20)
            box = (x, y, x + 5, y + 5)
        dets.append((img, rng.randint(0, 5) / 5, box))  # coarse scores force ties
    return dets, gts


def test_voc_ap_matches_naive_oracle_on_random_instances():
    rng = Rng(2024)
    for _ in range(200):
        dets, gts = random_instance(rng)
        got = voc_ap(dets, gts)
        assert got == naive_ap(dets, gts)
        assert got == pytest.approx(float(naive_ap(dets, gts, exact=True)), abs=1e-12)
        assert 0.0 <= got <= 1.0


def test_hand_traced_example():
    gts = {0: [(0, 0, 10, 10)], 1: [(0, 0, 10, 10)]}
    dets = [(0, 0.9, (0, 0, 10, 10)), (0, 0.8, (20, 20, 30, 30)), (1, 0.7, (0, 0, 10, 10))]
    assert voc_ap(dets, gts) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)
    assert voc_ap(dets, gts) == pytest.approx(0.8333, abs=1e-4)


def test_trivial_cases():
    assert voc_ap([(0, 0.3, (0, 0, 4, 4))], {0: [(0, 0, 4, 4)]}) == 1.0
    assert voc_ap([], {0: [(0, 0, 4, 4)]}) == 0.0
    assert voc_ap([(0, 0.3, (0, 0, 4, 4))], {0: []}) is None


def test_duplicate_detection_counts_as_false_positive():
    gts = {0: [(0, 0, 4, 4)]}
    assert voc_ap([(0, 0.9, (0, 0, 4, 4)), (0, 0.8, (0, 0, 4, 4))], gts) == 1.0
    # the duplicate ranked first would not change it either; a miss ranked first halves precision
    assert voc_ap([(0, 0.9, (9, 9, 12, 12)), (0, 0.8, (0, 0, 4, 4))], gts) == 0.5


def test_adding_a_top_ranked_true_positive_never_lowers_ap():
    rng = Rng(5)
    for _ in range(50):
        dets, gts = random_instance(rng)
        before = voc_ap(dets, gts)
        img = next(i for i, b in gts.items() if b)
        extra_gt = (40, 40, 46, 46)
        gts2 = {i: list(b) for i, b in gts.items()}
        gts2[img].append(extra_gt)
        after_miss = voc_ap(dets, gts2)
        after_hit = voc_ap([(img, 2.0, extra_gt)] + dets, gts2)
        assert after_hit >= after_miss
        assert after_miss <= before


@pytest.fixture(scope="module")
def world():
    return generate_dataset(ShapeWorldSpec(seed=11), 8)


def _run(world, detect, seeds=(0,)):
    spec = world.spec
    return evaluate_detector(detect, world, spec.all_classes, spec.base_classes, spec.novel_classes, list(seeds))


def test_perfect_and_empty_stubs(world):
    lookup = {im.image.tobytes(): im.boxes for im in world.images}

    def perfect(image):
        return [Detection(*b.coords, b.class_id, 1.0) for b in lookup[image.tobytes()]]

    rep = _run(world, perfect)
    present = [c for c, n in rep.gt_counts.items() if n]
    assert all(rep.per_seed[0][c] == 1.0 for c in present)
    assert set(rep.per_seed[0]) == set(present)  # classes without GTs are excluded
    empty = _run(world, lambda image: [])
    assert all(v == 0.0 for v in empty.per_seed[0].values())
    assert empty.map_novel == 0.0 and empty.map_base == 0.0


def test_map_is_mean_of_member_aps(world):
    rng = Rng(3)

    def noisy(image):
        out = []
        for _ in range(3):
            x, y = rng.randint(0, 40), rng.randint(0, 40)
            out.append(Detection(x, y, x + 20, y + 20, rng.randint(0, 7), rng.uniform(0, 1)))
        return out

    rep = _run(world, noisy, seeds=(0, 1))
    for s in (0, 1):
        base = [rep.per_seed[s][c] for c in world.spec.base_classes if c in rep.per_seed[s]]
        assert rep.seed_map(s, "base") == pytest.approx(sum(base) / len(base), abs=1e-15)
    assert rep.map_base == pytest.approx((rep.seed_map(0, "base") + rep.seed_map(1, "base")) / 2, abs=1e-15)


def test_report_text_round_trip_and_determinism(world):
    def det(image):
        return [Detection(0, 0, 30, 30, 0, 0.5)]

    a, b = _run(world, det), _run(world, det)
    assert a.to_text() == b.to_text()
    assert a.to_text().startswith("icpe-eval 1\n")
    rows = parse_report_rows(a.to_text())
    assert rows == [(l, s, sp, c, ap) for l, s, sp, c, ap in a.rows()]


def test_fingerprint_is_stable_and_sensitive():
    assert fingerprint({"a": 1, "b": [1, 2]}) == fingerprint({"b": [1, 2], "a": 1})
    assert fingerprint({"a": 1}) != fingerprint({"a": 2})
    assert len(fingerprint({})) == 16
