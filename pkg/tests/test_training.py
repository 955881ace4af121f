import numpy as np
import pytest

from icpe.checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from icpe.data import ShapeWorldSpec, few_shot_subset, generate_dataset
from icpe.detector import ICPEDetector, ModelConfig, predict
from icpe.evaluation import evaluate_map
from icpe.rng import Rng
from icpe.training import Schedule, meta_finetune, meta_train

SPEC = ShapeWorldSpec(seed=21, supports_per_class=6)


@pytest.fixture(scope="module")
def world():
    return generate_dataset(SPEC, 160)


def snapshot(model):
    return {k: v.copy() for k, v in model.params.state().items()}


def same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_lr_zero_leaves_parameters_bit_identical(world):
    m = ICPEDetector(ModelConfig(), seed=0)
    before = snapshot(m)
    meta_train(m, world, Schedule(iterations=3, lr=0.0, weight_decay=0.0))
    assert same(before, snapshot(m))


def test_zero_iterations_finetune_is_a_no_op(world):
    m = ICPEDetector(ModelConfig(), seed=0)
    before = snapshot(m)
    log = meta_finetune(m, world, Schedule(iterations=0))
    assert same(before, snapshot(m)) and log.losses == []


def test_trace_and_parameters_reproducible(world):
    runs = []
    for _ in range(2):
        m = ICPEDetector(ModelConfig(), seed=4)
        log = meta_train(m, world, Schedule(iterations=4, lr=0.01, seed=9))
        runs.append((log.losses, dumps(m.params.state())))
    assert runs[0] == runs[1]


@pytest.fixture(scope="module")
def trained(world):
    toy = generate_dataset(ShapeWorldSpec(seed=21, base_classes=(0, 1), novel_classes=(6,),
                                          supports_per_class=6), 160)
    m = ICPEDetector(ModelConfig(), seed=1)
    log = meta_train(m, toy, Schedule(iterations=200, lr=0.01, seed=1))
    return toy, m, log


@pytest.mark.slow
def test_two_class_toy_loss_decreases(trained):
    _, _, log = trained
    smooth = log.smoothed(40)
    assert smooth[-1] < smooth[39]


@pytest.mark.slow
def test_meta_train_never_visits_novel_images(trained):
    toy, _, log = trained
    by_index = {im.index: im for im in toy.images}
    assert log.visited_images
    for idx in log.visited_images:
        assert not (by_index[idx].classes & set(toy.spec.novel_classes))


@pytest.mark.slow
def test_finetune_emits_novel_detections_and_keeps_base_map(trained):
    toy, model, _ = trained
    test = generate_dataset(ShapeWorldSpec(seed=77, base_classes=(0, 1), novel_classes=(6,)), 20)
    before = evaluate_map(model, test, toy, 1, [0], classes=toy.spec.base_classes).map_base
    fs = few_shot_subset(toy, toy.spec.base_classes, toy.spec.novel_classes, 3, Rng(2))
    meta_finetune(model, fs, Schedule(iterations=60, lr=0.001, k=3, seed=2))
    after = evaluate_map(model, test, toy, 1, [0], classes=toy.spec.base_classes).map_base
    assert after >= before - 0.15
    easy = next(im for im in test.images if 6 in im.classes)
    dets = predict(easy.image, {6: fs.supports_of(6)[:1]}, model)
    assert dets and all(d.class_id == 6 for d in dets)


def test_checkpoint_round_trip_and_corruption(tmp_path):
    m = ICPEDetector(ModelConfig(), seed=3)
    save_checkpoint(m.params, tmp_path / "a.ckpt")
    state = load_checkpoint(tmp_path / "a.ckpt")
    assert same(state, m.params.state())
    blob = (tmp_path / "a.ckpt").read_bytes()
    assert blob.startswith(b"ICPECKPT")
    fresh = ICPEDetector(ModelConfig(), seed=99)
    fresh.params.load_state(state)
    assert same(fresh.params.state(), m.params.state())
    for bad in (b"NOTACKPT" + blob[8:], blob[:-3], blob + b"\0"):
        with pytest.raises(CheckpointError):
            loads(bad)
