import subprocess
import sys

import pytest

from icpe.cli import main
from icpe.config import ConfigError, RunConfig, apply_overrides, parse_config_text

TINY = ["--data.n_train=24", "--data.n_test=4", "--data.supports_per_class=3",
        "--meta_train.iterations=2", "--finetune.iterations=2", "--run.seed=3"]
PIPELINE = ("meta-train", "finetune", "eval", "dump-viz")


def run_pipeline(out, extra):
    for cmd in PIPELINE:
        assert main([cmd, "--out", str(out), "-q", *extra]) == 0, cmd


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_defaults_are_runnable_and_round_trip():
    cfg = RunConfig()
    assert parse_config_text(cfg.resolved_text()) == cfg
    assert cfg.model.alpha == 1.0 and cfg.meta_train.lam == 1.0
    assert cfg.meta_train.iterations == 2000 and cfg.finetune.iterations == 400


def test_overrides_and_validation():
    cfg = apply_overrides(RunConfig(), [("model.alpha", "0.5"), ("ablate.arms", "baseline,icpe"),
                                        ("eval.seeds", "1,2"), ("model.use_cic", "false"),
                                        ("model.use_ccm", "off")])
    assert cfg.model.alpha == 0.5 and cfg.ablate.arms == ("baseline", "icpe") and cfg.eval.seeds == (1, 2)
    for bad in ([("model.nope", "1")], [("model.alpha", "x")], [("model.alpha", "-1")],
                [("meta_train.lam", "-0.5")], [("model.use_cic", "false")]):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), bad)


def test_flag_only_difference_between_arm_configs():
    from icpe.ablation import ARMS, arm_config
    a = arm_config(RunConfig(), ARMS["baseline"])
    b = arm_config(RunConfig(), ARMS["icpe"])
    strip = lambda c: [l for l in c.resolved_text().splitlines()
                       if not l.split(" = ")[0] in c.flag_block()]
    assert strip(a) == strip(b) and a.flag_block() != b.flag_block()


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["eval", "--out", str(tmp_path), "--model.nope=1"]) == 1
    assert main(["eval", "--out", str(tmp_path), "--frobnicate"]) == 1
    assert main(["eval", "--out", str(tmp_path), "--model.alpha=oops"]) == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nalpha = -3\n")
    assert main(["eval", "--out", str(tmp_path), "--config", str(bad)]) == 1


def test_missing_checkpoint_is_a_runtime_failure(tmp_path):
    assert main(["eval", "--out", str(tmp_path), "-q", *TINY]) == 2


def test_module_entry_point_prints_usage():
    proc = subprocess.run([sys.executable, "-m", "icpe", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr


@pytest.mark.slow
def test_gradcheck_command_exits_0(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path), "-q"]) == 0
    assert (tmp_path / "gradcheck.txt").read_text().startswith("icpe-gradcheck 1")


def test_gen_data_writes_both_splits(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "-q", *TINY]) == 0
    for split in ("dataset", "testset"):
        assert (tmp_path / split / "manifest.txt").read_text().startswith("icpe-dataset 1")


def test_eval_twice_is_byte_identical(tmp_path):
    run_pipeline(tmp_path, TINY)
    first = (tmp_path / "eval_report.txt").read_bytes()
    assert main(["eval", "--out", str(tmp_path), "-q", *TINY]) == 0
    assert (tmp_path / "eval_report.txt").read_bytes() == first


def test_snapshot_replay_reproduces_every_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_pipeline(a, TINY)
    snap = tmp_path / "snapshot.ini"
    snap.write_bytes((a / "config.resolved.ini").read_bytes())
    run_pipeline(b, ["--config", str(snap)])
    assert tree(a) == tree(b)
    assert {"meta_train.ckpt", "finetune.ckpt", "eval_report.txt", "config.resolved.ini"} <= set(tree(a))
