"""Command-line entry point.

    icpe <subcommand> [--config FILE] [--out DIR] [--section.key=value ...]

Exit status: 0 on success, 1 on usage or validation errors, 2 on runtime
failures (including a failing gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, RunConfig, apply_overrides, load_config

log = logging.getLogger("icpe")

COMMANDS = ("gen-data", "meta-train", "finetune", "eval", "ablate", "gradcheck", "dump-viz")
SNAPSHOT = "config.resolved.ini"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icpe", description="Few-shot detection on a synthetic shape world.",
                epilog="Any config key can be overridden with --section.key=value "
                       "(sections: run, data, model, meta_train, finetune, eval, ablate).")
    p.add_argument("command", choices=COMMANDS, metavar="command", help=" | ".join(COMMANDS))
    p.add_argument("--config", help="INI file with [section] key = value entries")
    p.add_argument("--out", default="out", help="output directory; every path is relative to it")
    p.add_argument("--checkpoint", help="checkpoint to load (relative to --out)")
    p.add_argument("--scope", default="ops,modules,end2end", help="gradcheck scopes")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def _overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg or "." not in arg.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument {arg!r}")
        key, value = arg[2:].split("=", 1)
        pairs.append((key, value))
    return pairs


def resolve_config(args, extra) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, _overrides(extra))


def _datasets(cfg: RunConfig, out: Path):
    """Training world from ``out/dataset`` when present (bit-exact with a fresh
    generation), otherwise generated; the test split is always generated."""
    from .data import Dataset, load_dataset
    from .pipeline import build_datasets

    train, test = build_datasets(cfg)
    stored = out / "dataset" / "manifest.txt"
    if stored.exists():
        loaded = load_dataset(out / "dataset")
        if loaded.spec != train.spec:
            raise ConfigError(f"{stored} was generated from a different data config")
        train = Dataset(loaded.spec, loaded.images, loaded.supports)
    return train, test


def _load(cfg: RunConfig, out: Path, explicit: str | None, default: str):
    from .pipeline import load_model

    path = out / (explicit or default)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found (run the previous stage first)")
    return load_model(cfg, path)


def cmd_gen_data(cfg, args, out: Path) -> int:
    from .data import save_dataset
    from .pipeline import build_datasets

    train, test = build_datasets(cfg)
    save_dataset(train, out / "dataset")
    save_dataset(test, out / "testset")
    log.info("gen-data images=%d supports=%d test_images=%d", len(train.images), len(train.supports),
             len(test.images))
    return 0


def cmd_meta_train(cfg, args, out: Path) -> int:
    from .pipeline import run_meta_train, save_model, write_trace

    train, _ = _datasets(cfg, out)
    model, trace = run_meta_train(cfg, train)
    save_model(model, out / "meta_train.ckpt", train.spec.base_classes)
    write_trace(trace, out / "meta_train_trace.csv")
    log.info("meta-train done iterations=%d final_loss=%r", len(trace.losses),
             trace.smoothed()[-1] if trace.losses else float("nan"))
    return 0


def cmd_finetune(cfg, args, out: Path) -> int:
    from .pipeline import fewshot_set, run_finetune, save_model, write_trace

    train, _ = _datasets(cfg, out)
    model = _load(cfg, out, args.checkpoint, "meta_train.ckpt")
    k = cfg.finetune.k
    fs = fewshot_set(cfg, train, k, cfg.seed)
    trace = run_finetune(cfg, model, fs, k)
    save_model(model, out / "finetune.ckpt", train.spec.all_classes)
    write_trace(trace, out / "finetune_trace.csv")
    log.info("finetune done iterations=%d k=%d", len(trace.losses), k)
    return 0


def cmd_eval(cfg, args, out: Path) -> int:
    from .pipeline import fewshot_set, run_eval

    train, test = _datasets(cfg, out)
    model = _load(cfg, out, args.checkpoint, "finetune.ckpt")
    pool = fewshot_set(cfg, train, cfg.eval.k, cfg.seed)
    report = run_eval(cfg, model, test, pool, cfg.eval.k, list(cfg.eval.seeds))
    report.write(out / "eval_report.txt")
    log.info("eval done map_novel=%.4f map_base=%.4f fingerprint=%s", report.map_novel, report.map_base,
             report.fingerprint)
    return 0


def cmd_ablate(cfg, args, out: Path) -> int:
    from .ablation import resolve_arms, run_ablation

    a = cfg.ablate
    text = run_ablation(cfg, resolve_arms(a.arms), a.seeds, a.shots, out / "ablation", workers=a.workers)
    for line in text.splitlines():
        if line.startswith(("summary", "direction")):
            log.info("ablate %s", line)
    return 0


def cmd_gradcheck(cfg, args, out: Path) -> int:
    from .gradcheck import grad_check_suite

    scopes = tuple(s.strip() for s in args.scope.split(",") if s.strip())
    try:
        report = grad_check_suite(scopes, seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    (out / "gradcheck.txt").write_text(report.to_text())
    for f in report.failures:
        log.error("gradcheck failure %s", f)
    log.info("gradcheck cases=%d passed=%s", len(report.results), report.passed)
    return 0 if report.passed else 2


def cmd_dump_viz(cfg, args, out: Path) -> int:
    from .data import sample_episode
    from .pipeline import fewshot_set, new_model
    from .rng import Rng, derive_seed
    from .viz import dump_visualizations

    train, _ = _datasets(cfg, out)
    if args.checkpoint or (out / "finetune.ckpt").exists():
        model = _load(cfg, out, args.checkpoint, "finetune.ckpt")
    else:
        model = new_model(cfg)
    k = cfg.eval.k
    fs = fewshot_set(cfg, train, k, cfg.seed)
    episode = sample_episode(fs, train.spec.all_classes, k, 1, Rng(derive_seed(cfg.seed, "viz")))
    files = dump_visualizations(model, episode, out / "viz")
    log.info("dump-viz files=%d dir=%s", len(files), out / "viz")
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "meta-train": cmd_meta_train, "finetune": cmd_finetune,
            "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "dump-viz": cmd_dump_viz}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, extra = parser.parse_known_args(argv)
        cfg = resolve_config(args, extra)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"icpe: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, OSError) as exc:
        print(f"icpe: config error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s %(message)s", stream=sys.stderr, force=True)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / SNAPSHOT).write_text(cfg.resolved_text())
    except OSError as exc:
        log.error("cannot write to output directory error=%r", str(exc))
        return 2
    t0 = time.perf_counter()
    try:
        status = HANDLERS[args.command](cfg, args, out)
    except ConfigError as exc:
        log.error("validation failed command=%s error=%r", args.command, str(exc))
        return 1
    except Exception as exc:  # runtime failure: report and map to exit 2
        log.error("command failed command=%s error=%r", args.command, f"{type(exc).__name__}: {exc}")
        return 2
    log.info("finished command=%s status=%d seconds=%.1f", args.command, status, time.perf_counter() - t0)
    return status


if __name__ == "__main__":
    sys.exit(main())
