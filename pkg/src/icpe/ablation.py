"""Module ablations: arms share data, seeds and schedules and differ only
in their model flags."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from statistics import median

from .config import RunConfig
from .evaluation import fingerprint, parse_report_rows

log = logging.getLogger(__name__)

RESULTS_HEADER = "icpe-ablation 1"


@dataclass(frozen=True)
class AblationArm:
    name: str
    use_cic: bool = False
    use_ccm: bool = False
    use_intra: bool = False
    use_inter: bool = False
    img_proto: str = "gap"
    embed_dim: int = 0

    def __post_init__(self):
        if self.use_ccm and not self.use_cic:
            raise ValueError(f"arm {self.name}: use_ccm requires use_cic")
        if self.img_proto not in ("gap", "gap+gmp"):
            raise ValueError(f"arm {self.name}: unknown img_proto {self.img_proto!r}")
        if "," in self.name or "@" in self.name:
            raise ValueError(f"arm name {self.name!r} may not contain ',' or '@'")

    def flags(self) -> dict:
        out = asdict(self)
        out.pop("name")
        return out


ARMS = {
    "baseline": AblationArm("baseline"),
    "cic": AblationArm("cic", use_cic=True, use_ccm=True),
    "pda": AblationArm("pda", use_intra=True, use_inter=True),
    "icpe": AblationArm("icpe", use_cic=True, use_ccm=True, use_intra=True, use_inter=True),
    "cic_no_ccm": AblationArm("cic_no_ccm", use_cic=True),
    "gmp": AblationArm("gmp", img_proto="gap+gmp"),
    "intra": AblationArm("intra", use_intra=True),
    "icpe_d8": AblationArm("icpe_d8", True, True, True, True, embed_dim=8),
    "icpe_d16": AblationArm("icpe_d16", True, True, True, True, embed_dim=16),
    "icpe_d64": AblationArm("icpe_d64", True, True, True, True, embed_dim=64),
}
MANDATORY = ("baseline", "cic", "pda", "icpe")


def resolve_arms(names) -> list[AblationArm]:
    unknown = [n for n in names if n not in ARMS]
    if unknown:
        raise ValueError(f"unknown ablation arm(s) {unknown}; known: {sorted(ARMS)}")
    return [ARMS[n] for n in names]


def arm_config(cfg: RunConfig, arm: AblationArm) -> RunConfig:
    return cfg.with_model_flags(**arm.flags())


def run_arm(cfg: RunConfig, arm: AblationArm, seeds, shots, out_dir=None) -> list[tuple]:
    """All (seed, shot) runs of one arm: meta-train per seed, then finetune a
    copy per shot count and evaluate it on the shared test split."""
    from .pipeline import build_datasets, clone_model, fewshot_set, run_eval, run_finetune, run_meta_train

    acfg = arm_config(cfg, arm)
    train, test = build_datasets(acfg)
    rows = []
    for seed in seeds:
        t0 = time.perf_counter()
        base_model, _ = run_meta_train(acfg, train, seed=seed)
        for k in shots:
            model = clone_model(base_model)
            fs = fewshot_set(acfg, train, k, seed)
            run_finetune(acfg, model, fs, k, seed=seed)
            draws = [seed] + [seed + 1000 * j for j in range(1, cfg.ablate.eval_draws)]
            report = run_eval(acfg, model, test, fs, k, draws, label=f"{arm.name}@{k}shot")
            for c, ap in sorted(report.per_class.items()):
                split = "novel" if c in report.novel_classes else "base"
                rows.append((report.label, seed, split, c, ap))
        log.info("ablate arm=%s seed=%d seconds=%.1f", arm.name, seed, time.perf_counter() - t0)
    if out_dir is not None:
        path = Path(out_dir) / f"arm_{arm.name}.csv"
        path.write_text(format_rows(rows))
    return rows


def format_rows(rows) -> str:
    return "".join(f"{a},{s},{sp},{c},{ap!r}\n" for a, s, sp, c, ap in rows)


def _split_label(label: str) -> tuple[str, int]:
    name, _, shot = label.partition("@")
    return name, int(shot.removesuffix("shot")) if shot else 0


def summarize(rows, arms, seeds, shots) -> dict:
    """Per (arm, shot, split): per-seed mAP list, median, mean and range."""
    table: dict = {}
    for arm in arms:
        for k in shots:
            for split in ("novel", "base"):
                per_seed = []
                for s in seeds:
                    aps = [ap for a, sd, sp, _, ap in rows
                           if _split_label(a) == (arm, k) and sd == s and sp == split]
                    if aps:
                        per_seed.append(sum(aps) / len(aps))
                if per_seed:
                    table[(arm, k, split)] = {
                        "per_seed": per_seed, "median": median(per_seed),
                        "mean": sum(per_seed) / len(per_seed), "min": min(per_seed), "max": max(per_seed)}
    return table


def direction_checks(table, shots) -> list[tuple[str, bool]]:
    """Ordering of median novel mAP over the mandatory arms, per shot and pooled."""
    checks = []
    for k in list(shots) + ["all"]:
        def med(arm):
            if k == "all":
                vals = [v for kk in shots for v in table[(arm, kk, "novel")]["per_seed"]]
                return median(vals)
            return table[(arm, k, "novel")]["median"]
        try:
            b, c, p, full = (med(a) for a in MANDATORY)
        except KeyError:
            continue
        tag = f"{k}shot" if k != "all" else "pooled"
        checks.append((f"{tag}: baseline < icpe", b < full))
        checks.append((f"{tag}: icpe >= cic", full >= c))
        checks.append((f"{tag}: icpe >= pda", full >= p))
    return checks


def config_fingerprint(cfg: RunConfig) -> str:
    """Identifies the shared settings; the per-arm flags are excluded."""
    neutral = cfg.with_model_flags(**ARMS["baseline"].flags())
    neutral = replace(neutral, ablate=replace(neutral.ablate, workers=1))
    return fingerprint(neutral.resolved_text())


def format_results(cfg: RunConfig, arms, seeds, shots, rows) -> str:
    names = [a.name for a in arms]
    order = {n: i for i, n in enumerate(names)}
    rows = sorted(rows, key=lambda r: (order[_split_label(r[0])[0]], _split_label(r[0])[1], r[1], r[3]))
    table = summarize(rows, names, seeds, shots)
    lines = [RESULTS_HEADER, f"arms {','.join(names)}", f"seeds {','.join(map(str, seeds))}",
             f"shots {','.join(map(str, shots))}", f"config {config_fingerprint(cfg)}",
             "# arm,seed,split,class,AP"]
    lines += format_rows(rows).splitlines()
    lines.append("# summary: arm shot split median mean [min, max] over seeds")
    for (arm, k, split), st in table.items():
        lines.append(f"summary arm={arm} shot={k} split={split} median={st['median']:.4f} "
                     f"mean={st['mean']:.4f} range=[{st['min']:.4f},{st['max']:.4f}]")
    for label, ok in direction_checks(table, shots):
        lines.append(f"direction {label.replace(' ', '_')} {'holds' if ok else 'violated'}")
    return "\n".join(lines) + "\n"


def parse_results(text: str) -> dict:
    lines = text.splitlines()
    if not lines or lines[0] != RESULTS_HEADER:
        raise ValueError("not an ablation results file")
    meta = {}
    for line in lines[1:5]:
        key, _, val = line.partition(" ")
        meta[key] = val.split(",")
    seeds = [int(s) for s in meta["seeds"]]
    shots = [int(s) for s in meta["shots"]]
    rows = parse_report_rows(text)
    return {"arms": meta["arms"], "seeds": seeds, "config": meta["config"][0], "shots": shots, "rows": rows,
            "table": summarize(rows, meta["arms"], seeds, shots)}


def _arm_job(args):
    cfg, arm, seeds, shots, out_dir = args
    return run_arm(cfg, arm, seeds, shots, out_dir)


def run_ablation(cfg: RunConfig, arms, seeds, shots, out_dir=None, workers: int = 1) -> str:
    """Run every arm and return the formatted results text (also written to
    ``out_dir/results.txt``). Each finished arm is persisted on its own."""
    arms = [a if isinstance(a, AblationArm) else ARMS[a] for a in arms]
    names = [a.name for a in arms]
    missing = [m for m in MANDATORY if m not in names]
    if missing:
        raise ValueError(f"ablation needs the mandatory arms {list(MANDATORY)}; missing {missing}")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    jobs = [(cfg, arm, list(seeds), list(shots), out_dir) for arm in arms]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_arm_job, jobs))
    else:
        results = [_arm_job(j) for j in jobs]
    rows = [r for arm_rows in results for r in arm_rows]
    text = format_results(cfg, arms, list(seeds), list(shots), rows)
    log.info("ablate done arms=%d seconds=%.1f", len(arms), time.perf_counter() - t0)
    if out_dir is not None:
        (Path(out_dir) / "results.txt").write_text(text)
    return text
