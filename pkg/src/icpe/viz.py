"""Heatmap dumps of coupling conditions and aggregation weights.

Each map is written as an 8-bit PGM scaled by its own min and max, next to a
sidecar text file that stores the raw range and every raw value with full
float precision, so the dump loses nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Episode
from .pnm import write_pgm

HEATMAP_HEADER = "icpe-heatmap 1"
CONTRIB_HEADER = "icpe-contributions 1"
MID_GRAY = 128


@dataclass
class Heatmap:
    name: str
    values: np.ndarray  # raw float map [H, W]
    lo: float
    hi: float
    constant: bool


def normalize_map(values: np.ndarray) -> tuple[np.ndarray, float, float, bool]:
    """Min-max scale to 0..255; a constant map becomes uniform mid-gray."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.full(v.shape, MID_GRAY, dtype=np.uint8), lo, hi, True
    scaled = np.rint((v - lo) / (hi - lo) * 255.0)
    return np.clip(scaled, 0, 255).astype(np.uint8), lo, hi, False


def sidecar_text(name: str, values: np.ndarray, lo: float, hi: float, constant: bool) -> str:
    h, w = values.shape
    lines = [HEATMAP_HEADER, f"map {name}", f"shape {h} {w}", f"min {lo!r}", f"max {hi!r}",
             f"constant {int(constant)}"]
    lines += ["row " + " ".join(repr(float(x)) for x in row) for row in values]
    return "\n".join(lines) + "\n"


def parse_sidecar(text: str) -> Heatmap:
    lines = text.splitlines()
    if not lines or lines[0] != HEATMAP_HEADER:
        raise ValueError("not a heatmap sidecar")
    fields: dict[str, str] = {}
    rows = []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "row":
            rows.append([float(x) for x in rest.split()])
        else:
            fields[key] = rest
    h, w = (int(x) for x in fields["shape"].split())
    values = np.array(rows, dtype=np.float64).reshape(h, w)
    return Heatmap(fields["map"], values, float(fields["min"]), float(fields["max"]),
                   fields["constant"] == "1")


def write_heatmap(out_dir: Path, stem: str, values: np.ndarray) -> Heatmap:
    img, lo, hi, const = normalize_map(values)
    write_pgm(out_dir / f"{stem}.pgm", img)
    (out_dir / f"{stem}.txt").write_text(sidecar_text(stem, np.asarray(values, dtype=np.float64), lo, hi, const))
    return Heatmap(stem, np.asarray(values, dtype=np.float64), lo, hi, const)


def parse_contributions(text: str) -> dict[tuple[int, int], list[float]]:
    """``(query, class) -> [contribution per support]``."""
    lines = text.splitlines()
    if not lines or lines[0] != CONTRIB_HEADER:
        raise ValueError("not a contributions file")
    out: dict[tuple[int, int], list[float]] = {}
    for line in lines[1:]:
        if not line or line.startswith("#"):
            continue
        kv = dict(part.split("=", 1) for part in line.split())
        out.setdefault((int(kv["query"]), int(kv["class"])), []).append(float(kv["contribution"]))
    return out


def dump_visualizations(model, episode: Episode, out_dir) -> list[Path]:
    """Write condition and intra-image weight maps per (query, support) pair,
    plus the inter-image contribution list. Returns the files written."""
    from .detector import prepare_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    with T.no_grad():
        support_feats = model.encode_supports(episode.supports)
        contrib_lines = [CONTRIB_HEADER, "# query class support contribution mode"]
        for qi, q in enumerate(episode.queries):
            image = q.image if hasattr(q, "image") else q
            x_q = T.index(model.features(prepare_image(image)[None]), 0)
            protos, coupled = model.class_prototypes(x_q, support_feats)
            mode = "inter" if model.cfg.use_inter else "mean"
            for cid in sorted(coupled):
                for j, item in enumerate(coupled[cid]):
                    x_hat = getattr(item, "x_hat_s", item)
                    cond = getattr(item, "condition", None)
                    cond_map = cond.data if cond is not None else np.ones(x_hat.shape[1:])
                    weights = T.cosine_map(T.gap(x_hat), x_hat).data
                    stem = f"q{qi}_c{cid}_s{j}"
                    for kind, values in (("condition", cond_map), ("weights", weights)):
                        write_heatmap(out, f"{stem}_{kind}", values)
                        written += [out / f"{stem}_{kind}.pgm", out / f"{stem}_{kind}.txt"]
                for j, p in enumerate(protos[cid].contributions):
                    contrib_lines.append(f"query={qi} class={cid} support={j} contribution={p!r} mode={mode}")
    path = out / "contributions.txt"
    path.write_text("\n".join(contrib_lines) + "\n")
    written.append(path)
    return written
