"""Scenario sweeps: accuracy vs attack magnitude under stuck-device faults.

A scenario pins a training assumption (fraction of stuck devices assumed
during training), an inference-time fault fraction, an epsilon grid and a
number of hardware realizations. Results go to CSV and SVG, keyed by a
stable seed derivation so serial and parallel runs agree byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mlp
from .attack import AttackSpec, craft_batch
from .crossbar import DeviceRange, IdealRealization
from .data import ImageSet, load_dataset
from .mlp import MlpParams, TrainConfig

DEFAULT_EPS_GRID = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30)
DEFAULT_REALIZATIONS = 5

CSV_HEADER = "dataset,p_train,p_inf,epsilon,realization,seed,accuracy"

FIGURES = {
    # (p_train, p_inf) pairs, one curve each
    "fig3": ((0.0, 0.0), (0.0, 0.1), (0.0, 0.2)),
    "fig4": ((0.0, 0.0), (0.0, 0.2), (0.2, 0.2)),
    "fig5": ((0.0, 0.1), (0.1, 0.1), (0.2, 0.1)),
}


@dataclass(frozen=True)
class Scenario:
    dataset: str
    p_train: float
    p_inf: float
    epsilons: tuple[float, ...] = DEFAULT_EPS_GRID
    n_realizations: int = DEFAULT_REALIZATIONS
    seed: int = 0

    def __post_init__(self):
        eps = tuple(self.epsilons)
        if not eps or eps[0] != 0.0:
            raise ValueError("epsilon grid must start at 0")
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon grid must be strictly increasing")
        if self.n_realizations < 1:
            raise ValueError("need at least one realization")
        if not (0 <= self.p_train <= 1 and 0 <= self.p_inf <= 1):
            raise ValueError("fault fractions must be in [0, 1]")
        object.__setattr__(self, "epsilons", eps)

    def canonical(self) -> str:
        eps = ",".join(_fmt(e) for e in self.epsilons)
        return (
            f"dataset={self.dataset}|p_train={_fmt(self.p_train)}"
            f"|p_inf={_fmt(self.p_inf)}|eps={eps}|n={self.n_realizations}"
        )


@dataclass(frozen=True)
class SweepRecord:
    dataset: str
    p_train: float
    p_inf: float
    epsilon: float
    realization: int
    seed: int
    accuracy: float


def _fmt(x: float) -> str:
    """Floats are printed with 6 significant digits throughout."""
    return f"{x:.6g}"


def derive_seed(master: int, context: str, index: int) -> int:
    """Stable 64-bit per-task seed; frozen so parallel and serial runs agree."""
    h = hashlib.sha256(f"{master}|{context}|{index}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def train_config_for(scenario: Scenario, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    seed = derive_seed(
        scenario.seed,
        f"train|{scenario.dataset}|p_train={_fmt(scenario.p_train)}",
        0,
    )
    return replace(base, p_train=scenario.p_train, seed=seed)


def _config_key(dataset: str, cfg: TrainConfig) -> str:
    canon = f"{dataset}|" + "|".join(
        f"{f.name}={getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)
    )
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


class ModelCache:
    """Trained models keyed by (dataset, training config); optional on-disk store."""

    def __init__(self, cache_dir: str | os.PathLike | None = None):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._mem: dict[str, MlpParams] = {}

    def get_or_train(self, dataset: str, cfg: TrainConfig, train_set: ImageSet, log_fn=None) -> MlpParams:
        key = _config_key(dataset, cfg)
        if key in self._mem:
            return self._mem[key]
        if self.cache_dir is not None:
            path = self.cache_dir / f"{key}.mnna"
            if path.exists():
                params = mlp.load_model(path)
                self._mem[key] = params
                return params
        params = mlp.train(train_set, cfg, log_fn=log_fn)
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            mlp.save_model(self.cache_dir / f"{key}.mnna", params)
        self._mem[key] = params
        return params


def run_scenario(
    scenario: Scenario,
    train_set: ImageSet,
    test_set: ImageSet,
    cache: ModelCache | None = None,
    base_cfg: TrainConfig | None = None,
    workers: int = 1,
    log_fn=None,
) -> list[SweepRecord]:
    """Train (or load) the scenario's model, then for each hardware
    realization draw one fixed stuck-mask set and record accuracy under
    FGSM at every epsilon. The attacker always differentiates through the
    trained digital weights with no nonidealities."""
    cache = cache or ModelCache()
    cfg = train_config_for(scenario, base_cfg)
    params = cache.get_or_train(scenario.dataset, cfg, train_set, log_fn=log_fn)

    # crafted inputs depend only on the assumed model, not the deployed
    # realization, so one batch per epsilon serves all realizations
    batches = [
        craft_batch(test_set, AttackSpec(eps, params, IdealRealization(), activation=cfg.activation))
        for eps in scenario.epsilons
    ]

    def eval_realization(r: int) -> list[SweepRecord]:
        seed = derive_seed(scenario.seed, scenario.canonical(), r)
        if scenario.p_inf > 0:
            rng = np.random.default_rng(seed)
            deployed = mlp.sample_realization(
                params, scenario.p_inf, rng,
                device_range=cfg.device_range,
                include_bias=cfg.bias_on_crossbar,
                freeze_w_max=True,
            )
        else:
            deployed = IdealRealization()
        recs = []
        for eps, batch in zip(scenario.epsilons, batches):
            trace = mlp._forward(params, deployed, batch.perturbed, cfg.activation)
            acc = float(np.mean(np.argmax(trace.z2, axis=1) == batch.labels))
            recs.append(
                SweepRecord(
                    dataset=scenario.dataset,
                    p_train=scenario.p_train,
                    p_inf=scenario.p_inf,
                    epsilon=eps,
                    realization=r,
                    seed=seed,
                    accuracy=acc,
                )
            )
        return recs

    realizations = range(scenario.n_realizations)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_r = list(pool.map(eval_realization, realizations))
    else:
        per_r = [eval_realization(r) for r in realizations]
    return [rec for recs in per_r for rec in recs]


def write_csv(records, path=None, comments=()) -> str:
    """Serialize sweep records; `#` comment lines first, then a header.
    UTF-8, LF endings, floats with 6 significant digits."""
    lines = [f"# {c}" for c in comments]
    lines.append(CSV_HEADER)
    for r in records:
        lines.append(
            f"{r.dataset},{_fmt(r.p_train)},{_fmt(r.p_inf)},{_fmt(r.epsilon)},"
            f"{r.realization},{r.seed},{_fmt(r.accuracy)}"
        )
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_bytes(text.encode("utf-8"))
    return text


def parse_csv(text: str) -> tuple[list[SweepRecord], list[str]]:
    records, comments = [], []
    for line in text.splitlines():
        if not line:
            continue
        if line.startswith("#"):
            comments.append(line[2:] if line.startswith("# ") else line[1:])
            continue
        if line == CSV_HEADER:
            continue
        ds, pt, pi, eps, r, seed, acc = line.split(",")
        records.append(
            SweepRecord(ds, float(pt), float(pi), float(eps), int(r), int(seed), float(acc))
        )
    return records, comments


@dataclass
class Curve:
    label: str
    epsilons: np.ndarray
    mean: np.ndarray
    std: np.ndarray


def summarize(records: list[SweepRecord]) -> list[Curve]:
    """Mean +- sample std across realizations, one curve per (p_train, p_inf)."""
    groups: dict[tuple[float, float], dict[float, list[float]]] = {}
    for r in records:
        groups.setdefault((r.p_train, r.p_inf), {}).setdefault(r.epsilon, []).append(r.accuracy)
    curves = []
    for (pt, pi), by_eps in groups.items():
        eps = np.array(sorted(by_eps))
        accs = [np.asarray(by_eps[e]) for e in eps]
        mean = np.array([a.mean() for a in accs])
        std = np.array([a.std(ddof=1) if len(a) > 1 else 0.0 for a in accs])
        curves.append(
            Curve(
                label=f"train {_fmt(pt * 100)}% / inference {_fmt(pi * 100)}% stuck",
                epsilons=eps, mean=mean, std=std,
            )
        )
    return curves


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_svg(curves: list[Curve], path=None) -> str:
    """Deterministic standalone line chart: accuracy vs epsilon, one
    polyline per curve with a shaded +-std band."""
    if not curves:
        raise ValueError("no curves to plot")
    width, height = 640, 440
    ml, mr, mt, mb = 60, 20, 20, 50
    pw, ph = width - ml - mr, height - mt - mb
    x_max = max(float(c.epsilons[-1]) for c in curves) or 1.0

    def sx(e):
        return ml + pw * e / x_max

    def sy(a):
        return mt + ph * (1.0 - a)

    def pt(e, a):
        return f"{sx(e):.2f},{sy(a):.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    # axes and ticks
    parts.append(
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>'
    )
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>')
    for i in range(5):
        a = i / 4.0
        y = sy(a)
        parts.append(f'<line x1="{ml - 4}" y1="{y:.2f}" x2="{ml}" y2="{y:.2f}" stroke="black"/>')
        parts.append(
            f'<text x="{ml - 8}" y="{y + 4:.2f}" text-anchor="end" font-size="12">{a:g}</text>'
        )
    for i in range(5):
        e = x_max * i / 4.0
        x = sx(e)
        parts.append(
            f'<line x1="{x:.2f}" y1="{mt + ph}" x2="{x:.2f}" y2="{mt + ph + 4}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{x:.2f}" y="{mt + ph + 18}" text-anchor="middle" font-size="12">{_fmt(e)}</text>'
        )
    parts.append(
        f'<text x="{ml + pw / 2:.2f}" y="{height - 12}" text-anchor="middle" '
        f'font-size="14">attack magnitude (epsilon)</text>'
    )
    parts.append(
        f'<text x="16" y="{mt + ph / 2:.2f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 16 {mt + ph / 2:.2f})">accuracy</text>'
    )
    for i, c in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        upper = [pt(e, min(1.0, m + s)) for e, m, s in zip(c.epsilons, c.mean, c.std)]
        lower = [pt(e, max(0.0, m - s)) for e, m, s in zip(c.epsilons, c.mean, c.std)]
        parts.append(
            f'<polygon points="{" ".join(upper + lower[::-1])}" fill="{color}" '
            f'fill-opacity="0.15" stroke="none"/>'
        )
        line = " ".join(pt(e, m) for e, m in zip(c.epsilons, c.mean))
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = mt + 16 + 18 * i
        parts.append(
            f'<line x1="{ml + 10}" y1="{ly - 4}" x2="{ml + 34}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(f'<text x="{ml + 40}" y="{ly}" font-size="12">{c.label}</text>')
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    if path is not None:
        Path(path).write_bytes(text.encode("utf-8"))
    return text


def reproduce(
    figure: str,
    dataset: str,
    out_root: str | os.PathLike = "results",
    data_dir: str | os.PathLike = "data",
    seed: int = 0,
    epsilons: tuple[float, ...] = DEFAULT_EPS_GRID,
    n_realizations: int = DEFAULT_REALIZATIONS,
    workers: int = 1,
    base_cfg: TrainConfig | None = None,
    cache: ModelCache | None = None,
    sets: tuple[ImageSet, ImageSet] | None = None,
    log_fn=None,
) -> dict[str, Path]:
    """Run one figure's scenario matrix and write data.csv / plot.svg /
    config.txt under out_root/<figure>/<dataset>/."""
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; expected one of {sorted(FIGURES)}")
    train_set, test_set = sets if sets is not None else load_dataset(dataset, data_dir)
    cache = cache or ModelCache()

    records: list[SweepRecord] = []
    scenarios = []
    for p_train, p_inf in FIGURES[figure]:
        s = Scenario(
            dataset=dataset, p_train=p_train, p_inf=p_inf,
            epsilons=epsilons, n_realizations=n_realizations, seed=seed,
        )
        scenarios.append(s)
        records.extend(
            run_scenario(s, train_set, test_set, cache=cache, base_cfg=base_cfg,
                         workers=workers, log_fn=log_fn)
        )

    out_dir = Path(out_root) / figure / dataset
    out_dir.mkdir(parents=True, exist_ok=True)
    comments = [f"figure={figure}", f"git={git_describe()}"] + [
        f"scenario {s.canonical()}" for s in scenarios
    ]
    csv_path = out_dir / "data.csv"
    write_csv(records, csv_path, comments=comments)
    svg_path = out_dir / "plot.svg"
    render_svg(summarize(records), svg_path)
    cfg_path = out_dir / "config.txt"
    cfg = base_cfg or TrainConfig()
    cfg_path.write_text(
        "\n".join(
            [f"figure = {figure}", f"dataset = {dataset}", f"seed = {seed}",
             f"git = {git_describe()}"]
            + [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)
               if f.name != "p_train"]
            + [f"scenario = {s.canonical()}" for s in scenarios]
        )
        + "\n"
    )
    return {"csv": csv_path, "svg": svg_path, "config": cfg_path}
