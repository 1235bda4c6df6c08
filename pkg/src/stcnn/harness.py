"""Experiment orchestration: toys, optimizer/initialisation comparisons, gap checks.

Every experiment writes ``*.csv`` trajectories (``step,objective``),
``summary.json`` (byte-reproducible from the config) and ``report.md`` under
the output directory; wall-clock timings go to ``timing.json``.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataio
from .arrangements import PatternSet, SetReading, sample_patterns
from .dataio import Image, PatchMatrix
from .dual import (
    ConeConvention,
    DualSolveConfig,
    dual_objective,
    eval_d1_candidate,
    gap_report,
    recover_primal,
    scale_into_feasibility,
    solve_dual,
)
from .primal import (
    InitConfig,
    OptimizerConfig,
    forward,
    primal_objective,
    train_primal,
    write_trajectory_csv,
)
from .seeding import derive_seed

log = logging.getLogger(__name__)

EXPERIMENTS = ("toy_fit", "optimizer_compare", "init_compare", "gap_verify", "denoise")
ALL_CONVENTIONS = (ConeConvention.PAPER_LITERAL, ConeConvention.PATTERN_PRESERVING)


@dataclass
class ExperimentConfig:
    experiment: str = "toy_fit"
    toy: str = "fig1"
    toy_bias: bool | None = None
    images_path: str | None = None
    labels_path: str | None = None
    train_count: int = 20
    test_count: int = 5
    crop: int = 8
    sigmas: list = field(default_factory=lambda: [0.25])
    K: int | None = None
    max_K: int = 64
    m: int = 3
    lam: float = 0.1
    beta: float = 0.1
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig("adam", 1e-2, steps=2000))
    init: InitConfig = field(default_factory=InitConfig)
    dual: DualSolveConfig = field(default_factory=DualSolveConfig)
    conventions: list = field(default_factory=lambda: [c.value for c in ALL_CONVENTIONS])
    reading: str = SetReading.OVERLAP.value
    pattern_draws: int = 20000
    trials: int = 1
    # optimizer_compare learning rates for sgd, asgd, adam; full-batch sgd diverges above ~1e-3 at 8x8
    compare_learning_rates: list | None = field(default_factory=lambda: [5e-4, 5e-4, 1e-2])
    output_dir: str | None = None
    master_seed: int = 0

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.toy not in dataio.TOYS:
            raise ValueError(f"toy must be one of {sorted(dataio.TOYS)}")
        for p in (self.images_path, self.labels_path):
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(p)
        self.sigmas = [float(s) for s in self.sigmas]
        if any(s < 0 for s in self.sigmas):
            raise ValueError("noise sigmas must be >= 0")
        self.conventions = [ConeConvention(c).value for c in self.conventions]
        self.reading = SetReading(self.reading).value

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("output_dir")  # keeps summary.json independent of where it is written
        return d


@dataclass
class GapSummary:
    label: str
    primal_finals: list
    dual_finals: dict
    best_primal: float
    gaps: dict
    better_convention: str
    best_gap: float
    diagnostics: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self, with_time: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not with_time:
            d.pop("seconds")
        return d


# --------------------------------------------------------------------------
# building blocks

def units_K(config: ExperimentConfig, rows: int) -> int:
    return config.K if config.K is not None else min(rows + 1, config.max_K)


def trial_init(config: ExperimentConfig, trial: int, key="") -> InitConfig:
    seed = derive_seed(config.master_seed, "init", key, config.init.seed, trial)
    return dataclasses.replace(config.init, seed=seed)


def pattern_seed(config: ExperimentConfig, key="") -> int:
    return derive_seed(config.master_seed, "patterns", key)


def solve_dual_branch(
    Y: PatchMatrix,
    x,
    *,
    lam: float,
    beta: float,
    cfg: DualSolveConfig,
    conventions: Sequence[str],
    reading: str,
    draws: int,
    seed: int,
):
    """Sample patterns and solve the dual once per convention.

    Takes no optimizer or initialisation settings: the convex branch cannot
    depend on them.
    """
    patterns = sample_patterns(Y, lam, draws, seed)
    out = {}
    for conv in conventions:
        dual, report = solve_dual(Y, x, patterns, beta, conv, cfg, reading)
        out[ConeConvention(conv).value] = (dual, report)
    return patterns, out


def dual_diagnostics(Y: PatchMatrix, x, patterns: PatternSet, dual, report, lam, beta) -> dict:
    """Recovery identity, recovered-primal discrepancy and the z certificate of one dual solve."""
    rec = recover_primal(dual, lam, beta)
    reg_primal = beta * rec.energy()
    reg_dual = 2 * beta * sum(a + b for a, b in dual.unit_norms())
    d_val = dual_objective(Y, x, dual)
    p_rec = primal_objective(Y, x, rec) if rec.K else float(np.dot(x, x))
    # stationarity of the squared loss suggests z = 2 (x - prediction)
    pred = np.sum(dual.q_matrix() * (Y.data @ (dual.W_prime - dual.W).T), axis=1) if dual.units else 0 * x
    z = scale_into_feasibility(Y, 2 * (np.asarray(x) - pred), beta)
    cert, d1 = eval_d1_candidate(Y, x, z, patterns, beta)
    return {
        "recovered_K": rec.K,
        "regularizer_primal": reg_primal,
        "regularizer_dual": reg_dual,
        "regularizer_identity_error": abs(reg_primal - reg_dual),
        "recovered_primal_objective": p_rec,
        "recovery_discrepancy": p_rec - d_val,
        "violation_norm": report.violation_norm,
        "converged": report.converged,
        "violation_ok": report.violation_ok,
        "iterations": report.iterations,
        "d1": d1,
        "certificate": cert.summary(),
    }


def summarize(label, primal_finals, dual_finals: dict, diagnostics=None, seconds=0.0) -> GapSummary:
    best = float(min(primal_finals))
    gaps = {c: gap_report(best, d) for c, d in dual_finals.items()}
    better = min(gaps, key=lambda c: (gaps[c], c))
    return GapSummary(
        label, [float(p) for p in primal_finals], {c: float(d) for c, d in dual_finals.items()},
        best, gaps, better, gaps[better], diagnostics or {}, seconds,
    )


def load_images(config: ExperimentConfig) -> tuple[list[Image], list[Image]]:
    """Train and test images, centre-cropped to ``config.crop``."""
    need = config.train_count + config.test_count
    if config.images_path is not None:
        images = dataio.load_mnist_idx(config.images_path, config.labels_path)
    else:
        raw = dataio.synthetic_digits(need, 28, derive_seed(config.master_seed, "digits"))
        images = [dataio.Image(r / 255.0) for r in raw]
    if len(images) < need:
        raise ValueError(f"need {need} images, found {len(images)}")
    if config.crop:
        images = [dataio.center_crop(im, config.crop) for im in images[:need]]
    return images[: config.train_count], images[config.train_count : need]


def summary_schema() -> dict:
    """The JSON schema that every ``summary.json`` satisfies."""
    from importlib.resources import files

    return json.loads(files("stcnn").joinpath("schemas/summary.schema.json").read_text())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _outdir(config: ExperimentConfig) -> Path | None:
    if config.output_dir is None:
        return None
    p = Path(config.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _mean_curve(curves: list[np.ndarray]) -> np.ndarray:
    """Mean over runs; shorter curves are held at their last value."""
    n = max(len(c) for c in curves)
    padded = [np.concatenate([c, np.full(n - len(c), c[-1])]) for c in curves]
    return np.mean(padded, axis=0)


def _finish(config: ExperimentConfig, summary: dict, records: list[GapSummary], curves: dict, t0: float):
    out = _outdir(config)
    summary["records"] = [r.to_dict() for r in records]
    summary["config"] = config.to_dict()
    if out is not None:
        for name, curve in curves.items():
            write_trajectory_csv(out / f"{name}.csv", curve)
        _write_json(out / "summary.json", summary)
        (out / "report.md").write_text(render_report(summary))
        _write_json(
            out / "timing.json",
            {"total_seconds": time.perf_counter() - t0, "records": {r.label: r.seconds for r in records}},
        )
    return summary


def render_report(summary: dict) -> str:
    lines = [f"# {summary['experiment']}", ""]
    convs = sorted({c for r in summary["records"] for c in r["dual_finals"]})
    head = "| record | best primal | " + " | ".join(f"dual ({c})" for c in convs)
    head += " | " + " | ".join(f"gap ({c})" for c in convs) + " |"
    lines += [head, "|" + "---|" * (2 + 2 * len(convs))]
    for r in summary["records"]:
        row = [r["label"], f"{r['best_primal']:.6g}"]
        row += [f"{r['dual_finals'][c]:.6g}" for c in convs]
        row += [f"{100 * r['gaps'][c]:.2f}%" for c in convs]
        lines.append("| " + " | ".join(row) + " |")
    for key in ("notes",):
        if summary.get(key):
            lines += ["", *[f"- {n}" for n in summary[key]]]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# experiments

def _dual_kwargs(config: ExperimentConfig, key=""):
    return dict(
        lam=config.lam,
        beta=config.beta,
        cfg=config.dual,
        conventions=config.conventions,
        reading=config.reading,
        draws=config.pattern_draws,
        seed=pattern_seed(config, key),
    )


def run_toy(config: ExperimentConfig) -> GapSummary:
    """Primal trials and one dual solve per convention on a built-in 1D toy."""
    t0 = time.perf_counter()
    bias = config.toy_bias if config.toy_bias is not None else config.toy == "fig1"
    if config.toy == "fig6":
        Y, x = dataio.fig6_toy(append_bias=bias)
    else:
        Y, x = dataio.fig1_toy()
        if not bias:
            Y = PatchMatrix(Y.data[:, :1])
    K = units_K(config, Y.rows)
    curves = {}
    finals = []
    for t in range(config.trials):
        res = train_primal(Y, x, trial_init(config, t), config.optimizer, K=K, lam=config.lam, beta=config.beta)
        finals.append(res.final_objective)
        curves[f"primal_trial{t}"] = res.trajectory
    patterns, duals = solve_dual_branch(Y, x, **_dual_kwargs(config))
    dual_finals, diag = {}, {}
    for conv, (dual, report) in duals.items():
        dual_finals[conv] = report.final_objective
        curves[f"dual_{conv}"] = np.asarray(report.dual_objective)
        diag[conv] = dual_diagnostics(Y, x, patterns, dual, report, config.lam, config.beta)
    diag["patterns"] = len(patterns)
    diag["units"] = len(next(iter(duals.values()))[0].units) if duals else 0
    rec = summarize(config.toy, finals, dual_finals, diag, time.perf_counter() - t0)
    summary = {"experiment": "toy_fit", "toy": config.toy, "K": K}
    _finish(config, summary, [rec], curves, t0)
    return rec


def _per_image_primal(config, samples, init_for, opt: OptimizerConfig, key):
    """Train one primal per image; returns finals and mean curve."""
    finals, curves = [], []
    for k, (Y, x) in enumerate(samples):
        res = train_primal(
            Y, x, init_for(k), opt, K=units_K(config, Y.rows), lam=config.lam, beta=config.beta
        )
        finals.append(res.final_objective)
        curves.append(res.trajectory)
    return finals, _mean_curve(curves)


def _per_image_dual(config, samples, key):
    finals = {c: [] for c in config.conventions}
    curves = {c: [] for c in config.conventions}
    diags = {c: [] for c in config.conventions}
    for k, (Y, x) in enumerate(samples):
        patterns, duals = solve_dual_branch(Y, x, **_dual_kwargs(config, f"{key}/{k}"))
        for conv, (dual, report) in duals.items():
            finals[conv].append(report.final_objective)
            curves[conv].append(np.asarray(report.dual_objective))
            diags[conv].append(dual_diagnostics(Y, x, patterns, dual, report, config.lam, config.beta))
    return finals, {c: _mean_curve(v) for c, v in curves.items()}, diags


def _datasets(config: ExperimentConfig, sigma: float):
    train, test = load_images(config)
    seed = derive_seed(config.master_seed, "noise", sigma)
    ds_train = dataio.build_dataset(train, config.m, sigma, seed)
    ds_test = dataio.build_dataset(test, config.m, sigma, derive_seed(seed, "test")) if test else None
    return ds_train, ds_test


def _compare(config: ExperimentConfig, variants: dict, name: str) -> dict:
    """Shared body of the optimizer and initialisation comparisons."""
    t0 = time.perf_counter()
    sigma = config.sigmas[0] if config.sigmas else 0.25
    ds_train, ds_test = _datasets(config, sigma)
    curves, records = {}, []
    splits = [("train", ds_train)] + ([("test", ds_test)] if ds_test is not None else [])
    dual_means = {}
    for split, ds in splits:
        finals, dcurves, _ = _per_image_dual(config, ds.samples, split)
        dual_means[split] = {c: float(np.mean(v)) for c, v in finals.items()}
        for c, curve in dcurves.items():
            curves[f"dual_{c}_{split}"] = curve
    for vname, (init_for, opt) in variants.items():
        t1 = time.perf_counter()
        for split, ds in splits:
            finals, curve = _per_image_primal(config, ds.samples, lambda k: init_for(split, k), opt, split)
            curves[f"primal_{vname}_{split}"] = curve
            if split == "train":
                rec = summarize(vname, [float(np.mean(finals))], dual_means["train"],
                                {"per_image_finals": finals}, time.perf_counter() - t1)
            else:
                rec.diagnostics["test_primal_mean"] = float(np.mean(finals))
                rec.diagnostics["test_dual_mean"] = dual_means["test"]
        records.append(rec)
    primal_means = [r.best_primal for r in records]
    summary = {
        "experiment": name,
        "sigma": sigma,
        "primal_spread": float(np.max(primal_means) - np.min(primal_means)),
        "primal_std": float(np.std(primal_means)),
        "dual_means": dual_means,
    }
    return _finish(config, summary, records, curves, t0)


def run_optimizer_compare(config: ExperimentConfig, kinds=("sgd", "asgd", "adam")) -> dict:
    variants = {}
    lrs = config.compare_learning_rates
    if lrs is not None and len(lrs) != len(kinds):
        raise ValueError(f"need one learning rate per optimizer {kinds}")
    for n, kind in enumerate(kinds):
        lr = config.optimizer.learning_rate if lrs is None else float(lrs[n])
        opt = dataclasses.replace(config.optimizer, kind=kind, learning_rate=lr)
        variants[kind] = (lambda split, k: trial_init(config, k, split), opt)
    return _compare(config, variants, "optimizer_compare")


DEFAULT_INITS = {
    "kaiming_uniform": InitConfig("kaiming_uniform"),
    "normal_0.001": InitConfig("normal", 0.001),
    "normal_0.005": InitConfig("normal", 0.005),
}


def run_init_compare(config: ExperimentConfig, inits: dict | None = None) -> dict:
    inits = inits or DEFAULT_INITS
    variants = {}
    for name, ic in inits.items():
        def init_for(split, k, ic=ic):
            seed = derive_seed(config.master_seed, "init", split, k)
            return dataclasses.replace(ic, seed=seed)
        variants[name] = (init_for, config.optimizer)
    return _compare(config, variants, "init_compare")


def run_gap_verify(config: ExperimentConfig) -> list[GapSummary]:
    """Per noise level: best-of-trials ADAM/Kaiming primal against the dual, image by image."""
    t0 = time.perf_counter()
    opt = dataclasses.replace(config.optimizer, kind="adam")
    records, curves = [], {}
    for sigma in config.sigmas:
        t1 = time.perf_counter()
        ds, _ = _datasets(dataclasses.replace(config, test_count=0), sigma)
        best, pcurves = [], []
        for k, (Y, x) in enumerate(ds.samples):
            runs = []
            for t in range(config.trials):
                init = dataclasses.replace(trial_init(config, t, f"{sigma}/{k}"), kind="kaiming_uniform")
                runs.append(train_primal(Y, x, init, opt, K=units_K(config, Y.rows), lam=config.lam, beta=config.beta))
            top = min(runs, key=lambda r: r.final_objective)
            best.append(top.final_objective)
            pcurves.append(top.trajectory)
        dfinals, dcurves, diags = _per_image_dual(config, ds.samples, f"sigma={sigma}")
        gaps = {c: float(np.mean([gap_report(p, d) for p, d in zip(best, v)])) for c, v in dfinals.items()}
        better = min(gaps, key=lambda c: (gaps[c], c))
        diag = {
            "per_image_best_primal": best,
            "per_image_dual": dfinals,
            "mean_relative_gap": gaps,
            "dual_below_primal_fraction": {
                c: float(np.mean([d <= p + 1e-6 for p, d in zip(best, v)])) for c, v in dfinals.items()
            },
            "max_regularizer_identity_error": max(
                dd["regularizer_identity_error"] for v in diags.values() for dd in v
            ),
            "mean_recovery_discrepancy": {
                c: float(np.mean([dd["recovery_discrepancy"] for dd in v])) for c, v in diags.items()
            },
        }
        rec = GapSummary(
            f"sigma={sigma}",
            [float(np.mean(best))],
            {c: float(np.mean(v)) for c, v in dfinals.items()},
            float(np.mean(best)),
            gaps,
            better,
            gaps[better],
            diag,
            time.perf_counter() - t1,
        )
        records.append(rec)
        curves[f"primal_sigma{sigma}"] = _mean_curve(pcurves)
        for c, curve in dcurves.items():
            curves[f"dual_{c}_sigma{sigma}"] = curve
    summary = {
        "experiment": "gap_verify",
        "notes": ["gaps are means of per-image relative gaps |p - d| / d"],
    }
    _finish(config, summary, records, curves, t0)
    return records


def run_denoise(config: ExperimentConfig) -> dict:
    """Denoise the training images with the dual network; writes one prediction CSV per image."""
    t0 = time.perf_counter()
    out = _outdir(config)
    records, curves = [], {}
    conv = config.conventions[0]
    for sigma in config.sigmas:
        t1 = time.perf_counter()
        ds, _ = _datasets(dataclasses.replace(config, test_count=0), sigma)
        pfinals, dfinals = [], []
        for k, (Y, x) in enumerate(ds.samples):
            res = train_primal(Y, x, trial_init(config, 0, f"{sigma}/{k}"), config.optimizer,
                               K=units_K(config, Y.rows), lam=config.lam, beta=config.beta)
            _, duals = solve_dual_branch(Y, x, **{**_dual_kwargs(config, f"{sigma}/{k}"), "conventions": [conv]})
            dual, report = duals[conv]
            pred = np.sum(dual.q_matrix() * (Y.data @ (dual.W_prime - dual.W).T), axis=1) if dual.units else 0 * x
            pfinals.append(res.final_objective)
            dfinals.append(report.final_objective)
            if out is not None:
                with open(out / f"denoised_sigma{sigma}_{k}.csv", "w") as fh:
                    fh.write("i,noisy_center,clean,primal,dual\n")
                    centre = Y.data[:, Y.patch_dim // 2]
                    pp = forward(Y, res.params)
                    for i in range(Y.rows):
                        fh.write(f"{i},{centre[i]:.17g},{x[i]:.17g},{pp[i]:.17g},{pred[i]:.17g}\n")
        records.append(summarize(f"sigma={sigma}", [float(np.mean(pfinals))],
                                 {conv: float(np.mean(dfinals))}, {}, time.perf_counter() - t1))
    return _finish(config, {"experiment": "denoise"}, records, curves, t0)


RUNNERS = {
    "toy_fit": run_toy,
    "optimizer_compare": run_optimizer_compare,
    "init_compare": run_init_compare,
    "gap_verify": run_gap_verify,
    "denoise": run_denoise,
}


def run(config: ExperimentConfig):
    return RUNNERS[config.experiment](config)


# --------------------------------------------------------------------------
# key-value config files

_NESTED = {"optimizer": OptimizerConfig, "init": InitConfig, "dual": DualSolveConfig}


def _coerce(text: str, current):
    text = text.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if isinstance(current, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(current, list):
        return [_coerce(t, 0.0) for t in text.replace(",", " ").split()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def parse_overrides(pairs: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``{"beta": "0.1", "optimizer.kind": "sgd", ...}`` to ``base``."""
    base = base or ExperimentConfig()
    top = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    nested = {k: dataclasses.asdict(top[k]) for k in _NESTED}
    for key, raw in pairs.items():
        key = key.strip().replace("-", "_")
        if "." in key:
            group, sub = key.split(".", 1)
            if group not in nested or sub not in nested[group]:
                raise KeyError(f"unknown config key {key!r}")
            nested[group][sub] = _coerce(raw, nested[group][sub]) if isinstance(raw, str) else raw
        else:
            if key not in top or key in _NESTED:
                raise KeyError(f"unknown config key {key!r}")
            top[key] = _coerce(raw, top[key]) if isinstance(raw, str) else raw
    for k, cls in _NESTED.items():
        top[k] = cls(**nested[k])
    return ExperimentConfig(**top)


def read_config_file(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return parse_overrides(pairs, base)
