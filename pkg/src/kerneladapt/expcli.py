"""
Config-driven experiment orchestration and the command-line interface:
dataset builds, method comparisons, trade-off sweeps, generalization
ablations, and table/figure emission.

All outputs land in a run directory containing a ``manifest.json`` that ties
every table cell to a checkpoint and a dataset hash.  File contents are
deterministic given the seed; only the default run-directory *name* carries a
timestamp.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from .adapt import METHODS, TrainConfig, TrainData, train
from .datagen import (
    DataConfig,
    DatasetBundle,
    build_datasets,
    dataset_hash,
    load_bundle,
    save_bundle,
)
from .metrics import (
    MetricsReport,
    cross_validate,
    evaluate_bundle,
    wilcoxon_one_sided,
)
from .segnet import load_checkpoint, save_checkpoint

__all__ = [
    "ExperimentConfig",
    "run_comparison",
    "run_tradeoff_sweep",
    "run_generalization_ablation",
    "main",
]

OUT_ROOT_ENV = "KERNELADAPT_OUT"

DEFAULT_ALPHA_GRID = tuple(float(3.0**e) for e in np.linspace(-10.0, 0.0, 10))
DEFAULT_LAMBDA_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of an experiment batch."""

    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    methods: tuple[str, ...] = METHODS
    folds: int = 5
    seed: int = 0
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    sweep_methods: tuple[str, ...] = ("pcons", "fcons_dec")
    sweep_iterations: int | None = None
    ablation_methods: tuple[str, ...] = ("baseline", "fcons_enc", "pcons")
    ablation_train_families: tuple[str, ...] = ()  # empty = first two families
    wilcoxon_pairs: tuple[tuple[str, str], ...] = (
        ("baseline", "fcons_enc"),
        ("fbpaug", "fcons_enc"),
    )

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        kwargs = dict(raw)
        if "data" in kwargs:
            data = dict(kwargs["data"])
            for key in ("sharp_families",):
                if key in data:
                    data[key] = tuple(tuple(x) for x in data[key])
            for key in ("lesion_count", "pair_lesion_count", "lesion_hu", "lesion_radius_frac", "noise_hu"):
                if key in data:
                    data[key] = tuple(data[key])
            kwargs["data"] = DataConfig(**data)
        if "train" in kwargs:
            tr = dict(kwargs["train"])
            for key in ("lr_milestone_fracs", "aug_a_range", "aug_b_range"):
                if key in tr:
                    tr[key] = tuple(tr[key])
            kwargs["train"] = TrainConfig(**tr)
        for key in (
            "methods",
            "alpha_grid",
            "lambda_grid",
            "sweep_methods",
            "ablation_methods",
            "ablation_train_families",
        ):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if "wilcoxon_pairs" in kwargs:
            kwargs["wilcoxon_pairs"] = tuple(tuple(p) for p in kwargs["wilcoxon_pairs"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _derive_seed(*parts: object) -> int:
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _method_train_config(cfg: ExperimentConfig, method: str, *, seed_ctx: str = "compare") -> TrainConfig:
    return replace(cfg.train, method=method, seed=_derive_seed(cfg.seed, seed_ctx, method))


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _comparison_table(reports: dict[str, MetricsReport]) -> tuple[list[str], list[list]]:
    families = sorted(
        {fam for rep in reports.values() for fam in rep.consistency_per_family}
    )
    header = (
        ["method", "source_dice", "source_dice_std", "target_dice", "target_dice_std"]
        + [f"consistency_{fam}" for fam in families]
        + ["consistency_mean", "consistency_std"]
    )
    rows = []
    for method, rep in reports.items():
        s = rep.summary()
        row = [
            method,
            f"{s['source_val_dice_mean']:.4f}",
            f"{s['source_val_dice_std']:.4f}",
            f"{s['target_dice_mean']:.4f}",
            f"{s['target_dice_std']:.4f}",
        ]
        row += [f"{s.get(f'consistency_{fam}', float('nan')):.4f}" for fam in families]
        row += [f"{s['consistency_mean']:.4f}", f"{s['consistency_std']:.4f}"]
        rows.append(row)
    return header, rows


def run_comparison(
    cfg: ExperimentConfig, data: DatasetBundle, out_dir: Path
) -> dict[str, MetricsReport]:
    """Cross-validate every configured method and emit the comparison table."""
    out_dir.mkdir(parents=True, exist_ok=True)
    reports: dict[str, MetricsReport] = {}
    errors: dict[str, str] = {}
    timings: dict[str, float] = {}
    for method in cfg.methods:
        tc = _method_train_config(cfg, method)
        t0 = time.perf_counter()
        try:
            reports[method] = cross_validate(tc, data, k=cfg.folds, seed=cfg.seed)
        except Exception as exc:  # record, keep the other rows alive
            errors[method] = f"{type(exc).__name__}: {exc}"
        timings[method] = round(time.perf_counter() - t0, 3)
    for method, rep in reports.items():
        # domain-gap significance: sharp target vs its smooth twin, per image
        try:
            rep.p_values["target<twin"] = wilcoxon_one_sided(
                np.array(rep.per_image["target"]), np.array(rep.per_image["twin"])
            )
        except ValueError as exc:
            errors[f"wilcoxon:{method}:target<twin"] = str(exc)
    for (m_a, m_b) in cfg.wilcoxon_pairs:
        if m_a in reports and m_b in reports:
            a = np.array(reports[m_a].per_image["target"])
            b = np.array(reports[m_b].per_image["target"])
            try:
                p = wilcoxon_one_sided(a, b)
            except ValueError as exc:
                errors[f"wilcoxon:{m_a}<{m_b}"] = str(exc)
                continue
            reports[m_b].p_values[f"target:{m_a}<{m_b}"] = p
    for method, rep in reports.items():
        rep.to_json(out_dir / f"report_{method}.json")
    header, rows = _comparison_table(reports)
    _write_csv(out_dir / "comparison.csv", header, rows)
    payload = {m: {"summary": rep.summary(), "p_values": rep.p_values} for m, rep in reports.items()}
    if errors:
        payload["_errors"] = errors
    _write_json(out_dir / "comparison.json", payload)
    # wall-clock diagnostics live outside the deterministic report surface
    _write_json(out_dir / "timing.json", timings)
    return reports


def run_tradeoff_sweep(
    cfg: ExperimentConfig, data: DatasetBundle, out_dir: Path
) -> list[dict]:
    """Train sweep methods across the alpha grid; emit curve data and figure.

    Each grid point trains a single fold (the first fold's train/val split)
    to keep the sweep tractable; scores include held-out source Dice, target
    Dice, and paired-test consistency.
    """
    if not cfg.alpha_grid:
        raise ValueError("alpha grid must be non-empty")
    out_dir.mkdir(parents=True, exist_ok=True)
    from .datagen import split_folds

    folds = split_folds(data.source_volumes, k=cfg.folds, seed=cfg.seed)
    val_ids = set(folds.fold_ids(0))
    train_vols = [v for i, v in enumerate(data.source_volumes) if i not in val_ids]
    val_vols = [v for i, v in enumerate(data.source_volumes) if i in val_ids]
    iterations = cfg.sweep_iterations or cfg.train.iterations
    records: list[dict] = []
    for method in cfg.sweep_methods:
        for alpha in cfg.alpha_grid:
            tc = replace(
                cfg.train,
                method=method,
                alpha=float(alpha),
                iterations=iterations,
                seed=_derive_seed(cfg.seed, "sweep", method),
            )
            try:
                model, _ = train(tc, TrainData(train_vols, list(data.paired_train)))
                scores = evaluate_bundle(model, data, val_volumes=val_vols)
                records.append(
                    {
                        "method": method,
                        "alpha": float(alpha),
                        "source_val_dice": float(np.mean(scores["source_val"])),
                        "target_dice": float(np.mean(scores["target"])),
                        "consistency": scores["consistency_mean"],
                    }
                )
            except Exception as exc:
                records.append({"method": method, "alpha": float(alpha), "error": str(exc)})
    _write_json(out_dir / "sweep.json", {"records": records})
    header = ["method", "alpha", "source_val_dice", "target_dice", "consistency"]
    rows = [
        [r["method"], f"{r['alpha']:.8g}"]
        + [f"{r.get(k, float('nan')):.4f}" for k in header[2:]]
        for r in records
    ]
    _write_csv(out_dir / "sweep.csv", header, rows)
    _plot_sweep(records, out_dir / "sweep.png")
    return records


def _plot_sweep(records: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharex=True)
    methods = sorted({r["method"] for r in records})
    for method in methods:
        pts = [r for r in records if r["method"] == method and "error" not in r]
        alphas = [r["alpha"] for r in pts]
        axes[0].plot(alphas, [r["consistency"] for r in pts], marker="o", label=method)
        axes[1].plot(alphas, [r["source_val_dice"] for r in pts], marker="o", label=method)
    for ax, title in zip(axes, ("consistency Dice", "source-val Dice")):
        ax.set_xscale("log")
        ax.set_xlabel("alpha")
        ax.set_title(title)
        ax.grid(alpha=0.3)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def run_generalization_ablation(
    cfg: ExperimentConfig, data: DatasetBundle, out_dir: Path, arms: tuple[str, ...] = ("families", "lesion_free")
) -> dict:
    """Kernel-family-subset and lesion-free-pair ablations.

    The ``families`` arm trains pair-consuming methods on a subset of
    kernel-pair families and reports per-family consistency with seen/unseen
    flags.  The ``lesion_free`` arm swaps the paired training corpus for a
    lesion-free rebuild (same seed) while evaluating on the standard paired
    test set.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    all_families = sorted({p.family for p in data.paired_train})
    results: dict = {"arms": {}}
    if "families" in arms:
        if len(all_families) < 3:
            raise ValueError("family ablation needs >= 3 kernel-pair families")
        seen = tuple(cfg.ablation_train_families) or tuple(all_families[:2])
        subset = [p for p in data.paired_train if p.family in seen]
        arm: dict = {"seen_families": list(seen), "methods": {}}
        for method in cfg.ablation_methods:
            tc = _method_train_config(cfg, method, seed_ctx="ablate-families")
            rep = cross_validate(tc, data, k=cfg.folds, seed=cfg.seed, train_pairs=subset or None)
            arm["methods"][method] = {
                "summary": rep.summary(),
                "consistency_per_family": {
                    fam: {
                        "score": float(np.mean(vals)),
                        "seen": fam in seen,
                    }
                    for fam, vals in rep.consistency_per_family.items()
                },
            }
        results["arms"]["families"] = arm
    if "lesion_free" in arms:
        lf_config = replace(data.config, lesion_free_pairs=True)
        lf_bundle = build_datasets(lf_config, _derive_seed(cfg.seed, "data"))
        arm = {"methods": {}}
        for method in cfg.ablation_methods:
            tc = _method_train_config(cfg, method, seed_ctx="ablate-lesion-free")
            rep = cross_validate(
                tc, data, k=cfg.folds, seed=cfg.seed,
                train_pairs=lf_bundle.paired_train if method != "baseline" else None,
            )
            arm["methods"][method] = {"summary": rep.summary()}
        results["arms"]["lesion_free"] = arm
    _write_json(out_dir / "ablation.json", results)
    rows = []
    for arm_name, arm in results["arms"].items():
        for method, info in arm["methods"].items():
            s = info["summary"]
            rows.append(
                [
                    arm_name,
                    method,
                    f"{s['source_val_dice_mean']:.4f}",
                    f"{s['target_dice_mean']:.4f}",
                    f"{s['consistency_mean']:.4f}",
                ]
            )
    _write_csv(
        out_dir / "ablation.csv",
        ["arm", "method", "source_dice", "target_dice", "consistency_mean"],
        rows,
    )
    return results


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------


def _resolve_out(args_out: str | None, tag: str) -> Path:
    if args_out:
        return Path(args_out)
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return root / f"run-{stamp}-{tag}"


def _manifest(
    out_dir: Path, command: str, cfg: ExperimentConfig | None, extra: dict, name: str = "manifest.json"
) -> None:
    payload = {"command": command, **extra}
    if cfg is not None:
        payload["config"] = asdict(cfg)
    _write_json(out_dir / name, payload)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "folds", None) is not None:
        cfg = replace(cfg, folds=args.folds)
    if getattr(args, "methods", None):
        cfg = replace(cfg, methods=tuple(args.methods.split(",")))
    if getattr(args, "iterations", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, iterations=args.iterations))
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="kerneladapt",
        description="Reconstruction-kernel domain-adaptation lab: data synthesis, "
        "training, and evaluation of consistency/adversarial methods.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="synthesize a dataset directory")
    p.add_argument("--config", help="experiment config JSON (data section used)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lesion-free-pairs", action="store_true", help="lesion-free paired corpus")

    p = sub.add_parser("train", help="train one method on a dataset")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--config", help="experiment config JSON (train section used)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="checkpoint/run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--lam", type=float, default=None)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint stem (no extension)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("compare", help="cross-validated method comparison table")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--methods", help="comma-separated method subset")
    p.add_argument("--iterations", type=int, default=None)

    p = sub.add_parser("sweep", help="alpha trade-off sweep")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--methods", help="comma-separated sweep methods")
    p.add_argument("--iterations", type=int, default=None, help="per-point training length")

    p = sub.add_parser("ablate", help="family-subset and lesion-free ablations")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--arms", default="families,lesion_free")
    p.add_argument("--methods", help="comma-separated ablation methods")
    p.add_argument("--train-families", help="comma-separated families for the subset arm")

    p = sub.add_parser("report", help="re-emit tables/figures from a run directory")
    p.add_argument("--run", required=True, help="existing run directory")

    args = parser.parse_args(argv)

    if args.cmd == "gen-data":
        cfg = _load_config(args)
        data_cfg = cfg.data
        if args.lesion_free_pairs:
            data_cfg = replace(data_cfg, lesion_free_pairs=True)
        out = Path(args.out)
        t0 = time.perf_counter()
        bundle = build_datasets(data_cfg, _derive_seed(cfg.seed, "data"))
        save_bundle(bundle, out)
        # the dataset's own manifest.json is part of the hashed payload, so
        # the run record lives under a different name
        _manifest(
            out,
            "gen-data",
            cfg,
            {"dataset_hash": dataset_hash(out), "elapsed_s": round(time.perf_counter() - t0, 3)},
            name="run.json",
        )
        print(f"dataset written to {out} ({len(bundle.source_volumes)} source volumes)")
        return 0

    if args.cmd == "train":
        cfg = _load_config(args)
        tc = replace(cfg.train, method=args.method)
        if args.seed is not None:
            tc = replace(tc, seed=args.seed)
        if args.iterations is not None:
            tc = replace(tc, iterations=args.iterations)
        if args.alpha is not None:
            tc = replace(tc, alpha=args.alpha)
        if args.lam is not None:
            tc = replace(tc, lam=args.lam)
        data = load_bundle(args.data)
        out = _resolve_out(args.out, f"train-{args.method}")
        out.mkdir(parents=True, exist_ok=True)
        model, log = train(tc, TrainData(data.source_volumes, data.paired_train))
        import torch

        save_checkpoint(
            out / "ckpt",
            model,
            iteration=tc.iterations,
            rng_state={"torch": torch.get_rng_state()},
            extra={"site_filter": tc.site_filter, "method": tc.method},
        )
        _write_csv(
            out / "log.csv",
            ["iteration", "loss_seg", "loss_adapt", "lr", "weight"],
            [
                [r["iteration"], f"{r['loss_seg']:.6f}", f"{r['loss_adapt']:.6f}", f"{r['lr']:.2e}", f"{r['weight']:.6g}"]
                for r in log
            ],
        )
        _manifest(
            out,
            "train",
            cfg,
            {"method": args.method, "dataset_hash": dataset_hash(args.data), "train_config": asdict(tc)},
        )
        print(f"checkpoint written to {out}")
        return 0

    if args.cmd == "evaluate":
        data = load_bundle(args.data)
        model, _ = load_checkpoint(args.ckpt)
        out = _resolve_out(args.out, "evaluate")
        out.mkdir(parents=True, exist_ok=True)
        scores = evaluate_bundle(model, data)
        _write_json(out / "eval.json", scores)
        _manifest(out, "evaluate", None, {"ckpt": str(args.ckpt), "dataset_hash": dataset_hash(args.data)})
        print(json.dumps(scores, indent=1, sort_keys=True))
        return 0

    if args.cmd == "compare":
        cfg = _load_config(args)
        data = load_bundle(args.data)
        out = _resolve_out(args.out, "compare")
        out.mkdir(parents=True, exist_ok=True)
        reports = run_comparison(cfg, data, out)
        _manifest(out, "compare", cfg, {"dataset_hash": dataset_hash(args.data)})
        for method, rep in reports.items():
            s = rep.summary()
            print(
                f"{method:10s} source {s['source_val_dice_mean']:.3f} "
                f"target {s['target_dice_mean']:.3f} consistency {s['consistency_mean']:.3f}"
            )
        return 0

    if args.cmd == "sweep":
        cfg = _load_config(args)
        if args.methods:
            cfg = replace(cfg, sweep_methods=tuple(args.methods.split(",")))
        if args.iterations is not None:
            cfg = replace(cfg, sweep_iterations=args.iterations)
        data = load_bundle(args.data)
        out = _resolve_out(args.out, "sweep")
        out.mkdir(parents=True, exist_ok=True)
        records = run_tradeoff_sweep(cfg, data, out)
        _manifest(out, "sweep", cfg, {"dataset_hash": dataset_hash(args.data)})
        print(f"{len(records)} sweep points written to {out}")
        return 0

    if args.cmd == "ablate":
        cfg = _load_config(args)
        if args.methods:
            cfg = replace(cfg, ablation_methods=tuple(args.methods.split(",")))
        if args.train_families:
            cfg = replace(cfg, ablation_train_families=tuple(args.train_families.split(",")))
        data = load_bundle(args.data)
        out = _resolve_out(args.out, "ablate")
        out.mkdir(parents=True, exist_ok=True)
        arms = tuple(args.arms.split(","))
        results = run_generalization_ablation(cfg, data, out, arms=arms)
        _manifest(out, "ablate", cfg, {"dataset_hash": dataset_hash(args.data)})
        print(f"ablation arms {list(results['arms'])} written to {out}")
        return 0

    if args.cmd == "report":
        run_dir = Path(args.run)
        if not run_dir.is_dir():
            print(f"run directory not found: {run_dir}", file=sys.stderr)
            return 1
        emitted = []
        sweep_file = run_dir / "sweep.json"
        if sweep_file.exists():
            with open(sweep_file) as fh:
                records = json.load(fh)["records"]
            _plot_sweep(records, run_dir / "sweep.png")
            emitted.append("sweep.png")
        for name in ("comparison.json", "ablation.json", "eval.json"):
            f = run_dir / name
            if f.exists():
                emitted.append(name)
                print(f.read_text())
        print(f"report artifacts: {emitted}")
        return 0

    parser.error(f"unknown command {args.cmd}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
