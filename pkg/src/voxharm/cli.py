"""Command-line entry point.

One executable with subcommands covering the whole workflow: phantom cohort
generation, Stage-I training, target selection, Stage-II fine-tuning, both
harmonization inference paths, quantitative evaluation with figures, and the
trajectory grid search.  Every run writes a resolved-config echo plus seed
record into the runs directory; failures exit nonzero with one JSON error
record on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evalbench, reports
from .config import ConfigError, RunConfig, parse_config, write_config_echo
from .phantom import PhantomSpec, generate_dataset
from .pipeline import (
    StageOneCheckpoint,
    StageTwoCheckpoint,
    finetune_stage2,
    harmonize_global,
    harmonize_to_target,
    select_target_site,
    train_stage1,
)
from .volume import DatasetManifest, load_manifest, save_manifest, write_volume

COMMANDS = (
    "gen-data",
    "train-stage1",
    "harmonize-global",
    "select-target",
    "finetune-stage2",
    "harmonize-target",
    "evaluate",
    "grid-search",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxharm",
        description="Two-stage diffusion harmonization of multi-site 3D volumes",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--preset", choices=("tiny", "paper"), default=None)
        p.add_argument("--workers", type=int, default=None, help="parallel volume workers")
        p.add_argument("--t-forward", type=int, default=None, help="DDIM inversion steps")
        p.add_argument("--t-reverse", type=int, default=None, help="DDIM sampling steps")
        p.add_argument("--target-site", type=int, default=None)
        if name in ("harmonize-global", "harmonize-target", "evaluate", "grid-search"):
            p.add_argument("--split", default="test", help="manifest split, or 'all'")
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = parse_config(args.config, preset=args.preset)
    if args.workers is not None:
        config.workers = args.workers
    if args.t_forward is not None:
        config.trajectory.t_forward = args.t_forward
    if args.t_reverse is not None:
        config.trajectory.t_reverse = args.t_reverse
    return config.validate()


def _echo(config: RunConfig, command: str, extra: dict | None = None) -> None:
    write_config_echo(
        config,
        config.runs_dir() / f"{command}.resolved.json",
        {"command": command, **(extra or {})},
    )


def _manifest(config: RunConfig) -> DatasetManifest:
    return load_manifest(config.data_dir() / "manifest.tsv")


def _split_entries(manifest: DatasetManifest, split: str):
    return list(manifest.entries) if split == "all" else manifest.filter(split=split)


def _resolve_target_site(args, config: RunConfig, manifest: DatasetManifest) -> int:
    if args.target_site is not None:
        return args.target_site
    marker = config.runs_dir() / "target_site.json"
    if marker.exists():
        return json.loads(marker.read_text())["target_site"]
    return select_target_site(manifest, bins=config.eval.wd_bins)


def _parallel_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _harmonize_split(config, manifest, entries, out_dir, transform) -> DatasetManifest:
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(entry):
        volume = transform(manifest.load(entry))
        write_volume(volume, out_dir / Path(entry.path).name)
        return entry

    done = _parallel_map(one, entries, config.workers)
    out_manifest = DatasetManifest(
        entries=[e.__class__(**{**e.__dict__, "path": Path(e.path).name}) for e in done],
        base_dir=out_dir,
    )
    save_manifest(out_manifest, out_dir / "manifest.tsv")
    return out_manifest


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    spec = PhantomSpec(
        subjects=config.data.subjects,
        sites=config.data.sites,
        sequences=config.data.sequences,
        dims=tuple(config.data.dims),
        seed=config.seeds.root,
        out_dir=config.data_dir(),
        train_subjects=config.data.train_subjects,
        val_subjects=config.data.val_subjects,
        test_subjects=config.data.test_subjects,
        target_site=config.data.target_site,
    )
    manifest = generate_dataset(spec)
    _echo(config, "gen-data", {"volumes": len(manifest.entries)})
    print(f"wrote {len(manifest.entries)} volumes to {spec.out_dir}")
    return 0


def cmd_train_stage1(args) -> int:
    config = _load_config(args)
    manifest = _manifest(config)
    log_path = config.runs_dir() / "stage1_log.jsonl"
    ckpt = train_stage1(manifest, config, log_path=log_path)
    out = config.runs_dir() / "stage1.ckpt"
    ckpt.save(out)
    _echo(config, "train-stage1", {"checkpoint": str(out), "fingerprint": ckpt.fingerprint})
    print(f"stage-1 checkpoint: {out} (fingerprint {ckpt.fingerprint})")
    return 0


def cmd_select_target(args) -> int:
    config = _load_config(args)
    manifest = _manifest(config)
    site = select_target_site(manifest, bins=config.eval.wd_bins)
    config.runs_dir().mkdir(parents=True, exist_ok=True)
    (config.runs_dir() / "target_site.json").write_text(json.dumps({"target_site": site}) + "\n")
    _echo(config, "select-target", {"target_site": site})
    print(json.dumps({"target_site": site}))
    return 0


def cmd_harmonize_global(args) -> int:
    config = _load_config(args)
    manifest = _manifest(config)
    ckpt = StageOneCheckpoint.load(config.runs_dir() / "stage1.ckpt")
    entries = _split_entries(manifest, args.split)
    out_dir = config.runs_dir() / "harmonized_global"
    _harmonize_split(
        config,
        manifest,
        entries,
        out_dir,
        lambda rec: harmonize_global(rec, ckpt, config.trajectory),
    )
    _echo(config, "harmonize-global", {"volumes": len(entries), "out_dir": str(out_dir)})
    print(f"harmonized {len(entries)} volumes into {out_dir}")
    return 0


def cmd_finetune_stage2(args) -> int:
    config = _load_config(args)
    manifest = _manifest(config)
    s1 = StageOneCheckpoint.load(config.runs_dir() / "stage1.ckpt")
    target = _resolve_target_site(args, config, manifest)
    log_path = config.runs_dir() / "stage2_log.jsonl"
    ckpt = finetune_stage2(
        manifest,
        target,
        s1,
        config,
        log_path=log_path,
        cache_dir=config.runs_dir() / "cache",
    )
    out = config.runs_dir() / "stage2.ckpt"
    ckpt.save(out)
    _echo(config, "finetune-stage2", {"checkpoint": str(out), "target_site": target})
    print(f"stage-2 checkpoint: {out} (target site {target})")
    return 0


def cmd_harmonize_target(args) -> int:
    config = _load_config(args)
    manifest = _manifest(config)
    s1 = StageOneCheckpoint.load(config.runs_dir() / "stage1.ckpt")
    s2 = StageTwoCheckpoint.load(config.runs_dir() / "stage2.ckpt")
    entries = _split_entries(manifest, args.split)
    out_dir = config.runs_dir() / "harmonized_target"
    _harmonize_split(
        config,
        manifest,
        entries,
        out_dir,
        lambda rec: harmonize_to_target(rec, s1, s2, config.trajectory),
    )
    _echo(config, "harmonize-target", {"volumes": len(entries), "out_dir": str(out_dir)})
    print(f"harmonized {len(entries)} volumes into {out_dir}")
    return 0


def _voxel_rows(config, manifest, entries, harmonized: dict[str, DatasetManifest], target_site):
    """Per-volume metrics against the same-subject target-site render."""
    rows = []
    targets = {}
    for e in manifest.entries:
        if e.site == target_site:
            targets[(e.subject, e.sequence)] = manifest.load(e).volume.data
    for e in entries:
        if e.site == target_site:
            continue
        ref = targets.get((e.subject, e.sequence))
        if ref is None:
            continue
        candidates = {"raw": manifest.load(e).volume.data}
        for method, hm in harmonized.items():
            match = [h for h in hm.entries if Path(h.path).name == Path(e.path).name]
            if match:
                candidates[method] = hm.load(match[0]).volume.data
        for method, data in candidates.items():
            rows.append(
                {
                    "method": method,
                    "subject": e.subject,
                    "site": e.site,
                    "sequence": e.sequence,
                    "ssim": evalbench.ssim(ref, data, window=config.eval.ssim_window),
                    "psnr": evalbench.psnr(ref, data),
                    "pcc": evalbench.pcc(ref, data),
                    "wd": evalbench.intensity_wd(ref, data, bins=config.eval.wd_bins),
                }
            )
    return rows


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    manifest = _manifest(config)
    target_site = _resolve_target_site(args, config, manifest)
    entries = _split_entries(manifest, args.split)

    harmonized: dict[str, DatasetManifest] = {}
    for method, sub in (("global", "harmonized_global"), ("target", "harmonized_target")):
        mpath = config.runs_dir() / sub / "manifest.tsv"
        if mpath.exists():
            harmonized[method] = load_manifest(mpath)
    report_dir = config.runs_dir() / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    rows = _voxel_rows(config, manifest, entries, harmonized, target_site)
    jsonl_records = [{"kind": "voxel_metrics", **r} for r in rows]
    if rows:
        reports.write_tsv(
            report_dir / "voxel_metrics.tsv",
            ["method", "subject", "site", "sequence", "ssim", "psnr", "pcc", "wd"],
            [[r[k] for k in ("method", "subject", "site", "sequence", "ssim", "psnr", "pcc", "wd")] for r in rows],
        )
        reports.fig_metric_summary(rows, report_dir / "metric_summary.png")

    # Feature clustering and the site probe, raw vs each harmonized set.
    cluster_rows, probe_rows = [], []
    datasets = {"raw": [(e, manifest.load(e).volume.data) for e in entries]}
    for method, hm in harmonized.items():
        named = {Path(h.path).name: h for h in hm.entries}
        pairs = []
        for e in entries:
            h = named.get(Path(e.path).name)
            if h is not None:
                pairs.append((e, hm.load(h).volume.data))
        if pairs:
            datasets[method] = pairs
    for method, pairs in datasets.items():
        if len({e.site for e, _ in pairs}) < 2:
            continue
        feats = np.stack(
            [evalbench.feature_extract(d, seed=config.eval.feature_seed) for _, d in pairs]
        )
        sites = [e.site for e, _ in pairs]
        cluster = evalbench.centroid_analysis(feats, sites)
        cluster_rows.append(
            {"method": method, "inter_site": cluster.inter_site, "intra_site": cluster.intra_site}
        )
        if all(sites.count(s) >= 2 for s in set(sites)):
            probe = evalbench.site_probe(
                feats,
                sites,
                split_seed=config.eval.probe_seed,
                lr=config.eval.probe_lr,
                iters=config.eval.probe_iters,
            )
            probe_rows.append(
                {
                    "method": method,
                    "balanced_accuracy": probe.balanced_accuracy,
                    "f1": probe.f1,
                    "precision": probe.precision,
                    "recall": probe.recall,
                }
            )
    if cluster_rows:
        reports.write_tsv(
            report_dir / "cluster.tsv",
            ["method", "inter_site", "intra_site"],
            [[r["method"], r["inter_site"], r["intra_site"]] for r in cluster_rows],
        )
        reports.fig_cluster_summary(cluster_rows, report_dir / "cluster_summary.png")
        jsonl_records += [{"kind": "cluster", **r} for r in cluster_rows]
    if probe_rows:
        reports.write_tsv(
            report_dir / "probe.tsv",
            ["method", "balanced_accuracy", "f1", "precision", "recall"],
            [
                [r["method"], r["balanced_accuracy"], r["f1"], r["precision"], r["recall"]]
                for r in probe_rows
            ],
        )
        jsonl_records += [{"kind": "probe", **r} for r in probe_rows]

    groups = {}
    for method, pairs in datasets.items():
        for m in sorted({e.sequence for e, _ in pairs}):
            groups[f"{method} seq {m}"] = [
                (d, e.site == target_site) for e, d in pairs if e.sequence == m
            ]
    reports.fig_intensity_histograms(
        groups, report_dir / "intensity_histograms.png", bins=config.eval.wd_bins
    )
    for stage_log in ("stage1_log.jsonl", "stage2_log.jsonl"):
        lp = config.runs_dir() / stage_log
        if lp.exists():
            reports.fig_training_curves(lp, report_dir / stage_log.replace(".jsonl", ".png"))

    summary: dict[str, dict[str, float]] = {}
    for method in sorted({r["method"] for r in rows}):
        mrows = [r for r in rows if r["method"] == method]
        summary[f"voxel metrics vs target renders: {method}"] = {
            k: float(np.mean([r[k] for r in mrows])) for k in ("ssim", "psnr", "pcc", "wd")
        }
    for r in cluster_rows:
        summary[f"feature clustering: {r['method']}"] = {
            "inter_site": r["inter_site"],
            "intra_site": r["intra_site"],
        }
    for r in probe_rows:
        summary[f"site probe: {r['method']}"] = {
            "balanced_accuracy": r["balanced_accuracy"],
            "f1": r["f1"],
        }
    reports.write_summary_table(report_dir / "summary.txt", summary)
    reports.write_jsonl(report_dir / "report.jsonl", jsonl_records)
    _echo(config, "evaluate", {"report_dir": str(report_dir), "target_site": target_site})
    print(f"report written to {report_dir}")
    return 0


def cmd_grid_search(args) -> int:
    config = _load_config(args)
    manifest = _manifest(config)
    ckpt = StageOneCheckpoint.load(config.runs_dir() / "stage1.ckpt")
    grid = [(tf, tr) for tf in config.eval.grid_forward for tr in config.eval.grid_reverse]
    split = None if args.split == "all" else args.split
    report = evalbench.grid_search_trajectory(manifest, ckpt, grid, split=split)
    report_dir = config.runs_dir() / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    reports.write_tsv(
        report_dir / "grid_search.tsv",
        ["t_forward", "t_reverse", "mean_wd", "mean_ssim"],
        [[c.t_forward, c.t_reverse, c.mean_wd, c.mean_ssim] for c in report.cells],
    )
    reports.fig_grid_heatmap(report, report_dir / "grid_search.png")
    best = report.best
    _echo(
        config,
        "grid-search",
        {"best": {"t_forward": best.t_forward, "t_reverse": best.t_reverse, "wd": best.mean_wd}},
    )
    print(
        json.dumps(
            {"best_t_forward": best.t_forward, "best_t_reverse": best.t_reverse, "wd": best.mean_wd}
        )
    )
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-stage1": cmd_train_stage1,
    "select-target": cmd_select_target,
    "harmonize-global": cmd_harmonize_global,
    "finetune-stage2": cmd_finetune_stage2,
    "harmonize-target": cmd_harmonize_target,
    "evaluate": cmd_evaluate,
    "grid-search": cmd_grid_search,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except Exception as exc:  # surfaced with module provenance, never a traceback dump
        print(
            json.dumps(
                {"error": type(exc).__name__, "module": type(exc).__module__, "message": str(exc)}
            ),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
