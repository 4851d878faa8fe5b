"""Command-line entry point: calibrate, denoise, evaluate, synth, inspect-store.

Every command is deterministic given its flags and seeds; the worker count
only changes scheduling, never results. ``AUTODIP_WORKERS`` overrides the
config-file worker count, and an explicit ``--workers`` flag beats both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (GridResult, SearchSpace, StoreFormatError, build_store,
                          load_store, save_store)
from .engine import RunConfig
from .image import ImageMeta, load_image, save_image, normalize, write_raw
from .metrics import MetricKind, psnr, perceptual_distance
from .network import NetworkSpec
from .synthdata import PhantomKind, build_synthetic_dataset
from .transfer import (TransferDecision, TransferStrategy, auto_denoise,
                       baseline_config, denoise_with_config, fit_embedding,
                       select_config)


@dataclass
class CliConfig:
    """File-configurable knobs shared by the subcommands."""

    worker_count: int = 1
    depths: tuple = (4, 5, 6, 7, 8)
    uniform_widths: tuple = (16, 32, 64, 128, 256, 512)
    include_progressive: bool = True
    skips: tuple = (False, True)
    checkpoints: tuple = tuple(range(100, 3001, 100))
    learning_rate: float = 0.01
    input_noise_scale: float = 0.1
    strategy: str = "group:microscope+specimen"
    group_method: str = "rank"
    base_seed: int = 0

    def search_space(self) -> SearchSpace:
        return SearchSpace(
            depths=tuple(self.depths),
            uniform_widths=tuple(self.uniform_widths),
            include_progressive=self.include_progressive,
            skips=tuple(self.skips),
            checkpoints=tuple(self.checkpoints),
        )

    def run_config(self) -> RunConfig:
        return RunConfig(learning_rate=self.learning_rate,
                         input_noise_scale=self.input_noise_scale)


def _load_cli_config(path) -> CliConfig:
    cfg = CliConfig()
    if path is None:
        return cfg
    with open(path) as fh:
        raw = json.load(fh)
    known = set(CliConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}; known keys: {sorted(known)}")
    for key, value in raw.items():
        if isinstance(getattr(cfg, key), tuple):
            value = tuple(value)
        setattr(cfg, key, value)
    if cfg.worker_count < 1:
        raise ValueError("worker_count must be >= 1")
    return cfg


def _resolve_workers(args, cfg: CliConfig) -> int:
    if getattr(args, "workers", None):
        return args.workers
    env = os.environ.get("AUTODIP_WORKERS")
    if env:
        return max(1, int(env))
    return cfg.worker_count


def _load_manifest(path, need_truth: bool) -> list[dict]:
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list) or not raw:
        raise ValueError(f"{path}: manifest must be a non-empty JSON list")
    items = []
    for i, rec in enumerate(raw):
        if "noisy_path" not in rec:
            raise ValueError(f"{path}: entry {i} is missing noisy_path")
        if need_truth and not rec.get("truth_path"):
            raise ValueError(f"{path}: entry {i} is missing truth_path (required here)")
        noisy_path = (path.parent / rec["noisy_path"]).resolve()
        truth_path = (path.parent / rec["truth_path"]).resolve() if rec.get("truth_path") else None
        meta = ImageMeta(
            source_id=rec.get("source_id") or noisy_path.stem,
            microscope=rec.get("microscope", "unknown"),
            specimen=rec.get("specimen", "unknown"),
            noise_level=rec.get("noise_level"),
        )
        items.append({"noisy_path": noisy_path, "truth_path": truth_path, "meta": meta})
    ids = [it["meta"].source_id for it in items]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate source ids in manifest")
    return items


# ---------------------------------------------------------------------------
# grid-result caching (calibrate resume + evaluate oracle)
# ---------------------------------------------------------------------------

def _grid_to_json(results: list[GridResult]) -> list[dict]:
    return [
        {
            "image_id": r.image_id,
            "spec": {"depth": r.spec.depth, "width_mode": r.spec.width_mode,
                     "width": r.spec.width, "skip": r.spec.skip, "seed": r.spec.seed},
            "iteration": r.iteration,
            "metrics": {k.value: v for k, v in r.metrics.items()},
        }
        for r in results
    ]


def _grid_from_json(raw: list[dict]) -> list[GridResult]:
    return [
        GridResult(
            image_id=rec["image_id"],
            spec=NetworkSpec(**rec["spec"]),
            iteration=rec["iteration"],
            metrics={MetricKind(k): v for k, v in rec["metrics"].items()},
        )
        for rec in raw
    ]


def _partial_dir(store_path) -> Path:
    return Path(str(store_path) + ".partial")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    from .calibration import calibrate_image

    cfg = _load_cli_config(args.config)
    workers = _resolve_workers(args, cfg)
    space = cfg.search_space()
    items = _load_manifest(args.manifest, need_truth=True)
    partial = _partial_dir(args.store)
    partial.mkdir(parents=True, exist_ok=True)

    collected = []
    n_configs = len(space.architectures()) * len(space.checkpoints)
    for i, item in enumerate(items):
        meta = item["meta"]
        noisy_raw = load_image(item["noisy_path"])
        truth_raw = load_image(item["truth_path"])
        noisy, _ = normalize(noisy_raw)
        truth, _ = normalize(truth_raw)
        cache = partial / f"{meta.source_id}.json"
        if cache.exists():
            with open(cache) as fh:
                results = _grid_from_json(json.load(fh))
            note = "resumed"
        else:
            results = calibrate_image(noisy, truth, space, base_config=cfg.run_config(),
                                      image_id=meta.source_id, workers=workers)
            with open(cache, "w") as fh:
                json.dump(_grid_to_json(results), fh, sort_keys=True)
            note = f"{len(results)}/{n_configs} configs"
        collected.append((meta.source_id, meta, noisy, results))
        print(f"[{i + 1}/{len(items)}] {meta.source_id}: {note}", flush=True)

    store = build_store(collected, method=cfg.group_method)
    fit_embedding(store)
    save_store(store, args.store)
    print(f"store written to {args.store} "
          f"({len(store.entries)} entries, {len(store.group_best)} groups)")
    return 0


def _parse_meta_flags(args) -> ImageMeta:
    return ImageMeta(
        source_id=args.source_id or Path(args.input).stem,
        microscope=args.microscope,
        specimen=args.specimen,
        noise_level=args.noise_level,
    )


def cmd_denoise(args) -> int:
    cfg = _load_cli_config(args.config)
    workers = _resolve_workers(args, cfg)
    img = load_image(args.input)
    meta = _parse_meta_flags(args)
    run_cfg = cfg.run_config()

    started = time.perf_counter()
    if args.strategy == "baseline":
        spec, iteration = baseline_config()
        decision = TransferDecision(spec=spec, iteration=iteration,
                                    source="baseline", strategy="baseline")
        select_seconds = 0.0
    else:
        if not args.store:
            raise ValueError("--store is required for transfer strategies")
        store = load_store(args.store)
        strategy = TransferStrategy.parse(args.strategy)
        decision = select_config(img, meta, store, strategy)
        select_seconds = time.perf_counter() - started

    fit_started = time.perf_counter()
    out = denoise_with_config(img, decision.spec, decision.iteration,
                              cfg=run_cfg, workers=workers)
    fit_seconds = time.perf_counter() - fit_started

    output = Path(args.output) if args.output else Path(args.input).with_stem(
        Path(args.input).stem + ".denoised")
    bit_depth = "raw_float" if output.suffix.lower() == ".adipf" else args.bit_depth
    save_image(output, out, bit_depth=bit_depth)

    record = {
        "input": str(args.input),
        "output": str(output),
        "strategy": decision.strategy,
        "source": decision.source,
        "similarity_value": decision.similarity_value,
        "spec": {"depth": decision.spec.depth, "width_mode": decision.spec.width_mode,
                 "width": decision.spec.width, "skip": decision.spec.skip,
                 "seed": decision.spec.seed},
        "iteration": decision.iteration,
        "timings": {"select_seconds": select_seconds, "denoise_seconds": fit_seconds,
                    "total_seconds": time.perf_counter() - started},
    }
    decision_path = Path(args.decision) if args.decision else Path(str(output) + ".decision.json")
    with open(decision_path, "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"denoised {args.input} -> {output} "
          f"[{decision.strategy}: {decision.spec.short_name()} @ {decision.iteration}]")
    return 0


def _score(denoised_norm, truth_norm) -> dict[str, float]:
    return {"psnr": psnr(denoised_norm, truth_norm),
            "perceptual": perceptual_distance(denoised_norm, truth_norm)}


def cmd_evaluate(args) -> int:
    cfg = _load_cli_config(args.config)
    workers = _resolve_workers(args, cfg)
    items = _load_manifest(args.manifest, need_truth=True)
    store = load_store(args.store)
    run_cfg = cfg.run_config()
    strategies = [s for s in (args.strategies or cfg.strategy).split(",") if s]
    columns = strategies + ["baseline", "oracle"]

    grid_cache = Path(args.grid_cache) if args.grid_cache else _partial_dir(args.store)
    cache_path = Path(str(args.report) + ".results.json")
    cached: dict = {}
    if cache_path.exists():
        with open(cache_path) as fh:
            cached = json.load(fh)

    per_image: dict[str, dict[str, dict[str, float] | None]] = {}
    for item in items:
        meta = item["meta"]
        image_id = meta.source_id
        noisy = load_image(item["noisy_path"])
        truth_norm, _ = normalize(load_image(item["truth_path"]))
        row = per_image.setdefault(image_id, {})
        for name in columns:
            hit = cached.get(image_id, {}).get(name)
            if hit is not None:
                row[name] = hit
                continue
            if name == "oracle":
                grid_file = grid_cache / f"{image_id}.json"
                if not grid_file.exists():
                    row[name] = None  # no cached grid results: column unavailable
                    continue
                from .calibration import best_combined
                with open(grid_file) as fh:
                    results = _grid_from_json(json.load(fh))
                spec, iteration = best_combined(results)
                winner = next(r for r in results
                              if r.spec == spec and r.iteration == iteration)
                row[name] = {"psnr": winner.metrics[MetricKind.PSNR],
                             "perceptual": winner.metrics[MetricKind.PERCEPTUAL]}
                continue
            if name == "baseline":
                spec, iteration = baseline_config()
            else:
                decision = select_config(noisy, meta, store, TransferStrategy.parse(name))
                spec, iteration = decision.spec, decision.iteration
            out = denoise_with_config(noisy, spec, iteration, cfg=run_cfg,
                                      workers=workers, denormalize_output=False)
            row[name] = _score(out, truth_norm)
        print(f"{image_id}: " + "  ".join(
            f"{name}={row[name]['psnr']:.2f}/{row[name]['perceptual']:.3f}"
            if row[name] else f"{name}=n/a" for name in columns), flush=True)

    with open(cache_path, "w") as fh:
        json.dump(per_image, fh, indent=1, sort_keys=True)
        fh.write("\n")

    groups: dict[str, list[str]] = {}
    for item in items:
        meta = item["meta"]
        groups.setdefault(f"{meta.microscope}|{meta.specimen}", []).append(meta.source_id)
    groups["overall"] = [item["meta"].source_id for item in items]

    lines = ["\t".join(["group", "measure"] + columns)]
    for group in sorted(k for k in groups if k != "overall") + ["overall"]:
        ids = groups[group]
        for measure in ("psnr", "perceptual"):
            cells = []
            for name in columns:
                vals = [per_image[i][name][measure] for i in ids if per_image[i][name]]
                cells.append(f"{np.mean(vals):.4f}" if vals else "n/a")
            lines.append("\t".join([group, measure] + cells))
    report_text = "\n".join(lines) + "\n"
    with open(args.report, "w") as fh:
        fh.write(report_text)
    print(report_text, end="")
    return 0


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    kinds = [PhantomKind(k) for k in args.kinds.split(",")]
    levels = [int(s) for s in args.noise_levels.split(",")]
    calibration, validation = build_synthetic_dataset(
        kinds=kinds, noise_levels=levels, per_cell=args.per_cell,
        validation_per_cell=args.val_per_cell, size=args.size,
        gaussian_sigma=args.sigma, poisson_gain=args.gain, seed=args.seed,
    )
    for split, items in (("calibration", calibration), ("validation", validation)):
        manifest = []
        for item in items:
            sid = item.meta.source_id
            noisy_rel = f"images/{sid}.noisy.adipf"
            truth_rel = f"images/{sid}.truth.adipf"
            write_raw(out_dir / noisy_rel, item.noisy)
            write_raw(out_dir / truth_rel, item.clean)
            manifest.append({
                "noisy_path": noisy_rel, "truth_path": truth_rel,
                "microscope": item.meta.microscope, "specimen": item.meta.specimen,
                "noise_level": item.meta.noise_level, "source_id": sid,
            })
        with open(out_dir / f"{split}_manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        print(f"{split}: {len(items)} images")
    return 0


def cmd_inspect_store(args) -> int:
    store = load_store(args.store)
    print(f"format_version: {store.format_version}")
    print(f"entries: {len(store.entries)}   groups: {len(store.group_best)}   "
          f"embedding: {'fitted' if store.embedding_model is not None else 'none'}")
    print("\ngroup optima:")
    for key in sorted(store.group_best, key=lambda k: k.to_string()):
        spec, iteration = store.group_best[key]
        print(f"  {key.to_string():<32} {spec.short_name():<18} @ {iteration}")
    print("\nper-image combined optima:")
    for entry in store.entries:
        spec, iteration = entry.best_combined
        print(f"  {entry.image_id:<32} {spec.short_name():<18} @ {iteration} "
              f"({entry.meta.microscope}|{entry.meta.specimen})")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="autodip",
        description="DIP denoising with calibrated architecture/stopping-point transfer",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="grid-search a calibration set and write the store")
    cal.add_argument("--manifest", required=True, help="JSON manifest of (noisy, truth, meta) items")
    cal.add_argument("--store", required=True, help="output store path (JSON)")
    cal.add_argument("--config", help="CLI config file (JSON)")
    cal.add_argument("--workers", type=int, help="parallel architecture runs")
    cal.set_defaults(func=cmd_calibrate)

    den = sub.add_parser("denoise", help="denoise one image with a transferred config")
    den.add_argument("--input", required=True)
    den.add_argument("--store", help="calibration store (not needed for --strategy baseline)")
    den.add_argument("--strategy", default="group:microscope+specimen",
                     help="'baseline', 'group:<scope>' or 'metric:<measure>@<scope>'")
    den.add_argument("--output", help="output image path (default: <input>.denoised.<ext>)")
    den.add_argument("--decision", help="decision record path (default: <output>.decision.json)")
    den.add_argument("--microscope", default="unknown")
    den.add_argument("--specimen", default="unknown")
    den.add_argument("--noise-level", type=int, dest="noise_level")
    den.add_argument("--source-id", dest="source_id")
    den.add_argument("--bit-depth", type=int, default=16, dest="bit_depth")
    den.add_argument("--config", help="CLI config file (JSON)")
    den.add_argument("--workers", type=int)
    den.set_defaults(func=cmd_denoise)

    ev = sub.add_parser("evaluate", help="score transfer strategies against ground truth")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--store", required=True)
    ev.add_argument("--strategies", help="comma-separated strategy strings")
    ev.add_argument("--report", required=True, help="output TSV path")
    ev.add_argument("--grid-cache", dest="grid_cache",
                    help="directory of cached grid results for the oracle column "
                         "(default: <store>.partial)")
    ev.add_argument("--config", help="CLI config file (JSON)")
    ev.add_argument("--workers", type=int)
    ev.set_defaults(func=cmd_evaluate)

    syn = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    syn.add_argument("--out", required=True)
    syn.add_argument("--kinds", default="dots,filaments,blobs")
    syn.add_argument("--noise-levels", default="1,2", dest="noise_levels")
    syn.add_argument("--per-cell", type=int, default=2, dest="per_cell")
    syn.add_argument("--val-per-cell", type=int, default=1, dest="val_per_cell")
    syn.add_argument("--size", type=int, default=64)
    syn.add_argument("--sigma", type=float, default=0.25)
    syn.add_argument("--gain", type=float, default=0.0)
    syn.add_argument("--seed", type=int, default=0)
    syn.set_defaults(func=cmd_synth)

    ins = sub.add_parser("inspect-store", help="pretty-print a calibration store")
    ins.add_argument("--store", required=True)
    ins.set_defaults(func=cmd_inspect_store)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, StoreFormatError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
