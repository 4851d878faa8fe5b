"""Grid search over the architecture/stopping-point space and the persisted
dictionary of per-image and per-group optimal configurations.

One fitting run per architecture serves every stopping point: checkpoints
are harvested from the run's snapshot trail, which is mathematically
identical to re-running per stopping point and 30x cheaper at full scale.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as met
from .engine import DivergenceError, RunConfig, dip_run
from .image import FINGERPRINT_SIZE, ImageMeta, fingerprint
from .metrics import MetricKind
from .network import UNIFORM_WIDTHS, NetworkSpec, parameter_count

log = logging.getLogger(__name__)

STORE_FORMAT_VERSION = 1
PAPER_CHECKPOINTS = tuple(range(100, 3001, 100))

Config = tuple[NetworkSpec, int]


class StoreFormatError(ValueError):
    """Raised when a persisted store has the wrong version or shape."""


@dataclass(frozen=True)
class SearchSpace:
    """The architecture x stopping-point grid; defaults are the full space
    (5 depths x 7 width options x 2 skip flags = 70 architectures, each with
    30 stopping points)."""

    depths: tuple = (4, 5, 6, 7, 8)
    uniform_widths: tuple = UNIFORM_WIDTHS
    include_progressive: bool = True
    skips: tuple = (False, True)
    checkpoints: tuple = PAPER_CHECKPOINTS

    def __post_init__(self):
        if not self.depths or (not self.uniform_widths and not self.include_progressive):
            raise ValueError("search space must contain at least one architecture")
        bad = [c for c in self.checkpoints if c not in PAPER_CHECKPOINTS]
        if bad or not self.checkpoints:
            raise ValueError(f"checkpoints must be a non-empty subset of {{100..3000 step 100}}, got {bad}")
        if sorted(set(self.checkpoints)) != list(self.checkpoints):
            raise ValueError("checkpoints must be strictly increasing")

    def run_stride(self) -> int:
        return math.gcd(*self.checkpoints) if len(self.checkpoints) > 1 else self.checkpoints[0]

    def architectures(self, seed: int = 0) -> list[NetworkSpec]:
        """All architecture templates in deterministic grid order."""
        specs = []
        for depth in self.depths:
            for width in self.uniform_widths:
                for skip in self.skips:
                    specs.append(NetworkSpec.uniform(depth, width, skip=skip, seed=seed))
            if self.include_progressive:
                for skip in self.skips:
                    specs.append(NetworkSpec.progressive(depth, skip=skip, seed=seed))
        return specs

    def run_config(self, base: RunConfig | None = None) -> RunConfig:
        base = base or RunConfig()
        return RunConfig(
            max_iterations=max(self.checkpoints),
            checkpoint_stride=self.run_stride(),
            learning_rate=base.learning_rate,
            input_noise_scale=base.input_noise_scale,
        )


def enumerate_search_space(space: SearchSpace | None = None, seed: int = 0
                           ) -> list[tuple[NetworkSpec, tuple]]:
    """Architecture templates paired with the stopping-point list."""
    space = space or SearchSpace()
    return [(spec, space.checkpoints) for spec in space.architectures(seed)]


@dataclass
class GridResult:
    """Quality of one (architecture, stopping point) candidate on one image."""

    image_id: str
    spec: NetworkSpec
    iteration: int
    metrics: dict[MetricKind, float]


def config_key(spec: NetworkSpec, iteration: int) -> tuple:
    return (spec.depth, spec.width_mode, spec.width, spec.skip, spec.seed, iteration)


def calibrate_image(noisy: np.ndarray, truth: np.ndarray, space: SearchSpace,
                    base_config: RunConfig | None = None, image_id: str = "image",
                    workers: int = 1, backend=None) -> list[GridResult]:
    """Run the full grid on one image and score every candidate against truth.

    One run per architecture; every snapshot matching a checkpoint becomes a
    :class:`GridResult` with the complete metric report. Diverged
    architectures are logged and excluded.
    """
    noisy = np.asarray(noisy, dtype=np.float32)
    truth = np.asarray(truth, dtype=np.float32)
    if noisy.shape != truth.shape:
        raise ValueError(f"noisy {noisy.shape} and truth {truth.shape} differ in size")
    cfg = space.run_config(base_config)
    wanted = set(space.checkpoints)

    def run_one(spec: NetworkSpec) -> list[GridResult]:
        try:
            trace = dip_run(noisy, spec, cfg)
        except DivergenceError as err:
            log.warning("%s: %s diverged (%s); excluded from optima", image_id,
                        spec.short_name(), err)
            return []
        results = []
        for iteration, snap in trace.snapshots:
            if iteration in wanted:
                report = met.metric_report(np.clip(snap, 0.0, 1.0), truth, backend)
                results.append(GridResult(image_id, spec, iteration, report))
        return results

    specs = space.architectures()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run_one, specs))
    else:
        chunks = [run_one(s) for s in specs]
    return [r for chunk in chunks for r in chunk]


# ---------------------------------------------------------------------------
# optima
# ---------------------------------------------------------------------------

def _oriented(kind: MetricKind, value: float) -> float:
    if kind.compares_absolute:
        return abs(value)
    return -value if kind.higher_is_better else value


def best_per_measure(results: list[GridResult]) -> dict[MetricKind, Config]:
    """Winning (spec, iteration) per measure for one image's result set.

    Higher-better kinds take the argmax, lower-better the argmin and the
    signed gradient difference the minimal absolute value; ties are broken
    by fewer iterations, then smaller parameter count.
    """
    if not results:
        raise ValueError("best_per_measure requires at least one result")
    best: dict[MetricKind, Config] = {}
    for kind in MetricKind:
        chosen = min(
            results,
            key=lambda r: (_oriented(kind, r.metrics[kind]), r.iteration, parameter_count(r.spec)),
        )
        best[kind] = (chosen.spec, chosen.iteration)
    return best


def best_combined(results: list[GridResult]) -> Config:
    """Rank-sum winner over (PSNR, perceptual) for one image's result set."""
    if not results:
        raise ValueError("best_combined requires at least one result")
    pairs = [(r.metrics[MetricKind.PSNR], r.metrics[MetricKind.PERCEPTUAL]) for r in results]
    winner = results[met.rank_sum_select(pairs)]
    return (winner.spec, winner.iteration)


def rank_sums(results: list[GridResult]) -> dict[tuple, float]:
    """Per-config rank sums (PSNR rank + perceptual rank) within one image."""
    from scipy.stats import rankdata

    psnr_vals = np.array([r.metrics[MetricKind.PSNR] for r in results])
    perc_vals = np.array([r.metrics[MetricKind.PERCEPTUAL] for r in results])
    sums = rankdata(-psnr_vals, method="average") + rankdata(perc_vals, method="average")
    return {config_key(r.spec, r.iteration): float(s) for r, s in zip(results, sums)}


def group_best(results_by_image: dict[str, list[GridResult]], member_ids: list[str],
               method: str = "rank") -> Config:
    """The config with the best average performance across a group's images.

    ``method="rank"`` (default) minimizes the mean per-image rank sum, with
    ranks computed within each image's own result grid; ``method="raw"``
    applies the rank-sum selection to per-config group means of PSNR and
    perceptual distance. Ties fall to higher mean PSNR, then fewer iterations.
    """
    if not member_ids:
        raise ValueError("group_best requires a non-empty group")
    if method not in ("rank", "raw"):
        raise ValueError(f"unknown aggregation method {method!r}")
    grids = [results_by_image[i] for i in member_ids]
    key_order = [config_key(r.spec, r.iteration) for r in grids[0]]
    for image_id, grid in zip(member_ids, grids):
        if [config_key(r.spec, r.iteration) for r in grid] != key_order:
            raise ValueError(f"image {image_id!r} has a different config grid than the group")
    by_key = {config_key(r.spec, r.iteration): (r.spec, r.iteration) for r in grids[0]}

    mean_psnr = {
        k: float(np.mean([g[i].metrics[MetricKind.PSNR] for g in grids]))
        for i, k in enumerate(key_order)
    }
    if method == "raw":
        mean_perc = [
            float(np.mean([g[i].metrics[MetricKind.PERCEPTUAL] for g in grids]))
            for i in range(len(key_order))
        ]
        idx = met.rank_sum_select([(mean_psnr[k], p) for k, p in zip(key_order, mean_perc)])
        return by_key[key_order[idx]]

    per_image = [rank_sums(g) for g in grids]
    mean_rank = {k: float(np.mean([rs[k] for rs in per_image])) for k in key_order}
    chosen = min(key_order, key=lambda k: (mean_rank[k], -mean_psnr[k], k[5]))
    return by_key[chosen]


# ---------------------------------------------------------------------------
# groups and the store
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupKey:
    """A metadata group: microscope and/or specimen, None meaning 'any'."""

    microscope: str | None = None
    specimen: str | None = None

    def to_string(self) -> str:
        return f"{self.microscope or '*'}|{self.specimen or '*'}"

    @classmethod
    def from_string(cls, text: str) -> "GroupKey":
        try:
            microscope, specimen = text.split("|")
        except ValueError:
            raise StoreFormatError(f"malformed group key {text!r}") from None
        return cls(None if microscope == "*" else microscope,
                   None if specimen == "*" else specimen)


GLOBAL_GROUP = GroupKey(None, None)


def group_memberships(meta: ImageMeta) -> list[GroupKey]:
    """All groups an image belongs to: combined, per-field and global.

    Unknown metadata fields do not generate groups of their own.
    """
    keys = [GLOBAL_GROUP]
    if meta.microscope != "unknown":
        keys.append(GroupKey(meta.microscope, None))
    if meta.specimen != "unknown":
        keys.append(GroupKey(None, meta.specimen))
    if meta.microscope != "unknown" and meta.specimen != "unknown":
        keys.append(GroupKey(meta.microscope, meta.specimen))
    return keys


@dataclass
class CalibrationEntry:
    """Everything the transfer stage needs to know about one calibration image."""

    image_id: str
    meta: ImageMeta
    best_by_measure: dict[MetricKind, Config]
    best_combined: Config
    noisy_fingerprint: np.ndarray
    embedding: np.ndarray | None = None


@dataclass
class EmbeddingModel:
    """Deterministic principal-component projection of image fingerprints."""

    mean: np.ndarray
    components: np.ndarray  # (dims, pixels), rows ordered by decreasing variance


@dataclass
class CalibrationStore:
    """The persisted transfer dictionary."""

    format_version: int = STORE_FORMAT_VERSION
    entries: list[CalibrationEntry] = field(default_factory=list)
    group_best: dict[GroupKey, Config] = field(default_factory=dict)
    embedding_model: EmbeddingModel | None = None

    def entry(self, image_id: str) -> CalibrationEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(f"no calibration entry {image_id!r}")


def build_store(items: list[tuple[str, ImageMeta, np.ndarray, list[GridResult]]],
                method: str = "rank") -> CalibrationStore:
    """Assemble a store from per-image grid results.

    ``items`` holds (image_id, meta, noisy image, grid results) per
    calibration image. Group optima are computed for every non-empty group
    plus the global one; the embedding model is fitted afterwards by the
    transfer module.
    """
    entries = []
    results_by_image: dict[str, list[GridResult]] = {}
    members: dict[GroupKey, list[str]] = {}
    for image_id, meta, noisy, results in items:
        entries.append(CalibrationEntry(
            image_id=image_id,
            meta=meta,
            best_by_measure=best_per_measure(results),
            best_combined=best_combined(results),
            noisy_fingerprint=fingerprint(noisy),
        ))
        results_by_image[image_id] = results
        for key in group_memberships(meta):
            members.setdefault(key, []).append(image_id)
    group_configs = {
        key: group_best(results_by_image, ids, method=method) for key, ids in members.items()
    }
    return CalibrationStore(entries=entries, group_best=group_configs)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _spec_to_json(spec: NetworkSpec) -> dict:
    return {"depth": spec.depth, "width_mode": spec.width_mode, "width": spec.width,
            "skip": spec.skip, "seed": spec.seed}


def _spec_from_json(obj: dict, where: str) -> NetworkSpec:
    try:
        return NetworkSpec(depth=obj["depth"], width_mode=obj["width_mode"],
                           width=obj["width"], skip=obj["skip"], seed=obj["seed"])
    except (KeyError, TypeError, ValueError) as err:
        raise StoreFormatError(f"{where}: invalid network spec {obj!r} ({err})") from None


def _config_to_json(config: Config) -> dict:
    spec, iteration = config
    return {"spec": _spec_to_json(spec), "iteration": iteration}


def _config_from_json(obj: dict, where: str) -> Config:
    if not isinstance(obj, dict) or "spec" not in obj or "iteration" not in obj:
        raise StoreFormatError(f"{where}: expected {{spec, iteration}}, got {obj!r}")
    return (_spec_from_json(obj["spec"], where), int(obj["iteration"]))


def _meta_to_json(meta: ImageMeta) -> dict:
    return {"source_id": meta.source_id, "microscope": meta.microscope,
            "specimen": meta.specimen, "noise_level": meta.noise_level,
            "bit_depth": meta.bit_depth}


def store_to_json(store: CalibrationStore) -> str:
    """Serialize a store with full float precision and stable key order."""
    obj = {
        "format_version": store.format_version,
        "entries": [
            {
                "image_id": e.image_id,
                "meta": _meta_to_json(e.meta),
                "best_by_measure": {k.value: _config_to_json(v) for k, v in e.best_by_measure.items()},
                "best_combined": _config_to_json(e.best_combined),
                "noisy_fingerprint": [[float(v) for v in row] for row in e.noisy_fingerprint],
                "embedding": None if e.embedding is None else [float(v) for v in e.embedding],
            }
            for e in store.entries
        ],
        "group_best": {k.to_string(): _config_to_json(v) for k, v in store.group_best.items()},
        "embedding_model": None if store.embedding_model is None else {
            "mean": [float(v) for v in store.embedding_model.mean],
            "components": [[float(v) for v in row] for row in store.embedding_model.components],
        },
    }
    return json.dumps(obj, sort_keys=True, indent=1)


def save_store(store: CalibrationStore, path):
    with open(path, "w") as fh:
        fh.write(store_to_json(store))
        fh.write("\n")


def load_store(path) -> CalibrationStore:
    """Load and validate a persisted store; round trips are value-exact."""
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as err:
            raise StoreFormatError(f"{path}: not valid JSON ({err})") from None
    if not isinstance(obj, dict):
        raise StoreFormatError(f"{path}: expected a JSON object at top level")
    version = obj.get("format_version")
    if version != STORE_FORMAT_VERSION:
        raise StoreFormatError(
            f"{path}: store format_version {version!r} is not supported "
            f"(expected {STORE_FORMAT_VERSION})"
        )
    entries = []
    for i, raw in enumerate(obj.get("entries", [])):
        where = f"entries[{i}]"
        for field_name in ("image_id", "meta", "best_by_measure", "best_combined", "noisy_fingerprint"):
            if field_name not in raw:
                raise StoreFormatError(f"{path}: {where} is missing {field_name!r}")
        meta_raw = raw["meta"]
        try:
            meta = ImageMeta(**meta_raw)
        except (TypeError, ValueError) as err:
            raise StoreFormatError(f"{path}: {where}.meta invalid ({err})") from None
        try:
            best_by = {MetricKind(k): _config_from_json(v, f"{where}.best_by_measure[{k}]")
                       for k, v in raw["best_by_measure"].items()}
        except ValueError as err:
            raise StoreFormatError(f"{path}: {where}.best_by_measure has an unknown measure ({err})") from None
        fp = np.asarray(raw["noisy_fingerprint"], dtype=np.float32)
        if fp.shape != (FINGERPRINT_SIZE, FINGERPRINT_SIZE):
            raise StoreFormatError(
                f"{path}: {where}.noisy_fingerprint must be "
                f"{FINGERPRINT_SIZE}x{FINGERPRINT_SIZE}, got {fp.shape}"
            )
        emb = raw.get("embedding")
        entries.append(CalibrationEntry(
            image_id=raw["image_id"],
            meta=meta,
            best_by_measure=best_by,
            best_combined=_config_from_json(raw["best_combined"], f"{where}.best_combined"),
            noisy_fingerprint=fp,
            embedding=None if emb is None else np.asarray(emb, dtype=np.float64),
        ))
    groups = {}
    for key, raw in obj.get("group_best", {}).items():
        groups[GroupKey.from_string(key)] = _config_from_json(raw, f"group_best[{key}]")
    model_raw = obj.get("embedding_model")
    model = None
    if model_raw is not None:
        if "mean" not in model_raw or "components" not in model_raw:
            raise StoreFormatError(f"{path}: embedding_model must carry 'mean' and 'components'")
        model = EmbeddingModel(
            mean=np.asarray(model_raw["mean"], dtype=np.float64),
            components=np.asarray(model_raw["components"], dtype=np.float64),
        )
    return CalibrationStore(format_version=version, entries=entries,
                            group_best=groups, embedding_model=model)
