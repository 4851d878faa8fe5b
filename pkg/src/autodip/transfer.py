"""Configuration transfer: pick an (architecture, stopping point) for an
unseen image from the calibration dictionary, then run the full denoising
pipeline with it.

Three strategy families are supported: group-based (metadata lookup),
metric-based (nearest calibration image under a similarity measure) and the
combination (metric-based within a metadata-restricted pool). Similarity is
always computed between noisy fingerprints; ground truth of the new image
is unavailable by definition.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import metrics as met
from .calibration import (GLOBAL_GROUP, CalibrationEntry, CalibrationStore,
                          Config, EmbeddingModel, GroupKey)
from .engine import DivergenceError, RunConfig, dip_denoise
from .image import (DEFAULT_OVERLAP, DEFAULT_PATCH_SIZE, ImageMeta, Patch,
                    denormalize, fingerprint, mean_gradient, merge_channels,
                    normalize, split_channels, stitch, tile)
from .network import NetworkSpec

EMBEDDING_DIMS = 8


class Scope(str, Enum):
    """How far the calibration pool is restricted by metadata."""

    ALL = "all"
    MICROSCOPE = "microscope"
    SPECIMEN = "specimen"
    MICROSCOPE_SPECIMEN = "microscope+specimen"


class SimilarityKind(str, Enum):
    MAE = "mae"
    MSE = "mse"
    PSNR = "psnr"
    SSIM = "ssim"
    PERCEPTUAL = "perceptual"
    MEAN_GRADIENT = "mean_gradient"
    EMBEDDING = "embedding"


@dataclass(frozen=True)
class TransferStrategy:
    """Declarative description of how a new image is matched to the store.

    ``kind`` is "group" (metadata lookup of the group optimum) or "metric"
    (nearest calibration image under ``similarity``); ``scope`` restricts
    the candidate pool either way. Compact string form:
    ``group:microscope+specimen``, ``metric:mse@all``.
    """

    kind: str
    scope: Scope
    similarity: SimilarityKind | None = None

    def __post_init__(self):
        if self.kind not in ("group", "metric"):
            raise ValueError(f"strategy kind must be 'group' or 'metric', got {self.kind!r}")
        if self.kind == "metric" and self.similarity is None:
            raise ValueError("metric strategies need a similarity measure")
        if self.kind == "group" and self.similarity is not None:
            raise ValueError("group strategies do not take a similarity measure")

    @classmethod
    def group_only(cls, scope: Scope | str = Scope.MICROSCOPE_SPECIMEN) -> "TransferStrategy":
        return cls(kind="group", scope=Scope(scope))

    @classmethod
    def metric_based(cls, similarity: SimilarityKind | str,
                     scope: Scope | str = Scope.ALL) -> "TransferStrategy":
        return cls(kind="metric", scope=Scope(scope), similarity=SimilarityKind(similarity))

    @classmethod
    def parse(cls, text: str) -> "TransferStrategy":
        try:
            kind, rest = text.split(":", 1)
            if kind == "group":
                return cls.group_only(Scope(rest))
            if kind == "metric":
                similarity, scope = rest.split("@", 1)
                return cls.metric_based(SimilarityKind(similarity), Scope(scope))
        except ValueError:
            pass
        raise ValueError(
            f"unknown strategy {text!r}; expected 'group:<scope>' or 'metric:<measure>@<scope>' "
            f"with scope in {[s.value for s in Scope]} and measure in "
            f"{[s.value for s in SimilarityKind]}"
        )

    def to_string(self) -> str:
        if self.kind == "group":
            return f"group:{self.scope.value}"
        return f"metric:{self.similarity.value}@{self.scope.value}"


DEFAULT_STRATEGY = TransferStrategy.group_only(Scope.MICROSCOPE_SPECIMEN)


@dataclass
class TransferDecision:
    """Provenance of a transferred configuration."""

    spec: NetworkSpec
    iteration: int
    source: str  # group key string or calibration image_id
    strategy: str
    similarity_value: float | None = None


def baseline_config() -> Config:
    """The static configuration of the original DIP publication:
    depth 5, uniform width 128, skip links, stopping point 1800."""
    return (NetworkSpec.uniform(5, 128, skip=True, seed=0), 1800)


# ---------------------------------------------------------------------------
# similarity search
# ---------------------------------------------------------------------------

def _scope_requirements(scope: Scope) -> list[str]:
    return {
        Scope.ALL: [],
        Scope.MICROSCOPE: ["microscope"],
        Scope.SPECIMEN: ["specimen"],
        Scope.MICROSCOPE_SPECIMEN: ["microscope", "specimen"],
    }[scope]


def _meta_known(meta: ImageMeta, scope: Scope) -> bool:
    return all(getattr(meta, f) != "unknown" for f in _scope_requirements(scope))


def scoped_pool(entries: list[CalibrationEntry], meta: ImageMeta,
                scope: Scope) -> list[CalibrationEntry]:
    """Calibration entries whose metadata matches the scope's fields."""
    fields = _scope_requirements(scope)
    return [e for e in entries
            if all(getattr(e.meta, f) == getattr(meta, f) for f in fields)]


def nearest_calibration_image(input_img: np.ndarray, pool: list[CalibrationEntry],
                              kind: SimilarityKind, backend=None,
                              model: EmbeddingModel | None = None) -> tuple[str, float]:
    """Find the pool entry most similar to the input image.

    The input is reduced to its 64x64 min-max normalized fingerprint and
    compared against each entry's stored noisy fingerprint with the named
    measure. Returns ``(image_id, similarity_value)``; ties keep the lowest
    pool index.
    """
    if not pool:
        raise ValueError("similarity search over an empty calibration pool")
    kind = SimilarityKind(kind)
    fp = fingerprint(input_img)
    if kind is SimilarityKind.EMBEDDING:
        if model is None:
            raise ValueError("embedding similarity requires a fitted embedding model")
        query = embed(fp, model)

    def score(entry: CalibrationEntry) -> float:
        ref = entry.noisy_fingerprint
        if kind is SimilarityKind.MAE:
            return met.mae(fp, ref)
        if kind is SimilarityKind.MSE:
            return met.mse(fp, ref)
        if kind is SimilarityKind.PSNR:
            return -met.psnr(fp, ref)
        if kind is SimilarityKind.SSIM:
            return -met.ssim(fp, ref)
        if kind is SimilarityKind.PERCEPTUAL:
            return met.perceptual_distance(fp, ref, backend)
        if kind is SimilarityKind.MEAN_GRADIENT:
            return abs(mean_gradient(fp) - mean_gradient(ref))
        if entry.embedding is None:
            raise ValueError(f"entry {entry.image_id!r} has no embedding vector")
        return float(np.linalg.norm(query - np.asarray(entry.embedding)))

    scores = [score(e) for e in pool]
    best = min(range(len(pool)), key=lambda i: scores[i])
    value = scores[best]
    if kind in (SimilarityKind.PSNR, SimilarityKind.SSIM):
        value = -value
    return pool[best].image_id, float(value)


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def fit_embedding(store: CalibrationStore, dims: int = EMBEDDING_DIMS) -> EmbeddingModel:
    """Fit the principal-component fingerprint embedding on a store.

    Components are ordered by decreasing variance with signs fixed so each
    component's largest-magnitude coefficient is positive, making the fit
    fully deterministic. The model and per-entry embedding vectors are
    written back into the store. The dimension count is capped by the rank
    bound ``n_entries - 1``.
    """
    if len(store.entries) < 2:
        raise ValueError("fitting the embedding needs at least 2 calibration entries")
    data = np.stack([e.noisy_fingerprint.ravel().astype(np.float64) for e in store.entries])
    mean = data.mean(axis=0)
    centered = data - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    k = min(dims, len(store.entries) - 1, data.shape[1])
    components = vt[:k].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    model = EmbeddingModel(mean=mean, components=components)
    store.embedding_model = model
    for entry in store.entries:
        entry.embedding = embed(entry.noisy_fingerprint, model)
    return model


def embed(img: np.ndarray, model: EmbeddingModel) -> np.ndarray:
    """Project an image's fingerprint into the embedding space."""
    img = np.asarray(img)
    fp = img if img.shape == (model.components.shape[1],) else fingerprint(img).ravel()
    return (fp.astype(np.float64) - model.mean) @ model.components.T


# ---------------------------------------------------------------------------
# selection and the end-to-end pipeline
# ---------------------------------------------------------------------------

def _group_fallback_chain(scope: Scope) -> list[Scope]:
    if scope is Scope.MICROSCOPE_SPECIMEN:
        return [Scope.MICROSCOPE_SPECIMEN, Scope.MICROSCOPE, Scope.SPECIMEN, Scope.ALL]
    if scope in (Scope.MICROSCOPE, Scope.SPECIMEN):
        return [scope, Scope.ALL]
    return [Scope.ALL]


def _group_key(meta: ImageMeta, scope: Scope) -> GroupKey:
    return GroupKey(
        meta.microscope if "microscope" in _scope_requirements(scope) else None,
        meta.specimen if "specimen" in _scope_requirements(scope) else None,
    )


def select_config(input_img: np.ndarray, meta: ImageMeta, store: CalibrationStore,
                  strategy: TransferStrategy = DEFAULT_STRATEGY,
                  backend=None) -> TransferDecision:
    """Choose the configuration for a new image, deterministically.

    Group strategies look up the stored group optimum; scopes whose metadata
    fields are unknown fall back along microscope+specimen -> microscope ->
    specimen -> global, taking the first group present in the store. Metric
    strategies pick the best-combined config of the nearest calibration
    image within the scoped pool.
    """
    if strategy.kind == "group":
        for scope in _group_fallback_chain(strategy.scope):
            if not _meta_known(meta, scope):
                continue
            key = _group_key(meta, scope)
            if key in store.group_best:
                spec, iteration = store.group_best[key]
                return TransferDecision(spec=spec, iteration=iteration,
                                        source=key.to_string(),
                                        strategy=strategy.to_string())
            if scope is not Scope.ALL:
                available = sorted(k.to_string() for k in store.group_best)
                raise ValueError(
                    f"no stored optimum for group {key.to_string()!r}; "
                    f"available groups: {available}"
                )
        available = sorted(k.to_string() for k in store.group_best)
        raise ValueError(f"store has no global group optimum; available groups: {available}")

    pool = scoped_pool(store.entries, meta, strategy.scope)
    if not pool:
        groups = sorted({e.meta.microscope + "|" + e.meta.specimen for e in store.entries})
        raise ValueError(
            f"no calibration images match scope {strategy.scope.value!r} for "
            f"({meta.microscope}, {meta.specimen}); calibration covers: {groups}"
        )
    image_id, value = nearest_calibration_image(
        input_img, pool, strategy.similarity, backend=backend, model=store.embedding_model
    )
    spec, iteration = store.entry(image_id).best_combined
    return TransferDecision(spec=spec, iteration=iteration, source=image_id,
                            strategy=strategy.to_string(), similarity_value=value)


def denoise_with_config(img: np.ndarray, spec: NetworkSpec, stop_iteration: int,
                        cfg: RunConfig | None = None, workers: int = 1,
                        denormalize_output: bool = True) -> np.ndarray:
    """Run the full preprocessing + DIP pipeline with a fixed configuration.

    Per channel: min-max normalize, split into 512px patches with 128px
    overlap when larger than 512 on an axis, denoise each patch at the given
    (spec, stopping point), stitch with overlap averaging and invert the
    normalization. A diverged patch is retried once with seed+1.

    ``denormalize_output=False`` keeps the result in the normalized [0, 1]
    domain, which is the frame all quality scoring uses.
    """
    cfg = cfg or RunConfig()

    def run_patch(patch: Patch) -> Patch:
        try:
            out = dip_denoise(patch.data, spec, stop_iteration, cfg)
        except DivergenceError:
            out = dip_denoise(patch.data, spec.reseeded(spec.seed + 1), stop_iteration, cfg)
        return Patch(patch.offset_y, patch.offset_x, out)

    channels_out = []
    for channel in split_channels(img):
        norm, params = normalize(channel)
        height, width = norm.shape
        patches = tile(norm, DEFAULT_PATCH_SIZE, DEFAULT_OVERLAP)
        if workers > 1 and len(patches) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                done = list(pool.map(run_patch, patches))
        else:
            done = [run_patch(p) for p in patches]
        merged = stitch(done, height, width)
        channels_out.append(denormalize(merged, params) if denormalize_output else merged)
    out = merge_channels(channels_out)
    return out[:, :, 0] if np.asarray(img).ndim == 2 else out


def auto_denoise(input_img: np.ndarray, meta: ImageMeta, store: CalibrationStore,
                 strategy: TransferStrategy = DEFAULT_STRATEGY,
                 cfg: RunConfig | None = None, workers: int = 1,
                 backend=None) -> tuple[np.ndarray, TransferDecision]:
    """End-to-end denoising of a new image with a transferred configuration.

    One configuration is selected for the whole image (multichannel inputs
    are fingerprinted by their channel mean), then every channel runs
    through :func:`denoise_with_config`.
    """
    decision = select_config(input_img, meta, store, strategy, backend=backend)
    out = denoise_with_config(input_img, decision.spec, decision.iteration,
                              cfg=cfg, workers=workers)
    return out, decision
