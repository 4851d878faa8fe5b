"""The DIP fitting loop: fit a seeded network to one noisy image and harvest
checkpointed outputs for early stopping.

Runs are bit-reproducible: weights and the fixed noise input derive from the
spec seed alone, and torch is pinned to one intra-op thread the first time a
run starts so reduction order never varies. Parallelism belongs one level up
(across architectures or patches), where runs are independent.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .network import NOISE_CHANNELS, DipNetwork, NetworkSpec, build_network

DIVERGENCE_FACTOR = 10.0

_threads_pinned = False


def _pin_threads():
    global _threads_pinned
    if not _threads_pinned:
        torch.set_num_threads(1)
        _threads_pinned = True


@dataclass
class RunConfig:
    """Fitting-loop parameters; defaults match the full-scale protocol."""

    max_iterations: int = 3000
    checkpoint_stride: int = 100
    learning_rate: float = 0.01
    input_noise_scale: float = 0.1

    def __post_init__(self):
        if not 0 < self.max_iterations <= 3000:
            raise ValueError("max_iterations must be in 1..3000")
        if self.checkpoint_stride <= 0 or self.max_iterations % self.checkpoint_stride:
            raise ValueError("checkpoint_stride must divide max_iterations")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class FixedInput:
    """The constant noise tensor fed to the network for a whole run."""

    values: np.ndarray  # (channels, height, width) float32
    seed: int


@dataclass
class RunTrace:
    """Everything recorded by one fitting run."""

    spec: NetworkSpec
    config: RunConfig
    snapshots: list[tuple[int, np.ndarray]] = field(default_factory=list)
    loss_curve: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    def snapshot_at(self, iteration: int) -> np.ndarray:
        for it, out in self.snapshots:
            if it == iteration:
                return out
        raise KeyError(f"no snapshot recorded at iteration {iteration}")


class DivergenceError(RuntimeError):
    """The fidelity loss became non-finite or blew up during fitting."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss diverged at iteration {iteration} (loss={loss!r})")
        self.iteration = iteration
        self.loss = loss


def sample_input(seed: int, height: int, width: int, scale: float = 0.1,
                 channels: int = NOISE_CHANNELS) -> FixedInput:
    """Draw the fixed uniform noise input in ``[0, scale]``, seed-determined."""
    rng = np.random.default_rng(seed)
    values = rng.uniform(0.0, scale, size=(channels, height, width)).astype(np.float32)
    return FixedInput(values=values, seed=seed)


def _pad_to_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    h, w = img.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img
    # edge-inclusive reflection supports pads >= the image extent
    return np.pad(img, ((0, ph), (0, pw)), mode="symmetric")


def dip_run(noisy: np.ndarray, spec: NetworkSpec, cfg: RunConfig | None = None) -> RunTrace:
    """Fit a DIP network to a noisy single-channel image.

    Minimizes the mean squared error between the network output and the
    noisy image with Adam, recording the output at every
    ``checkpoint_stride`` iterations and the per-iteration fidelity loss.
    Inputs whose sizes are not divisible by ``2**depth`` are reflection
    padded internally; snapshots are cropped back.

    Raises :class:`DivergenceError` if the loss goes non-finite or exceeds
    ten times its initial value.
    """
    cfg = cfg or RunConfig()
    noisy = np.asarray(noisy, dtype=np.float32)
    if noisy.ndim != 2:
        raise ValueError(f"dip_run expects a single-channel image, got shape {noisy.shape}")
    if not np.all(np.isfinite(noisy)):
        raise ValueError("noisy image contains NaN or Inf values")

    _pin_threads()
    height, width = noisy.shape
    padded = _pad_to_multiple(noisy, 2**spec.depth)
    target = torch.from_numpy(padded)[None, None]
    z = torch.from_numpy(
        sample_input(spec.seed, *padded.shape, scale=cfg.input_noise_scale).values
    )[None]

    net = build_network(spec)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    trace = RunTrace(spec=spec, config=cfg)
    initial_loss = None
    start = time.perf_counter()
    for iteration in range(1, cfg.max_iterations + 1):
        optimizer.zero_grad()
        out = net(z)
        loss = F.mse_loss(out, target)
        value = loss.item()
        if initial_loss is None:
            initial_loss = value
        if not np.isfinite(value) or value > DIVERGENCE_FACTOR * initial_loss:
            raise DivergenceError(iteration, value)
        loss.backward()
        optimizer.step()
        trace.loss_curve.append(value)
        if iteration % cfg.checkpoint_stride == 0:
            with torch.no_grad():
                snap = net(z)[0, 0, :height, :width].numpy().copy()
            trace.snapshots.append((iteration, snap))
    trace.wall_time = time.perf_counter() - start
    return trace


def dip_denoise(noisy: np.ndarray, spec: NetworkSpec, stop_iteration: int,
                cfg: RunConfig | None = None) -> np.ndarray:
    """Run DIP and return the output at exactly ``stop_iteration``, clamped to [0, 1].

    Equals the corresponding snapshot of a longer :func:`dip_run` trace with
    the same spec and config (the optimization trajectory is prefix-stable).
    """
    cfg = cfg or RunConfig()
    if stop_iteration > cfg.max_iterations:
        raise ValueError(f"stop_iteration {stop_iteration} exceeds max_iterations {cfg.max_iterations}")
    if stop_iteration <= 0 or stop_iteration % cfg.checkpoint_stride:
        raise ValueError(
            f"stop_iteration {stop_iteration} must be a positive multiple of "
            f"checkpoint_stride {cfg.checkpoint_stride}"
        )
    trace = dip_run(noisy, spec, replace(cfg, max_iterations=stop_iteration))
    return np.clip(trace.snapshots[-1][1], 0.0, 1.0)


def gradient_check(spec: NetworkSpec, probe_count: int = 20, size: int = 16,
                   step: float = 1e-3, seed: int = 0) -> float:
    """Compare autograd gradients against central finite differences.

    Probes ``probe_count`` randomly chosen weights of a freshly built network
    on a ``size x size`` random target and returns the maximum relative
    error ``|a - n| / max(|a|, |n|, 1e-3)``. The loss reduction is
    accumulated in float64 (the network stays float32) because the float32
    rounding of the forward pass is otherwise on the order of the finite
    difference itself for the many near-zero gradients; the 1e-3 floor makes
    probes below that noise floor count by absolute agreement.
    """
    _pin_threads()
    rng = np.random.default_rng(seed)
    target_np = rng.uniform(size=(size, size)).astype(np.float32)
    padded = _pad_to_multiple(target_np, 2**spec.depth)
    target = torch.from_numpy(padded).double()[None, None]
    z = torch.from_numpy(sample_input(spec.seed, *padded.shape).values)[None]
    net = build_network(spec)

    def loss_value() -> torch.Tensor:
        return F.mse_loss(net(z).double(), target)

    params = list(net.parameters())
    grads = torch.autograd.grad(loss_value(), params)
    counts = [p.numel() for p in params]
    total = sum(counts)
    probe_rng = random.Random(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(probe_count):
            flat = probe_rng.randrange(total)
            pi = 0
            while flat >= counts[pi]:
                flat -= counts[pi]
                pi += 1
            p = params[pi].view(-1)
            original = p[flat].item()
            p[flat] = original + step
            loss_plus = loss_value().item()
            p[flat] = original - step
            loss_minus = loss_value().item()
            p[flat] = original
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            analytic = grads[pi].view(-1)[flat].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
            worst = max(worst, rel)
    return worst
