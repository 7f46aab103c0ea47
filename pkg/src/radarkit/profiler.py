"""Exact per-layer parameter and MAC accounting plus wall-clock timing.

Counting conventions (documented so the GMAC column is auditable):
convolutions cost out_elems * Cin * prod(kernel) MACs, matmuls m*k*n per
batch item, attention per token group 3*N*S^2 + 2*N^2*S + N*S^2;
normalization, softmax, activations, bias and elementwise adds, and data
movement cost zero.  Parameter counts: conv Cout*Cin*prod(k) (+Cout with
bias), linear in*out (+out), norms 2*width, embeddings their extent
product.  Counts are pure functions of (config, input shape).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .models import Hourglass3d, RadarDetector


@dataclass(frozen=True)
class LayerProfile:
    name: str
    param_count: int
    mac_count: int


def default_input_shape(model) -> tuple:
    if isinstance(model, RadarDetector):
        cfg = model.cfg
        return (1, 2, cfg.frames, cfg.chirps, cfg.height, cfg.width)
    if isinstance(model, Hourglass3d):
        return (1, 2, 32, model.chirps, 128, 128)
    raise ConfigError(f"cannot infer an input shape for {type(model).__name__}")


def profile_layers(model, input_shape=None) -> list[LayerProfile]:
    shape = default_input_shape(model) if input_shape is None else tuple(input_shape)
    entries, _ = model.profile(shape)
    return [LayerProfile(name, int(p), int(m)) for name, p, m in entries]


def count_params(model, input_shape=None):
    """Per-layer parameter counts and their total."""
    layers = profile_layers(model, input_shape)
    return layers, sum(l.param_count for l in layers)


def count_macs(model, input_shape=None):
    """Per-layer multiply-accumulate counts and their total for one forward
    pass at the given input shape."""
    layers = profile_layers(model, input_shape)
    return layers, sum(l.mac_count for l in layers)


@dataclass(frozen=True)
class TimingResult:
    mean_ms: float
    std_ms: float
    per_frame_ms: float
    runs: int
    stride: int


def _make_input(model, input_shape, seed=0):
    dtype = model.dtype if hasattr(model, "dtype") else np.float32
    return T.uniform(input_shape, seed, -1.0, 1.0, dtype=dtype)


def time_inference(model, input_shape=None, warmup: int = 1, runs: int = 3,
                   stride: int | None = None, clock=None) -> TimingResult:
    """Wall-clock forward passes after warmup; per-frame time divides by the
    test stride (new frames consumed per pass), defaulting to the full
    temporal window."""
    if runs < 3:
        raise ConfigError(f"timing needs runs >= 3, got {runs}")
    shape = default_input_shape(model) if input_shape is None else tuple(input_shape)
    stride = shape[2] if stride is None else int(stride)
    clock = time.perf_counter if clock is None else clock
    model.set_training(False)
    x = _make_input(model, shape)
    samples = []
    with T.no_grad():
        for _ in range(warmup):
            model.forward(x)
        for _ in range(runs):
            t0 = clock()
            model.forward(x)
            samples.append((clock() - t0) * 1000.0)
    mean = float(np.mean(samples))
    return TimingResult(mean, float(np.std(samples)), mean / stride, runs, stride)


def time_backprop(model, input_shape=None, warmup: int = 1, runs: int = 3,
                  stride: int | None = None, clock=None) -> TimingResult:
    """Wall-clock forward+backward iterations (loss: mean BCE against a zero
    target), normalized like time_inference."""
    if runs < 3:
        raise ConfigError(f"timing needs runs >= 3, got {runs}")
    shape = default_input_shape(model) if input_shape is None else tuple(input_shape)
    stride = shape[2] if stride is None else int(stride)
    clock = time.perf_counter if clock is None else clock
    model.set_training(True)
    x = _make_input(model, shape)
    for p in model.params():
        p.requires_grad = True

    def step():
        T.reset_tape()
        logits = model.forward_logits(x)
        loss = T.bce_with_logits(logits, np.zeros(logits.shape, dtype=logits.data.dtype))
        T.backward(loss)
        for p in model.params():
            p.zero_grad()

    samples = []
    for _ in range(warmup):
        step()
    for _ in range(runs):
        t0 = clock()
        step()
        samples.append((clock() - t0) * 1000.0)
    mean = float(np.mean(samples))
    return TimingResult(mean, float(np.std(samples)), mean / stride, runs, stride)


@dataclass(frozen=True)
class ReportRow:
    name: str
    gmacs: float
    params_m: float
    bp_ms: float | None
    infer_ms: float | None


def compare_report(models: dict, input_shape, with_timing: bool = False,
                   timing_shape=None, runs: int = 3) -> list[ReportRow]:
    """One row per model plus a standalone row for the channel-chirp merge
    module (shared by all models, so it carries no timing columns)."""
    rows = []
    merge_row = None
    for name, model in models.items():
        _, params = count_params(model, input_shape)
        _, macs = count_macs(model, input_shape)
        bp_ms = infer_ms = None
        if with_timing:
            shape = timing_shape if timing_shape is not None else input_shape
            infer_ms = time_inference(model, shape, runs=runs).mean_ms
            bp_ms = time_backprop(model, shape, runs=runs).mean_ms
        rows.append(ReportRow(name, macs / 1e9, params / 1e6, bp_ms, infer_ms))
        if merge_row is None and hasattr(model, "merge"):
            mshape = tuple(input_shape)
            entries, _ = model.merge.profile(mshape)
            mp = sum(p for _, p, _ in entries)
            mm = sum(m for _, _, m in entries)
            merge_row = ReportRow("m-net", mm / 1e9, mp / 1e6, None, None)
    if merge_row is not None:
        rows.insert(0, merge_row)
    return rows


def format_compare_report(rows, header_note: str = "") -> str:
    lines = []
    if header_note:
        lines.append(f"# {header_note}")
    lines.append(f"{'model':22s} {'GMACs':>12s} {'params(M)':>10s} {'BP(ms)':>10s} {'infer(ms)':>10s}")
    for r in rows:
        bp = f"{r.bp_ms:10.2f}" if r.bp_ms is not None else f"{'-':>10s}"
        inf = f"{r.infer_ms:10.2f}" if r.infer_ms is not None else f"{'-':>10s}"
        lines.append(f"{r.name:22s} {r.gmacs:12.3f} {r.params_m:10.3f} {bp} {inf}")
    return "\n".join(lines)


def write_compare_report_kv(rows, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for r in rows:
            fh.write(f"{r.name}.gmacs = {r.gmacs:.6f}\n")
            fh.write(f"{r.name}.params_m = {r.params_m:.6f}\n")
            if r.bp_ms is not None:
                fh.write(f"{r.name}.bp_ms = {r.bp_ms:.3f}\n")
            if r.infer_ms is not None:
                fh.write(f"{r.name}.infer_ms = {r.infer_ms:.3f}\n")
