"""Online streaming inference and latency measurement.

A :class:`StreamSession` owns one :class:`~edenn.edec.StreamState` per layer
and advances them one event slice at a time. Each step is a single pass down
the layer chain; nothing from earlier slices is recomputed. Step latency is
measured with a monotonic clock around that pass only.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as tn
from .edec import StreamState
from .network import Network


@dataclass
class StreamSession:
    network: Network
    states: list[StreamState]
    clock: int = 0
    latencies_ns: list[int] = field(default_factory=list)


def open_session(net: Network) -> StreamSession:
    """Cold-start session: every layer state is zero."""
    return StreamSession(network=net, states=net.initial_states())


def step(session: StreamSession, slice_: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Feed one ``[W, H, 2]`` slice; returns ``[dim]`` (scalar head) or ``[W, H, 2]`` (dense head)."""
    slice_ = np.asarray(slice_, dtype=np.float64)
    if mask is None:
        mask = np.minimum(1.0, slice_.sum(axis=-1))
    net = session.network
    with tn.no_grad():
        t0 = time.perf_counter_ns()
        outs, states = net.stream_step(slice_, mask, session.states)
        elapsed = time.perf_counter_ns() - t0
    session.states = states
    session.clock += 1
    session.latencies_ns.append(elapsed)
    return outs[-1].data


def run(session: StreamSession, volume: np.ndarray, masks: np.ndarray | None = None) -> np.ndarray:
    """Step through every slice of a ``[W, H, 2, T]`` volume; predictions with time last."""
    volume = np.asarray(volume, dtype=np.float64)
    preds = []
    for t in range(volume.shape[-1]):
        preds.append(step(session, volume[..., t], None if masks is None else masks[..., t]))
    return np.stack(preds, axis=-1)


@dataclass
class LatencyReport:
    """Per-slice streaming step times (warmup excluded) plus dense-recompute probes."""

    indices: list[int]
    step_ns: list[int]
    cells: int  # W * H * C of one input slice
    recompute_ns: dict[int, int] = field(default_factory=dict)  # history length -> median ns

    @property
    def mean_ns(self) -> float:
        return float(np.mean(self.step_ns))

    @property
    def p50_ns(self) -> float:
        return float(np.percentile(self.step_ns, 50))

    @property
    def p99_ns(self) -> float:
        return float(np.percentile(self.step_ns, 99))

    @property
    def ns_per_cell(self) -> float:
        return self.mean_ns / self.cells

    def window_median(self, index: int, halfwidth: int = 5) -> float:
        """Median step time over slices ``index - halfwidth .. index + halfwidth``."""
        idx = np.asarray(self.indices)
        sel = np.abs(idx - index) <= halfwidth
        if not sel.any():
            raise ValueError(f"no recorded slices near index {index}")
        return float(np.median(np.asarray(self.step_ns)[sel]))

    def trend(self, lo: int, hi: int) -> tuple[float, float]:
        """Least-squares slope (ns per slice) over ``lo <= index < hi`` and its standard error."""
        idx = np.asarray(self.indices, dtype=np.float64)
        y = np.asarray(self.step_ns, dtype=np.float64)
        sel = (idx >= lo) & (idx < hi)
        x, y = idx[sel], y[sel]
        xc = x - x.mean()
        slope = float(xc @ (y - y.mean()) / (xc @ xc))
        resid = y - y.mean() - slope * xc
        se = float(np.sqrt(resid @ resid / (len(x) - 2) / (xc @ xc)))
        return slope, se

    def records(self) -> Iterator[dict]:
        for i, ns in zip(self.indices, self.step_ns):
            yield {"index": i, "ns": ns, "cells": self.cells}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.records())

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"{'metric':<24}{'value':>16}\n")
        rows = [
            ("slices", f"{len(self.step_ns)}"),
            ("cells_per_slice", f"{self.cells}"),
            ("mean_step_ns", f"{self.mean_ns:.0f}"),
            ("p50_step_ns", f"{self.p50_ns:.0f}"),
            ("p99_step_ns", f"{self.p99_ns:.0f}"),
            ("step_ns_per_cell", f"{self.ns_per_cell:.3f}"),
        ]
        rows += [(f"recompute_ns@{h}", f"{ns}") for h, ns in sorted(self.recompute_ns.items())]
        for k, v in rows:
            buf.write(f"{k:<24}{v:>16}\n")
        return buf.getvalue()


def random_slices(width: int, height: int, n: int, density: float = 0.05, seed: int = 0) -> np.ndarray:
    """Sparse random binary slices ``[n, W, H, 2]``."""
    rng = np.random.default_rng(seed)
    return (rng.random((n, width, height, 2)) < density).astype(np.float64)


def time_recompute(net: Network, slices: np.ndarray, history: int, repeats: int = 3) -> int:
    """Median ns to rerun the whole-window forward over the first ``history`` slices."""
    vol = slices[None, :history]
    times = []
    with tn.no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            net.forward_batch(vol)
            times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def bench(
    net: Network,
    n_slices: int,
    warmup: int = 10,
    generator: Callable[[int], np.ndarray] | None = None,
    probes: Sequence[int] = (),
    repeats: int = 3,
    seed: int = 0,
) -> LatencyReport:
    """Stream ``n_slices`` slices through a fresh session and time each step.

    Slices are produced before timing starts. ``probes`` lists history lengths
    at which a from-scratch dense forward is also timed for comparison.
    """
    if n_slices <= warmup:
        raise ValueError(f"n_slices ({n_slices}) must exceed warmup ({warmup})")
    cfg = net.config
    if generator is None:
        slices = random_slices(cfg.width, cfg.height, n_slices, seed=seed)
    else:
        slices = np.stack([generator(i) for i in range(n_slices)])
    session = open_session(net)
    for i in range(n_slices):
        step(session, slices[i])
    report = LatencyReport(
        indices=list(range(warmup, n_slices)),
        step_ns=session.latencies_ns[warmup:],
        cells=cfg.width * cfg.height * cfg.in_channels,
    )
    for h in probes:
        if not 1 <= h <= n_slices:
            raise ValueError(f"probe history {h} outside 1..{n_slices}")
        report.recompute_ns[h] = time_recompute(net, slices, h, repeats)
    return report
