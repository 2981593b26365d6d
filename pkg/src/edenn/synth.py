"""Seeded synthetic event streams with exact ground truth.

Events come from thresholding changes of an analytic log-intensity field:
each pixel keeps a reference level and fires one event per ``contrast`` step
the field moves away from it. Two scenes are available:

* ``rotating``: a random blob pattern rotating in the image plane with small
  out-of-plane motion (modelled as image shifts). Ground truth is the
  per-bin mean angular velocity ``(wx, wy, wz)`` in deg/s.
* ``translating``: a blob texture (or a single vertical edge) translating with
  a constant flow, optionally different in the left and right image halves.
  Ground truth is flow in pixels per ground-truth frame.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .events import (
    Event,
    WindowSpec,
    build_event_volume,
    parse_events,
    write_events_binary,
    write_events_csv,
)
from .network import Dataset

SCENARIOS = ("rotating", "translating")


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    width: int = 32
    height: int = 32
    duration: int = 100_000  # us
    bin_width: int = 2_000
    seed: int = 0
    index: int = 0  # sample number within a seeded set
    scenario: str = "rotating"
    contrast: float = 0.2
    sim_step: int = 250  # us
    n_points: int = 24
    # rotating
    omega: tuple[float, float, float] | None = None  # constant (wx, wy, wz) deg/s; random profile if None
    omega_max: float = 400.0
    out_of_plane: float = 60.0
    focal: float = 30.0  # px per radian for out-of-plane shifts
    mirror: bool = False  # reflect the pattern vertically and negate wx, wz
    # translating
    flow: tuple[float, float] | None = None  # px/frame; random if None
    flow_right: tuple[float, float] | None = None  # right-half flow when piecewise
    piecewise: bool = False
    flow_max: float = 1.5
    frame: int = 10_000  # us per ground-truth frame
    texture: str = "blobs"  # blobs | edge

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise SceneError(f"unknown scenario {self.scenario!r}")
        if self.width < 2 or self.height < 2:
            raise SceneError("geometry must be at least 2x2")
        if self.duration <= 0 or self.bin_width <= 0 or self.duration % self.bin_width:
            raise SceneError("duration must be a positive multiple of bin_width")
        if self.sim_step <= 0 or self.bin_width % self.sim_step:
            raise SceneError("sim_step must divide bin_width")
        if self.contrast <= 0:
            raise SceneError("contrast threshold must be positive")
        if self.n_points < 1:
            raise SceneError("pattern needs at least one point")
        if self.texture not in ("blobs", "edge"):
            raise SceneError(f"unknown texture {self.texture!r}")
        limit = min(self.width, self.height) / 4
        for v in (self.flow, self.flow_right):
            if v is not None and np.hypot(*v) * self.duration / self.frame >= limit:
                raise SceneError(f"flow {v} moves the pattern >= {limit} px per window")

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.duration, self.bin_width)


@dataclass
class LabelledSample:
    events: list[Event]
    gt: np.ndarray  # [T, 3] deg/s or [T, W, H, 2] px/frame
    valid: np.ndarray  # [W, H, T]
    spec: SceneSpec
    regions: list[tuple[int, int, tuple[float, float]]] = field(default_factory=list)  # flow: (x0, x1, (u, v))

    @property
    def kind(self) -> str:
        return self.spec.scenario


def _rng(spec: SceneSpec) -> np.random.Generator:
    return np.random.default_rng([spec.seed, spec.index, SCENARIOS.index(spec.scenario)])


def _pixel_grid(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates relative to the image centre, ``[W, H]`` each."""
    cx, cy = (spec.width - 1) / 2, (spec.height - 1) / 2
    u = np.arange(spec.width, dtype=np.float64) - cx
    v = np.arange(spec.height, dtype=np.float64) - cy
    return np.meshgrid(u, v, indexing="ij")


def _blob_field(ux, uy, px, py, amp, sigma) -> np.ndarray:
    dx = ux[..., None] - px
    dy = uy[..., None] - py
    return np.sum(amp * np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)), axis=-1)


def _emit(fields, times: np.ndarray, spec: SceneSpec) -> list[Event]:
    """Threshold-crossing events from ``fields(k) -> log intensity [W, H]`` at ``times[k]``."""
    ref = fields(0).copy()
    xs, ys, ps, ts = [], [], [], []
    c = spec.contrast
    for k in range(1, len(times)):
        cur = fields(k)
        diff = cur - ref
        n = np.floor(np.abs(diff) / c).astype(np.int64)
        hit = np.nonzero(n)
        if hit[0].size:
            sign = np.sign(diff[hit]).astype(np.int64)
            counts = n[hit]
            ref[hit] += sign * counts * c
            t_prev, dt = int(times[k - 1]), int(times[k] - times[k - 1])
            for i in range(int(counts.max())):
                sel = counts > i
                xs.append(hit[0][sel])
                ys.append(hit[1][sel])
                ps.append(sign[sel])
                ts.append(t_prev + ((i + 1) * dt) // (counts[sel] + 1))
    if not xs:
        return []
    x, y, p, t = (np.concatenate(a) for a in (xs, ys, ps, ts))
    order = np.lexsort((p, x, y, t))
    return [Event(x=int(a), y=int(b), p=int(q), t=int(s)) for a, b, q, s in zip(x[order], y[order], p[order], t[order])]


def _cumulative_support(events: Sequence[Event], spec: SceneSpec) -> np.ndarray:
    vol = build_event_volume(events, spec.width, spec.height, spec.window).tensor
    seen = np.minimum(1.0, vol.sum(axis=2))
    return (np.cumsum(seen, axis=-1) > 0).astype(np.float64)


def _omega_profile(spec: SceneSpec, rng: np.random.Generator, t_s: np.ndarray) -> np.ndarray:
    """Angular velocity ``[len(t_s), 3]`` in deg/s; axis 2 is the optical axis."""
    if spec.omega is not None:
        w = np.broadcast_to(np.asarray(spec.omega, dtype=np.float64), (len(t_s), 3)).copy()
    else:
        w = np.empty((len(t_s), 3))
        for axis in range(3):
            if axis == 2:
                offset = rng.uniform(-0.5, 0.5) * spec.omega_max
                amp = rng.uniform(0.0, 0.5) * spec.omega_max
            else:
                offset = 0.0
                amp = rng.uniform(0.0, 1.0) * spec.out_of_plane
            freq = rng.uniform(2.0, 10.0)
            phase = rng.uniform(0.0, 2 * np.pi)
            w[:, axis] = offset + amp * np.sin(2 * np.pi * freq * t_s + phase)
    if spec.mirror:
        w = w * np.array([-1.0, 1.0, -1.0])
    return w


def gen_angular(spec: SceneSpec) -> LabelledSample:
    """Rotating point pattern with known per-bin angular velocity."""
    spec = replace(spec, scenario="rotating")
    spec.validate()
    rng = _rng(spec)
    radius = 0.45 * min(spec.width, spec.height)
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, spec.n_points))
    a = rng.uniform(0.0, 2 * np.pi, spec.n_points)
    qx, qy = r * np.cos(a), r * np.sin(a)
    amp = rng.uniform(0.5, 1.0, spec.n_points)
    sigma = rng.uniform(1.0, 2.0, spec.n_points)
    if spec.mirror:
        qy = -qy

    n_steps = spec.duration // spec.sim_step
    times = np.arange(n_steps + 1) * spec.sim_step
    mids = (times[:-1] + spec.sim_step / 2) * 1e-6
    w_rng = np.random.default_rng([spec.seed, spec.index, 99])
    w = _omega_profile(spec, w_rng, mids)
    dtheta = w * (spec.sim_step * 1e-6)  # degrees per step
    theta = np.vstack([np.zeros(3), np.cumsum(dtheta, axis=0)])  # [n_steps + 1, 3]
    ux, uy = _pixel_grid(spec)

    def field_at(k: int) -> np.ndarray:
        phi = np.deg2rad(theta[k, 2])
        c, s = np.cos(phi), np.sin(phi)
        px = c * qx - s * qy + spec.focal * np.deg2rad(theta[k, 1])
        py = s * qx + c * qy + spec.focal * np.deg2rad(theta[k, 0])
        return _blob_field(ux, uy, px, py, amp, sigma)

    events = _emit(field_at, times, spec)
    per_bin = spec.bin_width // spec.sim_step
    edges = theta[::per_bin]
    gt = (edges[1:] - edges[:-1]) / (spec.bin_width * 1e-6)
    return LabelledSample(events=events, gt=gt, valid=_cumulative_support(events, spec), spec=spec)


def _random_flow(rng: np.random.Generator, spec: SceneSpec) -> tuple[float, float]:
    limit = min(spec.flow_max, 0.99 * min(spec.width, spec.height) / 4 * spec.frame / spec.duration)
    mag = rng.uniform(0.2, 1.0) * limit
    ang = rng.uniform(0.0, 2 * np.pi)
    return (float(mag * np.cos(ang)), float(mag * np.sin(ang)))


def gen_flow(spec: SceneSpec) -> LabelledSample:
    """Translating texture with constant (or left/right piecewise-constant) flow."""
    spec = replace(spec, scenario="translating")
    spec.validate()
    rng = _rng(spec)
    v1 = spec.flow if spec.flow is not None else _random_flow(rng, spec)
    v2 = (spec.flow_right if spec.flow_right is not None else _random_flow(rng, spec)) if spec.piecewise else v1
    if spec.texture == "edge":
        # a straight vertical edge only reveals horizontal motion
        v1, v2 = (v1[0], 0.0), (v2[0], 0.0)
    spec = replace(spec, flow=v1, flow_right=v2 if spec.piecewise else None)
    spec.validate()

    margin = spec.flow_max * spec.duration / spec.frame + 4
    n = spec.n_points * 4  # blobs spread over the margin-padded field, about 3x the image area
    half_w, half_h = spec.width / 2 + margin, spec.height / 2 + margin
    px0 = rng.uniform(-half_w, half_w, n)
    py0 = rng.uniform(-half_h, half_h, n)
    amp = rng.uniform(0.5, 1.0, n)
    sigma = rng.uniform(0.8, 1.8, n)
    ux, uy = _pixel_grid(spec)
    split = spec.width // 2 if spec.piecewise else spec.width
    left = np.arange(spec.width)[:, None] < split

    n_steps = spec.duration // spec.sim_step
    times = np.arange(n_steps + 1) * spec.sim_step

    def texture(dx: float, dy: float) -> np.ndarray:
        if spec.texture == "edge":
            return 1.5 * np.tanh((ux - (-spec.width / 4 + dx)) / 0.5)
        return _blob_field(ux, uy, px0 + dx, py0 + dy, amp, sigma)

    def field_at(k: int) -> np.ndarray:
        frames = times[k] / spec.frame
        a = texture(v1[0] * frames, v1[1] * frames)
        if not spec.piecewise:
            return a
        b = texture(v2[0] * frames, v2[1] * frames)
        return np.where(left, a, b)

    events = _emit(field_at, times, spec)
    T = spec.window.n_bins
    gt = np.empty((T, spec.width, spec.height, 2))
    gt[:, :split] = v1
    gt[:, split:] = v2
    regions = [(0, split, v1)] + ([(split, spec.width, v2)] if spec.piecewise else [])
    return LabelledSample(events=events, gt=gt, valid=_cumulative_support(events, spec), spec=spec, regions=regions)


def generate(spec: SceneSpec) -> LabelledSample:
    spec.validate()
    return gen_angular(spec) if spec.scenario == "rotating" else gen_flow(spec)


def generate_set(spec: SceneSpec, n: int) -> list[LabelledSample]:
    return [generate(replace(spec, index=i)) for i in range(n)]


def make_dataset(samples: Sequence[LabelledSample]) -> Dataset:
    """Stack samples into the network's ``[S, T, W, H, C]`` training layout."""
    if not samples:
        raise ValueError("no samples")
    spec = samples[0].spec
    vols = np.stack(
        [np.transpose(build_event_volume(s.events, spec.width, spec.height, spec.window).tensor, (3, 0, 1, 2)) for s in samples]
    )
    gt = np.stack([s.gt for s in samples])
    valid = np.stack([np.transpose(s.valid, (2, 0, 1)) for s in samples])
    return Dataset(vols, gt, valid if spec.scenario == "translating" else None, spec.bin_width)


# ---------------------------------------------------------------------------
# files


def sidecar_records(sample: LabelledSample) -> list[dict]:
    spec = sample.spec
    out = []
    for t in range(spec.window.n_bins):
        rec = {"bin": t, "t_us": t * spec.bin_width}
        if spec.scenario == "rotating":
            rec["omega"] = [float(v) for v in sample.gt[t]]
        else:
            rec["regions"] = [{"x0": x0, "x1": x1, "flow": [float(u), float(v)]} for x0, x1, (u, v) in sample.regions]
        out.append(rec)
    return out


def write_sample(sample: LabelledSample, directory: Path, stem: str, fmt: str = "binary") -> list[str]:
    """Write the event file and its ``.gt.jsonl`` sidecar; returns the file names."""
    directory = Path(directory)
    spec = sample.spec
    if fmt == "binary":
        name = f"{stem}.evt"
        payload = write_events_binary(sample.events, spec.width, spec.height)
    elif fmt == "csv":
        name = f"{stem}.csv"
        payload = write_events_csv(sample.events)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    (directory / name).write_bytes(payload)
    gt_name = f"{stem}.gt.jsonl"
    lines = [json.dumps(r, separators=(",", ":"), sort_keys=True) for r in sidecar_records(sample)]
    (directory / gt_name).write_text("\n".join(lines) + "\n")
    return [name, gt_name]


def spec_to_manifest(spec: SceneSpec) -> dict:
    d = asdict(spec)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def read_sample(directory: Path, events_name: str, gt_name: str, spec: SceneSpec) -> LabelledSample:
    directory = Path(directory)
    fmt = "csv" if events_name.endswith(".csv") else "binary"
    events = parse_events((directory / events_name).read_bytes(), fmt, spec.width, spec.height)
    records = [json.loads(line) for line in (directory / gt_name).read_text().splitlines() if line.strip()]
    T = spec.window.n_bins
    if len(records) != T:
        raise ValueError(f"{gt_name}: {len(records)} records for {T} bins")
    if spec.scenario == "rotating":
        gt = np.array([r["omega"] for r in records], dtype=np.float64)
        regions = []
    else:
        gt = np.zeros((T, spec.width, spec.height, 2))
        regions = [(r["x0"], r["x1"], tuple(r["flow"])) for r in records[0]["regions"]]
        for t, r in enumerate(records):
            for reg in r["regions"]:
                gt[t, reg["x0"]:reg["x1"]] = reg["flow"]
    return LabelledSample(events=events, gt=gt, valid=_cumulative_support(events, spec), spec=spec, regions=regions)
