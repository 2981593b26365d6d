"""EDeC networks: construction, batch forward, losses, metrics and training.

Internally activations use the layout ``[N, T, W, H, C]`` (batch, time,
space, channel). Public predictions follow the volume convention with time
last: scalar heads give ``[dim, T]`` and dense heads ``[W, H, 2, T]``.
"""

from __future__ import annotations

import configparser
import io
import logging
import re
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import edec
from . import tensor as tn
from .edec import EdecLayer, StreamState
from .events import parse_duration
from .tensor import Tensor

log = logging.getLogger(__name__)

NONLINEARITIES: dict[str, Callable[[Tensor], Tensor]] = {"identity": tn.identity, "relu": tn.relu}


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    channels: int
    stride: int = 1
    kernel_size: int = 3
    mode: str = "streaming"
    nonlinearity: str = "identity"


@dataclass(frozen=True)
class NetworkConfig:
    width: int
    height: int
    layers: tuple[LayerSpec, ...]
    in_channels: int = 2
    head: str = "scalar"  # scalar | dense
    head_dim: int = 3
    fc_bias: bool = False
    output_scale: float = 1.0
    gamma_init: float = 0.9
    decoder: tuple[LayerSpec, ...] = ()
    skips: tuple[tuple[int, int], ...] = ()  # (encoder index, decoder index); encoder 0 is the input

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        if self.head not in ("scalar", "dense"):
            raise ConfigError(f"unknown head {self.head!r}")
        for i, spec in enumerate(self.layers + self.decoder, start=1):
            if spec.channels < 1:
                raise ConfigError(f"layer {i}: channels must be positive")
            if spec.mode not in edec.MODES:
                raise ConfigError(f"layer {i}: unknown mode {spec.mode!r}")
            if spec.nonlinearity not in NONLINEARITIES:
                raise ConfigError(f"layer {i}: unknown nonlinearity {spec.nonlinearity!r}")
            if spec.kernel_size % 2 == 0:
                raise ConfigError(f"layer {i}: kernel size must be odd")
        if self.head == "dense" and not self.decoder:
            raise ConfigError("dense head needs decoder layers")
        for enc, dec in self.skips:
            if not (0 <= enc <= len(self.layers)) or not (1 <= dec <= len(self.decoder)):
                raise ConfigError(f"skip {enc}:{dec} refers to a missing layer")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 4
    lr: float = 1e-3
    settle_us: int | None = None  # default: half the window
    seed: int = 0
    loss: str = "l1"  # l1 | l2
    beta1: float = 0.9
    beta2: float = 0.999


def table1_config(
    width: int = 240,
    height: int = 180,
    channels: Sequence[int] = (16, 32, 64, 128, 256),
    mode: str = "streaming",
    nonlinearity: str = "identity",
    **kw,
) -> NetworkConfig:
    """Angular-velocity regressor: five 3x3 EDeC layers and a bias-free FC head of size 3."""
    layers = tuple(LayerSpec(c, s, 3, mode, nonlinearity) for c, s in zip(channels, (2, 2, 2, 2, 1)))
    return NetworkConfig(width=width, height=height, layers=layers, head="scalar", head_dim=3, **kw)


def unet_config(
    width: int = 32,
    height: int = 32,
    encoder: Sequence[int] = (8, 16, 32, 64),
    decoder: Sequence[int] = (32, 16, 8, 8),
    mode: str = "streaming",
    nonlinearity: str = "relu",
    **kw,
) -> NetworkConfig:
    """Four stride-2 encoder layers, four decoder layers with concatenated skips, flow at each scale."""
    enc = tuple(LayerSpec(c, 2, 3, mode, nonlinearity) for c in encoder)
    dec = tuple(LayerSpec(c, 1, 3, mode, nonlinearity) for c in decoder)
    n = len(encoder)
    skips = tuple((n - j, j) for j in range(1, len(decoder) + 1) if n - j >= 0)
    return NetworkConfig(width=width, height=height, layers=enc, head="dense", head_dim=2, decoder=dec, skips=skips, **kw)


class Network:
    def __init__(self, config: NetworkConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.layers: list[EdecLayer] = []
        self.geometries: list[tuple[int, int]] = [(config.width, config.height)]
        feat_channels = [config.in_channels]
        cin = config.in_channels
        for spec in config.layers:
            layer = EdecLayer.create(cin, spec.channels, spec.kernel_size, spec.stride, spec.mode, config.gamma_init, rng)
            self.layers.append(layer)
            self.geometries.append(layer.output_geometry(*self.geometries[-1]))
            cin = spec.channels
            feat_channels.append(cin)
        self.decoder: list[EdecLayer] = []
        self.decoder_geometries: list[tuple[int, int]] = []
        self.flow_heads: list[tuple[Tensor, Tensor]] = []
        self.skip_of = {dec: enc for enc, dec in config.skips}
        geom = self.geometries[-1]
        for j, spec in enumerate(config.decoder, start=1):
            enc = self.skip_of.get(j)
            if enc is not None:
                geom = self.geometries[enc]
                cin += feat_channels[enc]
            else:
                geom = (geom[0] * 2, geom[1] * 2)
            layer = EdecLayer.create(cin, spec.channels, spec.kernel_size, 1, spec.mode, config.gamma_init, rng)
            self.decoder.append(layer)
            self.decoder_geometries.append(geom)
            cin = spec.channels
            bound = 1.0 / np.sqrt(cin)
            self.flow_heads.append(
                (tn.parameter(rng.uniform(-bound, bound, (cin, config.head_dim))), tn.parameter(np.zeros(config.head_dim)))
            )
        self.fc_weight: Tensor | None = None
        self.fc_bias: Tensor | None = None
        if config.head == "scalar":
            bound = 1.0 / np.sqrt(cin)
            self.fc_weight = tn.parameter(rng.uniform(-bound, bound, (cin, config.head_dim)))
            if config.fc_bias:
                self.fc_bias = tn.parameter(np.zeros(config.head_dim))

    # -- parameters --------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, layer in enumerate(self.layers, start=1):
            named += [(f"edec{i}.kernel", layer.kernel), (f"edec{i}.theta", layer.theta)]
        for j, layer in enumerate(self.decoder, start=1):
            named += [(f"dec{j}.kernel", layer.kernel), (f"dec{j}.theta", layer.theta)]
        for j, (w, b) in enumerate(self.flow_heads, start=1):
            named += [(f"flow{j}.weight", w), (f"flow{j}.bias", b)]
        if self.fc_weight is not None:
            named.append(("fc.weight", self.fc_weight))
        if self.fc_bias is not None:
            named.append(("fc.bias", self.fc_bias))
        return named

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def parameter_table(self) -> list[tuple[str, int]]:
        """Trainable parameter count per layer (kernel + decays, or FC)."""
        rows = [(f"edec{i}", layer.n_parameters()) for i, layer in enumerate(self.layers, start=1)]
        rows += [(f"dec{j}", layer.n_parameters()) for j, layer in enumerate(self.decoder, start=1)]
        rows += [(f"flow{j}", w.size + b.size) for j, (w, b) in enumerate(self.flow_heads, start=1)]
        if self.fc_weight is not None:
            rows.append(("fc", self.fc_weight.size + (self.fc_bias.size if self.fc_bias is not None else 0)))
        return rows

    # -- traversal ---------------------------------------------------------
    def _traverse(self, x: Tensor, mask: np.ndarray, run_layer) -> list[Tensor]:
        """Shared layer graph; ``run_layer(kind, idx, layer, x, mask) -> (latent, mask)``.

        ``x`` is ``[..., W, H, C]`` and ``mask`` ``[..., W, H]``. Returns the
        head outputs (one for scalar heads, one per decoder scale for dense).
        """
        cfg = self.config
        feats, masks = [x], [mask]
        for i, (layer, spec) in enumerate(zip(self.layers, cfg.layers)):
            y, mask = run_layer("enc", i, layer, x, mask)
            x = NONLINEARITIES[spec.nonlinearity](y)
            feats.append(x)
            masks.append(mask)
        if cfg.head == "scalar":
            pooled = tn.mean(x, axis=(-3, -2))
            out = tn.matmul(pooled, self.fc_weight)
            if self.fc_bias is not None:
                out = out + self.fc_bias
            return [out * cfg.output_scale if cfg.output_scale != 1.0 else out]
        flows = []
        for j, (layer, spec) in enumerate(zip(self.decoder, cfg.decoder), start=1):
            geom = self.decoder_geometries[j - 1]
            factor = -(-geom[0] // x.shape[-3])
            x = tn.upsample_nearest(x, factor, geom)
            mask = _upsample_mask(mask, factor, geom)
            enc = self.skip_of.get(j)
            if enc is not None:
                x = tn.concat([x, feats[enc]], axis=-1)
                mask = np.maximum(mask, masks[enc])
            y, mask = run_layer("dec", j - 1, layer, x, mask)
            x = NONLINEARITIES[spec.nonlinearity](y)
            w, b = self.flow_heads[j - 1]
            flow = tn.matmul(x, w) + b
            flows.append(flow * cfg.output_scale if cfg.output_scale != 1.0 else flow)
        return flows

    def forward_batch(self, volumes: np.ndarray, masks: np.ndarray | None = None) -> list[Tensor]:
        """Differentiable forward over whole windows.

        ``volumes`` is ``[N, T, W, H, C]``; returns ``[N, T, dim]`` for scalar
        heads or a list of ``[N, T, W_s, H_s, 2]`` flows (coarse to fine).
        """
        volumes = np.asarray(volumes, dtype=np.float64)
        self._check_input(volumes.shape[2:])
        if masks is None:
            masks = np.minimum(1.0, volumes.sum(axis=-1))

        def run(kind, idx, layer, x, mask):
            return edec.forward_sequence(x, layer, mask)

        return self._traverse(Tensor(volumes), masks, run)

    def stream_step(self, slice_: np.ndarray, mask: np.ndarray, states: list[StreamState]) -> tuple[list[Tensor], list[StreamState]]:
        """Advance every layer by one slice ``[(N,) W, H, C]``; returns head outputs and new states."""
        slice_ = np.asarray(slice_, dtype=np.float64)
        self._check_input(slice_.shape[-3:])
        new_states = list(states)
        offset = len(self.layers)

        def run(kind, idx, layer, x, m):
            k = idx if kind == "enc" else offset + idx
            out, out_mask, new_states[k] = edec.step(layer, x, m, states[k])
            return out, out_mask

        outs = self._traverse(Tensor(slice_), np.asarray(mask, dtype=np.float64), run)
        return outs, new_states

    def initial_states(self, batch: int | None = None) -> list[StreamState]:
        states = [StreamState.zeros(layer, *geom, batch=batch) for layer, geom in zip(self.layers, self.geometries)]
        states += [StreamState.zeros(layer, *geom, batch=batch) for layer, geom in zip(self.decoder, self.decoder_geometries)]
        return states

    def _check_input(self, shape: tuple[int, ...]) -> None:
        want = (self.config.width, self.config.height, self.config.in_channels)
        if tuple(shape) != want:
            raise tn.ShapeError(f"input geometry {tuple(shape)} does not match network {want}")

    def forward(self, volume: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Predictions for one ``[W, H, C, T]`` volume, time last (see module docstring)."""
        vol = np.asarray(getattr(volume, "tensor", volume), dtype=np.float64)
        x = np.transpose(vol, (3, 0, 1, 2))[None]
        m = None if mask is None else np.transpose(mask, (2, 0, 1))[None]
        outs = self.forward_batch(x, m)
        return to_public(outs[-1].data[0])


def to_public(pred: np.ndarray) -> np.ndarray:
    """``[T, dim]`` -> ``[dim, T]``; ``[T, W, H, 2]`` -> ``[W, H, 2, T]``."""
    return np.moveaxis(pred, 0, -1)


def _upsample_mask(mask: np.ndarray, factor: int, geom: tuple[int, int]) -> np.ndarray:
    up = np.repeat(np.repeat(mask, factor, axis=-2), factor, axis=-1)
    return up[..., : geom[0], : geom[1]]


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    return Network(config, seed)


# ---------------------------------------------------------------------------
# losses and metrics


def settle_bins(settle_us: int, bin_width_us: int) -> int:
    """First bin whose start time is at or after ``settle_us``."""
    return -(-settle_us // bin_width_us)


def _loss_weights(shape: tuple[int, ...], valid, settle: int, time_axis: int) -> np.ndarray:
    w = np.ones(shape)
    if valid is not None:
        valid = np.asarray(valid, dtype=np.float64)
        if valid.ndim == len(shape) - 1:
            valid = valid[..., None]
        w = w * valid
    if settle:
        idx = [None] * len(shape)
        idx[time_axis] = slice(None)
        w = w * (np.arange(shape[time_axis]) >= settle)[tuple(idx)]
    return w


def loss_l1(pred: Tensor, gt: np.ndarray, valid=None, settle: int = 0, time_axis: int = 1) -> Tensor:
    """Mean ``|pred - gt|`` over cells with ``valid == 1`` and time index ``>= settle``; 0 if none."""
    w = _loss_weights(pred.shape, valid, settle, time_axis)
    n = w.sum()
    if n == 0:
        return tn.tsum(pred * 0.0)
    return tn.tsum(tn.tabs(pred - gt) * w) * (1.0 / n)


def loss_l2(pred: Tensor, gt: np.ndarray, valid=None, settle: int = 0, time_axis: int = 1) -> Tensor:
    w = _loss_weights(pred.shape, valid, settle, time_axis)
    n = w.sum()
    if n == 0:
        return tn.tsum(pred * 0.0)
    return tn.tsum(tn.square(pred - gt) * w) * (1.0 / n)


def metric_rmse(pred: np.ndarray, gt: np.ndarray, settle: int = 0, time_axis: int = -1) -> float:
    """Root mean squared error over slices with time index ``>= settle``."""
    d = np.take(np.asarray(pred, dtype=np.float64) - gt, np.arange(settle, np.shape(pred)[time_axis]), axis=time_axis)
    return float(np.sqrt(np.mean(d * d)))


def metric_relative_error(pred: np.ndarray, gt: np.ndarray, baseline: np.ndarray, settle: int = 0, time_axis: int = -1) -> float:
    """RMSE of ``pred`` divided by RMSE of the mean-predictor ``baseline``."""
    ref = metric_rmse(baseline, gt, settle, time_axis)
    if ref == 0:
        raise ValueError("baseline RMSE is zero; relative error undefined")
    return metric_rmse(pred, gt, settle, time_axis) / ref


def metric_aee(pred: np.ndarray, gt: np.ndarray, valid=None, flow_axis: int = -1) -> float:
    """Mean endpoint error (pixels) over valid pixels; ``valid`` lacks the flow axis."""
    err = np.sqrt(np.sum((np.asarray(pred, dtype=np.float64) - gt) ** 2, axis=flow_axis))
    if valid is None:
        return float(err.mean())
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        return 0.0
    return float(err[valid].mean())


def downsample_flow(gt: np.ndarray, valid: np.ndarray, geom: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Masked block average of ``gt[..., W, H, 2]`` to ``geom``; a block is valid if any pixel is."""
    W, H = gt.shape[-3:-1]
    fw, fh = -(-W // geom[0]), -(-H // geom[1])
    if (fw, fh) == (1, 1):
        return gt, valid
    lead = gt.shape[:-3]
    pw, ph = geom[0] * fw - W, geom[1] * fh - H
    g = np.pad(gt * valid[..., None], [(0, 0)] * len(lead) + [(0, pw), (0, ph), (0, 0)])
    v = np.pad(valid.astype(np.float64), [(0, 0)] * len(lead) + [(0, pw), (0, ph)])
    g = g.reshape(lead + (geom[0], fw, geom[1], fh, gt.shape[-1])).sum(axis=(len(lead) + 1, len(lead) + 3))
    v = v.reshape(lead + (geom[0], fw, geom[1], fh)).sum(axis=(len(lead) + 1, len(lead) + 3))
    return np.where(v[..., None] > 0, g / np.maximum(v, 1)[..., None], 0.0), (v > 0).astype(np.float64)


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class Dataset:
    """Training windows in internal layout.

    ``volumes`` ``[S, T, W, H, C]``; ``gt`` ``[S, T, dim]`` or ``[S, T, W, H, 2]``;
    ``valid`` broadcastable to the gt without its last axis.
    """

    volumes: np.ndarray
    gt: np.ndarray
    valid: np.ndarray | None = None
    bin_width: int = 2000

    def __len__(self) -> int:
        return len(self.volumes)

    @property
    def n_bins(self) -> int:
        return self.volumes.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.volumes[idx], self.gt[idx], None if self.valid is None else self.valid[idx], self.bin_width)


def batch_loss(net: Network, volumes: np.ndarray, gt: np.ndarray, valid, settle: int, kind: str = "l1") -> Tensor:
    """Loss of one batch. Dense heads average equal-weighted per-scale losses against downsampled gt."""
    outs = net.forward_batch(volumes)
    fn = loss_l1 if kind == "l1" else loss_l2
    if net.config.head == "scalar":
        return fn(outs[0], gt, None, settle)
    total = None
    v = np.ones(gt.shape[:-1]) if valid is None else valid
    for out in outs:
        g, m = downsample_flow(gt, v, out.shape[2:4])
        term = fn(out, g, m, settle)
        total = term if total is None else total + term
    return total


@dataclass
class TrainResult:
    network: Network
    history: list[float] = field(default_factory=list)


def train(net: Network, data: Dataset, cfg: TrainConfig, callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Minibatch Adam on the settle-masked loss; deterministic for a fixed seed."""
    if len(data) == 0:
        raise ValueError("training set is empty")
    window = data.n_bins * data.bin_width
    settle_us = cfg.settle_us if cfg.settle_us is not None else window // 2
    if settle_us >= window:
        raise ValueError(f"settle time {settle_us}us must be shorter than the window {window}us")
    settle = settle_bins(settle_us, data.bin_width)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            valid = None if data.valid is None else data.valid[idx]
            opt.zero_grad()
            loss = batch_loss(net, data.volumes[idx], data.gt[idx], valid, settle, cfg.loss)
            value = loss.item()
            if not np.isfinite(value):
                norms = ", ".join(f"{n}={np.linalg.norm(p.data):.3g}" for n, p in net.named_parameters())
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}; parameter norms: {norms}")
            loss.backward()
            opt.step()
            losses.append(value)
        history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6f", epoch, history[-1])
        if callback is not None:
            callback(epoch, history[-1])
    return TrainResult(net, history)


def predict(net: Network, data: Dataset, batch_size: int = 8) -> np.ndarray:
    """Final-head predictions in internal layout for every sample."""
    outs = [net.forward_batch(data.volumes[i:i + batch_size])[-1].data for i in range(0, len(data), batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate(net: Network, data: Dataset, baseline_mean: np.ndarray | None = None, settle_us: int | None = None) -> dict[str, float]:
    """RMSE and relative error (scalar head) or AEE and zero-flow AEE (dense head)."""
    window = data.n_bins * data.bin_width
    settle = settle_bins(window // 2 if settle_us is None else settle_us, data.bin_width)
    pred = predict(net, data)
    if net.config.head == "scalar":
        mean = data.gt.mean(axis=(0, 1)) if baseline_mean is None else np.asarray(baseline_mean)
        base = np.broadcast_to(mean, data.gt.shape)
        return {
            "rmse": metric_rmse(pred, data.gt, settle, time_axis=1),
            "baseline_rmse": metric_rmse(base, data.gt, settle, time_axis=1),
            "relative_error": metric_relative_error(pred, data.gt, base, settle, time_axis=1),
        }
    valid = np.ones(data.gt.shape[:-1]) if data.valid is None else data.valid
    valid = valid.copy()
    valid[:, :settle] = 0
    return {
        "aee": metric_aee(pred, data.gt, valid),
        "zero_aee": metric_aee(np.zeros_like(data.gt), data.gt, valid),
    }


# ---------------------------------------------------------------------------
# config files


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _per_layer(text: str, n: int, what: str) -> tuple[str, ...]:
    vals = tuple(v.strip() for v in text.split(",") if v.strip())
    if len(vals) == 1:
        return vals * n
    if len(vals) != n:
        raise ValueError(f"{what}: expected 1 or {n} values, got {len(vals)}")
    return vals


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"\[(.+)\]", s)
        if m:
            current = m.group(1).strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return lineno
    return None


def parse_config(text: str) -> tuple[NetworkConfig, TrainConfig]:
    """Read ``[network]`` and ``[train]`` sections from INI-style text."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    net = cp["network"] if cp.has_section("network") else {}
    tr = cp["train"] if cp.has_section("train") else {}
    where = ("network", "")

    def get(section, sec, key, conv, default):
        nonlocal where
        where = (section, key)
        return conv(sec[key]) if key in sec else default

    try:
        preset = get("network", net, "preset", str, "custom").strip()
        width = get("network", net, "width", int, 32)
        height = get("network", net, "height", int, 32)
        kernel = get("network", net, "kernel_size", int, 3)
        default_ch = {"table1": "16,32,64,128,256", "unet": "8,16,32,64"}.get(preset, "")
        default_st = {"table1": "2,2,2,2,1", "unet": "2,2,2,2"}.get(preset, "")
        channels = get("network", net, "channels", _ints, _ints(default_ch))
        strides = get("network", net, "strides", _ints, _ints(default_st) or (1,) * len(channels))
        if len(strides) != len(channels):
            raise ValueError(f"strides has {len(strides)} entries but channels has {len(channels)}")
        n = len(channels)
        modes = _per_layer(get("network", net, "modes", str, "streaming"), max(n, 1), "modes")
        acts = _per_layer(get("network", net, "nonlinearity", str, "relu" if preset == "unet" else "identity"), max(n, 1), "nonlinearity")
        head = get("network", net, "head", str, "dense" if preset == "unet" else "scalar").strip()
        dec_ch = get("network", net, "decoder_channels", _ints, (32, 16, 8, 8) if preset == "unet" else ())
        layers = tuple(LayerSpec(c, s, kernel, m, a) for c, s, m, a in zip(channels, strides, modes, acts))
        decoder = tuple(LayerSpec(c, 1, kernel, modes[-1], acts[-1]) for c in dec_ch)
        default_skips = tuple((n - j, j) for j in range(1, len(dec_ch) + 1) if n - j >= 0)
        skips = get(
            "network", net, "skips",
            lambda s: tuple(tuple(int(v) for v in item.split(":")) for item in s.replace(" ", "").split(",") if item),
            default_skips,
        )
        netcfg = NetworkConfig(
            width=width,
            height=height,
            layers=layers,
            in_channels=get("network", net, "in_channels", int, 2),
            head=head,
            head_dim=get("network", net, "head_dim", int, 2 if head == "dense" else 3),
            fc_bias=get("network", net, "fc_bias", lambda s: cp.BOOLEAN_STATES[s.strip().lower()], False),
            output_scale=get("network", net, "output_scale", float, 1.0),
            gamma_init=get("network", net, "gamma_init", float, 0.9),
            decoder=decoder,
            skips=skips,
        )
        settle = get("train", tr, "settle", parse_duration, None)
        traincfg = TrainConfig(
            epochs=get("train", tr, "epochs", int, 500),
            batch_size=get("train", tr, "batch_size", int, 4),
            lr=get("train", tr, "lr", float, 1e-3),
            settle_us=settle,
            seed=get("train", tr, "seed", int, 0),
            loss=get("train", tr, "loss", str, "l1").strip(),
        )
        netcfg.validate()
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError) and where[1] == "":
            raise
        line = _line_of(text, *where) if where[1] else None
        loc = f"line {line}" if line else f"[{where[0]}] {where[1]}"
        raise ConfigError(f"config error at {loc}: {exc}") from None
    if traincfg.loss not in ("l1", "l2"):
        raise ConfigError(f"config error at line {_line_of(text, 'train', 'loss')}: unknown loss {traincfg.loss!r}")
    return netcfg, traincfg


def config_to_text(net: NetworkConfig, train_cfg: TrainConfig | None = None) -> str:
    """Canonical INI text; ``parse_config(config_to_text(c))`` rebuilds ``c``."""
    cp = configparser.ConfigParser()
    cp["network"] = {
        "width": str(net.width),
        "height": str(net.height),
        "in_channels": str(net.in_channels),
        "kernel_size": str(net.layers[0].kernel_size),
        "channels": ",".join(str(s.channels) for s in net.layers),
        "strides": ",".join(str(s.stride) for s in net.layers),
        "modes": ",".join(s.mode for s in net.layers),
        "nonlinearity": ",".join(s.nonlinearity for s in net.layers),
        "head": net.head,
        "head_dim": str(net.head_dim),
        "fc_bias": str(net.fc_bias).lower(),
        "output_scale": repr(net.output_scale),
        "gamma_init": repr(net.gamma_init),
        "decoder_channels": ",".join(str(s.channels) for s in net.decoder),
        "skips": ",".join(f"{e}:{d}" for e, d in net.skips),
    }
    if train_cfg is not None:
        cp["train"] = {
            "epochs": str(train_cfg.epochs),
            "batch_size": str(train_cfg.batch_size),
            "lr": repr(train_cfg.lr),
            "seed": str(train_cfg.seed),
            "loss": train_cfg.loss,
        }
        if train_cfg.settle_us is not None:
            cp["train"]["settle"] = f"{train_cfg.settle_us}us"
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# checkpoints
#
# Little-endian layout, version 1:
#   4s  magic b"EDNC"
#   u16 version, u16 reserved (0)
#   u32 config length, then that many UTF-8 bytes of config text
#   u32 parameter count, then per parameter:
#       u16 name length, name bytes, u8 ndim, ndim x u32 dims, float64 data (C order)

CKPT_MAGIC = b"EDNC"
CKPT_VERSION = 1


def save_checkpoint(net: Network) -> bytes:
    text = config_to_text(net.config).encode("utf-8")
    out = [struct.pack("<4sHHI", CKPT_MAGIC, CKPT_VERSION, 0, len(text)), text]
    named = net.named_parameters()
    out.append(struct.pack("<I", len(named)))
    for name, p in named:
        nb = name.encode("utf-8")
        out.append(struct.pack(f"<H{len(nb)}sB", len(nb), nb, p.ndim))
        out.append(struct.pack(f"<{p.ndim}I", *p.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(out)


def load_checkpoint(raw: bytes, expect: NetworkConfig | None = None) -> Network:
    """Rebuild a network from checkpoint bytes; ``expect`` guards against config mismatch."""
    if len(raw) < 12:
        raise ValueError("checkpoint truncated")
    magic, version, _, n = struct.unpack_from("<4sHHI", raw)
    if magic != CKPT_MAGIC:
        raise ValueError(f"not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    cfg, _ = parse_config(raw[off:off + n].decode("utf-8"))
    off += n
    if expect is not None and replace(expect) != cfg:
        raise ValueError("checkpoint network config differs from the requested config")
    net = Network(cfg)
    params = dict(net.named_parameters())
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    if count != len(params):
        raise ValueError(f"checkpoint has {count} parameters, network has {len(params)}")
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        if name not in params or params[name].shape != tuple(shape):
            raise ValueError(f"checkpoint parameter {name} {tuple(shape)} does not fit the network")
        params[name].data = data.astype(np.float64)
    return net
