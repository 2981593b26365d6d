"""Event decay convolution (EDeC) layers.

An EDeC neuron convolves each time slice with a spatial kernel and keeps a
latent value that decays by ``gamma`` per slice:

    E[t] = conv(K, X[t]) + gamma * E[t - 1]

which is the one-step recursion of a spatio-temporal kernel whose temporal
taps are ``gamma ** lag``. Each output channel (neuron) has its own decay
``gamma = tanh(theta)``.

Four execution routes share the same parameters:

* ``forward_dense``: reference spatio-temporal convolution with the
  materialized kernel, full history, no recursion.
* ``forward_streaming_step``: one slice in, one slice out, O(1) in history.
* ``forward_partial_step``: masked variant with either count-based
  (``original``) or kernel-weighted (``weighted``) rescaling.
* ``forward_sequence``: differentiable whole-window evaluation used for training.

Mask footprints only count kernel taps that land inside the grid, so a fully
observed input gets a scaling factor of exactly 1 at the borders too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

MODES = ("dense", "streaming", "partial_original", "partial_weighted")
ALPHA_EPS = 1e-12


@dataclass
class EdecLayer:
    kernel: Tensor  # [kw, kh, Cin, Cout]
    theta: Tensor  # [Cout]; gamma = tanh(theta)
    stride: int = 1
    mode: str = "streaming"

    def __post_init__(self):
        kw, kh, _, cout = self.kernel.shape
        if kw % 2 == 0 or kh % 2 == 0:
            raise ShapeError(f"kernel spatial size must be odd, got {kw}x{kh}")
        if self.theta.shape != (cout,):
            raise ShapeError(f"theta must have shape ({cout},), got {self.theta.shape}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @classmethod
    def create(
        cls,
        cin: int,
        cout: int,
        kernel_size: int = 3,
        stride: int = 1,
        mode: str = "streaming",
        gamma_init: float = 0.9,
        rng: np.random.Generator | None = None,
    ) -> "EdecLayer":
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(kernel_size * kernel_size * cin)
        k = rng.uniform(-bound, bound, size=(kernel_size, kernel_size, cin, cout))
        theta = np.full(cout, np.arctanh(gamma_init))
        return cls(tn.parameter(k), tn.parameter(theta), stride=stride, mode=mode)

    @property
    def cin(self) -> int:
        return self.kernel.shape[2]

    @property
    def cout(self) -> int:
        return self.kernel.shape[3]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.kernel.shape[0], self.kernel.shape[1]

    @property
    def partial(self) -> bool:
        return self.mode.startswith("partial")

    def parameters(self) -> list[Tensor]:
        return [self.kernel, self.theta]

    def n_parameters(self) -> int:
        return self.kernel.size + self.theta.size

    def output_geometry(self, width: int, height: int) -> tuple[int, int]:
        return (
            tn.conv_output_size(width, self.kernel.shape[0], self.stride, "same"),
            tn.conv_output_size(height, self.kernel.shape[1], self.stride, "same"),
        )


@dataclass
class StreamState:
    """Per-layer memory between slices: last latent output and its mask."""

    prev_output: Tensor  # [(N,) W', H', Cout]
    prev_mask: np.ndarray  # [(N,) W', H']
    initialized: bool = False

    @classmethod
    def zeros(cls, layer: EdecLayer, width: int, height: int, batch: int | None = None) -> "StreamState":
        wo, ho = layer.output_geometry(width, height)
        lead = () if batch is None else (batch,)
        return cls(
            prev_output=Tensor(np.zeros(lead + (wo, ho, layer.cout))),
            prev_mask=np.zeros(lead + (wo, ho)),
        )


@dataclass
class AlphaMap:
    values: Tensor  # [(N,) W', H'] when channel-shared, [(N,) W', H', Cout] when per channel
    per_channel: bool = field(default=False)


def effective_gamma(layer: EdecLayer) -> Tensor:
    return tn.tanh(layer.theta)


def materialize_kernel(layer: EdecLayer, t_hat: int) -> Tensor:
    """Spatio-temporal kernel ``[kw, kh, Cin, Cout, t_hat]`` with taps ``K * gamma ** (t_hat - t)``.

    Index ``t_hat - 1`` (the newest tap) carries weight 1.
    """
    if t_hat < 1:
        raise ValueError("t_hat must be >= 1")
    taps = tn.decay_taps(effective_gamma(layer), t_hat)  # [Cout, t_hat]
    k = tn.reshape(layer.kernel, layer.kernel.shape + (1,))
    return k * taps


def forward_dense(volume, layer: EdecLayer) -> Tensor:
    """Causal spatio-temporal convolution of ``volume[W, H, Cin, T]`` with the materialized kernel."""
    volume = tn.as_tensor(volume)
    if volume.ndim != 4:
        raise ShapeError(f"expected a [W, H, C, T] volume, got {volume.shape}")
    T = volume.shape[3]
    khat = materialize_kernel(layer, T)
    slices = tn.transpose(volume, (3, 0, 1, 2))  # [T, W, H, Cin]
    wo, ho = layer.output_geometry(volume.shape[0], volume.shape[1])
    total = None
    for lag in range(T):
        y = tn.conv2d(slices[: T - lag], khat[..., T - 1 - lag], layer.stride, "same")
        if lag:
            y = tn.concat([Tensor(np.zeros((lag, wo, ho, layer.cout))), y], axis=0)
        total = y if total is None else total + y
    return tn.transpose(total, (1, 2, 3, 0))


def _check_state(out_shape: tuple[int, ...], state: StreamState) -> None:
    if state.prev_output.shape != out_shape:
        raise ShapeError(
            f"stream state holds {state.prev_output.shape} but this slice produces {out_shape}"
        )


def forward_streaming_step(slice_, state: StreamState, layer: EdecLayer) -> tuple[Tensor, StreamState]:
    """Advance one slice: ``out = conv(K, slice) + gamma * prev_output``."""
    z = tn.conv2d(slice_, layer.kernel, layer.stride, "same")
    _check_state(z.shape, state)
    out = z + state.prev_output * effective_gamma(layer)
    mask = np.ones(out.shape[:-1])
    return out, StreamState(prev_output=out, prev_mask=mask, initialized=True)


def _footprint_count(mask: np.ndarray, kernel_size: tuple[int, int], stride: int) -> np.ndarray:
    ones = np.ones(kernel_size + (1, 1))
    return tn.conv2d_array(np.asarray(mask, dtype=np.float64)[..., None], ones, stride, "same")[..., 0]


def alpha_original(
    in_mask: np.ndarray, state_mask: np.ndarray, kernel_size: tuple[int, int], stride: int = 1
) -> AlphaMap:
    """Count-based scaling ``2|Omega| / (observed input taps + observed state taps)``; 0 if none observed."""
    in_mask = np.asarray(in_mask, dtype=np.float64)
    state_mask = np.asarray(state_mask, dtype=np.float64)
    seen = _footprint_count(in_mask, kernel_size, stride) + _footprint_count(state_mask, kernel_size, 1)
    omega = _footprint_count(np.ones_like(in_mask), kernel_size, stride) + _footprint_count(
        np.ones_like(state_mask), kernel_size, 1
    )
    if seen.shape != state_mask.shape:
        raise ShapeError(f"input mask maps to {seen.shape} but state mask is {state_mask.shape}")
    alpha = np.where(seen > 0, omega / np.where(seen > 0, seen, 1.0), 0.0)
    return AlphaMap(Tensor(alpha), per_channel=False)


def alpha_weighted(layer: EdecLayer, in_mask: np.ndarray, state_mask: np.ndarray) -> AlphaMap:
    """Kernel-weighted scaling per output channel.

    ``(sum K + gamma*Cin*|Omega|) / (a + gamma*b)`` with ``a`` the kernel
    weight over observed input taps and ``b`` the count of observed state
    taps (times ``Cin``). Zero where the denominator vanishes. Differentiable
    in the kernel and ``theta``.
    """
    in_mask = np.asarray(in_mask, dtype=np.float64)
    state_mask = np.asarray(state_mask, dtype=np.float64)
    cin = layer.cin
    rep = np.repeat(in_mask[..., None], cin, axis=-1)
    a = tn.conv2d(rep, layer.kernel, layer.stride, "same")
    k_total = tn.conv2d(np.ones_like(rep), layer.kernel, layer.stride, "same")
    b = cin * _footprint_count(state_mask, layer.kernel_size, 1)[..., None]
    b_total = cin * _footprint_count(np.ones_like(state_mask), layer.kernel_size, 1)[..., None]
    if b.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"input mask maps to {a.shape[:-1]} but state mask is {state_mask.shape}")
    gamma = effective_gamma(layer)
    num = k_total + gamma * b_total
    den = a + gamma * b
    return AlphaMap(tn.safe_div(num, den, ALPHA_EPS), per_channel=True)


def propagate_mask(alpha: AlphaMap) -> np.ndarray:
    """Next-layer mask: 1 where the scaling factor is positive (any channel, if per channel)."""
    pos = alpha.values.data > 0
    if alpha.per_channel:
        pos = pos.any(axis=-1)
    return pos.astype(np.float64)


def forward_partial_step(
    slice_,
    in_mask: np.ndarray,
    state: StreamState,
    layer: EdecLayer,
    alpha_mode: str = "weighted",
) -> tuple[Tensor, np.ndarray, StreamState]:
    """Masked step: ``alpha * (conv(K, slice*M_in) + gamma * prev_output*M_prev)``."""
    slice_ = tn.as_tensor(slice_)
    in_mask = np.asarray(in_mask, dtype=np.float64)
    if in_mask.shape != slice_.shape[:-1]:
        raise ShapeError(f"mask shape {in_mask.shape} does not match slice {slice_.shape}")
    z = tn.conv2d(tn.hadamard(slice_, in_mask), layer.kernel, layer.stride, "same")
    _check_state(z.shape, state)
    rec = tn.hadamard(state.prev_output, state.prev_mask) * effective_gamma(layer)
    if alpha_mode == "original":
        alpha = alpha_original(in_mask, state.prev_mask, layer.kernel_size, layer.stride)
    elif alpha_mode == "weighted":
        alpha = alpha_weighted(layer, in_mask, state.prev_mask)
    else:
        raise ValueError(f"unknown alpha mode {alpha_mode!r}")
    out = tn.hadamard(z + rec, alpha.values)
    out_mask = propagate_mask(alpha)
    return out, out_mask, StreamState(prev_output=out, prev_mask=out_mask, initialized=True)


def alpha_mode_of(layer: EdecLayer) -> str:
    return "original" if layer.mode == "partial_original" else "weighted"


def step(layer: EdecLayer, slice_, mask: np.ndarray, state: StreamState) -> tuple[Tensor, np.ndarray, StreamState]:
    """Dispatch one slice through ``layer`` according to its mode."""
    if layer.partial:
        return forward_partial_step(slice_, mask, state, layer, alpha_mode_of(layer))
    out, new_state = forward_streaming_step(slice_, state, layer)
    return out, new_state.prev_mask, new_state


def forward_sequence(x: Tensor, layer: EdecLayer, masks: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Whole-window evaluation of ``x[N, T, W, H, Cin]`` from a cold state.

    Returns outputs ``[N, T, W', H', Cout]`` and masks ``[N, T, W', H']``.
    Non-partial layers convolve all slices at once and apply the decay as a
    full-history temporal convolution; partial layers unroll the recursion.
    """
    x = tn.as_tensor(x)
    N, T, W, H, _ = x.shape
    wo, ho = layer.output_geometry(W, H)
    if not layer.partial:
        z = tn.conv2d(tn.reshape(x, (N * T, W, H, layer.cin)), layer.kernel, layer.stride, "same")
        z = tn.reshape(z, (N, T, wo, ho, layer.cout))
        return tn.causal_decay(z, effective_gamma(layer), axis=1), np.ones((N, T, wo, ho))
    if masks is None:
        masks = np.ones((N, T, W, H))
    state = StreamState.zeros(layer, W, H, batch=N)
    outs, out_masks = [], []
    for t in range(T):
        out, m, state = forward_partial_step(x[:, t], masks[:, t], state, layer, alpha_mode_of(layer))
        outs.append(out)
        out_masks.append(m)
    return tn.stack(outs, axis=1), np.stack(out_masks, axis=1)
