"""Event parsing, binary event volumes and first-layer masks.

Two on-disk formats are supported:

* CSV: optional header, one event per line ``t_us,x,y,p`` with ``p`` in {1, -1}.
* Binary: a 16-byte little-endian header (magic ``b"EVT0"``, uint16 W,
  uint16 H, 8 reserved zero bytes) followed by 13-byte records
  (uint64 t_us, uint16 x, uint16 y, int8 p).
"""

from __future__ import annotations

import io
import re
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

MAGIC = b"EVT0"
HEADER = struct.Struct("<4sHH8s")
RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


class EventFormatError(ValueError):
    """Malformed or out-of-range event data."""


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    p: int
    t: int  # microseconds


@dataclass(frozen=True)
class WindowSpec:
    window_length: int  # microseconds
    bin_width: int
    t0: int = 0

    def __post_init__(self):
        if self.bin_width <= 0 or self.window_length <= 0:
            raise ValueError("window_length and bin_width must be positive")
        if self.window_length % self.bin_width:
            raise ValueError(
                f"window_length {self.window_length} is not a multiple of bin_width {self.bin_width}"
            )

    @property
    def n_bins(self) -> int:
        return self.window_length // self.bin_width

    def bin_start(self, t: int) -> int:
        """Offset of bin ``t``'s start from the window start, in microseconds."""
        return t * self.bin_width


@dataclass(frozen=True)
class EventVolume:
    """Binary indicator tensor ``[W, H, 2, T]``; channel 0 is p=+1, channel 1 is p=-1."""

    tensor: np.ndarray
    spec: WindowSpec

    @property
    def geometry(self) -> tuple[int, int]:
        return self.tensor.shape[0], self.tensor.shape[1]


def _check_event(i: int, x: int, y: int, p: int, t: int, width: int, height: int) -> None:
    if not (0 <= x < width and 0 <= y < height):
        raise EventFormatError(f"event {i}: coordinate ({x}, {y}) outside {width}x{height}")
    if p not in (1, -1):
        raise EventFormatError(f"event {i}: polarity {p} not in {{1, -1}}")
    if t < 0:
        raise EventFormatError(f"event {i}: negative timestamp {t}")


def parse_events(source: bytes | BinaryIO, fmt: str, width: int, height: int) -> list[Event]:
    """Read events in file order from CSV or binary data."""
    raw = source if isinstance(source, (bytes, bytearray)) else source.read()
    if fmt == "csv":
        return _parse_csv(bytes(raw), width, height)
    if fmt == "binary":
        return _parse_binary(bytes(raw), width, height)
    raise ValueError(f"unknown event format {fmt!r}")


def _parse_csv(raw: bytes, width: int, height: int) -> list[Event]:
    events: list[Event] = []
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if lineno == 1 and not fields[0].lstrip("-").isdigit():
            continue  # header
        if len(fields) != 4:
            raise EventFormatError(f"line {lineno}: expected 4 fields t_us,x,y,p, got {len(fields)}")
        try:
            t, x, y, p = (int(f) for f in fields)
        except ValueError:
            raise EventFormatError(f"line {lineno}: non-integer field in {line!r}") from None
        _check_event(len(events), x, y, p, t, width, height)
        events.append(Event(x=x, y=y, p=p, t=t))
    return events


def _parse_binary(raw: bytes, width: int, height: int) -> list[Event]:
    if len(raw) == 0:
        return []
    if len(raw) < HEADER.size:
        raise EventFormatError(f"offset 0: truncated header ({len(raw)} bytes)")
    magic, w, h, _ = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise EventFormatError(f"offset 0: bad magic {magic!r}")
    if (w, h) != (width, height):
        raise EventFormatError(f"offset 4: file geometry {w}x{h} differs from expected {width}x{height}")
    body = len(raw) - HEADER.size
    if body % RECORD_DTYPE.itemsize:
        off = HEADER.size + (body // RECORD_DTYPE.itemsize) * RECORD_DTYPE.itemsize
        raise EventFormatError(f"offset {off}: truncated record")
    rec = np.frombuffer(raw, dtype=RECORD_DTYPE, offset=HEADER.size)
    events = []
    for i, (t, x, y, p) in enumerate(rec.tolist()):
        _check_event(i, x, y, p, t, width, height)
        events.append(Event(x=x, y=y, p=p, t=t))
    return events


def write_events_csv(events: Iterable[Event], header: bool = True) -> bytes:
    buf = io.StringIO()
    if header:
        buf.write("t_us,x,y,p\n")
    for e in events:
        buf.write(f"{e.t},{e.x},{e.y},{e.p}\n")
    return buf.getvalue().encode("utf-8")


def write_events_binary(events: Sequence[Event], width: int, height: int) -> bytes:
    rec = np.empty(len(events), dtype=RECORD_DTYPE)
    if len(events):
        rec["t"] = [e.t for e in events]
        rec["x"] = [e.x for e in events]
        rec["y"] = [e.y for e in events]
        rec["p"] = [e.p for e in events]
    return HEADER.pack(MAGIC, width, height, bytes(8)) + rec.tobytes()


def events_to_arrays(events: Sequence[Event]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    n = len(events)
    x = np.fromiter((e.x for e in events), dtype=np.int64, count=n)
    y = np.fromiter((e.y for e in events), dtype=np.int64, count=n)
    p = np.fromiter((e.p for e in events), dtype=np.int64, count=n)
    t = np.fromiter((e.t for e in events), dtype=np.int64, count=n)
    return x, y, p, t


def build_event_volume(events: Sequence[Event], width: int, height: int, spec: WindowSpec) -> EventVolume:
    """Quantize events in ``[t0, t0 + window_length)`` into a binary ``[W, H, 2, T]`` volume.

    Repeated events in one cell still give 1 (indicator, not a count).
    """
    vol = np.zeros((width, height, 2, spec.n_bins), dtype=np.float64)
    if len(events):
        x, y, p, t = events_to_arrays(events)
        keep = (t >= spec.t0) & (t < spec.t0 + spec.window_length)
        b = (t[keep] - spec.t0) // spec.bin_width
        chan = np.where(p[keep] > 0, 0, 1)
        vol[x[keep], y[keep], chan, b] = 1.0
    return EventVolume(tensor=vol, spec=spec)


def initial_mask(volume: EventVolume | np.ndarray) -> np.ndarray:
    """First-layer mask ``[W, H, T]``: 1 where either polarity fired in the bin.

    The polarity sum is clamped to 1 so the mask stays binary when both fire.
    """
    vol = volume.tensor if isinstance(volume, EventVolume) else np.asarray(volume)
    return np.minimum(1.0, vol[:, :, 0, :] + vol[:, :, 1, :])


_UNITS = {"us": 1, "ms": 1000, "s": 1_000_000}


def parse_duration(text: str | int) -> int:
    """``"48ms"``, ``"2000us"``, ``"0.1s"`` or a bare integer (microseconds) -> microseconds."""
    if isinstance(text, int):
        return text
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*(us|ms|s)?\s*", str(text))
    if not m:
        raise ValueError(f"bad duration {text!r}")
    value = float(m.group(1)) * _UNITS[m.group(2) or "us"]
    if abs(value - round(value)) > 1e-6:
        raise ValueError(f"duration {text!r} is not a whole number of microseconds")
    return int(round(value))
