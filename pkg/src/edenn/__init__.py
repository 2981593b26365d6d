"""Event decay neural networks: decaying spatio-temporal convolutions for event streams."""

from .edec import EdecLayer, StreamState
from .events import Event, EventVolume, WindowSpec, build_event_volume, initial_mask, parse_events
from .network import Network, NetworkConfig, TrainConfig, build_network
from .runtime import StreamSession, bench, open_session, step

__all__ = [
    "EdecLayer",
    "StreamState",
    "Event",
    "EventVolume",
    "WindowSpec",
    "build_event_volume",
    "initial_mask",
    "parse_events",
    "Network",
    "NetworkConfig",
    "TrainConfig",
    "build_network",
    "StreamSession",
    "bench",
    "open_session",
    "step",
]

__version__ = "0.1.0"
