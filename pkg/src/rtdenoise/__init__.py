"""Causal waveform-domain speech enhancement with a streaming engine."""
from .model import DemucsConfig, drywet, forward, frame_length, init_params, valid_length
from .objective import LossReport, StftConfig, total_loss
from .stream import DemucsStreamer, StreamReport, bench, frame_geometry, stream_init

__version__ = "0.1.0"

__all__ = [
    "DemucsConfig", "DemucsStreamer", "LossReport", "StftConfig", "StreamReport", "bench", "drywet",
    "forward", "frame_geometry", "frame_length", "init_params", "stream_init", "total_loss",
    "valid_length",
]
