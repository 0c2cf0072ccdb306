"""The two stream networks (video, audio) plus frame/window bookkeeping.

Video: 128x128 greyscale frames through conv(128 filters, 5x5) + ReLU +
maxpool + LRN, conv(256, 5x5) + ReLU + maxpool, affine to 512, dropout,
scalar head. Audio: one 60 ms window (2646 samples at 44.1 kHz) per frame
through the analogous 1-D stack (32 and 64 filters, kernel 20, stride 2).

The 40 ms window hop pins the frame clock at 25 fps. A ``scale`` knob
shrinks filter counts, feature width and the video frame edge
proportionally so the full pipeline runs at desk scale; scale 1.0 is the
configuration above.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Affine, Conv, Dropout, Lrn, MaxPool, NetworkModel, Relu
from .ops import ConvSpec, LrnSpec

SAMPLE_RATE = 44100
AUDIO_WINDOW = 2646  # 60 ms
AUDIO_HOP = 1764  # 40 ms
AUDIO_OVERLAP = AUDIO_WINDOW - AUDIO_HOP  # 882 samples = 20 ms
FRAME_RATE = 25  # frames per second implied by the 40 ms hop
VIDEO_FRAME_EDGE = 128
FEATURE_WIDTH = 512

_VIDEO_FILTERS = (128, 256)
_AUDIO_FILTERS = (32, 64)


@dataclass(frozen=True)
class FrameRecord:
    """One aligned observation: a video frame, its audio window, its rating."""

    index: int
    video: np.ndarray  # [H, W], values in [0, 1]
    audio: np.ndarray  # [AUDIO_WINDOW], values in [-1, 1]
    rating: float

    def validate(self) -> None:
        if self.video.ndim != 2:
            raise ValueError(f"frame {self.index}: video must be 2-D")
        if self.audio.shape != (AUDIO_WINDOW,):
            raise ValueError(
                f"frame {self.index}: audio window length {self.audio.shape}, "
                f"expected {AUDIO_WINDOW}"
            )
        if not -1.0 <= self.rating <= 1.0:
            raise ValueError(f"frame {self.index}: rating {self.rating} outside [-1, 1]")


def scaled(value: int, scale: float) -> int:
    return max(1, round(value * scale))


def video_layers(scale: float = 1.0, dropout_rate: float = 0.5) -> list:
    f1, f2 = (scaled(f, scale) for f in _VIDEO_FILTERS)
    width = scaled(FEATURE_WIDTH, scale)
    return [
        Conv(ConvSpec(1, f1, kernel=(5, 5), stride=(1, 1), padding=(0, 0))),
        Relu(),
        MaxPool(window=(2, 2), stride=(2, 2)),
        Lrn(LrnSpec()),
        Conv(ConvSpec(f1, f2, kernel=(5, 5), stride=(1, 1), padding=(0, 0))),
        Relu(),
        MaxPool(window=(2, 2), stride=(2, 2)),
        Affine(width),
        Dropout(dropout_rate),
        Affine(1),
    ]


def audio_layers(scale: float = 1.0, dropout_rate: float = 0.5) -> list:
    f1, f2 = (scaled(f, scale) for f in _AUDIO_FILTERS)
    width = scaled(FEATURE_WIDTH, scale)
    return [
        Conv(ConvSpec(1, f1, kernel=(20,), stride=(2,), padding=(0,))),
        Relu(),
        MaxPool(window=(2,), stride=(2,)),
        Lrn(LrnSpec()),
        Conv(ConvSpec(f1, f2, kernel=(20,), stride=(2,), padding=(0,))),
        Relu(),
        MaxPool(window=(2,), stride=(2,)),
        Affine(width),
        Dropout(dropout_rate),
        Affine(1),
    ]


FEATURE_LAYER_INDEX = 7  # the stage-3 affine in the lists above


def build_video_model(
    scale: float = 1.0,
    frame_edge: int | None = None,
    dropout_rate: float = 0.5,
    init_seed: int = 0,
    dtype=np.float32,
) -> NetworkModel:
    edge = scaled(VIDEO_FRAME_EDGE, scale) if frame_edge is None else frame_edge
    return NetworkModel(
        video_layers(scale, dropout_rate),
        input_shape=(1, edge, edge),
        feature_layer_index=FEATURE_LAYER_INDEX,
        init_seed=init_seed,
        dtype=dtype,
    )


def build_audio_model(
    scale: float = 1.0,
    dropout_rate: float = 0.5,
    init_seed: int = 1,
    dtype=np.float32,
) -> NetworkModel:
    return NetworkModel(
        audio_layers(scale, dropout_rate),
        input_shape=(1, AUDIO_WINDOW),
        feature_layer_index=FEATURE_LAYER_INDEX,
        init_seed=init_seed,
        dtype=dtype,
    )


def build_stream_models(
    scale: float = 1.0,
    frame_edge: int | None = None,
    dropout_rate: float = 0.5,
    seed: int = 0,
    dtype=np.float32,
) -> tuple[NetworkModel, NetworkModel]:
    """Video and audio models sharing one seed stream (offset per stream)."""
    video = build_video_model(scale, frame_edge, dropout_rate, init_seed=seed, dtype=dtype)
    audio = build_audio_model(scale, dropout_rate, init_seed=seed + 1, dtype=dtype)
    return video, audio


def stage3_flat_size(model: NetworkModel) -> int:
    """Flattened width entering the feature (stage-3) affine layer."""
    idx = model.feature_layer_index
    before = model.input_shape if idx == 0 else model.shapes[idx - 1]
    return int(np.prod(before))


def window_audio(samples: np.ndarray, frame_count: int) -> np.ndarray:
    """Slice a 44.1 kHz signal into per-frame windows.

    Window i covers samples [i*1764, i*1764 + 2646): 60 ms long, hopping
    40 ms, so adjacent windows share exactly 882 samples (20 ms). A trailing
    shortfall is zero-padded.
    """
    samples = np.asarray(samples)
    if samples.ndim != 1 or samples.size == 0:
        raise ValueError("audio input must be a nonempty 1-D sample sequence")
    if frame_count < 0:
        raise ValueError("frame_count must be non-negative")
    out = np.zeros((frame_count, AUDIO_WINDOW), dtype=np.float32)
    for i in range(frame_count):
        start = i * AUDIO_HOP
        chunk = samples[start : start + AUDIO_WINDOW]
        out[i, : len(chunk)] = chunk
    return out


def concat_features(video_feats: np.ndarray, audio_feats: np.ndarray) -> np.ndarray:
    """Per-frame concatenation: video columns first, audio columns after."""
    video_feats = np.asarray(video_feats)
    audio_feats = np.asarray(audio_feats)
    if video_feats.ndim != 2 or audio_feats.ndim != 2:
        raise ValueError("feature blocks must be 2-D [frames, width]")
    if video_feats.shape[0] != audio_feats.shape[0]:
        raise ValueError(
            f"frame count mismatch: video {video_feats.shape[0]} vs audio "
            f"{audio_feats.shape[0]}"
        )
    return np.concatenate([video_feats, audio_feats], axis=1)
