"""Gaze-export parsing, fixation frame selection, and thumbnail cropping.

Input is a directory of pre-extracted scene-video frames (``frame_%06d.png``
at a declared fps) plus two comma-separated exports: gaze samples
(``t_ms,x_px,y_px``) and fixation events (``id,start_ms,end_ms,cx_px,cy_px``
with optional ``class`` and ``revisit`` columns). Video decoding itself is out
of scope; extract frames beforehand, e.g.
``ffmpeg -i replay.mp4 -vsync 0 frames/frame_%06d.png``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .geometry import VoiError
from .images import Image, crop, place_crop_window


class GazeParseError(VoiError):
    def __init__(self, message, line_no=None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class GazeSample:
    t_ms: float
    x_px: float
    y_px: float


@dataclass(frozen=True)
class FixationEvent:
    id: int
    start_ms: float
    end_ms: float
    cx_px: float
    cy_px: float
    class_name: str | None = None  # ground-truth exports only
    revisit: bool = False  # QA target revisits


@dataclass(frozen=True)
class FrameIndex:
    fps: float = 24.0
    frame_count: int | None = None

    def __post_init__(self):
        if self.fps <= 0:
            raise VoiError("fps must be positive")

    def timestamp_ms(self, i: int) -> float:
        return 1000.0 * i / self.fps


@dataclass
class Thumbnail:
    image: Image
    fixation_id: int
    frame_index: int
    dx: int = 0  # marker offset from thumbnail center after any border shift
    dy: int = 0


def _split_header(line, required, line_no=1):
    cols = [c.strip() for c in line.split(",")]
    for name in required:
        if name not in cols:
            raise GazeParseError(f"missing column '{name}'", line_no)
    return {name: cols.index(name) for name in cols}


def parse_samples_csv(text: str):
    """Gaze samples sorted by time; timestamps must be non-decreasing."""
    lines = text.splitlines()
    if not lines:
        raise GazeParseError("empty samples document", 1)
    idx = _split_header(lines[0], ("t_ms", "x_px", "y_px"))
    samples = []
    last_t = -math.inf
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            t = float(parts[idx["t_ms"]])
            x = float(parts[idx["x_px"]])
            y = float(parts[idx["y_px"]])
        except (ValueError, IndexError) as exc:
            raise GazeParseError(f"bad sample row: {exc}", line_no) from None
        if t < last_t:
            raise GazeParseError(f"non-monotone timestamp {t}", line_no)
        last_t = t
        samples.append(GazeSample(t, x, y))
    return samples


def parse_events_csv(text: str):
    """Fixation events sorted by start; overlapping events are rejected."""
    lines = text.splitlines()
    if not lines:
        raise GazeParseError("empty events document", 1)
    idx = _split_header(lines[0], ("id", "start_ms", "end_ms", "cx_px", "cy_px"))
    events = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            ev = FixationEvent(
                id=int(parts[idx["id"]]),
                start_ms=float(parts[idx["start_ms"]]),
                end_ms=float(parts[idx["end_ms"]]),
                cx_px=float(parts[idx["cx_px"]]),
                cy_px=float(parts[idx["cy_px"]]),
                class_name=parts[idx["class"]].strip() if "class" in idx else None,
                revisit=bool(int(parts[idx["revisit"]])) if "revisit" in idx else False,
            )
        except (ValueError, IndexError) as exc:
            raise GazeParseError(f"bad event row: {exc}", line_no) from None
        if ev.end_ms < ev.start_ms:
            raise GazeParseError(f"event {ev.id} ends before it starts", line_no)
        events.append((line_no, ev))
    events.sort(key=lambda pair: pair[1].start_ms)
    for (_, a), (ln_b, b) in zip(events, events[1:]):
        if b.start_ms < a.end_ms:
            raise GazeParseError(f"event {b.id} overlaps event {a.id}", ln_b)
    return [ev for _, ev in events]


def parse_gaze_export(samples_text: str | None, events_text: str):
    """Parse a gaze export; the samples document is optional (cropping then
    falls back to fixation centroids)."""
    samples = parse_samples_csv(samples_text) if samples_text else []
    events = parse_events_csv(events_text)
    return samples, events


def frames_for_fixation(ev: FixationEvent, idx: FrameIndex):
    """All frame indices whose timestamp falls inside [start, end], both ends
    inclusive. May be empty for fixations shorter than a frame interval."""
    # Seed from arithmetic, then correct against the exact inclusive
    # comparisons on 1000*i/fps so float rounding cannot flip a boundary.
    first = max(0, int(math.ceil(ev.start_ms * idx.fps / 1000.0)) - 2)
    while idx.timestamp_ms(first) < ev.start_ms:
        first += 1
    last = int(math.floor(ev.end_ms * idx.fps / 1000.0)) + 2
    if idx.frame_count is not None:
        last = min(last, idx.frame_count - 1)
    while last >= 0 and idx.timestamp_ms(last) > ev.end_ms:
        last -= 1
    return list(range(first, last + 1))


def crop_thumbnail(frame: Image, cx: int, cy: int, side_px: int = 224, fixation_id: int = -1, frame_index: int = -1) -> Thumbnail:
    """side*side crop centered at (cx, cy); near borders the window shifts the
    minimal amount to stay inside the frame and the residual marker offset is
    recorded. No padding pixels are ever synthesized."""
    left, top, dx, dy = place_crop_window(int(cx), int(cy), side_px, frame.width, frame.height)
    return Thumbnail(
        image=crop(frame, left, top, side_px),
        fixation_id=fixation_id,
        frame_index=frame_index,
        dx=dx,
        dy=dy,
    )


def nearest_sample(samples, t_ms):
    """Sample closest in time to t_ms; exact ties pick the earlier sample."""
    best = None
    best_d = math.inf
    for s in samples:  # samples sorted; early exit once distance grows
        d = abs(s.t_ms - t_ms)
        if d < best_d:
            best, best_d = s, d
        elif s.t_ms > t_ms and d > best_d:
            break
    return best


def frame_path(frames_dir, i: int) -> Path:
    return Path(frames_dir) / f"frame_{i:06d}.png"


def fixation_thumbnails(frames_dir, samples, events, idx: FrameIndex, side_px: int = 224):
    """Thumbnails for every fixation-relevant frame, grouped by fixation.

    Each selected frame is cropped around the gaze sample nearest in time to
    the frame timestamp; without samples the fixation centroid is used.
    Output order is (fixation order, frame index), so reruns are identical.
    """
    groups = []
    for ev in events:
        thumbs = []
        for i in frames_for_fixation(ev, idx):
            path = frame_path(frames_dir, i)
            if not path.exists():
                raise VoiError(f"missing frame file {path}")
            frame = Image.load_png(path)
            t = idx.timestamp_ms(i)
            s = nearest_sample(samples, t) if samples else None
            cx, cy = (s.x_px, s.y_px) if s is not None else (ev.cx_px, ev.cy_px)
            cx = min(max(int(round(cx)), 0), frame.width - 1)
            cy = min(max(int(round(cy)), 0), frame.height - 1)
            thumbs.append(crop_thumbnail(frame, cx, cy, side_px, fixation_id=ev.id, frame_index=i))
        groups.append((ev, thumbs))
    return groups


def retention_ratio(side_px: int, k_width: int, k_height: int) -> float:
    """Fraction of frame pixels kept by a side*side thumbnail crop."""
    return side_px * side_px / float(k_width * k_height)
