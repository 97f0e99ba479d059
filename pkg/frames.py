"""
Frames Module - frame dumps and images
Binary position dumps (one file per frame), orthographic particle
rasterization, PGM images and space-time slices.

Frame dump layout (little endian): b"VMP1", u32 particle count, u32 frame
index, f32 frame_dt, then count * 3 f32 positions (x, y, z per particle).
"""

import glob
import logging
import os
import re
import struct
from dataclasses import dataclass, replace
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from mpm import SimConfig, Trajectory
from tensor3 import DomainError, ViscompmError

logger = logging.getLogger(__name__)

FRAME_MAGIC = b"VMP1"
FRAME_HEADER = struct.Struct("<4sIIf")
FRAME_PATTERN = "frame_%04d.bin"
_FRAME_NAME = re.compile(r"frame_(\d{4,})\.bin$")

AXES = {"x": 0, "y": 1, "z": 2}
# (horizontal, vertical) image axes when looking along each axis
IMAGE_PLANE = {"x": (1, 2), "y": (0, 2), "z": (0, 1)}
NEAR_INTENSITY = 255
FAR_INTENSITY = 55


class FrameFormatError(ViscompmError):
    def __init__(self, message: str, frame: Optional[int] = None):
        if frame is not None:
            message = f"frame {frame}: {message}"
        super().__init__(message)
        self.frame = frame


class FrameDump(NamedTuple):
    index: int
    frame_dt: float
    positions: NDArray[np.float32]


def encode_frame(positions, frame_index: int, frame_dt: float) -> bytes:
    pts = np.asarray(positions, dtype="<f4").reshape(-1, 3)
    return FRAME_HEADER.pack(FRAME_MAGIC, pts.shape[0], frame_index, frame_dt) + pts.tobytes()


def decode_frame(data: bytes, frame: Optional[int] = None) -> FrameDump:
    if len(data) < FRAME_HEADER.size:
        raise FrameFormatError("file is shorter than the frame header", frame)
    magic, count, index, frame_dt = FRAME_HEADER.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise FrameFormatError(f"bad magic {magic!r}", frame)
    expected = FRAME_HEADER.size + 12 * count
    if len(data) != expected:
        raise FrameFormatError(f"expected {expected} bytes for {count} particles, found {len(data)}", frame)
    positions = np.frombuffer(data, dtype="<f4", count=3 * count, offset=FRAME_HEADER.size).reshape(count, 3)
    return FrameDump(index, float(frame_dt), positions.astype(np.float32))


def write_frame(path: str, positions, frame_index: int, frame_dt: float) -> None:
    with open(path, "wb") as handle:
        handle.write(encode_frame(positions, frame_index, frame_dt))


def read_frame(path: str) -> FrameDump:
    with open(path, "rb") as handle:
        return decode_frame(handle.read())


def write_trajectory(directory: str, trajectory: Trajectory) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i in range(trajectory.frame_count):
        path = os.path.join(directory, FRAME_PATTERN % i)
        write_frame(path, trajectory.frames[i], i, trajectory.frame_dt)
        paths.append(path)
    logger.info("Wrote %d frame dumps to %s", len(paths), directory)
    return paths


def list_frames(directory: str) -> List[str]:
    paths = [p for p in glob.glob(os.path.join(directory, "frame_*.bin")) if _FRAME_NAME.search(p)]
    return sorted(paths, key=lambda p: int(_FRAME_NAME.search(p).group(1)))


def read_trajectory(directory: str) -> Trajectory:
    """
    Load frame_0000.bin, frame_0001.bin, ... as a Trajectory.

    Raises:
        FrameFormatError: naming the first frame that is missing, malformed,
        out of sequence, or disagrees with frame 0 on count or frame_dt
    """
    paths = list_frames(directory)
    if not paths:
        raise FrameFormatError(f"no frame dumps found in {directory}", 0)
    frames = []
    first: Optional[FrameDump] = None
    for i, path in enumerate(paths):
        if int(_FRAME_NAME.search(path).group(1)) != i:
            raise FrameFormatError(f"missing {FRAME_PATTERN % i}", i)
        with open(path, "rb") as handle:
            dump = decode_frame(handle.read(), i)
        if dump.index != i:
            raise FrameFormatError(f"header says frame {dump.index}", i)
        if first is None:
            first = dump
        elif dump.positions.shape[0] != first.positions.shape[0]:
            raise FrameFormatError(
                f"holds {dump.positions.shape[0]} particles, frame 0 holds {first.positions.shape[0]}", i)
        elif dump.frame_dt != first.frame_dt:
            raise FrameFormatError(f"frame_dt {dump.frame_dt} differs from frame 0 ({first.frame_dt})", i)
        frames.append(dump.positions)
    return Trajectory(frames=np.stack(frames).astype(np.float64), frame_dt=first.frame_dt)


@dataclass(frozen=True)
class ViewSpec:
    """Orthographic camera looking along +axis; lo/hi default to the whole grid."""
    axis: str = "y"
    width: int = 128
    height: int = 128
    splat: int = 1
    lo: Optional[Tuple[float, float, float]] = None
    hi: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise DomainError(f"view axis must be one of x, y, z; got {self.axis!r}.")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"image size must be positive, got {self.width}x{self.height}.")
        if self.splat not in (1, 3):
            raise DomainError(f"splat must be 1 or 3, got {self.splat}.")
        if (self.lo is None) != (self.hi is None):
            raise DomainError("view lo and hi must be given together.")
        if self.lo is not None:
            object.__setattr__(self, "lo", tuple(float(c) for c in self.lo))
            object.__setattr__(self, "hi", tuple(float(c) for c in self.hi))
            if any(h <= l for l, h in zip(self.lo, self.hi)):
                raise DomainError(f"view box {self.lo}..{self.hi} is empty.")

    def for_domain(self, config: SimConfig) -> "ViewSpec":
        if self.lo is not None:
            return self
        return replace(self, lo=(0.0, 0.0, 0.0), hi=tuple(n * config.dx for n in config.grid_dims))

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"axis": self.axis, "width": self.width, "height": self.height, "splat": self.splat}
        if self.lo is not None:
            data["lo"], data["hi"] = list(self.lo), list(self.hi)
        return data


def rasterize_frame(positions, view: ViewSpec) -> NDArray[np.uint8]:
    """
    Project particles along view.axis into a (height, width) grey image.
    Row 0 is the top of the view box. Brightness falls off with depth and the
    nearest particle wins each pixel; empty pixels are 0.
    """
    if view.lo is None:
        raise DomainError("rasterize_frame needs a view with explicit bounds; use ViewSpec.for_domain.")
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise FrameFormatError("cannot rasterize an empty frame")
    lo, hi = np.asarray(view.lo), np.asarray(view.hi)
    rel = (pts - lo) / (hi - lo)
    h_axis, v_axis = IMAGE_PLANE[view.axis]
    col = np.floor(rel[:, h_axis] * view.width).astype(np.int64)
    row = np.floor((1.0 - rel[:, v_axis]) * view.height).astype(np.int64)
    depth = np.clip(rel[:, AXES[view.axis]], 0.0, 1.0)
    intensity = np.rint(NEAR_INTENSITY - (NEAR_INTENSITY - FAR_INTENSITY) * depth).astype(np.uint8)

    image = np.zeros((view.height, view.width), dtype=np.uint8)
    reach = view.splat // 2
    for dr in range(-reach, reach + 1):
        for dc in range(-reach, reach + 1):
            r, c = row + dr, col + dc
            inside = (r >= 0) & (r < view.height) & (c >= 0) & (c < view.width)
            np.maximum.at(image, (r[inside], c[inside]), intensity[inside])
    return image


@dataclass(frozen=True)
class SliceSpec:
    view: ViewSpec
    row: int

    def __post_init__(self):
        if not (0 <= self.row < self.view.height):
            raise DomainError(f"slice row {self.row} is outside [0, {self.view.height}).")


def spacetime_slice(frames: Sequence, spec: SliceSpec) -> NDArray[np.uint8]:
    """One image row per frame stacked in time order, shape (T, width)."""
    if len(frames) == 0:
        raise FrameFormatError("space-time slice needs at least one frame")
    return np.stack([rasterize_frame(f, spec.view)[spec.row] for f in frames])


def encode_pgm(image) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2:
        raise DomainError(f"PGM images are 2-D, got shape {img.shape}.")
    img = np.clip(img, 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    return header + img.tobytes()


def write_pgm(path: str, image) -> None:
    with open(path, "wb") as handle:
        handle.write(encode_pgm(image))


def decode_pgm(data: bytes) -> NDArray[np.uint8]:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        match = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if match is None:
            raise FrameFormatError("truncated PGM header")
        tokens.append(match.group(2))
        pos = match.end()
    if tokens[0] != b"P5":
        raise FrameFormatError(f"not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FrameFormatError(f"only 8-bit PGM is supported, maxval {maxval}")
    pos += 1
    if len(data) - pos != width * height:
        raise FrameFormatError(f"PGM body holds {len(data) - pos} bytes, expected {width * height}")
    return np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(height, width).copy()


def read_pgm(path: str) -> NDArray[np.uint8]:
    with open(path, "rb") as handle:
        return decode_pgm(handle.read())
