"""Binary masks, run-length encoding, and the frame-level segmentation container.

Masks are stored as uncompressed row-major RLE (alternating background /
foreground run lengths, first run may be zero) with a cached dense boolean
view for pixel arithmetic. All values are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "BinaryMask",
    "Segment",
    "Segmentation",
    "area",
    "iou",
    "iou_exact",
    "union",
    "intersection",
    "render_non_overlapping",
]


@dataclass(frozen=True)
class BinaryMask:
    """One object's pixel support on a frame, run-length encoded.

    ``runs`` alternates background/foreground run lengths in row-major order.
    Canonical form: no zero-length interior run; the first run is 0 only when
    the mask starts with foreground; run lengths sum to ``width * height``.
    """

    width: int
    height: int
    runs: tuple[int, ...]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"mask dimensions must be positive, got {self.width}x{self.height}")
        runs = tuple(int(r) for r in self.runs)
        object.__setattr__(self, "runs", runs)
        if sum(runs) != self.width * self.height:
            raise ValueError(
                f"run lengths sum to {sum(runs)}, expected {self.width * self.height}")
        if any(r < 0 for r in runs):
            raise ValueError("negative run length")
        if any(r == 0 for r in runs[1:]):
            raise ValueError("zero-length interior run (non-canonical RLE)")
        if runs and runs[-1] == 0 and len(runs) > 1:
            raise ValueError("zero-length trailing run (non-canonical RLE)")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BinaryMask":
        """Encode a 2D boolean (or 0/1) array into canonical RLE."""
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2D array, got shape {arr.shape}")
        flat = arr.astype(bool).ravel()
        if flat.size == 0:
            raise ValueError("empty array")
        # boundaries between maximal constant runs
        change = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate(([0], change, [flat.size]))
        runs = np.diff(bounds)
        if flat[0]:
            runs = np.concatenate(([0], runs))
        h, w = arr.shape
        return cls(width=int(w), height=int(h), runs=tuple(int(r) for r in runs))

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(width=width, height=height, runs=(width * height,))

    @classmethod
    def full(cls, width: int, height: int) -> "BinaryMask":
        return cls(width=width, height=height, runs=(0, width * height))

    @cached_property
    def _dense(self) -> np.ndarray:
        values = np.zeros(len(self.runs), dtype=bool)
        values[1::2] = True
        arr = np.repeat(values, self.runs).reshape(self.height, self.width)
        arr.setflags(write=False)
        return arr

    def to_array(self) -> np.ndarray:
        """Dense read-only boolean view, shape (height, width)."""
        return self._dense

    @cached_property
    def area(self) -> int:
        return int(sum(self.runs[1::2]))

    def is_empty(self) -> bool:
        return self.area == 0

    def same_shape(self, other: "BinaryMask") -> bool:
        return self.width == other.width and self.height == other.height


def _check_shapes(a: BinaryMask, b: BinaryMask) -> None:
    if not a.same_shape(b):
        raise ValueError(
            f"mask dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}")


def area(m: BinaryMask) -> int:
    """Number of foreground pixels."""
    return m.area


def iou_exact(a: BinaryMask, b: BinaryMask) -> tuple[int, int]:
    """Intersection and union pixel counts as exact integers."""
    _check_shapes(a, b)
    inter = int(np.count_nonzero(a.to_array() & b.to_array()))
    return inter, a.area + b.area - inter


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection-over-union; 0.0 when both masks are empty."""
    inter, uni = iou_exact(a, b)
    if uni == 0:
        return 0.0
    return inter / uni


def union(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _check_shapes(a, b)
    return BinaryMask.from_array(a.to_array() | b.to_array())


def intersection(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _check_shapes(a, b)
    return BinaryMask.from_array(a.to_array() & b.to_array())


@dataclass(frozen=True)
class Segment:
    """A labeled mask within one frame. ``segment_id`` is an opaque integer."""

    segment_id: int
    mask: BinaryMask
    class_label: Optional[int] = None
    confidence: Optional[float] = None

    def __post_init__(self):
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def with_mask(self, mask: BinaryMask) -> "Segment":
        return Segment(self.segment_id, mask, self.class_label, self.confidence)

    def with_id(self, segment_id: int) -> "Segment":
        return Segment(segment_id, self.mask, self.class_label, self.confidence)


@dataclass(frozen=True)
class Segmentation:
    """A frame's set of mutually disjoint labeled segments."""

    frame_index: int
    segments: tuple[Segment, ...]
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.validate:
            return
        segs = self.segments
        ids = [s.segment_id for s in segs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate segment ids in frame {self.frame_index}: {ids}")
        if segs:
            w, h = segs[0].mask.width, segs[0].mask.height
            for s in segs[1:]:
                if s.mask.width != w or s.mask.height != h:
                    raise ValueError("segments have mismatched mask dimensions")
            occupied = np.zeros((h, w), dtype=bool)
            for s in segs:
                m = s.mask.to_array()
                if np.any(occupied & m):
                    raise ValueError(
                        f"overlapping segments in frame {self.frame_index} "
                        f"(segment {s.segment_id} collides)")
                occupied |= m

    @property
    def dims(self) -> Optional[tuple[int, int]]:
        """(width, height) or None for an empty frame."""
        if not self.segments:
            return None
        m = self.segments[0].mask
        return m.width, m.height

    def ids(self) -> tuple[int, ...]:
        return tuple(s.segment_id for s in self.segments)

    def get(self, segment_id: int) -> Segment:
        for s in self.segments:
            if s.segment_id == segment_id:
                return s
        raise KeyError(segment_id)

    def with_frame_index(self, frame_index: int) -> "Segmentation":
        return Segmentation(frame_index, self.segments, validate=False)

    def drop_empty(self) -> "Segmentation":
        kept = tuple(s for s in self.segments if not s.mask.is_empty())
        return Segmentation(self.frame_index, kept, validate=False)

    def id_map(self) -> np.ndarray:
        """Dense int32 map of segment ids, 0 where background."""
        if not self.segments:
            raise ValueError("id_map of an empty segmentation needs explicit dims")
        w, h = self.dims
        canvas = np.zeros((h, w), dtype=np.int32)
        for s in self.segments:
            canvas[s.mask.to_array()] = s.segment_id
        return canvas

    @classmethod
    def empty(cls, frame_index: int) -> "Segmentation":
        return cls(frame_index, (), validate=False)


def render_non_overlapping(
    segments: Iterable[Segment],
    frame_index: int,
    *,
    drop_empty: bool = True,
) -> Segmentation:
    """Resolve overlaps by painting in descending area order (smaller wins).

    Later paints overwrite earlier ones, so smaller segments keep their pixels.
    Area ties: the lower segment_id is painted later and wins the contested
    pixels. Output masks are subsets of their inputs; listing order follows
    the input order. With ``drop_empty`` (the default) segments erased to
    nothing are removed; propagators keep them to preserve id bookkeeping.
    """
    segs = list(segments)
    ids = [s.segment_id for s in segs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate segment ids: {ids}")
    if not segs:
        return Segmentation(frame_index, (), validate=False)
    w, h = segs[0].mask.width, segs[0].mask.height
    for s in segs[1:]:
        if s.mask.width != w or s.mask.height != h:
            raise ValueError("segments have mismatched mask dimensions")

    paint_order = sorted(range(len(segs)),
                         key=lambda i: (-segs[i].mask.area, -segs[i].segment_id))
    canvas = np.zeros((h, w), dtype=np.int32)
    for i in paint_order:
        canvas[segs[i].mask.to_array()] = i + 1

    out = []
    for i, s in enumerate(segs):
        kept = canvas == i + 1
        if drop_empty and not kept.any():
            continue
        out.append(s.with_mask(BinaryMask.from_array(kept)))
    return Segmentation(frame_index, tuple(out), validate=False)
