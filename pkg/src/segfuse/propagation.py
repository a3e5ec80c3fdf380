"""Temporal propagation contract and deterministic reference implementations.

A propagator owns a per-id memory of segmented frames and answers queries:
"segment frame t with the objects I know about". Three implementations are
provided: identity (masks never move), motion-oracle (moves masks along
ground-truth motion scripts), and an external child process speaking
newline-delimited JSON.
"""

from __future__ import annotations

import json
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .masks import BinaryMask, Segment, Segmentation, render_non_overlapping

__all__ = [
    "Shape",
    "MotionScript",
    "rasterize_shape",
    "Propagator",
    "IdentityPropagator",
    "MotionOraclePropagator",
    "ExternalPropagator",
    "align_one",
]


@dataclass(frozen=True)
class Shape:
    """Axis-aligned shape descriptor anchored at its center."""

    kind: str  # "rect" | "disk"
    size: tuple[int, ...]  # rect: (w, h); disk: (radius,)

    def __post_init__(self):
        if self.kind not in ("rect", "disk"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))

    @property
    def extent(self) -> tuple[int, int]:
        """(half_width, half_height) bounding extent from the center."""
        if self.kind == "rect":
            w, h = self.size
            return w // 2, h // 2
        r = self.size[0]
        return r, r


def rasterize_shape(shape: Shape, center: tuple[int, int],
                    width: int, height: int, scale: float = 1.0) -> np.ndarray:
    """Stamp a shape at an integer center onto a (height, width) boolean canvas."""
    cx, cy = int(center[0]), int(center[1])
    canvas = np.zeros((height, width), dtype=bool)
    if shape.kind == "rect":
        w = max(1, int(round(shape.size[0] * scale)))
        h = max(1, int(round(shape.size[1] * scale)))
        x0, y0 = cx - w // 2, cy - h // 2
        xa, ya = max(0, x0), max(0, y0)
        xb, yb = min(width, x0 + w), min(height, y0 + h)
        if xa < xb and ya < yb:
            canvas[ya:yb, xa:xb] = True
    else:
        r = max(1, int(round(shape.size[0] * scale)))
        yy, xx = np.ogrid[:height, :width]
        canvas[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = True
    return canvas


@dataclass(frozen=True)
class MotionScript:
    """Ground-truth trajectory of one object: shape + per-frame center positions.

    Positions are defined for every frame of the scene; the object is only
    visible on frames in [birth, death).
    """

    shape: Shape
    positions: tuple[tuple[int, int], ...]
    birth: int = 0
    death: Optional[int] = None  # exclusive; None = last frame + 1
    class_label: Optional[int] = None
    scale: Optional[tuple[float, ...]] = None  # per-frame; None = constant 1.0

    def __post_init__(self):
        object.__setattr__(self, "positions",
                           tuple((int(x), int(y)) for x, y in self.positions))
        if self.scale is not None and len(self.scale) != len(self.positions):
            raise ValueError("scale must cover every frame")

    @property
    def num_frames(self) -> int:
        return len(self.positions)

    def alive(self, t: int) -> bool:
        end = self.num_frames if self.death is None else self.death
        return self.birth <= t < end and 0 <= t < self.num_frames

    def position(self, t: int) -> tuple[int, int]:
        return self.positions[t]

    def delta(self, src: int, dst: int) -> tuple[int, int]:
        (x0, y0), (x1, y1) = self.positions[src], self.positions[dst]
        return x1 - x0, y1 - y0

    def rasterize(self, t: int, width: int, height: int) -> np.ndarray:
        s = 1.0 if self.scale is None else self.scale[t]
        return rasterize_shape(self.shape, self.positions[t], width, height, s)


def _translate(mask: BinaryMask, dx: int, dy: int) -> BinaryMask:
    """Shift a mask by integer pixels, clipping at the canvas border."""
    if dx == 0 and dy == 0:
        return mask
    arr = mask.to_array()
    h, w = arr.shape
    out = np.zeros_like(arr)
    xs0, xs1 = max(0, -dx), min(w, w - dx)
    ys0, ys1 = max(0, -dy), min(h, h - dy)
    if xs0 < xs1 and ys0 < ys1:
        out[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx] = arr[ys0:ys1, xs0:xs1]
    return BinaryMask.from_array(out)


class Propagator:
    """Stateful per-id memory with query-by-frame; single-owner instances."""

    def update(self, frame_index: int, segmentation: Segmentation) -> None:
        raise NotImplementedError

    def query(self, frame_index: int) -> Segmentation:
        """Segment the query frame with one output segment per active id.

        Vanished objects are emitted with empty masks; output masks are
        pairwise disjoint. Raises if no update was ever applied.
        """
        raise NotImplementedError

    def remove(self, ids: Sequence[int]) -> None:
        raise NotImplementedError

    def reset(self) -> None:
        raise NotImplementedError

    def spawn(self) -> "Propagator":
        """A fresh propagator of the same kind with empty memory."""
        raise NotImplementedError

    def active_ids(self) -> tuple[int, ...]:
        raise NotImplementedError


@dataclass
class _MemoryEntry:
    frame_index: int
    segment: Segment


class _StoredMemoryPropagator(Propagator):
    """Shared bookkeeping: keeps the most recent segment per id."""

    def __init__(self):
        self._memory: dict[int, _MemoryEntry] = {}
        self._updated = False

    def update(self, frame_index: int, segmentation: Segmentation) -> None:
        self._updated = True
        for seg in segmentation.segments:
            self._memory[seg.segment_id] = _MemoryEntry(frame_index, seg)

    def remove(self, ids: Sequence[int]) -> None:
        for i in ids:
            self._memory.pop(i, None)

    def reset(self) -> None:
        self._memory.clear()
        self._updated = False

    def active_ids(self) -> tuple[int, ...]:
        return tuple(self._memory.keys())

    def _require_memory(self) -> None:
        if not self._updated:
            raise RuntimeError("propagator queried before any memory update")

    def _move(self, entry: _MemoryEntry, frame_index: int) -> BinaryMask:
        raise NotImplementedError

    def query(self, frame_index: int) -> Segmentation:
        self._require_memory()
        moved = [entry.segment.with_mask(self._move(entry, frame_index))
                 for entry in self._memory.values()]
        return render_non_overlapping(moved, frame_index, drop_empty=False)


class IdentityPropagator(_StoredMemoryPropagator):
    """Masks never move; queries replay the most recent mask per id."""

    def _move(self, entry: _MemoryEntry, frame_index: int) -> BinaryMask:
        return entry.segment.mask

    def spawn(self) -> "IdentityPropagator":
        return IdentityPropagator()


class MotionOraclePropagator(_StoredMemoryPropagator):
    """Moves each memorized mask along the motion script of the ground-truth
    object it overlaps most at its memory frame.

    Segments overlapping no scripted object ride along unchanged (the oracle
    has no motion information for them). Only translation is applied: scripts
    with varying scale are rejected at construction.
    """

    def __init__(self, scripts: dict[int, MotionScript],
                 width: int, height: int):
        super().__init__()
        for s in scripts.values():
            if s.scale is not None and len(set(s.scale)) > 1:
                raise ValueError("motion oracle only supports constant-scale scripts")
        self._scripts = dict(scripts)
        self._width = width
        self._height = height
        self._binding: dict[int, Optional[int]] = {}

    def _bind(self, seg: Segment, frame_index: int) -> Optional[int]:
        mask = seg.mask.to_array()
        best, best_inter = None, 0
        for oid in sorted(self._scripts):
            script = self._scripts[oid]
            if not script.alive(frame_index):
                continue
            gt = script.rasterize(frame_index, self._width, self._height)
            inter = int(np.count_nonzero(mask & gt))
            if inter > best_inter:
                best, best_inter = oid, inter
        return best

    def update(self, frame_index: int, segmentation: Segmentation) -> None:
        super().update(frame_index, segmentation)
        for seg in segmentation.segments:
            self._binding[seg.segment_id] = self._bind(seg, frame_index)

    def remove(self, ids: Sequence[int]) -> None:
        super().remove(ids)
        for i in ids:
            self._binding.pop(i, None)

    def reset(self) -> None:
        super().reset()
        self._binding.clear()

    def _move(self, entry: _MemoryEntry, frame_index: int) -> BinaryMask:
        oid = self._binding.get(entry.segment.segment_id)
        if oid is None:
            return entry.segment.mask
        script = self._scripts[oid]
        if not script.alive(frame_index):
            return BinaryMask.empty(entry.segment.mask.width, entry.segment.mask.height)
        dx, dy = script.delta(entry.frame_index, frame_index)
        return _translate(entry.segment.mask, dx, dy)

    def spawn(self) -> "MotionOraclePropagator":
        return MotionOraclePropagator(self._scripts, self._width, self._height)


def _segment_to_wire(seg: Segment) -> dict:
    return {"id": seg.segment_id, "rle": list(seg.mask.runs),
            "w": seg.mask.width, "h": seg.mask.height}


def _segment_from_wire(obj: dict) -> Segment:
    mask = BinaryMask(width=obj["w"], height=obj["h"], runs=tuple(obj["rle"]))
    return Segment(segment_id=obj["id"], mask=mask)


class ExternalPropagator(Propagator):
    """Propagation delegated to a child process over stdin/stdout.

    Protocol: one JSON object per line. Requests are
    ``{"cmd": "update"|"query", "frame": int, "segments": [...]}`` with
    segments as ``{"id": int, "rle": [int, ...], "w": int, "h": int}``;
    the reply to "query" carries the same segment schema, and every request
    is answered in order. Active-id bookkeeping (removal, label carry-over)
    stays on this side of the pipe.
    """

    def __init__(self, command: str):
        self._command = command
        self._proc = subprocess.Popen(
            shlex.split(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, bufsize=1)
        self._active: dict[int, Segment] = {}
        self._dims: Optional[tuple[int, int]] = None
        self._updated = False

    def _roundtrip(self, request: dict) -> dict:
        assert self._proc.stdin is not None and self._proc.stdout is not None
        self._proc.stdin.write(json.dumps(request) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError(f"external propagator {self._command!r} closed its output")
        return json.loads(line)

    def update(self, frame_index: int, segmentation: Segmentation) -> None:
        self._updated = True
        for seg in segmentation.segments:
            self._active[seg.segment_id] = seg
            self._dims = (seg.mask.width, seg.mask.height)
        self._roundtrip({"cmd": "update", "frame": frame_index,
                         "segments": [_segment_to_wire(s) for s in segmentation.segments]})

    def query(self, frame_index: int) -> Segmentation:
        if not self._updated:
            raise RuntimeError("propagator queried before any memory update")
        reply = self._roundtrip({"cmd": "query", "frame": frame_index, "segments": []})
        returned = {}
        for obj in reply.get("segments", []):
            seg = _segment_from_wire(obj)
            if seg.segment_id in self._active:
                prior = self._active[seg.segment_id]
                returned[seg.segment_id] = Segment(
                    seg.segment_id, seg.mask, prior.class_label, prior.confidence)
        out = []
        for sid, prior in self._active.items():
            if sid in returned:
                out.append(returned[sid])
            elif self._dims is not None:
                out.append(prior.with_mask(BinaryMask.empty(*self._dims)))
        return render_non_overlapping(out, frame_index, drop_empty=False)

    def remove(self, ids: Sequence[int]) -> None:
        for i in ids:
            self._active.pop(i, None)

    def reset(self) -> None:
        self.close()
        self.__init__(self._command)

    def spawn(self) -> "ExternalPropagator":
        return ExternalPropagator(self._command)

    def active_ids(self) -> tuple[int, ...]:
        return tuple(self._active.keys())

    def close(self) -> None:
        if self._proc.poll() is None:
            if self._proc.stdin is not None:
                self._proc.stdin.close()
            self._proc.terminate()
            self._proc.wait(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def align_one(source: tuple[int, Segmentation], target_frame: int,
              propagator: Propagator) -> Segmentation:
    """Align one frame's segmentation to a target frame.

    Uses a throwaway propagator whose memory holds only the source pair, so
    the caller's global memory is never touched. Aligning a frame to itself
    is exact passthrough.
    """
    source_frame, segmentation = source
    if source_frame == target_frame:
        return segmentation.with_frame_index(target_frame)
    scratch = propagator.spawn()
    scratch.update(source_frame, segmentation)
    return scratch.query(target_frame)
