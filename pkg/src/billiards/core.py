"""Domain types, validation and line-delimited layout I/O."""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

COORD_DECIMALS = 2


class LayoutFormatError(ValueError):
    """Raised by :func:`parse_layouts`; ``problems`` holds ``(line_no, message)`` pairs."""

    def __init__(self, problems: Sequence[Tuple[int, str]]):
        self.problems = list(problems)
        text = "; ".join(f"line {ln}: {msg}" for ln, msg in self.problems[:20])
        if len(self.problems) > 20:
            text += f"; ... ({len(self.problems) - 20} more)"
        super().__init__(text)


@dataclass(frozen=True)
class TableGeometry:
    length: float = 200.0
    width: float = 100.0
    ball_radius: float = 2.25

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("table length and width must be positive")
        if not (0 < self.ball_radius < self.width / 4):
            raise ValueError("ball_radius must lie in (0, width/4)")

    @property
    def pockets(self) -> np.ndarray:
        """Pocket centres, row ``j-1`` is pocket ``j`` (clockwise from bottom-left)."""
        L, W = self.length, self.width
        return np.array(
            [[0.0, 0.0], [0.0, W], [L / 2, W], [L, W], [L, 0.0], [L / 2, 0.0]],
            dtype=np.float64,
        )

    def pocket(self, index: int) -> Tuple[float, float]:
        if not 1 <= index <= 6:
            raise ValueError(f"pocket index must be in 1..6, got {index}")
        x, y = self.pockets[index - 1]
        return float(x), float(y)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.length, self.width)

    def to_dict(self) -> dict:
        return {"length": self.length, "width": self.width, "ball_radius": self.ball_radius}


@dataclass(frozen=True)
class GameSpec:
    """``n`` is the total ball count including the cue ball (10 for 9-ball)."""

    n: int = 10

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("a game needs at least the cue ball and one object ball")


@dataclass(frozen=True)
class Ball:
    number: int
    x: float
    y: float


@dataclass(frozen=True)
class GameLabels:
    clear: Optional[bool] = None
    win: Optional[bool] = None
    potted: Optional[int] = None

    def __post_init__(self):
        if self.clear and self.win is False:
            raise ValueError("clear implies win")
        if self.potted is not None and not 0 <= self.potted <= 9:
            raise ValueError("potted must be in 0..9")

    def to_dict(self) -> dict:
        return {k: v for k, v in (("clear", self.clear), ("win", self.win), ("potted", self.potted)) if v is not None}


@dataclass(frozen=True)
class Layout:
    id: str
    balls: Tuple[Ball, ...]
    labels: Optional[GameLabels] = None
    remarks: Optional[str] = None
    video_url: Optional[str] = None

    def canonical(self) -> "Layout":
        ordered = tuple(sorted(self.balls, key=lambda b: b.number))
        if ordered == self.balls:
            return self
        return replace(self, balls=ordered)

    @property
    def numbers(self) -> Tuple[int, ...]:
        return tuple(b.number for b in self.balls)

    @property
    def missing(self) -> Tuple[int, ...]:
        """Object-ball numbers absent from the layout (the break pattern), for 9-ball."""
        present = set(self.numbers)
        return tuple(k for k in range(1, 10) if k not in present)

    def ball(self, number: int) -> Ball:
        for b in self.balls:
            if b.number == number:
                return b
        raise KeyError(f"ball {number} not in layout {self.id}")

    def points(self) -> np.ndarray:
        """Locations in canonical order (cue first, then ascending numbers)."""
        return np.array([[b.x, b.y] for b in self.canonical().balls], dtype=np.float64).reshape(-1, 2)


# --------------------------------------------------------------------------- validation


def validate_layout(layout: Layout, geom: TableGeometry = TableGeometry(), spec: Optional[GameSpec] = None) -> List[str]:
    """Return every invariant violation; an empty list means the layout is valid."""
    problems: List[str] = []
    seen = set()
    for b in layout.balls:
        if b.number in seen:
            problems.append(f"duplicate ball number {b.number}")
        seen.add(b.number)
        max_number = (spec.n - 1) if spec is not None else 9
        if not 0 <= b.number <= max_number:
            problems.append(f"ball number {b.number} outside 0..{max_number}")
        if not (math.isfinite(b.x) and math.isfinite(b.y)):
            problems.append(f"ball {b.number}: non-finite coordinate")
        elif not (0.0 <= b.x <= geom.length and 0.0 <= b.y <= geom.width):
            problems.append(f"ball {b.number}: coordinate out of bounds ({b.x}, {b.y})")
    if 0 not in seen:
        problems.append("missing cue ball")
    min_sep = 2.0 * geom.ball_radius
    balls = layout.balls
    for i in range(len(balls)):
        for j in range(i + 1, len(balls)):
            d = math.hypot(balls[i].x - balls[j].x, balls[i].y - balls[j].y)
            if d < min_sep:
                problems.append(
                    f"overlap between balls {balls[i].number} and {balls[j].number} (distance {d:.3f} < {min_sep:.3f})"
                )
    return problems


def is_valid(layout: Layout, geom: TableGeometry = TableGeometry()) -> bool:
    return not validate_layout(layout, geom)


# --------------------------------------------------------------------------- I/O


def _round(v: float) -> float:
    return round(float(v), COORD_DECIMALS)


def layout_to_record(layout: Layout) -> dict:
    rec = {
        "id": layout.id,
        "balls": [{"num": b.number, "x": _round(b.x), "y": _round(b.y)} for b in layout.canonical().balls],
    }
    if layout.labels is not None:
        rec["labels"] = layout.labels.to_dict()
    if layout.remarks is not None:
        rec["remarks"] = layout.remarks
    if layout.video_url is not None:
        rec["video_url"] = layout.video_url
    return rec


def dumps_layouts(layouts: Iterable[Layout]) -> str:
    return "".join(json.dumps(layout_to_record(l), separators=(",", ":"), ensure_ascii=False) + "\n" for l in layouts)


def write_layouts(layouts: Iterable[Layout], path_or_stream: Union[str, IO[str]]) -> None:
    text = dumps_layouts(layouts)
    if isinstance(path_or_stream, (str, bytes)) or hasattr(path_or_stream, "__fspath__"):
        with open(path_or_stream, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        path_or_stream.write(text)


def _record_to_layout(rec, geom: TableGeometry) -> Layout:
    if not isinstance(rec, dict):
        raise ValueError("malformed record: expected an object")
    if "id" not in rec or "balls" not in rec:
        raise ValueError("malformed record: 'id' and 'balls' are required")
    if not isinstance(rec["balls"], list):
        raise ValueError("malformed record: 'balls' must be an array")
    balls = []
    seen = set()
    for item in rec["balls"]:
        try:
            num, x, y = item["num"], item["x"], item["y"]
        except (TypeError, KeyError):
            raise ValueError("malformed record: each ball needs num, x, y") from None
        if isinstance(num, bool) or not isinstance(num, int):
            raise ValueError("malformed record: ball num must be an integer")
        if isinstance(x, bool) or isinstance(y, bool) or not isinstance(x, (int, float)) or not isinstance(y, (int, float)):
            raise ValueError("malformed record: coordinates must be numbers")
        if num in seen:
            raise ValueError(f"duplicate ball number {num}")
        seen.add(num)
        if not 0 <= num <= 9:
            raise ValueError(f"ball number {num} outside 0..9")
        x, y = float(x), float(y)
        if not (0.0 <= x <= geom.length and 0.0 <= y <= geom.width):
            raise ValueError(f"coordinate out of bounds: ball {num} at ({x}, {y})")
        balls.append(Ball(num, x, y))
    if 0 not in seen:
        raise ValueError("missing cue ball")
    labels = None
    if rec.get("labels") is not None:
        lab = rec["labels"]
        if not isinstance(lab, dict):
            raise ValueError("malformed record: 'labels' must be an object")
        labels = GameLabels(clear=lab.get("clear"), win=lab.get("win"), potted=lab.get("potted"))
    return Layout(
        id=str(rec["id"]),
        balls=tuple(sorted(balls, key=lambda b: b.number)),
        labels=labels,
        remarks=rec.get("remarks"),
        video_url=rec.get("video_url"),
    )


def parse_layouts(stream: Union[bytes, str, IO], geom: TableGeometry = TableGeometry()) -> List[Layout]:
    """Parse line-delimited layout records, canonicalising ball order.

    All bad records are collected and raised together as a :class:`LayoutFormatError`
    so one pass over a file reports every broken line.
    """
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    layouts: List[Layout] = []
    problems: List[Tuple[int, str]] = []
    for line_no, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append((line_no, f"malformed record: {exc.msg}"))
            continue
        try:
            layouts.append(_record_to_layout(rec, geom))
        except ValueError as exc:
            problems.append((line_no, str(exc)))
    if problems:
        raise LayoutFormatError(problems)
    return layouts


def read_layouts(path, geom: TableGeometry = TableGeometry()) -> List[Layout]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_layouts(fh, geom)


# --------------------------------------------------------------------------- packing


@dataclass
class PackedLayouts:
    """Dense view of many layouts: row ``k`` of axis 1 is ball number ``k``.

    ``pos`` is ``(N, n, 2)`` float64 (zeros where absent), ``present`` is ``(N, n)`` bool.
    """

    pos: np.ndarray
    present: np.ndarray
    ids: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.pos.shape[0]

    def take(self, idx) -> "PackedLayouts":
        idx = np.asarray(idx)
        ids = [self.ids[i] for i in idx] if self.ids else []
        return PackedLayouts(self.pos[idx], self.present[idx], ids)


def pack_layouts(layouts: Sequence[Layout], spec: GameSpec = GameSpec()) -> PackedLayouts:
    N = len(layouts)
    pos = np.zeros((N, spec.n, 2), dtype=np.float64)
    present = np.zeros((N, spec.n), dtype=bool)
    for i, lay in enumerate(layouts):
        for b in lay.balls:
            if b.number >= spec.n:
                raise ValueError(f"ball {b.number} does not exist in a {spec.n}-ball game")
            pos[i, b.number] = (b.x, b.y)
            present[i, b.number] = True
    return PackedLayouts(pos, present, [l.id for l in layouts])


def unpack_layout(pos: np.ndarray, present: np.ndarray, layout_id: str, **kw) -> Layout:
    balls = tuple(Ball(int(k), float(pos[k, 0]), float(pos[k, 1])) for k in np.flatnonzero(present))
    return Layout(layout_id, balls, **kw)
