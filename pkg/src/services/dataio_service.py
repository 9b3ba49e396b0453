"""
Data I/O Service Module

Parses and emits DOTA-style annotation and detection text files.

Ground truth line:  x1 y1 x2 y2 x3 y3 x4 y4 class difficult
Detection line:     class score x1 y1 x2 y2 x3 y3 x4 y4

In concatenated mode every line starts with an image id column; in
directory mode each image has its own ``<image_id>.txt`` file.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from src.core.geometry import Quad, make_quad
from src.core.representation import GlidingRep
from src.errors import AnnotationParseError, InvalidInputError

FLOAT_FORMAT = "%.6f"

# DOTA v1 files open with these metadata lines
HEADER_PREFIXES = ("imagesource:", "gsd:")

GtDataset = Dict[str, List["GtRecord"]]
DetDataset = Dict[str, List["DetRecord"]]


def _check_class(cls: str) -> None:
    if not cls or any(ch.isspace() for ch in cls):
        raise InvalidInputError(f"class must be a non-empty token without spaces, got {cls!r}")


def _check_quad(quad) -> Quad:
    arr = np.asarray(quad, dtype=np.float64).reshape(-1, 2)
    if arr.shape != (4, 2):
        raise InvalidInputError(f"a quad needs 4 vertices, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("quad coordinates must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class GtRecord:
    """Annotated object; the quad keeps file vertex order"""

    quad: Quad
    cls: str
    difficult: bool = False

    def __post_init__(self):
        object.__setattr__(self, "quad", _check_quad(self.quad))
        _check_class(self.cls)

    @cached_property
    def polygon(self) -> Quad:
        """Canonical convex quad used for geometry"""
        return make_quad(self.quad)


@dataclass(frozen=True, eq=False)
class DetRecord:
    cls: str
    score: float
    quad: Quad

    def __post_init__(self):
        object.__setattr__(self, "quad", _check_quad(self.quad))
        _check_class(self.cls)
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise InvalidInputError(f"score must lie in [0, 1], got {self.score}")

    @cached_property
    def polygon(self) -> Quad:
        return make_quad(self.quad)


def _check_token(cls: str, line_no: int, line: str) -> None:
    if not cls.strip() or any(ch.isspace() for ch in cls.strip()):
        raise AnnotationParseError(f"bad class token {cls!r}", line_no, line)


def _format_coords(quad: Quad) -> str:
    return " ".join(FLOAT_FORMAT % v for v in np.asarray(quad).ravel())


def _is_skipped(text: str) -> bool:
    return not text or text.startswith("#") or text.lower().startswith(HEADER_PREFIXES)


def _floats(tokens: Sequence[str], line_no: int, line: str, what: str) -> List[float]:
    values = []
    for token in tokens:
        try:
            value = float(token)
        except ValueError:
            raise AnnotationParseError(f"non-numeric {what} {token!r}", line_no, line) from None
        if not math.isfinite(value):
            raise AnnotationParseError(f"non-finite {what} {token!r}", line_no, line)
        values.append(value)
    return values


def parse_gt_line(line: str, line_no: int = 1) -> GtRecord:
    """
    Parse one ground-truth line

    Args:
        line: Text of the line (trailing newline and CR allowed)
        line_no: Line number used in error messages

    Returns:
        Parsed record with vertices in file order
    """
    text = line.strip()
    tokens = text.split()
    if len(tokens) != 10:
        raise AnnotationParseError(f"expected 10 fields (8 coordinates, class, difficult), got {len(tokens)}", line_no, text)
    coords = _floats(tokens[:8], line_no, text, "coordinate")
    if tokens[9] not in ("0", "1"):
        raise AnnotationParseError(f"difficult flag must be 0 or 1, got {tokens[9]!r}", line_no, text)
    return GtRecord(np.array(coords).reshape(4, 2), tokens[8], tokens[9] == "1")


def parse_det_line(line: str, line_no: int = 1) -> DetRecord:
    text = line.strip()
    tokens = text.split()
    if len(tokens) != 10:
        raise AnnotationParseError(f"expected 10 fields (class, score, 8 coordinates), got {len(tokens)}", line_no, text)
    score = _floats(tokens[1:2], line_no, text, "score")[0]
    if not (0.0 <= score <= 1.0):
        raise AnnotationParseError(f"score must lie in [0, 1], got {score}", line_no, text)
    coords = _floats(tokens[2:], line_no, text, "coordinate")
    return DetRecord(tokens[0], score, np.array(coords).reshape(4, 2))


def _data_lines(text: str) -> Iterable[Tuple[int, str]]:
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not _is_skipped(stripped):
            yield line_no, stripped


def parse_gt_text(text: str) -> List[GtRecord]:
    return [parse_gt_line(line, n) for n, line in _data_lines(text)]


def parse_det_text(text: str) -> List[DetRecord]:
    return [parse_det_line(line, n) for n, line in _data_lines(text)]


def emit_gt_line(record: GtRecord) -> str:
    return f"{_format_coords(record.quad)} {record.cls} {int(record.difficult)}"


def emit_det_line(record: DetRecord) -> str:
    return f"{record.cls} {FLOAT_FORMAT % record.score} {_format_coords(record.quad)}"


def emit_gt_text(records: Iterable[GtRecord]) -> str:
    return "".join(emit_gt_line(r) + "\n" for r in records)


def emit_det_text(records: Iterable[DetRecord]) -> str:
    """Emit detections in input order, one per line"""
    return "".join(emit_det_line(r) + "\n" for r in records)


def _split_image_id(line: str, line_no: int) -> Tuple[str, str]:
    parts = line.split(None, 1)
    if len(parts) != 2:
        raise AnnotationParseError("missing fields after the image id", line_no, line)
    return parts[0], parts[1]


def parse_concatenated(text: str, kind: str) -> Dict[str, list]:
    """Parse a single file whose lines start with an image id"""
    parse_line = parse_gt_line if kind == "gt" else parse_det_line
    out: Dict[str, list] = {}
    for line_no, line in _data_lines(text):
        image_id, rest = _split_image_id(line, line_no)
        out.setdefault(image_id, []).append(parse_line(rest, line_no))
    return out


def emit_concatenated(dataset: Dict[str, list], kind: str) -> str:
    emit_line = emit_gt_line if kind == "gt" else emit_det_line
    return "".join(f"{image_id} {emit_line(r)}\n" for image_id in sorted(dataset) for r in dataset[image_id])


def _read_text(path: Path) -> str:
    # newline="" keeps CR so splitlines() handles CRLF files
    try:
        with open(path, "r", encoding="utf-8", newline="") as handle:
            return handle.read()
    except UnicodeDecodeError as exc:
        raise InvalidInputError(f"{path} is not UTF-8 text (byte {exc.start})") from exc
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _make_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidInputError(f"cannot create {path}: {exc.strerror or exc}") from exc


def _write_text(path: Path, text: str) -> None:
    _make_dir(path.parent)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise InvalidInputError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _load(path: Path, kind: str, concatenated: bool) -> Dict[str, list]:
    path = Path(path)
    parse_text = parse_gt_text if kind == "gt" else parse_det_text
    if path.is_dir():
        dataset = {}
        for file in sorted(path.glob("*.txt")):
            try:
                dataset[file.stem] = parse_text(_read_text(file))
            except AnnotationParseError as exc:
                raise AnnotationParseError(f"{exc.reason} (in {file.name})", exc.line_no, exc.line) from exc
    elif path.is_file():
        text = _read_text(path)
        if concatenated:
            dataset = parse_concatenated(text, kind)
        else:
            dataset = {path.stem: parse_text(text)}
    else:
        raise InvalidInputError(f"no such file or directory: {path}")
    count = sum(len(v) for v in dataset.values())
    logging.info(f"Parsed {count} {kind} records from {len(dataset)} images in {path}")
    return dataset


def load_gts(path: Path, concatenated: bool = False) -> GtDataset:
    """
    Load ground truth from a directory of per-image files or a single file

    Args:
        path: Directory of ``<image_id>.txt`` files, or one file
        concatenated: The single file carries an image id column

    Returns:
        Records keyed by image id
    """
    return _load(path, "gt", concatenated)


def load_dets(path: Path, concatenated: bool = False) -> DetDataset:
    return _load(path, "det", concatenated)


def _write(dataset: Dict[str, list], path: Path, kind: str, concatenated: bool) -> List[Path]:
    path = Path(path)
    if concatenated:
        _write_text(path, emit_concatenated(dataset, kind))
        written = [path]
    else:
        emit_text = emit_gt_text if kind == "gt" else emit_det_text
        written = []
        _make_dir(path)
        for image_id in sorted(dataset):
            file = path / f"{image_id}.txt"
            _write_text(file, emit_text(dataset[image_id]))
            written.append(file)
    logging.info(f"Wrote {sum(len(v) for v in dataset.values())} {kind} records to {path}")
    return written


def write_gts(dataset: GtDataset, path: Path, concatenated: bool = False) -> List[Path]:
    return _write(dataset, path, "gt", concatenated)


def write_dets(dataset: DetDataset, path: Path, concatenated: bool = False) -> List[Path]:
    return _write(dataset, path, "det", concatenated)


REP_FIELDS = ("image_id", "class", "x", "y", "w", "h", "alpha1", "alpha2", "alpha3", "alpha4", "r")


def parse_reps_csv(text: str) -> List[Tuple[str, str, GlidingRep]]:
    """Parse the representation CSV written by the encode command"""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return []
    if tuple(h.strip() for h in header) != REP_FIELDS:
        raise AnnotationParseError(f"expected header {','.join(REP_FIELDS)}", 1, ",".join(header))
    out = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        line = ",".join(row)
        if len(row) != len(REP_FIELDS):
            raise AnnotationParseError(f"expected {len(REP_FIELDS)} fields, got {len(row)}", line_no, line)
        _check_token(row[1], line_no, line)
        values = _floats(row[2:], line_no, line, "value")
        try:
            rep = GlidingRep.from_array(values)
        except InvalidInputError as exc:
            raise AnnotationParseError(str(exc), line_no, line) from None
        out.append((row[0].strip(), row[1].strip(), rep))
    return out


def load_reps(path: Path) -> List[Tuple[str, str, GlidingRep]]:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"no such file: {path}")
    reps = parse_reps_csv(_read_text(path))
    logging.info(f"Parsed {len(reps)} representations from {path}")
    return reps
