"""
File Formats

Reading and writing every on-disk artifact of the toolkit:

- ASCII PLY point clouds (x y z, optional intensity, 9 significant digits)
- plain P2 PGM view images (maxval 65535)
- meta.txt pair metadata (gt as 12 numbers, overlap, seeds)
- scene pair directories pair_<k>/{source.ply,target.ply,view.pgm,meta.txt}
- tab-separated per-pair result records
- little-endian binary weight containers (OMPW / VGAW)
- INI configuration files validated into pydantic models
- manifest.json run manifests

Parse failures raise FormatError naming the file and the byte offset of
the offending line; file system failures raise StorageError.
"""

import configparser
import logging
import os
import re
import struct
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Type, TypeVar, Union, get_args, get_origin

import numpy as np
from pydantic import BaseModel, ValidationError
from pydantic.fields import FieldInfo

from errors import ConfigError, FormatError, StorageError
from models import PairRecord, PointCloud, RigidTransform, RunManifest, ScenePair, ViewImage

logger = logging.getLogger(__name__)

# Pair directory layout
SOURCE_FILE = "source.ply"
TARGET_FILE = "target.ply"
IMAGE_FILE = "view.pgm"
META_FILE = "meta.txt"
MANIFEST_FILE = "manifest.json"
PAIR_FILES = (SOURCE_FILE, TARGET_FILE, IMAGE_FILE, META_FILE)

PGM_MAXVAL = 65535
WEIGHTS_VERSION = 1

RECORD_COLUMNS = [
    "pair", "estimator", "rre", "rte", "success", "ir",
    "superpoint_correspondences", "dense_correspondences",
    "mask_source_fraction", "mask_target_fraction", "fallback", "error",
]
_FLOAT_COLUMNS = {"rre", "rte", "ir", "mask_source_fraction", "mask_target_fraction"}
_INT_COLUMNS = {"superpoint_correspondences", "dense_correspondences"}
_MISSING = "-"

ModelT = TypeVar("ModelT", bound=BaseModel)


def raise_format(path: str, offset: int, reason: str) -> None:
    raise FormatError(path, offset, reason)


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as file:
            return file.read()
    except OSError as e:
        raise StorageError(f"Failed to read {path}: {str(e)}")


def _write_bytes(path: str, payload: bytes) -> None:
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as file:
            file.write(payload)
    except OSError as e:
        raise StorageError(f"Failed to write {path}: {str(e)}")


def write_text(path: str, text: str) -> None:
    _write_bytes(path, text.encode("utf-8"))


def _lines(path: str, data: bytes) -> Iterator[Tuple[int, str]]:
    """Yield (byte offset, decoded line without newline)."""
    offset = 0
    for raw in data.splitlines(keepends=True):
        try:
            line = raw.decode("ascii")
        except UnicodeDecodeError:
            raise_format(path, offset, "non-ASCII content")
        yield offset, line.rstrip("\r\n")
        offset += len(raw)


# PLY
def format_float(value: float) -> str:
    """float32 value printed with 9 significant digits (exact float32 round trip)."""
    return "%.9g" % float(np.float32(value))


def format_ply(cloud: PointCloud) -> str:
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
              "property float x", "property float y", "property float z"]
    if cloud.intensity is not None:
        header.append("property float intensity")
    header.append("end_header")

    columns = cloud.points if cloud.intensity is None else np.column_stack([cloud.points, cloud.intensity])
    body = [" ".join(format_float(v) for v in row) for row in columns]
    return "\n".join(header + body) + "\n"


def write_ply(path: str, cloud: PointCloud) -> None:
    _write_bytes(path, format_ply(cloud).encode("ascii"))


def read_ply(path: str) -> PointCloud:
    """
    Read an ASCII PLY file with float x, y, z and an optional intensity.

    Raises:
        FormatError: Malformed header or vertex line, with its byte offset
        StorageError: Unreadable file
    """
    lines = _lines(path, _read_bytes(path))
    offset, line = next(lines, (0, ""))
    if line.strip() != "ply":
        raise_format(path, offset, "missing 'ply' magic")

    count: Optional[int] = None
    properties: List[str] = []
    for offset, line in lines:
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1:2] != ["ascii"]:
                raise_format(path, offset, "only ASCII PLY is supported")
        elif tokens[0] == "element":
            if len(tokens) != 3 or tokens[1] != "vertex" or not tokens[2].isdigit():
                raise_format(path, offset, f"unsupported element line '{line}'")
            count = int(tokens[2])
        elif tokens[0] == "property":
            if len(tokens) != 3 or tokens[1] not in ("float", "double", "float32", "float64"):
                raise_format(path, offset, f"unsupported property line '{line}'")
            properties.append(tokens[2])
        elif tokens[0] == "end_header":
            break
        else:
            raise_format(path, offset, f"unexpected header line '{line}'")
    else:
        raise_format(path, offset, "missing end_header")

    if count is None:
        raise_format(path, offset, "missing 'element vertex' line")
    if properties[:3] != ["x", "y", "z"] or properties[3:] not in ([], ["intensity"]):
        raise_format(path, offset, f"unsupported properties {properties}")

    rows = np.zeros((count, len(properties)))
    filled = 0
    for offset, line in lines:
        if not line.strip():
            continue
        if filled == count:
            raise_format(path, offset, "more vertices than declared")
        tokens = line.split()
        if len(tokens) != len(properties):
            raise_format(path, offset, f"expected {len(properties)} values, got {len(tokens)}")
        try:
            rows[filled] = [float(token) for token in tokens]
        except ValueError:
            raise_format(path, offset, f"invalid number in '{line}'")
        if not np.all(np.isfinite(rows[filled])):
            raise_format(path, offset, "non-finite coordinate")
        filled += 1
    if filled != count:
        raise_format(path, offset, f"declared {count} vertices, found {filled}")

    intensity = rows[:, 3] if len(properties) == 4 else None
    return PointCloud(points=rows[:, :3], intensity=intensity)


# PGM
def write_pgm(path: str, image: ViewImage) -> None:
    levels = np.rint(image.pixels * PGM_MAXVAL).astype(np.int64)
    lines = ["P2", f"{image.width} {image.height}", str(PGM_MAXVAL)]
    lines += [" ".join(str(v) for v in row) for row in levels]
    _write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_pgm(path: str) -> ViewImage:
    """
    Read a plain (P2) PGM image, scaling values to [0, 1].

    Raises:
        FormatError: Bad magic, header or pixel data
    """
    tokens: List[Tuple[int, str]] = []
    for offset, line in _lines(path, _read_bytes(path)):
        content = line.split("#", 1)[0]
        tokens.extend((offset, token) for token in content.split())
    if not tokens or tokens[0][1] != "P2":
        raise_format(path, 0, "missing 'P2' magic")
    if len(tokens) < 4:
        raise_format(path, tokens[-1][0], "truncated header")
    try:
        width, height, maxval = (int(token) for _, token in tokens[1:4])
    except ValueError:
        raise_format(path, tokens[1][0], "invalid header numbers")
    if width < 1 or height < 1 or maxval < 1:
        raise_format(path, tokens[1][0], "non-positive header numbers")

    data = tokens[4:]
    if len(data) != width * height:
        offset = data[-1][0] if data else tokens[3][0]
        raise_format(path, offset, f"expected {width * height} pixels, found {len(data)}")
    values = np.zeros(width * height)
    for k, (offset, token) in enumerate(data):
        if not token.isdigit() or int(token) > maxval:
            raise_format(path, offset, f"invalid pixel value '{token}'")
        values[k] = int(token)
    try:
        return ViewImage(pixels=values.reshape(height, width) / maxval)
    except ValueError as e:
        raise_format(path, 0, f"invalid image: {e}")


# meta.txt
def format_meta(pair: ScenePair) -> str:
    matrix = np.concatenate([pair.gt.rotation.reshape(-1), pair.gt.translation])
    lines = [
        f"name: {pair.name}",
        "gt: " + " ".join("%.17g" % v for v in matrix),
        "overlap: %.17g" % pair.overlap,
        "seeds: " + " ".join(f"{key}={value}" for key, value in sorted(pair.seeds.items())),
    ]
    return "\n".join(lines) + "\n"


def read_meta(path: str) -> Dict[str, Any]:
    """
    Parse meta.txt into {"name", "gt", "overlap", "seeds"}.

    The gt transform is re-validated (orthonormality and determinant).
    """
    fields: Dict[str, Tuple[int, str]] = {}
    for offset, line in _lines(path, _read_bytes(path)):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if ":" not in line:
            raise_format(path, offset, f"expected 'key: value', got '{line}'")
        key, value = line.split(":", 1)
        fields[key.strip()] = (offset, value.strip())

    if "gt" not in fields:
        raise_format(path, 0, "missing 'gt' line")
    offset, value = fields["gt"]
    try:
        numbers = np.array([float(token) for token in value.split()])
    except ValueError:
        raise_format(path, offset, "gt must hold 12 numbers")
    if numbers.shape != (12,):
        raise_format(path, offset, f"gt must hold 12 numbers, got {numbers.size}")
    try:
        gt = RigidTransform(rotation=numbers[:9].reshape(3, 3), translation=numbers[9:])
    except ValueError as e:
        raise_format(path, offset, f"invalid gt transform: {e}")

    overlap = 0.0
    if "overlap" in fields:
        offset, value = fields["overlap"]
        try:
            overlap = float(value)
        except ValueError:
            raise_format(path, offset, f"invalid overlap '{value}'")

    seeds: Dict[str, int] = {}
    if "seeds" in fields:
        offset, value = fields["seeds"]
        for item in value.split():
            key, _, number = item.partition("=")
            if not key or not re.fullmatch(r"-?\d+", number):
                raise_format(path, offset, f"invalid seed entry '{item}'")
            seeds[key] = int(number)

    name = fields["name"][1] if "name" in fields else os.path.basename(os.path.dirname(os.path.abspath(path)))
    return {"name": name, "gt": gt, "overlap": overlap, "seeds": seeds}


# Pair directories
def pair_dir_name(index: int) -> str:
    return f"pair_{index:03d}"


def write_pair(directory: str, pair: ScenePair) -> List[str]:
    """
    Write one pair directory; returns the written file paths.

    The view image is written only when the pair carries one.
    """
    written = []
    write_ply(os.path.join(directory, SOURCE_FILE), pair.source)
    write_ply(os.path.join(directory, TARGET_FILE), pair.target)
    written += [os.path.join(directory, SOURCE_FILE), os.path.join(directory, TARGET_FILE)]
    if pair.image is not None:
        write_pgm(os.path.join(directory, IMAGE_FILE), pair.image)
        written.append(os.path.join(directory, IMAGE_FILE))
    _write_bytes(os.path.join(directory, META_FILE), format_meta(pair).encode("ascii"))
    written.append(os.path.join(directory, META_FILE))
    return written


def read_pair(directory: str) -> ScenePair:
    """Load a pair directory; a missing view.pgm yields a pair without image."""
    meta = read_meta(os.path.join(directory, META_FILE))
    image_path = os.path.join(directory, IMAGE_FILE)
    image = read_pgm(image_path) if os.path.exists(image_path) else None
    return ScenePair(
        source=read_ply(os.path.join(directory, SOURCE_FILE)),
        target=read_ply(os.path.join(directory, TARGET_FILE)),
        image=image,
        gt=meta["gt"],
        overlap=min(max(meta["overlap"], 0.0), 1.0),
        seeds=meta["seeds"],
        name=meta["name"],
    )


def find_pair_dirs(path: str) -> List[str]:
    """
    A pair directory itself, or the sorted pair directories of a dataset.

    Raises:
        StorageError: If `path` is not a directory
    """
    if not os.path.isdir(path):
        raise StorageError(f"Not a directory: {path}")
    if os.path.exists(os.path.join(path, META_FILE)):
        return [path]
    return [
        os.path.join(path, name)
        for name in sorted(os.listdir(path))
        if os.path.exists(os.path.join(path, name, META_FILE))
    ]


# Result records
def _format_cell(column: str, value: Any) -> str:
    if value is None:
        return _MISSING
    if column in _FLOAT_COLUMNS:
        return "%.6f" % value
    if column == "success":
        return "1" if value else "0"
    text = str(value).replace("\t", " ").replace("\n", " ")
    return text if text else _MISSING


def format_records(records: Sequence[PairRecord]) -> str:
    lines = ["\t".join(RECORD_COLUMNS)]
    for record in records:
        values = record.model_dump()
        lines.append("\t".join(_format_cell(column, values[column]) for column in RECORD_COLUMNS))
    return "\n".join(lines) + "\n"


def write_records(path: str, records: Sequence[PairRecord]) -> None:
    _write_bytes(path, format_records(records).encode("utf-8"))


def read_records(path: str) -> List[PairRecord]:
    """
    Parse a records file written by `write_records`.

    Raises:
        FormatError: Wrong header or malformed row
    """
    data = _read_bytes(path)
    records: List[PairRecord] = []
    offset = 0
    header_seen = False
    for raw in data.splitlines(keepends=True):
        line = raw.decode("utf-8", errors="replace").rstrip("\r\n")
        if not header_seen:
            if line.split("\t") != RECORD_COLUMNS:
                raise_format(path, offset, "unexpected header")
            header_seen = True
        elif line.strip():
            cells = line.split("\t")
            if len(cells) != len(RECORD_COLUMNS):
                raise_format(path, offset, f"expected {len(RECORD_COLUMNS)} columns, got {len(cells)}")
            values: Dict[str, Any] = {}
            try:
                for column, cell in zip(RECORD_COLUMNS, cells):
                    if cell == _MISSING:
                        values[column] = None if column in _FLOAT_COLUMNS else ""
                    elif column in _FLOAT_COLUMNS:
                        values[column] = float(cell)
                    elif column in _INT_COLUMNS:
                        values[column] = int(cell)
                    elif column == "success":
                        values[column] = cell == "1"
                    else:
                        values[column] = cell
                for column in ("mask_source_fraction", "mask_target_fraction"):
                    if values[column] is None:
                        values[column] = 1.0
                records.append(PairRecord(**values))
            except (ValueError, ValidationError) as e:
                raise_format(path, offset, f"invalid record: {e}")
        offset += len(raw)
    if not header_seen:
        raise_format(path, 0, "empty records file")
    return records


# Weight containers
def write_weight_container(path: str, magic: bytes, dims: Sequence[int], arrays: Sequence[np.ndarray]) -> None:
    """magic(4) | version u32 | n_dims u32 | dims u32... | row-major f32 arrays, little-endian."""
    header = struct.pack("<4sII", magic, WEIGHTS_VERSION, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    payload = b"".join(np.ascontiguousarray(array, dtype="<f4").tobytes() for array in arrays)
    _write_bytes(path, header + payload)


def _parse_header(path: str, data: bytes, magic: bytes) -> Tuple[Tuple[int, ...], int]:
    if len(data) < 12:
        raise_format(path, 0, "truncated header")
    found, version, n_dims = struct.unpack_from("<4sII", data, 0)
    if found != magic:
        raise_format(path, 0, f"bad magic {found!r}, expected {magic!r}")
    if version != WEIGHTS_VERSION:
        raise_format(path, 4, f"unsupported version {version}")
    end = 12 + 4 * n_dims
    if len(data) < end:
        raise_format(path, 8, "truncated dims")
    return struct.unpack_from(f"<{n_dims}I", data, 12), end


def read_weight_header(path: str, magic: bytes) -> Tuple[int, ...]:
    dims, _ = _parse_header(path, _read_bytes(path), magic)
    return dims


def read_weight_container(path: str, magic: bytes, shapes: Sequence[Tuple[int, ...]]) -> List[np.ndarray]:
    """
    Read the arrays of a weight container, in declared order.

    Raises:
        FormatError: Truncated payload or trailing bytes
    """
    data = _read_bytes(path)
    _, offset = _parse_header(path, data, magic)
    arrays = []
    for shape in shapes:
        size = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + size > len(data):
            raise_format(path, offset, f"truncated array of shape {tuple(shape)}")
        array = np.frombuffer(data, dtype="<f4", count=size // 4, offset=offset).astype(np.float64)
        if not np.all(np.isfinite(array)):
            raise_format(path, offset, "non-finite weight")
        arrays.append(array.reshape(shape))
        offset += size
    if offset != len(data):
        raise_format(path, offset, f"{len(data) - offset} trailing bytes")
    return arrays


# INI configuration
_VECTOR_GROUPS = {"outlier_bounds": 3}


def _section_lines(text: str) -> Dict[Tuple[str, Optional[str]], int]:
    """1-based line numbers of section headers and keys."""
    positions: Dict[Tuple[str, Optional[str]], int] = {}
    section = ""
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        header = re.fullmatch(r"\[([^\]]+)\]", stripped)
        if header:
            section = header.group(1).strip()
            positions[(section, None)] = number
        elif "=" in stripped:
            positions[(section, stripped.split("=", 1)[0].strip())] = number
    return positions


def _nested_model(field: FieldInfo) -> Optional[Type[BaseModel]]:
    annotation = field.annotation
    return annotation if isinstance(annotation, type) and issubclass(annotation, BaseModel) else None


def _is_sequence(field: FieldInfo) -> bool:
    annotation = field.annotation
    if get_origin(annotation) is Union:
        return any(get_origin(arg) in (list, tuple) for arg in get_args(annotation))
    return get_origin(annotation) in (list, tuple)


def _convert(key: str, value: str, field: FieldInfo) -> Any:
    value = value.strip()
    if value.lower() in ("", "none"):
        return None
    if not _is_sequence(field):
        return value
    items = [item.strip() for item in value.split(",")]
    group = _VECTOR_GROUPS.get(key)
    if group:
        return [items[k:k + group] for k in range(0, len(items), group)]
    return items


def load_config(path: str, model: Type[ModelT], root_section: str) -> ModelT:
    """
    Load an INI file into `model`.

    Every section except `root_section` names a nested model field;
    keys of `root_section` set the scalar top-level fields. Lists are
    comma-separated and `none` clears an optional field.

    Raises:
        ConfigError: `file:line: [section] key: message` on any problem
        StorageError: Unreadable file
    """
    text = _read_bytes(path).decode("utf-8", errors="replace")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=path)
    except configparser.Error as e:
        line = getattr(e, "lineno", None) or (e.errors[0][0] if getattr(e, "errors", None) else 0)
        raise ConfigError(f"{path}:{line}: {e.message.splitlines()[0]}")

    positions = _section_lines(text)
    data: Dict[str, Any] = {}
    for section in parser.sections():
        if section == root_section:
            target = data
            fields = {name: f for name, f in model.model_fields.items() if _nested_model(f) is None}
        elif section in model.model_fields and _nested_model(model.model_fields[section]):
            target = data.setdefault(section, {})
            fields = _nested_model(model.model_fields[section]).model_fields
        else:
            raise ConfigError(f"{path}:{positions.get((section, None), 0)}: [{section}]: unknown section")
        for key, value in parser.items(section):
            if key not in fields:
                raise ConfigError(f"{path}:{positions.get((section, key), 0)}: [{section}] {key}: unknown key")
            target[key] = _convert(key, value, fields[key])

    try:
        return model(**data)
    except ValidationError as e:
        error = e.errors()[0]
        loc = [str(part) for part in error["loc"]]
        if len(loc) > 1 and isinstance(data.get(loc[0]), dict):
            section, key = loc[0], loc[1]
        else:
            section, key = root_section, loc[0] if loc else ""
        line = positions.get((section, key), positions.get((section, None), 0))
        raise ConfigError(f"{path}:{line}: [{section}] {key}: {error['msg']}")


# Manifest
def write_manifest(directory: str, manifest: RunManifest) -> str:
    path = os.path.join(directory, MANIFEST_FILE)
    _write_bytes(path, (manifest.model_dump_json(indent=2) + "\n").encode("utf-8"))
    return path
