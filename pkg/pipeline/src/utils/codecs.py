"""
Raster codecs: color images, 16-bit depth PNGs with JSON sidecars, 1-bit validity
masks and raw float arrays.

PNG files are read and written with pypng so 16-bit samples survive exactly; other
raster formats (JPEG, BMP, TIFF) are read through Pillow. All writes go to a
temporary file in the target directory first and are moved into place, so a crash
never leaves a half-written artifact behind a manifest record.
"""

import hashlib
import logging
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Union

import numpy as np
import png
from models.rasters import InverseRelativeDepthMap, MetricDepthMap, RgbImage
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError
from schemas.sidecars import INVERSE_ENCODING, METRIC_ENCODING, DepthSidecar, MaskSidecar
from utils.errors import (
    CorruptSidecar,
    IoFailure,
    MissingFile,
    MissingSidecar,
    NonRgb,
    RangeOverflow,
    UnsupportedFormat,
)

logger = logging.getLogger("pipeline.stdout")

PathLike = Union[str, os.PathLike]
DepthMap = Union[InverseRelativeDepthMap, MetricDepthMap]

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
U16_MAX = 65535
# largest metric depth representable as 16-bit millimeters
METRIC_LIMIT_M = U16_MAX / 1000.0

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

_PILLOW_GRAY_8 = ("L", "1", "LA", "La")
_PILLOW_GRAY_16 = ("I;16", "I;16B", "I;16L", "I;16N", "I")


def sidecar_path(path: PathLike) -> Path:
    """
    Sidecar location for a depth or mask PNG: same directory and stem, `.json` suffix.
    """
    return Path(path).with_suffix(".json")


def sha256_file(path: PathLike) -> str:
    """
    Hex sha256 of a file's bytes.

    Raises:
        MissingFile: If the file does not exist.
    """
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as handle:
            for chunk in iter(lambda: handle.read(1 << 20), b""):
                digest.update(chunk)
    except FileNotFoundError as e:
        raise MissingFile(f"no such file: {path}") from e
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    return digest.hexdigest()


@contextmanager
def atomic_output(path: PathLike, mode: str = "wb") -> Iterator:
    """
    Opens a temporary file next to `path` and moves it over `path` on success.

    Raises:
        IoFailure: If the directory cannot be created or the file cannot be written.
    """
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    except OSError as e:
        raise IoFailure(f"cannot write {target}: {e}") from e
    try:
        with os.fdopen(fd, mode, encoding=None if "b" in mode else "utf-8") as handle:
            yield handle
        os.replace(tmp_name, target)
    except OSError as e:
        _discard(tmp_name)
        raise IoFailure(f"cannot write {target}: {e}") from e
    except BaseException:
        _discard(tmp_name)
        raise


def _discard(name: str):
    try:
        os.unlink(name)
    except OSError:
        pass


def _unscale(stored: np.ndarray, maxval: int) -> np.ndarray:
    return stored.astype(np.float64) / float(maxval)


def _is_png(path: Path) -> bool:
    with open(path, "rb") as handle:
        return handle.read(len(PNG_SIGNATURE)) == PNG_SIGNATURE


def _read_png_planes(path: Path) -> tuple[np.ndarray, dict]:
    """
    Reads a PNG into an (H, W, planes) integer array using pypng's direct mode
    (palettes expanded, transparency resolved).
    """
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        stored = np.array([np.asarray(row, dtype=np.uint32) for row in rows])
    except png.Error as e:
        raise UnsupportedFormat(f"unreadable PNG {path}: {e}") from e
    planes = info["planes"]
    return stored.reshape(height, width, planes), info


def _gray_to_rgb(gray: np.ndarray, path: Path, replicate_gray: bool) -> np.ndarray:
    if not replicate_gray:
        raise NonRgb(f"{path} is grayscale; pass replicate_gray to load it as RGB")
    return np.repeat(gray[:, :, np.newaxis], 3, axis=2)


def _load_png(path: Path, replicate_gray: bool) -> np.ndarray:
    stored, info = _read_png_planes(path)
    values = _unscale(stored, 2 ** info["bitdepth"] - 1)
    if info["greyscale"]:
        return _gray_to_rgb(values[:, :, 0], path, replicate_gray)
    return values[:, :, :3]


def _load_pillow(path: Path, replicate_gray: bool) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in _PILLOW_GRAY_8:
                gray = np.asarray(img.convert("L"))
                return _gray_to_rgb(_unscale(gray, 255), path, replicate_gray)
            if mode in _PILLOW_GRAY_16:
                gray = np.clip(np.asarray(img, dtype=np.int64), 0, U16_MAX)
                return _gray_to_rgb(_unscale(gray, U16_MAX), path, replicate_gray)
            if mode == "F":
                raise UnsupportedFormat(f"{path}: floating point rasters are not images")
            return _unscale(np.asarray(img.convert("RGB")), 255)
    except UnidentifiedImageError as e:
        raise UnsupportedFormat(f"unrecognized image format: {path}") from e
    except OSError as e:
        # truncated or otherwise corrupt payloads
        raise UnsupportedFormat(f"cannot decode {path}: {e}") from e


def load_image(path: PathLike, replicate_gray: bool = False) -> RgbImage:
    """
    Loads an 8-bit or 16-bit raster as a linear [0, 1] RgbImage.

    Args:
        path (PathLike): Image file.
        replicate_gray (bool): Copy a single gray channel into R, G and B instead of failing.

    Returns:
        RgbImage: Values scaled by the maximum code value of the source bit depth.

    Raises:
        MissingFile, UnsupportedFormat, NonRgb
    """
    source = Path(path)
    if not source.is_file():
        raise MissingFile(f"no such image: {source}")
    if _is_png(source):
        values = _load_png(source, replicate_gray)
    else:
        values = _load_pillow(source, replicate_gray)
    return RgbImage(values)


def save_image(image: RgbImage, path: PathLike, bitdepth: int = 8) -> Path:
    """
    Writes an RgbImage. PNG targets keep 8 or 16 bits per sample; other suffixes are
    written by Pillow at 8 bits.
    """
    if bitdepth not in (8, 16):
        raise UnsupportedFormat(f"bit depth must be 8 or 16, got {bitdepth}")
    target = Path(path)
    maxval = 2**bitdepth - 1
    stored = np.round(image.data * maxval).astype(np.uint16 if bitdepth == 16 else np.uint8)
    if target.suffix.lower() == ".png":
        writer = png.Writer(image.width, image.height, greyscale=False, bitdepth=bitdepth)
        with atomic_output(target) as handle:
            writer.write(handle, stored.reshape(image.height, image.width * 3).tolist())
        return target
    if bitdepth != 8:
        raise UnsupportedFormat(f"{target.suffix} output supports 8-bit samples only")
    pillow_format = Image.registered_extensions().get(target.suffix.lower())
    if pillow_format is None:
        raise UnsupportedFormat(f"no writer for {target.suffix}")
    with atomic_output(target) as handle:
        Image.fromarray(stored).save(handle, format=pillow_format)
    return target


def _write_gray_png(path: Path, stored: np.ndarray, bitdepth: int):
    height, width = stored.shape
    writer = png.Writer(width, height, greyscale=True, bitdepth=bitdepth)
    with atomic_output(path) as handle:
        writer.write(handle, stored.tolist())


def _write_sidecar(path: Path, sidecar: Union[DepthSidecar, MaskSidecar]):
    with atomic_output(sidecar_path(path), "w") as handle:
        handle.write(sidecar.model_dump_json(indent=2))


def _read_gray_png(path: Path, bitdepth: int) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    stored, info = _read_png_planes(path)
    if not info["greyscale"] or info["alpha"] or info["bitdepth"] != bitdepth:
        raise UnsupportedFormat(f"{path} is not a {bitdepth}-bit single channel PNG")
    return stored[:, :, 0]


def _read_sidecar(path: Path, model):
    location = sidecar_path(path)
    if not location.is_file():
        raise MissingSidecar(f"no sidecar {location.name} next to {path}")
    try:
        return model.model_validate_json(location.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise CorruptSidecar(f"invalid sidecar {location}: {e.error_count()} error(s)") from e
    except (OSError, UnicodeDecodeError) as e:
        raise CorruptSidecar(f"unreadable sidecar {location}: {e}") from e


def encode_depth(depth: DepthMap, path: PathLike) -> Path:
    """
    Stores a depth map as a 16-bit grayscale PNG plus JSON sidecar.

    Inverse relative maps are stored as round(n * 65535) of their normalized values;
    maps not flagged normalized are min-max normalized first and the original range
    is kept in the sidecar. Metric maps are stored in millimeters with holes as 0;
    positive depth below half a millimeter is stored as 1 mm.

    Raises:
        RangeOverflow: Metric value beyond 65.535 m.
        IoFailure: Target not writable.
    """
    target = Path(path)
    if isinstance(depth, MetricDepthMap):
        stored, sidecar = _metric_to_u16(depth)
    else:
        stored, sidecar = _inverse_to_u16(depth)
    _write_gray_png(target, stored, 16)
    _write_sidecar(target, sidecar)
    return target


def _inverse_to_u16(depth: InverseRelativeDepthMap) -> tuple[np.ndarray, DepthSidecar]:
    low, high = float(depth.data.min()), float(depth.data.max())
    if depth.normalized:
        values = depth.data
    elif high > low:
        values = (depth.data - low) / (high - low)
    else:
        values = np.zeros_like(depth.data)
    stored = np.round(values * U16_MAX).astype(np.uint16)
    sidecar = DepthSidecar(
        encoding=INVERSE_ENCODING,
        width=depth.width,
        height=depth.height,
        normalized=depth.normalized,
        min=low,
        max=high,
    )
    return stored, sidecar


def _metric_to_u16(depth: MetricDepthMap) -> tuple[np.ndarray, DepthSidecar]:
    valid = depth.valid
    values = depth.data[valid]
    if values.size and values.max() > METRIC_LIMIT_M:
        raise RangeOverflow(
            f"metric depth {values.max():.3f} m exceeds the {METRIC_LIMIT_M} m storage limit"
        )
    millimeters = np.where(valid, np.round(np.where(valid, depth.data, 0.0) * 1000.0), 0.0)
    # 0 marks a hole, so positive depth under half a millimeter is stored as 1 mm
    raised = valid & (millimeters == 0)
    if np.any(raised):
        logger.debug(f"Storing {int(raised.sum())} sub-millimeter depths as 1 mm")
        millimeters[raised] = 1.0
    sidecar = DepthSidecar(
        encoding=METRIC_ENCODING,
        width=depth.width,
        height=depth.height,
        sparse=depth.sparse,
        cap_m=depth.cap_m if np.isfinite(depth.cap_m) else None,
        min=float(values.min()) if values.size else 0.0,
        max=float(values.max()) if values.size else 0.0,
    )
    return millimeters.astype(np.uint16), sidecar


def decode_depth(path: PathLike) -> DepthMap:
    """
    Reads a depth PNG written by encode_depth.

    Raises:
        MissingSidecar, CorruptSidecar, MissingFile, UnsupportedFormat
    """
    source = Path(path)
    sidecar = _read_sidecar(source, DepthSidecar)
    stored = _read_gray_png(source, 16)
    if stored.shape != (sidecar.height, sidecar.width):
        raise CorruptSidecar(
            f"sidecar size {sidecar.width}x{sidecar.height} does not match {source} "
            f"({stored.shape[1]}x{stored.shape[0]})"
        )
    if sidecar.encoding == METRIC_ENCODING:
        return _u16_to_metric(stored, sidecar)
    values = _unscale(stored, U16_MAX)
    if sidecar.normalized:
        return InverseRelativeDepthMap(values, normalized=True)
    return InverseRelativeDepthMap(sidecar.min + values * (sidecar.max - sidecar.min))


def _u16_to_metric(stored: np.ndarray, sidecar: DepthSidecar) -> MetricDepthMap:
    cap = sidecar.cap_m if sidecar.cap_m is not None else np.inf
    meters = _unscale(stored, 1000)
    if sidecar.sparse:
        meters[stored == 0] = np.nan
    else:
        meters = np.minimum(meters, cap)
    return MetricDepthMap(meters, cap_m=cap, sparse=sidecar.sparse)


def encode_mask(valid: np.ndarray, threshold: float, path: PathLike) -> Path:
    """
    Stores a boolean keep-mask as a 1-bit PNG (1 = valid) with a sidecar recording
    the threshold and valid fraction.
    """
    target = Path(path)
    mask = np.asarray(valid, dtype=bool)
    sidecar = MaskSidecar(
        width=mask.shape[1],
        height=mask.shape[0],
        threshold=threshold,
        valid_fraction=float(mask.mean()),
    )
    _write_gray_png(target, mask.astype(np.uint8), 1)
    _write_sidecar(target, sidecar)
    return target


def decode_mask(path: PathLike) -> tuple[np.ndarray, MaskSidecar]:
    """
    Reads a mask written by encode_mask.

    Returns:
        tuple[np.ndarray, MaskSidecar]: Boolean mask and its sidecar.
    """
    source = Path(path)
    sidecar = _read_sidecar(source, MaskSidecar)
    stored = _read_gray_png(source, 1)
    if stored.shape != (sidecar.height, sidecar.width):
        raise CorruptSidecar(f"sidecar size does not match mask {source}")
    return stored.astype(bool), sidecar


def save_array(array: np.ndarray, path: PathLike) -> Path:
    """
    Stores a float array losslessly as `.npy`.
    """
    target = Path(path)
    with atomic_output(target) as handle:
        np.save(handle, np.asarray(array, dtype=np.float64), allow_pickle=False)
    return target


def load_array(path: PathLike) -> np.ndarray:
    source = Path(path)
    if not source.is_file():
        raise MissingFile(f"no such file: {source}")
    try:
        return np.load(source, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise UnsupportedFormat(f"cannot read array {source}: {e}") from e


def save_text(text: str, path: PathLike) -> Path:
    target = Path(path)
    with atomic_output(target, "w") as handle:
        handle.write(text)
    return target


def load_text(path: PathLike) -> str:
    source = Path(path)
    if not source.is_file():
        raise MissingFile(f"no such file: {source}")
    return source.read_text(encoding="utf-8")
