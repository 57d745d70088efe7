"""Minimal reader and writer for the PGM (P2/P5) and PPM (P3/P6) formats."""
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from attr import define, field

from patchseek.errors import FormatError

_MAX_VALUE = 65535
_MAX_PIXELS = 1 << 28
_CHANNELS = {b"P2": 1, b"P5": 1, b"P3": 3, b"P6": 3}
_BINARY = frozenset((b"P5", b"P6"))
_WHITESPACE = b" \t\r\n\v\f"


@define(frozen=True, eq=False)
class Image:
    """A decoded Netpbm raster, (H, W) for gray or (H, W, 3) for color."""

    pixels: np.ndarray = field(repr=False)
    maxval: int

    @property
    def height(self) -> int:  # noqa: D102
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:  # noqa: D102
        return int(self.pixels.shape[1])


def read(path: Union[str, Path]) -> Image:
    """
    Decode a PGM or PPM file.

    :param path: the file.
    :raises FormatError: if the header or the raster is malformed.
    :return: the raster.
    """
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in _CHANNELS:
        raise FormatError(f"{path}: unknown magic number {magic!r}")
    tokens, raster_start = _read_header(data, path)
    width, height, maxval = tokens
    channels = _CHANNELS[magic]
    _check_dimensions(width, height, maxval, channels, path)

    count = width * height * channels
    if magic in _BINARY:
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raster = data[raster_start:]
        if len(raster) < count * dtype.itemsize:
            raise FormatError(f"{path}: raster is shorter than {width}x{height}")
        samples = np.frombuffer(raster, dtype=dtype, count=count).astype(np.int64)
    else:
        words = data[raster_start:].split()
        if len(words) < count:
            raise FormatError(f"{path}: raster is shorter than {width}x{height}")
        try:
            samples = np.array([int(word) for word in words[:count]], dtype=np.int64)
        except ValueError:
            raise FormatError(f"{path}: non-numeric sample in ASCII raster")

    if samples.max(initial=0) > maxval:
        raise FormatError(f"{path}: sample exceeds maxval {maxval}")
    shape = (height, width) if channels == 1 else (height, width, 3)
    return Image(pixels=samples.reshape(shape), maxval=maxval)


def write(
    path: Union[str, Path],
    pixels: np.ndarray,
    maxval: int = 255,
    binary: bool = True,
) -> None:
    """
    Encode a raster as PGM (2-D input) or PPM (H x W x 3 input).

    :param path: the destination file.
    :param pixels: integer samples in [0, maxval].
    :param maxval: the largest sample value.
    :param binary: write P5/P6 instead of P2/P3.
    :raises FormatError: if the raster cannot be represented.
    """
    samples = np.asarray(pixels)
    if samples.ndim == 2:
        magic = "P5" if binary else "P2"
    elif samples.ndim == 3 and samples.shape[2] == 3:
        magic = "P6" if binary else "P3"
    else:
        raise FormatError(f"cannot encode raster of shape {samples.shape}")
    if not 1 <= maxval <= _MAX_VALUE:
        raise FormatError(f"maxval must be in [1, {_MAX_VALUE}], got {maxval}")
    if samples.size and (samples.min() < 0 or samples.max() > maxval):
        raise FormatError(f"samples must lie in [0, {maxval}]")

    height, width = samples.shape[:2]
    header = f"{magic}\n{width} {height}\n{maxval}\n".encode("ascii")
    if binary:
        dtype = ">u2" if maxval > 255 else "u1"
        body = samples.astype(dtype).tobytes()
    else:
        rows = samples.reshape(height, -1)
        body = "".join(
            " ".join(str(int(sample)) for sample in row) + "\n" for row in rows
        ).encode("ascii")
    Path(path).write_bytes(header + body)


def _read_header(data: bytes, path: Union[str, Path]) -> Tuple[List[int], int]:
    tokens: List[int] = []
    position = 2
    while len(tokens) < 3:
        if position >= len(data):
            raise FormatError(f"{path}: truncated header")
        byte = data[position : position + 1]
        if byte in _WHITESPACE:
            position += 1
        elif byte == b"#":
            end = data.find(b"\n", position)
            position = len(data) if end < 0 else end + 1
        else:
            start = position
            while position < len(data) and data[position : position + 1].isdigit():
                position += 1
            if start == position:
                raise FormatError(f"{path}: malformed header near byte {start}")
            tokens.append(int(data[start:position]))
    if position >= len(data) or data[position : position + 1] not in _WHITESPACE:
        raise FormatError(f"{path}: missing whitespace after maxval")
    return tokens, position + 1


def _check_dimensions(
    width: int,
    height: int,
    maxval: int,
    channels: int,
    path: Union[str, Path],
) -> None:
    if width < 1 or height < 1:
        raise FormatError(f"{path}: empty raster {width}x{height}")
    if width * height * channels > _MAX_PIXELS:
        raise FormatError(f"{path}: raster {width}x{height} is too large")
    if not 1 <= maxval <= _MAX_VALUE:
        raise FormatError(f"{path}: maxval must be in [1, {_MAX_VALUE}], got {maxval}")
