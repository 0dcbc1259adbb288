#!/usr/bin/env python3
"""
Image reading and writing for the enhancement pipeline

Binary PPM (P6) is always available and round-trips files byte for byte, maxval included.
PNG goes through Pillow when it is installed.
"""

import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import ImageIOError, ShapeError
from .tensor import Tensor

try:
    from PIL import Image
except ImportError:
    Image = None

IMAGE_SUFFIXES = {'.ppm', '.png'}


@dataclass
class ImageBuffer:
    """
    RGB image with float values in [0,1], stored [H,W,3]

    maxval is the sample range of the PPM it was decoded from; None means the
    full range of bit_depth.
    """
    pixels: np.ndarray
    bit_depth: int = 8
    maxval: Optional[int] = None

    def __post_init__(self):
        if self.maxval is not None and not 0 < self.maxval < 65536:
            raise ImageIOError(f"PPM maxval must lie in 1..65535, got {self.maxval}")
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"ImageBuffer needs [H,W,3] pixels, got {list(self.pixels.shape)}")
        self.pixels = np.clip(self.pixels.astype(np.float32, copy=False), 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def mean(self) -> float:
        return float(self.pixels.mean())


def _header_tokens(raw: bytes, count: int, source: str):
    """Reads count whitespace-separated header tokens, skipping # comments"""
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(raw):
            raise ImageIOError(f"Truncated PPM header: {source}")
        byte = raw[pos:pos + 1]
        if byte.isspace():
            pos += 1
        elif byte == b'#':
            end = raw.find(b'\n', pos)
            pos = len(raw) if end < 0 else end + 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b'#':
                pos += 1
            tokens.append(raw[start:pos])
    return tokens, pos


def decode_ppm(raw: bytes, source: str = '<bytes>') -> ImageBuffer:
    """Parses a binary P6 file; maxval <= 255 is 8-bit, larger is 16-bit big-endian"""
    tokens, pos = _header_tokens(raw, 4, source)
    if tokens[0] != b'P6':
        raise ImageIOError(f"Not a binary PPM (P6) file: {source}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageIOError(f"Malformed PPM header: {source}")
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageIOError(f"Invalid PPM geometry {width}x{height} maxval {maxval}: {source}")

    # exactly one whitespace byte separates the header from the raster
    pos += 1
    dtype = np.dtype('u1') if maxval < 256 else np.dtype('>u2')
    count = width * height * 3
    payload = raw[pos:pos + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise ImageIOError(f"PPM raster too short ({len(payload)} bytes): {source}")
    values = np.frombuffer(payload, dtype=dtype).reshape(height, width, 3)
    pixels = values.astype(np.float32) / np.float32(maxval)
    return ImageBuffer(pixels, bit_depth=8 if maxval < 256 else 16, maxval=maxval)


def encode_ppm(img: ImageBuffer) -> bytes:
    maxval = img.maxval or (255 if img.bit_depth <= 8 else 65535)
    dtype = 'u1' if maxval < 256 else '>u2'
    values = np.rint(np.clip(img.pixels, 0.0, 1.0) * np.float32(maxval)).astype(dtype)
    header = f"P6\n{img.width} {img.height}\n{maxval}\n".encode('ascii')
    return header + values.tobytes()


def read_image(path) -> ImageBuffer:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in IMAGE_SUFFIXES:
        raise ImageIOError(f"Unsupported image format '{suffix}': {path}")
    try:
        if suffix == '.png':
            if Image is None:
                raise ImageIOError(f"PNG support requires Pillow: {path}")
            with Image.open(path) as img:
                rgb = np.asarray(img.convert('RGB'), dtype=np.float32) / np.float32(255)
            return ImageBuffer(rgb, bit_depth=8)
        return decode_ppm(path.read_bytes(), source=str(path))
    except OSError as e:
        raise ImageIOError(f"Cannot read image {path}: {e}")


def write_image(path, img: ImageBuffer):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in IMAGE_SUFFIXES:
        raise ImageIOError(f"Unsupported image format '{suffix}': {path}")
    try:
        if path.parent:
            os.makedirs(path.parent, exist_ok=True)
        if suffix == '.png':
            if Image is None:
                raise ImageIOError(f"PNG support requires Pillow: {path}")
            values = np.rint(img.pixels * 255).astype(np.uint8)
            Image.fromarray(values, mode='RGB').save(path)
        else:
            path.write_bytes(encode_ppm(img))
    except OSError as e:
        raise ImageIOError(f"Cannot write image {path}: {e}")


def list_images(directory) -> List[Path]:
    """Image files directly inside directory, sorted by name"""
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageIOError(f"Image directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def gray_image(values: np.ndarray) -> ImageBuffer:
    """[H,W] map replicated to three channels"""
    return ImageBuffer(np.repeat(values[:, :, None], 3, axis=2))


def to_tensor(images: Sequence[ImageBuffer]) -> Tensor:
    """Stacks same-size images into an [N,3,H,W] batch"""
    shapes = {img.pixels.shape for img in images}
    if len(shapes) != 1:
        raise ShapeError(f"Batch images differ in size: {sorted(shapes)}")
    return Tensor(np.stack([img.pixels.transpose(2, 0, 1) for img in images]))


def from_tensor(batch: Tensor) -> List[ImageBuffer]:
    data = batch.numpy()
    if data.ndim != 4 or data.shape[1] != 3:
        raise ShapeError(f"Expected an [N,3,H,W] batch, got {list(data.shape)}")
    return [ImageBuffer(np.ascontiguousarray(sample.transpose(1, 2, 0))) for sample in data]


def reflect_pad(img: ImageBuffer, multiple: int):
    """
    Pads bottom/right by reflection up to the next multiple

    Returns the padded image and the original (height, width) for crop().
    """
    pad_h = -img.height % multiple
    pad_w = -img.width % multiple
    if not pad_h and not pad_w:
        return img, (img.height, img.width)
    # reflect needs the pad to be smaller than the extent
    mode = 'reflect' if pad_h < img.height and pad_w < img.width else 'symmetric'
    padded = np.pad(img.pixels, ((0, pad_h), (0, pad_w), (0, 0)), mode=mode)
    return ImageBuffer(padded, bit_depth=img.bit_depth, maxval=img.maxval), (img.height, img.width)


def crop(img: ImageBuffer, size) -> ImageBuffer:
    height, width = size
    return ImageBuffer(np.ascontiguousarray(img.pixels[:height, :width]), bit_depth=img.bit_depth, maxval=img.maxval)
