"""PPM (P6, maxval 255) and PNG (8-bit RGB, non-interlaced) image codecs.

PPM-P6 is the zero-dependency fixture format used throughout the tests;
PNG covers real dermoscopy exports. Both decoders raise
:class:`~dermaug.errors.DecodeError` naming the byte offset of the first
problem. Decoded pixels are scaled to [0, 1]; encoders quantize with
round-to-nearest so ``decode(encode(img))`` is the identity on images
whose pixels are exact multiples of 1/255.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import DecodeError
from .types import Image

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

_WS = b" \t\r\n\x0b\x0c"


def decode_image(data: bytes, format: str) -> Image:
    """Decode raw bytes in the declared format ('ppm' or 'png')."""
    fmt = format.lower().replace("-p6", "")
    if fmt == "ppm":
        return decode_ppm(data)
    if fmt == "png":
        return decode_png(data)
    raise DecodeError(f"unsupported image format {format!r}")


def sniff_format(data: bytes) -> str:
    if data[:8] == PNG_SIGNATURE:
        return "png"
    if data[:2] == b"P6":
        return "ppm"
    raise DecodeError("unrecognized image signature at offset 0")


# ---------------------------------------------------------------------------
# PPM (P6)


class _PpmScanner:
    """Tokenizer for the PPM header: whitespace separated, '#' comments."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def skip_space(self) -> None:
        d, n = self.data, len(self.data)
        while self.pos < n:
            c = d[self.pos : self.pos + 1]
            if c in _WS:
                self.pos += 1
            elif c == b"#":
                while self.pos < n and d[self.pos : self.pos + 1] not in b"\r\n":
                    self.pos += 1
            else:
                return

    def read_int(self, what: str) -> int:
        self.skip_space()
        start = self.pos
        d, n = self.data, len(self.data)
        while self.pos < n and d[self.pos : self.pos + 1].isdigit():
            self.pos += 1
        if self.pos == start:
            raise DecodeError(f"expected {what} at offset {start}")
        return int(d[start : self.pos])


def decode_ppm(data: bytes) -> Image:
    if data[:2] != b"P6":
        raise DecodeError("not a P6 PPM file (bad magic at offset 0)")
    sc = _PpmScanner(data)
    sc.pos = 2
    width = sc.read_int("width")
    height = sc.read_int("height")
    maxval = sc.read_int("maxval")
    if width < 1 or height < 1:
        raise DecodeError(f"degenerate PPM dimensions {width}x{height}")
    if maxval != 255:
        raise DecodeError(f"unsupported PPM maxval {maxval} (only 8-bit depth, maxval 255)")
    # Exactly one whitespace byte separates the header from the payload.
    if sc.pos >= len(data) or data[sc.pos : sc.pos + 1] not in _WS:
        raise DecodeError(f"expected whitespace after maxval at offset {sc.pos}")
    start = sc.pos + 1
    need = width * height * 3
    if len(data) - start < need:
        raise DecodeError(
            f"truncated PPM payload: need {need} bytes from offset {start}, "
            f"file ends at offset {len(data)}"
        )
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=start)
    pixels = raw.reshape(height, width, 3).astype(np.float64) / 255.0
    return Image(pixels)


def encode_ppm(image: Image) -> bytes:
    q = _quantize(image.pixels)
    header = b"P6\n%d %d\n255\n" % (image.width, image.height)
    return header + q.tobytes()


def _quantize(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# PNG (8-bit RGB, color type 2, no interlacing)


def decode_png(data: bytes) -> Image:
    if data[:8] != PNG_SIGNATURE:
        raise DecodeError("not a PNG file (bad signature at offset 0)")
    pos = 8
    width = height = None
    idat = bytearray()
    seen_iend = False
    while pos < len(data):
        if len(data) - pos < 8:
            raise DecodeError(f"truncated chunk header at offset {pos}")
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        ctype = data[pos + 4 : pos + 8]
        body_at = pos + 8
        crc_at = body_at + length
        if len(data) < crc_at + 4:
            raise DecodeError(f"truncated {ctype!r} chunk at offset {pos}")
        body = data[body_at:crc_at]
        (crc,) = struct.unpack(">I", data[crc_at : crc_at + 4])
        if zlib.crc32(ctype + body) & 0xFFFFFFFF != crc:
            raise DecodeError(f"CRC mismatch for {ctype!r} chunk at offset {crc_at}")
        if ctype == b"IHDR":
            if length != 13:
                raise DecodeError(f"bad IHDR length {length} at offset {pos}")
            width, height, depth, color, comp, filt, interlace = struct.unpack(
                ">IIBBBBB", body
            )
            if depth != 8:
                raise DecodeError(f"unsupported PNG bit depth {depth} (need 8)")
            if color != 2:
                raise DecodeError(f"unsupported PNG color type {color} (need RGB=2)")
            if comp != 0 or filt != 0:
                raise DecodeError("unsupported PNG compression/filter method")
            if interlace != 0:
                raise DecodeError("interlaced PNG is not supported")
        elif ctype == b"IDAT":
            idat.extend(body)
        elif ctype == b"IEND":
            seen_iend = True
            break
        # Ancillary chunks are skipped.
        pos = crc_at + 4
    if width is None:
        raise DecodeError("missing IHDR chunk")
    if not seen_iend:
        raise DecodeError(f"missing IEND chunk (stream ends at offset {len(data)})")
    if not idat:
        raise DecodeError("missing IDAT data")
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as e:
        raise DecodeError(f"bad IDAT zlib stream: {e}") from None
    stride = width * 3
    expected = height * (1 + stride)
    if len(raw) != expected:
        raise DecodeError(
            f"decompressed pixel data is {len(raw)} bytes, expected {expected}"
        )
    out = np.empty((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    for row in range(height):
        off = row * (1 + stride)
        ftype = raw[off]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=off + 1).astype(
            np.int32
        )
        recon = _unfilter_row(ftype, line, prev, off)
        out[row] = recon.astype(np.uint8)
        prev = recon
    pixels = out.reshape(height, width, 3).astype(np.float64) / 255.0
    return Image(pixels)


def _unfilter_row(ftype: int, line: np.ndarray, prev: np.ndarray, off: int) -> np.ndarray:
    """Undo one PNG scanline filter. ``line`` and ``prev`` are int32 arrays."""
    bpp = 3
    n = line.shape[0]
    if ftype == 0:  # None
        return line
    if ftype == 1:  # Sub: prefix sum within each byte lane
        recon = line.reshape(-1, bpp)
        return (np.cumsum(recon, axis=0) % 256).reshape(n)
    if ftype == 2:  # Up
        return (line + prev) % 256
    if ftype == 3:  # Average
        recon = np.zeros(n, dtype=np.int32)
        for i in range(n):
            left = recon[i - bpp] if i >= bpp else 0
            recon[i] = (line[i] + (left + prev[i]) // 2) % 256
        return recon
    if ftype == 4:  # Paeth
        recon = np.zeros(n, dtype=np.int32)
        for i in range(n):
            a = recon[i - bpp] if i >= bpp else 0
            b = prev[i]
            c = prev[i - bpp] if i >= bpp else 0
            p = a + b - c
            pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
            if pa <= pb and pa <= pc:
                pred = a
            elif pb <= pc:
                pred = b
            else:
                pred = c
            recon[i] = (line[i] + pred) % 256
        return recon
    raise DecodeError(f"unknown PNG filter type {ftype} at offset {off}")


def encode_png(image: Image) -> bytes:
    q = _quantize(image.pixels)
    h, w = q.shape[:2]
    rows = bytearray()
    for r in range(h):
        rows.append(0)  # filter type None
        rows.extend(q[r].tobytes())
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (
        PNG_SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(bytes(rows), 9))
        + _chunk(b"IEND", b"")
    )


def _chunk(ctype: bytes, body: bytes) -> bytes:
    crc = zlib.crc32(ctype + body) & 0xFFFFFFFF
    return struct.pack(">I", len(body)) + ctype + body + struct.pack(">I", crc)
