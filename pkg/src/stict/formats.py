"""Bit-exact readers and writers for the three on-disk formats.

Frames are binary PPM (P6, maxval 255), masks and probability maps are
binary PGM (P5, maxval 255), flow fields use the float sentinel format:
4-byte 202021.25, 32-bit width, 32-bit height, then row-major interleaved
(u, v) float32 pairs, all little-endian. Every parse error reports the
byte offset it occurred at.
"""

import struct

import numpy as np

FLO_SENTINEL = 202021.25
MAX_EXTENT = 1 << 20


class FormatError(ValueError):
    pass


def _read_header_token(buf, pos):
    """Next whitespace-delimited token, skipping '#' comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError(f"expected header token at byte {start}")
    return buf[start:pos], pos


def _read_netpbm(buf, magic, channels):
    if buf[:2] != magic:
        raise FormatError(f"bad magic {buf[:2]!r} at byte 0, expected {magic!r}")
    pos = 2
    dims = []
    for _ in range(3):
        tok, pos = _read_header_token(buf, pos)
        try:
            dims.append(int(tok))
        except ValueError:
            raise FormatError(f"non-numeric header field {tok!r} before byte {pos}") from None
    w, h, maxval = dims
    if not (0 < w <= MAX_EXTENT and 0 < h <= MAX_EXTENT):
        raise FormatError(f"dimension overflow {w}x{h} before byte {pos}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} before byte {pos}")
    pos += 1  # single whitespace byte separating header from raster
    need = w * h * channels
    if len(buf) - pos < need:
        raise FormatError(f"truncated raster: needed {need} bytes from byte {pos}, file has {len(buf) - pos}")
    if len(buf) - pos > need:
        raise FormatError(f"trailing {len(buf) - pos - need} bytes after raster at byte {pos + need}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    if channels == 1:
        return data.reshape(h, w)
    return data.reshape(h, w, channels)


def write_ppm(path, rgb):
    """rgb: (H, W, 3) uint8."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"ppm expects (H, W, 3), got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        return _read_netpbm(f.read(), b"P6", 3)


def write_pgm(path, gray):
    """gray: (H, W) uint8."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise FormatError(f"pgm expects (H, W), got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(gray.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        return _read_netpbm(f.read(), b"P5", 1)


def write_flo(path, flow):
    """flow: (2, H, W) float32, channel 0 = u (width), channel 1 = v."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise FormatError(f"flo expects (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    interleaved = np.ascontiguousarray(flow.transpose(1, 2, 0))
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_SENTINEL, w, h))
        f.write(interleaved.tobytes())


def read_flo(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 12:
        raise FormatError(f"truncated header: {len(buf)} bytes at byte 0, need 12")
    sentinel, w, h = struct.unpack_from("<fii", buf, 0)
    if sentinel != np.float32(FLO_SENTINEL):
        raise FormatError(f"bad sentinel {sentinel!r} at byte 0")
    if not (0 < w <= MAX_EXTENT and 0 < h <= MAX_EXTENT):
        raise FormatError(f"dimension overflow {w}x{h} at byte 4")
    need = w * h * 2 * 4
    if len(buf) - 12 != need:
        raise FormatError(f"bad raster size at byte 12: expected {need} bytes, found {len(buf) - 12}")
    data = np.frombuffer(buf, dtype="<f4", count=w * h * 2, offset=12)
    return np.ascontiguousarray(data.reshape(h, w, 2).transpose(2, 0, 1))
