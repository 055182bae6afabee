"""Image file IO: 8-bit sRGB PNGs for references/masks, float32 EXR for linear
intermediates.

All in-memory math elsewhere in the package is linear; the sRGB transfer is
applied only at the PNG boundary. The EXR codec is a deliberately small one:
uncompressed float32 scanlines, single part, which is all the pipeline needs
and keeps outputs byte-reproducible.
"""

import struct

import numpy as np
from PIL import Image

__all__ = [
    "srgb_encode",
    "srgb_decode",
    "write_png",
    "read_png",
    "write_exr",
    "read_exr",
]


def srgb_encode(linear):
    """Linear [0,1] -> sRGB [0,1]."""
    linear = np.clip(linear, 0.0, 1.0)
    return np.where(
        linear <= 0.0031308,
        12.92 * linear,
        1.055 * np.power(linear, 1.0 / 2.4) - 0.055,
    )


def srgb_decode(encoded):
    """sRGB [0,1] -> linear [0,1]."""
    encoded = np.clip(encoded, 0.0, 1.0)
    return np.where(
        encoded <= 0.04045,
        encoded / 12.92,
        np.power((encoded + 0.055) / 1.055, 2.4),
    )


def write_png(path, img, srgb=True):
    """Write a float image in [0,1] as 8-bit PNG.

    img: (H,W) grayscale, (H,W,3) RGB or (H,W,4) RGBA. With srgb=True the
    color channels pass through the sRGB transfer (alpha stays linear).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        data = srgb_encode(img) if srgb else np.clip(img, 0.0, 1.0)
        mode = "L"
    elif img.ndim == 3 and img.shape[2] in (3, 4):
        data = img.copy()
        rgb = data[..., :3]
        data[..., :3] = srgb_encode(rgb) if srgb else np.clip(rgb, 0.0, 1.0)
        if img.shape[2] == 4:
            data[..., 3] = np.clip(data[..., 3], 0.0, 1.0)
        mode = "RGB" if img.shape[2] == 3 else "RGBA"
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    quantized = (data * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(quantized, mode=mode).save(str(path), format="PNG")


def read_png(path, srgb=True):
    """Read a PNG back to float in [0,1] (inverse of write_png)."""
    img = np.asarray(Image.open(str(path)), dtype=np.float64) / 255.0
    if srgb:
        if img.ndim == 2:
            img = srgb_decode(img)
        else:
            img[..., :3] = srgb_decode(img[..., :3])
    return img


# ---------------------------------------------------------------------------
# Minimal EXR: version-2 single-part scanline files, float32, no compression.
# Channel names are stored alphabetically as the format requires.
# ---------------------------------------------------------------------------

_EXR_MAGIC = 20000630


def _attr(name, type_name, payload):
    return (
        name.encode() + b"\x00"
        + type_name.encode() + b"\x00"
        + struct.pack("<i", len(payload))
        + payload
    )


def write_exr(path, img, channel_names=None):
    """Write a float image as an uncompressed float32 EXR.

    img: (H,W) or (H,W,C). Default channel names: Y for 1, RGB for 3,
    RGBA for 4 channels. Values may be negative (signed intermediates).
    """
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if channel_names is None:
        channel_names = {1: ["Y"], 3: ["R", "G", "B"], 4: ["R", "G", "B", "A"]}.get(c)
        if channel_names is None:
            channel_names = [f"C{i}" for i in range(c)]
    if len(channel_names) != c:
        raise ValueError("channel name count mismatch")

    order = sorted(range(c), key=lambda i: channel_names[i])
    chan_payload = b""
    for i in order:
        # per channel: name, pixel type (2 = float), pLinear + reserved, sampling
        chan_payload += channel_names[i].encode() + b"\x00"
        chan_payload += struct.pack("<i", 2) + struct.pack("<i", 0)
        chan_payload += struct.pack("<ii", 1, 1)
    chan_payload += b"\x00"

    box = struct.pack("<iiii", 0, 0, w - 1, h - 1)
    header = b""
    header += _attr("channels", "chlist", chan_payload)
    header += _attr("compression", "compression", b"\x00")  # NO_COMPRESSION
    header += _attr("dataWindow", "box2i", box)
    header += _attr("displayWindow", "box2i", box)
    header += _attr("lineOrder", "lineOrder", b"\x00")  # INCREASING_Y
    header += _attr("pixelAspectRatio", "float", struct.pack("<f", 1.0))
    header += _attr("screenWindowCenter", "v2f", struct.pack("<ff", 0.0, 0.0))
    header += _attr("screenWindowWidth", "float", struct.pack("<f", 1.0))
    header += b"\x00"

    preamble = struct.pack("<ii", _EXR_MAGIC, 2) + header
    table_pos = len(preamble)
    line_bytes = 8 + 4 * w * c  # y + size + planar float32 data
    first_line = table_pos + 8 * h
    offsets = struct.pack("<" + "Q" * h, *[first_line + line_bytes * y for y in range(h)])

    planar = np.ascontiguousarray(img[:, :, order].transpose(0, 2, 1))  # (H, C, W)
    with open(str(path), "wb") as f:
        f.write(preamble)
        f.write(offsets)
        for y in range(h):
            f.write(struct.pack("<ii", y, 4 * w * c))
            f.write(planar[y].astype("<f4").tobytes())


def _read_cstr(buf, pos):
    end = buf.index(b"\x00", pos)
    return buf[pos:end].decode(), end + 1


def read_exr(path):
    """Read an EXR written by write_exr. Returns (H,W) or (H,W,C) float32.

    Only the subset emitted by write_exr is supported (single-part scanline,
    float32, uncompressed); anything else raises ValueError.
    """
    with open(str(path), "rb") as f:
        buf = f.read()
    magic, version = struct.unpack_from("<ii", buf, 0)
    if magic != _EXR_MAGIC:
        raise ValueError("not an EXR file")
    if version & 0x200:
        raise ValueError("multi-part EXR not supported")
    pos = 8
    channels = []
    compression = None
    data_window = None
    while buf[pos] != 0:
        name, pos = _read_cstr(buf, pos)
        _type, pos = _read_cstr(buf, pos)
        (size,) = struct.unpack_from("<i", buf, pos)
        pos += 4
        payload = buf[pos:pos + size]
        pos += size
        if name == "channels":
            cpos = 0
            while payload[cpos] != 0:
                cname, cpos = _read_cstr(payload, cpos)
                (ptype,) = struct.unpack_from("<i", payload, cpos)
                if ptype != 2:
                    raise ValueError("only float32 channels supported")
                cpos += 16
                channels.append(cname)
        elif name == "compression":
            compression = payload[0]
        elif name == "dataWindow":
            data_window = struct.unpack("<iiii", payload)
    pos += 1
    if compression != 0:
        raise ValueError("only uncompressed EXR supported")
    x0, y0, x1, y1 = data_window
    w, h, c = x1 - x0 + 1, y1 - y0 + 1, len(channels)
    pos += 8 * h  # skip offset table; lines are contiguous in our writer
    out = np.empty((h, c, w), dtype=np.float32)
    for y in range(h):
        _, nbytes = struct.unpack_from("<ii", buf, pos)
        pos += 8
        out[y] = np.frombuffer(buf, dtype="<f4", count=w * c, offset=pos).reshape(c, w)
        pos += nbytes
    # undo the alphabetical storage order back to RGB(A) when recognizable
    img = out.transpose(0, 2, 1)
    want = {1: ["Y"], 3: ["R", "G", "B"], 4: ["R", "G", "B", "A"]}.get(c)
    if want is not None and sorted(channels) == sorted(want):
        perm = [channels.index(n) for n in want]
        img = img[:, :, perm]
    if c == 1:
        img = img[:, :, 0]
    return img
