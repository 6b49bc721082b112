"""Writers for the fusion toolkit's backbone wire formats.

Implemented from the container layout, not by importing the toolkit: the
whole point of this tool is to produce the bytes independently so the
toolkit's reader can cross-check them.

Backbone blob ("VGGB"): magic, u32 version, u32 layer count, then per conv
layer four u32 dims followed by the f32 weight and bias payloads, then the
three-channel normalization mean and std as six f32 values, and finally a
64-bit FNV-1a checksum over everything before it. All little-endian.

Feature dump ("VGGD"): magic, u32 tap count, then per tap four u32 shape
dims and the f32 payload. No checksum.
"""

import struct

import numpy as np

FNV_OFFSET = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3
_MASK = 0xFFFFFFFFFFFFFFFF

BLOB_MAGIC = b"VGGB"
BLOB_VERSION = 1
DUMP_MAGIC = b"VGGD"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def fnv1a(data, h=FNV_OFFSET):
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK
    return h


def _f32(arr):
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_blob(layers, path):
    """layers: sixteen (weight (o,c,3,3), bias (o,)) float arrays.

    Returns the trailing checksum value.
    """
    buf = bytearray()
    buf += BLOB_MAGIC
    buf += struct.pack("<2I", BLOB_VERSION, len(layers))
    for w, b in layers:
        buf += struct.pack("<4I", *w.shape)
        buf += _f32(w)
        buf += _f32(b)
    for v in IMAGENET_MEAN + IMAGENET_STD:
        buf += struct.pack("<f", v)
    checksum = fnv1a(buf)
    buf += struct.pack("<Q", checksum)
    with open(path, "wb") as f:
        f.write(buf)
    return checksum


def write_dump(taps, path):
    """taps: rank-4 float arrays, written f32 in order."""
    buf = bytearray()
    buf += DUMP_MAGIC
    buf += struct.pack("<I", len(taps))
    for t in taps:
        arr = np.asarray(t, np.float32)
        buf += struct.pack("<4I", *arr.shape)
        buf += _f32(arr)
    with open(path, "wb") as f:
        f.write(buf)
