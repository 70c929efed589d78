"""Bit-level trigger embedding via k-LSB substitution over image bytes.

Conventions (fixed for cross-run reproducibility):
  * payload bytes stream MSB-first;
  * image bytes are visited row-major, channel-minor (C fastest), i.e. the
    natural flat order of an (H, W, C) uint8 array;
  * pass p writes bit planes [p*k, (p+1)*k); within one byte the earlier
    payload bit lands on the higher plane of the group;
  * a payload longer than one pass wraps to the next plane group, and at most
    4 bit planes may ever be touched, so a byte image of B bytes can carry
    B * k * floor(4 / k) payload bits.
"""

from dataclasses import dataclass

import numpy as np


class StegoError(Exception):
    pass


@dataclass(frozen=True)
class BytePayload:
    data: bytes

    def __post_init__(self):
        if not self.data:
            raise StegoError("payload must be nonempty")

    @property
    def size(self):
        return len(self.data)

    @property
    def bit_length(self):
        return 8 * len(self.data)


@dataclass(frozen=True)
class StegoConfig:
    bits_per_byte: int = 1  # k

    def __post_init__(self):
        if not 1 <= self.bits_per_byte <= 4:
            raise StegoError("bits_per_byte must be in 1..4")

    @property
    def max_passes(self):
        return 4 // self.bits_per_byte


def make_text_trigger(base, size):
    """Repeat `base` and truncate to exactly `size` ASCII characters."""
    if not base:
        raise StegoError("base text must be nonempty")
    if size < 1:
        raise StegoError("size must be >= 1")
    text = (base * (size // len(base) + 1))[:size]
    return BytePayload(text.encode("ascii"))


def _bit_positions(n_bits, n_bytes, k):
    """Map payload bit index -> (byte index, bit plane), grouped by pass."""
    i = np.arange(n_bits, dtype=np.int64)
    per_pass = n_bytes * k
    p = i // per_pass
    j = i % per_pass
    byte_idx = j // k
    plane = p * k + (k - 1 - (j % k))
    return p, byte_idx, plane


def _check_capacity(payload_bits, n_bytes, cfg):
    capacity = n_bytes * cfg.bits_per_byte * cfg.max_passes
    if payload_bits > capacity:
        raise StegoError(
            f"payload of {payload_bits} bits exceeds 4-plane capacity "
            f"{capacity} bits ({n_bytes} bytes, k={cfg.bits_per_byte})")


def lsb_embed(image, payload, cfg=StegoConfig()):
    """Embed a byte payload into the low bit planes of a byte image."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise StegoError(f"image must be byte-valued (uint8), got {img.dtype}")
    flat = img.reshape(-1).copy()
    bits = np.unpackbits(np.frombuffer(payload.data, dtype=np.uint8))
    _check_capacity(bits.size, flat.size, cfg)
    _, byte_idx, plane = _bit_positions(bits.size, flat.size, cfg.bits_per_byte)
    # Group writes by bit plane: each byte receives a given plane at most once,
    # so the fancy assignment never hits duplicate indices.
    for pl in np.unique(plane):
        sel = plane == pl
        bi, bv = byte_idx[sel], bits[sel].astype(np.uint8)
        keep = np.uint8(0xFF ^ (1 << int(pl)))
        flat[bi] = (flat[bi] & keep) | (bv << np.uint8(pl))
    return flat.reshape(img.shape)


def lsb_extract(image, n_bytes_out, cfg=StegoConfig()):
    """Recover `n_bytes_out` payload bytes embedded by lsb_embed."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise StegoError(f"image must be byte-valued (uint8), got {img.dtype}")
    if n_bytes_out < 1:
        raise StegoError("extraction length must be >= 1")
    flat = img.reshape(-1)
    n_bits = 8 * n_bytes_out
    _check_capacity(n_bits, flat.size, cfg)
    _, byte_idx, plane = _bit_positions(n_bits, flat.size, cfg.bits_per_byte)
    bits = (flat[byte_idx] >> plane.astype(np.uint8)) & 1
    return np.packbits(bits.astype(np.uint8)).tobytes()
