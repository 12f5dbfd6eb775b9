#!/usr/bin/env python3
"""Independent reference encoder for the .muc container; prints the golden
vectors quoted in FORMAT.md and frozen in the bitstream tests."""
import struct


def block_bits(base, count):
    return ((base ** count) - 1).bit_length() if count else 0


def header(config, rate, channels, token_rate, n_frames, n_cb, size, block_len):
    return b"MUC1" + struct.pack("<BBIBHIBIH", 1, config, rate, channels, token_rate,
                                 n_frames, n_cb, size, block_len)


def payload(frames, base, block_len):
    bits = []
    for t0 in range(0, len(frames), block_len):
        digits = [i for f in frames[t0:t0 + block_len] for i in f]
        value = sum(d * base ** j for j, d in enumerate(digits))
        width = block_bits(base, len(digits))
        bits += [(value >> i) & 1 for i in range(width)]
    out = bytearray((len(bits) + 7) // 8)
    for i, b in enumerate(bits):
        out[i // 8] |= b << (i % 8)
    return bytes(out)


VECTORS = [
    ("low_3", (1, 24000, 1, 25, 3, 1, 16384, 64), [[0], [1], [16383]]),
    ("high_3_block2", (2, 24000, 1, 25, 3, 4, 10000, 2),
     [[1, 2, 3, 4], [9999, 0, 0, 9999], [5, 6, 7, 8]]),
    ("low_empty", (1, 24000, 1, 25, 0, 1, 16384, 64), []),
]

if __name__ == "__main__":
    for name, h, frames in VECTORS:
        blob = header(*h) + payload(frames, h[6], h[7])
        print(name, len(blob), blob.hex())
