#!/usr/bin/env python3
"""Writes exporter_small.bin the way the activation exporter lays out a store.

Independent of the C++ writer: stdlib struct + json only. Row i, column r
holds (i * 8 + r) / 16 - 2, exactly representable in float32.
"""
import json
import struct
import sys

N_ROWS, DIM = 5, 8
META = {"corpus": "fixture.txt", "layer": 6, "model": "tiny-gpt", "source": "exporter", "tokens": N_ROWS}


def main(path):
    meta = json.dumps(META, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    body = b"".join(struct.pack("<f", (i * DIM + r) / 16 - 2) for i in range(N_ROWS) for r in range(DIM))
    header = b"PROXSAE1" + struct.pack("<IIQQQ", 1, 0, N_ROWS, DIM, len(meta))
    with open(path, "wb") as f:
        f.write(header + meta + body)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "exporter_small.bin")
