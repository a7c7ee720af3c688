"""Independent encoder for the seed-42 golden bundle.

Built from the byte layout alone: stdlib struct for the payload and a
table-driven CRC-32 (reflected polynomial 0xEDB88320). Shares no code with
the package. Run from this directory to regenerate ``seed42.plb``.
"""

import random
import struct
import sys


def crc32_table():
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ 0xEDB88320 if c & 1 else c >> 1
        table.append(c)
    return table


def crc32(data):
    table = crc32_table()
    c = 0xFFFFFFFF
    for byte in data:
        c = table[(c ^ byte) & 0xFF] ^ (c >> 8)
    return c ^ 0xFFFFFFFF


def golden_fields():
    rng = random.Random(42)
    n, dim = 6, 3
    rows = [[rng.gauss(0.0, 1.0) for _ in range(dim)] for _ in range(n)]
    labels = [rng.randint(0, 1) for _ in range(n)]
    return rows, labels, 1.0, 0.05, 1.0, 0xDEADBEEF


def encode(rows, labels, eps_target, delta, lambda_adj, schema_hash):
    n = len(rows)
    dim = len(rows[0]) if rows else 0
    out = bytearray(b"\x50\x4c\x52\x4e\x31\x0a")
    for key, value in (("n", str(n)), ("dim", str(dim)), ("eps_target", format(eps_target, ".17g")),
                       ("delta", format(delta, ".17g")), ("lambda_adj", format(lambda_adj, ".17g")),
                       ("schema_hash", str(schema_hash))):
        out += (key + "=" + value + "\n").encode("utf-8")
    out += b"\n"
    for row in rows:
        for v in row:
            out += struct.pack("<d", v)
    for lab in labels:
        out += struct.pack("<q", lab)
    out += struct.pack("<I", crc32(bytes(out)))
    return bytes(out)


if __name__ == "__main__":
    path = sys.argv[1] if len(sys.argv) > 1 else "seed42.plb"
    with open(path, "wb") as fh:
        fh.write(encode(*golden_fields()))
