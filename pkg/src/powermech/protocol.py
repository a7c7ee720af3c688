"""Single-round release: bundle encoding and a one-shot TCP transfer.

Wire layout::

    b"PLRN1\\n"
    n=<int>\\n dim=<int>\\n eps_target=<%.17g>\\n delta=<%.17g>\\n
    lambda_adj=<%.17g>\\n schema_hash=<int>\\n
    \\n
    n*dim little-endian f64 embeddings, row-major
    n little-endian i64 labels
    CRC32 (IEEE) of everything above, little-endian u32

The server answers a valid bundle with ACK (0x06) and a corrupt one with NAK
(0x15), then closes. There is no retry and no second message.
"""

from __future__ import annotations

import logging
import math
import socket
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"PLRN1\n"
ACK = b"\x06"
NAK = b"\x15"
DEFAULT_TIMEOUT = 30.0
HEADER_KEYS = ("n", "dim", "eps_target", "delta", "lambda_adj", "schema_hash")
_MAX_HEADER = 4096


class BundleError(ValueError):
    cause = "invalid"


class MagicError(BundleError):
    cause = "magic"


class HeaderError(BundleError):
    cause = "header"


class CrcError(BundleError):
    cause = "crc"


class TruncationError(BundleError):
    cause = "truncation"


class NonFiniteError(BundleError):
    cause = "non-finite"


class ProtocolError(RuntimeError):
    """Transport-level failure: refused connection, timeout or NAK."""


@dataclass
class ReleaseBundle:
    embeddings: np.ndarray
    labels: np.ndarray
    eps_target: float
    delta: float
    lambda_adj: float
    schema_hash: int

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2:
            raise BundleError("embeddings must be a 2-d array")
        if self.labels.shape != (self.embeddings.shape[0],):
            raise BundleError("labels must have one entry per embedding row")
        if not (0 <= int(self.schema_hash) < 2 ** 32):
            raise BundleError("schema hash must be an unsigned 32-bit value")

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def same_as(self, other: "ReleaseBundle") -> bool:
        """Field-by-field equality, bitwise on floats."""
        f = lambda v: struct.pack("<d", v)  # noqa: E731
        return (self.embeddings.shape == other.embeddings.shape
                and self.embeddings.tobytes() == other.embeddings.tobytes()
                and np.array_equal(self.labels, other.labels)
                and f(self.eps_target) == f(other.eps_target) and f(self.delta) == f(other.delta)
                and f(self.lambda_adj) == f(other.lambda_adj)
                and int(self.schema_hash) == int(other.schema_hash))


def _check_finite(b: ReleaseBundle) -> None:
    if not np.all(np.isfinite(b.embeddings)):
        raise NonFiniteError("embeddings contain non-finite values")
    for k in ("eps_target", "delta", "lambda_adj"):
        if not math.isfinite(getattr(b, k)):
            raise NonFiniteError(f"{k} is not finite")


def _fmt(v: float) -> str:
    return "%.17g" % v


def encode_bundle(b: ReleaseBundle) -> bytes:
    _check_finite(b)
    head = (f"n={b.n}\ndim={b.dim}\neps_target={_fmt(b.eps_target)}\ndelta={_fmt(b.delta)}\n"
            f"lambda_adj={_fmt(b.lambda_adj)}\nschema_hash={int(b.schema_hash)}\n\n")
    body = (MAGIC + head.encode("utf-8")
            + np.ascontiguousarray(b.embeddings, dtype="<f8").tobytes()
            + np.ascontiguousarray(b.labels, dtype="<i8").tobytes())
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _parse_header(data: bytes) -> tuple[dict, int]:
    end = data.find(b"\n\n", len(MAGIC) - 1)
    if end < 0:
        if len(data) < _MAX_HEADER:
            raise TruncationError("header not terminated")
        raise HeaderError("header not terminated")
    try:
        lines = data[len(MAGIC):end].decode("utf-8").split("\n")
    except UnicodeDecodeError:
        raise HeaderError("header is not UTF-8") from None
    fields = {}
    for line in lines:
        key, sep, val = line.partition("=")
        if not sep:
            raise HeaderError(f"malformed header line {line!r}")
        fields[key] = val
    if list(fields) != list(HEADER_KEYS):
        raise HeaderError(f"header keys {list(fields)} != {list(HEADER_KEYS)}")
    try:
        out = {"n": int(fields["n"]), "dim": int(fields["dim"]),
               "eps_target": float(fields["eps_target"]), "delta": float(fields["delta"]),
               "lambda_adj": float(fields["lambda_adj"]), "schema_hash": int(fields["schema_hash"])}
    except ValueError as e:
        raise HeaderError(f"unparseable header value: {e}") from None
    if out["n"] < 0 or out["dim"] < 0:
        raise HeaderError("negative size in header")
    return out, end + 2


def decode_bundle(data: bytes) -> ReleaseBundle:
    data = bytes(data)
    if not data.startswith(MAGIC):
        if len(data) < len(MAGIC) and MAGIC.startswith(data):
            raise TruncationError("stream ends inside the magic")
        raise MagicError("bad magic")
    h, pos = _parse_header(data)
    n, dim = h["n"], h["dim"]
    need = pos + 8 * n * dim + 8 * n + 4
    if len(data) < need:
        raise TruncationError(f"expected {need} bytes, got {len(data)}")
    if len(data) > need:
        raise HeaderError(f"{len(data) - need} trailing byte(s) after bundle")
    if struct.unpack("<I", data[-4:])[0] != (zlib.crc32(data[:-4]) & 0xFFFFFFFF):
        raise CrcError("crc mismatch")
    emb = np.frombuffer(data, dtype="<f8", count=n * dim, offset=pos).reshape(n, dim).astype(np.float64)
    labels = np.frombuffer(data, dtype="<i8", count=n, offset=pos + 8 * n * dim).astype(np.int64)
    try:
        b = ReleaseBundle(emb, labels, h["eps_target"], h["delta"], h["lambda_adj"], h["schema_hash"])
    except BundleError as e:
        raise HeaderError(str(e)) from None
    _check_finite(b)
    return b


def expected_length(prefix: bytes) -> int | None:
    """Total bundle length implied by a received prefix, once its header is complete."""
    if not prefix.startswith(MAGIC):
        return None
    try:
        h, pos = _parse_header(prefix)
    except TruncationError:
        return None
    return pos + 8 * h["n"] * h["dim"] + 8 * h["n"] + 4


def write_bundle(path, b: ReleaseBundle) -> None:
    Path(path).write_bytes(encode_bundle(b))


def read_bundle(path) -> ReleaseBundle:
    return decode_bundle(Path(path).read_bytes())


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def send_bytes(address, payload: bytes, timeout: float = DEFAULT_TIMEOUT) -> bytes:
    """Write ``payload`` on one connection and return the single reply byte."""
    if isinstance(address, str):
        address = parse_address(address)
    try:
        with socket.create_connection(address, timeout=timeout) as s:
            s.sendall(payload)
            s.shutdown(socket.SHUT_WR)
            reply = s.recv(1)
    except socket.timeout:
        raise ProtocolError(f"no acknowledgement within {timeout} s") from None
    except OSError as e:
        raise ProtocolError(f"transfer to {address[0]}:{address[1]} failed: {e}") from None
    if reply == ACK:
        return reply
    if reply == NAK:
        raise ProtocolError("server rejected the bundle (NAK)")
    raise ProtocolError(f"unexpected reply {reply!r}")


def send_bundle(address, b: ReleaseBundle, timeout: float = DEFAULT_TIMEOUT) -> None:
    send_bytes(address, encode_bundle(b), timeout)


def _recv_bundle(conn: socket.socket) -> bytes:
    """Read until the length announced by the header, or EOF if it cannot be parsed."""
    buf = bytearray()
    want = None
    parsed = False
    while want is None or len(buf) < want:
        chunk = conn.recv(1 << 16)
        if not chunk:
            break
        buf += chunk
        if not parsed:
            try:
                want = expected_length(bytes(buf[:_MAX_HEADER]))
                parsed = want is not None
            except BundleError:
                parsed = True  # malformed header: drain to EOF and let decode reject it
    return bytes(buf)


class BundleServer:
    """Accepts connections one at a time; each carries exactly one bundle."""

    def __init__(self, address=("127.0.0.1", 0), timeout: float = DEFAULT_TIMEOUT):
        if isinstance(address, str):
            address = parse_address(address)
        self.timeout = timeout
        self.sock = socket.create_server(address)
        self.sock.settimeout(timeout)
        self.connections = 0
        self.last_bytes: bytes | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def serve_once(self) -> ReleaseBundle:
        try:
            conn, peer = self.sock.accept()
        except socket.timeout:
            raise ProtocolError(f"no client within {self.timeout} s") from None
        self.connections += 1
        with conn:
            conn.settimeout(self.timeout)
            try:
                data = _recv_bundle(conn)
            except socket.timeout:
                raise ProtocolError("client stalled mid-transfer") from None
            self.last_bytes = data
            try:
                b = decode_bundle(data)
            except BundleError as e:
                conn.sendall(NAK)
                raise ProtocolError(f"rejected bundle from {peer[0]}: {e.cause}: {e}") from e
            conn.sendall(ACK)
        log.info("received bundle n=%d dim=%d from %s", b.n, b.dim, peer[0])
        return b

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_once(address, timeout: float = DEFAULT_TIMEOUT) -> ReleaseBundle:
    with BundleServer(address, timeout) as srv:
        return srv.serve_once()
