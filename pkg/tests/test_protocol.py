import importlib.util
import struct
import threading
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from powermech import protocol as pr
from powermech.numkit import make_rng

GOLDEN = Path(__file__).parent / "golden"


def _golden_module():
    spec = importlib.util.spec_from_file_location("make_golden", GOLDEN / "make_golden.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def golden_bundle():
    rows, labels, eps, delta, lam, h = _golden_module().golden_fields()
    return pr.ReleaseBundle(np.array(rows), np.array(labels), eps, delta, lam, h)


def random_bundle(seed, n=None, d=None):
    rng = make_rng(seed)
    n = int(rng.integers(0, 40)) if n is None else n
    d = int(rng.integers(1, 8)) if d is None else d
    return pr.ReleaseBundle(rng.standard_normal((n, d)) * 10 ** rng.uniform(-3, 3, size=(n, d)),
                            rng.integers(-3, 1000, size=n), float(rng.uniform(0, 5)), float(rng.uniform(0, 1)),
                            float(rng.uniform(0.1, 3)), int(rng.integers(0, 2 ** 32)))


def test_golden_bytes_match_independent_encoder():
    data = (GOLDEN / "seed42.plb").read_bytes()
    b = golden_bundle()
    assert pr.encode_bundle(b) == data
    assert _golden_module().encode(*_golden_module().golden_fields()) == data
    assert pr.decode_bundle(data).same_as(b)


def test_independent_crc_matches():
    mod = _golden_module()
    for payload in (b"", b"123456789", bytes(range(256)) * 3):
        import zlib
        assert mod.crc32(payload) == zlib.crc32(payload)
    assert mod.crc32(b"123456789") == 0xCBF43926


def test_layout_single_row():
    b = pr.ReleaseBundle(np.array([[1.0, 2.0]]), np.array([0]), 1.0, 0.05, 1.0, 7)
    data = pr.encode_bundle(b)
    assert data[:6] == bytes([0x50, 0x4C, 0x52, 0x4E, 0x31, 0x0A])
    head = b"n=1\ndim=2\neps_target=1\ndelta=0.050000000000000003\nlambda_adj=1\nschema_hash=7\n\n"
    assert data[6:6 + len(head)] == head
    payload = data[6 + len(head):]
    assert payload[:8] == bytes.fromhex("000000000000f03f")
    assert payload[8:16] == bytes.fromhex("0000000000000040")
    assert payload[16:24] == bytes(8)
    assert len(payload) == 28


def test_empty_bundle():
    b = pr.ReleaseBundle(np.zeros((0, 3)), np.zeros(0, int), 0.5, 0.05, 1.0, 1)
    data = pr.encode_bundle(b)
    assert data.endswith(struct.pack("<I", __import__("zlib").crc32(data[:-4])))
    back = pr.decode_bundle(data)
    assert back.n == 0 and back.dim == 3 and back.same_as(b)


@pytest.mark.parametrize("seed", range(100))
def test_roundtrip(seed):
    b = random_bundle(seed)
    back = pr.decode_bundle(pr.encode_bundle(b))
    assert back.same_as(b)
    assert back.embeddings.tobytes() == b.embeddings.tobytes()


def test_every_payload_byte_flip_is_crc_error():
    data = pr.encode_bundle(random_bundle(3, n=4, d=3))
    start = data.index(b"\n\n") + 2
    for i in range(start, len(data)):
        bad = bytearray(data)
        bad[i] ^= 0x01
        with pytest.raises(pr.CrcError):
            pr.decode_bundle(bytes(bad))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 50), pos=st.integers(0, 10_000), mask=st.integers(1, 255))
def test_any_corruption_is_rejected(seed, pos, mask):
    data = bytearray(pr.encode_bundle(random_bundle(seed, n=3, d=2)))
    data[pos % len(data)] ^= mask
    with pytest.raises(pr.BundleError):
        pr.decode_bundle(bytes(data))


def test_rejection_causes():
    data = pr.encode_bundle(random_bundle(5, n=3, d=2))
    with pytest.raises(pr.TruncationError):
        pr.decode_bundle(data[:-3])
    with pytest.raises(pr.MagicError):
        pr.decode_bundle(b"PLRN2\n" + data[6:])
    with pytest.raises(pr.HeaderError):
        pr.decode_bundle(data.replace(b"dim=", b"dix=", 1))
    with pytest.raises(pr.HeaderError):
        pr.decode_bundle(data + b"\x00")
    with pytest.raises(pr.TruncationError):
        pr.decode_bundle(data[:4])
    causes = {c.cause for c in (pr.MagicError, pr.HeaderError, pr.CrcError, pr.TruncationError, pr.NonFiniteError)}
    assert len(causes) == 5


def test_non_finite_rejected_both_ways():
    b = pr.ReleaseBundle(np.array([[1.0, np.nan]]), np.array([1]), 1.0, 0.05, 1.0, 0)
    with pytest.raises(pr.NonFiniteError):
        pr.encode_bundle(b)
    good = pr.encode_bundle(pr.ReleaseBundle(np.array([[1.0, 2.0]]), np.array([1]), 1.0, 0.05, 1.0, 0))
    body = bytearray(good[:-4])
    start = body.index(b"\n\n") + 2
    body[start:start + 8] = struct.pack("<d", float("inf"))
    import zlib
    forged = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    with pytest.raises(pr.NonFiniteError):
        pr.decode_bundle(forged)


def test_bundle_invariants():
    with pytest.raises(pr.BundleError):
        pr.ReleaseBundle(np.zeros((2, 2)), np.zeros(3, int), 1.0, 0.05, 1.0, 0)
    with pytest.raises(pr.BundleError):
        pr.ReleaseBundle(np.zeros((2, 2)), np.zeros(2, int), 1.0, 0.05, 1.0, 2 ** 32)


def test_file_mode(tmp_path):
    b = golden_bundle()
    pr.write_bundle(tmp_path / "x.plb", b)
    assert (tmp_path / "x.plb").read_bytes() == (GOLDEN / "seed42.plb").read_bytes()
    assert pr.read_bundle(tmp_path / "x.plb").same_as(b)


class CountingServer(pr.BundleServer):
    """Counts request/response pairs seen on the wire."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.replies = 0

    def serve_once(self):
        try:
            return super().serve_once()
        finally:
            self.replies += 1


def _serve_in_thread(srv):
    out = {}

    def run():
        try:
            out["bundle"] = srv.serve_once()
        except Exception as e:  # surfaced through out["error"]
            out["error"] = e
    t = threading.Thread(target=run)
    t.start()
    return t, out


def test_loopback_golden_single_round():
    with CountingServer(("127.0.0.1", 0), timeout=10) as srv:
        t, out = _serve_in_thread(srv)
        pr.send_bundle(srv.address, golden_bundle(), timeout=10)
        t.join(10)
    assert out["bundle"].same_as(golden_bundle())
    assert srv.last_bytes == (GOLDEN / "seed42.plb").read_bytes()
    assert srv.connections == 1 and srv.replies == 1


def test_corrupted_stream_gets_nak():
    data = bytearray((GOLDEN / "seed42.plb").read_bytes())
    data[-10] ^= 0xFF
    with pr.BundleServer(("127.0.0.1", 0), timeout=10) as srv:
        t, out = _serve_in_thread(srv)
        with pytest.raises(pr.ProtocolError, match="NAK"):
            pr.send_bytes(srv.address, bytes(data), timeout=10)
        t.join(10)
    assert isinstance(out["error"], pr.ProtocolError)
    assert "crc" in str(out["error"])


def test_garbage_stream_gets_nak():
    with pr.BundleServer(("127.0.0.1", 0), timeout=10) as srv:
        t, out = _serve_in_thread(srv)
        with pytest.raises(pr.ProtocolError):
            pr.send_bytes(srv.address, b"hello\n\nworld" * 1000, timeout=10)
        t.join(10)
    assert "magic" in str(out["error"])


def test_ten_megabyte_loopback():
    rng = make_rng(9)
    b = pr.ReleaseBundle(rng.standard_normal((65536, 20)), rng.integers(0, 2, 65536), 1.0, 0.05, 1.0, 3)
    assert len(pr.encode_bundle(b)) > 10 * 1024 * 1024
    with pr.BundleServer(("127.0.0.1", 0), timeout=30) as srv:
        t, out = _serve_in_thread(srv)
        t0 = time.perf_counter()
        pr.send_bundle(srv.address, b, timeout=30)
        t.join(30)
        elapsed = time.perf_counter() - t0
    assert out["bundle"].same_as(b)
    assert elapsed < 30


def test_connection_refused_and_timeout():
    with pr.BundleServer(("127.0.0.1", 0)) as srv:
        addr = srv.address
    with pytest.raises(pr.ProtocolError):
        pr.send_bundle(addr, golden_bundle(), timeout=2)
    with pr.BundleServer(("127.0.0.1", 0), timeout=0.2) as srv:
        with pytest.raises(pr.ProtocolError, match="no client"):
            srv.serve_once()


def test_information_containment():
    from powermech import dataio, pipeline
    from powermech.config import RunConfig
    cfg = RunConfig(steps=20)
    ds = dataio.ring_benchmark(300, seed=1)
    run = pipeline.run_client(ds, cfg)
    bundle, chosen, _ = pipeline.make_bundle(run, 5.0)
    decoded = pr.decode_bundle(pr.encode_bundle(bundle))
    header = pr.encode_bundle(bundle).split(b"\n\n", 1)[0].decode()
    assert [ln.split("=")[0] for ln in header.splitlines()[1:]] == list(pr.HEADER_KEYS)
    assert set(vars(decoded)) == {"embeddings", "labels", "eps_target", "delta", "lambda_adj", "schema_hash"}
    raw = ds.X_train[chosen]
    assert not np.any(np.all(np.isclose(decoded.embeddings[:, None, :], raw[None, :, :]), axis=2))
    eps = run.table.eps_final[chosen]
    payload = decoded.embeddings.tobytes() + decoded.labels.tobytes()
    assert all(struct.pack("<d", e) not in payload for e in eps)


def test_parse_address():
    assert pr.parse_address("localhost:8080") == ("localhost", 8080)
    assert pr.parse_address(":9") == ("127.0.0.1", 9)
    with pytest.raises(ValueError):
        pr.parse_address("nohost")
