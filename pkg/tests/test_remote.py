import json
import socket
import threading

import numpy as np
import pytest

from mapfold.denoise import GaussianLibraryDenoiser
from mapfold.prior import Schedule, build_prior, unwhiten
from mapfold.remote import (HandshakeError, ProtocolError, RemoteDenoiserClient,
                            TransportTimeout, _LineTransport, decode_coords,
                            encode_coords, serve_denoiser)


def start_server(denoiser_fn, batch=False):
    """In-process server on one end of a socket pair; returns the client sock."""
    server_sock, client_sock = socket.socketpair()
    rfile = server_sock.makefile("rb")
    wfile = server_sock.makefile("wb")

    def run():
        try:
            serve_denoiser(denoiser_fn, rfile, wfile, batch=batch)
        except (BrokenPipeError, ValueError, OSError):
            pass

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    return client_sock


def make_client(denoiser_fn, dim, timeout=5.0, batch=False):
    sock = start_server(denoiser_fn, batch=batch)
    transport = _LineTransport(sock.makefile("rb"), sock.makefile("wb"),
                               closer=sock.close)
    return RemoteDenoiserClient(transport, dim, timeout=timeout)


class TestCodec:
    def test_roundtrip_is_float32(self, rng):
        x = rng.standard_normal((6, 3))
        back = decode_coords(encode_coords(x), 6)
        assert np.array_equal(back, x.astype(np.float32).astype(float))

    def test_bad_payloads(self):
        with pytest.raises(ProtocolError):
            decode_coords("not base64!!", 2)
        with pytest.raises(ProtocolError):
            decode_coords(encode_coords(np.zeros((2, 3))), 3)


class TestEchoTransport:
    def test_echo_roundtrip(self, rng):
        client = make_client(lambda x, t: x, dim=8)
        x = 100.0 * rng.standard_normal((8, 3))
        out = client.denoise(x, 0.5)
        scale = np.max(np.abs(x))
        assert np.max(np.abs(out - x)) <= 1e-5 * scale
        client.close()

    def test_all_zeros_server(self, rng):
        client = make_client(lambda x, t: np.zeros_like(x), dim=4)
        out = client.denoise(rng.standard_normal((4, 3)), 0.2)
        assert np.all(out == 0.0)
        client.close()

    def test_matches_local_gaussian_denoise(self, rng):
        prior = build_prior(4)
        sched = Schedule()
        mu = unwhiten(prior, rng.standard_normal((prior.dim, 3)))
        local = GaussianLibraryDenoiser(prior, sched, mu, spread=0.0)
        client = make_client(local.denoise, dim=prior.dim)
        x = unwhiten(prior, rng.standard_normal((prior.dim, 3)))
        out = client.denoise(x, 0.5)
        expect = local.denoise(x, 0.5)
        assert np.max(np.abs(out - expect)) <= 1e-5 * max(1.0, np.max(np.abs(expect)))
        client.close()

    def test_batch_extension(self, rng):
        client = make_client(lambda x, t: 2.0 * x, dim=4, batch=True)
        assert client.capabilities.get("batch") is True
        xs = [rng.standard_normal((4, 3)) for _ in range(3)]
        outs = client.denoise_batch(xs, 0.1)
        for x, out in zip(xs, outs):
            assert np.max(np.abs(out - 2 * x)) <= 1e-4 * max(1.0, np.max(np.abs(x)))
        client.close()


class TestProtocolErrors:
    def test_malformed_frame_keeps_stream_open(self):
        sock = start_server(lambda x, t: x)
        rfile = sock.makefile("rb")
        wfile = sock.makefile("wb")
        wfile.write(b"this is not json\n")
        wfile.flush()
        reply = json.loads(rfile.readline())
        assert reply["type"] == "error"
        # stream still answers a proper handshake afterwards
        wfile.write(json.dumps({"type": "hello", "version": 1, "dim": 4}).encode()
                    + b"\n")
        wfile.flush()
        reply = json.loads(rfile.readline())
        assert reply["type"] == "ready"
        sock.close()

    def test_unknown_type_gets_error_frame(self):
        sock = start_server(lambda x, t: x)
        rfile = sock.makefile("rb")
        wfile = sock.makefile("wb")
        wfile.write(json.dumps({"type": "mystery", "id": 9}).encode() + b"\n")
        wfile.flush()
        reply = json.loads(rfile.readline())
        assert reply["type"] == "error" and reply["id"] == 9
        sock.close()

    def test_version_mismatch_is_fatal(self):
        server_sock, client_sock = socket.socketpair()

        def bad_server():
            rfile = server_sock.makefile("rb")
            wfile = server_sock.makefile("wb")
            rfile.readline()
            wfile.write(json.dumps({"type": "ready", "version": 99}).encode()
                        + b"\n")
            wfile.flush()

        threading.Thread(target=bad_server, daemon=True).start()
        transport = _LineTransport(client_sock.makefile("rb"),
                                   client_sock.makefile("wb"),
                                   closer=client_sock.close)
        with pytest.raises(HandshakeError):
            RemoteDenoiserClient(transport, 4)

    def test_reply_shape_mismatch(self, rng):
        client = make_client(lambda x, t: x[:2], dim=4)
        with pytest.raises(ProtocolError):
            client.denoise(rng.standard_normal((4, 3)), 0.3)
        client.close()

    def test_timeout_is_retriable(self):
        server_sock, client_sock = socket.socketpair()

        def silent_server():
            rfile = server_sock.makefile("rb")
            wfile = server_sock.makefile("wb")
            rfile.readline()
            wfile.write(json.dumps({"type": "ready", "version": 1}).encode()
                        + b"\n")
            wfile.flush()
            rfile.readline()  # swallow the request, never answer

        threading.Thread(target=silent_server, daemon=True).start()
        transport = _LineTransport(client_sock.makefile("rb"),
                                   client_sock.makefile("wb"),
                                   closer=client_sock.close)
        client = RemoteDenoiserClient(transport, 4, timeout=0.2)
        with pytest.raises(TransportTimeout):
            client.denoise(np.zeros((4, 3)), 0.1)
        client.close()

    def test_server_error_frame_raises(self):
        def failing(x, t):
            raise RuntimeError("synthetic failure")

        client = make_client(failing, dim=4)
        with pytest.raises(ProtocolError, match="synthetic failure"):
            client.denoise(np.zeros((4, 3)), 0.1)
        client.close()
