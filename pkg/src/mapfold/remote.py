"""Wire protocol for out-of-process denoisers, plus the in-process client.

Frames are newline-delimited JSON over a byte stream (child-process stdio or
TCP); coordinate payloads are base64 of little-endian float32, row-major
(4N, 3), with no line breaks inside the base64.

    handshake   {"type":"hello","version":1,"dim":4N}
             -> {"type":"ready","version":1}
    request     {"type":"denoise","id":u64,"t":float,"x":b64}
    response    {"type":"xhat","id":u64,"x":b64}
    error       {"type":"error","id":u64,"message":str}

Optional batch extension (advertised in the ready frame capabilities):
requests may carry "xs": [b64, ...] and are answered with "xs".
"""

from __future__ import annotations

import base64
import json
import queue
import socket
import subprocess
import threading

import numpy as np

from .denoise import Denoiser

PROTOCOL_VERSION = 1


class TransportTimeout(TimeoutError):
    """No reply within the request timeout; the request may be retried."""


class ProtocolError(RuntimeError):
    """Malformed or inconsistent frame from the peer."""


class HandshakeError(RuntimeError):
    """Version or capability mismatch at connection setup; not retriable."""


def encode_coords(x) -> str:
    arr = np.ascontiguousarray(np.asarray(x), dtype="<f4")
    return base64.b64encode(arr.tobytes()).decode("ascii")


def decode_coords(payload: str, n_rows: int | None = None) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
    except Exception as exc:
        raise ProtocolError(f"bad base64 payload: {exc}") from exc
    if len(raw) % 12:
        raise ProtocolError("payload length is not a multiple of 12 bytes")
    arr = np.frombuffer(raw, dtype="<f4").reshape(-1, 3).astype(float)
    if n_rows is not None and arr.shape[0] != n_rows:
        raise ProtocolError(f"expected {n_rows} coordinate rows, got {arr.shape[0]}")
    return arr


class _LineTransport:
    """Owns read/write file objects plus a reader thread for timeouts."""

    def __init__(self, rfile, wfile, closer=None):
        self._rfile = rfile
        self._wfile = wfile
        self._closer = closer
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        try:
            for line in self._rfile:
                self._lines.put(line)
        except Exception as exc:  # surfaced on the next read
            self._lines.put(exc)
        self._lines.put(None)

    def send(self, obj: dict):
        data = (json.dumps(obj, separators=(",", ":")) + "\n").encode()
        self._wfile.write(data)
        self._wfile.flush()

    def recv(self, timeout: float | None):
        try:
            item = self._lines.get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"no frame within {timeout} s") from None
        if item is None:
            raise ProtocolError("connection closed by peer")
        if isinstance(item, Exception):
            raise ProtocolError(f"transport failure: {item}") from item
        try:
            return json.loads(item)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"peer sent invalid JSON: {exc}") from exc

    def close(self):
        for f in (self._wfile, self._rfile):
            try:
                f.close()
            except Exception:
                pass
        if self._closer is not None:
            self._closer()


def _connect(address):
    """Build a transport from 'tcp:HOST:PORT' or 'cmd:ARGV...' descriptors."""
    if address.startswith("tcp:"):
        _, host, port = address.split(":", 2)
        sock = socket.create_connection((host, int(port)))
        rfile = sock.makefile("rb")
        wfile = sock.makefile("wb")
        return _LineTransport(rfile, wfile, closer=sock.close)
    if address.startswith("cmd:"):
        argv = address[4:].split()
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        return _LineTransport(proc.stdout, proc.stdin, closer=proc.terminate)
    raise ValueError(f"unknown endpoint descriptor: {address!r}")


class RemoteDenoiserClient(Denoiser):
    """Synchronous client: one in-flight request, replies matched by id.

    Safe to share between replica threads; requests are serialised through
    an internal lock.
    """

    def __init__(self, address_or_transport, dim: int, timeout: float = 30.0):
        if isinstance(address_or_transport, str):
            self._transport = _connect(address_or_transport)
        else:
            self._transport = address_or_transport
        self.dim = int(dim)
        self.timeout = timeout
        self._next_id = 0
        self._lock = threading.Lock()
        self.capabilities: dict = {}
        self._handshake()

    def _handshake(self):
        self._transport.send(
            {"type": "hello", "version": PROTOCOL_VERSION, "dim": self.dim})
        reply = self._transport.recv(self.timeout)
        if reply.get("type") != "ready":
            raise HandshakeError(f"expected ready frame, got {reply!r}")
        if reply.get("version") != PROTOCOL_VERSION:
            raise HandshakeError(
                f"protocol version mismatch: ours {PROTOCOL_VERSION}, "
                f"peer {reply.get('version')!r}")
        self.capabilities = reply.get("capabilities", {})

    def _roundtrip(self, request: dict) -> dict:
        with self._lock:
            request_id = self._next_id
            self._next_id += 1
            request["id"] = request_id
            self._transport.send(request)
            reply = self._transport.recv(self.timeout)
        if reply.get("id") != request_id:
            raise ProtocolError(
                f"reply id {reply.get('id')!r} does not match request {request_id}")
        if reply.get("type") == "error":
            raise ProtocolError(f"peer error: {reply.get('message')}")
        return reply

    def denoise(self, x, t):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim, 3):
            raise ValueError(f"x must have shape ({self.dim}, 3)")
        reply = self._roundtrip(
            {"type": "denoise", "t": float(t), "x": encode_coords(x)})
        if reply.get("type") != "xhat" or "x" not in reply:
            raise ProtocolError(f"unexpected reply frame: {reply!r}")
        return decode_coords(reply["x"], self.dim)

    def denoise_batch(self, xs, t):
        """Batched request where the peer advertises it; else sequential."""
        xs = [np.asarray(x, dtype=float) for x in xs]
        if not self.capabilities.get("batch"):
            return [self.denoise(x, t) for x in xs]
        reply = self._roundtrip(
            {"type": "denoise", "t": float(t),
             "xs": [encode_coords(x) for x in xs]})
        if reply.get("type") != "xhat" or "xs" not in reply:
            raise ProtocolError(f"unexpected batch reply: {reply!r}")
        return [decode_coords(p, self.dim) for p in reply["xs"]]

    def close(self):
        self._transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_denoiser(denoiser_fn, rfile, wfile, batch: bool = False):
    """Answer protocol frames on a byte stream until EOF.

    ``denoiser_fn(x, t) -> xhat`` runs each request; exceptions become error
    frames and the stream stays open.  Used by the echo subcommand and by
    in-process test fixtures.
    """

    def send(obj):
        wfile.write((json.dumps(obj, separators=(",", ":")) + "\n").encode())
        wfile.flush()

    for line in rfile:
        if not line.strip():
            continue
        try:
            frame = json.loads(line)
        except json.JSONDecodeError:
            send({"type": "error", "id": 0, "message": "invalid JSON frame"})
            continue
        ftype = frame.get("type")
        if ftype == "hello":
            if frame.get("version") != PROTOCOL_VERSION:
                send({"type": "error", "id": 0,
                      "message": f"unsupported protocol version {frame.get('version')!r}"})
                continue
            send({"type": "ready", "version": PROTOCOL_VERSION,
                  "capabilities": {"batch": batch}})
            continue
        frame_id = frame.get("id", 0)
        if ftype != "denoise":
            send({"type": "error", "id": frame_id,
                  "message": f"unknown frame type {ftype!r}"})
            continue
        try:
            t = float(frame["t"])
            if "xs" in frame:
                if not batch:
                    raise ProtocolError("batch requests not enabled")
                outs = [encode_coords(denoiser_fn(decode_coords(p), t))
                        for p in frame["xs"]]
                send({"type": "xhat", "id": frame_id, "xs": outs})
            else:
                x = decode_coords(frame["x"])
                send({"type": "xhat", "id": frame_id,
                      "x": encode_coords(denoiser_fn(x, t))})
        except Exception as exc:
            send({"type": "error", "id": frame_id, "message": str(exc)})
