"""Black box in a child process, spoken to over stdin/stdout.

Wire format (all integers little-endian u32, all reals little-endian f32):

    request   b"XBB1" H W C P  image[H*W*C]  params[P]
    response  b"XBR1" H W C    image[H*W*C]
    error     b"XBE1" n        utf-8 message[n]

Parameters travel as concrete values (the quantized tuple), one f32 each.
"""

from __future__ import annotations

import os
import selectors
import shlex
import struct
import subprocess
import sys
import time
from typing import BinaryIO, Callable, Optional, Sequence

import numpy as np

from .space import ParamSpace, bm3d_space, validate

REQ = b"XBB1"
RESP = b"XBR1"
ERR = b"XBE1"
MAX_EXTENT = 1 << 14


class ProtocolError(RuntimeError):
    pass


class PeerError(RuntimeError):
    """The peer answered with an error frame; the message is its text verbatim."""


def encode_request(image: np.ndarray, params: Sequence[float]) -> bytes:
    img = np.ascontiguousarray(image, dtype="<f4")
    if img.ndim != 3:
        raise ValueError("image must be H x W x C")
    h, w, c = img.shape
    p = np.asarray(params, dtype="<f4")
    return REQ + struct.pack("<4I", h, w, c, p.size) + img.tobytes() + p.tobytes()


def encode_response(image: np.ndarray) -> bytes:
    img = np.ascontiguousarray(image, dtype="<f4")
    return RESP + struct.pack("<3I", *img.shape) + img.tobytes()


def encode_error(message: str) -> bytes:
    raw = message.encode("utf-8")
    return ERR + struct.pack("<I", len(raw)) + raw


def _read_exact(read: Callable[[int], bytes], n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = read(n - len(buf))
        if not chunk:
            raise EOFError(f"stream ended after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def _dims(read, count: int) -> tuple:
    dims = struct.unpack(f"<{count}I", _read_exact(read, 4 * count))
    if any(d > MAX_EXTENT for d in dims):
        raise ProtocolError(f"implausible header {dims}")
    return dims


def read_request(read) -> Optional[tuple]:
    """Returns (image, params) or None on a clean end of stream."""
    magic = read(4)
    if not magic:
        return None
    magic += _read_exact(read, 4 - len(magic)) if len(magic) < 4 else b""
    if magic != REQ:
        raise ProtocolError(f"bad magic {magic!r}")
    h, w, c, p = _dims(read, 4)
    img = np.frombuffer(_read_exact(read, 4 * h * w * c), "<f4").reshape(h, w, c)
    params = np.frombuffer(_read_exact(read, 4 * p), "<f4")
    return img.astype(np.float32), params.astype(np.float64)


def read_response(read) -> np.ndarray:
    magic = _read_exact(read, 4)
    if magic == ERR:
        (n,) = struct.unpack("<I", _read_exact(read, 4))
        raise PeerError(_read_exact(read, n).decode("utf-8", errors="replace"))
    if magic != RESP:
        raise ProtocolError(f"bad magic {magic!r}")
    h, w, c = _dims(read, 3)
    return np.frombuffer(_read_exact(read, 4 * h * w * c), "<f4").reshape(h, w, c).astype(np.float32)


def serve(handler: Callable, stdin: BinaryIO, stdout: BinaryIO) -> int:
    """Answer requests until EOF.  Handler errors become error frames;
    a malformed request gets an error frame and ends the session."""
    read = stdin.read
    while True:
        try:
            req = read_request(read)
        except (ProtocolError, EOFError) as exc:
            stdout.write(encode_error(str(exc)))
            stdout.flush()
            return 1
        if req is None:
            return 0
        try:
            frame = encode_response(handler(*req))
        except Exception as exc:  # forwarded to the client verbatim
            frame = encode_error(str(exc))
        stdout.write(frame)
        stdout.flush()


def echo_handler(image, params):
    return image


def serve_echo() -> int:
    return serve(echo_handler, sys.stdin.buffer, sys.stdout.buffer)


class ExternalBlackBox:
    """Runs ``command`` once and sends one request per evaluation."""

    name = "external"

    def __init__(self, command, space: Optional[ParamSpace] = None, timeout: float = 60.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("empty external command")
        self.space = space or bm3d_space()
        self.timeout = float(timeout)
        self._proc: Optional[subprocess.Popen] = None

    def _start(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          stderr=subprocess.DEVNULL, bufsize=0)
        return self._proc

    def _reader(self, proc):
        sel = selectors.DefaultSelector()
        sel.register(proc.stdout, selectors.EVENT_READ)
        deadline = time.monotonic() + self.timeout
        fd = proc.stdout.fileno()

        def read(n):
            left = deadline - time.monotonic()
            if left <= 0 or not sel.select(left):
                self.close()
                raise TimeoutError(f"external black box gave no answer within {self.timeout:g}s")
            return os.read(fd, n)

        return read

    def evaluate(self, image, params) -> np.ndarray:
        validate(tuple(params), self.space)
        image = np.asarray(image, dtype=np.float32)
        proc = self._start()
        try:
            proc.stdin.write(encode_request(image, params))
            proc.stdin.flush()
            out = read_response(self._reader(proc))
        except (BrokenPipeError, EOFError):
            code = proc.poll()
            self.close()
            raise RuntimeError(f"external black box exited (status {code})") from None
        except ProtocolError:
            self.close()
            raise
        if out.shape != image.shape:
            raise ProtocolError(f"reply shape {out.shape} does not match request {image.shape}")
        return out

    def close(self):
        proc, self._proc = self._proc, None
        if proc is None:
            return
        for stream in (proc.stdin, proc.stdout):
            try:
                stream.close()
            except OSError:
                pass
        try:
            proc.wait(timeout=2)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
