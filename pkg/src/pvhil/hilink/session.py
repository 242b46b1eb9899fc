"""Lockstep plant/controller sessions over a reliable ordered byte stream.

A ``Channel`` wraps anything with ``sendall``/``recv``/``settimeout`` (a socket
or one end of ``memory_pipe``). One session is one connection handled by one
sequential loop on each side.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass, replace
from typing import Protocol

from ..dynamics import RunResult, World, controller_command
from ..pvplant import InverterController, InverterParams
from .codec import (
    HEADER,
    PROTOCOL_VERSION,
    Bye,
    CmdMsg,
    ErrorMsg,
    FrameError,
    Hello,
    HelloAck,
    MeasMsg,
    ProtocolError,
    decode_body,
    encode_frame,
    frame_length,
)

log = logging.getLogger(__name__)

STEP_TIMEOUT = 10.0  # s

# error codes carried in ERROR frames
ERR_VERSION = 1
ERR_CONFIG = 2
ERR_SEQUENCE = 3
ERR_TIMEOUT = 4
ERR_MALFORMED = 5
ERR_COMMAND = 6


class TransportError(RuntimeError):
    """Connection dropped, timed out, or the peer reported an error."""


class HandshakeError(TransportError):
    pass


class LinkTimeout(TransportError):
    pass


class ByteStream(Protocol):
    def sendall(self, data: bytes) -> None: ...
    def recv(self, n: int) -> bytes: ...
    def settimeout(self, timeout: float | None) -> None: ...
    def close(self) -> None: ...


@dataclass(frozen=True)
class LinkConfig:
    address: str
    role: str  # "plant" or "controller"
    protocol_version: int = PROTOCOL_VERSION
    dt: float = 1e-3
    step_count: int = 0
    digest: bytes = bytes(8)
    timeout: float = STEP_TIMEOUT

    def __post_init__(self) -> None:
        if self.role not in ("plant", "controller"):
            raise ValueError(f"unknown role {self.role!r}")
        if len(self.digest) != 8:
            raise ValueError("digest must be 8 bytes")

    def hello(self) -> Hello:
        return Hello(version=self.protocol_version, dt=self.dt, step_count=self.step_count, digest=self.digest)


class _PipeEnd:
    """One end of an in-memory duplex byte stream."""

    def __init__(self, inbox: bytearray, outbox: bytearray, cond: threading.Condition, closed: list[bool]):
        self._in = inbox
        self._out = outbox
        self._cond = cond
        self._closed = closed
        self._timeout: float | None = None

    def settimeout(self, timeout: float | None) -> None:
        self._timeout = timeout

    def sendall(self, data: bytes) -> None:
        with self._cond:
            if self._closed[0]:
                raise BrokenPipeError("pipe closed")
            self._out.extend(data)
            self._cond.notify_all()

    def recv(self, n: int) -> bytes:
        with self._cond:
            ok = self._cond.wait_for(lambda: self._in or self._closed[0], timeout=self._timeout)
            if not ok:
                raise socket.timeout("pipe read timed out")
            chunk = bytes(self._in[:n])
            del self._in[:n]
            return chunk

    def close(self) -> None:
        with self._cond:
            self._closed[0] = True
            self._cond.notify_all()


def memory_pipe() -> tuple[_PipeEnd, _PipeEnd]:
    a_to_b, b_to_a = bytearray(), bytearray()
    cond = threading.Condition()
    closed = [False]
    return _PipeEnd(b_to_a, a_to_b, cond, closed), _PipeEnd(a_to_b, b_to_a, cond, closed)


class Channel:
    """Frame-level reader/writer on top of a byte stream."""

    def __init__(self, stream: ByteStream, timeout: float = STEP_TIMEOUT):
        self.stream = stream
        self.stream.settimeout(timeout)

    def send(self, msg) -> None:
        try:
            self.stream.sendall(encode_frame(msg))
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.stream.recv(n - len(buf))
            except socket.timeout as exc:
                raise LinkTimeout("timed out waiting for peer") from exc
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                if buf:
                    raise FrameError("connection closed inside a frame")
                raise TransportError("connection closed by peer")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self):
        header = self._read_exact(HEADER.size)
        length = frame_length(header[:4])
        _, mtype = HEADER.unpack(header)
        payload = self._read_exact(length - 1)
        return decode_body(mtype, payload)

    def close(self) -> None:
        try:
            self.stream.close()
        except OSError:
            pass


def parse_address(address: str) -> tuple[int, object]:
    """``unix:/path`` or ``[tcp:]host:port`` -> (family, sockaddr)."""
    if address.startswith("unix:"):
        return socket.AF_UNIX, address[len("unix:") :]
    if address.startswith("tcp:"):
        address = address[len("tcp:") :]
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bad address {address!r}; expected host:port or unix:/path")
    return socket.AF_INET, (host or "127.0.0.1", int(port))


def format_address(family: int, sockaddr) -> str:
    if family == socket.AF_UNIX:
        return f"unix:{sockaddr}"
    return f"{sockaddr[0]}:{sockaddr[1]}"


def listen(address: str) -> socket.socket:
    family, sockaddr = parse_address(address)
    srv = socket.socket(family, socket.SOCK_STREAM)
    if family == socket.AF_INET:
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(sockaddr)
    srv.listen(1)
    return srv


def connect(address: str, retry_for: float = 5.0) -> socket.socket:
    family, sockaddr = parse_address(address)
    deadline = time.monotonic() + retry_for
    while True:
        sock = socket.socket(family, socket.SOCK_STREAM)
        try:
            sock.connect(sockaddr)
        except OSError:
            sock.close()
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)
            continue
        if family == socket.AF_INET:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock


def _try_send(chan: Channel, msg) -> None:
    try:
        chan.send(msg)
    except TransportError:
        pass


def _check_hello(hello: Hello, link: LinkConfig) -> ErrorMsg | None:
    if hello.version != link.protocol_version:
        return ErrorMsg(ERR_VERSION, f"protocol version {hello.version} != {link.protocol_version}")
    problems = []
    if hello.dt != link.dt:
        problems.append(f"dt {hello.dt!r} != {link.dt!r}")
    if hello.step_count != link.step_count:
        problems.append(f"step_count {hello.step_count} != {link.step_count}")
    if hello.digest != link.digest:
        problems.append("scenario digest mismatch")
    if problems:
        return ErrorMsg(ERR_CONFIG, "; ".join(problems))
    return None


def _abort(world: World, chan: Channel, code: int, text: str) -> RunResult:
    log.error("plant abort: %s", text)
    _try_send(chan, ErrorMsg(code, text))
    world.result.valid = False
    world.result.error = text
    return world.result


def plant_serve(world: World, link: LinkConfig, chan: Channel) -> RunResult:
    """Serve one controller session and return the (possibly partial) result.

    Handshake failures raise ``HandshakeError``; failures after the handshake
    return the partial result with ``valid = False``.
    """
    try:
        first = chan.recv()
    except ProtocolError as exc:
        _try_send(chan, ErrorMsg(ERR_MALFORMED, str(exc)))
        raise HandshakeError(f"malformed handshake: {exc}") from exc
    if not isinstance(first, Hello):
        _try_send(chan, ErrorMsg(ERR_MALFORMED, "expected HELLO"))
        raise HandshakeError(f"expected HELLO, got {type(first).__name__}")
    err = _check_hello(first, link)
    if err is not None:
        _try_send(chan, err)
        raise HandshakeError(err.message)
    chan.send(HelloAck(**vars(link.hello())))

    for _ in range(link.step_count):
        meas = world.measure()
        try:
            chan.send(meas)
            reply = chan.recv()
        except ProtocolError as exc:
            return _abort(world, chan, ERR_MALFORMED, f"step {meas.seq}: {exc}")
        except TransportError as exc:
            code = ERR_TIMEOUT if isinstance(exc, LinkTimeout) else ERR_MALFORMED
            return _abort(world, chan, code, f"step {meas.seq}: {exc}")
        if isinstance(reply, ErrorMsg):
            world.result.valid = False
            world.result.error = f"controller error {reply.code}: {reply.message}"
            return world.result
        if not isinstance(reply, CmdMsg):
            return _abort(world, chan, ERR_MALFORMED, f"step {meas.seq}: expected CMD, got {type(reply).__name__}")
        if reply.seq != meas.seq:
            return _abort(world, chan, ERR_SEQUENCE, f"CMD seq {reply.seq} does not match MEAS seq {meas.seq}")
        try:
            world.advance(meas, reply)
        except ValueError as exc:
            return _abort(world, chan, ERR_COMMAND, f"step {meas.seq}: {exc}")
    chan.send(Bye())
    return world.result


def controller_session(
    params: InverterParams, link: LinkConfig, p_avail: float, chan: Channel
) -> tuple[int, list[CmdMsg]]:
    """Controller loop; returns the exit status and the commands sent."""
    sent: list[CmdMsg] = []
    ctrl = InverterController(params, p_avail)
    try:
        chan.send(link.hello())
        ack = chan.recv()
        if isinstance(ack, ErrorMsg):
            log.error("handshake rejected: %s", ack.message)
            return 2, sent
        if not isinstance(ack, HelloAck):
            _try_send(chan, ErrorMsg(ERR_MALFORMED, "expected HELLO_ACK"))
            return 2, sent
        expected = 0
        while True:
            msg = chan.recv()
            if isinstance(msg, Bye):
                return 0, sent
            if isinstance(msg, ErrorMsg):
                log.error("plant error %d: %s", msg.code, msg.message)
                return 2, sent
            if not isinstance(msg, MeasMsg):
                _try_send(chan, ErrorMsg(ERR_MALFORMED, f"expected MEAS, got {type(msg).__name__}"))
                return 2, sent
            if msg.seq != expected:
                _try_send(chan, ErrorMsg(ERR_SEQUENCE, f"MEAS seq {msg.seq}, expected {expected}"))
                return 2, sent
            cmd = controller_command(ctrl, msg)
            chan.send(cmd)
            sent.append(cmd)
            expected += 1
    except ProtocolError as exc:
        _try_send(chan, ErrorMsg(ERR_MALFORMED, str(exc)))
        log.error("malformed frame: %s", exc)
        return 2, sent
    except TransportError as exc:
        log.error("transport failure: %s", exc)
        return 2, sent


def controller_run(params: InverterParams, link: LinkConfig, p_avail: float, chan: Channel | None = None) -> int:
    """Connect (unless a channel is given), run the session and return the exit status."""
    own = chan is None
    if own:
        try:
            chan = Channel(connect(link.address), timeout=link.timeout)
        except (OSError, ValueError) as exc:
            log.error("cannot connect to %s: %s", link.address, exc)
            return 2
    try:
        status, _ = controller_session(params, link, p_avail, chan)
        return status
    finally:
        if own:
            chan.close()


def plant_link(address: str, dt: float, step_count: int, digest: bytes) -> LinkConfig:
    return LinkConfig(address=address, role="plant", dt=dt, step_count=step_count, digest=digest)


def as_controller(link: LinkConfig) -> LinkConfig:
    return replace(link, role="controller")
