"""Remote backend sessions over a length-delimited TCP protocol.

Frames are a 4-byte big-endian payload length followed by that many
bytes of UTF-8 text.  Requests and responses are single space-separated
records; token ids are the dense vocabulary integers.

    client: HELLO <session> <vocab-descriptor>
            PREFILL <session> <n> <id> <id> ...
            DECODE <session> <temperature> <top_p> <seed>
            CHECKPOINT <session>
            ROLLBACK <session> <mark>
    server: OK [fields...]            (HELLO/CHECKPOINT/PREFILL: cache_len
                                       or mark; DECODE: token id)
            ERR <code> <message...>   codes: vocab_mismatch bad_mark
                                      empty_cache bad_request internal

A timed-out or half-delivered request leaves the remote cache state
unknown, so the client poisons the session: every later call raises
until a fresh session is connected.
"""
from __future__ import annotations

import logging
import socket
import struct
import threading
from typing import Callable, Sequence

from .backend import (
    Backend,
    BackendError,
    BadMarkError,
    EmptyCacheError,
    SamplingParams,
    VocabularyMismatchError,
)
from .tokenizer import Token, Vocabulary

log = logging.getLogger(__name__)

_HEADER = struct.Struct(">I")
MAX_FRAME_BYTES = 4 << 20


class RemoteError(BackendError):
    pass


class RemoteProtocolError(RemoteError):
    pass


class RemoteTimeoutError(RemoteError):
    pass


class PoisonedSessionError(RemoteError):
    """The session's remote state became unknowable; reconnect to continue."""


_ERROR_CODES: dict[str, type[BackendError]] = {
    "vocab_mismatch": VocabularyMismatchError,
    "bad_mark": BadMarkError,
    "empty_cache": EmptyCacheError,
    "bad_request": RemoteProtocolError,
    "internal": RemoteError,
}


def send_frame(sock: socket.socket, text: str) -> None:
    payload = text.encode("utf-8")
    if len(payload) > MAX_FRAME_BYTES:
        raise RemoteProtocolError(f"frame too large: {len(payload)} bytes")
    sock.sendall(_HEADER.pack(len(payload)) + payload)


def recv_frame(sock: socket.socket) -> str:
    header = _recv_exact(sock, _HEADER.size)
    (length,) = _HEADER.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise RemoteProtocolError(f"declared frame length too large: {length}")
    return _recv_exact(sock, length).decode("utf-8")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


# -- server -------------------------------------------------------------------


class BackendServer:
    """Serves backend sessions to framed-protocol clients, one thread each."""

    def __init__(
        self,
        backend_factory: Callable[[], Backend],
        host: str = "127.0.0.1",
        port: int = 0,
    ) -> None:
        self._factory = backend_factory
        self._listener = socket.create_server((host, port))
        self.address: tuple[str, int] = self._listener.getsockname()[:2]
        self._accept_thread: threading.Thread | None = None
        self._stopping = threading.Event()
        self._conn_threads: list[threading.Thread] = []

    def start(self) -> tuple[str, int]:
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self.address

    def stop(self) -> None:
        self._stopping.set()
        try:
            # close() alone does not wake a thread blocked in accept()
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._listener.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._conn_threads.append(t)

    def _serve_conn(self, conn: socket.socket) -> None:
        sessions: dict[str, Backend] = {}
        try:
            with conn:
                while True:
                    try:
                        request = recv_frame(conn)
                    except (ConnectionError, OSError):
                        return
                    send_frame(conn, self._dispatch(sessions, request))
        except OSError:
            return

    def _dispatch(self, sessions: dict[str, Backend], request: str) -> str:
        parts = request.split()
        if len(parts) < 2:
            return "ERR bad_request missing op or session"
        op, sid = parts[0], parts[1]
        try:
            if op == "HELLO":
                if len(parts) != 3:
                    return "ERR bad_request HELLO takes a vocab descriptor"
                backend = self._factory()
                if backend.vocab_descriptor != parts[2]:
                    return (
                        f"ERR vocab_mismatch server has {backend.vocab_descriptor}"
                    )
                sessions[sid] = backend
                return f"OK {backend.cache_len}"
            backend = sessions.get(sid)
            if backend is None:
                return "ERR bad_request unknown session (HELLO first)"
            if op == "PREFILL":
                n = int(parts[2])
                ids = [int(p) for p in parts[3:]]
                if len(ids) != n:
                    return "ERR bad_request token count mismatch"
                vocab = _session_vocab(backend)
                cache_len = backend.prefill([vocab.decode(i) for i in ids])
                return f"OK {cache_len}"
            if op == "DECODE":
                params = SamplingParams(
                    temperature=float(parts[2]), top_p=float(parts[3]), seed=int(parts[4])
                )
                tok = backend.decode_next(params)
                return f"OK {_session_vocab(backend).encode(tok)}"
            if op == "CHECKPOINT":
                return f"OK {backend.checkpoint()}"
            if op == "ROLLBACK":
                backend.rollback(int(parts[2]))
                return f"OK {backend.cache_len}"
            return f"ERR bad_request unknown op {op}"
        except VocabularyMismatchError as e:
            return f"ERR vocab_mismatch {e}"
        except BadMarkError as e:
            return f"ERR bad_mark {e}"
        except EmptyCacheError as e:
            return f"ERR empty_cache {e}"
        except (ValueError, IndexError) as e:
            return f"ERR bad_request {e}"
        except BackendError as e:
            return f"ERR internal {e}"


def _session_vocab(backend: Backend) -> Vocabulary:
    vocab = getattr(backend, "vocab", None)
    if vocab is None:
        raise BackendError("served backend must expose its vocabulary")
    return vocab


# -- client -------------------------------------------------------------------


class RemoteBackend:
    """Backend-contract client talking to a BackendServer."""

    def __init__(
        self,
        address: tuple[str, int],
        vocab: Vocabulary,
        timeout_s: float = 5.0,
        session_id: str = "s0",
    ) -> None:
        self.vocab = vocab
        self.vocab_descriptor = vocab.descriptor
        self._session_id = session_id
        self._poisoned: str | None = None
        self._cache_len = 0
        self._sock = socket.create_connection(address, timeout=timeout_s)
        reply = self._roundtrip(f"HELLO {session_id} {vocab.descriptor}")
        self._cache_len = int(reply[0])

    @property
    def cache_len(self) -> int:
        return self._cache_len

    def prefill(self, tokens: Sequence[Token]) -> int:
        if not tokens:
            raise ValueError("prefill of zero tokens")
        ids = " ".join(str(self.vocab.encode(t)) for t in tokens)
        reply = self._roundtrip(f"PREFILL {self._session_id} {len(tokens)} {ids}")
        self._cache_len = int(reply[0])
        return self._cache_len

    def decode_next(self, params: SamplingParams) -> Token:
        reply = self._roundtrip(
            f"DECODE {self._session_id} {params.temperature!r} {params.top_p!r} {params.seed}"
        )
        self._cache_len += 1
        return self.vocab.decode(int(reply[0]))

    def checkpoint(self) -> int:
        return int(self._roundtrip(f"CHECKPOINT {self._session_id}")[0])

    def rollback(self, mark: int) -> None:
        reply = self._roundtrip(f"ROLLBACK {self._session_id} {mark}")
        self._cache_len = int(reply[0])

    def close(self) -> None:
        self._sock.close()

    def _roundtrip(self, request: str) -> list[str]:
        if self._poisoned is not None:
            raise PoisonedSessionError(self._poisoned)
        try:
            send_frame(self._sock, request)
            reply = recv_frame(self._sock)
        except socket.timeout:
            self._poisoned = "request timed out; remote cache state unknown"
            raise RemoteTimeoutError(self._poisoned) from None
        except (ConnectionError, OSError) as e:
            self._poisoned = f"connection failed mid-request: {e}"
            raise RemoteError(self._poisoned) from e
        parts = reply.split()
        if not parts:
            raise RemoteProtocolError("empty reply")
        if parts[0] == "OK":
            return parts[1:]
        if parts[0] == "ERR" and len(parts) >= 2:
            exc = _ERROR_CODES.get(parts[1], RemoteError)
            raise exc(" ".join(parts[2:]) or parts[1])
        raise RemoteProtocolError(f"malformed reply: {reply!r}")
