"""Message-passing contract used by every distributed step.

Three interchangeable backends share one deterministic reduction kernel, so
collective results are bit-identical everywhere:

* ``loopback``  - p logical ranks in one process exchanging references
                  through a shared rendezvous (p=1 process semantics).
* ``inproc``    - p worker threads exchanging serialized, owned frames
                  (the socket wire encoding without sockets).
* ``socket``    - p OS processes over TCP, length-prefixed little-endian
                  frames, rank 0 acting as the hub.

Reductions fold contributions in ascending rank order by default; a pairwise
tree mode exists for the benchmark harness. Every collective call carries a
sequence number so interleaving violations surface as errors, not deadlocks.
"""

from __future__ import annotations

import multiprocessing as mp
import pickle
import socket as socketlib
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import CollectiveContractError, TransportError, UsageError

KIND_SUM = 1
KIND_MAX = 2
KIND_ARGMIN = 3
KIND_BARRIER = 4
KIND_BCAST = 5
KIND_ALLGATHER = 6
KIND_HELLO = 7
KIND_ERROR = 0xFFFF

_HEADER = struct.Struct("<IQI")  # collective id, sequence number, rank

DEFAULT_TIMEOUT = 120.0

ORDERED = "ordered"
TREE = "tree"


@dataclass(frozen=True)
class ArgminKey:
    """Candidate record reduced lexicographically on (error, b1, b2, owner)."""

    error: float
    beta1: float
    beta2: float
    owner: int

    def __post_init__(self):
        if not np.isfinite(self.error):
            object.__setattr__(self, "error", float("inf"))

    @property
    def sort_key(self):
        return (self.error, self.beta1, self.beta2, self.owner)


# ---------------------------------------------------------------------------
# deterministic folds (shared by every backend)

def fold_sum(parts: list[np.ndarray], mode: str = ORDERED) -> np.ndarray:
    if mode == ORDERED:
        acc = parts[0].copy()
        for part in parts[1:]:
            acc += part
    else:
        level = [p.copy() for p in parts]
        while len(level) > 1:
            level = [level[i] + level[i + 1] if i + 1 < len(level) else level[i]
                     for i in range(0, len(level), 2)]
        acc = level[0]
    acc += 0.0  # normalize -0.0 so results are byte-stable across rank orders
    return acc


def fold_max(parts: list[np.ndarray]) -> np.ndarray:
    acc = parts[0].copy()
    for part in parts[1:]:
        np.maximum(acc, part, out=acc)
    return acc


def fold_argmin(parts: list[ArgminKey]) -> ArgminKey:
    best = parts[0]
    for key in parts[1:]:
        if key.sort_key < best.sort_key:
            best = key
    return best


# ---------------------------------------------------------------------------
# frame codec (inproc payloads and socket wire format)

def _encode_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def _decode_array(raw: bytes) -> np.ndarray:
    (ndim,) = struct.unpack_from("<B", raw, 0)
    dims = struct.unpack_from(f"<{ndim}Q", raw, 1)
    data = np.frombuffer(raw, dtype="<f8", offset=1 + 8 * ndim)
    return data.reshape(dims).copy()


def _encode_argmin(key: ArgminKey) -> bytes:
    return struct.pack("<dddI", key.error, key.beta1, key.beta2, key.owner)


def _decode_argmin(raw: bytes) -> ArgminKey:
    error, b1, b2, owner = struct.unpack("<dddI", raw)
    return ArgminKey(error=error, beta1=b1, beta2=b2, owner=owner)


def _encode_blob_list(blobs: list[bytes]) -> bytes:
    parts = [struct.pack("<I", len(blobs))]
    for b in blobs:
        parts.append(struct.pack("<Q", len(b)))
        parts.append(b)
    return b"".join(parts)


def _decode_blob_list(raw: bytes) -> list[bytes]:
    (count,) = struct.unpack_from("<I", raw, 0)
    out, offset = [], 4
    for _ in range(count):
        (ln,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        out.append(raw[offset : offset + ln])
        offset += ln
    return out


def _check_uniform(kind: int, seq: int, frames: list[tuple[int, int, bytes]]):
    """All ranks must be in the same collective with compatible payloads."""
    for f_kind, f_seq, payload in frames:
        if f_kind != kind or f_seq != seq:
            raise CollectiveContractError(
                f"collective mismatch: expected (kind={kind}, seq={seq}), "
                f"a rank sent (kind={f_kind}, seq={f_seq})")
    if kind in (KIND_SUM, KIND_MAX):
        shapes = set()
        for _, _, payload in frames:
            (ndim,) = struct.unpack_from("<B", payload, 0)
            shapes.add(struct.unpack_from(f"<{ndim}Q", payload, 1))
        if len(shapes) > 1:
            raise CollectiveContractError(
                f"collective dimension mismatch across ranks: {sorted(shapes)}")


def _reduce_frames(kind: int, payloads: list[bytes], mode: str) -> bytes:
    """Fold rank-ordered payloads into the result payload."""
    if kind == KIND_SUM:
        return _encode_array(fold_sum([_decode_array(p) for p in payloads], mode))
    if kind == KIND_MAX:
        return _encode_array(fold_max([_decode_array(p) for p in payloads]))
    if kind == KIND_ARGMIN:
        return _encode_argmin(fold_argmin([_decode_argmin(p) for p in payloads]))
    if kind == KIND_BARRIER:
        return b""
    if kind == KIND_BCAST:
        roots = {struct.unpack_from("<I", p, 0)[0] for p in payloads}
        if len(roots) != 1:
            raise CollectiveContractError(f"broadcast roots disagree: {sorted(roots)}")
        root = roots.pop()
        if root >= len(payloads):
            raise UsageError(f"broadcast root {root} outside 0..{len(payloads) - 1}")
        return payloads[root][4:]
    if kind == KIND_ALLGATHER:
        return _encode_blob_list(payloads)
    raise CollectiveContractError(f"unknown collective kind {kind}")


# ---------------------------------------------------------------------------
# handle API

class CommHandle:
    """One rank's endpoint; owns the sequence counter and the comm timer."""

    kind = "abstract"

    def __init__(self, rank: int, size: int, reduce_mode: str = ORDERED):
        if not 0 <= rank < size:
            raise UsageError(f"rank {rank} outside 0..{size - 1}")
        if reduce_mode not in (ORDERED, TREE):
            raise UsageError(f"unknown reduce mode {reduce_mode!r}")
        self.rank = rank
        self.size = size
        self.reduce_mode = reduce_mode
        self.seq = 0
        self.comm_seconds = 0.0

    # transport-specific: submit this rank's frame, return the result payload
    def _exchange(self, kind: int, payload: bytes) -> bytes:
        raise NotImplementedError

    def _collective(self, kind: int, payload: bytes) -> bytes:
        self.seq += 1
        t0 = time.perf_counter()
        try:
            return self._exchange(kind, payload)
        finally:
            self.comm_seconds += time.perf_counter() - t0

    def allreduce_sum_matrix(self, local: np.ndarray) -> np.ndarray:
        local = np.asarray(local, dtype=np.float64)
        if local.ndim != 2:
            raise UsageError(f"allreduce_sum_matrix needs a 2-d array, got {local.ndim}-d")
        return _decode_array(self._collective(KIND_SUM, _encode_array(local)))

    def allreduce_max_vector(self, local: np.ndarray) -> np.ndarray:
        local = np.asarray(local, dtype=np.float64)
        if local.ndim != 1:
            raise UsageError(f"allreduce_max_vector needs a 1-d array, got {local.ndim}-d")
        return _decode_array(self._collective(KIND_MAX, _encode_array(local)))

    def allreduce_argmin(self, key: ArgminKey) -> ArgminKey:
        return _decode_argmin(self._collective(KIND_ARGMIN, _encode_argmin(key)))

    def barrier(self) -> None:
        self._collective(KIND_BARRIER, b"")

    def broadcast_bytes(self, payload: bytes | None, root: int) -> bytes:
        body = payload if self.rank == root else b""
        if self.rank == root and payload is None:
            raise UsageError("broadcast root must supply a payload")
        return self._collective(KIND_BCAST, struct.pack("<I", root) + body)

    def allgather_bytes(self, payload: bytes) -> list[bytes]:
        return _decode_blob_list(self._collective(KIND_ALLGATHER, payload))

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# loopback and in-process backends (threads in one process)

class _ThreadGroup:
    """Shared rendezvous for p thread-backed ranks."""

    def __init__(self, size: int, timeout: float):
        self.size = size
        self.timeout = timeout
        self.barrier = threading.Barrier(size)
        self.lock = threading.Lock()
        self.slots: dict[int, dict[int, tuple[int, bytes]]] = {}
        self.reads: dict[int, int] = {}

    def abort(self):
        self.barrier.abort()

    def exchange(self, rank: int, kind: int, seq: int, payload: bytes,
                 reduce_mode: str) -> bytes:
        with self.lock:
            self.slots.setdefault(seq, {})[rank] = (kind, payload)
        try:
            self.barrier.wait(timeout=self.timeout)
        except threading.BrokenBarrierError as exc:
            # An abort can break a generation that logically completed (all
            # contributions present); only a genuinely missing peer is fatal.
            with self.lock:
                have_all = sorted(self.slots.get(seq, {})) == list(range(self.size))
            if not have_all:
                raise TransportError(
                    f"rank {rank}: collective seq={seq} timed out or a peer died"
                ) from exc
        with self.lock:
            slot = dict(self.slots.get(seq, {}))
        if sorted(slot) != list(range(self.size)):
            raise CollectiveContractError(
                f"collective seq={seq}: contributions from ranks "
                f"{sorted(slot)}, expected all of 0..{self.size - 1}")
        frames = [(slot[r][0], seq, slot[r][1]) for r in range(self.size)]
        _check_uniform(kind, seq, frames)
        result = _reduce_frames(kind, [f[2] for f in frames], reduce_mode)
        with self.lock:
            self.reads[seq] = self.reads.get(seq, 0) + 1
            if self.reads[seq] == self.size:
                self.slots.pop(seq, None)
                self.reads.pop(seq, None)
        return result


class LoopbackComm(CommHandle):
    """All ranks live in one process and meet at a shared rendezvous."""

    kind = "loopback"

    def __init__(self, rank: int, size: int, group: _ThreadGroup,
                 reduce_mode: str = ORDERED):
        super().__init__(rank, size, reduce_mode)
        self._group = group

    def _exchange(self, kind: int, payload: bytes) -> bytes:
        return self._group.exchange(self.rank, kind, self.seq, payload,
                                    self.reduce_mode)


class InprocComm(LoopbackComm):
    """Thread-backed ranks exchanging fully serialized frames.

    Contributions pass through the socket wire encoding (header + payload
    bytes), so nothing is shared mutably and the framing code is exercised
    without a transport.
    """

    kind = "inproc"

    def _exchange(self, kind: int, payload: bytes) -> bytes:
        frame = _HEADER.pack(kind, self.seq, self.rank) + payload
        f_kind, f_seq, f_rank = _HEADER.unpack_from(frame, 0)
        if (f_kind, f_seq, f_rank) != (kind, self.seq, self.rank):
            raise CollectiveContractError("frame header round-trip corrupted")
        body = bytes(frame[_HEADER.size:])
        return self._group.exchange(self.rank, kind, self.seq, body,
                                    self.reduce_mode)


# ---------------------------------------------------------------------------
# socket backend

def _recv_exact(sock: socketlib.socket, n: int) -> bytes:
    chunks = []
    while n:
        try:
            chunk = sock.recv(min(n, 1 << 20))
        except socketlib.timeout as exc:
            raise TransportError("socket collective timed out") from exc
        except OSError as exc:
            raise TransportError(f"peer connection lost: {exc}") from exc
        if not chunk:
            raise TransportError("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def _send_frame(sock: socketlib.socket, kind: int, seq: int, rank: int,
                payload: bytes) -> None:
    frame = _HEADER.pack(kind, seq, rank) + payload
    try:
        sock.sendall(struct.pack("<I", len(frame)) + frame)
    except OSError as exc:
        raise TransportError(f"send failed: {exc}") from exc


def _recv_frame(sock: socketlib.socket) -> tuple[int, int, int, bytes]:
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    frame = _recv_exact(sock, length)
    kind, seq, rank = _HEADER.unpack_from(frame, 0)
    return kind, seq, rank, frame[_HEADER.size:]


class SocketComm(CommHandle):
    """TCP backend; rank 0 is the hub that folds and redistributes frames."""

    kind = "socket"

    def __init__(self, rank: int, size: int, address: tuple[str, int],
                 reduce_mode: str = ORDERED, timeout: float = DEFAULT_TIMEOUT,
                 connect_timeout: float = 30.0):
        super().__init__(rank, size, reduce_mode)
        self.address = address
        self.timeout = timeout
        self._peers: dict[int, socketlib.socket] = {}
        self._hub: socketlib.socket | None = None
        self._listener: socketlib.socket | None = None
        if size == 1:
            return
        if rank == 0:
            self._listener = socketlib.socket()
            self._listener.setsockopt(socketlib.SOL_SOCKET, socketlib.SO_REUSEADDR, 1)
            self._listener.bind(address)
            self._listener.listen(size)
            self._listener.settimeout(connect_timeout)
            try:
                for _ in range(size - 1):
                    conn, _addr = self._listener.accept()
                    conn.settimeout(timeout)
                    conn.setsockopt(socketlib.IPPROTO_TCP, socketlib.TCP_NODELAY, 1)
                    kind, _seq, peer_rank, _ = _recv_frame(conn)
                    if kind != KIND_HELLO or not 1 <= peer_rank < size:
                        raise TransportError(f"bad hello from peer (kind={kind})")
                    self._peers[peer_rank] = conn
            except socketlib.timeout as exc:
                raise TransportError("rendezvous timed out waiting for peers") from exc
            if sorted(self._peers) != list(range(1, size)):
                raise TransportError(f"ranks {sorted(self._peers)} joined, expected 1..{size - 1}")
        else:
            deadline = time.monotonic() + connect_timeout
            while True:
                try:
                    self._hub = socketlib.create_connection(address, timeout=1.0)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise TransportError(f"cannot reach hub at {address}") from None
                    time.sleep(0.05)
            self._hub.settimeout(timeout)
            self._hub.setsockopt(socketlib.IPPROTO_TCP, socketlib.TCP_NODELAY, 1)
            _send_frame(self._hub, KIND_HELLO, 0, rank, b"")

    def _fail_peers(self, message: str) -> None:
        for conn in self._peers.values():
            try:
                _send_frame(conn, KIND_ERROR, self.seq, 0, message.encode())
            except TransportError:
                pass

    def _exchange(self, kind: int, payload: bytes) -> bytes:
        if self.size == 1:
            _check_uniform(kind, self.seq, [(kind, self.seq, payload)])
            return _reduce_frames(kind, [payload], self.reduce_mode)
        if self.rank == 0:
            frames = {0: (kind, self.seq, payload)}
            try:
                for peer_rank in range(1, self.size):
                    f_kind, f_seq, f_rank, f_payload = _recv_frame(self._peers[peer_rank])
                    if f_rank != peer_rank:
                        raise CollectiveContractError(
                            f"frame from rank {f_rank} on rank {peer_rank}'s connection")
                    frames[peer_rank] = (f_kind, f_seq, f_payload)
                _check_uniform(kind, self.seq, [frames[r] for r in range(self.size)])
                result = _reduce_frames(
                    kind, [frames[r][2] for r in range(self.size)], self.reduce_mode)
            except (TransportError, CollectiveContractError) as exc:
                self._fail_peers(str(exc))
                raise
            for peer_rank in range(1, self.size):
                _send_frame(self._peers[peer_rank], kind, self.seq, 0, result)
            return result
        _send_frame(self._hub, kind, self.seq, self.rank, payload)
        r_kind, _r_seq, _r_rank, r_payload = _recv_frame(self._hub)
        if r_kind == KIND_ERROR:
            raise CollectiveContractError(r_payload.decode())
        return r_payload

    def close(self) -> None:
        for conn in self._peers.values():
            conn.close()
        self._peers.clear()
        if self._hub is not None:
            self._hub.close()
            self._hub = None
        if self._listener is not None:
            self._listener.close()
            self._listener = None


# ---------------------------------------------------------------------------
# launchers

BACKENDS = ("loopback", "inproc", "socket")


def _thread_worker(handle, fn, args, results, errors, group, index):
    try:
        results[index] = fn(handle, *args)
    except BaseException as exc:  # noqa: BLE001 - reported to the launcher
        errors[index] = exc
        group.abort()
    finally:
        handle.close()


def _socket_worker(rank, size, address, reduce_mode, timeout, fn, args, queue):
    handle = None
    try:
        handle = SocketComm(rank, size, address, reduce_mode=reduce_mode,
                            timeout=timeout)
        result = fn(handle, *args)
        queue.put((rank, "ok", pickle.dumps(result)))
    except BaseException as exc:  # noqa: BLE001 - reported to the launcher
        try:
            blob = pickle.dumps(exc)
            pickle.loads(blob)
        except Exception:
            blob = pickle.dumps(TransportError(f"{type(exc).__name__}: {exc}"))
        queue.put((rank, "exc", blob))
    finally:
        if handle is not None:
            handle.close()


def run_ranks(size: int, fn, *, backend: str = "loopback", args: tuple = (),
              reduce_mode: str = ORDERED, timeout: float = DEFAULT_TIMEOUT,
              port: int = 0) -> list:
    """Run ``fn(handle, *args)`` on every rank; return per-rank results.

    Thread backends share this process; the socket backend forks one process
    per rank and rendezvouses over 127.0.0.1.
    """
    if backend not in BACKENDS:
        raise UsageError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    if backend in ("loopback", "inproc"):
        group = _ThreadGroup(size, timeout)
        cls = LoopbackComm if backend == "loopback" else InprocComm
        handles = [cls(r, size, group, reduce_mode) for r in range(size)]
        results: list = [None] * size
        errors: list = [None] * size
        threads = [
            threading.Thread(
                target=_thread_worker,
                args=(handles[r], fn, args, results, errors, group, r),
                name=f"rank-{r}", daemon=True)
            for r in range(size)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for exc in errors:
            if exc is not None:
                raise exc
        return results

    ctx = mp.get_context("fork")
    listener = socketlib.socket()
    listener.bind(("127.0.0.1", port))
    address = listener.getsockname()
    listener.close()

    queue = ctx.Queue()
    procs = [
        ctx.Process(
            target=_socket_worker,
            args=(r, size, address, reduce_mode, timeout, fn, args, queue),
            daemon=True)
        for r in range(size)
    ]
    for p in procs:
        p.start()
    outcomes: dict[int, tuple[str, bytes]] = {}
    deadline = time.monotonic() + timeout + 60.0
    while len(outcomes) < size:
        remaining = deadline - time.monotonic()
        if remaining <= 0 or (not any(p.is_alive() for p in procs) and queue.empty()):
            break
        try:
            rank, status, blob = queue.get(timeout=min(remaining, 1.0))
            outcomes[rank] = (status, blob)
        except Exception:
            continue
    for p in procs:
        p.join(timeout=5.0)
        if p.is_alive():
            p.terminate()
    missing = [r for r in range(size) if r not in outcomes]
    if missing:
        raise TransportError(f"ranks {missing} produced no result (crashed?)")
    for r in range(size):
        status, blob = outcomes[r]
        if status == "exc":
            raise pickle.loads(blob)
    return [pickle.loads(outcomes[r][1]) for r in range(size)]
