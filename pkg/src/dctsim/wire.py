"""Byte-exact framing, simulated links, byte meters, and a time model.

Frame layout, all little-endian:

    magic 'DCTW' | version u8 | kind u8 | encoding u8 | reserved u8
    iteration u32 | tensor_id u32 | rows u32 | cols u32 | payload_len u32

28 bytes of header, then the payload:

    dense       4 * rows * cols value bytes (f32, row-major)
    bitmap      ceil(rows*cols/8) mask bytes (row-major, LSB-first),
                then 4 bytes per kept value in row-major kept order
    index-list  u32 kept count, then u32 ascending flat indices,
                then 4 bytes per kept value

Values are always f32 on the wire; runs at 64-bit precision never
serialize and meter their traffic with the closed-form lengths instead.
"""

import select
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .codecs import SparseUpdate
from .errors import (
    BadMagicError,
    BadVersionError,
    IndexRangeError,
    LinkClosedError,
    PopcountMismatchError,
    ShapeError,
    TruncatedFrameError,
    WireFormatError,
)

MAGIC = b"DCTW"
VERSION = 1
_HEADER = struct.Struct("<4sBBBBIIIII")
HEADER_BYTES = _HEADER.size  # 28

KINDS = {
    "activation-fwd": 1,
    "grad-bwd": 2,
    "param-grad": 3,
    "model-pull": 4,
    "model-push": 5,
}
_KIND_NAMES = {v: k for k, v in KINDS.items()}
_ENCODINGS = {"dense": 0, "bitmap": 1, "index-list": 2}
_ENCODING_NAMES = {v: k for k, v in _ENCODINGS.items()}


@dataclass
class WireMessage:
    kind: str
    iteration: int
    tensor_id: int
    update: SparseUpdate

    def __post_init__(self):
        if self.kind not in KINDS:
            raise WireFormatError(f"unknown message kind {self.kind!r}")


def payload_length(update: SparseUpdate) -> int:
    """Closed-form payload size in bytes, without serializing."""
    rc = update.rows * update.cols
    if update.encoding == "dense":
        return 4 * rc
    if update.encoding == "bitmap":
        return (rc + 7) // 8 + 4 * update.kept_count
    if update.encoding == "index-list":
        return 4 + 8 * update.kept_count
    raise WireFormatError(f"unknown encoding {update.encoding!r}")


def encoded_length(update: SparseUpdate) -> int:
    return HEADER_BYTES + payload_length(update)


def encode(msg: WireMessage) -> bytes:
    u = msg.update
    if u.values.dtype != np.float32:
        raise WireFormatError(
            f"wire values must be f32, got {u.values.dtype} (64-bit runs do not serialize)"
        )
    vals = np.ascontiguousarray(u.values, dtype="<f4").tobytes()
    if u.encoding == "dense":
        if u.kept_count != u.rows * u.cols:
            raise ShapeError("dense update must carry every entry")
        payload = vals
    elif u.encoding == "bitmap":
        flat = u.mask.ravel()
        if int(flat.sum()) != u.kept_count:
            raise PopcountMismatchError(
                f"bitmap keeps {int(flat.sum())} but {u.kept_count} values supplied"
            )
        payload = np.packbits(flat, bitorder="little").tobytes() + vals
    elif u.encoding == "index-list":
        if u.indices.size != u.kept_count:
            raise ShapeError("index count must match value count")
        payload = (
            struct.pack("<I", u.kept_count)
            + np.ascontiguousarray(u.indices, dtype="<u4").tobytes()
            + vals
        )
    else:
        raise WireFormatError(f"unknown encoding {u.encoding!r}")
    header = _HEADER.pack(
        MAGIC, VERSION, KINDS[msg.kind], _ENCODINGS[u.encoding], 0,
        msg.iteration, msg.tensor_id, u.rows, u.cols, len(payload),
    )
    return header + payload


def decode(buf: bytes) -> WireMessage:
    if len(buf) < HEADER_BYTES:
        raise TruncatedFrameError(f"frame of {len(buf)} bytes, header needs {HEADER_BYTES}")
    magic, version, kind_b, enc_b, _res, iteration, tensor_id, rows, cols, plen = \
        _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"version {version}, expected {VERSION}")
    if kind_b not in _KIND_NAMES:
        raise WireFormatError(f"unknown kind byte {kind_b}")
    if enc_b not in _ENCODING_NAMES:
        raise WireFormatError(f"unknown encoding byte {enc_b}")
    if len(buf) < HEADER_BYTES + plen:
        raise TruncatedFrameError(
            f"payload declares {plen} bytes, frame carries {len(buf) - HEADER_BYTES}"
        )
    if len(buf) > HEADER_BYTES + plen:
        raise WireFormatError(f"{len(buf) - HEADER_BYTES - plen} trailing bytes")
    payload = buf[HEADER_BYTES:]
    encoding = _ENCODING_NAMES[enc_b]
    rc = rows * cols

    if encoding == "dense":
        if plen != 4 * rc:
            raise TruncatedFrameError(f"dense payload {plen} bytes, need {4 * rc}")
        values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
        upd = SparseUpdate.dense(values)
    elif encoding == "bitmap":
        nmask = (rc + 7) // 8
        if plen < nmask or (plen - nmask) % 4 != 0:
            raise TruncatedFrameError(f"bitmap payload {plen} bytes malformed for {rows}x{cols}")
        bits = np.unpackbits(
            np.frombuffer(payload[:nmask], dtype=np.uint8), bitorder="little"
        )
        if bits[rc:].any():
            raise WireFormatError("set bits beyond the tensor extent")
        mask = bits[:rc].astype(bool).reshape(rows, cols)
        values = np.frombuffer(payload[nmask:], dtype="<f4")
        if int(mask.sum()) != values.size:
            raise PopcountMismatchError(
                f"mask keeps {int(mask.sum())}, payload carries {values.size} values"
            )
        upd = SparseUpdate(rows, cols, "bitmap", values.copy(), mask=mask)
    else:
        if plen < 4:
            raise TruncatedFrameError("index-list payload shorter than its count field")
        (count,) = struct.unpack_from("<I", payload)
        if plen != 4 + 8 * count:
            raise TruncatedFrameError(
                f"index-list payload {plen} bytes, {count} entries need {4 + 8 * count}"
            )
        indices = np.frombuffer(payload, dtype="<u4", count=count, offset=4)
        values = np.frombuffer(payload, dtype="<f4", count=count, offset=4 + 4 * count)
        if indices.size and int(indices.max()) >= rc:
            raise IndexRangeError(f"index {int(indices.max())} out of range for {rows}x{cols}")
        if indices.size > 1 and not np.all(indices[1:] > indices[:-1]):
            raise IndexRangeError("indices not strictly ascending")
        upd = SparseUpdate(rows, cols, "index-list", values.copy(), indices=indices.copy())
    return WireMessage(_KIND_NAMES[kind_b], iteration, tensor_id, upd)


class ChannelMeter:
    """Message and byte counts per (link, kind), for both directions.

    Thread-safe; snapshot() returns a consistent copy.  The csv dump has
    one row per (link, kind) with the sender-side totals.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._rows = {}

    def _row(self, link, kind):
        return self._rows.setdefault(
            (link, kind),
            {"sent_messages": 0, "sent_payload": 0, "sent_header": 0,
             "recv_messages": 0, "recv_payload": 0, "recv_header": 0},
        )

    def on_send(self, link, kind, header_bytes, payload_bytes):
        with self._lock:
            row = self._row(link, kind)
            row["sent_messages"] += 1
            row["sent_header"] += header_bytes
            row["sent_payload"] += payload_bytes

    def on_recv(self, link, kind, header_bytes, payload_bytes):
        with self._lock:
            row = self._row(link, kind)
            row["recv_messages"] += 1
            row["recv_header"] += header_bytes
            row["recv_payload"] += payload_bytes

    def snapshot(self):
        with self._lock:
            return {k: dict(v) for k, v in self._rows.items()}

    def conserved(self) -> bool:
        for row in self.snapshot().values():
            if (row["sent_messages"] != row["recv_messages"]
                    or row["sent_payload"] != row["recv_payload"]
                    or row["sent_header"] != row["recv_header"]):
                return False
        return True

    def total(self, field="sent_payload", link=None, kind=None) -> int:
        out = 0
        for (l, k), row in self.snapshot().items():
            if (link is None or l == link) and (kind is None or k == kind):
                out += row[field]
        return out

    def to_csv(self) -> str:
        lines = ["link,kind,messages,bytes"]
        for (link, kind), row in sorted(self.snapshot().items()):
            total = row["sent_header"] + row["sent_payload"]
            lines.append(f"{link},{kind},{row['sent_messages']},{total}")
        return "\n".join(lines) + "\n"


class InProcLink:
    """In-order exactly-once queue between two parties in one process.

    In wire mode every message is serialized and parsed back, so byte
    counts are measured, not estimated.  In object mode (64-bit runs) the
    update object is delivered as-is and the meter uses the closed-form
    frame length.
    """

    def __init__(self, name: str, meter: ChannelMeter = None, wire_mode: bool = False):
        self.name = name
        self.meter = meter if meter is not None else ChannelMeter()
        self.wire_mode = wire_mode
        self._q = deque()
        self._cv = threading.Condition()
        self._closed = False

    def send(self, msg: WireMessage):
        if self._closed:
            raise LinkClosedError(f"link {self.name} is closed")
        if self.wire_mode:
            frame = encode(msg)
            item = frame
            payload = len(frame) - HEADER_BYTES
        else:
            item = msg
            payload = payload_length(msg.update)
        self.meter.on_send(self.name, msg.kind, HEADER_BYTES, payload)
        with self._cv:
            self._q.append(item)
            self._cv.notify()

    def recv(self, timeout: float = 30.0) -> WireMessage:
        with self._cv:
            if not self._cv.wait_for(lambda: self._q or self._closed, timeout):
                raise LinkClosedError(f"link {self.name}: recv timed out")
            if not self._q:
                raise LinkClosedError(f"link {self.name} is closed")
            item = self._q.popleft()
        if self.wire_mode:
            msg = decode(item)
            payload = len(item) - HEADER_BYTES
        else:
            msg = item
            payload = payload_length(msg.update)
        self.meter.on_recv(self.name, msg.kind, HEADER_BYTES, payload)
        return msg

    def close(self):
        with self._cv:
            self._closed = True
            self._cv.notify_all()


class SocketLink:
    """The same contract over a loopback socket pair; frames only.

    Serialization is mandatory here, so this transport is only valid for
    32-bit runs.  Frames larger than the kernel buffer wait in a user-space
    queue and drain while the receiver reads, so a thread that sends and
    later receives on the same link cannot wedge itself.
    """

    def __init__(self, name: str, meter: ChannelMeter = None):
        self.name = name
        self.meter = meter if meter is not None else ChannelMeter()
        self._tx, self._rx = socket.socketpair()
        self._tx.setblocking(False)
        self._rx.setblocking(False)
        self._pending = deque()
        self._plock = threading.Lock()
        self._closed = False

    def _flush_some(self):
        with self._plock:
            while self._pending:
                head = self._pending[0]
                try:
                    n = self._tx.send(head)
                except (BlockingIOError, InterruptedError):
                    return
                if n < len(head):
                    self._pending[0] = head[n:]
                    return
                self._pending.popleft()

    def send(self, msg: WireMessage):
        if self._closed:
            raise LinkClosedError(f"link {self.name} is closed")
        frame = encode(msg)
        with self._plock:
            self._pending.append(memoryview(frame))
        self._flush_some()
        self.meter.on_send(self.name, msg.kind, HEADER_BYTES, len(frame) - HEADER_BYTES)

    def _read_exact(self, n: int, deadline: float) -> bytes:
        chunks = []
        while n:
            self._flush_some()
            try:
                chunk = self._rx.recv(n)
            except (BlockingIOError, InterruptedError):
                if time.monotonic() > deadline:
                    raise LinkClosedError(f"link {self.name}: recv timed out") from None
                select.select([self._rx], [], [], 0.05)
                continue
            if not chunk:
                raise LinkClosedError(f"link {self.name}: peer closed mid-frame")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def recv(self, timeout: float = 30.0) -> WireMessage:
        if self._closed:
            raise LinkClosedError(f"link {self.name} is closed")
        deadline = time.monotonic() + timeout
        header = self._read_exact(HEADER_BYTES, deadline)
        (plen,) = struct.unpack_from("<I", header, HEADER_BYTES - 4)
        frame = header + self._read_exact(plen, deadline)
        msg = decode(frame)
        self.meter.on_recv(self.name, msg.kind, HEADER_BYTES, plen)
        return msg

    def close(self):
        self._closed = True
        self._tx.close()
        self._rx.close()


def make_link(name, meter, transport: str, wire_mode: bool):
    if transport == "socket":
        if not wire_mode:
            raise ValueError("socket transport requires 32-bit wire mode")
        return SocketLink(name, meter)
    if transport == "inproc":
        return InProcLink(name, meter, wire_mode=wire_mode)
    raise ValueError(f"unknown transport {transport!r}")


@dataclass
class CostModel:
    """Additive simulated time: per-message latency, bytes over bandwidth,
    plus selection work charged per element."""

    latency: float = 0.0              # seconds per message
    bandwidth: float = float("inf")   # bytes per second
    sort_cost: float = 0.0            # seconds per element run through selection

    def transfer_time(self, messages: int, nbytes: int) -> float:
        return messages * self.latency + nbytes / self.bandwidth

    def compute_time(self, sorted_elements: int) -> float:
        return sorted_elements * self.sort_cost

    def simulated_time(self, meter: ChannelMeter, sorted_elements: int = 0) -> float:
        msgs = meter.total("sent_messages")
        nbytes = meter.total("sent_header") + meter.total("sent_payload")
        return self.transfer_time(msgs, nbytes) + self.compute_time(sorted_elements)
