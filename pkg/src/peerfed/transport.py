"""Wire protocol and transports for the peer-to-peer protocol.

Frame layout (everything little-endian):

    u32 length | u8 protocol_version | u16 sender | u64 request_id | u8 tag | payload

The length prefix counts the 12 header bytes plus the payload. Weight
payloads ship raw float64 parameters, so aggregation results do not
depend on which transport carried them.

Two transports share one client-side interface (``ping`` and
``fetch_weights``): an in-process simulated transport that is
deterministic given its seed and supports fault injection, and a TCP
transport so peers can run as separate processes.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

import numpy as np

PROTOCOL_VERSION = 1
HEADER_BYTES = 12  # version + sender + request_id + tag
DEFAULT_MAX_FRAME_BYTES = 64 * 1024 * 1024
DEFAULT_TIMEOUT_S = 10.0

TAG_PING_REQUEST = 1
TAG_PING_RESPONSE = 2
TAG_WEIGHTS_REQUEST = 3
TAG_WEIGHTS_RESPONSE = 4
TAG_ERROR = 5

ERR_VERSION_MISMATCH = 1
ERR_BAD_REQUEST = 2


class TransportError(Exception):
    """Base class for wire and delivery failures."""


class IncompleteFrameError(TransportError):
    """Fewer bytes than the frame claims."""


class OversizeFrameError(TransportError):
    """Length prefix exceeds the configured maximum."""


class ProtocolError(TransportError):
    """Structurally broken or unexpected message."""


class VersionMismatchError(ProtocolError):
    """Frame carries a protocol version this peer does not speak."""


class PeerUnreachableError(TransportError):
    """A peer could not be contacted (down, dropped, refused, timed out)."""


@dataclass(frozen=True)
class PeerAddress:
    client_index: int
    endpoint: str  # "host:port"

    def host_port(self) -> tuple[str, int]:
        host, _, port = self.endpoint.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"endpoint must be host:port, got {self.endpoint!r}")
        return host, int(port)


@dataclass(frozen=True)
class PingRequest:
    sender: int
    request_id: int


@dataclass(frozen=True)
class PingResponse:
    sender: int
    request_id: int
    own_version: int


@dataclass(frozen=True)
class WeightsRequest:
    sender: int
    request_id: int


@dataclass(frozen=True, eq=False)
class WeightsResponse:
    sender: int
    request_id: int
    sample_count: int
    params: np.ndarray

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, WeightsResponse)
            and self.sender == other.sender
            and self.request_id == other.request_id
            and self.sample_count == other.sample_count
            and self.params.tobytes() == other.params.tobytes()
        )


@dataclass(frozen=True)
class ErrorMessage:
    sender: int
    request_id: int
    code: int
    text: str


Message = PingRequest | PingResponse | WeightsRequest | WeightsResponse | ErrorMessage

_TAGS = {
    PingRequest: TAG_PING_REQUEST,
    PingResponse: TAG_PING_RESPONSE,
    WeightsRequest: TAG_WEIGHTS_REQUEST,
    WeightsResponse: TAG_WEIGHTS_RESPONSE,
    ErrorMessage: TAG_ERROR,
}


def encode(msg: Message) -> bytes:
    """Serialize a message into one complete frame."""
    tag = _TAGS.get(type(msg))
    if tag is None:
        raise ValueError(f"cannot encode {type(msg).__name__}")
    if isinstance(msg, (PingRequest, WeightsRequest)):
        payload = b""
    elif isinstance(msg, PingResponse):
        payload = struct.pack("<Q", msg.own_version)
    elif isinstance(msg, WeightsResponse):
        params = np.ascontiguousarray(msg.params, dtype="<f8")
        payload = struct.pack("<II", msg.sample_count, params.shape[0]) + params.tobytes()
    else:
        text = msg.text.encode("utf-8")
        payload = struct.pack("<HI", msg.code, len(text)) + text
    body = (
        struct.pack("<BHQB", PROTOCOL_VERSION, msg.sender, msg.request_id, tag) + payload
    )
    return struct.pack("<I", len(body)) + body


def decode(data: bytes, max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES) -> Message:
    """Parse exactly one frame; total over arbitrary bytes (raises, never crashes)."""
    if len(data) < 4:
        raise IncompleteFrameError(f"need 4 length bytes, have {len(data)}")
    (length,) = struct.unpack_from("<I", data, 0)
    if length > max_frame_bytes:
        raise OversizeFrameError(f"frame of {length} bytes exceeds cap {max_frame_bytes}")
    if len(data) - 4 < length:
        raise IncompleteFrameError(f"frame claims {length} bytes, have {len(data) - 4}")
    if len(data) - 4 > length:
        raise ProtocolError(f"{len(data) - 4 - length} trailing bytes after frame")
    if length < HEADER_BYTES:
        raise ProtocolError(f"frame of {length} bytes is shorter than the header")
    version, sender, request_id, tag = struct.unpack_from("<BHQB", data, 4)
    if version != PROTOCOL_VERSION:
        raise VersionMismatchError(
            f"protocol version {version} does not match {PROTOCOL_VERSION}"
        )
    payload = data[4 + HEADER_BYTES :]

    if tag == TAG_PING_REQUEST or tag == TAG_WEIGHTS_REQUEST:
        if payload:
            raise ProtocolError(f"unexpected {len(payload)}-byte payload on request")
        cls = PingRequest if tag == TAG_PING_REQUEST else WeightsRequest
        return cls(sender=sender, request_id=request_id)
    if tag == TAG_PING_RESPONSE:
        if len(payload) != 8:
            raise ProtocolError(f"ping response payload must be 8 bytes, got {len(payload)}")
        (own_version,) = struct.unpack("<Q", payload)
        return PingResponse(sender=sender, request_id=request_id, own_version=own_version)
    if tag == TAG_WEIGHTS_RESPONSE:
        if len(payload) < 8:
            raise ProtocolError(f"weights response payload too short: {len(payload)}")
        sample_count, n_params = struct.unpack_from("<II", payload, 0)
        if len(payload) != 8 + 8 * n_params:
            raise ProtocolError(
                f"weights payload of {len(payload)} bytes does not match {n_params} params"
            )
        params = np.frombuffer(payload, dtype="<f8", count=n_params, offset=8).copy()
        return WeightsResponse(
            sender=sender, request_id=request_id, sample_count=sample_count, params=params
        )
    if tag == TAG_ERROR:
        if len(payload) < 6:
            raise ProtocolError(f"error payload too short: {len(payload)}")
        code, text_len = struct.unpack_from("<HI", payload, 0)
        if len(payload) != 6 + text_len:
            raise ProtocolError("error payload length mismatch")
        try:
            text = payload[6:].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"error text is not valid UTF-8: {exc}") from exc
        return ErrorMessage(sender=sender, request_id=request_id, code=code, text=text)
    raise ProtocolError(f"unknown message tag {tag}")


def weights_frame_bytes(n_params: int) -> int:
    """Size of an encoded weights response carrying n_params parameters."""
    return 4 + HEADER_BYTES + 8 + 8 * n_params


@dataclass(frozen=True)
class TraceEntry:
    kind: str  # message kind, or "drop"/"unreachable" for lost traffic
    sender: int
    receiver: int
    nbytes: int


class SimTransport:
    """In-process transport: synchronous request/response, FIFO per pair.

    Every message still passes through encode/decode, so byte counts and
    framing behave exactly as on the wire. Fault injection: per-peer
    unreachable flags and a seeded per-message drop probability. The full
    message trace is a pure function of (registered nodes, seed, call
    sequence).
    """

    def __init__(self, n_clients: int, seed: int = 0, drop_prob: float = 0.0):
        if n_clients < 1:
            raise ValueError(f"n_clients must be >= 1, got {n_clients}")
        if not 0.0 <= drop_prob < 1.0:
            raise ValueError(f"drop_prob must be in [0, 1), got {drop_prob}")
        self.n_clients = n_clients
        self.drop_prob = drop_prob
        self.trace: list[TraceEntry] = []
        self._rng = np.random.default_rng(seed)
        self._nodes: dict[int, object] = {}
        self._down: set[int] = set()
        self._next_request_id = 0

    def register(self, client_index: int, node) -> None:
        if not 0 <= client_index < self.n_clients:
            raise ValueError(f"client index {client_index} out of range")
        self._nodes[client_index] = node

    def set_unreachable(self, client_index: int, down: bool = True) -> None:
        if down:
            self._down.add(client_index)
        else:
            self._down.discard(client_index)

    def _deliver(self, kind: str, sender: int, receiver: int, frame: bytes) -> None:
        down = receiver if receiver in self._down else sender if sender in self._down else None
        if down is not None:
            self.trace.append(TraceEntry("unreachable", sender, receiver, 0))
            raise PeerUnreachableError(f"client {down} is unreachable")
        if self.drop_prob > 0.0 and self._rng.random() < self.drop_prob:
            self.trace.append(TraceEntry("drop", sender, receiver, 0))
            raise PeerUnreachableError(f"message to client {receiver} was dropped")
        self.trace.append(TraceEntry(kind, sender, receiver, len(frame)))

    def _node(self, peer: int):
        node = self._nodes.get(peer)
        if node is None:
            raise PeerUnreachableError(f"client {peer} is not registered")
        return node

    def _request_id(self) -> int:
        self._next_request_id += 1
        return self._next_request_id

    def ping(self, sender: int, peer: int) -> int:
        request_id = self._request_id()
        request = encode(PingRequest(sender=sender, request_id=request_id))
        self._deliver("ping_request", sender, peer, request)
        decoded = decode(request)
        node = self._node(peer)
        response = encode(
            PingResponse(
                sender=peer, request_id=decoded.request_id, own_version=node.version_entry()
            )
        )
        self._deliver("ping_response", peer, sender, response)
        reply = decode(response)
        if reply.request_id != request_id:
            raise ProtocolError("ping response id does not match request")
        return reply.own_version

    def fetch_weights(self, sender: int, peer: int) -> tuple[np.ndarray, int, int]:
        request_id = self._request_id()
        request = encode(WeightsRequest(sender=sender, request_id=request_id))
        self._deliver("weights_request", sender, peer, request)
        decoded = decode(request)
        node = self._node(peer)
        params, sample_count = node.weights_payload()
        response = encode(
            WeightsResponse(
                sender=peer,
                request_id=decoded.request_id,
                sample_count=sample_count,
                params=params,
            )
        )
        self._deliver("weights_response", peer, sender, response)
        reply = decode(response)
        if reply.request_id != request_id:
            raise ProtocolError("weights response id does not match request")
        return reply.params, reply.sample_count, len(response)

    def delivered_bytes(self) -> int:
        return sum(entry.nbytes for entry in self.trace)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise IncompleteFrameError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket, max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES) -> bytes:
    """Read one length-prefixed frame off a socket."""
    prefix = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", prefix)
    if length > max_frame_bytes:
        raise OversizeFrameError(f"frame of {length} bytes exceeds cap {max_frame_bytes}")
    return prefix + _recv_exact(sock, length)


class _PeerRequestHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server = self.server  # carries client_index and respond, see TcpPeerServer
        while True:
            try:
                frame = read_frame(self.request)
            except (IncompleteFrameError, OSError):
                return  # connection closed
            except OversizeFrameError:
                return
            try:
                message = decode(frame)
            except ProtocolError as exc:
                code = (
                    ERR_VERSION_MISMATCH
                    if isinstance(exc, VersionMismatchError)
                    else ERR_BAD_REQUEST
                )
                reply = ErrorMessage(
                    sender=server.client_index, request_id=0, code=code, text=str(exc)
                )
                self._send(encode(reply))
                return
            self._send(encode(server.respond(message)))

    def _send(self, frame: bytes) -> None:
        try:
            self.request.sendall(frame)
        except OSError:
            pass


class TcpPeerServer:
    """Serves ping and weight reads for one client over TCP.

    The node's snapshot lock makes each read coherent while the owner
    thread trains and commits.
    """

    def __init__(self, node, client_index: int, host: str, port: int):
        self.node = node
        self.client_index = client_index

        class _Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = _Server((host, port), _PeerRequestHandler)
        # Hand the handler what it needs through the server object.
        self._server.client_index = client_index  # type: ignore[attr-defined]
        self._server.respond = self.respond  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def respond(self, message: Message) -> Message:
        if isinstance(message, PingRequest):
            return PingResponse(
                sender=self.client_index,
                request_id=message.request_id,
                own_version=self.node.version_entry(),
            )
        if isinstance(message, WeightsRequest):
            params, sample_count = self.node.weights_payload()
            return WeightsResponse(
                sender=self.client_index,
                request_id=message.request_id,
                sample_count=sample_count,
                params=params,
            )
        return ErrorMessage(
            sender=self.client_index,
            request_id=getattr(message, "request_id", 0),
            code=ERR_BAD_REQUEST,
            text=f"unexpected {type(message).__name__}",
        )


class TcpTransport:
    """Client side of the TCP protocol: one connection per request."""

    def __init__(
        self,
        self_index: int,
        peers: list[PeerAddress],
        timeout_s: float = DEFAULT_TIMEOUT_S,
    ):
        self.self_index = self_index
        self.timeout_s = timeout_s
        self._addresses = {p.client_index: p.host_port() for p in peers}
        self.n_clients = len(self._addresses)
        self._next_request_id = 0
        self.bytes_received = 0

    def _request(self, peer: int, message: Message) -> Message:
        address = self._addresses.get(peer)
        if address is None:
            raise PeerUnreachableError(f"no address for client {peer}")
        try:
            with socket.create_connection(address, timeout=self.timeout_s) as sock:
                sock.sendall(encode(message))
                frame = read_frame(sock)
        except (OSError, IncompleteFrameError) as exc:
            raise PeerUnreachableError(f"client {peer} unreachable: {exc}") from exc
        reply = decode(frame)
        if isinstance(reply, ErrorMessage):
            raise ProtocolError(f"client {peer} refused request: [{reply.code}] {reply.text}")
        if reply.request_id != message.request_id:
            raise ProtocolError(f"response id {reply.request_id} does not match request")
        self.bytes_received += len(frame)
        return reply

    def _request_id(self) -> int:
        self._next_request_id += 1
        return self._next_request_id

    def ping(self, sender: int, peer: int) -> int:
        reply = self._request(
            peer, PingRequest(sender=sender, request_id=self._request_id())
        )
        if not isinstance(reply, PingResponse):
            raise ProtocolError(f"expected ping response, got {type(reply).__name__}")
        return reply.own_version

    def fetch_weights(self, sender: int, peer: int) -> tuple[np.ndarray, int, int]:
        reply = self._request(
            peer, WeightsRequest(sender=sender, request_id=self._request_id())
        )
        if not isinstance(reply, WeightsResponse):
            raise ProtocolError(f"expected weights response, got {type(reply).__name__}")
        nbytes = weights_frame_bytes(reply.params.shape[0])
        return reply.params, reply.sample_count, nbytes


def parse_peer_table(entries: list[dict]) -> list[PeerAddress]:
    """Build a peer table from config entries {client_index, endpoint}."""
    peers = []
    seen = set()
    for entry in entries:
        extra = set(entry) - {"client_index", "endpoint"}
        if extra:
            raise ValueError(f"unknown peer table keys {sorted(extra)}")
        address = PeerAddress(int(entry["client_index"]), str(entry["endpoint"]))
        address.host_port()  # validate eagerly
        if address.client_index in seen:
            raise ValueError(f"duplicate client index {address.client_index} in peer table")
        seen.add(address.client_index)
        peers.append(address)
    return peers
