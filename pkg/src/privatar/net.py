"""Framed wire protocol and host/client simulator for the offloaded path.

Every message is an envelope::

    magic "PVTR" | version u8 | msg_type u8 | session_id u64 | frame_id u64
    | payload_len u32 | payload

(little-endian). The trusted client sends HELLO with the session config,
then one OFFLOAD_LATENT per frame (d float32 values of the *noisy*
offloaded latent); the untrusted host answers with RETURN_COMPONENTS
(m float32 planes in id order) or ERROR.
"""

import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from ._container import FormatError
from .pipeline import OffloadSystem, client_encode, client_finish, host_decode

log = logging.getLogger(__name__)

MAGIC = b"PVTR"
VERSION = 1
HEADER = struct.Struct("<4sBBQQI")
MAX_PAYLOAD = 64 * 1024 * 1024

HELLO, ACK, OFFLOAD_LATENT, RETURN_COMPONENTS, ERROR, BYE = range(1, 7)
MSG_NAMES = {HELLO: "HELLO", ACK: "ACK", OFFLOAD_LATENT: "OFFLOAD_LATENT",
             RETURN_COMPONENTS: "RETURN_COMPONENTS", ERROR: "ERROR", BYE: "BYE"}

ERR_HASH_MISMATCH = 1
ERR_LENGTH_MISMATCH = 2
ERR_OUT_OF_ORDER = 3
ERR_BAD_MESSAGE = 4
ERR_CONFIG_MISMATCH = 5


class ProtocolError(FormatError):
    pass


class OffloadError(RuntimeError):
    """Session aborted; ``log`` holds the per-frame entries completed so far."""

    def __init__(self, message, code=None, log=None):
        super().__init__(message)
        self.code = code
        self.log = log or []


@dataclass(frozen=True)
class Envelope:
    msg_type: int
    session_id: int = 0
    frame_id: int = 0
    payload: bytes = b""


def encode_frame(env: Envelope) -> bytes:
    if env.msg_type not in MSG_NAMES:
        raise ProtocolError(f"unknown msg_type {env.msg_type}")
    if len(env.payload) > MAX_PAYLOAD:
        raise ProtocolError("payload exceeds 64 MiB")
    return HEADER.pack(MAGIC, VERSION, env.msg_type, env.session_id, env.frame_id,
                       len(env.payload)) + env.payload


def _parse_header(head: bytes):
    magic, version, msg_type, session_id, frame_id, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if msg_type not in MSG_NAMES:
        raise ProtocolError(f"unknown msg_type {msg_type}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds 64 MiB")
    return msg_type, session_id, frame_id, length


def decode_frame(buf: bytes) -> Envelope:
    """Decode exactly one envelope from ``buf``."""
    if len(buf) < HEADER.size:
        raise ProtocolError("truncated envelope header")
    msg_type, session_id, frame_id, length = _parse_header(buf[:HEADER.size])
    payload = buf[HEADER.size:]
    if len(payload) != length:
        raise ProtocolError(f"payload_len {length} but {len(payload)} payload bytes")
    return Envelope(msg_type, session_id, frame_id, bytes(payload))


def _recv_exact(sock, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise ProtocolError("connection closed mid-message" if got else "connection closed")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> Envelope:
    msg_type, session_id, frame_id, length = _parse_header(_recv_exact(sock, HEADER.size))
    payload = _recv_exact(sock, length) if length else b""
    return Envelope(msg_type, session_id, frame_id, payload)


def send_frame(sock, env: Envelope):
    sock.sendall(encode_frame(env))


# -- session config (HELLO payload) ----------------------------------------

@dataclass(frozen=True)
class SessionConfig:
    B: int
    offloaded_ids: tuple
    latent_dim: int
    codec_hash: int
    calibration_hash: int
    plane_height: int
    plane_width: int
    channels: int = 3

    def __post_init__(self):
        ids = tuple(int(k) for k in self.offloaded_ids)
        object.__setattr__(self, "offloaded_ids", ids)
        if list(ids) != sorted(set(ids)) or any(not 0 <= k < self.B * self.B for k in ids):
            raise ValueError("offloaded ids must be sorted, unique and within [0, B^2)")
        if not self.codec_hash or not self.calibration_hash:
            raise ValueError("session hashes must be nonzero")

    @property
    def plane_size(self) -> int:
        return self.plane_height * self.plane_width * self.channels

    def to_bytes(self) -> bytes:
        m = len(self.offloaded_ids)
        return (struct.pack("<BH", self.B, m) + bytes(self.offloaded_ids)
                + struct.pack("<IQQIII", self.latent_dim, self.codec_hash, self.calibration_hash,
                              self.plane_height, self.plane_width, self.channels))

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SessionConfig":
        try:
            B, m = struct.unpack_from("<BH", buf, 0)
            ids = tuple(buf[3:3 + m])
            rest = struct.unpack_from("<IQQIII", buf, 3 + m)
        except struct.error as exc:
            raise ProtocolError("truncated session config") from exc
        if len(buf) != 3 + m + struct.calcsize("<IQQIII") or len(ids) != m:
            raise ProtocolError("session config length mismatch")
        d, ch, calh, ph, pw, c = rest
        return cls(B, ids, d, ch, calh, ph, pw, c)

    @classmethod
    def for_system(cls, system: OffloadSystem, calibration_hash: int) -> "SessionConfig":
        plan = system.plan
        return cls(plan.B, plan.offloaded_ids, system.offload_codec.latent_dim,
                   system.offload_codec.content_hash, calibration_hash,
                   system.height // plan.B, system.width // plan.B, 3)


def error_payload(code: int, message: str) -> bytes:
    return struct.pack("<H", code) + message.encode()


def parse_error(payload: bytes):
    if len(payload) < 2:
        return ERR_BAD_MESSAGE, "malformed error"
    return struct.unpack_from("<H", payload)[0], payload[2:].decode(errors="replace")


# -- untrusted host ---------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        host = self.server.host
        sock = self.request
        sock.settimeout(host.idle_timeout)
        config = None
        codec = None
        last_frame = -1
        session_id = 0
        while True:
            try:
                env = read_frame(sock)
            except (socket.timeout, ProtocolError, OSError) as exc:
                log.debug("session %x closed: %s", session_id, exc)
                return
            if host.recorder is not None:
                host.recorder(env)

            def fail(code, message):
                send_frame(sock, Envelope(ERROR, env.session_id, env.frame_id,
                                          error_payload(code, message)))

            if env.msg_type == BYE:
                return
            if config is None:
                if env.msg_type != HELLO:
                    fail(ERR_BAD_MESSAGE, "expected HELLO")
                    return
                try:
                    cfg = SessionConfig.from_bytes(env.payload)
                except (ValueError, ProtocolError) as exc:
                    fail(ERR_BAD_MESSAGE, str(exc))
                    return
                codec = host.codecs.get(cfg.codec_hash)
                if codec is None:
                    fail(ERR_HASH_MISMATCH, f"unknown codec hash {cfg.codec_hash:016x}")
                    return
                if (codec.latent_dim != cfg.latent_dim
                        or codec.input_dim != len(cfg.offloaded_ids) * cfg.plane_size):
                    fail(ERR_CONFIG_MISMATCH, "codec does not match session geometry")
                    return
                config, session_id = cfg, env.session_id
                send_frame(sock, Envelope(ACK, session_id, env.frame_id))
                continue
            if env.msg_type != OFFLOAD_LATENT:
                fail(ERR_BAD_MESSAGE, f"unexpected {MSG_NAMES[env.msg_type]}")
                return
            if env.frame_id <= last_frame:
                fail(ERR_OUT_OF_ORDER, f"frame {env.frame_id} after {last_frame}")
                return
            if len(env.payload) != 4 * config.latent_dim:
                fail(ERR_LENGTH_MISMATCH, f"latent payload {len(env.payload)} bytes")
                return
            last_frame = env.frame_id
            latent = np.frombuffer(env.payload, dtype="<f4")
            planes = host_decode_geometry(codec, latent, config)
            send_frame(sock, Envelope(RETURN_COMPONENTS, session_id, env.frame_id,
                                      planes.astype("<f4").tobytes()))


def host_decode_geometry(codec, latent, config: SessionConfig) -> np.ndarray:
    from .frequency import PartitionPlan

    n = config.B * config.B
    plan = PartitionPlan(config.B, config.offloaded_ids,
                         tuple(k for k in range(n) if k not in config.offloaded_ids),
                         keep_base_local=False)
    return host_decode(codec, latent, plan, config.plane_height * config.B,
                       config.plane_width * config.B)


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class OffloadHost:
    """Untrusted decoder host.

    Args:
        codecs: offloaded-path codecs; looked up by content hash from HELLO.
        recorder: optional callable invoked with every received envelope
            (lets tests audit exactly what the untrusted side observes).
        idle_timeout: seconds of silence before a session is dropped.
    """

    def __init__(self, codecs, recorder=None, idle_timeout: float = 30.0):
        codecs = list(codecs.values()) if isinstance(codecs, dict) else list(codecs)
        self.codecs = {c.content_hash: c for c in codecs}
        self.recorder = recorder
        self.idle_timeout = idle_timeout
        self._server = None
        self._thread = None

    @property
    def address(self):
        return self._server.server_address

    def start(self, address=("127.0.0.1", 0)) -> "OffloadHost":
        self._server = _Server(address, _Handler)
        self._server.host = self
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self, address):
        self._server = _Server(address, _Handler)
        self._server.host = self
        self._server.serve_forever()

    def shutdown(self):
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(address, codecs, recorder=None, idle_timeout: float = 30.0) -> OffloadHost:
    """Start a host in a background thread and return it."""
    return OffloadHost(codecs, recorder, idle_timeout).start(address)


# -- trusted client ---------------------------------------------------------

@dataclass
class FrameLog:
    frame_id: int
    encode_s: float
    roundtrip_s: float
    local_decode_s: float
    merge_s: float


@dataclass
class OffloadClient:
    address: tuple
    session_id: int = 1
    timeout: float = 5.0
    sock: socket.socket = field(default=None, repr=False)

    def connect(self, config: SessionConfig):
        self.sock = socket.create_connection(self.address, timeout=self.timeout)
        self.sock.settimeout(self.timeout)
        send_frame(self.sock, Envelope(HELLO, self.session_id, 0, config.to_bytes()))
        reply = self._read()
        if reply.msg_type != ACK:
            raise OffloadError(f"expected ACK, got {MSG_NAMES[reply.msg_type]}")
        self.config = config
        return self

    def _read(self) -> Envelope:
        try:
            env = read_frame(self.sock)
        except socket.timeout as exc:
            raise OffloadError("timed out waiting for host") from exc
        except (ProtocolError, OSError) as exc:
            raise OffloadError(f"connection failed: {exc}") from exc
        if env.msg_type == ERROR:
            code, message = parse_error(env.payload)
            raise OffloadError(f"host error {code}: {message}", code)
        return env

    def offload(self, latent_f32, frame_id: int) -> np.ndarray:
        latent = np.asarray(latent_f32, dtype="<f4")
        send_frame(self.sock, Envelope(OFFLOAD_LATENT, self.session_id, frame_id, latent.tobytes()))
        reply = self._read()
        if reply.msg_type != RETURN_COMPONENTS or reply.frame_id != frame_id:
            raise OffloadError("unexpected reply to OFFLOAD_LATENT")
        cfg = self.config
        shape = (len(cfg.offloaded_ids), cfg.plane_height, cfg.plane_width, cfg.channels)
        expected = int(np.prod(shape)) * 4
        if len(reply.payload) != expected:
            raise OffloadError("RETURN_COMPONENTS payload has wrong size")
        return np.frombuffer(reply.payload, dtype="<f4").astype(np.float32).reshape(shape)

    def close(self):
        if self.sock is not None:
            try:
                send_frame(self.sock, Envelope(BYE, self.session_id, 0))
            except OSError:
                pass
            self.sock.close()
            self.sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def client_session(address, textures, system: OffloadSystem, rng, *, session_id: int = 1,
                   timeout: float = 5.0, calibration_hash: int = None, frame_ids=None):
    """Reconstruct ``textures`` with the offloaded path served by ``address``.

    Returns ``(reconstructed textures, per-frame FrameLog list)``. On a host
    error or timeout raises :class:`OffloadError` carrying the partial log.
    """
    if calibration_hash is None:
        from .privacy import NoiseCalibration

        cal = system.calibration or NoiseCalibration.zero(system.offload_codec.latent_dim)
        calibration_hash = cal.content_hash
    config = SessionConfig.for_system(system, calibration_hash)
    frame_ids = list(frame_ids) if frame_ids is not None else list(range(len(textures)))
    outputs, entries = [], []
    client = OffloadClient(tuple(address), session_id, timeout)
    try:
        client.connect(config)
        for tex, fid in zip(textures, frame_ids):
            t0 = time.perf_counter()
            _, z_local, observed = client_encode(system, tex, fid, rng)
            t1 = time.perf_counter()
            planes = client.offload(observed, fid)
            t2 = time.perf_counter()
            out = client_finish(system, z_local, planes)
            t3 = time.perf_counter()
            outputs.append(out)
            entries.append(FrameLog(fid, t1 - t0, t2 - t1, 0.0, t3 - t2))
    except OffloadError as exc:
        exc.log = entries
        raise
    finally:
        client.close()
    return outputs, entries
