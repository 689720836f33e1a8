"""Wire protocol between agent and environment processes.

Frames are a 4-byte big-endian unsigned payload length followed by a
UTF-8 JSON object with a ``kind`` field and kind-specific fields.
Floating-point values are serialized with 17 significant digits, which
round-trips IEEE doubles exactly, so a training run against a remote
environment reproduces the in-process run bit for bit.

The server wraps one environment instance and answers one agent session
at a time with strict request/response alternation: ``hello`` is
answered by ``hello_ack`` (action count, observation size, episode
length), and each ``reset`` or ``action`` by an ``observation``
carrying the state vector, both norms, the reward, and the done flag.
``shutdown`` stops the server; a lost connection returns it to the
accepting state.
"""

from __future__ import annotations

import json
import logging
import os
import socket
from dataclasses import dataclass

import numpy as np

from .env import EpisodeAbort, EnvError, Observation

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 7654
DEFAULT_TIMEOUT = 300.0
MAX_FRAME_BYTES = 64 * 1024 * 1024
ADDR_ENV_VAR = "RDC_ADDR"
PORT_ENV_VAR = "RDC_PORT"

# Field layout per message kind; order fixes the serialized byte layout.
MESSAGE_SCHEMAS = {
    "hello": (("version", "int"),),
    "hello_ack": (
        ("version", "int"),
        ("n_actions", "int"),
        ("n_obs", "int"),
        ("episode_len", "int"),
    ),
    "reset": (("seed", "int"),),
    "observation": (
        ("state", "float_list"),
        ("actions", "float_list"),
        ("norm_c", "float"),
        ("norm_kappa", "float"),
        ("step", "int"),
        ("reward", "float"),
        ("done", "bool"),
    ),
    "action": (("values", "float_list"),),
    "reward_info": (("reward", "float"), ("step", "int")),
    "episode_end": (("step", "int"),),
    "shutdown": (),
    "error": (("code", "str"), ("message", "str")),
}

ERROR_ABORT = "abort"
ERROR_PROTOCOL = "protocol"
ERROR_INTERNAL = "internal"


class ProtocolError(RuntimeError):
    """Malformed or unexpected message."""


class TransportError(ProtocolError):
    """The connection failed or closed mid-conversation."""


@dataclass(frozen=True)
class Message:
    kind: str
    body: dict


def message(kind: str, **body) -> Message:
    return Message(kind, body)


def _float_text(value: float) -> str:
    value = float(value)
    if not np.isfinite(value):
        raise ProtocolError(f"cannot serialize non-finite float {value}")
    return format(value, ".17g")


def _emit_value(value, ftype: str) -> str:
    if ftype == "int":
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ProtocolError(f"expected integer, got {value!r}")
        return str(int(value))
    if ftype == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float, np.floating, np.integer)):
            raise ProtocolError(f"expected float, got {value!r}")
        return _float_text(value)
    if ftype == "bool":
        if not isinstance(value, (bool, np.bool_)):
            raise ProtocolError(f"expected bool, got {value!r}")
        return "true" if value else "false"
    if ftype == "str":
        if not isinstance(value, str):
            raise ProtocolError(f"expected string, got {value!r}")
        return json.dumps(value)
    if ftype == "float_list":
        value = np.asarray(value, dtype=float).ravel()
        return "[" + ",".join(_float_text(v) for v in value) + "]"
    raise ProtocolError(f"unknown field type {ftype}")


def encode_payload(msg: Message) -> bytes:
    """Serialize a message to its JSON payload (no frame header)."""
    schema = MESSAGE_SCHEMAS.get(msg.kind)
    if schema is None:
        raise ProtocolError(f"unknown message kind {msg.kind!r}")
    names = {name for name, _ in schema}
    extra = set(msg.body) - names
    if extra:
        raise ProtocolError(f"unexpected field {sorted(extra)[0]!r} in {msg.kind}")
    parts = [f'"kind":{json.dumps(msg.kind)}']
    for name, ftype in schema:
        if name not in msg.body:
            raise ProtocolError(f"missing field {name!r} in {msg.kind}")
        parts.append(f'{json.dumps(name)}:{_emit_value(msg.body[name], ftype)}')
    return ("{" + ",".join(parts) + "}").encode("utf-8")


def encode(msg: Message) -> bytes:
    """Serialize a message to a complete frame."""
    payload = encode_payload(msg)
    if len(payload) > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds the 64 MiB limit")
    return len(payload).to_bytes(4, "big") + payload


def _coerce(value, ftype: str, name: str):
    if ftype == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ProtocolError(f"field {name!r} must be an integer")
        return value
    if ftype == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ProtocolError(f"field {name!r} must be a number")
        return float(value)
    if ftype == "bool":
        if not isinstance(value, bool):
            raise ProtocolError(f"field {name!r} must be a boolean")
        return value
    if ftype == "str":
        if not isinstance(value, str):
            raise ProtocolError(f"field {name!r} must be a string")
        return value
    if ftype == "float_list":
        if not isinstance(value, list) or any(
            isinstance(v, bool) or not isinstance(v, (int, float)) for v in value
        ):
            raise ProtocolError(f"field {name!r} must be a list of numbers")
        return [float(v) for v in value]
    raise ProtocolError(f"unknown field type {ftype}")


def decode_payload(payload: bytes) -> Message:
    """Parse and validate a JSON payload into a message."""
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed payload: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("payload is not a JSON object")
    kind = obj.pop("kind", None)
    if kind is None:
        raise ProtocolError("missing field 'kind'")
    schema = MESSAGE_SCHEMAS.get(kind)
    if schema is None:
        raise ProtocolError(f"unknown message kind {kind!r}")
    body = {}
    for name, ftype in schema:
        if name not in obj:
            raise ProtocolError(f"missing field {name!r} in {kind}")
        body[name] = _coerce(obj.pop(name), ftype, name)
    if obj:
        raise ProtocolError(f"unexpected field {sorted(obj)[0]!r} in {kind}")
    return Message(kind, body)


def decode(frame: bytes) -> Message:
    """Parse a complete frame (header plus payload)."""
    if len(frame) < 4:
        raise TransportError("truncated frame: missing length header")
    length = int.from_bytes(frame[:4], "big")
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame length {length} exceeds the 64 MiB limit")
    if len(frame) != 4 + length:
        raise TransportError(
            f"truncated frame: header says {length} bytes, got {len(frame) - 4}"
        )
    return decode_payload(frame[4:])


def read_frame(read) -> bytes:
    """Collect one payload from a byte source.

    ``read(n)`` must return between 1 and n bytes, or b"" at end of
    stream; parsing is insensitive to how the stream is chunked.
    """

    def read_exact(n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = read(n - len(buf))
            if not chunk:
                raise TransportError("connection closed mid-frame")
            buf.extend(chunk)
        return bytes(buf)

    header = read_exact(4)
    length = int.from_bytes(header, "big")
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame length {length} exceeds the 64 MiB limit")
    return read_exact(length)


def _sock_read(sock):
    def read(n: int) -> bytes:
        try:
            return sock.recv(n)
        except socket.timeout as exc:
            raise TransportError("socket timeout") from exc
        except OSError as exc:
            raise TransportError(f"socket error: {exc}") from exc
    return read


def read_message(sock) -> Message:
    return decode_payload(read_frame(_sock_read(sock)))


def send_message(sock, msg: Message) -> None:
    try:
        sock.sendall(encode(msg))
    except OSError as exc:
        raise TransportError(f"socket error: {exc}") from exc


def _resolve_address(host, port):
    if host is None:
        host = os.environ.get(ADDR_ENV_VAR, DEFAULT_HOST)
    if port is None:
        port = int(os.environ.get(PORT_ENV_VAR, DEFAULT_PORT))
    return host, int(port)


def _observation_message(env, obs: Observation, reward: float, done: bool) -> Message:
    return message(
        "observation",
        state=obs.state_values,
        actions=env.last_action_rl,
        norm_c=obs.norm_c,
        norm_kappa=obs.norm_kappa,
        step=obs.step_index,
        reward=reward,
        done=done,
    )


class EnvServer:
    """Serves one environment to one agent session at a time.

    ``run()`` blocks, accepting sessions until a client sends
    ``shutdown``; a dropped connection logs a transport error and
    returns to accepting. Pass ``port=0`` for an ephemeral port (check
    ``self.port`` after construction).
    """

    def __init__(self, env, host: str | None = None, port: int | None = None,
                 timeout: float = DEFAULT_TIMEOUT):
        host, port = _resolve_address(host, port)
        self.env = env
        self.timeout = timeout
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(1)
        self.host, self.port = self._listener.getsockname()[:2]

    def run(self) -> None:
        try:
            while True:
                conn, peer = self._listener.accept()
                conn.settimeout(self.timeout)
                logger.info("session from %s:%d", *peer)
                try:
                    finished = self._session(conn)
                except ProtocolError as exc:
                    # Covers transport loss and malformed traffic alike:
                    # drop the session, keep accepting.
                    logger.warning("session ended: %s", exc)
                    finished = False
                finally:
                    conn.close()
                if finished:
                    return
        finally:
            self.close()

    def close(self) -> None:
        self._listener.close()

    def _session(self, conn) -> bool:
        """Handle one connection; True means shutdown was requested."""
        msg = read_message(conn)
        if msg.kind != "hello":
            send_message(conn, message("error", code=ERROR_PROTOCOL,
                                       message=f"expected hello, got {msg.kind}"))
            return False
        if msg.body["version"] != PROTOCOL_VERSION:
            send_message(conn, message(
                "error", code=ERROR_PROTOCOL,
                message=f"protocol version {msg.body['version']} unsupported, "
                        f"server speaks {PROTOCOL_VERSION}"))
            return False
        send_message(conn, message(
            "hello_ack",
            version=PROTOCOL_VERSION,
            n_actions=self.env.n_actions,
            n_obs=self.env.observation_size,
            episode_len=self.env.episode_len,
        ))
        while True:
            try:
                msg = read_message(conn)
            except ProtocolError as exc:
                if isinstance(exc, TransportError):
                    raise
                send_message(conn, message("error", code=ERROR_PROTOCOL, message=str(exc)))
                return False
            if msg.kind == "shutdown":
                return True
            if msg.kind == "reset":
                obs = self.env.reset(msg.body["seed"])
                send_message(conn, _observation_message(
                    self.env, obs, self.env.last_reward, False))
            elif msg.kind == "action":
                try:
                    obs, reward, done = self.env.step(np.array(msg.body["values"]))
                except EpisodeAbort as exc:
                    send_message(conn, message("error", code=ERROR_ABORT, message=str(exc)))
                    continue
                except EnvError as exc:
                    send_message(conn, message("error", code=ERROR_PROTOCOL, message=str(exc)))
                    return False
                send_message(conn, _observation_message(self.env, obs, reward, done))
            else:
                send_message(conn, message(
                    "error", code=ERROR_PROTOCOL,
                    message=f"unexpected message kind {msg.kind!r}"))
                return False


def serve(env, host: str | None = None, port: int | None = None,
          timeout: float = DEFAULT_TIMEOUT) -> EnvServer:
    """Bind a server for the environment; call ``run()`` to serve."""
    return EnvServer(env, host, port, timeout)


class RemoteEnv:
    """Client-side environment handle over a socket.

    Satisfies the same contract as the in-process environment, so the
    training loop cannot tell them apart.
    """

    def __init__(self, host: str | None = None, port: int | None = None,
                 timeout: float = DEFAULT_TIMEOUT):
        host, port = _resolve_address(host, port)
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.settimeout(timeout)
        self.last_reward = 0.0
        self.last_action_rl: np.ndarray | None = None
        send_message(self._sock, message("hello", version=PROTOCOL_VERSION))
        ack = self._receive()
        if ack.kind != "hello_ack":
            raise ProtocolError(f"expected hello_ack, got {ack.kind}")
        self.n_actions = ack.body["n_actions"]
        self.observation_size = ack.body["n_obs"]
        self.episode_len = ack.body["episode_len"]

    def _receive(self) -> Message:
        msg = read_message(self._sock)
        if msg.kind == "error":
            if msg.body["code"] == ERROR_ABORT:
                raise EpisodeAbort(msg.body["message"])
            raise ProtocolError(f"server error: {msg.body['message']}")
        return msg

    def _expect_observation(self) -> Message:
        msg = self._receive()
        if msg.kind != "observation":
            raise ProtocolError(f"expected observation, got {msg.kind}")
        return msg

    def _unpack(self, msg: Message) -> Observation:
        body = msg.body
        self.last_reward = body["reward"]
        self.last_action_rl = np.array(body["actions"])
        return Observation(
            state_values=np.array(body["state"]),
            norm_c=body["norm_c"],
            norm_kappa=body["norm_kappa"],
            step_index=body["step"],
        )

    def reset(self, seed: int) -> Observation:
        send_message(self._sock, message("reset", seed=int(seed)))
        return self._unpack(self._expect_observation())

    def step(self, action):
        send_message(self._sock, message("action", values=action))
        msg = self._expect_observation()
        obs = self._unpack(msg)
        return obs, msg.body["reward"], msg.body["done"]

    def shutdown(self) -> None:
        """Ask the server process to exit, then close the connection."""
        send_message(self._sock, message("shutdown"))
        self.close()

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect(host: str | None = None, port: int | None = None,
            timeout: float = DEFAULT_TIMEOUT) -> RemoteEnv:
    """Connect to a serving environment and perform the handshake."""
    return RemoteEnv(host, port, timeout)
