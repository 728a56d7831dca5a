"""Wire protocol for the streaming generation service: UTF-8 JSON text messages
over a persistent bidirectional socket, with base64 frame payloads.

Every message carries a monotone per-direction sequence number. Frames travel
as 8-bit grayscale, row-major, frame-major: quantize((x + 1) * 127.5), clamped
to [0, 255]; training and evaluation paths keep 32-bit floats.
"""

from __future__ import annotations

import base64
import json
from dataclasses import MISSING, dataclass, fields

import numpy as np


class ProtocolError(ValueError):
    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


@dataclass(frozen=True)
class Start:
    seq: int
    condition_id: int
    num_chunks: int | None = None  # None = unbounded (until stop or budget)
    seed: int = 0
    steps: int = 4


@dataclass(frozen=True)
class SetCondition:
    seq: int
    condition_id: int


@dataclass(frozen=True)
class InjectImage:
    seq: int
    frame: str  # base64 8-bit grayscale, row-major


@dataclass(frozen=True)
class Stop:
    seq: int


@dataclass(frozen=True)
class SessionInfo:
    seq: int
    height: int
    width: int
    channels: int
    chunk_frames: int
    fps_estimate: float
    n_conditions: int


@dataclass(frozen=True)
class Chunk:
    seq: int
    index: int
    condition_id: int
    wall_ms: float
    frames: str  # base64 of chunk_frames*height*width bytes


@dataclass(frozen=True)
class Ack:
    # Acknowledges a control command with the chunk index where it takes effect.
    seq: int
    command: str
    effective_chunk: int
    condition_id: int


@dataclass(frozen=True)
class Error:
    seq: int
    code: str
    detail: str


@dataclass(frozen=True)
class End:
    seq: int
    total_chunks: int
    total_frames: int


MESSAGE_TYPES = {
    "start": Start,
    "set_condition": SetCondition,
    "inject_image": InjectImage,
    "stop": Stop,
    "session_info": SessionInfo,
    "chunk": Chunk,
    "ack": Ack,
    "error": Error,
    "end": End,
}
_TYPE_NAMES = {cls: name for name, cls in MESSAGE_TYPES.items()}

Message = Start | SetCondition | InjectImage | Stop | SessionInfo | Chunk | Ack | Error | End


def encode(msg: Message) -> str:
    name = _TYPE_NAMES.get(type(msg))
    if name is None:
        raise ProtocolError("bad_type", f"not a protocol message: {type(msg)!r}")
    payload = {"type": name}
    for f in fields(msg):
        payload[f.name] = getattr(msg, f.name)
    return json.dumps(payload, sort_keys=True)


def decode(text: str) -> Message:
    try:
        payload = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ProtocolError("bad_json", str(e)) from e
    if not isinstance(payload, dict):
        raise ProtocolError("bad_json", "message must be a JSON object")
    name = payload.pop("type", None)
    cls = MESSAGE_TYPES.get(name)
    if cls is None:
        raise ProtocolError("bad_type", f"unknown message type {name!r}")
    spec = {f.name: f for f in fields(cls)}
    unknown = set(payload) - set(spec)
    if unknown:
        raise ProtocolError("bad_field", f"unexpected fields {sorted(unknown)}")
    kwargs = {}
    for fname, f in spec.items():
        if fname in payload:
            kwargs[fname] = payload[fname]
        elif f.default is MISSING:
            raise ProtocolError("bad_field", f"missing field {fname!r}")
    try:
        msg = cls(**kwargs)
    except TypeError as e:
        raise ProtocolError("bad_field", str(e)) from e
    _validate(msg)
    return msg


def _validate(msg: Message):
    try:
        _validate_fields(msg)
    except TypeError as e:
        raise ProtocolError("bad_field", f"wrong field type in {type(msg).__name__}: {e}") from e


def _validate_fields(msg: Message):
    if not isinstance(msg.seq, int) or isinstance(msg.seq, bool) or msg.seq < 0:
        raise ProtocolError("bad_seq", f"seq must be a non-negative integer, got {msg.seq!r}")
    checks: list[tuple[bool, str]] = []
    if isinstance(msg, Start):
        checks += [
            (isinstance(msg.condition_id, int) and msg.condition_id >= 0, "condition_id"),
            (msg.num_chunks is None or (isinstance(msg.num_chunks, int) and msg.num_chunks > 0),
             "num_chunks"),
            (isinstance(msg.seed, int), "seed"),
            (isinstance(msg.steps, int) and msg.steps >= 1, "steps"),
        ]
    elif isinstance(msg, SetCondition):
        checks.append((isinstance(msg.condition_id, int) and msg.condition_id >= 0, "condition_id"))
    elif isinstance(msg, InjectImage):
        checks.append((isinstance(msg.frame, str) and _is_base64(msg.frame), "frame"))
    elif isinstance(msg, SessionInfo):
        checks += [(msg.height > 0 and msg.width > 0 and msg.chunk_frames > 0, "dims"),
                   (msg.fps_estimate >= 0, "fps_estimate")]
    elif isinstance(msg, Chunk):
        checks += [(isinstance(msg.index, int) and msg.index >= 0, "index"),
                   (isinstance(msg.frames, str) and _is_base64(msg.frames), "frames"),
                   (msg.wall_ms >= 0, "wall_ms")]
    elif isinstance(msg, Ack):
        checks += [(msg.command in ("set_condition", "inject_image"), "command"),
                   (isinstance(msg.effective_chunk, int) and msg.effective_chunk >= 0,
                    "effective_chunk")]
    elif isinstance(msg, Error):
        checks.append((isinstance(msg.code, str) and bool(msg.code), "code"))
    elif isinstance(msg, End):
        checks.append((msg.total_chunks >= 0 and msg.total_frames >= 0, "totals"))
    for ok, what in checks:
        if not ok:
            raise ProtocolError("bad_field", f"invalid {what} in {type(msg).__name__}")


def _is_base64(s: str) -> bool:
    try:
        base64.b64decode(s, validate=True)
        return True
    except Exception:
        return False


def encode_frames(frames: np.ndarray) -> str:
    """(k, H, W, C) floats in [-1, 1] -> base64 of row-major 8-bit grayscale."""
    q = np.clip(np.rint((frames.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return base64.b64encode(q.tobytes()).decode("ascii")


def decode_frames(payload: str, chunk_frames: int, height: int, width: int) -> np.ndarray:
    """Inverse transport decode to floats in [-1, 1]; (k, H, W, 1)."""
    raw = base64.b64decode(payload, validate=True)
    expected = chunk_frames * height * width
    if len(raw) != expected:
        raise ProtocolError("bad_payload", f"expected {expected} bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(chunk_frames, height, width, 1)
    return (arr.astype(np.float32) / 127.5) - 1.0


class SequenceChecker:
    """Enforces strictly increasing sequence numbers on one direction."""

    def __init__(self):
        self.last = -1

    def check(self, msg: Message):
        if msg.seq <= self.last:
            raise ProtocolError("bad_seq", f"sequence {msg.seq} not after {self.last}")
        self.last = msg.seq


class SequenceStamper:
    """Stamps outgoing messages with the next sequence number."""

    def __init__(self):
        self.next = 0

    def take(self) -> int:
        seq = self.next
        self.next += 1
        return seq
