"""Wire protocol: length-prefixed JSON envelopes.

Frame layout: 4-byte big-endian payload length, then that many bytes of
UTF-8 JSON. Envelope fields: `id` (client-echoed), `kind` (request |
response | event | error), `op` (operation name), `body` (op-specific
object). Bulk arrays travel as base64 fields with declared dtype/shape,
little-endian, C order. Full byte-level examples live in PROTOCOL.md.
"""

import base64
import json
import struct

import numpy as np

from ..errors import ProtocolError

HEADER_SIZE = 4
MAX_FRAME_BYTES = 64 * 1024 * 1024

KINDS = ("request", "response", "event", "error")


def encode_frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME_BYTES:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds frame limit")
    return struct.pack(">I", len(payload)) + payload


def encode_envelope(envelope: dict) -> bytes:
    return encode_frame(json.dumps(envelope, separators=(",", ":")).encode("utf-8"))


def decode_envelope(payload: bytes) -> dict:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"payload is not UTF-8 JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("envelope must be a JSON object")
    kind = obj.get("kind")
    if kind not in KINDS:
        raise ProtocolError(f"unknown envelope kind {kind!r}")
    if not isinstance(obj.get("op"), str):
        raise ProtocolError("envelope op must be a string")
    body = obj.get("body")
    if body is not None and not isinstance(body, dict):
        raise ProtocolError("envelope body must be an object or null")
    return obj


class FrameDecoder:
    """Incremental frame splitter; survives arbitrary byte fragmentation."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes):
        """Append bytes, return a list of complete payloads (maybe empty)."""
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < HEADER_SIZE:
                break
            (length,) = struct.unpack_from(">I", self._buf, 0)
            if length > MAX_FRAME_BYTES:
                raise ProtocolError(f"declared frame length {length} exceeds limit")
            if len(self._buf) < HEADER_SIZE + length:
                break
            payload = bytes(self._buf[HEADER_SIZE : HEADER_SIZE + length])
            del self._buf[: HEADER_SIZE + length]
            out.append(payload)
        return out

    @property
    def pending_bytes(self):
        return len(self._buf)


def make_request(req_id, op, body=None):
    return {"id": req_id, "kind": "request", "op": op, "body": body or {}}


def make_response(req_id, op, body=None):
    return {"id": req_id, "kind": "response", "op": op, "body": body or {}}


def make_event(op, body=None):
    return {"id": None, "kind": "event", "op": op, "body": body or {}}


def make_error(req_id, op, code, message):
    return {
        "id": req_id,
        "kind": "error",
        "op": op or "",
        "body": {"code": code, "message": message},
    }


def encode_array(arr) -> dict:
    arr = np.asarray(arr)
    little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": arr.dtype.name,
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(little).tobytes()).decode("ascii"),
    }


def decode_array(obj) -> np.ndarray:
    try:
        dtype = np.dtype(obj["dtype"]).newbyteorder("<")
        shape = tuple(int(x) for x in obj["shape"])
        raw = base64.b64decode(obj["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed array field: {exc}") from exc
    arr = np.frombuffer(raw, dtype=dtype)
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise ProtocolError("array data does not match declared shape")
    return arr.reshape(shape).astype(dtype.newbyteorder("="))
