"""Wire protocol: message set, envelope, canonical codec, OTP, transport.

Field sets are wire-exact; the codec rejects unknown envelope or body keys
and unknown message types. Octet-valued fields travel as lowercase hex.
The transport keeps global FIFO order (which implies per-channel FIFO),
assigns per-sender sequence numbers, and records every delivered envelope
in order; that log is the conformance trace.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field, fields, replace

log = logging.getLogger(__name__)

# ── statuses and channel classes ──

STATUS_OK = "ok"
STATUS_NO_KEY = "failed_no_key"
STATUS_NO_RULE = "failed_no_rule"
STATUS_DECRYPT = "failed_decrypt"
STATUS_TIMEOUT = "failed_timeout"
STATUS_UNKNOWN_APP = "failed_unknown_app"

STATUSES = (
    STATUS_OK,
    STATUS_NO_KEY,
    STATUS_NO_RULE,
    STATUS_DECRYPT,
    STATUS_TIMEOUT,
    STATUS_UNKNOWN_APP,
)

CHANNEL_INTRA = "intra_node"
CHANNEL_INTER = "inter_node"
CHANNEL_CONTROL = "control"

# Fields that carry raw key material (hex on the wire). Plaintext ones may
# only ever appear on intra_node records; KeyRelay's payload is OTP-encrypted.
OCTET_FIELDS = ("material", "value_relay_key", "encrypted_relay_key")
PLAINTEXT_OCTET_FIELDS = ("material", "value_relay_key")


class ProtocolError(Exception):
    pass


class CodecError(ProtocolError):
    pass


class LengthMismatchError(ProtocolError):
    pass


class UnknownEntityError(ProtocolError):
    pass


def otp_xor(a: bytes, b: bytes) -> bytes:
    """Bytewise one-time-pad combine; involution: otp_xor(otp_xor(a,b),b)==a."""
    if len(a) != len(b):
        raise LengthMismatchError(f"operand lengths differ: {len(a)} != {len(b)}")
    return bytes(x ^ y for x, y in zip(a, b))


# ── message set ──


@dataclass(frozen=True)
class GetKey:
    app_src: str
    app_dst: str


@dataclass(frozen=True)
class GetKeyWithId:
    app_src: str
    app_dst: str
    key_id: str


@dataclass(frozen=True)
class KmsDiscoveryRequest:
    app_src: str
    app_dst: str


@dataclass(frozen=True)
class KmsDiscoveryResponse:
    app_src: str
    app_dst: str
    id_kms: str | None  # none signals a failed discovery


@dataclass(frozen=True)
class RelayPathInstall:
    id_association: str
    prev_hop: str | None
    next_hop: str | None
    app_src: str
    app_dst: str


@dataclass(frozen=True)
class RelayProcessRequest:
    app_src: str
    app_dst: str
    id_relay_key: str


@dataclass(frozen=True)
class ExtKeyRequest:
    id_relay_key: str
    value_relay_key: bytes
    app_src: str
    app_dst: str
    id_association: str
    ext: dict = field(default_factory=dict)


@dataclass(frozen=True)
class KeyRelay:
    encrypted_relay_key: bytes
    id_key_encryption: str
    id_relay_key: str
    app_src: str
    app_dst: str
    id_association: str


@dataclass(frozen=True)
class KeyRelayResponse:
    status: str
    id_relay_key: str


@dataclass(frozen=True)
class AckRequest:
    id_relay_key: str
    ack_status: str
    app_src: str
    app_dst: str
    ext: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RelayProcessResponse:
    status: str
    id_relay_key: str


@dataclass(frozen=True)
class KeyDelivery:
    key_id: str
    material: bytes
    status: str


Message = (
    GetKey
    | GetKeyWithId
    | KmsDiscoveryRequest
    | KmsDiscoveryResponse
    | RelayPathInstall
    | RelayProcessRequest
    | ExtKeyRequest
    | KeyRelay
    | KeyRelayResponse
    | AckRequest
    | RelayProcessResponse
    | KeyDelivery
)

MESSAGE_TYPES: dict[str, type] = {
    "get_key": GetKey,
    "get_key_with_id": GetKeyWithId,
    "kms_discovery_request": KmsDiscoveryRequest,
    "kms_discovery_response": KmsDiscoveryResponse,
    "relay_path_install": RelayPathInstall,
    "relay_process_request": RelayProcessRequest,
    "ext_key_request": ExtKeyRequest,
    "key_relay": KeyRelay,
    "key_relay_response": KeyRelayResponse,
    "ack_request": AckRequest,
    "relay_process_response": RelayProcessResponse,
    "key_delivery": KeyDelivery,
}

_TYPE_TAGS = {cls: tag for tag, cls in MESSAGE_TYPES.items()}

_STATUS_FIELDS = ("status", "ack_status")
_NONEABLE_FIELDS = ("prev_hop", "next_hop", "id_kms")


def message_type(msg: Message) -> str:
    return _TYPE_TAGS[type(msg)]


# ── envelope and codec ──


@dataclass(frozen=True)
class Envelope:
    """Transport record: {seq, from, to, channel, type, body} on the wire."""

    seq: int
    sender: str
    receiver: str
    channel: str
    msg: Message


def message_to_body(msg: Message) -> dict:
    body = {}
    for f in fields(msg):
        value = getattr(msg, f.name)
        if f.name in OCTET_FIELDS:
            value = value.hex()
        body[f.name] = value
    return body


def message_from_body(type_tag: str, body: dict) -> Message:
    cls = MESSAGE_TYPES.get(type_tag)
    if cls is None:
        raise CodecError(f"unknown message type {type_tag!r}")
    if not isinstance(body, dict):
        raise CodecError("body must be an object")
    declared = {f.name for f in fields(cls)}
    for key in body:
        if key not in declared:
            raise CodecError(f"{type_tag}: unknown field {key!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in body:
            raise CodecError(f"{type_tag}: missing field {f.name!r}")
        value = body[f.name]
        if f.name in OCTET_FIELDS:
            if not isinstance(value, str):
                raise CodecError(f"{type_tag}: field {f.name!r} must be hex")
            if value != value.lower():
                raise CodecError(f"{type_tag}: field {f.name!r} must be lowercase hex")
            try:
                value = bytes.fromhex(value)
            except ValueError:
                raise CodecError(f"{type_tag}: field {f.name!r} must be hex") from None
        elif f.name in _STATUS_FIELDS:
            if value not in STATUSES:
                raise CodecError(f"{type_tag}: bad status {value!r}")
        elif f.name == "ext":
            if not isinstance(value, dict):
                raise CodecError(f"{type_tag}: field 'ext' must be an object")
        elif f.name in _NONEABLE_FIELDS:
            if value is not None and not isinstance(value, str):
                raise CodecError(f"{type_tag}: field {f.name!r} must be string or null")
        elif not isinstance(value, str):
            raise CodecError(f"{type_tag}: field {f.name!r} must be a string")
        kwargs[f.name] = value
    return cls(**kwargs)


def envelope_to_obj(env: Envelope) -> dict:
    return {
        "seq": env.seq,
        "from": env.sender,
        "to": env.receiver,
        "channel": env.channel,
        "type": message_type(env.msg),
        "body": message_to_body(env.msg),
    }


_ENVELOPE_KEYS = {"seq", "from", "to", "channel", "type", "body"}


def envelope_from_obj(obj: dict) -> Envelope:
    if not isinstance(obj, dict):
        raise CodecError("envelope must be an object")
    unknown = set(obj) - _ENVELOPE_KEYS
    if unknown:
        raise CodecError(f"envelope: unknown key {sorted(unknown)[0]!r}")
    missing = _ENVELOPE_KEYS - set(obj)
    if missing:
        raise CodecError(f"envelope: missing key {sorted(missing)[0]!r}")
    seq = obj["seq"]
    if isinstance(seq, bool) or not isinstance(seq, int):
        raise CodecError("envelope: 'seq' must be an integer")
    if obj["channel"] not in (CHANNEL_INTRA, CHANNEL_INTER, CHANNEL_CONTROL):
        raise CodecError(f"envelope: bad channel {obj['channel']!r}")
    for key in ("from", "to", "type"):
        if not isinstance(obj[key], str):
            raise CodecError(f"envelope: {key!r} must be a string")
    return Envelope(
        seq=seq,
        sender=obj["from"],
        receiver=obj["to"],
        channel=obj["channel"],
        msg=message_from_body(obj["type"], obj["body"]),
    )


def encode(env: Envelope) -> bytes:
    """Canonical JSON: sorted keys, compact separators, lowercase hex."""
    return json.dumps(
        envelope_to_obj(env), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")


def decode(data: bytes | str) -> Envelope:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CodecError(f"not UTF-8: {exc}") from None
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise CodecError(f"invalid JSON: {exc}") from None
    return envelope_from_obj(obj)


# ── fault injection ──


@dataclass
class FaultRule:
    """Applies to the nth matching send (1-based), once."""

    op: str  # "drop" | "corrupt"
    nth: int
    of_type: str | None = None
    seen: int = 0
    fired: bool = False

    def matches(self, msg: Message) -> bool:
        if self.fired:
            return False
        if self.of_type is not None and message_type(msg) != self.of_type:
            return False
        self.seen += 1
        return self.seen == self.nth


def corrupt_message(msg: Message) -> Message:
    """Flip every non-empty octet field; leaves everything else intact."""
    changes = {}
    for f in fields(msg):
        if f.name in OCTET_FIELDS:
            value = getattr(msg, f.name)
            if value:
                changes[f.name] = bytes(b ^ 0xA5 for b in value)
    return replace(msg, **changes) if changes else msg


# ── entities and transport ──


class Entity:
    """Serial actor addressed by entity id; processes one envelope at a time."""

    kind = "entity"

    def __init__(self, entity_id: str, node_id: str | None = None):
        self.entity_id = entity_id
        self.node_id = node_id
        self.services = None

    def bind(self, services) -> None:
        self.services = services

    def send(self, receiver: str, msg: Message) -> None:
        self.services.send(self.entity_id, receiver, msg)

    def on_message(self, env: Envelope) -> None:  # pragma: no cover - abstract
        raise NotImplementedError


def channel_for(sender: Entity, receiver: Entity) -> str:
    if sender.kind == "controller" or receiver.kind == "controller":
        return CHANNEL_CONTROL
    if sender.node_id is not None and sender.node_id == receiver.node_id:
        return CHANNEL_INTRA
    return CHANNEL_INTER


class Transport:
    """Instrumented in-memory message fabric.

    send() enqueues; pop_next() dequeues in global send order and appends the
    envelope to the delivered-order log. Per-sender seq numbers are assigned
    here, and armed fault rules are applied at send time.
    """

    def __init__(self):
        self.entities: dict[str, Entity] = {}
        self._queue: deque[Envelope] = deque()
        self.records: list[Envelope] = []
        self.dropped: list[Envelope] = []
        self.faults: list[FaultRule] = []
        self._seq: dict[str, int] = {}

    def register(self, entity: Entity) -> None:
        if entity.entity_id in self.entities:
            raise UnknownEntityError(f"entity {entity.entity_id!r} already registered")
        self.entities[entity.entity_id] = entity

    def add_fault(self, rule: FaultRule) -> None:
        self.faults.append(rule)

    def send(self, sender_id: str, receiver_id: str, msg: Message) -> None:
        sender = self.entities.get(sender_id)
        receiver = self.entities.get(receiver_id)
        if sender is None:
            raise UnknownEntityError(f"unknown sender {sender_id!r}")
        if receiver is None:
            raise UnknownEntityError(f"unknown receiver {receiver_id!r}")
        seq = self._seq.get(sender_id, 0) + 1
        self._seq[sender_id] = seq
        env = Envelope(
            seq=seq,
            sender=sender_id,
            receiver=receiver_id,
            channel=channel_for(sender, receiver),
            msg=msg,
        )
        for rule in self.faults:
            if rule.matches(msg):
                rule.fired = True
                if rule.op == "drop":
                    self.dropped.append(env)
                    log.warning("fault: dropped %s %s->%s",
                                message_type(msg), sender_id, receiver_id)
                    return
                env = replace(env, msg=corrupt_message(env.msg))
                log.warning("fault: corrupted %s %s->%s",
                            message_type(msg), sender_id, receiver_id)
                break
        self._queue.append(env)

    def pending(self) -> int:
        return len(self._queue)

    def pop_next(self) -> Envelope | None:
        if not self._queue:
            return None
        env = self._queue.popleft()
        self.records.append(env)
        return env

    def drain(self) -> list[Envelope]:
        """Return and clear the delivered-order log."""
        out = self.records
        self.records = []
        return out
