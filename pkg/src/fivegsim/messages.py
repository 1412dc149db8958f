"""Control and application message vocabulary.

Every message is a TlvMessage: a MsgKind code plus tagged fields. Field
values are UTF-8 text except DATA, which carries raw bytes (encoded inner
packets, document segments).
"""
from __future__ import annotations

from enum import IntEnum

from .wirefmt import TlvMessage, WireFormatError, decode_tlv, encode_tlv


class MsgKind(IntEnum):
    # repository function (SBI)
    NF_REGISTER_REQ = 1
    NF_REGISTER_RESP = 2
    NF_DEREGISTER_REQ = 3
    NF_DEREGISTER_RESP = 4
    NF_HEARTBEAT_REQ = 5
    NF_HEARTBEAT_RESP = 6
    NF_DISCOVER_REQ = 7
    NF_DISCOVER_RESP = 8
    NF_STATUS_SUBSCRIBE_REQ = 9
    NF_STATUS_SUBSCRIBE_RESP = 10
    NF_STATUS_NOTIFY = 11
    # N4 (PFCP)
    PFCP_ASSOC_REQ = 20
    PFCP_ASSOC_RESP = 21
    PFCP_SESSION_REQ = 22
    PFCP_SESSION_RESP = 23
    # N2 (NGAP)
    NGAP_SETUP_REQ = 30
    NGAP_SETUP_RESP = 31
    NGAP_KEEPALIVE_REQ = 32
    NGAP_KEEPALIVE_RESP = 33
    NGAP_SESSION_SETUP = 34
    NGAP_SESSION_SETUP_ACK = 35
    # NAS (UE signalling relayed by the gNB)
    NAS_REGISTER_REQ = 40
    NAS_REGISTER_ACCEPT = 41
    NAS_REGISTER_REJECT = 42
    NAS_SESSION_REQ = 43
    NAS_SESSION_ACCEPT = 44
    NAS_SESSION_REJECT = 45
    # registration-flow SBI hops
    AUTH_REQ = 50
    AUTH_RESP = 51
    SUBSCRIBER_REQ = 52
    SUBSCRIBER_RESP = 53
    UDR_QUERY_REQ = 54
    UDR_QUERY_RESP = 55
    POLICY_REQ = 56
    POLICY_RESP = 57
    SESSION_CREATE_REQ = 58
    SESSION_CREATE_RESP = 59
    # radio link
    RLS_DATA = 70
    RLS_NAS = 71
    # application
    APP_GET = 80
    APP_GET_ACK = 81
    APP_SEGMENT = 82
    APP_COMPLETE = 83
    APP_ERROR = 84
    APP_DATA = 85
    # analytics
    KPI_NOTIFY = 90


class Tag(IntEnum):
    UE_ID = 1
    NF_ID = 2
    NF_TYPE = 3
    ADDR = 4
    STATUS = 5
    RESULT = 6
    REASON = 7
    DOC = 8
    SIZE = 9
    INDEX = 10
    DATA = 11
    SEQ = 12
    TEID = 13
    UE_IP = 14
    MODE = 15
    PATHS = 16
    RULES = 17
    KPI_KIND = 18
    PERIOD_MS = 19
    WINDOW_T0 = 20
    WINDOW_T1 = 21
    PACKETS = 22
    BYTES = 23
    SEGMENTS = 24
    GNB = 25
    DIGEST = 26


_TAG_BY_NAME = {t.name.lower(): t for t in Tag}


def build(kind: MsgKind, **fields: str | int | bytes) -> bytes:
    """Encode a message; keyword names are Tag names, lowercased."""
    elements = []
    for name, value in fields.items():
        if value is None:
            continue
        tag = _TAG_BY_NAME.get(name)
        if tag is None:
            raise KeyError(f"unknown message field {name!r}")
        if isinstance(value, bytes):
            raw = value
        else:
            raw = str(value).encode()
        elements.append((int(tag), raw))
    return encode_tlv(TlvMessage(msg_kind=int(kind), elements=tuple(elements)))


class ParsedMsg:
    """Read-only view over a decoded message."""

    __slots__ = ("kind", "_fields")

    def __init__(self, kind: MsgKind, fields: dict[int, bytes]):
        self.kind = kind
        self._fields = fields

    def raw(self, tag: Tag) -> bytes | None:
        return self._fields.get(int(tag))

    def text(self, tag: Tag, default: str | None = None) -> str | None:
        raw = self._fields.get(int(tag))
        return raw.decode() if raw is not None else default

    def num(self, tag: Tag, default: int | None = None) -> int | None:
        raw = self._fields.get(int(tag))
        return int(raw.decode()) if raw is not None else default

    def require(self, tag: Tag) -> str:
        raw = self._fields.get(int(tag))
        if raw is None:
            raise WireFormatError(f"missing mandatory field {tag.name} in {self.kind.name}")
        return raw.decode()


def parse(payload: bytes) -> ParsedMsg:
    msg = decode_tlv(payload)
    try:
        kind = MsgKind(msg.msg_kind)
    except ValueError as exc:
        raise WireFormatError(f"unknown message kind {msg.msg_kind}") from exc
    fields: dict[int, bytes] = {}
    for tag, value in msg.elements:
        fields.setdefault(tag, value)
    return ParsedMsg(kind, fields)
