"""Radio access side: gNB relays and the UE state machine.

The radio leg is a simulated link carrying two envelope kinds: RLS_NAS for
signalling (relayed verbatim between UE and AMF) and RLS_DATA for user
packets. The gNB terminates GTP-U towards the UPFs: uplink it encapsulates
(replicating and sequence-stamping when the session plan says so), downlink
it strips tunnels, eliminates duplicates and hands the inner packet to the
UE.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

from .core_cp import NfEntity, SessionPath, decode_paths
from .errors import FlowError, SetupError
from .messages import MsgKind, Tag, build, parse
from .simnet import DROPPED, ELIMINATED_DUPLICATE, Link
from .urllc import SEQ_MODULUS, DedupWindow, Redundancy
from .wirefmt import (
    Protocol,
    SimPacket,
    WireFormatError,
    decode_packet,
    encode_packet,
    gtpu_decapsulate,
    gtpu_encapsulate,
)

log = logging.getLogger(__name__)


@dataclass
class GnbUeContext:
    """Per-session forwarding state installed at one gNB."""

    ue_id: str
    ue_ip: str
    mode: Redundancy
    paths: tuple[SessionPath, ...]   # only the legs this gNB terminates
    ue_name: str | None = None
    ul_seq: int = 0
    dl_window: DedupWindow = field(default_factory=DedupWindow)


class Gnb(NfEntity):
    """Radio node: NGAP client of the AMF, GTP-U peer of the UPFs."""

    kind = "GNB"
    registers = False

    def __init__(self, name, ip, net, env, amf: str):
        super().__init__(name, ip, net, env)
        self.heartbeat_enabled = False  # gNBs keep alive over NGAP instead
        self.amf = amf
        self.ng_ready = False
        self._ue_names: dict[str, str] = {}      # ue_id -> roster name
        self._by_ue_ip: dict[str, GnbUeContext] = {}
        self._by_teid_dl: dict[int, GnbUeContext] = {}

    # -- N2 ---------------------------------------------------------------

    def _send_ngap(self, kind: MsgKind, attrs: dict[str, str] | None = None, **fields) -> None:
        port = self.env.params.ngap_port
        merged = {"msg_kind": kind.name}
        if attrs:
            merged.update(attrs)
        self.send_msg(
            self.amf, Protocol.NGAP, build(kind, **fields), sport=port, dport=port, attrs=merged
        )

    def ng_setup(self) -> None:
        link = self.net.require_link(self.name, self.amf)
        if not link.reliable:
            raise SetupError(f"{self.name}: NGAP needs a reliable transport to {self.amf}")
        self._send_ngap(MsgKind.NGAP_SETUP_REQ, nf_id=self.name)

    def _arm_keepalive(self) -> None:
        hb = self.env.params.heartbeat_ms
        self.net.schedule((self.net.now // hb + 1) * hb, self._keepalive_fire)

    def _keepalive_fire(self) -> None:
        if self.ng_ready:
            self._send_ngap(MsgKind.NGAP_KEEPALIVE_REQ, nf_id=self.name)
        self._arm_keepalive()

    def on_ngap(self, m, pkt, link, now) -> None:
        if m.kind == MsgKind.NGAP_SETUP_RESP:
            if m.text(Tag.RESULT) == "OK" and not self.ng_ready:
                self.ng_ready = True
                self._arm_keepalive()
        elif m.kind == MsgKind.NGAP_KEEPALIVE_RESP:
            pass
        elif m.kind == MsgKind.NGAP_SESSION_SETUP:
            ue_id = m.require(Tag.UE_ID)
            self.install_session(
                ue_id=ue_id,
                ue_ip=m.require(Tag.UE_IP),
                mode=Redundancy.parse(m.text(Tag.MODE, "NONE")),
                paths=decode_paths(m.text(Tag.PATHS, "")),
            )
            self._send_ngap(MsgKind.NGAP_SESSION_SETUP_ACK, attrs={"ue_id": ue_id}, ue_id=ue_id)
        else:
            super().on_ngap(m, pkt, link, now)

    # -- session state -------------------------------------------------------

    def install_session(
        self, ue_id: str, ue_ip: str, mode: Redundancy, paths: tuple[SessionPath, ...]
    ) -> None:
        mine = tuple(p for p in paths if p.gnb == self.name)
        if not mine:
            return
        ctx = GnbUeContext(
            ue_id=ue_id, ue_ip=ue_ip, mode=mode, paths=mine, ue_name=self._ue_names.get(ue_id)
        )
        self._by_ue_ip[ue_ip] = ctx
        for p in mine:
            self._by_teid_dl[p.teid_dl] = ctx

    # -- NAS relay -------------------------------------------------------------

    def on_nas(self, m, pkt, link, now) -> None:
        # downlink NAS from the AMF; wrap for the radio leg
        ue_id = m.text(Tag.UE_ID)
        ue_name = self._ue_names.get(ue_id) if ue_id else None
        if ue_name is None:
            self.net.tap_local(
                self.name,
                pkt,
                Protocol.NAS,
                DROPPED,
                src=self.amf,
                attrs={"reason": "unknown ue", "ue_id": ue_id or ""},
            )
            return
        if m.kind == MsgKind.NAS_SESSION_ACCEPT:
            self.install_session(
                ue_id=ue_id,
                ue_ip=m.require(Tag.UE_IP),
                mode=Redundancy.parse(m.text(Tag.MODE, "NONE")),
                paths=decode_paths(m.text(Tag.PATHS, "")),
            )
        port = self.env.params.rls_port
        self.send_msg(
            ue_name,
            Protocol.RLS,
            build(MsgKind.RLS_NAS, ue_id=ue_id, data=pkt.payload),
            sport=port,
            dport=port,
            attrs={"msg_kind": MsgKind.RLS_NAS.name, "nas_kind": m.kind.name, "ue_id": ue_id},
        )

    # -- radio uplink ------------------------------------------------------------

    def on_rls(self, m, pkt: SimPacket, link: Link, now: int) -> None:
        sender = self._sender_name(pkt, link)
        if m.kind == MsgKind.RLS_NAS:
            ue_id = m.require(Tag.UE_ID)
            self._ue_names[ue_id] = sender
            nas = m.raw(Tag.DATA) or b""
            inner_kind = parse(nas).kind.name
            self.send_msg(
                self.amf,
                Protocol.NAS,
                nas,
                sport=self.env.params.ngap_port,
                dport=self.env.params.ngap_port,
                attrs={"msg_kind": inner_kind, "ue_id": ue_id},
            )
        elif m.kind == MsgKind.RLS_DATA:
            self._uplink(m.raw(Tag.DATA) or b"", sender)
        else:
            super().on_rls(m, pkt, link, now)

    def _uplink(self, inner_raw: bytes, sender: str) -> None:
        try:
            inner = decode_packet(inner_raw)
        except WireFormatError as exc:
            self.net.tap_local(
                self.name, len(inner_raw), Protocol.RLS, DROPPED, src=sender,
                attrs={"reason": str(exc)},
            )
            return
        ctx = self._by_ue_ip.get(inner.src_ip)
        if ctx is None:
            self.net.tap_local(
                self.name,
                inner,
                Protocol.RLS,
                DROPPED,
                src=sender,
                attrs={"reason": "no session", "src_ip": inner.src_ip},
            )
            return
        if ctx.ue_name is None:
            ctx.ue_name = sender
        seq = None
        if any(p.carry_seq for p in ctx.paths):
            seq = ctx.ul_seq
            ctx.ul_seq = (ctx.ul_seq + 1) % SEQ_MODULUS
        inner_kind = parse(inner.payload).kind.name if inner.protocol == Protocol.APP else ""
        port = self.env.params.gtpu_port
        for p in ctx.paths:
            attrs = {"teid": str(p.teid_ul), "ue_id": ctx.ue_id}
            if seq is not None and p.carry_seq:
                attrs["seq"] = str(seq)
            if inner_kind:
                attrs["inner"] = inner_kind
            self.send_msg(
                p.upf,
                Protocol.GTPU,
                gtpu_encapsulate(inner_raw, p.teid_ul, seq if p.carry_seq else None),
                sport=port,
                dport=port,
                stream=p.teid_ul,
                attrs=attrs,
            )

    # -- downlink ------------------------------------------------------------

    def on_gtpu(self, pkt: SimPacket, link: Link, now: int) -> None:
        sender = self._sender_name(pkt, link)
        try:
            inner_raw, teid, seq = gtpu_decapsulate(pkt.payload)
        except WireFormatError as exc:
            self.net.tap_local(
                self.name, pkt, Protocol.GTPU, DROPPED, src=sender, attrs={"reason": str(exc)}
            )
            return
        ctx = self._by_teid_dl.get(teid)
        if ctx is None:
            self.net.tap_local(
                self.name,
                pkt,
                Protocol.GTPU,
                DROPPED,
                src=sender,
                attrs={"reason": "unknown teid", "teid": str(teid)},
            )
            return
        if seq is not None and not ctx.dl_window.accept(seq):
            self.net.tap_local(
                self.name,
                pkt,
                Protocol.GTPU,
                ELIMINATED_DUPLICATE,
                src=sender,
                attrs={"teid": str(teid), "seq": str(seq)},
            )
            return
        if ctx.ue_name is None:
            self.net.tap_local(
                self.name,
                pkt,
                Protocol.GTPU,
                DROPPED,
                src=sender,
                attrs={"reason": "no radio peer", "ue_id": ctx.ue_id},
            )
            return
        port = self.env.params.rls_port
        self.send_msg(
            ctx.ue_name,
            Protocol.RLS,
            build(MsgKind.RLS_DATA, ue_id=ctx.ue_id, data=inner_raw),
            sport=port,
            dport=port,
            attrs={"msg_kind": MsgKind.RLS_DATA.name, "ue_id": ctx.ue_id},
        )


DEREGISTERED = "DEREGISTERED"
REGISTERING = "REGISTERING"
REGISTERED = "REGISTERED"
SESSION_PENDING = "SESSION_PENDING"
SESSION_ACTIVE = "SESSION_ACTIVE"


@dataclass(frozen=True)
class UeSession:
    ue_ip: str
    mode: Redundancy
    paths: tuple[SessionPath, ...]

    @property
    def gnbs(self) -> tuple[str, ...]:
        seen: list[str] = []
        for p in self.paths:
            if p.gnb not in seen:
                seen.append(p.gnb)
        return tuple(seen)


@dataclass
class Transfer:
    """One document fetch as seen from the UE."""

    doc: str
    started_ms: int
    completed_ms: int | None = None
    expected_size: int | None = None
    expected_segments: int | None = None
    digest: str | None = None
    segments: dict[int, bytes] = field(default_factory=dict)
    ok: bool | None = None
    error: str | None = None

    @property
    def done(self) -> bool:
        return self.ok is not None


class Ue(NfEntity):
    """User equipment: NAS state machine plus the application client."""

    kind = "UE"
    registers = False

    def __init__(self, name, ip, net, env, imsi: str, gnbs: tuple[str, ...] = ()):
        super().__init__(name, ip, net, env)
        self.heartbeat_enabled = False
        self.imsi = imsi
        self.gnbs: tuple[str, ...] = tuple(gnbs)
        self.state = DEREGISTERED
        self.session: UeSession | None = None
        self.reject_reason: str | None = None
        self._want_mode: Redundancy | None = None
        self._app_seq = 0
        self._dl_window = DedupWindow()
        self.transfers: list[Transfer] = []

    def attach_gnbs(self, gnbs: tuple[str, ...]) -> None:
        self.gnbs = tuple(gnbs)

    @property
    def primary_gnb(self) -> str:
        if not self.gnbs:
            raise SetupError(f"{self.name}: not attached to any gNB")
        return self.gnbs[0]

    # -- radio send helpers ------------------------------------------------

    def _rls_send(self, gnb: str, kind: MsgKind, attrs: dict[str, str] | None = None, **fields) -> None:
        if self.net.link_between(self.name, gnb) is None:
            raise SetupError(f"{self.name}: no radio link to {gnb}")
        port = self.env.params.rls_port
        merged = {"msg_kind": kind.name, "ue_id": self.imsi}
        if attrs:
            merged.update(attrs)
        self.send_msg(gnb, Protocol.RLS, build(kind, **fields), sport=port, dport=port, attrs=merged)

    def _send_nas(self, kind: MsgKind, **fields) -> None:
        nas = build(kind, **fields)
        self._rls_send(
            self.primary_gnb, MsgKind.RLS_NAS, attrs={"nas_kind": kind.name},
            ue_id=self.imsi, data=nas,
        )

    # -- control flows -------------------------------------------------------

    def register(self) -> None:
        """Start NAS registration. A second call while pending or registered
        is a no-op."""
        if self.state != DEREGISTERED:
            return
        self.state = REGISTERING
        self.reject_reason = None
        self._send_nas(MsgKind.NAS_REGISTER_REQ, ue_id=self.imsi)

    def attach(self, mode: Redundancy = Redundancy.NONE) -> None:
        """Register and, once accepted, request a session in the given mode."""
        self._want_mode = mode
        if self.state == REGISTERED:
            self.request_session(mode)
        else:
            self.register()

    def request_session(self, mode: Redundancy = Redundancy.NONE) -> None:
        if self.state != REGISTERED:
            raise FlowError(f"{self.name}: cannot request a session while {self.state}")
        self.state = SESSION_PENDING
        self._send_nas(
            MsgKind.NAS_SESSION_REQ, ue_id=self.imsi, mode=mode.name, gnb=";".join(self.gnbs)
        )

    # -- incoming radio ---------------------------------------------------------

    def on_rls(self, m, pkt: SimPacket, link: Link, now: int) -> None:
        if m.kind == MsgKind.RLS_NAS:
            self._on_nas_inner(parse(m.raw(Tag.DATA) or b""), now)
        elif m.kind == MsgKind.RLS_DATA:
            self._on_user_packet(m.raw(Tag.DATA) or b"", pkt, link, now)
        else:
            super().on_rls(m, pkt, link, now)

    def _on_nas_inner(self, m, now: int) -> None:
        if m.kind == MsgKind.NAS_REGISTER_ACCEPT:
            if self.state == REGISTERING:
                self.state = REGISTERED
                if self._want_mode is not None:
                    self.request_session(self._want_mode)
        elif m.kind == MsgKind.NAS_REGISTER_REJECT:
            self.state = DEREGISTERED
            self.reject_reason = m.text(Tag.REASON, "rejected")
        elif m.kind == MsgKind.NAS_SESSION_ACCEPT:
            self.session = UeSession(
                ue_ip=m.require(Tag.UE_IP),
                mode=Redundancy.parse(m.text(Tag.MODE, "NONE")),
                paths=decode_paths(m.text(Tag.PATHS, "")),
            )
            self.state = SESSION_ACTIVE
        elif m.kind == MsgKind.NAS_SESSION_REJECT:
            self.state = REGISTERED
            self.reject_reason = m.text(Tag.REASON, "rejected")
        else:
            log.debug("%s: unhandled NAS %s", self.name, m.kind.name)

    # -- application client -------------------------------------------------------

    def _app_send(self, kind: MsgKind, **fields) -> None:
        """Send one application message through the session, replicating at
        the endpoint when the plan calls for it."""
        if self.state != SESSION_ACTIVE or self.session is None:
            raise FlowError(f"{self.name}: no active session")
        sess = self.session
        if sess.mode is Redundancy.DUAL_CONNECTIVITY:
            fields["seq"] = self._app_seq
            self._app_seq = (self._app_seq + 1) % SEQ_MODULUS
        port = self.env.params.app_port
        inner = SimPacket(
            protocol=Protocol.APP,
            src_ip=sess.ue_ip,
            dst_ip=self.env.server_ip,
            src_port=port,
            dst_port=port,
            payload=build(kind, **fields),
        )
        raw = encode_packet(inner)
        targets = sess.gnbs if sess.mode is Redundancy.DUAL_CONNECTIVITY else (sess.gnbs[0],)
        for gnb in targets:
            self._rls_send(gnb, MsgKind.RLS_DATA, attrs={"app_kind": kind.name}, data=raw)

    def request_document(self, doc: str) -> Transfer:
        transfer = Transfer(doc=doc, started_ms=self.net.now)
        self.transfers.append(transfer)
        self._app_send(MsgKind.APP_GET, doc=doc)
        return transfer

    def send_data_burst(self, count: int, interval_ms: int = 1) -> None:
        """Emit a paced uplink burst; packet i carries index i."""
        if count <= 0:
            return
        for i in range(count):
            self.net.schedule_in(
                i * interval_ms, lambda i=i: self._app_send(MsgKind.APP_DATA, index=i)
            )

    # -- downlink application packets ----------------------------------------------

    def _on_user_packet(self, raw: bytes, pkt: SimPacket, link: Link, now: int) -> None:
        try:
            inner = decode_packet(raw)
            m = parse(inner.payload)
        except WireFormatError as exc:
            self.net.tap_local(
                self.name, len(raw), Protocol.APP, DROPPED,
                src=self._sender_name(pkt, link), attrs={"reason": str(exc)},
            )
            return
        seq = m.num(Tag.SEQ)
        if (
            self.session is not None
            and self.session.mode is Redundancy.DUAL_CONNECTIVITY
            and seq is not None
            and not self._dl_window.accept(seq)
        ):
            self.net.tap_local(
                self.name, inner, Protocol.APP, ELIMINATED_DUPLICATE,
                src=self._sender_name(pkt, link), attrs={"seq": str(seq)},
            )
            return
        if m.kind == MsgKind.APP_GET_ACK:
            transfer = self._transfer_for(m.require(Tag.DOC))
            if transfer is None:
                return
            transfer.expected_size = m.num(Tag.SIZE)
            transfer.expected_segments = m.num(Tag.SEGMENTS)
            transfer.digest = m.text(Tag.DIGEST)
            self._try_finish(transfer, now)
        elif m.kind == MsgKind.APP_SEGMENT:
            transfer = self._transfer_for(m.require(Tag.DOC))
            if transfer is None:
                return
            index = m.num(Tag.INDEX)
            if index is not None and index not in transfer.segments:
                transfer.segments[index] = m.raw(Tag.DATA) or b""
            self._try_finish(transfer, now)
        elif m.kind == MsgKind.APP_ERROR:
            transfer = self._transfer_for(m.text(Tag.DOC, ""))
            if transfer is not None:
                transfer.ok = False
                transfer.error = m.text(Tag.REASON, "error")
                transfer.completed_ms = now
        else:
            log.debug("%s: unhandled APP %s", self.name, m.kind.name)

    def _transfer_for(self, doc: str) -> Transfer | None:
        for transfer in self.transfers:
            if transfer.doc == doc and not transfer.done:
                return transfer
        return None

    def _try_finish(self, transfer: Transfer, now: int) -> None:
        if transfer.expected_segments is None:
            return
        if len(transfer.segments) < transfer.expected_segments:
            return
        body = b"".join(transfer.segments[i] for i in sorted(transfer.segments))
        good = (
            len(body) == (transfer.expected_size or 0)
            and hashlib.sha256(body).hexdigest() == transfer.digest
        )
        transfer.ok = good
        transfer.error = None if good else "integrity check failed"
        transfer.completed_ms = now
        self._app_send(
            MsgKind.APP_COMPLETE,
            doc=transfer.doc,
            result="OK" if good else "ERROR",
            size=len(body),
        )
