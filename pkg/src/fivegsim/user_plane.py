"""User-plane nodes: UPF forwarding engines and the application server.

A UPF is a rule machine programmed over N4. Uplink G-PDUs match on TEID,
plain downlink packets match on the session address; actions either hand the
inner packet to a neighbour (route) or wrap it into another tunnel (encap).
Duplicate elimination and sequence stamping happen here for the modes that
anchor redundancy in the core.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

from .core_cp import ERROR, OK, NfEntity
from .errors import FlowError
from .messages import MsgKind, Tag, build, parse
from .simnet import DROPPED, ELIMINATED_DUPLICATE, Link
from .urllc import SEQ_MODULUS, DedupWindow
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


@dataclass(frozen=True)
class ForwardAction:
    """One rule action: route hands the inner packet over, encap re-tunnels."""

    kind: str                 # "route" | "encap"
    target: str               # neighbour entity name
    teid: int = 0             # encap only
    carry_seq: bool = False   # encap only: propagate the incoming sequence


@dataclass
class TeidRule:
    teid: int
    ue_id: str
    dedup: bool
    actions: tuple[ForwardAction, ...]


@dataclass
class UeIpRule:
    ue_ip: str
    ue_id: str
    assign_seq: bool
    actions: tuple[ForwardAction, ...]
    next_seq: int = 0


def parse_rule_program(text: str, ue_id: str) -> tuple[list[TeidRule], list[UeIpRule]]:
    """Parse the N4 rule grammar.

    ``TEID|<teid>|<dedup>|<actions>`` and ``UEIP|<addr>|<assign_seq>|<actions>``
    joined by ";"; actions are ``route:<entity>`` or
    ``encap:<entity>:<teid>:<carry>`` joined by ",".
    """
    teid_rules: list[TeidRule] = []
    ueip_rules: list[UeIpRule] = []
    for part in text.split(";"):
        if not part:
            continue
        fields = part.split("|")
        if len(fields) != 4:
            raise FlowError(f"malformed rule {part!r}")
        kind, selector, flag, actions_text = fields
        actions = []
        for spec in actions_text.split(","):
            bits = spec.split(":")
            if bits[0] == "route" and len(bits) == 2:
                actions.append(ForwardAction(kind="route", target=bits[1]))
            elif bits[0] == "encap" and len(bits) == 4 and bits[2].isdigit():
                actions.append(
                    ForwardAction(
                        kind="encap", target=bits[1], teid=int(bits[2]), carry_seq=bits[3] == "1"
                    )
                )
            else:
                raise FlowError(f"malformed action {spec!r}")
        if kind == "TEID":
            if not selector.isdigit():
                raise FlowError(f"malformed rule selector {selector!r}")
            teid_rules.append(
                TeidRule(teid=int(selector), ue_id=ue_id, dedup=flag == "1", actions=tuple(actions))
            )
        elif kind == "UEIP":
            ueip_rules.append(
                UeIpRule(ue_ip=selector, ue_id=ue_id, assign_seq=flag == "1", actions=tuple(actions))
            )
        else:
            raise FlowError(f"unknown rule kind {kind!r}")
    return teid_rules, ueip_rules


class Upf(NfEntity):
    """User plane function: a programmable match/action forwarder."""

    kind = "UPF"

    def __init__(self, name, ip, net, env):
        super().__init__(name, ip, net, env)
        self.associated_smfs: set[str] = set()
        self.teid_rules: dict[int, TeidRule] = {}
        self.ueip_rules: dict[str, UeIpRule] = {}
        self._ul_windows: dict[str, DedupWindow] = {}  # ue_id -> shared window across tunnels

    # -- N4 ------------------------------------------------------------------

    def on_pfcp(self, m, pkt, link, now) -> None:
        smf = self._sender_name(pkt, link)
        port = self.env.params.pfcp_port
        if m.kind == MsgKind.PFCP_ASSOC_REQ:
            self.associated_smfs.add(smf)
            self.send_msg(
                smf,
                Protocol.PFCP,
                build(MsgKind.PFCP_ASSOC_RESP, result=OK, nf_id=self.name),
                sport=port,
                dport=port,
                attrs={"msg_kind": MsgKind.PFCP_ASSOC_RESP.name},
            )
        elif m.kind == MsgKind.PFCP_SESSION_REQ:
            ue_id = m.require(Tag.UE_ID)
            if smf not in self.associated_smfs:
                resp = build(
                    MsgKind.PFCP_SESSION_RESP, ue_id=ue_id, result=ERROR, reason="no association"
                )
            else:
                teid_rules, ueip_rules = parse_rule_program(m.text(Tag.RULES, ""), ue_id)
                for rule in teid_rules:
                    self.teid_rules[rule.teid] = rule
                for rule in ueip_rules:
                    self.ueip_rules[rule.ue_ip] = rule
                resp = build(MsgKind.PFCP_SESSION_RESP, ue_id=ue_id, result=OK)
            self.send_msg(
                smf,
                Protocol.PFCP,
                resp,
                sport=port,
                dport=port,
                attrs={"msg_kind": MsgKind.PFCP_SESSION_RESP.name, "ue_id": ue_id},
            )
        else:
            super().on_pfcp(m, pkt, link, now)

    # -- forwarding ------------------------------------------------------------

    def _run_actions(
        self, actions: tuple[ForwardAction, ...], inner_raw: bytes, inner: SimPacket, seq: int | None
    ) -> None:
        inner_kind = parse(inner.payload).kind.name if inner.protocol == Protocol.APP else ""
        for action in actions:
            if action.kind == "route":
                self.send_msg(
                    action.target,
                    inner.protocol,
                    inner.payload,
                    sport=inner.src_port,
                    dport=inner.dst_port,
                    src_ip=inner.src_ip,
                    dst_ip=inner.dst_ip,
                    attrs={"msg_kind": inner_kind} if inner_kind else None,
                )
            else:
                out_seq = seq if action.carry_seq else None
                self._encap_to(action.target, action.teid, inner_raw, out_seq, inner_kind)

    def _encap_to(
        self, target: str, teid: int, inner_raw: bytes, seq: int | None, inner_kind: str
    ) -> None:
        attrs = {"teid": str(teid)}
        if seq is not None:
            attrs["seq"] = str(seq)
        if inner_kind:
            attrs["inner"] = inner_kind
        port = self.env.params.gtpu_port
        self.send_msg(
            target,
            Protocol.GTPU,
            gtpu_encapsulate(inner_raw, teid, seq),
            sport=port,
            dport=port,
            stream=teid,
            attrs=attrs,
        )

    def on_gtpu(self, pkt: SimPacket, link: Link, now: int) -> None:
        sender = self._sender_name(pkt, link)
        try:
            inner_raw, teid, seq = gtpu_decapsulate(pkt.payload)
            inner = decode_packet(inner_raw)
        except WireFormatError as exc:
            self.net.tap_local(
                self.name, pkt, Protocol.GTPU, DROPPED, src=sender, attrs={"reason": str(exc)}
            )
            return
        rule = self.teid_rules.get(teid)
        if rule is None:
            self.net.tap_local(
                self.name,
                pkt,
                Protocol.GTPU,
                DROPPED,
                src=sender,
                attrs={"reason": "unknown teid", "teid": str(teid)},
            )
            return
        if rule.dedup and seq is not None:
            window = self._ul_windows.setdefault(rule.ue_id, DedupWindow())
            if not window.accept(seq):
                self.net.tap_local(
                    self.name,
                    pkt,
                    Protocol.GTPU,
                    ELIMINATED_DUPLICATE,
                    src=sender,
                    attrs={"teid": str(teid), "seq": str(seq)},
                )
                return
        self._run_actions(rule.actions, inner_raw, inner, seq)

    def on_app(self, m, pkt: SimPacket, link: Link, now: int) -> None:
        # plain packet from the data network: match the session address
        rule = self.ueip_rules.get(pkt.dst_ip)
        sender = self._sender_name(pkt, link)
        if rule is None:
            self.net.tap_local(
                self.name,
                pkt,
                Protocol.APP,
                DROPPED,
                src=sender,
                attrs={"reason": "no downlink rule", "dst_ip": pkt.dst_ip},
            )
            return
        seq = None
        if rule.assign_seq:
            seq = rule.next_seq
            rule.next_seq = (rule.next_seq + 1) % SEQ_MODULUS
        inner_raw = encode_packet(pkt)
        inner_kind = m.kind.name
        for action in rule.actions:
            if action.kind == "encap":
                self._encap_to(action.target, action.teid, inner_raw, seq, inner_kind)
            else:
                self._run_actions((action,), inner_raw, pkt, seq)


def document_content(doc: str, size: int) -> bytes:
    """Deterministic document body: the name repeated cyclically."""
    if size < 0:
        raise FlowError(f"negative document size {size}")
    pattern = doc.encode() or b"?"
    reps = size // len(pattern) + 1
    return (pattern * reps)[:size]


def document_digest(doc: str, size: int) -> str:
    return hashlib.sha256(document_content(doc, size)).hexdigest()


def segment_count(size: int, segment_bytes: int) -> int:
    """Segments needed for a body; an empty body still takes one segment."""
    if size <= 0:
        return 1
    return -(-size // segment_bytes)


@dataclass
class ServedRequest:
    ue_ip: str
    doc: str
    ts: int
    segments: int


class AppServer(NfEntity):
    """Data-network endpoint: serves documents, absorbs data bursts.

    Downlink routes are learned from uplink arrivals, so endpoint-level
    replication needs no session registry here: whichever UPFs delivered a
    request get the response fanned back through them.
    """

    kind = "SERVER"
    registers = False

    def __init__(self, name, ip, net, env, documents: dict[str, int] | None = None):
        super().__init__(name, ip, net, env)
        self.heartbeat_enabled = False
        self.documents: dict[str, int] = dict(documents or {})
        self.routes: dict[str, list[str]] = {}       # ue_ip -> UPFs that delivered uplink
        self._dedup: dict[str, DedupWindow] = {}     # ue_ip -> uplink window (app-level seq)
        self._tagging: set[str] = set()              # ue_ips whose downlink gets sequence tags
        self._dl_seq: dict[str, int] = {}
        self.served: list[ServedRequest] = []
        self.completes: dict[str, int] = {}          # ue_ip -> APP_COMPLETE count
        self.data_received: dict[str, int] = {}      # ue_ip -> post-elimination APP_DATA count
        self.data_indices: dict[str, set[int]] = {}

    def _learn_route(self, ue_ip: str, upf: str) -> None:
        routes = self.routes.setdefault(ue_ip, [])
        if upf not in routes:
            routes.append(upf)

    def _send_downlink(self, ue_ip: str, dport: int, kind: MsgKind, **fields) -> None:
        routes = self.routes.get(ue_ip)
        if not routes:
            self.net.tap_local(
                self.name,
                0,
                Protocol.APP,
                DROPPED,
                src=self.name,
                attrs={"reason": "no route", "ue_ip": ue_ip},
            )
            return
        if ue_ip in self._tagging:
            seq = self._dl_seq.get(ue_ip, 0)
            self._dl_seq[ue_ip] = (seq + 1) % SEQ_MODULUS
            fields["seq"] = seq
        payload = build(kind, **fields)
        port = self.env.params.app_port
        for upf in routes:
            self.send_msg(
                upf,
                Protocol.APP,
                payload,
                sport=port,
                dport=dport,
                dst_ip=ue_ip,
                attrs={"msg_kind": kind.name, "ue_ip": ue_ip},
            )

    def on_app(self, m, pkt: SimPacket, link: Link, now: int) -> None:
        ue_ip = pkt.src_ip
        self._learn_route(ue_ip, self._sender_name(pkt, link))
        seq = m.num(Tag.SEQ)
        if seq is not None:
            # endpoint-level redundancy: eliminate replicas before counting
            self._tagging.add(ue_ip)
            window = self._dedup.setdefault(ue_ip, DedupWindow())
            if not window.accept(seq):
                self.net.tap_local(
                    self.name,
                    pkt,
                    Protocol.APP,
                    ELIMINATED_DUPLICATE,
                    src=self._sender_name(pkt, link),
                    attrs={"seq": str(seq), "ue_ip": ue_ip},
                )
                return
        if m.kind == MsgKind.APP_GET:
            # Serve after draining same-tick arrivals so a replicated request
            # teaches us every return route before the response fans out.
            doc = m.require(Tag.DOC)
            sport = pkt.src_port
            self.net.schedule_in(0, lambda: self._serve(ue_ip, sport, doc, self.net.now))
        elif m.kind == MsgKind.APP_COMPLETE:
            self.completes[ue_ip] = self.completes.get(ue_ip, 0) + 1
        elif m.kind == MsgKind.APP_DATA:
            self.data_received[ue_ip] = self.data_received.get(ue_ip, 0) + 1
            index = m.num(Tag.INDEX)
            if index is not None:
                self.data_indices.setdefault(ue_ip, set()).add(index)
        else:
            log.debug("%s: ignoring APP %s", self.name, m.kind.name)

    def _serve(self, ue_ip: str, dport: int, doc: str, now: int) -> None:
        size = self.documents.get(doc)
        if size is None:
            self._send_downlink(ue_ip, dport, MsgKind.APP_ERROR, doc=doc, reason="no such document")
            return
        seg = self.env.params.segment_bytes
        n_segments = segment_count(size, seg)
        content = document_content(doc, size)
        self.served.append(ServedRequest(ue_ip=ue_ip, doc=doc, ts=now, segments=n_segments))
        self._send_downlink(
            ue_ip,
            dport,
            MsgKind.APP_GET_ACK,
            doc=doc,
            size=size,
            segments=n_segments,
            digest=hashlib.sha256(content).hexdigest(),
        )
        for index in range(n_segments):
            self._send_downlink(
                ue_ip,
                dport,
                MsgKind.APP_SEGMENT,
                doc=doc,
                index=index,
                data=content[index * seg : (index + 1) * seg],
            )
