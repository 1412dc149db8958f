"""Control-plane network functions: registry, access management, sessions.

Every entity here is an event-driven state machine attached to the fabric.
Flows are the standard ones: NFs register with the NRF and heartbeat on a
shared grid; the AMF discovers its peers, accepts NGAP setups from gNBs and
runs UE registration through AUSF, UDM (backed by UDR) and PCF; the SMF
associates with UPFs over PFCP and anchors PDU sessions, allocating UE
addresses and tunnel endpoints.
"""
from __future__ import annotations

import ipaddress
import logging
from dataclasses import dataclass, field, replace

from .config import Params
from .errors import FlowError, SetupError
from .messages import MsgKind, Tag, build, parse
from .simnet import Entity, Link, Network
from .urllc import Redundancy, RedundancyMode
from .wirefmt import Protocol, SimPacket

log = logging.getLogger(__name__)

REGISTERED = "REGISTERED"
SUSPENDED = "SUSPENDED"
DEREGISTERED = "DEREGISTERED"

OK = "OK"
ERROR = "ERROR"


@dataclass
class NfProfile:
    """One registry entry."""

    nf_id: str
    nf_type: str
    addr: str
    status: str = REGISTERED
    last_heartbeat: int = 0

    def snapshot(self) -> "NfProfile":
        return replace(self)


@dataclass(frozen=True)
class SessionPath:
    """One tunnel leg of a PDU session as the gNB sees it."""

    gnb: str
    upf: str
    teid_ul: int   # UPF-side endpoint, used for gNB -> UPF traffic
    teid_dl: int   # gNB-side endpoint, used for UPF -> gNB traffic
    carry_seq: bool = False


@dataclass(frozen=True)
class PduSession:
    """An established session: address, plan, concrete tunnel endpoints."""

    ue_id: str
    ue_ip: str
    plan: RedundancyMode
    paths: tuple[SessionPath, ...]
    state: str = "ACTIVE"


@dataclass(frozen=True)
class CoreEnv:
    """Run-wide wiring every entity needs: knobs plus well-known names."""

    params: Params
    nrf_name: str
    server_name: str
    server_ip: str
    nwdaf_name: str


def encode_paths(paths: tuple[SessionPath, ...]) -> str:
    return ";".join(
        f"{p.gnb}/{p.upf}/{p.teid_ul}/{p.teid_dl}/{int(p.carry_seq)}" for p in paths
    )


def decode_paths(text: str) -> tuple[SessionPath, ...]:
    out = []
    for part in text.split(";"):
        if not part:
            continue
        gnb, upf, tu, td, carry = part.split("/")
        out.append(
            SessionPath(gnb=gnb, upf=upf, teid_ul=int(tu), teid_dl=int(td), carry_seq=carry == "1")
        )
    return tuple(out)


class NfEntity(Entity):
    """Base for every node that talks on the fabric.

    Control NFs additionally register with the NRF and heartbeat on the
    shared interval grid; non-NF nodes (gNB, UE, server) just reuse the
    send helpers.
    """

    registers = True          # takes part in NRF registration at boot
    subscribes_status = False

    def __init__(self, name: str, ip: str, net: Network, env: CoreEnv):
        super().__init__(name, ip, net)
        self.env = env
        self.registered = False
        self.heartbeat_enabled = True
        self.notifications: list[tuple[str, str]] = []  # (nf_id, status) seen via NF_STATUS_NOTIFY

    # -- sending helpers --------------------------------------------------

    def send_msg(
        self,
        peer: str,
        protocol: Protocol,
        payload: bytes,
        *,
        sport: int,
        dport: int,
        attrs: dict[str, str] | None = None,
        stream: int = 0,
        src_ip: str | None = None,
        dst_ip: str | None = None,
    ) -> bool:
        link = self.net.require_link(self.name, peer)
        peer_entity = self.net.entity(peer)
        pkt = SimPacket(
            protocol=protocol,
            src_ip=src_ip or self.ip,
            dst_ip=dst_ip or peer_entity.ip,
            src_port=sport,
            dst_port=dport,
            payload=payload,
        )
        return self.net.send(link, pkt, stream=stream, attrs=attrs)

    def send_sbi(self, peer: str, kind: MsgKind, attrs: dict[str, str] | None = None, **fields) -> bool:
        port = self.env.params.sbi_port
        merged = {"msg_kind": kind.name}
        if attrs:
            merged.update(attrs)
        if "ue_id" in fields and fields["ue_id"] is not None:
            merged.setdefault("ue_id", str(fields["ue_id"]))
        return self.send_msg(
            peer, Protocol.SBI, build(kind, **fields), sport=port, dport=port, attrs=merged
        )

    # -- NRF client -------------------------------------------------------

    def boot_register(self) -> None:
        self.send_sbi(
            self.env.nrf_name,
            MsgKind.NF_REGISTER_REQ,
            nf_id=self.name,
            nf_type=self.kind,
            addr=self.ip,
        )

    def after_registered(self) -> None:
        """Hook invoked once the registry acknowledged us."""

    def _arm_heartbeat(self) -> None:
        hb = self.env.params.heartbeat_ms
        self.net.schedule((self.net.now // hb + 1) * hb, self._heartbeat_fire)

    def _heartbeat_fire(self) -> None:
        if self.registered and self.heartbeat_enabled:
            self.send_sbi(self.env.nrf_name, MsgKind.NF_HEARTBEAT_REQ, nf_id=self.name)
        self._arm_heartbeat()

    # -- dispatch ----------------------------------------------------------

    def handle_packet(self, pkt: SimPacket, link: Link, now: int) -> None:
        if pkt.protocol == Protocol.SBI:
            self.on_sbi(parse(pkt.payload), pkt, link, now)
        elif pkt.protocol == Protocol.NGAP:
            self.on_ngap(parse(pkt.payload), pkt, link, now)
        elif pkt.protocol == Protocol.NAS:
            self.on_nas(parse(pkt.payload), pkt, link, now)
        elif pkt.protocol == Protocol.PFCP:
            self.on_pfcp(parse(pkt.payload), pkt, link, now)
        elif pkt.protocol == Protocol.GTPU:
            self.on_gtpu(pkt, link, now)
        elif pkt.protocol == Protocol.RLS:
            self.on_rls(parse(pkt.payload), pkt, link, now)
        elif pkt.protocol == Protocol.APP:
            self.on_app(parse(pkt.payload), pkt, link, now)

    def on_sbi(self, m, pkt: SimPacket, link: Link, now: int) -> None:
        if m.kind == MsgKind.NF_REGISTER_RESP:
            if m.text(Tag.RESULT) == OK:
                self.registered = True
                self._arm_heartbeat()
                if self.subscribes_status:
                    self.send_sbi(self.env.nrf_name, MsgKind.NF_STATUS_SUBSCRIBE_REQ, nf_id=self.name)
                self.after_registered()
            else:
                log.warning("%s: registration rejected: %s", self.name, m.text(Tag.REASON))
        elif m.kind == MsgKind.NF_STATUS_NOTIFY:
            self.notifications.append((m.text(Tag.NF_ID, ""), m.text(Tag.STATUS, "")))
        elif m.kind in (
            MsgKind.NF_HEARTBEAT_RESP,
            MsgKind.NF_STATUS_SUBSCRIBE_RESP,
            MsgKind.NF_DEREGISTER_RESP,
            MsgKind.KPI_NOTIFY,
        ):
            pass
        else:
            log.debug("%s: unhandled SBI %s", self.name, m.kind.name)

    def on_ngap(self, m, pkt, link, now) -> None:
        log.debug("%s: unhandled NGAP %s", self.name, m.kind.name)

    def on_nas(self, m, pkt, link, now) -> None:
        log.debug("%s: unhandled NAS %s", self.name, m.kind.name)

    def on_pfcp(self, m, pkt, link, now) -> None:
        log.debug("%s: unhandled PFCP %s", self.name, m.kind.name)

    def on_gtpu(self, pkt, link, now) -> None:
        log.debug("%s: unexpected GTP-U packet", self.name)

    def on_rls(self, m, pkt, link, now) -> None:
        log.debug("%s: unhandled RLS %s", self.name, m.kind.name)

    def on_app(self, m, pkt, link, now) -> None:
        log.debug("%s: unhandled APP %s", self.name, m.kind.name)

    def _sender_name(self, pkt: SimPacket, link: Link) -> str:
        ent = self.net.by_ip.get(pkt.src_ip)
        if ent is not None:
            return ent.name
        return link.peer_of(self.name).name


class Nrf(NfEntity):
    """Repository function: registry, heartbeat ledger, status fanout."""

    kind = "NRF"

    def __init__(self, name, ip, net, env):
        super().__init__(name, ip, net, env)
        self.registry: dict[str, NfProfile] = {}
        self.status_subscribers: list[str] = []
        self.heartbeat_enabled = False

    def boot(self) -> None:
        # The registry holds its own profile; no packets are involved.
        self.registry[self.name] = NfProfile(
            nf_id=self.name, nf_type=self.kind, addr=self.ip, last_heartbeat=self.net.now
        )
        self.registered = True
        self._arm_sweep()

    # -- registry operations (local API, also backing the SBI handlers) ---

    def register_profile(self, nf_id: str, nf_type: str, addr: str) -> NfProfile:
        existing = self.registry.get(nf_id)
        if existing is not None and existing.status != DEREGISTERED:
            raise FlowError(f"duplicate registration for {nf_id}")
        profile = NfProfile(nf_id=nf_id, nf_type=nf_type, addr=addr, last_heartbeat=self.net.now)
        self.registry[nf_id] = profile
        return profile

    def heartbeat(self, nf_id: str) -> NfProfile:
        profile = self.registry.get(nf_id)
        if profile is None or profile.status == DEREGISTERED:
            raise FlowError(f"heartbeat for unknown or deregistered NF {nf_id}")
        profile.last_heartbeat = self.net.now
        if profile.status == SUSPENDED:
            profile.status = REGISTERED
        return profile

    def deregister(self, nf_id: str) -> NfProfile:
        profile = self.registry.get(nf_id)
        if profile is None or profile.status == DEREGISTERED:
            raise FlowError(f"deregistration for unknown NF {nf_id}")
        profile.status = DEREGISTERED
        return profile

    def discover(self, nf_type: str) -> list[NfProfile]:
        found = [
            p.snapshot()
            for p in self.registry.values()
            if p.nf_type == nf_type and p.status == REGISTERED
        ]
        return sorted(found, key=lambda p: p.nf_id)

    def registry_snapshot(self) -> dict[str, NfProfile]:
        return {nf_id: p.snapshot() for nf_id, p in self.registry.items()}

    # -- sweep -------------------------------------------------------------

    def _arm_sweep(self) -> None:
        hb = self.env.params.heartbeat_ms
        self.net.schedule((self.net.now // hb + 1) * hb, self._sweep_fire)

    def _sweep_fire(self) -> None:
        hb = self.env.params.heartbeat_ms
        for profile in self.registry.values():
            if profile.nf_id == self.name:
                profile.last_heartbeat = self.net.now
            elif profile.status == REGISTERED and self.net.now - profile.last_heartbeat > 2 * hb:
                profile.status = SUSPENDED
                self._notify(profile)
        self._arm_sweep()

    def _notify(self, profile: NfProfile) -> None:
        for sub in self.status_subscribers:
            if sub != profile.nf_id:
                self.send_sbi(
                    sub,
                    MsgKind.NF_STATUS_NOTIFY,
                    nf_id=profile.nf_id,
                    nf_type=profile.nf_type,
                    status=profile.status,
                )

    # -- SBI server ---------------------------------------------------------

    def on_sbi(self, m, pkt, link, now) -> None:
        requester = self._sender_name(pkt, link)
        if m.kind == MsgKind.NF_REGISTER_REQ:
            nf_id = m.require(Tag.NF_ID)
            try:
                profile = self.register_profile(nf_id, m.require(Tag.NF_TYPE), m.require(Tag.ADDR))
            except FlowError as exc:
                self.send_sbi(requester, MsgKind.NF_REGISTER_RESP, result=ERROR, reason=str(exc))
                return
            self.send_sbi(requester, MsgKind.NF_REGISTER_RESP, result=OK, nf_id=nf_id)
            self._notify(profile)
        elif m.kind == MsgKind.NF_HEARTBEAT_REQ:
            nf_id = m.require(Tag.NF_ID)
            try:
                self.heartbeat(nf_id)
            except FlowError as exc:
                self.send_sbi(
                    requester, MsgKind.NF_HEARTBEAT_RESP, result=ERROR, reason=str(exc), nf_id=nf_id
                )
                return
            self.send_sbi(requester, MsgKind.NF_HEARTBEAT_RESP, result=OK, nf_id=nf_id)
        elif m.kind == MsgKind.NF_DISCOVER_REQ:
            req_profile = self.registry.get(requester)
            if req_profile is None or req_profile.status != REGISTERED:
                self.send_sbi(
                    requester, MsgKind.NF_DISCOVER_RESP, result=ERROR, reason="requester not registered"
                )
                return
            nf_type = m.require(Tag.NF_TYPE)
            data = ";".join(f"{p.nf_id}|{p.nf_type}|{p.addr}" for p in self.discover(nf_type))
            self.send_sbi(
                requester, MsgKind.NF_DISCOVER_RESP, result=OK, nf_type=nf_type, data=data.encode()
            )
        elif m.kind == MsgKind.NF_STATUS_SUBSCRIBE_REQ:
            if requester not in self.status_subscribers:
                self.status_subscribers.append(requester)
            self.send_sbi(requester, MsgKind.NF_STATUS_SUBSCRIBE_RESP, result=OK)
        elif m.kind == MsgKind.NF_DEREGISTER_REQ:
            nf_id = m.require(Tag.NF_ID)
            try:
                profile = self.deregister(nf_id)
            except FlowError as exc:
                self.send_sbi(requester, MsgKind.NF_DEREGISTER_RESP, result=ERROR, reason=str(exc))
                return
            self.send_sbi(requester, MsgKind.NF_DEREGISTER_RESP, result=OK, nf_id=nf_id)
            self._notify(profile)
        else:
            super().on_sbi(m, pkt, link, now)


class Amf(NfEntity):
    """Access and mobility function: NGAP endpoint plus registration broker."""

    kind = "AMF"
    subscribes_status = True

    def __init__(self, name, ip, net, env):
        super().__init__(name, ip, net, env)
        self.peers: dict[str, str] = {}  # nf_type -> chosen nf name
        self.gnbs: set[str] = set()
        self.ue_registered: dict[str, str] = {}  # ue_id -> serving gNB
        self._pending_reg: dict[str, str] = {}   # ue_id -> gNB the request came from
        self._pending_sess: dict[str, str] = {}

    def discover_peers(self) -> None:
        for nf_type in ("AUSF", "UDM", "PCF", "SMF"):
            self.send_sbi(self.env.nrf_name, MsgKind.NF_DISCOVER_REQ, nf_type=nf_type)

    def _peer(self, nf_type: str) -> str:
        name = self.peers.get(nf_type)
        if name is None:
            raise SetupError(f"{self.name}: no {nf_type} discovered yet")
        return name

    # -- NGAP (towards gNBs, reliable transport required) -------------------

    def on_ngap(self, m, pkt, link, now) -> None:
        gnb = self._sender_name(pkt, link)
        if m.kind == MsgKind.NGAP_SETUP_REQ:
            if not link.reliable:
                self.send_msg(
                    gnb,
                    Protocol.NGAP,
                    build(MsgKind.NGAP_SETUP_RESP, result=ERROR, reason="transport not reliable"),
                    sport=self.env.params.ngap_port,
                    dport=self.env.params.ngap_port,
                    attrs={"msg_kind": MsgKind.NGAP_SETUP_RESP.name},
                )
                return
            self.gnbs.add(gnb)
            self.send_msg(
                gnb,
                Protocol.NGAP,
                build(MsgKind.NGAP_SETUP_RESP, result=OK),
                sport=self.env.params.ngap_port,
                dport=self.env.params.ngap_port,
                attrs={"msg_kind": MsgKind.NGAP_SETUP_RESP.name},
            )
        elif m.kind == MsgKind.NGAP_KEEPALIVE_REQ:
            self.send_msg(
                gnb,
                Protocol.NGAP,
                build(MsgKind.NGAP_KEEPALIVE_RESP, result=OK),
                sport=self.env.params.ngap_port,
                dport=self.env.params.ngap_port,
                attrs={"msg_kind": MsgKind.NGAP_KEEPALIVE_RESP.name},
            )
        elif m.kind == MsgKind.NGAP_SESSION_SETUP_ACK:
            pass
        else:
            super().on_ngap(m, pkt, link, now)

    # -- NAS relayed by gNBs -------------------------------------------------

    def _send_nas(self, gnb: str, kind: MsgKind, **fields) -> None:
        attrs = {"msg_kind": kind.name}
        if fields.get("ue_id"):
            attrs["ue_id"] = str(fields["ue_id"])
        self.send_msg(
            gnb,
            Protocol.NAS,
            build(kind, **fields),
            sport=self.env.params.ngap_port,
            dport=self.env.params.ngap_port,
            attrs=attrs,
        )

    def on_nas(self, m, pkt, link, now) -> None:
        gnb = self._sender_name(pkt, link)
        if m.kind == MsgKind.NAS_REGISTER_REQ:
            ue_id = m.require(Tag.UE_ID)
            if gnb not in self.gnbs:
                self._send_nas(gnb, MsgKind.NAS_REGISTER_REJECT, ue_id=ue_id, reason="no NGAP setup")
                return
            if ue_id in self.ue_registered:
                self._send_nas(gnb, MsgKind.NAS_REGISTER_ACCEPT, ue_id=ue_id)
                return
            self._pending_reg[ue_id] = gnb
            self.send_sbi(self._peer("AUSF"), MsgKind.AUTH_REQ, ue_id=ue_id)
        elif m.kind == MsgKind.NAS_SESSION_REQ:
            ue_id = m.require(Tag.UE_ID)
            if ue_id not in self.ue_registered:
                self._send_nas(gnb, MsgKind.NAS_SESSION_REJECT, ue_id=ue_id, reason="not registered")
                return
            self._pending_sess[ue_id] = gnb
            self.send_sbi(
                self._peer("SMF"),
                MsgKind.SESSION_CREATE_REQ,
                ue_id=ue_id,
                mode=m.text(Tag.MODE, Redundancy.NONE.name),
                gnb=m.text(Tag.GNB, gnb),
            )
        else:
            super().on_nas(m, pkt, link, now)

    # -- SBI client side -----------------------------------------------------

    def on_sbi(self, m, pkt, link, now) -> None:
        if m.kind == MsgKind.NF_DISCOVER_RESP:
            if m.text(Tag.RESULT) == OK:
                nf_type = m.require(Tag.NF_TYPE)
                entries = (m.raw(Tag.DATA) or b"").decode()
                if entries:
                    # entries arrive sorted by nf_id; take the lowest
                    self.peers[nf_type] = entries.split(";")[0].split("|")[0]
        elif m.kind == MsgKind.AUTH_RESP:
            ue_id = m.require(Tag.UE_ID)
            if ue_id in self._pending_reg:
                self.send_sbi(self._peer("UDM"), MsgKind.SUBSCRIBER_REQ, ue_id=ue_id)
        elif m.kind == MsgKind.SUBSCRIBER_RESP:
            ue_id = m.require(Tag.UE_ID)
            gnb = self._pending_reg.get(ue_id)
            if gnb is None:
                return
            if m.text(Tag.RESULT) == OK:
                self.send_sbi(self._peer("PCF"), MsgKind.POLICY_REQ, ue_id=ue_id)
            else:
                del self._pending_reg[ue_id]
                self._send_nas(
                    gnb,
                    MsgKind.NAS_REGISTER_REJECT,
                    ue_id=ue_id,
                    reason=m.text(Tag.REASON, "unknown subscriber"),
                )
        elif m.kind == MsgKind.POLICY_RESP:
            ue_id = m.require(Tag.UE_ID)
            gnb = self._pending_reg.pop(ue_id, None)
            if gnb is None:
                return
            self.ue_registered[ue_id] = gnb
            self._send_nas(gnb, MsgKind.NAS_REGISTER_ACCEPT, ue_id=ue_id)
        elif m.kind == MsgKind.SESSION_CREATE_RESP:
            ue_id = m.require(Tag.UE_ID)
            gnb = self._pending_sess.pop(ue_id, None)
            if gnb is None:
                return
            if m.text(Tag.RESULT) != OK:
                self._send_nas(
                    gnb, MsgKind.NAS_SESSION_REJECT, ue_id=ue_id, reason=m.text(Tag.REASON, "error")
                )
                return
            paths_text = m.text(Tag.PATHS, "")
            paths = decode_paths(paths_text)
            # Secondary gNBs get their tunnel legs over NGAP before the UE
            # hears anything.
            for other in sorted({p.gnb for p in paths} - {gnb}):
                self.send_msg(
                    other,
                    Protocol.NGAP,
                    build(
                        MsgKind.NGAP_SESSION_SETUP,
                        ue_id=ue_id,
                        ue_ip=m.require(Tag.UE_IP),
                        mode=m.text(Tag.MODE, Redundancy.NONE.name),
                        paths=paths_text,
                    ),
                    sport=self.env.params.ngap_port,
                    dport=self.env.params.ngap_port,
                    attrs={"msg_kind": MsgKind.NGAP_SESSION_SETUP.name, "ue_id": ue_id},
                )
            self._send_nas(
                gnb,
                MsgKind.NAS_SESSION_ACCEPT,
                ue_id=ue_id,
                ue_ip=m.require(Tag.UE_IP),
                mode=m.text(Tag.MODE, Redundancy.NONE.name),
                paths=paths_text,
            )
        else:
            super().on_sbi(m, pkt, link, now)


class Smf(NfEntity):
    """Session management: PFCP associations, address pool, tunnel plumbing."""

    kind = "SMF"

    def __init__(self, name, ip, net, env):
        super().__init__(name, ip, net, env)
        self.upfs: list[str] = []
        self.associations: dict[str, str] = {}  # upf name -> PENDING | ACTIVE
        self.sessions: dict[str, PduSession] = {}
        pool = ipaddress.IPv4Network(env.params.ue_pool)
        self._pool_iter = iter(pool.hosts())
        self.gateway_ip = str(next(self._pool_iter))  # first host is the gateway
        self._teid = 0
        self._pending: dict[str, dict] = {}

    def discover_upfs(self) -> None:
        self.send_sbi(self.env.nrf_name, MsgKind.NF_DISCOVER_REQ, nf_type="UPF")

    def next_teid(self) -> int:
        self._teid += 1
        return self._teid

    def allocate_ue_ip(self) -> str:
        try:
            return str(next(self._pool_iter))
        except StopIteration:
            raise FlowError("UE address pool exhausted") from None

    # -- PFCP ---------------------------------------------------------------

    def pfcp_associate(self, upf: str) -> None:
        """Idempotent: repeated calls never emit extra packets."""
        if self.associations.get(upf) in ("PENDING", "ACTIVE"):
            return
        self.associations[upf] = "PENDING"
        self.send_msg(
            upf,
            Protocol.PFCP,
            build(MsgKind.PFCP_ASSOC_REQ, nf_id=self.name),
            sport=self.env.params.pfcp_port,
            dport=self.env.params.pfcp_port,
            attrs={"msg_kind": MsgKind.PFCP_ASSOC_REQ.name},
        )

    def associate_all(self) -> None:
        for upf in self.upfs:
            self.pfcp_associate(upf)

    def on_pfcp(self, m, pkt, link, now) -> None:
        upf = self._sender_name(pkt, link)
        if m.kind == MsgKind.PFCP_ASSOC_RESP:
            if m.text(Tag.RESULT) == OK:
                self.associations[upf] = "ACTIVE"
        elif m.kind == MsgKind.PFCP_SESSION_RESP:
            ue_id = m.require(Tag.UE_ID)
            pending = self._pending.get(ue_id)
            if pending is None:
                return
            pending["outstanding"].discard(upf)
            if not pending["outstanding"]:
                del self._pending[ue_id]
                self._finish_session(pending)
        else:
            super().on_pfcp(m, pkt, link, now)

    # -- session establishment ------------------------------------------------

    def on_sbi(self, m, pkt, link, now) -> None:
        if m.kind == MsgKind.NF_DISCOVER_RESP and m.text(Tag.NF_TYPE) == "UPF":
            entries = (m.raw(Tag.DATA) or b"").decode()
            self.upfs = [e.split("|")[0] for e in entries.split(";") if e]
        elif m.kind == MsgKind.SESSION_CREATE_REQ:
            self._create_session(
                requester=self._sender_name(pkt, link),
                ue_id=m.require(Tag.UE_ID),
                mode=Redundancy.parse(m.text(Tag.MODE, Redundancy.NONE.name)),
                gnbs=[g for g in m.text(Tag.GNB, "").split(";") if g],
            )
        else:
            super().on_sbi(m, pkt, link, now)

    def _fail_session(self, requester: str, ue_id: str, reason: str) -> None:
        self.send_sbi(
            requester, MsgKind.SESSION_CREATE_RESP, ue_id=ue_id, result=ERROR, reason=reason
        )

    def plan_paths(
        self, mode: Redundancy, gnbs: list[str]
    ) -> tuple[RedundancyMode, tuple[SessionPath, ...]]:
        """Choose tunnel legs for a session. Raises SetupError when the
        topology cannot support the requested mode."""
        if not gnbs:
            raise SetupError("no serving gNB")
        if not self.upfs:
            raise SetupError("no UPF discovered")
        upfs = self.upfs
        if mode is Redundancy.NONE:
            paths = (
                SessionPath(gnbs[0], upfs[0], self.next_teid(), self.next_teid(), False),
            )
            plan = RedundancyMode(mode=mode, paths=((gnbs[0], upfs[0]),))
        elif mode is Redundancy.DUAL_CONNECTIVITY:
            if len(gnbs) < 2:
                raise SetupError("dual connectivity needs two serving gNBs")
            if len(upfs) < 2:
                raise SetupError("dual connectivity needs two UPFs")
            paths = (
                SessionPath(gnbs[0], upfs[0], self.next_teid(), self.next_teid(), False),
                SessionPath(gnbs[1], upfs[1], self.next_teid(), self.next_teid(), False),
            )
            plan = RedundancyMode(
                mode=mode, paths=((gnbs[0], upfs[0]), (gnbs[1], upfs[1]))
            )
        elif mode is Redundancy.N3_REPLICATION:
            paths = (
                SessionPath(gnbs[0], upfs[0], self.next_teid(), self.next_teid(), True),
                SessionPath(gnbs[0], upfs[0], self.next_teid(), self.next_teid(), True),
            )
            plan = RedundancyMode(
                mode=mode, paths=((gnbs[0], upfs[0]), (gnbs[0], upfs[0]))
            )
        elif mode is Redundancy.PSA_ANCHOR:
            if len(upfs) < 2:
                raise SetupError("PSA anchoring needs an intermediate UPF and an anchor")
            i_upf, psa = upfs[0], upfs[-1]
            paths = (
                SessionPath(gnbs[0], i_upf, self.next_teid(), self.next_teid(), True),
                SessionPath(gnbs[0], psa, self.next_teid(), self.next_teid(), True),
            )
            plan = RedundancyMode(
                mode=mode, paths=((gnbs[0], i_upf), (gnbs[0], psa)), psa_upf=psa
            )
        else:  # pragma: no cover - enum is closed
            raise SetupError(f"unsupported mode {mode}")
        plan.validate()
        return plan, paths

    def _create_session(self, requester: str, ue_id: str, mode: Redundancy, gnbs: list[str]) -> None:
        if ue_id in self.sessions:
            self._fail_session(requester, ue_id, "session already established")
            return
        try:
            plan, paths = self.plan_paths(mode, gnbs)
        except SetupError as exc:
            self._fail_session(requester, ue_id, str(exc))
            return
        involved = sorted({p.upf for p in paths})
        if plan.psa_upf is not None and plan.psa_upf not in involved:
            involved.append(plan.psa_upf)
        for upf in involved:
            if self.associations.get(upf) != "ACTIVE":
                self._fail_session(requester, ue_id, f"no PFCP association with {upf}")
                return
        try:
            ue_ip = self.allocate_ue_ip()
        except FlowError as exc:
            self._fail_session(requester, ue_id, str(exc))
            return

        rule_sets = self._build_rules(ue_id, ue_ip, plan, paths)
        pending = {
            "requester": requester,
            "ue_id": ue_id,
            "ue_ip": ue_ip,
            "plan": plan,
            "paths": paths,
            "outstanding": set(rule_sets),
        }
        self._pending[ue_id] = pending
        for upf, rules in rule_sets.items():
            self.send_msg(
                upf,
                Protocol.PFCP,
                build(MsgKind.PFCP_SESSION_REQ, ue_id=ue_id, ue_ip=ue_ip, rules=rules),
                sport=self.env.params.pfcp_port,
                dport=self.env.params.pfcp_port,
                attrs={"msg_kind": MsgKind.PFCP_SESSION_REQ.name, "ue_id": ue_id},
            )

    def _build_rules(
        self,
        ue_id: str,
        ue_ip: str,
        plan: RedundancyMode,
        paths: tuple[SessionPath, ...],
    ) -> dict[str, str]:
        """Per-UPF forwarding rule programs, in the N4 rule grammar.

        teid rules match arriving G-PDUs, ueip rules match plain downlink
        packets. Actions: route:<entity> re-emits the inner packet,
        encap:<entity>:<teid>:<carry_seq> re-tunnels it.
        """
        server = self.env.server_name
        rules: dict[str, list[str]] = {}

        def add(upf: str, rule: str) -> None:
            rules.setdefault(upf, []).append(rule)

        mode = plan.mode
        if mode in (Redundancy.NONE, Redundancy.DUAL_CONNECTIVITY):
            for p in paths:
                add(p.upf, f"TEID|{p.teid_ul}|0|route:{server}")
                add(p.upf, f"UEIP|{ue_ip}|0|encap:{p.gnb}:{p.teid_dl}:0")
        elif mode is Redundancy.N3_REPLICATION:
            upf = paths[0].upf
            gnb = paths[0].gnb
            for p in paths:
                add(upf, f"TEID|{p.teid_ul}|1|route:{server}")
            dl_actions = ",".join(f"encap:{gnb}:{p.teid_dl}:1" for p in paths)
            add(upf, f"UEIP|{ue_ip}|1|{dl_actions}")
        elif mode is Redundancy.PSA_ANCHOR:
            via, direct = paths
            i_upf, psa = via.upf, direct.upf
            n9_ul, n9_dl = self.next_teid(), self.next_teid()
            # intermediate UPF: uplink bridges N3 to N9, downlink unwraps N9
            add(i_upf, f"TEID|{via.teid_ul}|0|encap:{psa}:{n9_ul}:1")
            add(i_upf, f"TEID|{n9_dl}|0|encap:{via.gnb}:{via.teid_dl}:1")
            # anchor: both tunnels converge and deduplicate here
            add(psa, f"TEID|{n9_ul}|1|route:{server}")
            add(psa, f"TEID|{direct.teid_ul}|1|route:{server}")
            dl_actions = f"encap:{i_upf}:{n9_dl}:1,encap:{direct.gnb}:{direct.teid_dl}:1"
            add(psa, f"UEIP|{ue_ip}|1|{dl_actions}")
        return {upf: ";".join(parts) for upf, parts in rules.items()}

    def _finish_session(self, pending: dict) -> None:
        session = PduSession(
            ue_id=pending["ue_id"],
            ue_ip=pending["ue_ip"],
            plan=pending["plan"],
            paths=pending["paths"],
        )
        self.sessions[session.ue_id] = session
        self.send_sbi(
            pending["requester"],
            MsgKind.SESSION_CREATE_RESP,
            ue_id=session.ue_id,
            result=OK,
            ue_ip=session.ue_ip,
            mode=session.plan.mode.name,
            paths=encode_paths(session.paths),
        )


class Ausf(NfEntity):
    """Authentication front end: answers every challenge affirmatively."""

    kind = "AUSF"
    subscribes_status = True

    def on_sbi(self, m, pkt, link, now) -> None:
        if m.kind == MsgKind.AUTH_REQ:
            requester = self._sender_name(pkt, link)
            self.send_sbi(requester, MsgKind.AUTH_RESP, ue_id=m.require(Tag.UE_ID), result=OK)
        else:
            super().on_sbi(m, pkt, link, now)


class Udm(NfEntity):
    """Subscriber data front end, backed by the UDR."""

    kind = "UDM"

    def __init__(self, name, ip, net, env):
        super().__init__(name, ip, net, env)
        self.udr_name: str | None = None
        self._pending: dict[str, str] = {}  # ue_id -> requester

    def after_registered(self) -> None:
        self.send_sbi(self.env.nrf_name, MsgKind.NF_DISCOVER_REQ, nf_type="UDR")

    def on_sbi(self, m, pkt, link, now) -> None:
        if m.kind == MsgKind.NF_DISCOVER_RESP and m.text(Tag.NF_TYPE) == "UDR":
            entries = (m.raw(Tag.DATA) or b"").decode()
            if entries:
                self.udr_name = entries.split(";")[0].split("|")[0]
        elif m.kind == MsgKind.SUBSCRIBER_REQ:
            ue_id = m.require(Tag.UE_ID)
            self._pending[ue_id] = self._sender_name(pkt, link)
            if self.udr_name is None:
                raise SetupError(f"{self.name}: no UDR wired")
            self.send_sbi(self.udr_name, MsgKind.UDR_QUERY_REQ, ue_id=ue_id)
        elif m.kind == MsgKind.UDR_QUERY_RESP:
            ue_id = m.require(Tag.UE_ID)
            requester = self._pending.pop(ue_id, None)
            if requester is not None:
                self.send_sbi(
                    requester,
                    MsgKind.SUBSCRIBER_RESP,
                    ue_id=ue_id,
                    result=m.text(Tag.RESULT, ERROR),
                    reason=m.text(Tag.REASON),
                )
        else:
            super().on_sbi(m, pkt, link, now)


class Udr(NfEntity):
    """Subscriber repository: the provisioned IMSI set."""

    kind = "UDR"

    def __init__(self, name, ip, net, env, subscribers=()):
        super().__init__(name, ip, net, env)
        self.subscribers: set[str] = set(subscribers)

    def on_sbi(self, m, pkt, link, now) -> None:
        if m.kind == MsgKind.UDR_QUERY_REQ:
            ue_id = m.require(Tag.UE_ID)
            requester = self._sender_name(pkt, link)
            if ue_id in self.subscribers:
                self.send_sbi(requester, MsgKind.UDR_QUERY_RESP, ue_id=ue_id, result=OK)
            else:
                self.send_sbi(
                    requester,
                    MsgKind.UDR_QUERY_RESP,
                    ue_id=ue_id,
                    result=ERROR,
                    reason="unknown subscriber",
                )
        else:
            super().on_sbi(m, pkt, link, now)


class Pcf(NfEntity):
    """Policy function: hands out a constant policy."""

    kind = "PCF"

    def on_sbi(self, m, pkt, link, now) -> None:
        if m.kind == MsgKind.POLICY_REQ:
            requester = self._sender_name(pkt, link)
            self.send_sbi(requester, MsgKind.POLICY_RESP, ue_id=m.require(Tag.UE_ID), result=OK)
        else:
            super().on_sbi(m, pkt, link, now)


class Nssf(NfEntity):
    """Slice selection stub: registers and heartbeats only."""

    kind = "NSSF"


class Bsf(NfEntity):
    """Binding support stub: registers and heartbeats only."""

    kind = "BSF"
