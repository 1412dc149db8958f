"""Testbed assembly and scenario execution.

A Testbed turns a topology into live entities on one fabric, stages the
bring-up (registry first, then the other functions, discovery, N4
association, NGAP setup) and leaves the clock ready to run. Scenarios layer
UE activity on top and collect KPIs, transfers and the validated event log
into a RunResult.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from .config import (
    EntityDecl,
    LinkDecl,
    ScenarioSpec,
    TopologyConfig,
    default_topology,
    with_link_loss,
    with_second_gnb,
)
from .core_cp import Amf, Ausf, Bsf, CoreEnv, Nrf, Nssf, Pcf, Smf, Udm, Udr
from .errors import FlowError, SetupError
from .nwdaf import (
    Nwdaf,
    export_events,
    kpi_packet_counts,
    kpi_throughput_matrix,
    write_kpi_counts_csv,
    write_throughput_csv,
)
from .ran_ue import Gnb, Transfer, Ue
from .simnet import DELIVERED, DROPPED, ELIMINATED_DUPLICATE, Network, TapRecord, conservation_report
from .urllc import Redundancy, ReliabilityResult
from .user_plane import AppServer, Upf
from .validation import CheckResult, validate_sequences
from .wirefmt import Protocol

log = logging.getLogger(__name__)

# bring-up schedule (virtual ms)
T_BOOT_REGISTRY = 0
T_BOOT_CORE = 5
T_DISCOVER = 15
T_ASSOCIATE = 25
T_NGAP_SETUP = 35
T_ATTACH = 45

SWEEP_LOSS = 0.1
SWEEP_PACKETS = 2000

DEFAULT_SERVER = ("SERVER", "192.168.0.40")
DEFAULT_NWDAF = ("NWDAF", "192.168.0.41")


class Testbed:
    """Entities plus fabric for one run."""

    __test__ = False  # not a test case, despite the name

    def __init__(self, topo: TopologyConfig, seed: int = 0):
        self.topo = topo
        self.params = topo.params
        entities = list(topo.entities)
        links = list(topo.links)
        self._inject_defaults(entities, links)

        nrfs = [e for e in entities if e.kind == "NRF"]
        if not nrfs:
            raise SetupError("topology has no registry function")
        server = next(e for e in entities if e.kind == "SERVER")
        nwdaf = next(e for e in entities if e.kind == "NWDAF")
        self.env = CoreEnv(
            params=self.params,
            nrf_name=nrfs[0].name,
            server_name=server.name,
            server_ip=server.ip,
            nwdaf_name=nwdaf.name,
        )

        self.net = Network(seed=seed)
        self.records: list[TapRecord] = []
        self.net.register_tap(self.records.append)

        amf_name = next((e.name for e in entities if e.kind == "AMF"), None)
        ue_decls = [e for e in entities if e.kind == "UE"]
        subscribers = list(topo.subscribers)

        self.by_kind: dict[str, list] = {}
        for decl in entities:
            entity = self._make_entity(decl, amf_name, subscribers, ue_decls)
            self.net.add_entity(entity)
            self.by_kind.setdefault(decl.kind, []).append(entity)
        for l in links:
            self.net.add_link(l.a, l.b, l.latency_ms, l.loss_prob, l.reliable)

        gnb_names = [g.name for g in self.gnbs]
        for ue in self.ues:
            attached = tuple(
                g for g in gnb_names if self.net.link_between(ue.name, g) is not None
            )
            ue.attach_gnbs(attached)
        self.nwdaf.attach_taps()

    # -- construction helpers ---------------------------------------------

    def _inject_defaults(self, entities: list[EntityDecl], links: list[LinkDecl]) -> None:
        """Add the data-network server and the analytics function when the
        topology does not declare them, wiring both with reliable links."""
        upf_names = [e.name for e in entities if e.kind == "UPF"]
        if not any(e.kind == "SERVER" for e in entities):
            name, ip = DEFAULT_SERVER
            entities.append(EntityDecl(kind="SERVER", name=name, ip=ip))
            for upf in upf_names:
                links.append(LinkDecl(a=name, b=upf, latency_ms=1, loss_prob=0.0, reliable=True))
        if not any(e.kind == "NWDAF" for e in entities):
            name, ip = DEFAULT_NWDAF
            entities.append(EntityDecl(kind="NWDAF", name=name, ip=ip))
            for peer_kind in ("NRF", "PCF", "NSSF"):
                for e in entities:
                    if e.kind == peer_kind:
                        links.append(
                            LinkDecl(a=name, b=e.name, latency_ms=1, loss_prob=0.0, reliable=True)
                        )

    def _make_entity(self, decl: EntityDecl, amf_name, subscribers, ue_decls):
        args = (decl.name, decl.ip, self.net, self.env)
        if decl.kind == "NRF":
            return Nrf(*args)
        if decl.kind == "AMF":
            return Amf(*args)
        if decl.kind == "SMF":
            return Smf(*args)
        if decl.kind == "AUSF":
            return Ausf(*args)
        if decl.kind == "UDM":
            return Udm(*args)
        if decl.kind == "UDR":
            return Udr(*args, subscribers=subscribers)
        if decl.kind == "PCF":
            return Pcf(*args)
        if decl.kind == "NSSF":
            return Nssf(*args)
        if decl.kind == "BSF":
            return Bsf(*args)
        if decl.kind == "UPF":
            return Upf(*args)
        if decl.kind == "GNB":
            if amf_name is None:
                raise SetupError("a radio node needs an AMF in the topology")
            return Gnb(*args, amf=amf_name)
        if decl.kind == "UE":
            index = [d.name for d in ue_decls].index(decl.name)
            imsi = (
                subscribers[index]
                if index < len(subscribers)
                else f"imsi-00101{index + 1:010d}"
            )
            return Ue(*args, imsi=imsi)
        if decl.kind == "SERVER":
            return AppServer(*args, documents=dict(self.topo.documents))
        if decl.kind == "NWDAF":
            return Nwdaf(*args)
        raise SetupError(f"no entity implementation for kind {decl.kind}")

    # -- convenient accessors ------------------------------------------------

    def _kind(self, kind: str) -> list:
        return self.by_kind.get(kind, [])

    @property
    def nrf(self) -> Nrf:
        return self._kind("NRF")[0]

    @property
    def amfs(self) -> list[Amf]:
        return self._kind("AMF")

    @property
    def smfs(self) -> list[Smf]:
        return self._kind("SMF")

    @property
    def upfs(self) -> list[Upf]:
        return self._kind("UPF")

    @property
    def gnbs(self) -> list[Gnb]:
        return self._kind("GNB")

    @property
    def ues(self) -> list[Ue]:
        return self._kind("UE")

    @property
    def udrs(self) -> list[Udr]:
        return self._kind("UDR")

    @property
    def server(self) -> AppServer:
        return self._kind("SERVER")[0]

    @property
    def nwdaf(self) -> Nwdaf:
        return self._kind("NWDAF")[0]

    # -- lifecycle -------------------------------------------------------------

    def boot(self) -> None:
        """Stage the bring-up on the virtual clock. Does not run it."""
        first_wave = {self.nrf.name}
        self.net.schedule(T_BOOT_REGISTRY, self.nrf.boot)
        for entity in self.amfs + self._kind("AUSF"):
            first_wave.add(entity.name)
            self.net.schedule(T_BOOT_REGISTRY, entity.boot_register)
        for entity in self.net.entities.values():
            if getattr(entity, "registers", False) and entity.name not in first_wave:
                self.net.schedule(T_BOOT_CORE, entity.boot_register)
        for amf in self.amfs:
            self.net.schedule(T_DISCOVER, amf.discover_peers)
        for smf in self.smfs:
            self.net.schedule(T_DISCOVER, smf.discover_upfs)
            self.net.schedule(T_ASSOCIATE, smf.associate_all)
        for gnb in self.gnbs:
            self.net.schedule(T_NGAP_SETUP, gnb.ng_setup)

    def spawn_ues(self, total: int) -> list[Ue]:
        """Grow the UE population to `total`, cloning the first UE's radio
        attachment and provisioning matching subscriptions."""
        ues = self.ues
        if not ues:
            raise SetupError("cannot spawn UEs without a declared template UE")
        if not self.udrs:
            raise SetupError("cannot provision spawned UEs without a UDR")
        template = ues[0]
        for k in range(len(ues) + 1, total + 1):
            name = f"UE{k:03d}"
            ip = f"172.16.{k >> 8}.{k & 0xFF}"
            imsi = f"imsi-00101{k:010d}"
            ue = Ue(name, ip, self.net, self.env, imsi=imsi)
            self.net.add_entity(ue)
            for gnb in template.gnbs:
                radio = self.net.require_link(template.name, gnb)
                self.net.add_link(name, gnb, radio.latency_ms, radio.loss_prob, radio.reliable)
            ue.attach_gnbs(template.gnbs)
            self.udrs[0].subscribers.add(imsi)
            self.by_kind["UE"].append(ue)
        return self.ues

    def run_until(self, t_end: int) -> int:
        return self.net.run_until(t_end)

    # -- invariants --------------------------------------------------------------

    def invariant_violations(self, horizon: int) -> list[str]:
        """Built-in self checks every run must satisfy."""
        problems = []
        recomputed = conservation_report(self.net, self.records)
        for link_id, (sends, delivered, dropped) in recomputed.items():
            stat_delivered, stat_dropped = self.net.link_stats[link_id]
            if (delivered, dropped) != (stat_delivered, stat_dropped):
                problems.append(f"conservation broken on {link_id}")
        last_ts = 0
        wire_delivered = 0
        for r in self.records:
            if r.ts < last_ts or r.ts > horizon:
                problems.append(f"event timestamp {r.ts} outside causal order")
                break
            last_ts = r.ts
            if r.outcome == DELIVERED:
                wire_delivered += 1
        both = kpi_packet_counts(
            self.nwdaf.store.events, 0, horizon + 1, semantics="src_or_dst"
        )
        if sum(both.values()) != 2 * sum(
            1 for ev in self.nwdaf.store.events if ev.outcome == DELIVERED and ev.is_wire
        ):
            problems.append("src_or_dst accounting does not credit exactly two ends per packet")
        return problems


@dataclass
class RunResult:
    """Everything a finished scenario leaves behind."""

    spec: ScenarioSpec
    testbed: Testbed
    horizon: int
    window: tuple[int, int]
    kpi_counts: dict[str, int] = field(default_factory=dict)
    throughput: dict[tuple[str, str], float] = field(default_factory=dict)
    transfers: dict[str, list[Transfer]] = field(default_factory=dict)
    reliability: tuple[ReliabilityResult, ...] = ()
    checks: tuple[CheckResult, ...] = ()
    summary_lines: list[str] = field(default_factory=list)

    @property
    def events(self):
        return self.testbed.nwdaf.store.events

    @property
    def summary(self) -> str:
        return "\n".join(self.summary_lines) + "\n"

    def write_artifacts(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        export_events(self.events, out / "events.log")
        write_kpi_counts_csv(out / "kpi_counts.csv", self.kpi_counts)
        write_throughput_csv(out / "kpi_throughput.csv", self.throughput)
        (out / "summary.txt").write_text(self.summary, encoding="utf-8")


def _summarise(result: RunResult) -> None:
    tb = result.testbed
    lines = result.summary_lines
    lines.append(f"scenario: {result.spec.name}")
    lines.append(f"seed: {result.spec.seed}")
    lines.append(f"topology: {tb.topo.source}")
    lines.append(f"entities: {len(tb.net.entities)}")
    lines.append(f"window_ms: [{result.window[0]}, {result.window[1]})")
    outcomes = {DELIVERED: 0, DROPPED: 0, ELIMINATED_DUPLICATE: 0}
    for ev in result.events:
        outcomes[ev.outcome] = outcomes.get(ev.outcome, 0) + 1
    lines.append(
        "events: {} delivered, {} dropped, {} eliminated".format(
            outcomes[DELIVERED], outcomes[DROPPED], outcomes[ELIMINATED_DUPLICATE]
        )
    )
    for name in sorted(result.kpi_counts):
        lines.append(f"kpi {name} {result.kpi_counts[name]}")
    for ue_name, transfers in sorted(result.transfers.items()):
        for t in transfers:
            status = "ok" if t.ok else ("failed" if t.done else "incomplete")
            took = (t.completed_ms - t.started_ms) if t.completed_ms is not None else -1
            lines.append(
                f"transfer {ue_name} {t.doc} {status}"
                f" segments={len(t.segments)} bytes={sum(len(s) for s in t.segments.values())}"
                f" ms={took}"
            )
    for r in result.reliability:
        tunnels = ",".join(f"{teid}:{n}" for teid, n in sorted(r.per_tunnel_delivered.items()))
        lines.append(
            f"reliability {r.mode.name} loss={r.loss_prob} sent={r.sent}"
            f" delivered={r.delivered} observed_loss={r.observed_loss:.4f} tunnels={tunnels}"
        )
    for c in result.checks:
        lines.append(c.line())


def run_scenario(
    spec: ScenarioSpec, topo: TopologyConfig | None = None, out_dir=None
) -> RunResult:
    """Execute one named scenario and return its results.

    `urllc_sweep` loops the reliability measurement over every redundancy
    mode; the other scenarios drive UE activity on a single testbed.
    """
    topo = topo or default_topology()

    if spec.name == "urllc_sweep":
        results = tuple(
            run_reliability_measurement(mode, SWEEP_LOSS, SWEEP_PACKETS, spec.seed, topo)
            for mode in Redundancy
        )
        tb = Testbed(topo, seed=spec.seed)  # empty bed: summary context only
        result = RunResult(
            spec=spec, testbed=tb, horizon=0, window=(0, 0), reliability=results
        )
        _summarise(result)
        if out_dir is not None:
            result.write_artifacts(out_dir)
        return result

    if spec.redundancy in (Redundancy.DUAL_CONNECTIVITY,):
        topo = with_second_gnb(topo)

    tb = Testbed(topo, seed=spec.seed)
    settle = tb.params.settle_ms
    horizon = settle + spec.duration_ms
    tb.boot()

    active: list[Ue] = []
    if spec.name in ("single_request", "validate"):
        active = [tb.ues[0]] if tb.ues else []
    elif spec.name == "many_requests":
        active = tb.spawn_ues(max(spec.ue_count, 1))
    elif spec.name != "idle":
        raise SetupError(f"unknown scenario {spec.name!r}")

    for i, ue in enumerate(active):
        # 1ms attach stagger keeps 500 registrations inside the settle
        # phase; requests spread 15ms apart so transfers finish in-window.
        attach_at = T_ATTACH + i
        request_at = settle + 15 * i
        if attach_at >= settle or request_at >= horizon:
            raise SetupError(
                f"{len(active)} UEs do not fit the settle/duration windows"
            )
        mode = spec.redundancy
        self_ue = ue
        tb.net.schedule(attach_at, lambda u=self_ue, m=mode: u.attach(m))
        tb.net.schedule(request_at, lambda u=self_ue, d=spec.doc: u.request_document(d))

    tb.run_until(horizon)

    problems = tb.invariant_violations(horizon)
    if problems:
        raise FlowError("; ".join(problems))

    window = (settle, horizon)
    roster = list(tb.net.entities)
    store_events = tb.nwdaf.store.events
    result = RunResult(
        spec=spec,
        testbed=tb,
        horizon=horizon,
        window=window,
        kpi_counts=kpi_packet_counts(store_events, window[0], window[1], entities=roster),
        throughput=kpi_throughput_matrix(store_events, window[0], window[1]),
        transfers={ue.name: list(ue.transfers) for ue in tb.ues},
    )
    if spec.name == "validate":
        result.checks = tuple(
            validate_sequences(
                store_events, sbi_port=tb.params.sbi_port, ue_pool=tb.params.ue_pool
            )
        )
    _summarise(result)
    if out_dir is not None:
        result.write_artifacts(out_dir)
    return result


def run_reliability_measurement(
    mode: Redundancy,
    loss_prob: float,
    n_packets: int,
    seed: int,
    topology: TopologyConfig | None = None,
) -> ReliabilityResult:
    """Measure post-elimination delivery for one redundancy mode.

    Loss goes on the N3 legs only; the UE sends one data unit per virtual
    millisecond and the server counts unique arrivals.
    """
    if n_packets <= 0:
        raise ValueError("n_packets must be positive")
    if not 0.0 <= loss_prob < 1.0:
        raise ValueError(f"loss_prob {loss_prob} outside [0, 1)")
    topo = topology or default_topology()
    if mode is Redundancy.DUAL_CONNECTIVITY:
        topo = with_second_gnb(topo)
    if loss_prob > 0.0:
        topo = with_link_loss(topo, loss_prob)

    tb = Testbed(topo, seed=seed)
    tb.boot()
    if not tb.ues:
        raise SetupError("reliability measurement needs a UE")
    ue = tb.ues[0]
    settle = tb.params.settle_ms
    tb.net.schedule(T_ATTACH, lambda: ue.attach(mode))
    tb.net.schedule(settle, lambda: ue.send_data_burst(n_packets, interval_ms=1))
    horizon = settle + n_packets + 500
    tb.run_until(horizon)

    if ue.session is None:
        raise FlowError(
            f"no session in mode {mode.name}: {ue.reject_reason or 'still pending'}"
        )
    ue_ip = ue.session.ue_ip
    delivered = tb.server.data_received.get(ue_ip, 0)
    indices = frozenset(tb.server.data_indices.get(ue_ip, ()))
    per_tunnel = {p.teid_ul: 0 for p in ue.session.paths}
    for r in tb.records:
        if r.protocol is Protocol.GTPU and r.outcome == DELIVERED and r.ts >= settle:
            teid = int(r.attrs.get("teid", "0"))
            if teid in per_tunnel:
                per_tunnel[teid] += 1
    paths = ue.session.paths
    disjoint = len(paths) > 1 and len({(p.gnb, p.upf) for p in paths}) == len(paths)
    return ReliabilityResult(
        mode=mode,
        loss_prob=loss_prob,
        sent=n_packets,
        delivered=delivered,
        per_tunnel_delivered=per_tunnel,
        paths_disjoint=disjoint,
        delivered_indices=indices,
    )
