"""Topology and scenario configuration.

The topology format is line-oriented and diff-friendly: '[section]' headers,
'#' comments, comma-separated fields. Sections: entities, links, subscribers,
documents, params.
"""
from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .urllc import Redundancy

ENTITY_KINDS = {
    "NRF", "AMF", "SMF", "AUSF", "UDM", "UDR", "PCF", "NSSF", "BSF",
    "UPF", "GNB", "UE", "SERVER", "NWDAF",
}

SCENARIO_NAMES = ("idle", "single_request", "many_requests", "urllc_sweep", "validate")

_DATA_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class EntityDecl:
    kind: str
    name: str
    ip: str


@dataclass(frozen=True)
class LinkDecl:
    a: str
    b: str
    latency_ms: int
    loss_prob: float
    reliable: bool


@dataclass(frozen=True)
class Params:
    """Tunable knobs shared by every entity in a run."""

    sbi_port: int = 7777
    heartbeat_ms: int = 3333
    segment_bytes: int = 64000
    ue_pool: str = "10.45.0.0/16"
    app_server_ip: str = "192.168.0.40"
    nwdaf_ip: str = "192.168.0.41"
    settle_ms: int = 1000
    app_port: int = 80
    gtpu_port: int = 2152
    pfcp_port: int = 8805
    ngap_port: int = 38412
    rls_port: int = 4997

    def __post_init__(self) -> None:
        for name in ("sbi_port", "app_port", "gtpu_port", "pfcp_port", "ngap_port", "rls_port"):
            port = getattr(self, name)
            if not 0 < port <= 65535:
                raise ConfigError(f"{name} out of range: {port}")
        if self.heartbeat_ms <= 0:
            raise ConfigError(f"heartbeat_ms must be positive, got {self.heartbeat_ms}")
        if self.segment_bytes <= 0:
            raise ConfigError(f"segment_bytes must be positive, got {self.segment_bytes}")
        if self.settle_ms < 0:
            raise ConfigError(f"settle_ms must be non-negative, got {self.settle_ms}")
        try:
            ipaddress.IPv4Network(self.ue_pool)
        except ValueError as exc:
            raise ConfigError(f"bad ue_pool {self.ue_pool!r}: {exc}") from None


@dataclass(frozen=True)
class TopologyConfig:
    """A parsed, validated topology."""

    entities: tuple[EntityDecl, ...]
    links: tuple[LinkDecl, ...]
    subscribers: tuple[str, ...]
    documents: dict[str, int]
    params: Params
    source: str = "<memory>"

    def entity(self, name: str) -> EntityDecl:
        for e in self.entities:
            if e.name == name:
                return e
        raise ConfigError(f"unknown entity {name}")

    def of_kind(self, kind: str) -> list[EntityDecl]:
        return [e for e in self.entities if e.kind == kind]


def _validate(
    entities: list[EntityDecl],
    links: list[LinkDecl],
    subscribers: list[str],
    documents: dict[str, int],
    params: Params,
    source: str,
) -> TopologyConfig:
    if not entities:
        raise ConfigError(f"{source}: no entities declared")
    names: set[str] = set()
    ips: set[str] = set()
    pool = ipaddress.IPv4Network(params.ue_pool)
    for e in entities:
        if e.name in names:
            raise ConfigError(f"duplicate entity name {e.name}")
        names.add(e.name)
        if e.ip in ips:
            raise ConfigError(f"duplicate entity address {e.ip}")
        ips.add(e.ip)
        if ipaddress.IPv4Address(e.ip) in pool:
            raise ConfigError(f"entity address {e.ip} collides with the UE pool {params.ue_pool}")
    seen_pairs: set[frozenset[str]] = set()
    for l in links:
        for end in (l.a, l.b):
            if end not in names:
                raise ConfigError(f"link {l.a},{l.b} references unknown entity {end}")
        if l.a == l.b:
            raise ConfigError(f"link endpoints must differ, got {l.a} twice")
        key = frozenset((l.a, l.b))
        if key in seen_pairs:
            raise ConfigError(f"duplicate link between {l.a} and {l.b}")
        seen_pairs.add(key)
        if l.latency_ms < 0:
            raise ConfigError(f"link {l.a},{l.b}: negative latency")
        if not 0.0 <= l.loss_prob <= 1.0:
            raise ConfigError(f"link {l.a},{l.b}: loss_prob {l.loss_prob} outside [0, 1]")
    if len(set(subscribers)) != len(subscribers):
        raise ConfigError("duplicate subscriber id")
    for doc, size in documents.items():
        if size < 0:
            raise ConfigError(f"document {doc}: negative size")
    return TopologyConfig(
        entities=tuple(entities),
        links=tuple(links),
        subscribers=tuple(subscribers),
        documents=dict(documents),
        params=params,
        source=source,
    )


_PARAM_TYPES = {
    "sbi_port": int,
    "heartbeat_ms": int,
    "segment_bytes": int,
    "ue_pool": str,
    "app_server_ip": str,
    "nwdaf_ip": str,
    "settle_ms": int,
    "app_port": int,
    "gtpu_port": int,
    "pfcp_port": int,
    "ngap_port": int,
    "rls_port": int,
}


def parse_topology(text: str, source: str = "<memory>") -> TopologyConfig:
    entities: list[EntityDecl] = []
    links: list[LinkDecl] = []
    subscribers: list[str] = []
    documents: dict[str, int] = {}
    param_overrides: dict[str, object] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("entities", "links", "subscribers", "documents", "params"):
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if section is None:
            raise ConfigError(f"content before any section: {line!r}", lineno)
        try:
            if section == "entities":
                kind, name, ip = (f.strip() for f in line.split(","))
                kind = kind.upper()
                if kind not in ENTITY_KINDS:
                    raise ConfigError(f"unknown entity kind {kind}", lineno)
                ipaddress.IPv4Address(ip)
                entities.append(EntityDecl(kind=kind, name=name, ip=ip))
            elif section == "links":
                a, b, latency, loss, reliable = (f.strip() for f in line.split(","))
                rel = reliable.lower()
                if rel not in ("true", "false", "1", "0"):
                    raise ConfigError(f"bad reliable flag {reliable!r}", lineno)
                links.append(
                    LinkDecl(
                        a=a,
                        b=b,
                        latency_ms=int(latency),
                        loss_prob=float(loss),
                        reliable=rel in ("true", "1"),
                    )
                )
            elif section == "subscribers":
                subscribers.append(line)
            elif section == "documents":
                name, size = (f.strip() for f in line.split(","))
                documents[name] = int(size)
            elif section == "params":
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in _PARAM_TYPES:
                    raise ConfigError(f"unknown param {key!r}", lineno)
                param_overrides[key] = _PARAM_TYPES[key](value.strip())
        except ConfigError:
            raise
        except (ValueError, ipaddress.AddressValueError) as exc:
            raise ConfigError(f"cannot parse {line!r}: {exc}", lineno) from None
    params = Params(**param_overrides)
    return _validate(entities, links, subscribers, documents, params, source)


def load_topology(path: str | Path) -> TopologyConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read topology {path}: {exc}") from None
    return parse_topology(text, source=str(path))


def default_topology_path() -> Path:
    return _DATA_DIR / "default_topology.cfg"


def default_topology() -> TopologyConfig:
    return load_topology(default_topology_path())


def with_second_gnb(topo: TopologyConfig, name: str = "gNB2", ip: str = "192.168.0.23") -> TopologyConfig:
    """Extend a topology with a standby gNB wired for dual connectivity.

    The new gNB gets a reliable N2 link to the first AMF, a radio link to
    every UE, and an N3 link to the second UPF so the two paths stay
    link-disjoint.
    """
    if any(e.name == name for e in topo.entities):
        return topo
    amfs = topo.of_kind("AMF")
    upfs = topo.of_kind("UPF")
    ues = topo.of_kind("UE")
    if not amfs or len(upfs) < 2:
        raise ConfigError("need an AMF and two UPFs to add a standby gNB")
    entities = list(topo.entities) + [EntityDecl(kind="GNB", name=name, ip=ip)]
    links = list(topo.links)
    links.append(LinkDecl(a=name, b=amfs[0].name, latency_ms=1, loss_prob=0.0, reliable=True))
    for ue in ues:
        links.append(LinkDecl(a=ue.name, b=name, latency_ms=2, loss_prob=0.0, reliable=False))
    links.append(LinkDecl(a=name, b=upfs[1].name, latency_ms=2, loss_prob=0.0, reliable=False))
    return _validate(entities, links, list(topo.subscribers), dict(topo.documents), topo.params, topo.source)


def with_link_loss(topo: TopologyConfig, loss_prob: float, kinds: frozenset[str] = frozenset({"GNB", "UPF"})) -> TopologyConfig:
    """Return a copy with loss applied to links whose endpoint kinds match.

    By default only N3 legs (gNB to UPF) become lossy.
    """
    by_name = {e.name: e for e in topo.entities}
    links = []
    for l in topo.links:
        ka, kb = by_name[l.a].kind, by_name[l.b].kind
        if {ka, kb} == set(kinds) and not l.reliable:
            links.append(replace(l, loss_prob=loss_prob))
        else:
            links.append(l)
    return TopologyConfig(
        entities=topo.entities,
        links=tuple(links),
        subscribers=topo.subscribers,
        documents=dict(topo.documents),
        params=topo.params,
        source=topo.source,
    )


@dataclass(frozen=True)
class ScenarioSpec:
    """What to run: scenario name plus its knobs."""

    name: str
    ue_count: int = 1
    doc: str = "document"
    duration_ms: int = 10000
    redundancy: Redundancy = Redundancy.NONE
    seed: int = 0

    def __post_init__(self) -> None:
        if self.name not in SCENARIO_NAMES:
            raise ConfigError(
                f"unknown scenario {self.name!r} (expected one of {', '.join(SCENARIO_NAMES)})"
            )
        if self.duration_ms <= 0:
            raise ConfigError(f"duration_ms must be positive, got {self.duration_ms}")
        if self.ue_count < 0:
            raise ConfigError(f"ue_count must be non-negative, got {self.ue_count}")
