"""Control-plane tests: registry semantics, bring-up, sessions, heartbeats."""
import pytest

from fivegsim.config import Params, default_topology
from fivegsim.core_cp import (
    DEREGISTERED,
    REGISTERED,
    SUSPENDED,
    CoreEnv,
    NfEntity,
    Nrf,
    SessionPath,
    decode_paths,
    encode_paths,
)
from fivegsim.errors import FlowError, SetupError
from fivegsim.runner import T_ATTACH, Testbed
from fivegsim.simnet import DELIVERED, Network
from fivegsim.urllc import Redundancy

HB = 3333
SETTLE = 1000


def micro_env() -> CoreEnv:
    return CoreEnv(
        params=Params(),
        nrf_name="NRF",
        server_name="SRV",
        server_ip="192.168.9.1",
        nwdaf_name="NW",
    )


def micro_net():
    """One registry plus one generic NF on a single link."""
    env = micro_env()
    net = Network(seed=0)
    nrf = net.add_entity(Nrf("NRF", "192.168.0.12", net, env))
    x = net.add_entity(NfEntity("X", "192.168.0.50", net, env))
    x.kind = "XNF"
    net.add_link("NRF", "X", 1)
    nrf.boot()
    return net, nrf, x


def booted_testbed(seed=0, topo=None):
    tb = Testbed(topo or default_topology(), seed=seed)
    tb.boot()
    tb.run_until(SETTLE)
    return tb


def kinds_in(records, kind_name):
    return [r for r in records if r.attrs.get("msg_kind") == kind_name]


# -- registry local API ---------------------------------------------------------

def test_register_then_duplicate_rejected():
    _, nrf, _ = micro_net()
    nrf.register_profile("A", "AMF", "10.0.0.1")
    with pytest.raises(FlowError, match="duplicate registration"):
        nrf.register_profile("A", "AMF", "10.0.0.1")


def test_reregistration_allowed_after_deregister():
    _, nrf, _ = micro_net()
    nrf.register_profile("A", "AMF", "10.0.0.1")
    nrf.deregister("A")
    assert nrf.registry["A"].status == DEREGISTERED
    profile = nrf.register_profile("A", "AMF", "10.0.0.1")
    assert profile.status == REGISTERED


def test_heartbeat_unknown_or_deregistered_rejected():
    _, nrf, _ = micro_net()
    with pytest.raises(FlowError, match="unknown or deregistered"):
        nrf.heartbeat("ghost")
    nrf.register_profile("A", "AMF", "10.0.0.1")
    nrf.deregister("A")
    with pytest.raises(FlowError):
        nrf.heartbeat("A")


def test_double_deregister_rejected():
    _, nrf, _ = micro_net()
    nrf.register_profile("A", "AMF", "10.0.0.1")
    nrf.deregister("A")
    with pytest.raises(FlowError, match="deregistration for unknown"):
        nrf.deregister("A")


def test_heartbeat_revives_suspended_profile():
    _, nrf, _ = micro_net()
    profile = nrf.register_profile("A", "AMF", "10.0.0.1")
    profile.status = SUSPENDED
    assert nrf.heartbeat("A").status == REGISTERED


def test_discover_returns_sorted_registered_snapshots():
    _, nrf, _ = micro_net()
    nrf.register_profile("B2", "UPF", "10.0.0.2")
    nrf.register_profile("B1", "UPF", "10.0.0.1")
    nrf.register_profile("B3", "UPF", "10.0.0.3")
    nrf.deregister("B3")
    found = nrf.discover("UPF")
    assert [p.nf_id for p in found] == ["B1", "B2"]
    found[0].status = "TAMPERED"  # snapshots must not alias registry state
    assert nrf.registry["B1"].status == REGISTERED


# -- registry over the wire --------------------------------------------------------

def test_boot_register_round_trip():
    net, nrf, x = micro_net()
    x.boot_register()
    net.run_until(10)
    assert x.registered
    assert nrf.registry["X"].nf_type == "XNF"
    assert nrf.registry["X"].addr == x.ip


def test_discover_requires_registered_requester():
    from fivegsim.messages import MsgKind

    net, nrf, x = micro_net()
    records = []
    net.register_tap(records.append)
    x.send_sbi("NRF", MsgKind.NF_DISCOVER_REQ, nf_type="UPF")
    net.run_until(10)
    resps = kinds_in(records, "NF_DISCOVER_RESP")
    assert len(resps) == 1  # answered, but with an error inside
    assert x.registered is False


def test_heartbeats_land_on_the_shared_grid():
    net, nrf, x = micro_net()
    records = []
    net.register_tap(records.append)
    net.schedule(7, x.boot_register)
    net.run_until(4 * HB + 10)
    beats = kinds_in(records, "NF_HEARTBEAT_REQ")
    assert len(beats) >= 3
    assert all(b.ts % HB == 0 for b in beats)


def test_missed_heartbeats_suspend_and_notify():
    tb = booted_testbed()
    nrf = tb.nrf
    ausf = tb.by_kind["AUSF"][0]
    amf = tb.amfs[0]
    assert nrf.registry["AUSF"].status == REGISTERED
    ausf.heartbeat_enabled = False
    tb.run_until(SETTLE + 4 * HB)
    assert nrf.registry["AUSF"].status == SUSPENDED
    assert ("AUSF", SUSPENDED) in amf.notifications
    # silence ends: the next heartbeat revives the profile
    ausf.heartbeat_enabled = True
    tb.run_until(SETTLE + 6 * HB)
    assert nrf.registry["AUSF"].status == REGISTERED


# -- bring-up ------------------------------------------------------------------------

def test_bringup_registers_every_control_function():
    tb = booted_testbed()
    for name in ("AMF", "SMF", "AUSF", "UDM", "UDR", "PCF", "NSSF", "BSF", "UPF1", "UPF2"):
        assert tb.net.entities[name].registered, name
    assert [p.nf_id for p in tb.nrf.discover("UPF")] == ["UPF1", "UPF2"]


def test_bringup_discovery_picks_lowest_id_peer():
    tb = booted_testbed()
    amf = tb.amfs[0]
    assert amf.peers == {"AUSF": "AUSF", "UDM": "UDM", "PCF": "PCF", "SMF": "SMF"}
    assert tb.by_kind["UDM"][0].udr_name == "UDR"
    assert tb.smfs[0].upfs == ["UPF1", "UPF2"]


def test_pfcp_association_is_idempotent():
    tb = booted_testbed()
    smf = tb.smfs[0]
    assert smf.associations == {"UPF1": "ACTIVE", "UPF2": "ACTIVE"}
    smf.pfcp_associate("UPF1")  # repeat call must not emit another request
    tb.run_until(SETTLE + 50)
    reqs = kinds_in(tb.records, "PFCP_ASSOC_REQ")
    assert len(reqs) == 2  # one per UPF, ever


def test_radio_nodes_do_not_register_with_the_repository():
    tb = booted_testbed()
    assert "gNB" not in tb.nrf.registry
    assert "UE" not in tb.nrf.registry
    assert "SERVER" not in tb.nrf.registry


# -- registration outcome -------------------------------------------------------------

def test_unknown_subscriber_is_rejected():
    tb = Testbed(default_topology(), seed=0)
    tb.udrs[0].subscribers.clear()
    tb.boot()
    ue = tb.ues[0]
    tb.net.schedule(T_ATTACH, ue.register)
    tb.run_until(SETTLE)
    assert ue.state == "DEREGISTERED"
    assert "unknown subscriber" in (ue.reject_reason or "")
    assert ue.imsi not in tb.amfs[0].ue_registered


def test_known_subscriber_registers_and_gets_session():
    tb = Testbed(default_topology(), seed=0)
    tb.boot()
    ue = tb.ues[0]
    tb.net.schedule(T_ATTACH, lambda: ue.attach(Redundancy.NONE))
    tb.run_until(SETTLE)
    assert ue.state == "SESSION_ACTIVE"
    assert ue.session is not None
    assert ue.session.ue_ip.startswith("10.45.")
    smf = tb.smfs[0]
    assert ue.imsi in smf.sessions
    # first pool host is reserved for the gateway
    assert ue.session.ue_ip != smf.gateway_ip


# -- session planning --------------------------------------------------------------------

def test_plan_paths_none_mode():
    smf = booted_testbed().smfs[0]
    plan, paths = smf.plan_paths(Redundancy.NONE, ["gNB"])
    assert len(paths) == 1
    assert paths[0].gnb == "gNB" and paths[0].upf == "UPF1"
    assert not paths[0].carry_seq
    assert paths[0].teid_ul != paths[0].teid_dl


def test_plan_paths_dual_needs_two_gnbs():
    smf = booted_testbed().smfs[0]
    with pytest.raises(SetupError, match="two serving gNBs"):
        smf.plan_paths(Redundancy.DUAL_CONNECTIVITY, ["gNB"])
    plan, paths = smf.plan_paths(Redundancy.DUAL_CONNECTIVITY, ["gNB", "gNB2"])
    assert {(p.gnb, p.upf) for p in paths} == {("gNB", "UPF1"), ("gNB2", "UPF2")}


def test_plan_paths_n3_replication_shares_one_leg():
    smf = booted_testbed().smfs[0]
    plan, paths = smf.plan_paths(Redundancy.N3_REPLICATION, ["gNB"])
    assert len(paths) == 2
    assert {(p.gnb, p.upf) for p in paths} == {("gNB", "UPF1")}
    assert all(p.carry_seq for p in paths)
    assert len({p.teid_ul for p in paths}) == 2


def test_plan_paths_psa_uses_first_and_last_upf():
    smf = booted_testbed().smfs[0]
    plan, paths = smf.plan_paths(Redundancy.PSA_ANCHOR, ["gNB"])
    assert plan.psa_upf == "UPF2"
    assert paths[0].upf == "UPF1" and paths[1].upf == "UPF2"


def test_plan_paths_without_prerequisites():
    smf = booted_testbed().smfs[0]
    with pytest.raises(SetupError, match="no serving gNB"):
        smf.plan_paths(Redundancy.NONE, [])
    smf.upfs = []
    with pytest.raises(SetupError, match="no UPF"):
        smf.plan_paths(Redundancy.NONE, ["gNB"])


def test_teids_are_unique_and_increasing():
    smf = booted_testbed().smfs[0]
    seen = [smf.next_teid() for _ in range(10)]
    assert seen == sorted(set(seen))


def test_pool_exhaustion_raises():
    smf = booted_testbed().smfs[0]
    smf._pool_iter = iter(())
    with pytest.raises(FlowError, match="pool exhausted"):
        smf.allocate_ue_ip()


def test_duplicate_session_rejected_at_ue():
    tb = Testbed(default_topology(), seed=0)
    tb.boot()
    ue = tb.ues[0]
    tb.net.schedule(T_ATTACH, lambda: ue.attach(Redundancy.NONE))
    tb.run_until(SETTLE)
    with pytest.raises(FlowError, match="cannot request a session"):
        ue.request_session()


def test_rule_programs_by_mode():
    smf = booted_testbed().smfs[0]

    plan, paths = smf.plan_paths(Redundancy.NONE, ["gNB"])
    rules = smf._build_rules("u", "10.45.0.2", plan, paths)
    p = paths[0]
    assert rules == {
        "UPF1": f"TEID|{p.teid_ul}|0|route:SERVER;UEIP|10.45.0.2|0|encap:gNB:{p.teid_dl}:0"
    }

    plan, paths = smf.plan_paths(Redundancy.N3_REPLICATION, ["gNB"])
    rules = smf._build_rules("u", "10.45.0.3", plan, paths)
    assert set(rules) == {"UPF1"}
    assert rules["UPF1"].count("TEID|") == 2
    assert rules["UPF1"].count("|1|") == 3  # both tunnels dedup, downlink tags
    assert rules["UPF1"].count("encap:gNB:") == 2

    plan, paths = smf.plan_paths(Redundancy.PSA_ANCHOR, ["gNB"])
    rules = smf._build_rules("u", "10.45.0.4", plan, paths)
    assert set(rules) == {"UPF1", "UPF2"}
    assert "encap:UPF2:" in rules["UPF1"]   # N3 -> N9 bridge
    assert "route:SERVER" in rules["UPF2"]  # anchor terminates both tunnels
    assert "encap:UPF1:" in rules["UPF2"]   # downlink goes back through the bridge


# -- path codec --------------------------------------------------------------------------

def test_paths_encode_decode_round_trip():
    paths = (
        SessionPath("gNB", "UPF1", 1, 2, False),
        SessionPath("gNB2", "UPF2", 3, 4, True),
    )
    assert decode_paths(encode_paths(paths)) == paths
    assert decode_paths("") == ()


# -- status fanout -----------------------------------------------------------------------

def test_registration_fanout_reaches_subscribers():
    tb = booted_testbed()
    amf = tb.amfs[0]
    # AMF registers at t=0 and subscribes; every later registration fans out
    notified = {nf_id for nf_id, status in amf.notifications if status == REGISTERED}
    assert {"SMF", "UDM", "UDR", "PCF", "NSSF", "BSF", "UPF1", "UPF2"} <= notified


def test_idle_window_heartbeat_counts():
    tb = booted_testbed()
    tb.run_until(SETTLE + 10_000)
    in_window = [
        r
        for r in tb.records
        if r.attrs.get("msg_kind") == "NF_HEARTBEAT_REQ"
        and SETTLE <= r.ts < SETTLE + 10_000
        and r.outcome == DELIVERED
    ]
    per_nf = {}
    for r in in_window:
        per_nf[r.src] = per_nf.get(r.src, 0) + 1
    # 3333ms grid puts exactly three beats inside a 10s window for every NF
    assert set(per_nf.values()) == {3}
    assert per_nf["AUSF"] == per_nf["NSSF"] == per_nf["PCF"] == 3
