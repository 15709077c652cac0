"""Local KMS: direct serving, relay hops, failure statuses, orphans."""

from __future__ import annotations

from conftest import chain, mesh4, mesh4_dict, run_events
from qkdrelay.harness import Simulation
from qkdrelay.kms import RelayRule
from qkdrelay.topology import topology_from_dict
from qkdrelay.protocol import (
    STATUS_DECRYPT,
    STATUS_NO_KEY,
    STATUS_NO_RULE,
    STATUS_OK,
    KeyDelivery,
    KeyRelay,
    KeyRelayResponse,
    RelayPathInstall,
    RelayProcessRequest,
    RelayProcessResponse,
    message_type,
    otp_xor,
)


def msgs_of(records, type_tag):
    return [e for e in records if message_type(e.msg) == type_tag]


def one_get_key():
    return [{"at": 0, "event": "app_get_key", "app_src": "APP_A", "app_dst": "APP_B"}]


# ── direct serving ──


def test_direct_serves_fifo_key():
    topo = mesh4({"APP_A": "N3", "APP_B": "N4"})
    result = run_events(topo, one_get_key())
    (request,) = result.sim.apps["APP_A"].completed
    assert request.status == STATUS_OK
    pool = result.sim.linksim.pool_for("KMS_3d")
    assert request.key_id == next(iter(pool.records))  # oldest key served first
    assert request.material == pool.records[request.key_id].material
    assert pool.counts()["consumed"] == 1


def test_direct_empty_pool_fails_no_key():
    raw = mesh4_dict({"APP_A": "N3", "APP_B": "N4"})
    for link in raw["links"]:
        link["initial_pool"] = 0
    topo = topology_from_dict(raw)
    result = run_events(topo, one_get_key())
    (request,) = result.sim.apps["APP_A"].completed
    assert request.status == STATUS_NO_KEY
    assert request.material == b""


def test_direct_pool_refills_by_tick():
    topo = mesh4(
        {"APP_A": "N3", "APP_B": "N4"},
        links=[
            {"id": "d", "a": "N3", "b": "N4", "key_rate": 4.0, "distance_km": 5.0, "initial_pool": 0},
        ],
        nodes=[{"id": "N3"}, {"id": "N4"}],
    )
    events = [
        {"at": 0, "event": "app_get_key", "app_src": "APP_A", "app_dst": "APP_B"},
        {"at": 100, "event": "tick_links", "dt_ms": 500},  # 4/s * 0.5s = 2 keys
        {"at": 200, "event": "app_get_key", "app_src": "APP_A", "app_dst": "APP_B"},
    ]
    result = run_events(topo, events)
    first, second = result.sim.apps["APP_A"].completed
    assert first.status == STATUS_NO_KEY
    assert second.status == STATUS_OK


def test_get_key_with_id_from_own_pool_and_misses():
    topo = mesh4({"APP_A": "N3", "APP_B": "N4"})
    sim = Simulation(topo, seed=1)
    pool = sim.linksim.pool_for("KMS_4d")
    key_id = next(iter(pool.records))
    events = [
        {"at": 0, "event": "app_get_key_with_id", "app_src": "APP_B",
         "app_dst": "APP_A", "key_id": key_id},
        {"at": 1, "event": "app_get_key_with_id", "app_src": "APP_B",
         "app_dst": "APP_A", "key_id": key_id},          # now consumed
        {"at": 2, "event": "app_get_key_with_id", "app_src": "APP_B",
         "app_dst": "APP_A", "key_id": "f00d"},          # never existed
    ]
    result = run_events(topo, events)
    statuses = [r.status for r in result.sim.apps["APP_B"].completed]
    assert statuses == [STATUS_OK, STATUS_NO_KEY, STATUS_NO_KEY]


# ── relay chain, happy path ──


def test_relay_end_to_end_key_equality(mesh4_relay_topology):
    result = run_events(
        mesh4_relay_topology,
        [
            {"at": 0, "event": "app_get_key", "app_src": "APP_A", "app_dst": "APP_B"},
            {"at": 10, "event": "app_get_key_with_id", "app_src": "APP_B",
             "app_dst": "APP_A", "key_id_from": "APP_A"},
        ],
    )
    (got_a,) = result.sim.apps["APP_A"].completed
    (got_b,) = result.sim.apps["APP_B"].completed
    assert got_a.status == got_b.status == STATUS_OK
    assert got_a.key_id == got_b.key_id
    assert got_a.material == got_b.material
    assert len(got_a.material) == 32


def test_relay_wire_payload_is_encrypted(mesh4_relay_topology):
    result = run_events(mesh4_relay_topology, one_get_key())
    (relay,) = msgs_of(result.records, "key_relay")
    k1 = result.sim.linksim.find_material(relay.msg.id_relay_key)
    k2 = result.sim.linksim.find_material(relay.msg.id_key_encryption)
    assert relay.msg.encrypted_relay_key == otp_xor(k1, k2)
    assert relay.msg.encrypted_relay_key != k1
    assert relay.channel == "inter_node"


def test_relay_key_budget_one_per_link(mesh4_relay_topology):
    result = run_events(mesh4_relay_topology, one_get_key())
    consumed = {
        l: len(result.sim.linksim.link_consumed_ids(l)) for l in ("a", "b", "c", "d")
    }
    assert consumed == {"a": 0, "b": 1, "c": 0, "d": 1}


def test_relay_delivered_store_holds_target_copy(mesh4_relay_topology):
    result = run_events(mesh4_relay_topology, one_get_key())
    (request,) = result.sim.apps["APP_A"].completed
    store = result.sim.kms["KMS_4d"].delivered
    assert (request.key_id, "APP_A", "APP_B") in store
    assert store[(request.key_id, "APP_A", "APP_B")].material == request.material


def test_relay_two_hop_chain():
    topo = chain(3)  # N1..N4 linear: two trusted relays in the middle
    result = run_events(
        topo,
        [
            {"at": 0, "event": "app_get_key", "app_src": "APP_A", "app_dst": "APP_B"},
            {"at": 10, "event": "app_get_key_with_id", "app_src": "APP_B",
             "app_dst": "APP_A", "key_id_from": "APP_A"},
        ],
    )
    a, b = result.sim.apps["APP_A"].completed[0], result.sim.apps["APP_B"].completed[0]
    assert a.status == b.status == STATUS_OK
    assert a.material == b.material
    assert len(msgs_of(result.records, "key_relay")) == 2
    assert len(msgs_of(result.records, "ext_key_request")) == 2
    # One key consumed per link, each mirrored in both endpoint pools.
    for link_id in topo.links:
        assert len(result.sim.linksim.link_consumed_ids(link_id)) == 1


def test_pickup_is_idempotent_until_consumed(mesh4_relay_topology):
    # The delivered store serves repeated pickups of the same id.
    result = run_events(
        mesh4_relay_topology,
        [
            {"at": 0, "event": "app_get_key", "app_src": "APP_A", "app_dst": "APP_B"},
            {"at": 10, "event": "app_get_key_with_id", "app_src": "APP_B",
             "app_dst": "APP_A", "key_id_from": "APP_A"},
            {"at": 20, "event": "app_get_key_with_id", "app_src": "APP_B",
             "app_dst": "APP_A", "key_id_from": "APP_A"},
        ],
    )
    statuses = [r.status for r in result.sim.apps["APP_B"].completed]
    materials = {r.material for r in result.sim.apps["APP_B"].completed}
    assert statuses == [STATUS_OK, STATUS_OK]
    assert len(materials) == 1


# ── failure paths ──


def test_relay_fails_no_key_when_second_link_empty():
    topo = mesh4(
        {"APP_A": "N1", "APP_B": "N4"},
        links=[
            {"id": "a", "a": "N1", "b": "N2", "key_rate": 10.0, "distance_km": 10.0, "initial_pool": 8},
            {"id": "b", "a": "N1", "b": "N3", "key_rate": 10.0, "distance_km": 12.0, "initial_pool": 8},
            {"id": "c", "a": "N2", "b": "N3", "key_rate": 10.0, "distance_km": 10.0, "initial_pool": 8},
            {"id": "d", "a": "N3", "b": "N4", "key_rate": 10.0, "distance_km": 5.0, "initial_pool": 0},
        ],
    )
    result = run_events(topo, one_get_key())
    (request,) = result.sim.apps["APP_A"].completed
    assert request.status == STATUS_NO_KEY
    assert msgs_of(result.records, "key_relay") == []
    assert result.sim.kms["KMS_4d"].delivered == {}
    # The reserved E2E key is spent even though the relay failed.
    assert len(result.sim.linksim.link_consumed_ids("b")) == 1


def test_relay_fails_no_key_when_first_link_empty():
    topo = mesh4(
        {"APP_A": "N1", "APP_B": "N4"},
        links=[
            {"id": "a", "a": "N1", "b": "N2", "key_rate": 10.0, "distance_km": 10.0, "initial_pool": 8},
            {"id": "b", "a": "N1", "b": "N3", "key_rate": 10.0, "distance_km": 12.0, "initial_pool": 0},
            {"id": "c", "a": "N2", "b": "N3", "key_rate": 10.0, "distance_km": 10.0, "initial_pool": 8},
            {"id": "d", "a": "N3", "b": "N4", "key_rate": 10.0, "distance_km": 5.0, "initial_pool": 8},
        ],
    )
    result = run_events(topo, one_get_key())
    (request,) = result.sim.apps["APP_A"].completed
    assert request.status == STATUS_NO_KEY
    assert msgs_of(result.records, "relay_process_request") == []


def test_relay_process_request_without_rule():
    sim = Simulation(mesh4({"APP_A": "N1", "APP_B": "N4"}), seed=1)
    sim.transport.send(
        "KMS_1b", "KMS_3b",
        RelayProcessRequest(app_src="APP_A", app_dst="APP_B", id_relay_key="cafe"),
    )
    sim.kernel.run_to_quiescence()
    (response,) = msgs_of(sim.transport.records, "relay_process_response")
    assert response.msg.status == STATUS_NO_RULE
    # The initiator had no pending entry for it: logged orphan, no crash.
    assert sim.kms["KMS_1b"].orphan_count == 1


def test_key_relay_with_unknown_association():
    sim = Simulation(mesh4({"APP_A": "N1", "APP_B": "N4"}), seed=1)
    sim.transport.send(
        "KMS_3d", "KMS_4d",
        KeyRelay(
            encrypted_relay_key=b"\x00" * 32,
            id_key_encryption="beef",
            id_relay_key="cafe",
            app_src="APP_A",
            app_dst="APP_B",
            id_association="nope",
        ),
    )
    sim.kernel.run_to_quiescence()
    (response,) = msgs_of(sim.transport.records, "key_relay_response")
    assert response.msg.status == STATUS_NO_RULE


def test_key_relay_with_unknown_encryption_key_fails_decrypt():
    sim = Simulation(mesh4({"APP_A": "N1", "APP_B": "N4"}), seed=1)
    sim.transport.send(
        "QuSeC", "KMS_4d",
        RelayPathInstall(
            id_association="assoc1", prev_hop="KMS_3d", next_hop=None,
            app_src="APP_A", app_dst="APP_B",
        ),
    )
    sim.kernel.run_to_quiescence()
    sim.transport.send(
        "KMS_3d", "KMS_4d",
        KeyRelay(
            encrypted_relay_key=b"\x00" * 32,
            id_key_encryption="beef",
            id_relay_key="cafe",
            app_src="APP_A",
            app_dst="APP_B",
            id_association="assoc1",
        ),
    )
    sim.kernel.run_to_quiescence()
    (response,) = msgs_of(sim.transport.records, "key_relay_response")
    assert response.msg.status == STATUS_DECRYPT
    assert sim.kms["KMS_4d"].delivered == {}


def test_orphan_completion_with_wrong_type_is_dropped(mesh4_relay_topology):
    sim = Simulation(mesh4_relay_topology, seed=1)
    sim.transport.send(
        "KMS_3b", "KMS_1b",
        KeyRelayResponse(status=STATUS_OK, id_relay_key="cafe"),
    )
    sim.kernel.run_to_quiescence()
    assert sim.kms["KMS_1b"].orphan_count == 1
    assert msgs_of(sim.transport.records, "key_delivery") == []


def test_rule_install_is_idempotent(mesh4_relay_topology):
    sim = Simulation(mesh4_relay_topology, seed=1)
    install = RelayPathInstall(
        id_association="assoc1", prev_hop=None, next_hop="KMS_3b",
        app_src="APP_A", app_dst="APP_B",
    )
    kms = sim.kms["KMS_1b"]
    kms.install_rule(install)
    kms.install_rule(install)
    assert len(kms.rules) == 1
    assert kms.rules["assoc1"] == RelayRule(
        id_association="assoc1", prev_hop=None, next_hop="KMS_3b",
        app_src="APP_A", app_dst="APP_B",
    )


def test_rule_matching_respects_direction(mesh4_relay_topology):
    sim = Simulation(mesh4_relay_topology, seed=1)
    kms = sim.kms["KMS_1b"]
    kms.install_rule(RelayPathInstall(
        id_association="fwd", prev_hop=None, next_hop="KMS_3b",
        app_src="APP_A", app_dst="APP_B",
    ))
    kms.install_rule(RelayPathInstall(
        id_association="rev", prev_hop="KMS_3b", next_hop=None,
        app_src="APP_B", app_dst="APP_A",
    ))
    assert kms._rule_for_pair("APP_A", "APP_B", None).id_association == "fwd"
    assert kms._rule_for_pair("APP_B", "APP_A", "KMS_3b").id_association == "rev"
    assert kms._rule_for_pair("APP_B", "APP_A", None) is None


def test_delivered_store_ttl_expiry():
    topo = mesh4(
        {"APP_A": "N1", "APP_B": "N4"},
        config={"delivered_key_ttl_ms": 500, "session_lifetime_ms": 10_000},
    )
    result = run_events(
        topo,
        [
            {"at": 0, "event": "app_get_key", "app_src": "APP_A", "app_dst": "APP_B"},
            {"at": 600, "event": "app_get_key_with_id", "app_src": "APP_B",
             "app_dst": "APP_A", "key_id_from": "APP_A"},
        ],
    )
    (pickup,) = result.sim.apps["APP_B"].completed
    assert pickup.status == STATUS_NO_RULE  # state existed but lapsed


def test_delivered_store_within_ttl():
    topo = mesh4(
        {"APP_A": "N1", "APP_B": "N4"},
        config={"delivered_key_ttl_ms": 500, "session_lifetime_ms": 10_000},
    )
    result = run_events(
        topo,
        [
            {"at": 0, "event": "app_get_key", "app_src": "APP_A", "app_dst": "APP_B"},
            {"at": 400, "event": "app_get_key_with_id", "app_src": "APP_B",
             "app_dst": "APP_A", "key_id_from": "APP_A"},
        ],
    )
    (pickup,) = result.sim.apps["APP_B"].completed
    assert pickup.status == STATUS_OK


def test_dump_state_reports_pool_and_rules(mesh4_relay_topology):
    result = run_events(mesh4_relay_topology, one_get_key())
    dump = result.sim.kms["KMS_1b"].dump_state()
    assert dump["pool"]["consumed"] == 1
    assert len(dump["rules"]) == 1
    assert dump["pending"] == []
    ((assoc, rule),) = dump["rules"].items()
    assert rule["prev_hop"] is None
    assert rule["next_hop"] == "KMS_3b"
