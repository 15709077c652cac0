"""Shared builders: the 4-node mesh, linear chains, and run helpers."""

from __future__ import annotations

import copy
import json

import pytest

from qkdrelay.harness import Scenario, ScenarioEvent, Simulation, run, scenario_from_dict
from qkdrelay.topology import Topology, topology_from_dict

MESH4 = {
    "nodes": [{"id": "N1"}, {"id": "N2"}, {"id": "N3"}, {"id": "N4"}],
    "links": [
        {"id": "a", "a": "N1", "b": "N2", "key_rate": 10.0, "distance_km": 10.0, "initial_pool": 8},
        {"id": "b", "a": "N1", "b": "N3", "key_rate": 10.0, "distance_km": 12.0, "initial_pool": 8},
        {"id": "c", "a": "N2", "b": "N3", "key_rate": 10.0, "distance_km": 10.0, "initial_pool": 8},
        {"id": "d", "a": "N3", "b": "N4", "key_rate": 10.0, "distance_km": 5.0, "initial_pool": 8},
    ],
    "apps": [{"id": "APP_A", "node": "N1"}, {"id": "APP_B", "node": "N4"}],
    "weight_policy": "hop_count",
}


def mesh4_dict(apps: dict[str, str] | None = None, **overrides) -> dict:
    """Copy of the mesh4 config; apps maps app id -> node id."""
    raw = copy.deepcopy(MESH4)
    if apps is not None:
        raw["apps"] = [{"id": a, "node": n} for a, n in apps.items()]
    raw.update(overrides)
    return raw


def mesh4(apps: dict[str, str] | None = None, **overrides) -> Topology:
    return topology_from_dict(mesh4_dict(apps, **overrides))


def chain_dict(n_links: int, initial_pool: int = 4, **overrides) -> dict:
    """Linear chain of n_links links (n_links + 1 nodes), apps at the ends."""
    raw = {
        "nodes": [{"id": f"N{i}"} for i in range(1, n_links + 2)],
        "links": [
            {
                "id": f"l{i:02d}",
                "a": f"N{i}",
                "b": f"N{i + 1}",
                "key_rate": 10.0,
                "distance_km": 5.0,
                "initial_pool": initial_pool,
            }
            for i in range(1, n_links + 1)
        ],
        "apps": [
            {"id": "APP_A", "node": "N1"},
            {"id": "APP_B", "node": f"N{n_links + 1}"},
        ],
        "weight_policy": "hop_count",
    }
    raw.update(overrides)
    return raw


def chain(n_links: int, initial_pool: int = 4, **overrides) -> Topology:
    return topology_from_dict(chain_dict(n_links, initial_pool, **overrides))


def pair_scenario(
    at_second: int = 10, expect: dict | None = None, name: str = "pair"
) -> Scenario:
    """GetKey from APP_A, then APP_B picks the same key up by id."""
    return scenario_from_dict(
        {
            "name": name,
            "events": [
                {"at": 0, "event": "app_get_key", "app_src": "APP_A", "app_dst": "APP_B"},
                {
                    "at": at_second,
                    "event": "app_get_key_with_id",
                    "app_src": "APP_B",
                    "app_dst": "APP_A",
                    "key_id_from": "APP_A",
                },
            ],
            "expect": expect or {},
        }
    )


def single_get_key(app_src: str = "APP_A", app_dst: str = "APP_B") -> Scenario:
    return scenario_from_dict(
        {
            "name": "one",
            "events": [
                {"at": 0, "event": "app_get_key", "app_src": app_src, "app_dst": app_dst}
            ],
            "expect": {},
        }
    )


def run_events(topology: Topology, events: list[dict], seed: int = 1, **kwargs):
    scenario = scenario_from_dict({"name": "inline", "events": events, "expect": {}})
    return run(topology, scenario, seed=seed, **kwargs)


@pytest.fixture
def mesh4_relay_topology() -> Topology:
    return mesh4({"APP_A": "N1", "APP_B": "N4"})


@pytest.fixture
def mesh4_direct_topology() -> Topology:
    return mesh4({"APP_A": "N3", "APP_B": "N4"})


def write_json(path, obj) -> str:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    return str(path)
