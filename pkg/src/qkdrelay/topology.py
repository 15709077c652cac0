"""Network model: nodes, QKD links, the app registry, and KMS naming.

The topology is loaded once from a JSON config and is immutable afterwards.
Node roles are never configured; they are derived from link incidence
(one incident link makes a simple node, two or more make a trusted relay).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

WEIGHT_POLICIES = ("hop_count", "inverse_key_rate", "distance")

ROLE_SIMPLE = "simple"
ROLE_TRUSTED_RELAY = "trusted_relay"

# Node ids shaped like N7 render as their bare index in KMS/vKMS names,
# giving the conventional KMS_3d / vKMS_3 style labels.
_NODE_INDEX_RE = re.compile(r"^N(\d+)$")


class TopologyError(Exception):
    """Base class for topology loading failures."""


class ParseError(TopologyError):
    """Config text is not valid JSON or does not match the file schema."""


class ValidationError(TopologyError):
    """Structurally valid config that violates a semantic constraint."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class UnknownAppError(TopologyError):
    """App id absent from the registry."""


@dataclass(frozen=True)
class SimConfig:
    """Optional per-topology simulation parameters (the `config` object)."""

    key_size_bytes: int = 32
    request_timeout_ms: int = 1000
    session_lifetime_ms: int | None = None
    delivered_key_ttl_ms: int | None = None
    cache_ttl_ms: int = 0


@dataclass(frozen=True)
class Link:
    """One QKD link. Endpoints are unordered; both weight attributes are
    mandatory regardless of the active weight policy."""

    id: str
    a: str
    b: str
    key_rate: float
    distance_km: float
    initial_pool: int

    def endpoints(self) -> tuple[str, str]:
        return (self.a, self.b)

    def other_end(self, node_id: str) -> str:
        if node_id == self.a:
            return self.b
        if node_id == self.b:
            return self.a
        raise ValueError(f"node {node_id!r} is not an endpoint of link {self.id!r}")


@dataclass(frozen=True)
class Node:
    id: str
    role: str
    kms_ids: tuple[str, ...]


def node_label(node_id: str) -> str:
    """Index part used in KMS/vKMS names: N3 -> 3, anything else verbatim."""
    m = _NODE_INDEX_RE.match(node_id)
    return m.group(1) if m else node_id


def render_kms_id(node_id: str, link_id: str) -> str:
    return f"KMS_{node_label(node_id)}{link_id}"


def vkms_name(node_id: str) -> str:
    return f"vKMS_{node_label(node_id)}"


@dataclass(frozen=True)
class Topology:
    """Immutable network description plus the app registry."""

    nodes: dict[str, Node]
    links: dict[str, Link]
    apps: dict[str, str]
    weight_policy: str
    config: SimConfig = field(default_factory=SimConfig)

    # ── graph helpers ──

    def incident_links(self, node_id: str) -> list[Link]:
        return [l for l in self.links.values() if node_id in l.endpoints()]

    def neighbors(self, node_id: str) -> list[tuple[str, Link]]:
        """(neighbor node, connecting link) pairs, in link file order."""
        out = []
        for link in self.links.values():
            if node_id in link.endpoints():
                out.append((link.other_end(node_id), link))
        return out

    def links_between(self, u: str, v: str) -> list[Link]:
        return [l for l in self.links.values() if {u, v} == set(l.endpoints())]

    # ── naming ──

    def kms_pairs(self) -> list[tuple[str, str]]:
        """Every (node, link) KMS seat in the network."""
        out = []
        for link in self.links.values():
            out.append((link.a, link.id))
            out.append((link.b, link.id))
        return out

    def parse_kms_id(self, rendered: str) -> tuple[str, str]:
        """Invert render_kms_id against this topology.

        Load-time validation guarantees at most one (node, link) pair can
        produce a given rendered name.
        """
        matches = [
            (n, l) for (n, l) in self.kms_pairs() if render_kms_id(n, l) == rendered
        ]
        if not matches:
            raise KeyError(f"no KMS named {rendered!r} in this topology")
        return matches[0]

    def kms_node(self, rendered: str) -> str:
        return self.parse_kms_id(rendered)[0]

    def resolve_app(self, app_id: str) -> str:
        try:
            return self.apps[app_id]
        except KeyError:
            raise UnknownAppError(f"app {app_id!r} is not registered") from None


# ── file schema ──

_LINK_KEYS = {"id", "a", "b", "key_rate", "distance_km", "initial_pool"}
_CONFIG_KEYS = {
    "key_size_bytes",
    "request_timeout_ms",
    "session_lifetime_ms",
    "delivered_key_ttl_ms",
    "cache_ttl_ms",
}


def _require_str(obj: dict, key: str, where: str) -> str:
    value = obj.get(key)
    if not isinstance(value, str) or not value:
        raise ParseError(f"{where}: {key!r} must be a non-empty string")
    return value


def _require_number(obj: dict, key: str, where: str) -> float:
    value = obj.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{where}: {key!r} must be a number")
    return float(value)


def _require_int(obj: dict, key: str, where: str) -> int:
    value = obj.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{where}: {key!r} must be an integer")
    return value


def _check_keys(obj: dict, allowed: set[str], required: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ParseError(f"{where}: unknown key {sorted(unknown)[0]!r}")
    missing = required - set(obj)
    if missing:
        raise ParseError(f"{where}: missing key {sorted(missing)[0]!r}")


def _config_from_dict(obj: dict) -> SimConfig:
    _check_keys(obj, _CONFIG_KEYS, set(), "config")
    kwargs = {}
    for key in ("key_size_bytes", "request_timeout_ms", "cache_ttl_ms"):
        if key in obj:
            kwargs[key] = _require_int(obj, key, "config")
    for key in ("session_lifetime_ms", "delivered_key_ttl_ms"):
        if key in obj and obj[key] is not None:
            kwargs[key] = _require_int(obj, key, "config")
    cfg = SimConfig(**kwargs)
    if cfg.key_size_bytes <= 0:
        raise ParseError("config: 'key_size_bytes' must be positive")
    if cfg.request_timeout_ms <= 0:
        raise ParseError("config: 'request_timeout_ms' must be positive")
    if cfg.cache_ttl_ms < 0:
        raise ParseError("config: 'cache_ttl_ms' must be >= 0")
    return cfg


def topology_from_dict(raw: dict) -> Topology:
    _check_keys(
        raw,
        {"nodes", "links", "apps", "weight_policy", "config"},
        {"nodes", "links", "apps", "weight_policy"},
        "topology",
    )
    for key in ("nodes", "links", "apps"):
        if not isinstance(raw[key], list):
            raise ParseError(f"topology: {key!r} must be an array")

    policy = raw["weight_policy"]
    if not isinstance(policy, str):
        raise ParseError("topology: 'weight_policy' must be a string")
    config = _config_from_dict(raw["config"]) if "config" in raw else SimConfig()

    violations: list[str] = []

    nodes: dict[str, dict] = {}
    for entry in raw["nodes"]:
        _check_keys(entry, {"id"}, {"id"}, "node")
        node_id = _require_str(entry, "id", "node")
        if node_id in nodes:
            violations.append(f"duplicate node id {node_id!r}")
        nodes[node_id] = entry

    links: dict[str, Link] = {}
    for entry in raw["links"]:
        _check_keys(entry, _LINK_KEYS, _LINK_KEYS, "link")
        link = Link(
            id=_require_str(entry, "id", "link"),
            a=_require_str(entry, "a", "link"),
            b=_require_str(entry, "b", "link"),
            key_rate=_require_number(entry, "key_rate", "link"),
            distance_km=_require_number(entry, "distance_km", "link"),
            initial_pool=_require_int(entry, "initial_pool", "link"),
        )
        if link.id in links:
            violations.append(f"duplicate link id {link.id!r}")
        links[link.id] = link
        if link.a == link.b:
            violations.append(f"link {link.id!r} endpoints must be distinct")
        for end in link.endpoints():
            if end not in nodes:
                violations.append(f"link {link.id!r} references unknown node {end!r}")
        if link.key_rate <= 0:
            violations.append(f"link {link.id!r} key_rate must be positive")
        if link.distance_km <= 0:
            violations.append(f"link {link.id!r} distance_km must be positive")
        if link.initial_pool < 0:
            violations.append(f"link {link.id!r} initial_pool must be >= 0")

    apps: dict[str, str] = {}
    for entry in raw["apps"]:
        _check_keys(entry, {"id", "node"}, {"id", "node"}, "app")
        app_id = _require_str(entry, "id", "app")
        node_ref = _require_str(entry, "node", "app")
        if app_id in apps:
            violations.append(f"duplicate app id {app_id!r}")
        apps[app_id] = node_ref
        if node_ref not in nodes:
            violations.append(f"app {app_id!r} references unknown node {node_ref!r}")

    if policy not in WEIGHT_POLICIES:
        violations.append(f"unknown weight_policy {policy!r}")

    # Node roles and per-node KMS seats.
    built_nodes: dict[str, Node] = {}
    degree = {n: 0 for n in nodes}
    for link in links.values():
        for end in link.endpoints():
            if end in degree:
                degree[end] += 1
    for node_id in nodes:
        incident = sorted(l.id for l in links.values() if node_id in l.endpoints())
        if degree.get(node_id, 0) == 0:
            violations.append(f"node {node_id!r} has no incident links")
        role = ROLE_TRUSTED_RELAY if degree.get(node_id, 0) >= 2 else ROLE_SIMPLE
        built_nodes[node_id] = Node(
            id=node_id,
            role=role,
            kms_ids=tuple(render_kms_id(node_id, l) for l in incident),
        )

    # Connectivity over the undirected node/link graph.
    if nodes:
        seen = set()
        stack = [next(iter(nodes))]
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            for link in links.values():
                if cur in link.endpoints():
                    stack.append(link.other_end(cur))
        if seen != set(nodes):
            unreachable = sorted(set(nodes) - seen)
            violations.append(f"graph is disconnected (unreachable: {unreachable})")

    # Rendered KMS names must be unique and unambiguous, or every later
    # trace and rule install would be misaddressed.
    rendered: dict[str, tuple[str, str]] = {}
    for link in links.values():
        for end in link.endpoints():
            if end not in nodes:
                continue
            name = render_kms_id(end, link.id)
            prior = rendered.get(name)
            if prior is not None and prior != (end, link.id):
                violations.append(f"ambiguous KMS name {name!r}")
            rendered[name] = (end, link.id)

    if violations:
        raise ValidationError(violations)

    return Topology(
        nodes=built_nodes,
        links=links,
        apps=apps,
        weight_policy=policy,
        config=config,
    )


def load_topology(config_text: str) -> Topology:
    try:
        raw = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ParseError("topology: top level must be an object")
    return topology_from_dict(raw)


def topology_to_dict(topology: Topology) -> dict:
    raw: dict = {
        "nodes": [{"id": n} for n in topology.nodes],
        "links": [
            {
                "id": l.id,
                "a": l.a,
                "b": l.b,
                "key_rate": l.key_rate,
                "distance_km": l.distance_km,
                "initial_pool": l.initial_pool,
            }
            for l in topology.links.values()
        ],
        "apps": [{"id": a, "node": n} for a, n in topology.apps.items()],
        "weight_policy": topology.weight_policy,
    }
    if topology.config != SimConfig():
        cfg = SimConfig()
        out = {}
        for name in _CONFIG_KEYS:
            value = getattr(topology.config, name)
            if value != getattr(cfg, name):
                out[name] = value
        raw["config"] = out
    return raw


def serialize_topology(topology: Topology) -> str:
    return json.dumps(topology_to_dict(topology), indent=2, sort_keys=False) + "\n"
