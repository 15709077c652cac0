"""Centralized controller: discovery, SPF path computation, rule installs.

The controller sees topology and session state only. It never holds or
forwards key material; everything it sends or receives rides the control
channel.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from heapq import heappop, heappush

from . import protocol
from .protocol import (
    Entity,
    Envelope,
    KmsDiscoveryRequest,
    KmsDiscoveryResponse,
    RelayPathInstall,
)
from .topology import Link, Topology, render_kms_id

log = logging.getLogger(__name__)

QUSEC_ID = "QuSeC"

SESSION_INSTALLED = "installed"
SESSION_COMPLETED = "completed"
SESSION_EXPIRED = "expired"


class PathError(Exception):
    pass


class NoPathError(PathError):
    pass


class SameNodeError(PathError):
    pass


def link_weight(link: Link, policy: str) -> float:
    if policy == "hop_count":
        return 1.0
    if policy == "inverse_key_rate":
        return 1.0 / link.key_rate
    if policy == "distance":
        return link.distance_km
    raise ValueError(f"unknown weight policy {policy!r}")


def shortest_path(
    topology: Topology, src: str, dst: str, policy: str
) -> tuple[float, tuple[str, ...], tuple[str, ...]]:
    """Dijkstra over the node/link graph.

    Returns (cost, node sequence, link sequence). Ties are broken by the
    lexicographically smallest node sequence, then link sequence, which the
    heap ordering gives us directly by carrying the paths in the entries.
    """
    if src not in topology.nodes or dst not in topology.nodes:
        raise NoPathError(f"unknown node in pair ({src!r}, {dst!r})")
    if src == dst:
        raise SameNodeError(f"src and dst are both {src!r}")

    heap: list[tuple[float, tuple[str, ...], tuple[str, ...]]] = [(0.0, (src,), ())]
    done: set[str] = set()
    while heap:
        cost, nodes, links = heappop(heap)
        here = nodes[-1]
        if here in done:
            continue
        done.add(here)
        if here == dst:
            return cost, nodes, links
        for neighbor, link in topology.neighbors(here):
            if neighbor in done:
                continue
            heappush(
                heap,
                (cost + link_weight(link, policy), nodes + (neighbor,), links + (link.id,)),
            )
    raise NoPathError(f"no path from {src!r} to {dst!r}")


def expand_to_kms(node_path: tuple[str, ...], link_path: tuple[str, ...]) -> list[str]:
    """KMS-granularity expansion: each traversed link (u, v) contributes
    KMS_u(link) then KMS_v(link)."""
    out = []
    for i, link_id in enumerate(link_path):
        out.append(render_kms_id(node_path[i], link_id))
        out.append(render_kms_id(node_path[i + 1], link_id))
    return out


def compute_relay_path(
    topology: Topology, src_node: str, dst_node: str, policy: str
) -> list[str]:
    _, nodes, links = shortest_path(topology, src_node, dst_node, policy)
    return expand_to_kms(nodes, links)


@dataclass
class SessionState:
    """One end-to-end establishment: ordered KMS list of length 2L."""

    id_association: str
    app_src: str
    app_dst: str
    kms_path: tuple[str, ...]
    created_ms: int
    status: str = SESSION_INSTALLED

    @property
    def first_kms(self) -> str:
        return self.kms_path[0]

    @property
    def last_kms(self) -> str:
        return self.kms_path[-1]

    def to_dict(self) -> dict:
        return {
            "id_association": self.id_association,
            "app_src": self.app_src,
            "app_dst": self.app_dst,
            "kms_path": list(self.kms_path),
            "created_ms": self.created_ms,
            "status": self.status,
        }


class QusecEntity(Entity):
    """Serial controller actor; all transitions happen in message order."""

    kind = "controller"

    def __init__(
        self,
        topology: Topology,
        seed: int,
        weight_policy: str | None = None,
        session_lifetime_ms: int | None = None,
    ):
        super().__init__(QUSEC_ID, node_id=None)
        self.topology = topology
        self.seed = seed
        self.weight_policy = weight_policy or topology.weight_policy
        self.session_lifetime_ms = (
            session_lifetime_ms
            if session_lifetime_ms is not None
            else topology.config.session_lifetime_ms
        )
        self.sessions: list[SessionState] = []
        self.install_count = 0
        self.discovery_count = 0
        self.errors: list[dict] = []
        self._assoc_counter = 0

    # ── id allocation ──

    def _new_association_id(self) -> str:
        self._assoc_counter += 1
        return hashlib.shake_256(
            f"{self.seed}|assoc|{self._assoc_counter}".encode()
        ).hexdigest(16)

    # ── session bookkeeping ──

    def session_gc(self, now_ms: int) -> int:
        """Mark sessions older than the configured lifetime expired."""
        if self.session_lifetime_ms is None:
            return 0
        expired = 0
        for session in self.sessions:
            if session.status == SESSION_EXPIRED:
                continue
            if now_ms - session.created_ms > self.session_lifetime_ms:
                session.status = SESSION_EXPIRED
                expired += 1
        return expired

    def _find_reusable_session(self, app_src: str, app_dst: str) -> SessionState | None:
        """Newest live session in which the requester is the target."""
        for session in reversed(self.sessions):
            if session.status == SESSION_EXPIRED:
                continue
            if session.app_src == app_dst and session.app_dst == app_src:
                return session
        return None

    # ── discovery ──

    def on_message(self, env: Envelope) -> None:
        if isinstance(env.msg, KmsDiscoveryRequest):
            self._handle_discovery(env.msg, env.sender)
        else:
            log.warning("QuSeC ignoring unexpected %s from %s",
                        protocol.message_type(env.msg), env.sender)

    def _respond(self, reply_to: str, msg: KmsDiscoveryRequest, id_kms: str | None) -> None:
        self.send(
            reply_to,
            KmsDiscoveryResponse(app_src=msg.app_src, app_dst=msg.app_dst, id_kms=id_kms),
        )

    def _fail(self, reply_to: str, msg: KmsDiscoveryRequest, reason: str) -> None:
        self.errors.append(
            {"app_src": msg.app_src, "app_dst": msg.app_dst, "reason": reason}
        )
        self._respond(reply_to, msg, None)

    def _handle_discovery(self, msg: KmsDiscoveryRequest, reply_to: str) -> None:
        now = self.services.now_ms
        self.discovery_count += 1
        self.session_gc(now)

        apps = self.topology.apps
        src_node = apps.get(msg.app_src)
        dst_node = apps.get(msg.app_dst)
        if src_node is None or dst_node is None:
            self._fail(reply_to, msg, "unknown_app")
            return
        if src_node == dst_node:
            self._fail(reply_to, msg, "same_node")
            return

        # (b) requester is the target of a live session: reuse it, no installs.
        session = self._find_reusable_session(msg.app_src, msg.app_dst)
        if session is not None:
            session.status = SESSION_COMPLETED
            self._respond(reply_to, msg, session.last_kms)
            return

        # (a) both apps inside one link domain: direct delivery, no installs.
        shared = self.topology.links_between(src_node, dst_node)
        if shared:
            link = min(
                shared, key=lambda l: (link_weight(l, self.weight_policy), l.id)
            )
            kms_path = (
                render_kms_id(src_node, link.id),
                render_kms_id(dst_node, link.id),
            )
            self.sessions.append(
                SessionState(
                    id_association=self._new_association_id(),
                    app_src=msg.app_src,
                    app_dst=msg.app_dst,
                    kms_path=kms_path,
                    created_ms=now,
                )
            )
            self._respond(reply_to, msg, kms_path[0])
            return

        # (c) relay path: install rules on every KMS, last-to-first so
        # downstream rules exist before the initiator can act.
        try:
            kms_list = compute_relay_path(
                self.topology, src_node, dst_node, self.weight_policy
            )
        except NoPathError:
            self._fail(reply_to, msg, "no_path")
            return

        assoc = self._new_association_id()
        for i in range(len(kms_list) - 1, -1, -1):
            install = RelayPathInstall(
                id_association=assoc,
                prev_hop=kms_list[i - 1] if i > 0 else None,
                next_hop=kms_list[i + 1] if i < len(kms_list) - 1 else None,
                app_src=msg.app_src,
                app_dst=msg.app_dst,
            )
            self.send(kms_list[i], install)
            self.install_count += 1
        self.sessions.append(
            SessionState(
                id_association=assoc,
                app_src=msg.app_src,
                app_dst=msg.app_dst,
                kms_path=tuple(kms_list),
                created_ms=now,
            )
        )
        self._respond(reply_to, msg, kms_list[0])

    # ── state dump ──

    def dump_state(self) -> dict:
        return {
            "weight_policy": self.weight_policy,
            "session_lifetime_ms": self.session_lifetime_ms,
            "discovery_count": self.discovery_count,
            "install_count": self.install_count,
            "sessions": [s.to_dict() for s in self.sessions],
            "errors": list(self.errors),
        }
