"""Per-node virtual KMS: the single entity applications talk to.

Resolves the serving KMS through the controller (with an optional TTL cache
of discovery results), forwards the original request, and relays the
KeyDelivery back. Key material is never stored here beyond the in-flight
forwarding of a single delivery.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

from .protocol import (
    STATUS_TIMEOUT,
    STATUS_UNKNOWN_APP,
    Entity,
    Envelope,
    GetKey,
    GetKeyWithId,
    KeyDelivery,
    KmsDiscoveryRequest,
    KmsDiscoveryResponse,
    message_type,
)
from .qusec import QUSEC_ID
from .topology import Topology, vkms_name

log = logging.getLogger(__name__)


@dataclass
class PendingApp:
    app_id: str
    request: GetKey | GetKeyWithId
    timer: object = None


class VkmsEntity(Entity):
    """Serial actor fronting one node's KMS seats."""

    kind = "vkms"

    def __init__(
        self,
        node_id: str,
        topology: Topology,
        cache_ttl_ms: int = 0,
        timeout_ms: int = 1000,
    ):
        super().__init__(vkms_name(node_id), node_id=node_id)
        self.topology = topology
        self.cache_ttl_ms = cache_ttl_ms
        self.timeout_ms = timeout_ms
        # (app_src, app_dst) -> (kms_id, expires_ms)
        self.cache: dict[tuple[str, str], tuple[str, int]] = {}
        self.awaiting_discovery: dict[tuple[str, str], deque[PendingApp]] = {}
        self.awaiting_delivery: dict[str, deque[PendingApp]] = {}
        self.requests_handled = 0

    # ── cache ──

    def _cache_lookup(self, pair: tuple[str, str]) -> str | None:
        if self.cache_ttl_ms <= 0:
            return None
        entry = self.cache.get(pair)
        if entry is None:
            return None
        kms_id, expires = entry
        if self.services.now_ms >= expires:
            del self.cache[pair]
            return None
        return kms_id

    def _cache_insert(self, pair: tuple[str, str], kms_id: str) -> None:
        if self.cache_ttl_ms <= 0:
            return
        # A discovery answer for a local requester always names a local KMS.
        if self.topology.kms_node(kms_id) != self.node_id:
            raise AssertionError(
                f"{self.entity_id}: refusing to cache non-local KMS {kms_id}"
            )
        self.cache[pair] = (kms_id, self.services.now_ms + self.cache_ttl_ms)

    # ── dispatch ──

    def on_message(self, env: Envelope) -> None:
        msg = env.msg
        if isinstance(msg, (GetKey, GetKeyWithId)):
            self._handle_app_request(msg, env.sender)
        elif isinstance(msg, KmsDiscoveryResponse):
            self._handle_discovery_response(msg)
        elif isinstance(msg, KeyDelivery):
            self._handle_key_delivery(msg, env.sender)
        else:
            log.warning("%s ignoring %s", self.entity_id, message_type(msg))

    def _fail(self, app_id: str, request: GetKey | GetKeyWithId, status: str) -> None:
        key_id = request.key_id if isinstance(request, GetKeyWithId) else ""
        self.send(app_id, KeyDelivery(key_id=key_id, material=b"", status=status))

    def _handle_app_request(self, msg: GetKey | GetKeyWithId, app_id: str) -> None:
        self.requests_handled += 1
        if self.topology.apps.get(msg.app_src) != self.node_id:
            # Not our app: refuse locally, never bother the controller.
            self._fail(app_id, msg, STATUS_UNKNOWN_APP)
            return
        pending = PendingApp(app_id=app_id, request=msg)
        pair = (msg.app_src, msg.app_dst)
        cached = self._cache_lookup(pair)
        if cached is not None:
            self._forward_to_kms(pending, cached)
            return
        self.awaiting_discovery.setdefault(pair, deque()).append(pending)
        pending.timer = self.services.schedule_timer(
            self.timeout_ms, lambda: self._on_timeout(pending, pair)
        )
        self.send(
            QUSEC_ID, KmsDiscoveryRequest(app_src=msg.app_src, app_dst=msg.app_dst)
        )

    def _handle_discovery_response(self, msg: KmsDiscoveryResponse) -> None:
        pair = (msg.app_src, msg.app_dst)
        queue = self.awaiting_discovery.get(pair)
        if not queue:
            log.warning("%s dropping orphan discovery response for %s", self.entity_id, pair)
            return
        pending = queue.popleft()
        self.services.cancel_timer(pending.timer)
        if msg.id_kms is None:
            self._fail(pending.app_id, pending.request, STATUS_UNKNOWN_APP)
            return
        self._cache_insert(pair, msg.id_kms)
        self._forward_to_kms(pending, msg.id_kms)

    def _forward_to_kms(self, pending: PendingApp, kms_id: str) -> None:
        self.awaiting_delivery.setdefault(kms_id, deque()).append(pending)
        pending.timer = self.services.schedule_timer(
            self.timeout_ms, lambda: self._on_timeout(pending, kms_id)
        )
        self.send(kms_id, pending.request)

    def _handle_key_delivery(self, msg: KeyDelivery, kms_id: str) -> None:
        queue = self.awaiting_delivery.get(kms_id)
        if not queue:
            log.warning("%s dropping orphan delivery from %s", self.entity_id, kms_id)
            return
        pending = queue.popleft()
        self.services.cancel_timer(pending.timer)
        # Downstream status passes through unchanged.
        self.send(pending.app_id, msg)

    def _on_timeout(self, pending: PendingApp, where) -> None:
        for queue in (
            self.awaiting_discovery.get(where),
            self.awaiting_delivery.get(where),
        ):
            if queue and pending in queue:
                queue.remove(pending)
                self._fail(pending.app_id, pending.request, STATUS_TIMEOUT)
                return
