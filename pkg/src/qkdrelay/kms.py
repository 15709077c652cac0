"""Local KMS bound to one QKD link endpoint.

Implements direct delivery plus the hop-by-hop relay procedure: reserve the
end-to-end key K1 on the first link, then at each hop encrypt it with a
fresh key from the next link (K3 = K1 xor K2), hand it across, and propagate
completion statuses backward. A KMS only ever touches its own pool; the
end-to-end key enters a node in plaintext only on the intra-node channel,
inside the physically-secure trusted relay.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .linksim import AVAILABLE, KeyPool, KeyRecord
from .protocol import (
    STATUS_DECRYPT,
    STATUS_NO_KEY,
    STATUS_NO_RULE,
    STATUS_OK,
    STATUS_TIMEOUT,
    AckRequest,
    Entity,
    Envelope,
    ExtKeyRequest,
    GetKey,
    GetKeyWithId,
    KeyDelivery,
    KeyRelay,
    KeyRelayResponse,
    RelayPathInstall,
    RelayProcessRequest,
    RelayProcessResponse,
    message_type,
    otp_xor,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelayRule:
    """Installed role of this KMS in one association.

    prev_hop none means this KMS initiates the association; next_hop none
    means it terminates it. A next_hop that is not the across-link peer is
    always a KMS on the same node.
    """

    id_association: str
    prev_hop: str | None
    next_hop: str | None
    app_src: str
    app_dst: str


@dataclass
class DeliveredKey:
    material: bytes
    stored_ms: int


# What a pending entry emits when its completion (or timeout) arrives.
AWAIT_RELAY_PROCESS_RESPONSE = "deliver"            # initiator: resume GetKey
AWAIT_ACK_THEN_RPR = "relay_process_response"       # reply to RelayProcessRequest peer
AWAIT_ACK_THEN_KRR = "key_relay_response"           # reply to KeyRelay peer
AWAIT_KRR_THEN_ACK = "ack_request"                  # reply to ExtKeyRequest sender

_EXPECTED_COMPLETION = {
    AWAIT_RELAY_PROCESS_RESPONSE: RelayProcessResponse,
    AWAIT_ACK_THEN_RPR: AckRequest,
    AWAIT_ACK_THEN_KRR: AckRequest,
    AWAIT_KRR_THEN_ACK: KeyRelayResponse,
}


@dataclass
class PendingRelay:
    id_relay_key: str
    id_association: str
    app_src: str
    app_dst: str
    action: str
    reply_to: str
    timer: object = None
    key: KeyRecord | None = None  # initiator keeps K1 reserved here


class KmsEntity(Entity):
    """Serial actor for one (node, link) KMS seat."""

    kind = "kms"

    def __init__(
        self,
        kms_id: str,
        node_id: str,
        link_id: str,
        peer_kms_id: str,
        pool: KeyPool,
        timeout_ms: int = 1000,
        delivered_ttl_ms: int | None = None,
    ):
        super().__init__(kms_id, node_id=node_id)
        self.link_id = link_id
        self.peer_kms_id = peer_kms_id
        self.pool = pool
        self.timeout_ms = timeout_ms
        self.delivered_ttl_ms = delivered_ttl_ms
        self.rules: dict[str, RelayRule] = {}
        self.delivered: dict[tuple[str, str, str], DeliveredKey] = {}
        self.pending: dict[str, PendingRelay] = {}
        self.orphan_count = 0

    # ── rule installation ──

    def install_rule(self, msg: RelayPathInstall) -> None:
        self.rules[msg.id_association] = RelayRule(
            id_association=msg.id_association,
            prev_hop=msg.prev_hop,
            next_hop=msg.next_hop,
            app_src=msg.app_src,
            app_dst=msg.app_dst,
        )

    def _rule_for_pair(
        self, app_src: str, app_dst: str, prev_hop: str | None
    ) -> RelayRule | None:
        """Newest rule matching the ordered app pair and chain position
        (prev_hop none selects initiator rules)."""
        for rule in reversed(list(self.rules.values())):
            if rule.app_src != app_src or rule.app_dst != app_dst:
                continue
            if rule.prev_hop != prev_hop:
                continue
            return rule
        return None

    # ── dispatch ──

    def on_message(self, env: Envelope) -> None:
        msg = env.msg
        if isinstance(msg, RelayPathInstall):
            self.install_rule(msg)
        elif isinstance(msg, GetKey):
            self._handle_get_key(msg, env.sender)
        elif isinstance(msg, GetKeyWithId):
            self._handle_get_key_with_id(msg, env.sender)
        elif isinstance(msg, RelayProcessRequest):
            self._handle_relay_process_request(msg, env.sender)
        elif isinstance(msg, ExtKeyRequest):
            self._handle_ext_key_request(msg, env.sender)
        elif isinstance(msg, KeyRelay):
            self._handle_key_relay(msg, env.sender)
        elif isinstance(msg, (KeyRelayResponse, AckRequest, RelayProcessResponse)):
            self._handle_completion(msg, env.sender)
        else:
            log.warning("%s ignoring %s", self.entity_id, message_type(msg))

    # ── Get Key (direct or relay initiation) ──

    def _deliver(self, to: str, key_id: str, material: bytes, status: str) -> None:
        self.send(to, KeyDelivery(key_id=key_id, material=material, status=status))

    def _handle_get_key(self, msg: GetKey, requester: str) -> None:
        rule = self._rule_for_pair(msg.app_src, msg.app_dst, prev_hop=None)
        if rule is not None:
            self._initiate_relay(msg, rule, requester)
            return
        # Direct serve: next available key, FIFO.
        record = self.pool.reserve_next()
        if record is None:
            self._deliver(requester, "", b"", STATUS_NO_KEY)
            return
        self.pool.consume(record.id)
        self._deliver(requester, record.id, record.material, STATUS_OK)

    def _initiate_relay(self, msg: GetKey, rule: RelayRule, requester: str) -> None:
        k1 = self.pool.reserve_next()
        if k1 is None:
            self._deliver(requester, "", b"", STATUS_NO_KEY)
            return
        self.send(
            self.peer_kms_id,
            RelayProcessRequest(
                app_src=msg.app_src, app_dst=msg.app_dst, id_relay_key=k1.id
            ),
        )
        self._suspend(
            k1.id, rule, AWAIT_RELAY_PROCESS_RESPONSE, reply_to=requester, key=k1
        )

    def _handle_get_key_with_id(self, msg: GetKeyWithId, requester: str) -> None:
        # Target-side pickup from the delivered-keys store first.
        entry_key = (msg.key_id, msg.app_dst, msg.app_src)
        entry = self.delivered.get(entry_key)
        if entry is not None:
            if self._store_entry_expired(entry):
                # State existed but lapsed with the session.
                self._deliver(requester, msg.key_id, b"", STATUS_NO_RULE)
                return
            self._deliver(requester, msg.key_id, entry.material, STATUS_OK)
            return
        # Direct case: the id names a key in this KMS's own pool.
        record = self.pool.get(msg.key_id)
        if record is not None and record.state == AVAILABLE:
            self.pool.consume(record.id)
            self._deliver(requester, record.id, record.material, STATUS_OK)
            return
        self._deliver(requester, msg.key_id, b"", STATUS_NO_KEY)

    def _store_entry_expired(self, entry: DeliveredKey) -> bool:
        if self.delivered_ttl_ms is None:
            return False
        return self.services.now_ms - entry.stored_ms > self.delivered_ttl_ms

    # ── relay chain, forward direction ──

    def _handle_relay_process_request(self, msg: RelayProcessRequest, peer: str) -> None:
        rule = self._rule_for_pair(msg.app_src, msg.app_dst, prev_hop=peer)
        if rule is None:
            self.send(
                peer, RelayProcessResponse(status=STATUS_NO_RULE, id_relay_key=msg.id_relay_key)
            )
            return
        record = self.pool.get(msg.id_relay_key)
        if record is None or record.state != AVAILABLE:
            self.send(
                peer, RelayProcessResponse(status=STATUS_NO_KEY, id_relay_key=msg.id_relay_key)
            )
            return
        self.pool.consume(record.id)
        if rule.next_hop is None:
            # Defensive: a one-link "relay" degenerates to target-side storage.
            self._store_delivered(msg.id_relay_key, rule, record.material)
            self.send(
                peer, RelayProcessResponse(status=STATUS_OK, id_relay_key=msg.id_relay_key)
            )
            return
        self.send(
            rule.next_hop,
            ExtKeyRequest(
                id_relay_key=record.id,
                value_relay_key=record.material,
                app_src=msg.app_src,
                app_dst=msg.app_dst,
                id_association=rule.id_association,
            ),
        )
        self._suspend(record.id, rule, AWAIT_ACK_THEN_RPR, reply_to=peer)

    def _handle_ext_key_request(self, msg: ExtKeyRequest, sender: str) -> None:
        rule = self.rules.get(msg.id_association)
        if rule is None:
            self.send(
                sender,
                AckRequest(
                    id_relay_key=msg.id_relay_key,
                    ack_status=STATUS_NO_RULE,
                    app_src=msg.app_src,
                    app_dst=msg.app_dst,
                ),
            )
            return
        k2 = self.pool.reserve_next()
        if k2 is None:
            self.send(
                sender,
                AckRequest(
                    id_relay_key=msg.id_relay_key,
                    ack_status=STATUS_NO_KEY,
                    app_src=msg.app_src,
                    app_dst=msg.app_dst,
                ),
            )
            return
        self.pool.consume(k2.id)
        k3 = otp_xor(msg.value_relay_key, k2.material)
        self.send(
            self.peer_kms_id,
            KeyRelay(
                encrypted_relay_key=k3,
                id_key_encryption=k2.id,
                id_relay_key=msg.id_relay_key,
                app_src=msg.app_src,
                app_dst=msg.app_dst,
                id_association=msg.id_association,
            ),
        )
        self._suspend(msg.id_relay_key, rule, AWAIT_KRR_THEN_ACK, reply_to=sender)

    def _handle_key_relay(self, msg: KeyRelay, peer: str) -> None:
        rule = self.rules.get(msg.id_association)
        if rule is None:
            self.send(
                peer, KeyRelayResponse(status=STATUS_NO_RULE, id_relay_key=msg.id_relay_key)
            )
            return
        k2 = self.pool.get(msg.id_key_encryption)
        if k2 is None or k2.state != AVAILABLE:
            self.send(
                peer, KeyRelayResponse(status=STATUS_DECRYPT, id_relay_key=msg.id_relay_key)
            )
            return
        self.pool.consume(k2.id)
        k1 = otp_xor(msg.encrypted_relay_key, k2.material)
        if rule.next_hop is None:
            self._store_delivered(msg.id_relay_key, rule, k1)
            self.send(
                peer, KeyRelayResponse(status=STATUS_OK, id_relay_key=msg.id_relay_key)
            )
            return
        # Middle node: keep the loop going on the next link.
        self.send(
            rule.next_hop,
            ExtKeyRequest(
                id_relay_key=msg.id_relay_key,
                value_relay_key=k1,
                app_src=msg.app_src,
                app_dst=msg.app_dst,
                id_association=msg.id_association,
            ),
        )
        self._suspend(msg.id_relay_key, rule, AWAIT_ACK_THEN_KRR, reply_to=peer)

    def _store_delivered(self, id_relay_key: str, rule: RelayRule, material: bytes) -> None:
        self.delivered[(id_relay_key, rule.app_src, rule.app_dst)] = DeliveredKey(
            material=material, stored_ms=self.services.now_ms
        )

    # ── completions, backward direction ──

    def _suspend(
        self,
        id_relay_key: str,
        rule: RelayRule,
        action: str,
        reply_to: str,
        key: KeyRecord | None = None,
    ) -> None:
        pending = PendingRelay(
            id_relay_key=id_relay_key,
            id_association=rule.id_association,
            app_src=rule.app_src,
            app_dst=rule.app_dst,
            action=action,
            reply_to=reply_to,
            key=key,
        )
        pending.timer = self.services.schedule_timer(
            self.timeout_ms, lambda: self._on_timeout(id_relay_key)
        )
        self.pending[id_relay_key] = pending

    def _handle_completion(
        self, msg: KeyRelayResponse | AckRequest | RelayProcessResponse, sender: str
    ) -> None:
        pending = self.pending.get(msg.id_relay_key)
        if pending is None or not isinstance(msg, _EXPECTED_COMPLETION[pending.action]):
            self.orphan_count += 1
            log.warning(
                "%s dropping orphan %s for key %s",
                self.entity_id, message_type(msg), msg.id_relay_key,
            )
            return
        status = msg.ack_status if isinstance(msg, AckRequest) else msg.status
        self.services.cancel_timer(pending.timer)
        del self.pending[msg.id_relay_key]
        self._resolve(pending, status)

    def _on_timeout(self, id_relay_key: str) -> None:
        pending = self.pending.pop(id_relay_key, None)
        if pending is None:
            return
        log.warning("%s timed out waiting on key %s", self.entity_id, id_relay_key)
        self._resolve(pending, STATUS_TIMEOUT)

    def _resolve(self, pending: PendingRelay, status: str) -> None:
        """Propagate a completion status backward, unchanged."""
        if pending.action == AWAIT_RELAY_PROCESS_RESPONSE:
            k1 = pending.key
            self.pool.consume(k1.id)  # consumed even on failure, never reused
            if status == STATUS_OK:
                self._deliver(pending.reply_to, k1.id, k1.material, status)
            else:
                self._deliver(pending.reply_to, k1.id, b"", status)
        elif pending.action == AWAIT_ACK_THEN_RPR:
            self.send(
                pending.reply_to,
                RelayProcessResponse(status=status, id_relay_key=pending.id_relay_key),
            )
        elif pending.action == AWAIT_ACK_THEN_KRR:
            self.send(
                pending.reply_to,
                KeyRelayResponse(status=status, id_relay_key=pending.id_relay_key),
            )
        elif pending.action == AWAIT_KRR_THEN_ACK:
            self.send(
                pending.reply_to,
                AckRequest(
                    id_relay_key=pending.id_relay_key,
                    ack_status=status,
                    app_src=pending.app_src,
                    app_dst=pending.app_dst,
                ),
            )

    # ── introspection for tests and reports ──

    def dump_state(self) -> dict:
        return {
            "kms_id": self.entity_id,
            "link": self.link_id,
            "rules": {
                a: {
                    "prev_hop": r.prev_hop,
                    "next_hop": r.next_hop,
                    "app_src": r.app_src,
                    "app_dst": r.app_dst,
                }
                for a, r in self.rules.items()
            },
            "delivered": sorted(k[0] for k in self.delivered),
            "pending": sorted(self.pending),
            "pool": self.pool.counts(),
            "orphans": self.orphan_count,
        }
