"""
Self-configuring P2P ring overlay
Greedy ring routing, NAT-aware links, a DHT virtual-address registry and sealed tunnels
"""

import base64
import binascii
import hashlib
import ipaddress
import json
import logging
import math
import random
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from errors import (
    ChannelError,
    HandshakeRejected,
    IsolatedNodeError,
    JoinError,
    LinkDown,
    NoRouteToHost,
    OverlayError,
)
from models import DeliveryReceipt, Frame, LinkKind, NatClass, NodeDescriptor
from secnet import (
    DEFAULT_SUITE,
    CertificateAuthority,
    Credentials,
    CryptoSuite,
    SecureChannel,
    establish_channel,
    generate_identity,
)
from transport import InMemoryTransport, Transport

logger = logging.getLogger(__name__)

DEFAULT_BITS = 160
DEFAULT_NEAR = 2
VIP_PREFIX = "10.128.0.0/9"
NUMPY_MAX_BITS = 62


def ring_distance(a: int, b: int, bits: int = DEFAULT_BITS) -> int:
    ring = 1 << bits
    d = (a - b) % ring
    return min(d, ring - d)


def clockwise(a: int, b: int, bits: int = DEFAULT_BITS) -> int:
    """Offset travelling clockwise from a to b"""
    return (b - a) % (1 << bits)


def node_hex(node_id: int, bits: int = DEFAULT_BITS) -> str:
    return format(node_id, f"0{(bits + 3) // 4}x")


def link_allowed(a: NatClass, b: NatClass) -> LinkKind:
    if NatClass(a) is NatClass.PUBLIC or NatClass(b) is NatClass.PUBLIC:
        return LinkKind.DIRECT
    if NatClass(a) is NatClass.CONE and NatClass(b) is NatClass.CONE:
        return LinkKind.DIRECT  # hole punching between cone NATs always succeeds
    return LinkKind.RELAYED


def shortcut_target(n: int) -> int:
    return math.ceil(math.log2(n)) if n > 1 else 0


def vip_key(vip: str, bits: int = DEFAULT_BITS) -> int:
    return int.from_bytes(hashlib.sha1(vip.encode("ascii")).digest(), "big") % (1 << bits)


@dataclass
class RoutingTable:
    owner: int
    bits: int = DEFAULT_BITS
    near_successors: List[int] = field(default_factory=list)
    near_predecessors: List[int] = field(default_factory=list)
    shortcuts: List[int] = field(default_factory=list)

    def entries(self) -> List[int]:
        seen: Dict[int, None] = {}
        for e in self.near_successors + self.near_predecessors + self.shortcuts:
            seen.setdefault(e, None)
        return list(seen)

    def near(self) -> List[int]:
        return list(dict.fromkeys(self.near_successors + self.near_predecessors))

    def snapshot(self) -> Tuple[Tuple[int, ...], Tuple[int, ...], Tuple[int, ...]]:
        return tuple(self.near_successors), tuple(self.near_predecessors), tuple(self.shortcuts)


def route_next_hop(table: RoutingTable, dest: int) -> Optional[int]:
    """Greedy step toward dest; None means deliver to self (owner is closest known)"""
    if dest == table.owner:
        return None
    entries = table.entries()
    if not entries:
        raise IsolatedNodeError(f"node {table.owner:x} has no routing entries")
    bits = table.bits
    best = min(entries, key=lambda e: (ring_distance(e, dest, bits), e))
    if ring_distance(best, dest, bits) < ring_distance(table.owner, dest, bits):
        return best
    return None


class VipAllocator:
    """Sequential addresses from the configured private prefix"""

    def __init__(self, prefix: str = VIP_PREFIX):
        self.network = ipaddress.IPv4Network(prefix)
        self._next = 1

    def allocate(self) -> str:
        if self._next >= self.network.num_addresses - 1:
            raise OverlayError(f"virtual address prefix {self.network} exhausted")
        vip = str(self.network.network_address + self._next)
        self._next += 1
        return vip

    def contains(self, vip: str) -> bool:
        try:
            return ipaddress.IPv4Address(vip) in self.network
        except ValueError:
            return False


@dataclass
class OverlayNode:
    descriptor: NodeDescriptor
    table: RoutingTable
    credentials: Optional[Credentials] = None
    store: Dict[int, Dict[str, int]] = field(default_factory=dict)
    inbox: Deque[Tuple[int, bytes]] = field(default_factory=lambda: deque(maxlen=256))
    filled_for: int = 0  # live count when shortcuts were last sampled

    @property
    def id(self) -> int:
        return self.descriptor.id


class Overlay:
    """Network state for one overlay instance

    Maintenance (join, stabilize) is driven through this object as a single
    deterministic driver; data-plane frames travel only through the transport.
    """

    def __init__(
        self,
        bits: int = DEFAULT_BITS,
        near: int = DEFAULT_NEAR,
        seed: int = 0,
        prefix: str = VIP_PREFIX,
        transport: Optional[Transport] = None,
        ca: Optional[CertificateAuthority] = None,
        suite: CryptoSuite = DEFAULT_SUITE,
        now: float = 0.0,
        cert_lifetime: int = 10 * 365 * 86400,
        use_shortcuts: bool = True,
    ):
        self.bits = bits
        self.ring = 1 << bits
        self.k = near
        self.seed = seed
        self.transport = transport if transport is not None else InMemoryTransport()
        self.ca = ca
        self.suite = ca.suite if ca is not None else suite
        self.now = now
        self.cert_lifetime = cert_lifetime
        self.use_shortcuts = use_shortcuts
        self.vips = VipAllocator(prefix)
        self.security = {"rejected_frames": 0, "rejected_handshakes": 0, "delivered_frames": 0}
        self.last_frame: Optional[Frame] = None
        self._nodes: Dict[int, OverlayNode] = {}
        self._live: Set[int] = set()
        self._bootstraps: List[int] = []
        self._channels: Dict[Tuple[int, int], SecureChannel] = {}
        self._outcomes: Dict[int, object] = {}
        self._frame_seq = 0
        self._handshakes = 0
        self._rng = random.Random(f"{seed}:shortcuts")
        self._lock = threading.RLock()

    # membership

    def allocate_vip(self) -> str:
        return self.vips.allocate()

    def live_ids(self) -> List[int]:
        return sorted(self._live)

    def is_live(self, node_id: int) -> bool:
        return node_id in self._live

    def node(self, node_id: int) -> OverlayNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise OverlayError(f"unknown node {node_id:x}") from None

    def table(self, node_id: int) -> RoutingTable:
        return self.node(node_id).table

    def join(
        self,
        newcomer: NodeDescriptor,
        bootstraps: Sequence[int] = (),
        credentials: Optional[Credentials] = None,
    ) -> RoutingTable:
        if not 0 <= newcomer.id < self.ring:
            raise JoinError(f"node id {newcomer.id:x} outside a {self.bits}-bit ring")
        if newcomer.id in self._live:
            raise JoinError(f"node {newcomer.id:x} is already a member")
        if not self.vips.contains(newcomer.vip):
            raise JoinError(f"vip {newcomer.vip} outside {self.vips.network}")
        if any(self._nodes[x].descriptor.vip == newcomer.vip for x in self._live):
            raise JoinError(f"vip {newcomer.vip} already in use")

        boot: Optional[int] = None
        if self._live:
            boot = next((b for b in bootstraps if b in self._live), None)
            if boot is None:
                raise JoinError(f"no live bootstrap among {len(bootstraps)} given")
            closest = self.lookup(boot, newcomer.id)

        if credentials is None and self.ca is not None:
            identity = generate_identity(newcomer.id, f"{self.seed}:identity", self.suite)
            credentials = self.ca.issue(identity, int(self.now) + self.cert_lifetime)

        node = OverlayNode(newcomer, RoutingTable(newcomer.id, self.bits), credentials)
        self._nodes[newcomer.id] = node
        self._live.add(newcomer.id)
        if not self._bootstraps:
            self._bootstraps.append(newcomer.id)

        if boot is not None:
            candidates = {closest, *self._nodes[closest].table.near()}
            self._set_near(newcomer.id, candidates)
            for peer in node.table.near():
                self._offer(peer, newcomer.id)
            self._fill_shortcuts(newcomer.id)
            self._pull_records(newcomer.id)

        self._put(newcomer.vip, newcomer.id, via=newcomer.id)
        self.transport.connect(newcomer.id, self._make_handler(newcomer.id))
        logger.debug(f"node {node_hex(newcomer.id, self.bits)} joined ({len(self._live)} live)")
        return node.table

    def leave(self, node_id: int) -> None:
        """Graceful departure: hand registry records over and unlink from neighbors"""
        node = self.node(node_id)
        if node_id not in self._live:
            return
        self._live.discard(node_id)
        heirs = [p for p in node.table.near() if p in self._live]
        for heir in heirs:
            for key, records in node.store.items():
                self._nodes[heir].store.setdefault(key, {}).update(records)
            t = self._nodes[heir].table
            t.near_successors = [e for e in t.near_successors if e != node_id]
            t.near_predecessors = [e for e in t.near_predecessors if e != node_id]
        self.transport.disconnect(node_id)

    def fail(self, node_id: int) -> None:
        """Crash without notice; neighbors find out at the next stabilize"""
        self.node(node_id)
        self._live.discard(node_id)
        self.transport.disconnect(node_id)

    # near-list maintenance

    def _select_near(self, owner: int, candidates: Iterable[int]) -> Tuple[List[int], List[int]]:
        """k closest candidates on each side of owner

        Each list is ordered by distance measured in its own direction, so the
        first successor is always the immediate one even past half the ring.
        """
        cands = {c for c in candidates if c != owner and c in self._live}
        succ = sorted(cands, key=lambda c: (clockwise(owner, c, self.bits), c))[: self.k]
        pred = sorted(cands, key=lambda c: (clockwise(c, owner, self.bits), c))[: self.k]
        return succ, pred

    def _set_near(self, owner: int, candidates: Iterable[int]) -> bool:
        table = self._nodes[owner].table
        succ, pred = self._select_near(owner, candidates)
        changed = succ != table.near_successors or pred != table.near_predecessors
        table.near_successors, table.near_predecessors = succ, pred
        if changed:
            near = set(succ) | set(pred)
            table.shortcuts = [s for s in table.shortcuts if s not in near]
        return changed

    def _offer(self, peer: int, candidate: int) -> bool:
        """k-smallest insertion of candidate into peer's near lists"""
        table = self._nodes[peer].table
        return self._set_near(peer, table.near_successors + table.near_predecessors + [candidate])

    def _walk(self, owner: int, start: int, successors: bool) -> List[int]:
        """Follow neighbor pointers back toward owner while they land strictly closer"""
        visited: List[int] = []
        current = start
        for _ in range(len(self._live)):
            t = self._nodes[current].table
            back = t.near_predecessors if successors else t.near_successors
            if successors:
                span = clockwise(owner, current, self.bits)
                inside = [p for p in back if p in self._live and p != owner and clockwise(owner, p, self.bits) < span]
                key = lambda p: clockwise(owner, p, self.bits)
            else:
                span = clockwise(current, owner, self.bits)
                inside = [p for p in back if p in self._live and p != owner and clockwise(p, owner, self.bits) < span]
                key = lambda p: clockwise(p, owner, self.bits)
            if not inside:
                break
            current = min(inside, key=key)
            visited.append(current)
        return visited

    def _repair_near(self, owner: int) -> bool:
        table = self._nodes[owner].table
        candidates = set(table.entries())
        for peer in list(candidates):
            candidates.update(self._nodes[peer].table.entries())
        candidates = {c for c in candidates if c in self._live and c != owner}
        if not candidates:
            return False
        succ, pred = self._select_near(owner, candidates)
        candidates.update(self._walk(owner, succ[0], successors=True))
        candidates.update(self._walk(owner, pred[0], successors=False))
        changed = self._set_near(owner, candidates)
        for peer in table.near():
            changed = self._offer(peer, owner) or changed
        return changed

    def _bootstrap_for(self, node_id: int) -> Optional[int]:
        for b in self._bootstraps:
            if b != node_id and b in self._live and self._nodes[b].table.entries():
                return b
        for b in sorted(self._live):
            if b != node_id and self._nodes[b].table.entries():
                return b
        return None

    def _rejoin(self, node_id: int) -> bool:
        boot = self._bootstrap_for(node_id)
        if boot is None:
            return False
        closest = self.lookup(boot, node_id)
        changed = self._set_near(node_id, {closest, *self._nodes[closest].table.near()} | set(self._nodes[node_id].table.near()))
        for peer in self._nodes[node_id].table.near():
            self._offer(peer, node_id)
        return changed

    def _off_ring(self, live: List[int]) -> List[int]:
        """Live nodes not on the successor cycle through the first live node"""
        start = live[0]
        seen = {start}
        current = start
        for _ in range(len(live)):
            succ = self._nodes[current].table.near_successors
            if not succ:
                break
            current = succ[0]
            if current in seen:
                break
            seen.add(current)
        return [x for x in live if x not in seen]

    def stabilize(self) -> int:
        """Repair after departures; returns the number of repair rounds used"""
        live = sorted(self._live)
        if not live:
            return 0
        for x in live:
            t = self._nodes[x].table
            t.near_successors = [e for e in t.near_successors if e in self._live]
            t.near_predecessors = [e for e in t.near_predecessors if e in self._live]
            t.shortcuts = [e for e in t.shortcuts if e in self._live]
        if len(live) > 1:
            for x in live:
                if not self._nodes[x].table.entries():
                    self._rejoin(x)

        cap = max(64, len(live))
        rounds = 0
        changed = len(live) > 1
        while changed and rounds < cap:
            rounds += 1
            changed = False
            for x in live:
                changed = self._repair_near(x) or changed
            if not changed:
                for x in self._off_ring(live):
                    changed = self._rejoin(x) or changed
        if changed:
            logger.warning(f"stabilize stopped after {rounds} rounds without reaching a fixpoint")

        for x in live:
            self._fill_shortcuts(x)
        self._refresh_registry(live)
        logger.debug(f"stabilized {len(live)} nodes in {rounds} rounds")
        return rounds

    # shortcuts

    def _fill_shortcuts(self, node_id: int) -> None:
        node = self._nodes[node_id]
        table = node.table
        n = len(self._live)
        target = shortcut_target(n) if self.use_shortcuts else 0
        near = set(table.near())
        keep = [s for s in table.shortcuts if s in self._live and s not in near][:target]
        if keep == table.shortcuts and node.filled_for == n:
            return
        my_nat = node.descriptor.nat
        half = self.ring // 2
        attempts = 0
        while len(keep) < target and attempts < 4 * target + 4:
            attempts += 1
            # harmonic distance: log-uniform between one node spacing and half the ring
            x = math.exp(math.log(n) * (self._rng.random() - 1.0))
            offset = max(1, int(x * half))
            direction = 1 if self._rng.random() < 0.5 else -1
            key = (node_id + direction * offset) % self.ring
            candidate = self.lookup(node_id, key)
            if candidate == node_id or candidate in near or candidate in keep:
                continue
            if link_allowed(my_nat, self._nodes[candidate].descriptor.nat) is not LinkKind.DIRECT:
                continue
            keep.append(candidate)
        table.shortcuts = keep
        node.filled_for = n

    # lookup and registry

    def lookup(self, start: int, key: int) -> int:
        """Greedy walk to the live node closest to key (ties to the smaller id)"""
        if start not in self._live:
            raise OverlayError(f"lookup from departed node {start:x}")
        current = start
        for _ in range(len(self._live) + 1):
            entries = [e for e in self._nodes[current].table.entries() if e in self._live]
            if not entries:
                break
            best = min(entries, key=lambda e: (ring_distance(e, key, self.bits), e))
            if ring_distance(best, key, self.bits) < ring_distance(current, key, self.bits):
                current = best
                continue
            tie = min(
                (e for e in entries if ring_distance(e, key, self.bits) == ring_distance(current, key, self.bits)),
                default=None,
            )
            if tie is not None and tie < current:
                current = tie
                continue
            break
        return current

    def _replicas(self, key: int, via: int) -> List[int]:
        owner = self.lookup(via, key)
        return [owner] + [p for p in self._nodes[owner].table.near() if p in self._live]

    def _put(self, vip: str, node_id: int, via: int) -> None:
        key = vip_key(vip, self.bits)
        for holder in self._replicas(key, via):
            self._nodes[holder].store.setdefault(key, {})[vip] = node_id

    def _pull_records(self, newcomer: int) -> None:
        mine = self._nodes[newcomer]
        for peer in mine.table.near():
            for key, records in self._nodes[peer].store.items():
                if (ring_distance(newcomer, key, self.bits), newcomer) < (ring_distance(peer, key, self.bits), peer):
                    mine.store.setdefault(key, {}).update(records)

    def _refresh_registry(self, live: List[int]) -> None:
        # soft state: every live node re-registers its own address
        for x in live:
            self._nodes[x].store = {}
        for x in live:
            self._put(self._nodes[x].descriptor.vip, x, via=x)

    def resolve_virtual_address(self, vip: str, via: Optional[int] = None) -> int:
        if not self._live:
            raise NoRouteToHost(f"{vip}: overlay is empty")
        if via is None or via not in self._live:
            boot = self._bootstrap_for(-1)
            via = boot if boot is not None else min(self._live)
        key = vip_key(vip, self.bits)
        for holder in self._replicas(key, via):
            node_id = self._nodes[holder].store.get(key, {}).get(vip)
            if node_id is not None and node_id in self._live:
                return node_id
        raise NoRouteToHost(f"no route to host {vip}")

    # links

    def link_kind(self, a: int, b: int) -> LinkKind:
        return link_allowed(self._nodes[a].descriptor.nat, self._nodes[b].descriptor.nat)

    def links(self) -> List[Tuple[int, int, LinkKind]]:
        seen: Set[Tuple[int, int]] = set()
        out: List[Tuple[int, int, LinkKind]] = []
        for x in sorted(self._live):
            for y in self._nodes[x].table.entries():
                if y not in self._live:
                    continue
                pair = (min(x, y), max(x, y))
                if pair in seen:
                    continue
                seen.add(pair)
                out.append((pair[0], pair[1], self.link_kind(x, y)))
        return out

    def _relay_for(self, a: int, b: int) -> Optional[int]:
        """Closest live Public node other than a and b, if any"""
        publics = [
            x for x in self._live
            if x not in (a, b) and self._nodes[x].descriptor.nat is NatClass.PUBLIC
        ]
        if not publics:
            return None
        return min(publics, key=lambda x: (ring_distance(x, a, self.bits), x))

    def _ring_step(self, here: int, target: int) -> Optional[int]:
        """Next near neighbor of here on the ring walk toward target"""
        near = [e for e in self._nodes[here].table.near() if e in self._live]
        if target in near:
            return target
        own = ring_distance(here, target, self.bits)
        closer = [e for e in near if ring_distance(e, target, self.bits) < own]
        if not closer:
            return None
        return min(closer, key=lambda e: (ring_distance(e, target, self.bits), e))

    def _carrier(self, here: int, nxt: int) -> Optional[int]:
        """First transport hop of a Relayed link: a Public relay, else the ring"""
        relay = self._relay_for(here, nxt)
        return relay if relay is not None else self._ring_step(here, nxt)

    def _link_usable(self, a: int, b: int) -> bool:
        if self.link_kind(a, b) is LinkKind.DIRECT or self._relay_for(a, b) is not None:
            return True
        current: Optional[int] = a
        for _ in range(len(self._live)):
            current = self._ring_step(current, b)
            if current is None:
                return False
            if current == b:
                return True
        return False

    def _blocked_links(self, live: List[int]) -> Set[Tuple[int, int]]:
        """Table entries whose link cannot carry a frame right now"""
        if any(self._nodes[x].descriptor.nat is NatClass.PUBLIC for x in live):
            return set()
        return {
            (v, e)
            for v in live
            for e in self._nodes[v].table.entries()
            if e in self._live and not self._link_usable(v, e)
        }

    # routing

    def _live_table(self, node_id: int) -> RoutingTable:
        t = self._nodes[node_id].table
        return RoutingTable(
            node_id,
            self.bits,
            [e for e in t.near_successors if e in self._live],
            [e for e in t.near_predecessors if e in self._live],
            [e for e in t.shortcuts if e in self._live],
        )

    def route(self, src: int, dst: int) -> List[int]:
        """Greedy path from src to the node dst, both ends included"""
        if src not in self._live:
            raise OverlayError(f"node {src:x} is not live")
        path = [src]
        current = src
        while current != dst:
            nxt = route_next_hop(self._live_table(current), dst)
            if nxt is None:
                raise NoRouteToHost(f"greedy routing stalled at {current:x} toward {dst:x}")
            if not self._link_usable(current, nxt):
                raise LinkDown(f"no carrier for the relayed link {current:x} -> {nxt:x}")
            path.append(nxt)
            current = nxt
        return path

    # tunnels

    def _channel(self, local: int, remote: int) -> SecureChannel:
        key = (local, remote)
        with self._lock:
            channel = self._channels.get(key)
            if channel is not None:
                return channel
            a = self._nodes[local].credentials
            b = self._nodes[remote].credentials
            if a is None or b is None:
                who = local if a is None else remote
                raise HandshakeRejected(f"node {who:x} holds no certificate")
            if self.ca is None:
                raise HandshakeRejected("overlay has no trust root")
            self._handshakes += 1
            channel = establish_channel(
                a, b, self.ca.public_key, now=self.now,
                salt=self._handshakes.to_bytes(8, "big"), suite=self.suite,
            )
            self._channels[key] = channel
            if local != remote:
                self._channels[(remote, local)] = channel.mirror()
            return channel

    def _make_handler(self, node_id: int):
        def handle(link_src: int, data: bytes) -> None:
            try:
                frame = Frame.model_validate_json(data)
            except ValueError as e:
                logger.warning(f"node {node_id:x} dropped an unparseable frame: {e}")
                with self._lock:
                    self.security["rejected_frames"] += 1
                return
            self._process(node_id, frame)

        return handle

    def _send_frame(self, here: int, nxt: int, frame: Frame) -> None:
        if self.link_kind(here, nxt) is LinkKind.DIRECT:
            self.transport.send(here, nxt, frame.model_dump_json().encode())
            return
        carrier = self._carrier(here, nxt)
        if carrier is None:
            raise LinkDown(f"no carrier for the relayed link {here:x} -> {nxt:x}")
        relayed = frame.model_copy(update={"relay_to": nxt})
        self.transport.send(here, carrier, relayed.model_dump_json().encode())

    def _record(self, frame_id: int, outcome: object) -> None:
        with self._lock:
            if frame_id in self._outcomes:
                self._outcomes[frame_id] = outcome

    def _process(self, here: int, frame: Frame) -> None:
        if frame.relay_to is not None and frame.relay_to != here:
            # relays forward opaque ciphertext and do not count as overlay hops
            try:
                if self._nodes[here].descriptor.nat is NatClass.PUBLIC:
                    carrier: Optional[int] = frame.relay_to
                else:
                    carrier = self._ring_step(here, frame.relay_to)
                if carrier is None:
                    raise LinkDown(f"ring walk toward {frame.relay_to:x} stalled at {here:x}")
                onward = frame.model_copy(update={"relay_to": None}) if carrier == frame.relay_to else frame
                self.transport.send(here, carrier, onward.model_dump_json().encode())
            except LinkDown as e:
                self._record(frame.frame_id, e)
            return
        frame = frame.model_copy(update={"relay_to": None, "path": frame.path + [here]})
        if here == frame.dst:
            self._deliver(here, frame)
            return
        try:
            nxt = route_next_hop(self._live_table(here), frame.dst)
            if nxt is None:
                raise NoRouteToHost(f"greedy routing stalled at {here:x} toward {frame.dst:x}")
            self._send_frame(here, nxt, frame)
        except (IsolatedNodeError, NoRouteToHost, LinkDown) as e:
            self._record(frame.frame_id, e)

    def _deliver(self, here: int, frame: Frame) -> None:
        with self._lock:
            channel = self._channels.get((here, frame.src))
            try:
                if channel is None:
                    raise HandshakeRejected(f"no channel from {frame.src:x}")
                plaintext = channel.open(base64.b64decode(frame.ciphertext, validate=True))
            except (ChannelError, HandshakeRejected, binascii.Error, ValueError) as e:
                self.security["rejected_frames"] += 1
                logger.debug(f"node {here:x} rejected frame {frame.frame_id}: {e}")
                if frame.frame_id in self._outcomes:
                    self._outcomes[frame.frame_id] = e if isinstance(e, ChannelError) else HandshakeRejected(str(e))
                return
            self.security["delivered_frames"] += 1
            self._nodes[here].inbox.append((frame.src, plaintext))
            relayed = sum(
                1 for a, b in zip(frame.path, frame.path[1:]) if self.link_kind(a, b) is LinkKind.RELAYED
            )
            receipt = DeliveryReceipt(
                hops=len(frame.path) - 1, path=frame.path, relayed_links=relayed, payload_size=len(plaintext)
            )
            if frame.frame_id in self._outcomes:
                self._outcomes[frame.frame_id] = receipt

    def _launch(self, entry: int, frame: Frame) -> object:
        with self._lock:
            self._outcomes[frame.frame_id] = None
        self._process(entry, frame)
        self.transport.flush()
        with self._lock:
            return self._outcomes.pop(frame.frame_id)

    def _next_frame_id(self) -> int:
        with self._lock:
            self._frame_seq += 1
            return self._frame_seq

    def tunnel_send(self, src: int, dst_vip: str, payload: bytes) -> DeliveryReceipt:
        if src not in self._live:
            raise OverlayError(f"node {src:x} is not live")
        dst = self.resolve_virtual_address(dst_vip, via=src)
        channel = self._channel(src, dst)
        ciphertext = channel.seal(payload)
        frame = Frame(
            frame_id=self._next_frame_id(), src=src, dst=dst,
            ciphertext=base64.b64encode(ciphertext).decode("ascii"),
        )
        self.last_frame = frame
        outcome = self._launch(src, frame)
        if isinstance(outcome, DeliveryReceipt):
            return outcome
        if isinstance(outcome, Exception):
            raise outcome
        raise NoRouteToHost(f"frame to {dst_vip} was lost")

    def inject_frame(
        self,
        claimed_src: int,
        dst_vip: str,
        ciphertext: bytes,
        entry: Optional[int] = None,
        credentials: Optional[Credentials] = None,
    ) -> bool:
        """Push a frame from outside the membership; True only if it was delivered"""
        dst = self.resolve_virtual_address(dst_vip)
        if credentials is not None:
            target = self._nodes[dst].credentials
            try:
                if target is None or self.ca is None:
                    raise HandshakeRejected("destination cannot authenticate")
                establish_channel(credentials, target, self.ca.public_key, now=self.now, suite=self.suite)
            except HandshakeRejected:
                with self._lock:
                    self.security["rejected_handshakes"] += 1
        if entry is None or entry not in self._live:
            entry = self.lookup(min(self._live), claimed_src % self.ring)
        frame = Frame(
            frame_id=self._next_frame_id(), src=claimed_src, dst=dst,
            ciphertext=base64.b64encode(ciphertext).decode("ascii"),
        )
        return isinstance(self._launch(entry, frame), DeliveryReceipt)

    def inbox(self, node_id: int) -> List[Tuple[int, bytes]]:
        return list(self.node(node_id).inbox)

    # statistics

    def _stats_python(self, live: List[int]) -> Tuple[int, List[int]]:
        tables = {v: self._live_table(v) for v in live}
        blocked = self._blocked_links(live)
        delivered = 0
        hops: List[int] = []
        for d in live:
            memo: Dict[int, Optional[int]] = {d: 0}
            for s in live:
                if s == d:
                    continue
                path: List[int] = []
                current: Optional[int] = s
                while current is not None and current not in memo:
                    path.append(current)
                    try:
                        nxt = route_next_hop(tables[current], d)
                    except IsolatedNodeError:
                        nxt = None
                    current = None if (current, nxt) in blocked else nxt
                base = memo[current] if current is not None else None
                for node in reversed(path):
                    base = None if base is None else base + 1
                    memo[node] = base
                if memo[s] is not None:
                    delivered += 1
                    hops.append(memo[s])
        return delivered, hops

    def _stats_numpy(self, live: List[int]) -> Tuple[int, List[int]]:
        n = len(live)
        index = {v: i for i, v in enumerate(live)}
        ids = np.array(live, dtype=np.int64)
        ring = np.int64(self.ring)
        rows = [[index[e] for e in self._nodes[v].table.entries() if e in index] for v in live]
        degree = max(1, max(len(r) for r in rows))
        # pad with the owner itself: never strictly closer than the owner
        entries = np.array([r + [i] * (degree - len(r)) for i, r in enumerate(rows)], dtype=np.int64)
        entry_ids = ids[entries]
        blocked = np.zeros(entries.shape, dtype=bool)
        for v, e in self._blocked_links(live):
            blocked[index[v], rows[index[v]].index(index[e])] = True
        order = np.arange(n)
        big = np.iinfo(np.int64).max
        delivered = 0
        hops: List[int] = []
        for d in range(n):
            diff = (entry_ids - ids[d]) % ring
            dist = np.minimum(diff, ring - diff)
            own = (ids - ids[d]) % ring
            own = np.minimum(own, ring - own)
            best = dist.min(axis=1)
            tied = np.where(dist == best[:, None], entry_ids, big)
            col = tied.argmin(axis=1)
            nxt = entries[order, col]
            nxt = np.where((best < own) & ~blocked[order, col], nxt, -1)
            nxt[d] = d
            current = order.copy()
            count = np.zeros(n, dtype=np.int64)
            ok = np.ones(n, dtype=bool)
            active = current != d
            for _ in range(n):
                if not active.any():
                    break
                step = nxt[current]
                stuck = active & (step < 0)
                ok &= ~stuck
                active &= ~stuck
                current = np.where(active, step, current)
                count += active
                active &= current != d
            mask = ok & (order != d)
            delivered += int(mask.sum())
            hops.extend(int(h) for h in count[mask])
        return delivered, hops

    def all_pairs_stats(self, vectorized: Optional[bool] = None) -> Dict[str, float]:
        """Greedy reachability and hop counts over every ordered pair of live nodes

        A pair counts only if every link on its greedy path can carry a frame,
        the same rule route and tunnel_send apply.
        """
        live = sorted(self._live)
        pairs = len(live) * (len(live) - 1)
        if vectorized is None:
            vectorized = self.bits <= NUMPY_MAX_BITS and len(live) > 32
        if pairs == 0:
            delivered, hops = 0, []
        elif vectorized:
            delivered, hops = self._stats_numpy(live)
        else:
            delivered, hops = self._stats_python(live)
        return {
            "nodes": len(live),
            "pairs": pairs,
            "delivered": delivered,
            "delivery_rate": delivered / pairs if pairs else 1.0,
            "mean_hops": float(np.mean(hops)) if hops else 0.0,
            "max_hops": int(max(hops)) if hops else 0,
        }

    def sample_stats(self, pairs: int, rng: random.Random) -> Dict[str, float]:
        live = sorted(self._live)
        hops: List[int] = []
        delivered = 0
        for _ in range(pairs):
            src, dst = rng.choice(live), rng.choice(live)
            try:
                hops.append(len(self.route(src, dst)) - 1)
                delivered += 1
            except OverlayError:
                pass
        return {
            "pairs": pairs,
            "delivered": delivered,
            "delivery_rate": delivered / pairs if pairs else 1.0,
            "mean_hops": float(np.mean(hops)) if hops else 0.0,
            "max_hops": int(max(hops)) if hops else 0,
        }

    def topology_dump(self) -> str:
        lines = []
        for x in sorted(self._live):
            node = self._nodes[x]
            record = {
                "id": node_hex(x, self.bits),
                "vip": node.descriptor.vip,
                "site": node.descriptor.site,
                "nat": node.descriptor.nat.value,
                "near": [node_hex(e, self.bits) for e in node.table.near()],
                "shortcuts": [node_hex(e, self.bits) for e in node.table.shortcuts],
            }
            lines.append(json.dumps(record) + "\n")
        return "".join(lines)

    def close(self) -> None:
        self.transport.close()
