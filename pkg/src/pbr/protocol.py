"""Multi-vehicle broadcast protocol: message building, wire format, ingestion.

Each broadcast carries ``K+1`` piggybacked timestamp deltas:

* a self entry with the sender's previous departure interval
  ``s_D(m-1) - s_D(m-2)``;
* one entry per peer heard since the sender's previous broadcast, holding
  that peer message's arrival time measured from the sender's previous
  departure, ``s_A(n) - s_D(m-1)``.

A receiver can rebuild every offset-free difference its range estimator needs
from these, so no absolute timestamps are ever exchanged. After a lost message
it re-anchors the remote timestamps; windows never straddle such anchors.

Wire layout (little-endian, no padding)::

    magic "PBR1" | version u8 | vehicle_id u32 | seq u32 | count u8 | entries
    entry: peer_id u32 | u16 (bit 15 bootstrap flag, bits 0-14 compressed delta)
           [+ u48 full delta when the bootstrap flag is set; low u16 bits zero]
"""

from __future__ import annotations

import bisect
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .codec import CompressedDelta, StreamDecoder, compress
from .estimator import (
    DegenerateWindowError,
    EstimatorConfig,
    RangeEstimate,
    build_window,
    robust_fit,
)
from .sim import ExchangeRecord, NetworkLog

log = logging.getLogger(__name__)

MAGIC = b"PBR1"
VERSION = 1
COMPRESSED_BITS = 15
FULL_BITS = 48
BOOTSTRAP_ENTRIES = 2

_HEADER = struct.Struct("<4sBIIB")
_ENTRY = struct.Struct("<IH")
_BOOT_FLAG = 0x8000
HEADER_SIZE = _HEADER.size  # 14
ENTRY_SIZE = _ENTRY.size  # 6


class WireError(ValueError):
    pass


class BadMagicError(WireError):
    pass


class TruncatedError(WireError):
    pass


class VersionMismatchError(WireError):
    pass


class DuplicatePeerError(WireError):
    pass


class NoSelfEntryError(WireError):
    pass


class MalformedEntryError(WireError):
    pass


@dataclass(frozen=True)
class PiggybackEntry:
    peer_id: int
    value: int
    bootstrap: bool = False

    def __post_init__(self):
        if not 0 <= self.peer_id < 2**32:
            raise ValueError("peer_id must fit in 32 bits")
        bits = FULL_BITS if self.bootstrap else COMPRESSED_BITS
        if not 0 <= self.value < 2**bits:
            raise ValueError(f"entry value does not fit in {bits} bits")


@dataclass(frozen=True)
class BroadcastMessage:
    vehicle_id: int
    seq: int
    entries: tuple[PiggybackEntry, ...]
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        _validate(self)


def _validate(msg: BroadcastMessage) -> None:
    if not 0 <= msg.vehicle_id < 2**32 or not 0 <= msg.seq < 2**32:
        raise ValueError("vehicle_id and seq must fit in 32 bits")
    if not msg.entries or msg.entries[0].peer_id != msg.vehicle_id:
        raise NoSelfEntryError("no self entry")
    if len(msg.entries) > 255:
        raise ValueError("at most 255 entries per message")
    ids = [e.peer_id for e in msg.entries]
    if len(set(ids)) != len(ids):
        raise DuplicatePeerError("duplicate peer_id")


def encode(msg: BroadcastMessage) -> bytes:
    out = bytearray(_HEADER.pack(MAGIC, msg.version, msg.vehicle_id, msg.seq, len(msg.entries)))
    for e in msg.entries:
        if e.bootstrap:
            out += _ENTRY.pack(e.peer_id, _BOOT_FLAG)
            out += e.value.to_bytes(6, "little")
        else:
            out += _ENTRY.pack(e.peer_id, e.value)
    return bytes(out)


def decode(data: bytes) -> BroadcastMessage:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("bad magic")
    if len(data) < HEADER_SIZE:
        raise TruncatedError("truncated header")
    _, version, vehicle_id, seq, count = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: {version}")
    pos = HEADER_SIZE
    entries = []
    seen = set()
    for _ in range(count):
        if len(data) < pos + ENTRY_SIZE:
            raise TruncatedError("truncated entry")
        peer_id, word = _ENTRY.unpack_from(data, pos)
        pos += ENTRY_SIZE
        if word & _BOOT_FLAG:
            if word & ~_BOOT_FLAG:
                raise MalformedEntryError("bootstrap entry with nonzero compressed bits")
            if len(data) < pos + 6:
                raise TruncatedError("truncated full delta")
            value = int.from_bytes(data[pos : pos + 6], "little")
            pos += 6
            entry = PiggybackEntry(peer_id, value, True)
        else:
            entry = PiggybackEntry(peer_id, word)
        if peer_id in seen:
            raise DuplicatePeerError(f"duplicate peer_id {peer_id}")
        seen.add(peer_id)
        entries.append(entry)
    if pos != len(data):
        raise WireError(f"{len(data) - pos} trailing bytes")
    if not entries or entries[0].peer_id != vehicle_id:
        raise NoSelfEntryError("no self entry")
    return BroadcastMessage(vehicle_id, seq, tuple(entries), version)


def _entry(peer_id: int, delta: int, full: bool) -> PiggybackEntry:
    if full:
        return PiggybackEntry(peer_id, delta, True)
    return PiggybackEntry(peer_id, compress(delta, COMPRESSED_BITS).value)


@dataclass
class _Record:
    n: int
    t_D: int
    s_A: int
    t_A: int
    m: int
    frame: int


@dataclass
class PeerSession:
    """Receiver-side state for one remote vehicle."""

    peer_id: int
    dep_decoder: StreamDecoder = field(default_factory=lambda: StreamDecoder(COMPRESSED_BITS))
    ack_decoder: StreamDecoder = field(default_factory=lambda: StreamDecoder(COMPRESSED_BITS))
    last_seq: int = -1
    arrivals: dict[int, int] = field(default_factory=dict)  # m -> local arrival tick
    sd: dict[int, tuple[int, int]] = field(default_factory=dict)  # m -> (frame, remote departure)
    records: dict[int, _Record] = field(default_factory=dict)  # local n -> record
    frame: int = 0
    latest: Optional[RangeEstimate] = None
    estimates: int = 0

    @property
    def resyncs(self) -> int:
        return self.dep_decoder.resyncs + self.ack_decoder.resyncs


@dataclass
class VehicleState:
    """Protocol state of one vehicle, both as sender and as receiver."""

    vehicle_id: int
    estimator: EstimatorConfig = EstimatorConfig()
    seq: int = 0
    departures: list[int] = field(default_factory=list)  # index = own seq
    heard: dict[int, int] = field(default_factory=dict)  # peer -> arrival since last broadcast
    sent_deltas: dict[int, int] = field(default_factory=lambda: defaultdict(int))
    sessions: dict[int, PeerSession] = field(default_factory=dict)


def build_message(state: VehicleState, now: int) -> BroadcastMessage:
    """Build the next broadcast departing at local tick ``now``.

    The departure time of this very message is not included; it is reported
    by the next one.
    """
    m = state.seq
    me = state.vehicle_id
    if m >= 2:
        delta = state.departures[m - 1] - state.departures[m - 2]
        entries = [_entry(me, delta, state.sent_deltas[me] < BOOTSTRAP_ENTRIES)]
        state.sent_deltas[me] += 1
    else:
        entries = [PiggybackEntry(me, 0, True)]
    if m >= 1:
        prev_dep = state.departures[m - 1]
        for peer in sorted(state.heard):
            delta = state.heard[peer] - prev_dep
            if delta <= 0:
                continue
            entries.append(_entry(peer, delta, state.sent_deltas[peer] < BOOTSTRAP_ENTRIES))
            state.sent_deltas[peer] += 1
    state.departures.append(now)
    state.seq += 1
    state.heard.clear()
    return BroadcastMessage(me, m, tuple(entries))


def _push(decoder: StreamDecoder, entry: PiggybackEntry, dt: Optional[int], tag) -> list:
    if entry.bootstrap:
        return decoder.push_full(entry.value, dt, tag)
    if dt is None or dt <= 0:
        return []
    return decoder.push(CompressedDelta(entry.value, COMPRESSED_BITS), dt, tag)


def ingest(state: VehicleState, msg: BroadcastMessage, arrival: int) -> list[tuple[int, RangeEstimate]]:
    """Process a received broadcast stamped ``arrival`` on the local clock.

    Returns the fresh range estimate to the sender, if a full window exists.
    Stale or duplicate sequence numbers are ignored.
    """
    sender = msg.vehicle_id
    if sender == state.vehicle_id:
        return []
    sess = state.sessions.get(sender)
    if sess is None:
        sess = state.sessions[sender] = PeerSession(sender)
    if msg.seq <= sess.last_seq:
        return []
    state.heard[sender] = arrival
    m = msg.seq
    sess.last_seq = m
    sess.arrivals[m] = arrival
    resyncs_before = sess.resyncs

    deps: dict[int, int] = {}
    acks: dict[int, tuple[int, int]] = {}
    if m >= 2:
        a1, a2 = sess.arrivals.get(m - 1), sess.arrivals.get(m - 2)
        dt = a1 - a2 if a1 is not None and a2 is not None else None
        for tag, delta in _push(sess.dep_decoder, msg.entries[0], dt, m):
            deps[tag] = delta
    mine = [e for e in msg.entries[1:] if e.peer_id == state.vehicle_id]
    if mine and m >= 1:
        k = bisect.bisect_left(state.departures, arrival) - 1
        if k >= 0:
            prev_arrival = sess.arrivals.get(m - 1)
            dt = state.departures[k] - prev_arrival if prev_arrival is not None else None
            for (tm, n), delta in _push(sess.ack_decoder, mine[0], dt, (m, k)):
                acks[tm] = (n, delta)
    if sess.resyncs > resyncs_before:
        log.warning("peer %d: timestamp stream resync at seq %d", sender, m)

    fresh = []
    for tm in sorted(set(deps) | set(acks)):
        if tm in deps:
            base = sess.sd.get(tm - 2)
            if base is not None and (tm - 1) not in sess.sd:
                sess.sd[tm - 1] = (base[0], base[1] + deps[tm])
        if tm in acks and tm in sess.arrivals:
            n, delta = acks[tm]
            if (tm - 1) not in sess.sd:
                sess.frame += 1
                sess.sd[tm - 1] = (sess.frame, 0)
            frame, sd_prev = sess.sd[tm - 1]
            sess.records[n] = _Record(n, state.departures[n], sd_prev + delta, sess.arrivals[tm], tm, frame)
            fresh.append(n)

    out = []
    for n in fresh:
        est = _estimate(state, sess, n)
        if est is not None:
            sess.latest = est
            sess.estimates += 1
            out.append((sender, est))
    _prune(sess, m, state.estimator.w)
    return out


def _estimate(state: VehicleState, sess: PeerSession, n: int) -> Optional[RangeEstimate]:
    w = state.estimator.w
    recs = []
    frame = sess.records[n].frame
    for i in range(n - w, n + 1):
        r = sess.records.get(i)
        if r is None or r.frame != frame:
            return None
        if i < n:
            sd = sess.sd.get(r.m)
            if sd is None or sd[0] != frame:
                return None
            s_D = sd[1]
        else:
            s_D = None
        recs.append(ExchangeRecord(i, r.t_D, r.s_A, s_D, r.t_A))
    try:
        return robust_fit(build_window(recs), state.estimator)
    except DegenerateWindowError:
        return None


def _prune(sess: PeerSession, m: int, w: int) -> None:
    horizon = m - 2 * (w + 4)
    for d in (sess.arrivals, sess.sd):
        for key in [k for k in d if k < horizon]:
            del d[key]
    stale = [n for n, r in sess.records.items() if r.m < horizon]
    for n in stale:
        del sess.records[n]


@dataclass
class ProtocolRun:
    broadcasts: int
    bytes_sent: int
    estimates: dict[tuple[int, int], list[RangeEstimate]]
    states: list[VehicleState]


def run_protocol(log_: NetworkLog, estimator: EstimatorConfig = EstimatorConfig()) -> ProtocolRun:
    """Replay a simulated network through build/encode/decode/ingest.

    Vehicle ids are the vehicle indices of the scenario.
    """
    nveh = len(log_.config.vehicles)
    states = [VehicleState(v, estimator) for v in range(nveh)]
    estimates: dict[tuple[int, int], list[RangeEstimate]] = {
        (a, b): [] for a in range(nveh) for b in range(nveh) if a != b
    }
    count = 0
    nbytes = 0
    for b in log_.broadcasts:
        data = encode(build_message(states[b.sender], b.local_tick))
        count += 1
        nbytes += len(data)
        for r, tick in b.arrivals.items():
            if tick is None:
                continue
            for peer, est in ingest(states[r], decode(data), tick):
                estimates[(r, peer)].append(est)
    return ProtocolRun(count, nbytes, estimates, states)


def message_size(entries: Iterable[PiggybackEntry]) -> int:
    return HEADER_SIZE + sum(ENTRY_SIZE + (6 if e.bootstrap else 0) for e in entries)
