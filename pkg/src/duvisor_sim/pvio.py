"""Para-virtualised I/O: split virtqueues, console/net/blk backends, the
packet source, and the guest-side driver stub that posts and reaps buffers.

Backends touch guest buffers through the VM's stage-2 table plus PMC, so
their writes are confined exactly like guest accesses.
"""

from __future__ import annotations

import hashlib
import json
import random
import zlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from duvisor_sim.mmu.pmc import Access
from duvisor_sim.mmu.translate import Fault, FaultKind, translate_gpa

U16 = 0x10000
DEFAULT_RING = 256
SECTOR = 512

# MMIO register offsets inside a device window
REG_STATUS = 0x0
REG_DATA = 0x4
REG_QUEUE_NOTIFY = 0x50
REG_INT_STATUS = 0x60
REG_INT_ACK = 0x64
WINDOW_SIZE = 0x1000


class RingError(RuntimeError):
    pass


class Descriptor(NamedTuple):
    gpa: int
    length: int
    device_writes: bool
    sector: int = 0


class VirtQueue:
    """Split ring: descriptor table, avail ring (guest -> device) and used
    ring (device -> guest), with free-running 16-bit indices."""

    def __init__(self, size: int = DEFAULT_RING):
        if size <= 0 or size & (size - 1):
            raise ValueError(f"ring size {size} is not a power of two")
        self.size = size
        self.desc: list[Descriptor | None] = [None] * size
        self.free_ids = deque(range(size))
        self.avail_ring = [0] * size
        self.avail_idx = 0
        self.used_ring: list[tuple[int, int]] = [(0, 0)] * size
        self.used_idx = 0
        self.last_avail = 0  # backend's view
        self.last_used = 0   # guest's view
        self.kicked = False
        self.consumed = 0

    def __len__(self) -> int:
        return (self.avail_idx - self.last_avail) % U16

    # guest side
    def post(self, d: Descriptor) -> int:
        if not self.free_ids:
            raise RingError("virtqueue full")
        i = self.free_ids.popleft()
        self.desc[i] = d
        self.avail_ring[self.avail_idx % self.size] = i
        self.avail_idx = (self.avail_idx + 1) % U16
        return i

    def reap(self) -> list[tuple[int, Descriptor, int]]:
        out = []
        while self.last_used != self.used_idx:
            i, n = self.used_ring[self.last_used % self.size]
            d = self.desc[i]
            self.desc[i] = None
            self.free_ids.append(i)
            out.append((i, d, n))
            self.last_used = (self.last_used + 1) % U16
        return out

    # device side
    def peek(self) -> tuple[int, Descriptor] | None:
        if self.last_avail == self.avail_idx:
            return None
        i = self.avail_ring[self.last_avail % self.size]
        return i, self.desc[i]

    def pop(self) -> tuple[int, Descriptor] | None:
        item = self.peek()
        if item is not None:
            self.last_avail = (self.last_avail + 1) % U16
        return item

    def push_used(self, i: int, written: int) -> None:
        outstanding = (self.last_avail - self.used_idx) % U16
        if outstanding == 0:
            raise RingError("used would overtake avail")
        self.used_ring[self.used_idx % self.size] = (i, written)
        self.used_idx = (self.used_idx + 1) % U16
        self.consumed += 1


# -- packet source -------------------------------------------------------------


class Packet(NamedTuple):
    cycle: int
    length: int
    seed: int

    def payload(self) -> bytes:
        return hashlib.shake_128(self.seed.to_bytes(8, "little")).digest(self.length)

    @property
    def checksum(self) -> int:
        return zlib.crc32(self.payload())


def load_packet_schedule(path: str | Path) -> list[Packet]:
    """``{"format": "duvisor-packets/1", "packets": [{cycle, length, seed}, ...]}``"""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "duvisor-packets/1":
        raise ValueError(f"{path}: not a duvisor-packets/1 file")
    return [Packet(int(p["cycle"]), int(p["length"]), int(p["seed"])) for p in doc["packets"]]


def generate_schedule(n: int, seed: int, spacing: int = 16, min_len: int = 64,
                      max_len: int = 1514, start: int = 0, jitter: bool = False) -> list[Packet]:
    rng = random.Random(seed)
    out, t = [], start
    for _ in range(n):
        t += rng.randint(1, 2 * spacing) if jitter else spacing
        out.append(Packet(t, rng.randint(min_len, max_len), rng.getrandbits(32)))
    return out


class PacketSource:
    def __init__(self, schedule: list[Packet]):
        self.schedule = sorted(schedule, key=lambda p: p.cycle)
        self.pos = 0

    def arrivals(self, now: int) -> list[Packet]:
        start = self.pos
        while self.pos < len(self.schedule) and self.schedule[self.pos].cycle <= now:
            self.pos += 1
        return self.schedule[start : self.pos]

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.schedule)


# -- devices ---------------------------------------------------------------------


@dataclass
class DeviceStats:
    rx_delivered: int = 0
    rx_dropped_overflow: int = 0
    rx_dropped_too_big: int = 0
    tx_consumed: int = 0
    blk_done: int = 0
    notifies: int = 0
    kicks: int = 0
    spurious_kicks: int = 0
    injected_checksums: list[int] = field(default_factory=list)


class BackendDevice:
    kind = "none"

    def __init__(self, name: str, window: int, irq: int = 0, n_queues: int = 0,
                 ring_size: int = DEFAULT_RING, target_vcpu: int = 0):
        self.name = name
        self.window = window
        self.irq = irq
        self.queues = [VirtQueue(ring_size) for _ in range(n_queues)]
        self.target_vcpu = target_vcpu
        self.stats = DeviceStats()
        self.int_status = 0
        # set by the hypervisor: callable(device) performing the guest notification
        self.notifier = None
        self.io_thread = None

    def contains(self, gpa: int, width: int = 1) -> bool:
        return self.window <= gpa and gpa + width <= self.window + WINDOW_SIZE

    def mmio_read(self, offset: int, width: int) -> int:
        if offset == REG_INT_STATUS:
            return self.int_status
        return 0

    def mmio_write(self, offset: int, width: int, value: int) -> None:
        if offset == REG_QUEUE_NOTIFY:
            guest_kick(self, value)
        elif offset == REG_INT_ACK:
            self.int_status &= ~value

    def notify_guest(self) -> None:
        notify_guest(self)


class ConsoleDevice(BackendDevice):
    kind = "console"

    def __init__(self, name: str, window: int, irq: int = 0, **kw):
        super().__init__(name, window, irq, 0)
        self.output = bytearray()
        self.input = deque()

    def mmio_read(self, offset: int, width: int) -> int:
        if offset == REG_STATUS:
            return 1
        if offset == REG_DATA:
            return self.input.popleft() if self.input else 0
        return super().mmio_read(offset, width)

    def mmio_write(self, offset: int, width: int, value: int) -> None:
        if offset == REG_DATA:
            self.output.append(value & 0xFF)
        else:
            super().mmio_write(offset, width, value)


class NetDevice(BackendDevice):
    """Queue 0 is RX, queue 1 is TX."""

    kind = "net"
    RX, TX = 0, 1

    def __init__(self, name: str, window: int, irq: int, ring_size: int = DEFAULT_RING,
                 target_vcpu: int = 0, backlog: int = 64, source: PacketSource | None = None):
        super().__init__(name, window, irq, 2, ring_size, target_vcpu)
        self.backlog = deque()
        self.backlog_limit = backlog
        self.source = source
        self.tx_sink: list[bytes] = []


class BlkDevice(BackendDevice):
    kind = "blk"

    def __init__(self, name: str, window: int, irq: int, ring_size: int = DEFAULT_RING,
                 target_vcpu: int = 0, image: bytearray | None = None, image_path: str | None = None):
        super().__init__(name, window, irq, 1, ring_size, target_vcpu)
        if image is None and image_path:
            image = bytearray(Path(image_path).read_bytes())
        self.image = image if image is not None else bytearray(64 * SECTOR)
        self.image_path = image_path


def make_device(kind: str, name: str, window: int, irq: int, **kw) -> BackendDevice:
    cls = {"console": ConsoleDevice, "net": NetDevice, "blk": BlkDevice}[kind]
    return cls(name, window, irq, **kw)


# -- backend operations ----------------------------------------------------------


def guest_kick(dev: BackendDevice, queue: int) -> None:
    """Doorbell: schedule the queue's I/O thread. Empty queues are a no-op."""
    dev.stats.kicks += 1
    if not 0 <= queue < len(dev.queues):
        dev.stats.spurious_kicks += 1
        return
    q = dev.queues[queue]
    if not len(q):
        dev.stats.spurious_kicks += 1
        return
    q.kicked = True
    if dev.io_thread is not None:
        dev.io_thread.wake()


def notify_guest(dev: BackendDevice) -> None:
    dev.int_status |= 1
    dev.stats.notifies += 1
    if dev.notifier is not None:
        dev.notifier(dev)


class GuestMemoryAccess:
    """Backend access to guest memory: stage-2 translate + PMC from ``core``.

    ``fixup(gpa)`` is called on a stage-2 fault (the hypervisor maps the page)
    and must return True to retry; PMC violations raise :class:`BackendFault`.
    """

    def __init__(self, core_fn, s2, mem, fixup=None, audit=None):
        self.core_fn = core_fn
        self.s2 = s2
        self.mem = mem
        self.fixup = fixup
        self.audit = audit

    def _hpa(self, gpa: int, n: int, access: Access) -> int:
        r = translate_gpa(self.core_fn(), self.s2, gpa, access, n, self.audit)
        if not isinstance(r, Fault):
            return r
        for _ in range(2):
            r = translate_gpa(self.core_fn(), self.s2, gpa, access, n, self.audit)
            if not isinstance(r, Fault):
                return r
            if r.kind is FaultKind.S2_PAGE_FAULT and self.fixup is not None and self.fixup(gpa):
                continue
            raise BackendFault(r)
        raise BackendFault(r)

    def write(self, gpa: int, data: bytes) -> None:
        if (gpa & 0xFFF) + len(data) <= 4096:
            self.mem.write(self._hpa(gpa, len(data), Access.WRITE), data)
            return
        pos = 0
        while pos < len(data):
            chunk = min(len(data) - pos, 4096 - ((gpa + pos) & 0xFFF))
            self.mem.write(self._hpa(gpa + pos, chunk, Access.WRITE), data[pos : pos + chunk])
            pos += chunk

    def read(self, gpa: int, n: int) -> bytes:
        if (gpa & 0xFFF) + n <= 4096:
            return self.mem.read(self._hpa(gpa, n, Access.READ), n)
        out = bytearray()
        pos = 0
        while pos < n:
            chunk = min(n - pos, 4096 - ((gpa + pos) & 0xFFF))
            out += self.mem.read(self._hpa(gpa + pos, chunk, Access.READ), chunk)
            pos += chunk
        return bytes(out)


class BackendFault(RuntimeError):
    def __init__(self, fault: Fault):
        super().__init__(f"backend {fault.kind.value} at {fault.addr:#x}")
        self.fault = fault


def backend_rx_poll(dev: NetDevice, gmem: GuestMemoryAccess, now: int) -> int:
    """Move arrived packets into guest RX buffers; one notification per batch."""
    if dev.source is not None:
        for pkt in dev.source.arrivals(now):
            if len(dev.backlog) >= dev.backlog_limit:
                dev.stats.rx_dropped_overflow += 1
            else:
                dev.backlog.append(pkt)
    rxq = dev.queues[NetDevice.RX]
    delivered = 0
    while dev.backlog:
        item = rxq.peek()
        if item is None:
            break
        pkt = dev.backlog.popleft()
        i, d = item
        if pkt.length > d.length:
            dev.stats.rx_dropped_too_big += 1
            continue
        payload = pkt.payload()
        gmem.write(d.gpa, payload)
        rxq.pop()
        rxq.push_used(i, len(payload))
        dev.stats.injected_checksums.append(zlib.crc32(payload))
        delivered += 1
    if delivered:
        dev.stats.rx_delivered += delivered
        notify_guest(dev)
    return delivered


def backend_tx_drain(dev: NetDevice, gmem: GuestMemoryAccess) -> int:
    txq = dev.queues[NetDevice.TX]
    n = 0
    while (item := txq.pop()) is not None:
        i, d = item
        dev.tx_sink.append(gmem.read(d.gpa, d.length))
        txq.push_used(i, 0)
        n += 1
    txq.kicked = False
    dev.stats.tx_consumed += n
    if n:
        notify_guest(dev)
    return n


def backend_blk_drain(dev: BlkDevice, gmem: GuestMemoryAccess) -> int:
    q = dev.queues[0]
    n = 0
    while (item := q.pop()) is not None:
        i, d = item
        off = d.sector * SECTOR
        if off + d.length > len(dev.image):
            q.push_used(i, 0)
        elif d.device_writes:  # disk -> guest (read request)
            gmem.write(d.gpa, bytes(dev.image[off : off + d.length]))
            q.push_used(i, d.length)
        else:
            dev.image[off : off + d.length] = gmem.read(d.gpa, d.length)
            q.push_used(i, d.length)
        n += 1
    q.kicked = False
    dev.stats.blk_done += n
    if n:
        notify_guest(dev)
    return n


def flush_blk_image(dev: BlkDevice) -> None:
    if dev.image_path:
        Path(dev.image_path).write_bytes(bytes(dev.image))


# -- guest-side driver stub -----------------------------------------------------------


class GuestNetDriver:
    """Posts RX buffers and reaps them when the guest takes the device IRQ."""

    def __init__(self, dev: NetDevice, buf_base: int, n_bufs: int, buf_len: int = 2048):
        self.dev = dev
        self.buf_len = buf_len
        self.received: list[int] = []
        self.bufs = [buf_base + i * buf_len for i in range(n_bufs)]

    def post_all(self) -> None:
        for gpa in self.bufs:
            self.dev.queues[NetDevice.RX].post(Descriptor(gpa, self.buf_len, True))

    def on_irq(self, gmem: GuestMemoryAccess) -> int:
        rxq = self.dev.queues[NetDevice.RX]
        done = rxq.reap()
        for _, d, n in done:
            self.received.append(zlib.crc32(gmem.read(d.gpa, n)))
            rxq.post(Descriptor(d.gpa, self.buf_len, True))
        self.dev.int_status = 0
        return len(done)
