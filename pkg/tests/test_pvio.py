from __future__ import annotations

import json
import zlib

import pytest
from hypothesis import given, strategies as st

from duvisor_sim.mmu.memory import PAGE_SIZE
from duvisor_sim.mmu.translate import FaultKind
from duvisor_sim.pvio import (
    REG_DATA,
    REG_INT_ACK,
    REG_INT_STATUS,
    REG_QUEUE_NOTIFY,
    REG_STATUS,
    SECTOR,
    BackendFault,
    BlkDevice,
    ConsoleDevice,
    Descriptor,
    GuestMemoryAccess,
    GuestNetDriver,
    NetDevice,
    Packet,
    PacketSource,
    RingError,
    VirtQueue,
    backend_blk_drain,
    backend_rx_poll,
    backend_tx_drain,
    generate_schedule,
    guest_kick,
    load_packet_schedule,
    make_device,
)

from simkit import boot_guest


class FlatMem:
    """Guest memory stand-in for backend tests: GPA == offset into a bytearray."""

    def __init__(self, size: int = 1 << 20):
        self.buf = bytearray(size)

    def write(self, gpa: int, data: bytes) -> None:
        self.buf[gpa : gpa + len(data)] = data

    def read(self, gpa: int, n: int) -> bytes:
        return bytes(self.buf[gpa : gpa + n])


def rx_desc(gpa: int, n: int = 2048) -> Descriptor:
    return Descriptor(gpa, n, True)


# -- virtqueue -----------------------------------------------------------------------


@pytest.mark.parametrize("size", [0, 3, 6, 100])
def test_ring_size_must_be_power_of_two(size):
    with pytest.raises(ValueError):
        VirtQueue(size)


def test_post_pop_push_reap():
    q = VirtQueue(4)
    ids = [q.post(rx_desc(i * 0x100)) for i in range(3)]
    assert len(q) == 3
    i, d = q.pop()
    assert i == ids[0] and d.gpa == 0
    q.push_used(i, 10)
    assert len(q) == 2 and q.consumed == 1
    assert q.reap() == [(ids[0], rx_desc(0), 10)]
    assert q.reap() == []


def test_full_ring_refuses_post():
    q = VirtQueue(2)
    q.post(rx_desc(0))
    q.post(rx_desc(1))
    with pytest.raises(RingError, match="full"):
        q.post(rx_desc(2))


def test_used_cannot_overtake_avail():
    q = VirtQueue(4)
    with pytest.raises(RingError, match="overtake"):
        q.push_used(0, 0)
    q.post(rx_desc(0))
    # posted but not yet popped by the device
    with pytest.raises(RingError):
        q.push_used(0, 0)


def test_indices_wrap_past_sixteen_bits():
    q = VirtQueue(2)
    for n in range(70_000):
        q.post(rx_desc(n & 0xFF))
        i, d = q.pop()
        q.push_used(i, 1)
        assert q.reap() == [(i, d, 1)]
    assert q.avail_idx == q.used_idx == 70_000 % 65536
    assert q.consumed == 70_000 and len(q) == 0


@given(st.lists(st.sampled_from(["post", "pop", "reap"]), max_size=200))
def test_ring_never_double_consumes(ops):
    q = VirtQueue(8)
    posted = popped = 0
    in_flight: set[int] = set()
    delivered: list[int] = []
    for op in ops:
        if op == "post" and q.free_ids:
            q.post(rx_desc(posted))
            posted += 1
        elif op == "pop" and (item := q.pop()) is not None:
            i, d = item
            assert i not in in_flight
            in_flight.add(i)
            q.push_used(i, d.gpa)
            popped += 1
        elif op == "reap":
            for i, d, n in q.reap():
                in_flight.discard(i)
                delivered.append(n)
        assert (q.last_avail - q.used_idx) % 65536 == 0
        assert len(q) == posted - popped
    # every buffer comes back exactly once and in posting order
    assert delivered == list(range(len(delivered)))


# -- packets ---------------------------------------------------------------------


def test_packet_payload_is_deterministic():
    p = Packet(5, 100, 1234)
    assert p.payload() == Packet(9, 100, 1234).payload()
    assert len(p.payload()) == 100
    assert p.checksum == zlib.crc32(p.payload())
    assert Packet(5, 100, 1235).payload() != p.payload()


def test_generate_schedule():
    a = generate_schedule(50, seed=3, spacing=10, min_len=64, max_len=128)
    assert a == generate_schedule(50, seed=3, spacing=10, min_len=64, max_len=128)
    assert [p.cycle for p in a] == list(range(10, 510, 10))
    assert all(64 <= p.length <= 128 for p in a)
    j = generate_schedule(50, seed=3, spacing=10, jitter=True)
    assert all(1 <= b.cycle - a.cycle <= 20 for a, b in zip(j, j[1:]))


def test_load_packet_schedule(tmp_path):
    f = tmp_path / "p.json"
    f.write_text(json.dumps({"format": "duvisor-packets/1",
                             "packets": [{"cycle": 3, "length": 64, "seed": 1}]}))
    assert load_packet_schedule(f) == [Packet(3, 64, 1)]
    f.write_text(json.dumps({"format": "other", "packets": []}))
    with pytest.raises(ValueError):
        load_packet_schedule(f)


def test_packet_source_releases_by_cycle():
    src = PacketSource([Packet(20, 64, 2), Packet(10, 64, 1)])
    assert src.arrivals(5) == []
    assert src.arrivals(15) == [Packet(10, 64, 1)]
    assert not src.exhausted
    assert src.arrivals(100) == [Packet(20, 64, 2)]
    assert src.exhausted and src.arrivals(200) == []


# -- devices ---------------------------------------------------------------------


def test_make_device_kinds():
    assert isinstance(make_device("console", "c", 0x1000, 0), ConsoleDevice)
    assert isinstance(make_device("net", "n", 0x1000, 5), NetDevice)
    assert isinstance(make_device("blk", "b", 0x1000, 6), BlkDevice)
    with pytest.raises(KeyError):
        make_device("gpu", "g", 0x1000, 0)


def test_console_registers():
    c = ConsoleDevice("c", 0x1000)
    assert c.mmio_read(REG_STATUS, 4) == 1
    assert c.mmio_read(REG_DATA, 4) == 0
    c.input.extend(b"hi")
    assert c.mmio_read(REG_DATA, 4) == ord("h")
    c.mmio_write(REG_DATA, 4, 0x1FF)
    assert bytes(c.output) == b"\xff"
    assert c.contains(0x1FFC, 4) and not c.contains(0x1FFE, 4)


def test_kick_on_empty_or_bad_queue_is_spurious():
    dev = NetDevice("n", 0, 5)
    guest_kick(dev, NetDevice.TX)
    guest_kick(dev, 9)
    assert (dev.stats.kicks, dev.stats.spurious_kicks) == (2, 2)
    dev.queues[NetDevice.TX].post(Descriptor(0, 4, False))
    dev.mmio_write(REG_QUEUE_NOTIFY, 4, NetDevice.TX)
    assert dev.queues[NetDevice.TX].kicked and dev.stats.spurious_kicks == 2


def test_interrupt_status_and_ack():
    dev = NetDevice("n", 0, 5)
    seen = []
    dev.notifier = seen.append
    dev.notify_guest()
    assert dev.mmio_read(REG_INT_STATUS, 4) == 1 and seen == [dev]
    dev.mmio_write(REG_INT_ACK, 4, 1)
    assert dev.mmio_read(REG_INT_STATUS, 4) == 0


def test_rx_batch_gets_one_notify():
    pkts = generate_schedule(5, seed=1, spacing=1, max_len=512)
    dev = NetDevice("n", 0, 5, source=PacketSource(pkts))
    mem = FlatMem()
    drv = GuestNetDriver(dev, 0x1000, 8)
    drv.post_all()
    assert backend_rx_poll(dev, mem, now=100) == 5
    assert dev.stats.notifies == 1 and dev.stats.rx_delivered == 5
    assert drv.on_irq(mem) == 5
    assert drv.received == [p.checksum for p in pkts] == dev.stats.injected_checksums
    # nothing new: no notify
    assert backend_rx_poll(dev, mem, now=200) == 0 and dev.stats.notifies == 1


def test_rx_oversize_packet_dropped_without_consuming_buffer():
    pkts = [Packet(1, 4000, 1), Packet(2, 100, 2)]
    dev = NetDevice("n", 0, 5, source=PacketSource(pkts))
    dev.queues[NetDevice.RX].post(rx_desc(0, 2048))
    assert backend_rx_poll(dev, FlatMem(), now=10) == 1
    assert dev.stats.rx_dropped_too_big == 1
    assert dev.stats.injected_checksums == [pkts[1].checksum]


def test_rx_backlog_overflow_drops():
    pkts = generate_schedule(10, seed=2, spacing=1)
    dev = NetDevice("n", 0, 5, backlog=4, source=PacketSource(pkts))
    # no buffers posted: packets wait in the backlog
    assert backend_rx_poll(dev, FlatMem(), now=100) == 0
    assert len(dev.backlog) == 4 and dev.stats.rx_dropped_overflow == 6
    assert dev.stats.notifies == 0
    dev.queues[NetDevice.RX].post(rx_desc(0))
    assert backend_rx_poll(dev, FlatMem(), now=100) == 1 and len(dev.backlog) == 3


def test_tx_drain_collects_frames():
    dev = NetDevice("n", 0, 5)
    mem = FlatMem()
    mem.write(0x100, b"hello")
    mem.write(0x200, b"world!")
    txq = dev.queues[NetDevice.TX]
    txq.post(Descriptor(0x100, 5, False))
    txq.post(Descriptor(0x200, 6, False))
    txq.kicked = True
    assert backend_tx_drain(dev, mem) == 2
    assert dev.tx_sink == [b"hello", b"world!"]
    assert not txq.kicked and dev.stats.notifies == 1
    assert [n for _, _, n in txq.reap()] == [0, 0]


def test_blk_read_write_and_out_of_range():
    image = bytearray(4 * SECTOR)
    image[SECTOR : SECTOR + 3] = b"abc"
    dev = BlkDevice("b", 0, 6, image=image)
    mem = FlatMem()
    mem.write(0x400, b"xyz")
    q = dev.queues[0]
    q.post(Descriptor(0x100, 3, True, sector=1))        # read sector 1
    q.post(Descriptor(0x400, 3, False, sector=2))       # write sector 2
    q.post(Descriptor(0x800, SECTOR, True, sector=4))   # past the end
    assert backend_blk_drain(dev, mem) == 3
    assert mem.read(0x100, 3) == b"abc"
    assert bytes(image[2 * SECTOR : 2 * SECTOR + 3]) == b"xyz"
    assert [n for _, _, n in q.reap()] == [3, 3, 0]
    assert dev.stats.blk_done == 3 and dev.stats.notifies == 1


def test_blk_image_from_file(tmp_path):
    f = tmp_path / "disk.img"
    f.write_bytes(b"\x07" * SECTOR)
    dev = BlkDevice("b", 0, 6, image_path=str(f))
    assert dev.image[0] == 7 and len(dev.image) == SECTOR


# -- guest memory from the backend --------------------------------------------------


def test_guest_memory_access_maps_on_demand():
    m, vm = boot_guest("HALT")
    core = m.platform.cores[0]
    gm = GuestMemoryAccess(lambda: core, vm.s2, m.mem, fixup=vm.backend_fixup)
    gpa = 0x300000 - 3  # crosses into an unmapped page
    gm.write(gpa, b"abcdef")
    assert gm.read(gpa, 6) == b"abcdef"
    assert {0x2FF, 0x300} <= set(vm.s2.entries)


def test_guest_memory_access_without_fixup_faults():
    m, vm = boot_guest("HALT")
    core = m.platform.cores[0]
    gm = GuestMemoryAccess(lambda: core, vm.s2, m.mem)
    with pytest.raises(BackendFault) as e:
        gm.read(0x500000, 4)
    assert e.value.fault.kind is FaultKind.S2_PAGE_FAULT


def test_guest_memory_access_outside_grant_is_pmc_fault():
    m, vm = boot_guest("HALT", vcpu_cores=[0], io_cores=[])
    stranger = m.platform.cores[3]  # carries no PMC region for this VM
    gm = GuestMemoryAccess(lambda: stranger, vm.s2, m.mem, fixup=vm.backend_fixup)
    with pytest.raises(BackendFault) as e:
        gm.read(0, PAGE_SIZE)
    assert e.value.fault.kind is FaultKind.PMC_VIOLATION
