"""Small system builders shared by the test modules."""
from isoforge import hv_model as hv


def region(rid, base, size, owner=hv.HYPERVISOR, space="user", grants=(), mmio=False):
    return hv.MemoryRegion(rid, base, size, space, owner, frozenset(grants), mmio)


def small_spec(slots=(("P1", 5), ("P2", 5), ("P3", 10)), kinds=None, quota=65536,
               defects=(), channels=(), wcet=((8, 5),), grants=None, device=None):
    """Three partitions, 4096 words of RAM each, a 256-word kernel region."""
    ids = []
    for pid, _ in slots:
        if pid not in ids:
            ids.append(pid)
    kinds = kinds or {}
    regions = [region("kernel", 0, 256, space="kernel")]
    parts = []
    for i, pid in enumerate(ids):
        rid = pid + ".ram"
        regions.append(region(rid, 0x1000 * (i + 1), 4096, owner=pid,
                              grants=(grants or {}).get(pid, ())))
        parts.append(hv.PartitionSpec(pid, kinds.get(pid, hv.KIND_TEST_PV), quota, (rid,),
                                      "periodic_compute" if kinds.get(pid) == hv.KIND_REGULAR else ""))
    return hv.SystemSpec(tuple(parts), tuple(regions), hv.CyclicSchedule(tuple(slots)),
                         tuple(channels), device or hv.DeviceSpec(), tuple(wcet),
                         frozenset(defects))


def ram(spec, pid):
    return spec.region(pid + ".ram").base


def events(trace, kind):
    return [e for e in trace if e.kind == kind]
