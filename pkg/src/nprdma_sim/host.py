"""A simulated machine: memory, IOMMU and NIC sharing one engine."""

from __future__ import annotations

from .iommu import MAGIC_WORD, Iommu
from .memory import HostMemory
from .rnic import DEFAULT_UNIT, Rnic
from .sim import Engine, LatencyModel


class Host:
    def __init__(self, engine: Engine, name: str, latency: LatencyModel | None = None,
                 index: int = 1, dma_unit_size: int = DEFAULT_UNIT,
                 magic_word: bytes = MAGIC_WORD, swap_serialize: bool = False,
                 max_pages: int = 1 << 22) -> None:
        self.engine = engine
        self.name = name
        self.lat = latency or LatencyModel()
        self.mem = HostMemory(engine, self.lat, name, max_pages=max_pages,
                              swap_serialize=swap_serialize)
        self.iommu = Iommu(self.mem, magic_word)
        self.nic = Rnic(engine, self.lat, self.mem, self.iommu, name,
                        dma_unit_size=dma_unit_size, index=index)

    def __repr__(self) -> str:
        return f"Host({self.name!r})"


def make_pair(latency: LatencyModel | None = None, **kw) -> tuple[Engine, Host, Host]:
    """Two hosts on one clock, named ``a`` and ``b``."""
    eng = Engine()
    lat = latency or LatencyModel()
    return eng, Host(eng, "a", lat, index=1, **kw), Host(eng, "b", lat, index=2, **kw)
