"""Memory and traffic accounting, closed form and measured.

Values are 8-byte doubles.  NVM is counted twice over: the plain fields
count one copy of each persisted vector, while the ``*_physical`` fields
also include frame headers, the beta scalar and slot double-buffering.

For in-memory ESR with tolerance c there are c+1 copies of every p-slice:
the owner's own and c held by other ranks.  ``ram_redundancy_values`` counts
all c+1 copies of two successive p-vectors (2*proc*n at
full tolerance); ``ram_redundancy_bytes`` is what the holders physically keep.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import CapacityError
from .rma import HEADER_SIZE

DURABLE = ("nvm_local", "nvm_prd")
BACKEND_OF_MODE = {"esr_inmem": "peer_ram", "nvm_local": "local_slot", "nvm_prd": "prd_window"}

# fields that account() predicts exactly; the rest are measured only
EXACT_FIELDS = (
    "ram_compute_bytes",
    "ram_redundancy_values",
    "ram_redundancy_bytes",
    "ram_rollback_bytes",
    "nvm_resident_values",
    "nvm_resident_bytes",
    "nvm_resident_bytes_physical",
    "nvm_written_values_per_persist",
    "nvm_written_bytes_per_persist",
    "nvm_written_bytes_physical_per_persist",
    "wire_bytes_per_persist",
)


@dataclass
class OverheadLedger:
    mode: str
    n: int
    proc: int
    c: int
    nnz: int
    ram_compute_bytes: int = 0
    ram_redundancy_values: int = 0
    ram_redundancy_bytes: int = 0
    ram_rollback_bytes: int = 0
    nvm_resident_values: int = 0
    nvm_resident_bytes: int = 0
    nvm_resident_bytes_physical: int = 0
    nvm_written_values_per_persist: int = 0
    nvm_written_bytes_per_persist: int = 0
    nvm_written_bytes_physical_per_persist: int = 0
    wire_bytes_per_persist: int = 0
    wire_piggybacked_bytes_per_persist: int | None = None
    persist_iterations: int = 0
    persist_simtime: float | None = None

    @property
    def S(self) -> float:
        """Average stored entries per row."""
        return self.nnz / self.n

    @property
    def ram_volatile_bytes(self) -> int:
        return self.ram_compute_bytes + self.ram_redundancy_bytes + self.ram_rollback_bytes

    def exact_view(self) -> dict:
        return {k: getattr(self, k) for k in EXACT_FIELDS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["S"] = self.S
        d["ram_volatile_bytes"] = self.ram_volatile_bytes
        return d

    def check_capacity(self, M_V: int | None = None, M_NV: int | None = None) -> None:
        if M_V is not None and self.ram_volatile_bytes > M_V:
            raise CapacityError(
                f"{self.mode}: volatile memory {self.ram_volatile_bytes} B exceeds M_V={M_V} B")
        if M_NV is not None and self.nvm_resident_bytes_physical > M_NV:
            raise CapacityError(
                f"{self.mode}: durable memory {self.nvm_resident_bytes_physical} B exceeds M_NV={M_NV} B")


def account(n: int, proc: int, c: int, mode: str, nnz: int | None = None,
            S: float = 7.0) -> OverheadLedger:
    """Closed-form ledger of a run; no solver involved.

    ``nnz`` defaults to ``round(S * n)``.
    """
    nnz = int(round(S * n)) if nnz is None else int(nnz)
    led = OverheadLedger(mode=mode, n=n, proc=proc, c=c, nnz=nnz)
    led.ram_compute_bytes = 8 * (nnz + 4 * n)
    if mode == "none":
        return led
    led.ram_rollback_bytes = 8 * 4 * n
    if mode == "esr_inmem":
        led.ram_redundancy_values = 2 * n * (c + 1)
        led.ram_redundancy_bytes = 8 * 2 * n * c
        led.wire_bytes_per_persist = 8 * c * (n + proc)
    elif mode in DURABLE:
        led.nvm_resident_values = 2 * n
        led.nvm_resident_bytes = 8 * 2 * n
        led.nvm_written_values_per_persist = n
        led.nvm_written_bytes_per_persist = 8 * n
        frame_total = HEADER_SIZE * proc + 8 * (n + proc)
        led.nvm_written_bytes_physical_per_persist = frame_total
        led.nvm_resident_bytes_physical = 2 * 2 * frame_total
        if mode == "nvm_prd":
            led.wire_bytes_per_persist = 8 * (n + proc)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return led


def in_memory_to_nvm(ram_redundancy_bytes: float, proc: int) -> float:
    """NVM needed to replace full-tolerance in-memory redundancy of the given size.

    Every value held ``proc`` times in RAM is persisted once instead.
    """
    return ram_redundancy_bytes / proc


def field_names() -> list[str]:
    return [f.name for f in fields(OverheadLedger)]
