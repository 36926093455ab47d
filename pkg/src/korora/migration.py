"""Live-migration session: pre-checks, authorization, pre-copy over the
secure channel, vTPM transfer, manifest verification, flag/quarantine,
commit or rollback."""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import channel as ch
from . import storage, vtpm
from .policy import Access, Response, SystemState, authorize, ssp_check

log = logging.getLogger(__name__)

REPORT_FORMAT = "korora_report_v1"
XEN = "xen"
MIGRATE = "migrate"

FLAG_SENTINEL = b"\x00\xffKORORA:FLAGGED-RECORD\xff\x00"


class PrecheckError(Exception):
    """``kind``: hypervisor-mismatch, missing-capability, insufficient-resources."""

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


class PhaseError(RuntimeError):
    pass


def hexdigest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# -- descriptors ------------------------------------------------------------


@dataclass
class HostDescriptor:
    host_id: str
    identity: ch.Identity
    hypervisor: str = XEN
    capabilities: frozenset = frozenset()
    memory: int = 0  # pages
    storage: int = 0  # chunks
    acl: frozenset = frozenset()  # {(subject, action)}

    def __post_init__(self):
        self.capabilities = frozenset(self.capabilities)
        self.acl = frozenset(tuple(p) for p in self.acl)
        if self.memory < 0 or self.storage < 0:
            raise ValueError("host resources must be non-negative")


@dataclass
class VmSpec:
    vm_id: str
    disk: storage.VirtualDisk
    memory: storage.VirtualDisk  # pages, same machinery as disk chunks
    vtpm: vtpm.VtpmInstance
    config_files: dict = field(default_factory=dict)
    system_files: dict = field(default_factory=dict)
    data_files: dict = field(default_factory=dict)
    # owner-supplied digests, keyed "system/<name>" or "data/<name>"
    declared_hashes: dict = field(default_factory=dict)

    @property
    def page_count(self) -> int:
        return self.memory.chunk_count

    @property
    def chunk_count(self) -> int:
        return self.disk.chunk_count


@dataclass
class MigrationConfig:
    chunks_per_tick: int = 32
    stop_threshold: float = 0.02
    max_rounds: int = 30
    popularity_threshold: float = 3
    ops_per_tick: int = 4
    write_fraction: float = 0.5
    distribution: str = "uniform"
    zipf_s: float = 1.2
    required_capabilities: frozenset = frozenset({"vtpm"})
    seed: int = 0

    @property
    def writes_per_tick(self) -> int:
        return int(round(self.ops_per_tick * self.write_fraction))


def crypto_rule(vm: VmSpec) -> dict:
    """The pinned algorithm/geometry tuple fixed at pre-check."""
    return {
        "hash": vtpm.HASH_ALG,
        "aead": ch.AEAD_ALG,
        "signature": ch.SIGNATURE_ALG,
        "key_exchange": ch.KEX_ALG,
        "kdf": ch.KDF_ALG,
        "vtpm_seal": vtpm.SEAL_AEAD_ALG,
        "chunk_size": vm.disk.chunk_size,
        "page_size": vm.memory.chunk_size,
    }


def precheck(source: HostDescriptor, dest: HostDescriptor, vm: VmSpec,
             required: frozenset = frozenset({"vtpm"})) -> dict:
    """Raise PrecheckError or return the session's crypto rule."""
    if source.hypervisor != XEN or dest.hypervisor != XEN:
        raise PrecheckError(
            "hypervisor-mismatch", f"source={source.hypervisor} dest={dest.hypervisor}"
        )
    missing = set(required) - dest.capabilities
    if missing:
        raise PrecheckError("missing-capability", ",".join(sorted(missing)))
    if dest.memory < vm.page_count or dest.storage < vm.chunk_count:
        raise PrecheckError(
            "insufficient-resources",
            f"need memory={vm.page_count} storage={vm.chunk_count}, "
            f"have memory={dest.memory} storage={dest.storage}",
        )
    return crypto_rule(vm)


def authorize_migration(requester: str, source: HostDescriptor, policy_state: SystemState,
                        vm_object: str) -> Response:
    """ACL entry for ``migrate`` plus Execute on the VM object under the policy."""
    if requester not in policy_state.clearance:
        return Response.ERROR
    if ssp_check(policy_state):
        return Response.ERROR
    if (requester, MIGRATE) not in source.acl:
        return Response.NO
    resp = authorize(requester, vm_object, Access.EXECUTE, policy_state)
    return Response.YES if resp is Response.YES else (Response.ERROR if resp is Response.ERROR else Response.NO)


# -- manifests --------------------------------------------------------------


@dataclass(frozen=True)
class Manifest:
    config_hashes: dict
    system_file_hashes: dict
    data_file_hashes: dict
    disk_root: str
    memory_root: str
    vtpm_counter: int
    vtpm_pcr_digest: str
    # per-chunk digests, only used to name offending chunks
    disk_chunks: tuple = ()
    memory_pages: tuple = ()

    def to_json(self) -> bytes:
        d = {
            "config_hashes": self.config_hashes,
            "system_file_hashes": self.system_file_hashes,
            "data_file_hashes": self.data_file_hashes,
            "disk_root": self.disk_root,
            "memory_root": self.memory_root,
            "vtpm_counter": self.vtpm_counter,
            "vtpm_pcr_digest": self.vtpm_pcr_digest,
            "disk_chunks": list(self.disk_chunks),
            "memory_pages": list(self.memory_pages),
        }
        return json.dumps(d, sort_keys=True).encode()

    @classmethod
    def from_json(cls, data: bytes) -> "Manifest":
        d = json.loads(data)
        d["disk_chunks"] = tuple(d["disk_chunks"])
        d["memory_pages"] = tuple(d["memory_pages"])
        return cls(**d)


def _hash_files(files: dict) -> dict:
    return {name: hexdigest(data) for name, data in sorted(files.items())}


def _pcr_digest(instance: vtpm.VtpmInstance) -> str:
    return hexdigest(b"".join(instance.pcrs))


def manifest_of(config_files, system_files, data_files, disk_view, memory_view,
                vtpm_instance) -> Manifest:
    dm = storage.disk_manifest(disk_view)
    mm = storage.disk_manifest(memory_view)
    return Manifest(
        _hash_files(config_files),
        _hash_files(system_files),
        _hash_files(data_files),
        dm.root.hex(),
        mm.root.hex(),
        vtpm_instance.counter,
        _pcr_digest(vtpm_instance),
        tuple(d.hex() for d in dm.chunk_digests),
        tuple(d.hex() for d in mm.chunk_digests),
    )


def snapshot_manifest(vm: VmSpec) -> Manifest:
    return manifest_of(vm.config_files, vm.system_files, vm.data_files, vm.disk, vm.memory, vm.vtpm)


@dataclass(frozen=True)
class Violation:
    kind: str  # config, system, data, disk, memory, vtpm
    name: str
    expected: Optional[str]
    actual: Optional[str]
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "class": self.kind,
            "name": self.name,
            "expected": self.expected,
            "actual": self.actual,
            "detail": self.detail,
        }


def _compare_maps(kind: str, want: dict, got: dict) -> list:
    out = []
    for name in sorted(set(want) | set(got)):
        if want.get(name) != got.get(name):
            out.append(Violation(kind, name, want.get(name), got.get(name)))
    return out


def _changed(want: tuple, got: tuple) -> list:
    if len(want) != len(got):
        return list(range(max(len(want), len(got))))
    return [i for i, (a, b) in enumerate(zip(want, got)) if a != b]


def compare_manifests(want: Manifest, got: Manifest) -> list:
    out = []
    out += _compare_maps("config", want.config_hashes, got.config_hashes)
    out += _compare_maps("system", want.system_file_hashes, got.system_file_hashes)
    out += _compare_maps("data", want.data_file_hashes, got.data_file_hashes)
    if want.disk_root != got.disk_root:
        idx = _changed(want.disk_chunks, got.disk_chunks)
        out.append(Violation("disk", "root", want.disk_root, got.disk_root,
                             "chunks=" + ",".join(map(str, idx))))
    if want.memory_root != got.memory_root:
        idx = _changed(want.memory_pages, got.memory_pages)
        out.append(Violation("memory", "root", want.memory_root, got.memory_root,
                             "pages=" + ",".join(map(str, idx))))
    if want.vtpm_counter != got.vtpm_counter:
        out.append(Violation("vtpm", "counter", str(want.vtpm_counter), str(got.vtpm_counter)))
    if want.vtpm_pcr_digest != got.vtpm_pcr_digest:
        out.append(Violation("vtpm", "pcrs", want.vtpm_pcr_digest, got.vtpm_pcr_digest))
    return out


def verify_destination(source_manifest: Manifest, dest_vm: VmSpec) -> list:
    """One violation per mismatched hash, named by artifact class."""
    return compare_manifests(source_manifest, snapshot_manifest(dest_vm))


# -- flag / quarantine ------------------------------------------------------


class QuarantineStore:
    """Content-addressed store. With ``root`` set, blobs are also written as
    files named by their lowercase hex SHA-256."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._blobs = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def put(self, data: bytes) -> str:
        ref = hexdigest(data)
        self._blobs[ref] = bytes(data)
        if self.root is not None:
            (self.root / ref).write_bytes(data)
        return ref

    def get(self, ref: str) -> bytes:
        data = self._blobs.get(ref)
        if data is None and self.root is not None and (self.root / ref).exists():
            data = (self.root / ref).read_bytes()
        if data is None:
            raise KeyError(ref)
        if hexdigest(data) != ref:
            raise ValueError(f"quarantined blob {ref} is corrupt")
        return data

    def __contains__(self, ref) -> bool:
        return ref in self._blobs or (self.root is not None and (self.root / ref).exists())

    def __len__(self) -> int:
        return len(self._blobs)


@dataclass(frozen=True)
class FlagRecord:
    record_id: str
    flag_value: bytes
    quarantine_ref: str
    reason: str

    @property
    def placeholder(self) -> bytes:
        """What replaces the record in the destination view."""
        return self.flag_value + self.quarantine_ref.encode()

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "flag_value": self.flag_value.hex(),
            "quarantine_ref": self.quarantine_ref,
            "reason": self.reason,
        }


def flag_and_quarantine(record_id: str, original: bytes, reason: str,
                        store: QuarantineStore, view: dict = None) -> FlagRecord:
    """Quarantine ``original`` and, if ``view`` is given, overwrite
    ``view[record_id]`` with the flag placeholder."""
    rec = FlagRecord(record_id, FLAG_SENTINEL, store.put(original), reason)
    if view is not None:
        view[record_id] = rec.placeholder
    return rec


def is_flagged(data: bytes) -> bool:
    return FLAG_SENTINEL in data


# -- workload ---------------------------------------------------------------


class Workload:
    """Seeded synthetic VM activity over the disk and memory routers.

    Every write is appended to ``ops`` as ``(tick, target, index, data)`` so a
    reference model can replay it.
    """

    def __init__(self, disk: storage.IORouter, memory: storage.IORouter,
                 config: MigrationConfig, rng: np.random.Generator):
        self.routers = {"disk": disk, "memory": memory}
        self.rng = rng
        self.writes = config.writes_per_tick
        self.reads = config.ops_per_tick - self.writes
        n_disk, n_mem = disk.disk.chunk_count, memory.disk.chunk_count
        self.p_memory = n_mem / (n_disk + n_mem)
        self._probs = {
            "disk": _index_probs(n_disk, config, rng),
            "memory": _index_probs(n_mem, config, rng),
        }
        self.ops = []
        self.paused = False

    def _pick(self, target: str, n: int) -> np.ndarray:
        size = self.routers[target].disk.chunk_count
        p = self._probs[target]
        return self.rng.choice(size, size=n, p=p) if p is not None else self.rng.integers(0, size, n)

    def tick(self, tick: int):
        if self.paused:
            return
        for _ in range(self.writes):
            target = "memory" if self.rng.random() < self.p_memory else "disk"
            router = self.routers[target]
            idx = int(self._pick(target, 1)[0])
            data = self.rng.integers(0, 256, router.disk.chunk_size, dtype=np.uint8).tobytes()
            router.io_write(idx, data)
            self.ops.append((tick, target, idx, data))
        if self.reads:
            n_mem = int(self.rng.binomial(self.reads, self.p_memory))
            for target, n in (("disk", self.reads - n_mem), ("memory", n_mem)):
                if n:
                    self.routers[target].vm_read_many(self._pick(target, n))


def _index_probs(n: int, config: MigrationConfig, rng: np.random.Generator):
    if config.distribution == "uniform":
        return None
    if config.distribution != "zipf":
        raise ValueError(f"unknown distribution {config.distribution}")
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** config.zipf_s
    w = w[rng.permutation(n)]
    return w / w.sum()


# -- session ----------------------------------------------------------------


class Phase(enum.Enum):
    PRECHECK = "PreCheck"
    AUTHORIZE = "Authorize"
    AUTHENTICATE = "Authenticate"
    PRECOPY = "PreCopy"
    STOP_AND_COPY = "StopAndCopy"
    VTPM_TRANSFER = "VtpmTransfer"
    VERIFY = "Verify"
    COMMIT = "Commit"
    ROLLED_BACK = "RolledBack"
    ABORTED = "Aborted"


_ORDER = [
    Phase.PRECHECK, Phase.AUTHORIZE, Phase.AUTHENTICATE, Phase.PRECOPY,
    Phase.STOP_AND_COPY, Phase.VTPM_TRANSFER, Phase.VERIFY, Phase.COMMIT,
]
TERMINAL = frozenset({Phase.COMMIT, Phase.ROLLED_BACK, Phase.ABORTED})


class Abort(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass
class Metrics:
    bytes_sent: int = 0
    rounds: int = 0
    downtime_ticks: int = 0
    detections: int = 0
    ticks: int = 0
    converged: bool = False
    round0_bytes: int = 0
    diff_bytes: int = 0
    vtpm_bytes: int = 0
    overhead_bytes: int = 0
    records_sent: int = 0
    dirty_per_round: list = field(default_factory=list)
    replacement_reads: int = 0
    original_reads: int = 0
    plaintext_leaks: Optional[int] = None
    source_zeroized: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


EVALUATION_DEFAULT = {
    "target": "integrity between cloud service providers and cloud service users",
    "criteria": "config, system file, data file, disk, memory and vTPM integrity; "
                "authorization, mutual authentication, confidentiality, replay resistance, "
                "non-repudiation",
    "yardstick": "destination state byte-equal to source final state with zero violations",
    "data_gathering": "per-artifact hash manifests and the channel session log",
    "synthesis": "verdict from manifest comparison and channel detections",
    "process": "precheck, authorize, authenticate, pre-copy, stop-and-copy, vTPM transfer, "
               "verify, commit or rollback",
}


@dataclass
class MigrationReport:
    verdict: str  # committed, rolled_back, aborted
    vm_id: str
    reason: Optional[str]
    phases: list
    metrics: Metrics
    violations: list
    flags: list
    crypto_rule: dict
    evaluation: dict
    session_log_digest: str
    scenario: str = ""
    timestamp: str = ""

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "scenario": self.scenario,
            "vm_id": self.vm_id,
            "verdict": self.verdict,
            "reason": self.reason,
            "phases": list(self.phases),
            "metrics": self.metrics.to_dict(),
            "violations": [v.to_dict() for v in self.violations],
            "flags": [f.to_dict() for f in self.flags],
            "crypto_rule": self.crypto_rule,
            "evaluation": self.evaluation,
            "session_log_digest": self.session_log_digest,
            "timestamp": self.timestamp,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


@dataclass
class DestinationState:
    """What the destination host holds; discarded unless the session commits."""

    disk: storage.VirtualDisk
    memory: storage.VirtualDisk
    files: dict = field(default_factory=lambda: {"config": {}, "system": {}, "data": {}})
    initial_manifest: Optional[Manifest] = None
    final_manifest: Optional[Manifest] = None
    vtpm: Optional[vtpm.VtpmInstance] = None
    commit_requested: bool = False
    active: bool = False

    def as_vm(self, vm_id: str) -> VmSpec:
        return VmSpec(
            vm_id, self.disk, self.memory, self.vtpm,
            self.files["config"], self.files["system"], self.files["data"],
        )


def _encode_files(files: dict) -> bytes:
    return json.dumps(
        {cls: {n: base64.b64encode(d).decode() for n, d in sorted(v.items())}
         for cls, v in sorted(files.items())},
        sort_keys=True,
    ).encode()


def _decode_files(data: bytes) -> dict:
    return {cls: {n: base64.b64decode(d) for n, d in v.items()}
            for cls, v in json.loads(data).items()}


class MigrationSession:
    """One migration between two hosts. Call :meth:`run` once.

    ``dest_fault`` is an optional hook called with the DestinationState just
    before verification, to inject destination-side corruption.
    """

    def __init__(
        self,
        source: HostDescriptor,
        dest: HostDescriptor,
        vm: VmSpec,
        trust_root: ch.TrustRoot,
        config: MigrationConfig = None,
        requester: str = "admin",
        policy_state: SystemState = None,
        adversary: ch.Adversary = None,
        quarantine: QuarantineStore = None,
        dest_fault: Callable = None,
        evaluation: dict = None,
        scenario_name: str = "",
    ):
        self.source = source
        self.dest = dest
        self.vm = vm
        self.trust_root = trust_root
        self.config = config or MigrationConfig()
        self.requester = requester
        self.policy_state = policy_state
        self.log = adversary.log if adversary is not None and adversary.log is not None else ch.SessionLog()
        self.adversary = adversary
        if adversary is not None and adversary.log is None:
            adversary.log = self.log
        self.quarantine = quarantine if quarantine is not None else QuarantineStore()
        self.dest_fault = dest_fault
        self.evaluation = dict(evaluation or EVALUATION_DEFAULT)
        self.scenario_name = scenario_name

        self.rng = random.Random(self.config.seed)
        self.np_rng = np.random.default_rng(self.config.seed)
        self.disk_router = storage.IORouter(vm.disk, self.config.popularity_threshold)
        self.memory_router = storage.IORouter(vm.memory, math.inf)
        self.workload = Workload(self.disk_router, self.memory_router, self.config, self.np_rng)

        self.phases = []
        self.round = 0
        self.metrics = Metrics()
        self.violations = []
        self.flags = []
        self.rule = {}
        self.destination: Optional[DestinationState] = None
        self.transfer_files = {}
        self.src_channel = None
        self.dst_channel = None
        self.evidence = None
        self.source_final = None  # (disk view, memory view) at stop-and-copy
        self._sent_plain = []

    # phase machine

    @property
    def phase(self) -> Optional[Phase]:
        return self.phases[-1][0] if self.phases else None

    def _enter(self, phase: Phase, detail: str = ""):
        cur = self.phase
        if cur in TERMINAL:
            raise PhaseError(f"session already terminal ({cur.value})")
        if phase in (Phase.ABORTED, Phase.ROLLED_BACK):
            pass
        elif cur is None:
            if phase is not Phase.PRECHECK:
                raise PhaseError("session must start at PreCheck")
        else:
            i, j = _ORDER.index(cur), _ORDER.index(phase)
            if not (j == i + 1 or (phase is cur is Phase.PRECOPY)):
                raise PhaseError(f"illegal transition {cur.value} -> {phase.value}")
        if phase is Phase.ROLLED_BACK and cur is not Phase.VERIFY:
            raise PhaseError("rollback only follows verification")
        self.phases.append((phase, detail))

    def phase_names(self) -> list:
        out = []
        for p, detail in self.phases:
            if p is Phase.PRECOPY:
                out.append(f"PreCopy({detail})")
            elif p is Phase.ABORTED:
                out.append(f"Aborted({detail})")
            else:
                out.append(p.value)
        return out

    # transport

    def _send(self, plaintext: bytes, ctype: ch.ContentType, kind: str = "overhead"):
        msg = ch.seal_send(self.src_channel, plaintext, ctype).to_bytes()
        self.log.emit("source", "SEND", f"type={int(ctype)} seq={self.src_channel.send_seq} bytes={len(msg)}")
        self.metrics.records_sent += 1
        self.metrics.overhead_bytes += ch.RECORD_OVERHEAD
        if kind == "round0":
            self.metrics.round0_bytes += len(plaintext)
        elif kind == "diff":
            self.metrics.diff_bytes += len(plaintext)
        elif kind == "vtpm":
            self.metrics.vtpm_bytes += len(plaintext)
        else:
            self.metrics.overhead_bytes += len(plaintext)
        if self.adversary is not None and self.adversary.config.eavesdrop:
            self._sent_plain.append(plaintext)
        delivered = self.adversary.intercept(msg) if self.adversary is not None else [msg]
        for frame in delivered:
            self._receive(frame)

    def _receive(self, frame: bytes):
        try:
            wire = ch.WireMessage.from_bytes(frame)
            plain = ch.open_recv(self.dst_channel, wire)
        except ch.ChannelError as exc:
            self.metrics.detections += 1
            self.log.emit("destination", "ABORT", exc.kind)
            raise Abort(exc.kind, str(exc)) from None
        self.log.emit("destination", "RECV", f"type={wire.content_type} seq={wire.seq} bytes={len(frame)}")
        self._dispatch(wire.content_type, plain)

    def _dispatch(self, ctype: int, plain: bytes):
        d = self.destination
        if ctype == ch.ContentType.MANIFEST:
            m = Manifest.from_json(plain)
            if d.initial_manifest is None:
                d.initial_manifest = m
            else:
                d.final_manifest = m
        elif ctype == ch.ContentType.FILES:
            d.files = _decode_files(plain)
        elif ctype == ch.ContentType.DISK:
            storage.diff_apply(d.disk, plain, in_place=True)
        elif ctype == ch.ContentType.MEMORY:
            storage.diff_apply(d.memory, plain, in_place=True)
        elif ctype == ch.ContentType.VTPM:
            key = self.dst_channel.export_key(b"vtpm-transport")
            floor = d.final_manifest.vtpm_counter if d.final_manifest else None
            try:
                d.vtpm = vtpm.unseal_state(plain, key, min_counter=floor)
            except vtpm.VtpmError as exc:
                self.violations.append(Violation("vtpm", "sealed-state", None, None, str(exc)))
        elif ctype == ch.ContentType.CONTROL and plain == b"commit-request":
            d.commit_requested = True

    # steps

    def _snapshot_and_flag(self) -> Manifest:
        """Integrity analyzer on the source: check owner-declared hashes, flag
        and quarantine failures, and build the transfer view of the files."""
        files = {
            "config": dict(self.vm.config_files),
            "system": dict(self.vm.system_files),
            "data": dict(self.vm.data_files),
        }
        for cls in ("system", "data"):
            for name, data in sorted(files[cls].items()):
                want = self.vm.declared_hashes.get(f"{cls}/{name}")
                if want is None or want == hexdigest(data):
                    continue
                self.violations.append(
                    Violation(cls, name, want, hexdigest(data), "declared-hash-mismatch")
                )
                view = {f"{cls}/{name}": data}
                rec = flag_and_quarantine(f"{cls}/{name}", data, "declared-hash-mismatch",
                                          self.quarantine, view)
                files[cls][name] = view[f"{cls}/{name}"]
                self.flags.append(rec)
        self.transfer_files = files
        return self._source_manifest()

    def _source_manifest(self) -> Manifest:
        f = self.transfer_files
        return manifest_of(f["config"], f["system"], f["data"], self.disk_router.view(),
                           self.memory_router.view(), self.vm.vtpm)

    def _transfer(self, units: list, kind: str, workload_runs: bool) -> int:
        """Send ``units`` ((target, index) pairs) at chunks_per_tick; returns ticks used."""
        c = self.config.chunks_per_tick
        ticks = 0
        for start in range(0, max(len(units), 1), c):
            batch = units[start : start + c]
            for target, ctype, router in (
                ("disk", ch.ContentType.DISK, self.disk_router),
                ("memory", ch.ContentType.MEMORY, self.memory_router),
            ):
                idx = [i for t, i in batch if t == target]
                if not idx:
                    continue
                recs = tuple((i, router.io_read(i, storage.MIGRATION)[0]) for i in idx)
                diff = storage.DiffFile(router.disk.chunk_size, router.disk.disk_id, recs)
                self._send(diff.to_bytes(), ctype, kind)
            if workload_runs:
                self.workload.tick(self.log.tick)
            self.log.tick += 1
            ticks += 1
        return ticks

    def _drain(self) -> list:
        d = storage.dbt_drain(self.disk_router.dbt)
        m = storage.dbt_drain(self.memory_router.dbt)
        return [("disk", i) for i in sorted(d)] + [("memory", i) for i in sorted(m)]

    def _precopy(self):
        total = self.vm.chunk_count + self.vm.page_count
        stop_at = math.floor(self.config.stop_threshold * total)
        self._drain()
        pending = [("disk", i) for i in range(self.vm.chunk_count)]
        pending += [("memory", i) for i in range(self.vm.page_count)]
        while True:
            self._enter(Phase.PRECOPY, str(self.round))
            self._transfer(pending, "round0" if self.round == 0 else "diff", True)
            self.round += 1
            self.metrics.rounds = self.round
            pending = self._drain()
            self.metrics.dirty_per_round.append(len(pending))
            if len(pending) <= stop_at:
                self.metrics.converged = True
                break
            if self.round >= self.config.max_rounds:
                break
        return pending

    def _stop_and_copy(self, pending: list):
        self._enter(Phase.STOP_AND_COPY)
        self.workload.paused = True
        self.metrics.downtime_ticks += self._transfer(pending, "diff", False)
        self.source_final = (self.disk_router.view(), self.memory_router.view())

    def _vtpm_transfer(self, final_manifest: Manifest):
        self._enter(Phase.VTPM_TRANSFER)
        key = self.src_channel.export_key(b"vtpm-transport")
        sealed = vtpm.seal_state(self.vm.vtpm, key, nonce=self.rng.randbytes(vtpm.SEAL_NONCE_SIZE))
        self._send(sealed.to_bytes(), ch.ContentType.VTPM, "vtpm")
        self._send(b"commit-request", ch.ContentType.CONTROL)
        self.metrics.downtime_ticks += 1
        self.log.tick += 1

    def _attest_source(self):
        """Challenge the VM's vTPM before anything moves."""
        nonce = self.rng.randbytes(vtpm.NONCE_SIZE)
        q, self.vm.vtpm = vtpm.quote(self.vm.vtpm, nonce, (1 << vtpm.PCR_COUNT) - 1)
        vtpm.verify_quote(q, self.vm.vtpm.verifying_key, nonce, self.vm.vtpm.pcrs)

    def run(self) -> MigrationReport:
        try:
            self._enter(Phase.PRECHECK)
            try:
                self.rule = precheck(self.source, self.dest, self.vm, self.config.required_capabilities)
            except PrecheckError as exc:
                raise Abort(exc.kind, str(exc)) from None

            self._enter(Phase.AUTHORIZE)
            if self.policy_state is not None:
                resp = authorize_migration(self.requester, self.source, self.policy_state, self.vm.vm_id)
                if resp is not Response.YES:
                    raise Abort("unauthorized", f"{self.requester}: {resp.value}")

            self._enter(Phase.AUTHENTICATE)
            try:
                self.src_channel, self.dst_channel, self.evidence = ch.handshake(
                    self.source.identity, self.dest.identity, self.trust_root,
                    self.adversary, self.log, self.rng,
                )
            except ch.HandshakeFailure as exc:
                self.metrics.detections += 1
                raise Abort(exc.kind, str(exc)) from None
            # handshake frames count as protocol overhead
            self.metrics.overhead_bytes += self.log.sent_bytes("source")
            self._attest_source()

            self.destination = DestinationState(
                storage.VirtualDisk.zeros(self.vm.disk.disk_id, self.vm.chunk_count, self.vm.disk.chunk_size),
                storage.VirtualDisk.zeros(self.vm.memory.disk_id, self.vm.page_count, self.vm.memory.chunk_size),
            )
            self.disk_router.popularity.reset()
            initial = self._snapshot_and_flag()
            self._send(initial.to_json(), ch.ContentType.MANIFEST)
            self._send(_encode_files(self.transfer_files), ch.ContentType.FILES)

            pending = self._precopy()
            self._stop_and_copy(pending)
            final = self._source_manifest()
            self._send(final.to_json(), ch.ContentType.MANIFEST)
            self._vtpm_transfer(final)
            if not self.destination.commit_requested:
                raise Abort("incomplete-transfer", "commit request never arrived")

            self._enter(Phase.VERIFY)
            return self._verify_and_finish(initial, final)
        except Abort as exc:
            if self.phase is not Phase.ABORTED:
                self._enter(Phase.ABORTED, exc.reason)
            self.destination = None
            return self._report("aborted", exc.reason)

    def _verify_and_finish(self, initial: Manifest, final: Manifest) -> MigrationReport:
        d = self.destination
        if self.dest_fault is not None:
            self.dest_fault(d)
        if d.final_manifest is None or d.vtpm is None:
            self.violations.append(Violation("vtpm", "transfer", None, None, "missing state"))
            dest_manifest = None
        else:
            # file artefacts must not change while the VM migrates
            for v in compare_manifests(initial, final):
                if v.kind in ("config", "system", "data", "vtpm"):
                    self.violations.append(Violation(v.kind, v.name, v.expected, v.actual,
                                                     "changed during migration"))
            dest_manifest = snapshot_manifest(d.as_vm(self.vm.vm_id))
            found = compare_manifests(d.final_manifest, dest_manifest)
            self.violations.extend(found)
            self._flag_destination(found, d, d.final_manifest)

        z = self.disk_router.served
        self.metrics.replacement_reads = z[storage.REPLACEMENT]
        self.metrics.original_reads = z[storage.ORIGINAL]
        if self.violations:
            self._enter(Phase.ROLLED_BACK)
            self.destination = None
            return self._report("rolled_back", "verification-failed")

        self._enter(Phase.COMMIT)
        d.active = True
        self._zeroize_source()
        return self._report("committed", None)

    def _flag_destination(self, found: list, d: DestinationState, want: Manifest):
        for v in found:
            if v.kind in ("config", "system", "data"):
                data = d.files[v.kind].get(v.name, b"")
                self.flags.append(flag_and_quarantine(f"{v.kind}/{v.name}", data, "hash-mismatch",
                                                      self.quarantine, None))
                d.files[v.kind][v.name] = self.flags[-1].placeholder
            elif v.kind in ("disk", "memory"):
                arr = d.disk if v.kind == "disk" else d.memory
                digests = want.disk_chunks if v.kind == "disk" else want.memory_pages
                for i in range(arr.chunk_count):
                    if i >= len(digests) or hexdigest(arr.chunk(i)) != digests[i]:
                        self.flags.append(flag_and_quarantine(
                            f"{v.kind}/{i}", arr.chunk(i), "hash-mismatch", self.quarantine, None))

    def _zeroize_source(self):
        mem = self.memory_router
        mem.replacement.blocks.clear()
        mem.disk.chunks[:] = 0
        zero = storage.disk_manifest(np.zeros_like(mem.disk.chunks)).root
        self.metrics.source_zeroized = storage.disk_manifest(mem.view()).root == zero

    def _report(self, verdict: str, reason: Optional[str]) -> MigrationReport:
        self.metrics.bytes_sent = self.log.sent_bytes("source")
        self.metrics.ticks = self.log.tick
        if self.adversary is not None and self.adversary.config.eavesdrop:
            self.metrics.plaintext_leaks = count_leaks(self._sent_plain, self.adversary.observed)
        return MigrationReport(
            verdict=verdict,
            vm_id=self.vm.vm_id,
            reason=reason,
            phases=self.phase_names(),
            metrics=self.metrics,
            violations=list(self.violations),
            flags=list(self.flags),
            crypto_rule=self.rule or crypto_rule(self.vm),
            evaluation=self.evaluation,
            session_log_digest=self.log.digest(),
            scenario=self.scenario_name,
        )


def count_leaks(plaintexts, observed, window: int = 16, per_payload: int = 4) -> int:
    """Number of plaintext windows found verbatim in eavesdropped frames."""
    blob = b"\x00".join(observed)
    leaks = 0
    for p in plaintexts:
        if len(p) < window:
            leaks += p in blob if p else 0
            continue
        step = max(1, (len(p) - window) // max(1, per_payload - 1))
        for off in range(0, len(p) - window + 1, step)[:per_payload]:
            if p[off : off + window] in blob:
                leaks += 1
    return leaks
