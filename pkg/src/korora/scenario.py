"""Scenario and policy fixture loading, attack presets, reference replay."""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import channel as ch
from . import migration as mig
from . import storage, vtpm
from .policy import Access, IntegrityLevel, PolicyError, SecurityLevel, SystemState, parse_access

SCENARIO_FORMAT = "korora_scenario_v1"
POLICY_FORMAT = "korora_policy_v1"

PRESETS = (
    "none",
    "eavesdrop",
    "tamper-precopy",
    "tamper-vtpm",
    "replay-handshake",
    "replay-data",
    "impersonate",
    "drop",
)


class ScenarioError(ValueError):
    pass


_ID = {"type": "string", "minLength": 1, "maxLength": 128, "pattern": r"^[A-Za-z0-9_.:\-]+$"}
_FILES = {"type": "object", "additionalProperties": {"type": "string"}}

POLICY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["format", "clearance"],
    "properties": {
        "format": {"const": POLICY_FORMAT},
        "clearance": {
            "type": "object",
            "propertyNames": _ID,
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "required": ["level"],
                "properties": {
                    "level": {"enum": [lvl.name for lvl in IntegrityLevel]},
                    "categories": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
                },
            },
        },
        "matrix": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["subject", "object", "attrs"],
                "properties": {
                    "subject": _ID,
                    "object": _ID,
                    "attrs": {"type": "string", "pattern": "^[rwae]*$"},
                },
            },
        },
        "triples": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["subject", "object", "attr"],
                "properties": {
                    "subject": _ID,
                    "object": _ID,
                    "attr": {"enum": ["r", "w", "a", "e"]},
                },
            },
        },
        "hierarchy": {"type": "object", "propertyNames": _ID, "additionalProperties": _ID},
    },
}

_HOST = {
    "type": "object",
    "additionalProperties": False,
    "required": ["host_id"],
    "properties": {
        "host_id": _ID,
        "hypervisor": {"type": "string", "minLength": 1},
        "capabilities": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
        "memory": {"type": "integer", "minimum": 0, "maximum": 1 << 24},
        "storage": {"type": "integer", "minimum": 0, "maximum": 1 << 24},
        "acl": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
        },
    },
}

SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["format", "seed", "vm", "hosts"],
    "properties": {
        "format": {"const": SCENARIO_FORMAT},
        "name": {"type": "string", "maxLength": 200},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**63 - 1},
        "vm": {
            "type": "object",
            "additionalProperties": False,
            "required": ["vm_id", "chunk_count", "page_count"],
            "properties": {
                "vm_id": _ID,
                "chunk_size": {"enum": [2**k for k in range(6, 17)]},
                "chunk_count": {"type": "integer", "minimum": 1, "maximum": 1 << 16},
                "page_count": {"type": "integer", "minimum": 1, "maximum": 1 << 16},
                "config_files": _FILES,
                "system_files": _FILES,
                "data_files": _FILES,
                "corrupt_data_files": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
            },
        },
        "workload": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "distribution": {"enum": ["uniform", "zipf"]},
                "zipf_s": {"type": "number", "exclusiveMinimum": 0, "maximum": 10},
                "ops_per_tick": {"type": "integer", "minimum": 0, "maximum": 4096},
                "write_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "transfer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "chunks_per_tick": {"type": "integer", "minimum": 1, "maximum": 1 << 16},
                "stop_threshold": {"type": "number", "minimum": 0, "maximum": 1},
                "max_rounds": {"type": "integer", "minimum": 1, "maximum": 1000},
            },
        },
        "popularity_threshold": {
            "oneOf": [{"type": "integer", "minimum": 1}, {"const": "inf"}]
        },
        "adversary": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": list(PRESETS)},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "requester": _ID,
        "required_capabilities": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
        "hosts": {
            "type": "object",
            "additionalProperties": False,
            "required": ["source", "destination"],
            "properties": {"source": _HOST, "destination": _HOST},
        },
        "policy": POLICY_SCHEMA,
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "string"} for k in mig.EVALUATION_DEFAULT},
        },
    },
}


def _validate(doc, schema, what: str):
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ScenarioError(f"{what}: field '{where}': {err.message}")


def _read_json(path, what: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"{what}: cannot read {path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{what}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


# -- policy fixtures --------------------------------------------------------


def policy_from_dict(doc: dict) -> SystemState:
    _validate(doc, POLICY_SCHEMA, "policy")
    clearance = {
        ident: SecurityLevel(IntegrityLevel[spec["level"]], frozenset(spec.get("categories", ())))
        for ident, spec in doc["clearance"].items()
    }
    matrix = {}
    for row in doc.get("matrix", ()):
        key = (row["subject"], row["object"])
        matrix[key] = matrix.get(key, frozenset()) | parse_access(row["attrs"])
    triples = {(t["subject"], t["object"], Access(t["attr"])) for t in doc.get("triples", ())}
    try:
        return SystemState(triples, matrix, clearance, doc.get("hierarchy", {}))
    except PolicyError as exc:
        raise ScenarioError(f"policy: {exc}") from None


def policy_to_dict(state: SystemState) -> dict:
    return {
        "format": POLICY_FORMAT,
        "clearance": {
            k: {"level": v.level.name, "categories": sorted(v.categories)}
            for k, v in sorted(state.clearance.items())
        },
        "matrix": [
            {"subject": s, "object": o, "attrs": "".join(sorted(x.value for x in g))}
            for (s, o), g in sorted(state.matrix.items())
        ],
        "triples": [
            {"subject": s, "object": o, "attr": x.value}
            for s, o, x in sorted(state.triples, key=lambda t: (t[0], t[1], t[2].value))
        ],
        "hierarchy": dict(sorted(state.hierarchy.items())),
    }


def load_policy(path) -> SystemState:
    return policy_from_dict(_read_json(path, "policy"))


# -- scenarios --------------------------------------------------------------


def _seed_bytes(seed: int, label: str) -> bytes:
    return hashlib.sha256(f"korora:{seed}:{label}".encode()).digest()


@dataclass
class Built:
    """Everything one run needs, plus what the reference replay needs."""

    session: mig.MigrationSession
    initial_disk: np.ndarray
    initial_memory: np.ndarray
    initial_files: dict
    initial_pcrs: tuple
    ca: ch.CertificateAuthority
    preset: str
    adversary: ch.Adversary = None


@dataclass
class Scenario:
    doc: dict
    path: str = ""

    @property
    def name(self) -> str:
        return self.doc.get("name", Path(self.path).stem if self.path else "scenario")

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def preset(self) -> str:
        return self.doc.get("adversary", {}).get("preset", "none")

    def config(self, seed: int) -> mig.MigrationConfig:
        w = self.doc.get("workload", {})
        t = self.doc.get("transfer", {})
        theta = self.doc.get("popularity_threshold", 3)
        return mig.MigrationConfig(
            chunks_per_tick=t.get("chunks_per_tick", 32),
            stop_threshold=t.get("stop_threshold", 0.02),
            max_rounds=t.get("max_rounds", 30),
            popularity_threshold=math.inf if theta == "inf" else theta,
            ops_per_tick=w.get("ops_per_tick", 4),
            write_fraction=w.get("write_fraction", 0.5),
            distribution=w.get("distribution", "uniform"),
            zipf_s=w.get("zipf_s", 1.2),
            required_capabilities=frozenset(self.doc.get("required_capabilities", ["vtpm"])),
            seed=seed,
        )

    def build(self, seed: int = None, preset: str = None, adversary_seed: int = None,
              quarantine: mig.QuarantineStore = None, dest_fault=None) -> Built:
        seed = self.seed if seed is None else seed
        preset = self.preset if preset is None else preset
        if preset not in PRESETS:
            raise ScenarioError(f"unknown adversary preset {preset!r}")
        if adversary_seed is None:
            adversary_seed = self.doc.get("adversary", {}).get("seed", seed)
        v = self.doc["vm"]
        rng = np.random.default_rng(seed)
        chunk_size = v.get("chunk_size", storage.DEFAULT_CHUNK_SIZE)
        disk = storage.VirtualDisk.random(v["vm_id"] + "-disk", v["chunk_count"], chunk_size, rng)
        memory = storage.VirtualDisk.random(v["vm_id"] + "-mem", v["page_count"], chunk_size, rng)

        enc = lambda files: {k: s.encode() for k, s in sorted(files.items())}
        config_files = enc(v.get("config_files", {}))
        system_files = enc(v.get("system_files", {}))
        data_files = enc(v.get("data_files", {}))
        declared = {f"system/{k}": mig.hexdigest(d) for k, d in system_files.items()}
        declared.update({f"data/{k}": mig.hexdigest(d) for k, d in data_files.items()})
        for name in v.get("corrupt_data_files", ()):
            if name not in data_files:
                raise ScenarioError(f"vm/corrupt_data_files: unknown data file {name!r}")
            buf = bytearray(data_files[name] or b"\x00")
            buf[len(buf) // 2] ^= 0x20
            data_files[name] = bytes(buf)

        tpm = vtpm.VtpmInstance.create(v["vm_id"], _seed_bytes(seed, "vtpm"))
        for name, data in system_files.items():
            tpm = vtpm.pcr_extend(tpm, 0, name.encode() + b"\x00" + data)
        for name, data in config_files.items():
            tpm = vtpm.pcr_extend(tpm, 1, name.encode() + b"\x00" + data)

        vm = mig.VmSpec(v["vm_id"], disk, memory, tpm, config_files, system_files, data_files, declared)

        ca = ch.CertificateAuthority("korora-ca", _seed_bytes(seed, "ca"))
        hosts = {}
        for role in ("source", "destination"):
            h = self.doc["hosts"][role]
            hosts[role] = mig.HostDescriptor(
                h["host_id"],
                ca.issue(h["host_id"], _seed_bytes(seed, "host:" + h["host_id"])),
                h.get("hypervisor", mig.XEN),
                frozenset(h.get("capabilities", [])),
                h.get("memory", 0),
                h.get("storage", 0),
                frozenset(tuple(p) for p in h.get("acl", [])),
            )

        policy_state = policy_from_dict(self.doc["policy"]) if "policy" in self.doc else None
        config = self.config(seed)
        adversary = make_adversary(preset, adversary_seed, config, vm, hosts, ca)
        evaluation = dict(mig.EVALUATION_DEFAULT)
        evaluation.update(self.doc.get("evaluation", {}))
        session = mig.MigrationSession(
            hosts["source"], hosts["destination"], vm, ca.root, config,
            requester=self.doc.get("requester", "admin"),
            policy_state=policy_state,
            adversary=adversary,
            quarantine=quarantine,
            dest_fault=dest_fault,
            evaluation=evaluation,
            scenario_name=self.name,
        )
        return Built(
            session,
            disk.chunks.copy(),
            memory.chunks.copy(),
            {"config": dict(config_files), "system": dict(system_files), "data": dict(data_files)},
            tpm.pcrs,
            ca,
            preset,
            adversary,
        )


def scenario_from_dict(doc: dict, path: str = "") -> Scenario:
    _validate(doc, SCENARIO_SCHEMA, "scenario")
    sc = Scenario(doc, path)
    if "policy" in doc:
        policy_from_dict(doc["policy"])
    return sc


def load_scenario(path) -> Scenario:
    return scenario_from_dict(_read_json(path, "scenario"), str(path))


# -- adversaries ------------------------------------------------------------


def make_adversary(preset: str, seed: int, config: mig.MigrationConfig, vm: mig.VmSpec,
                   hosts: dict, ca: ch.CertificateAuthority) -> ch.Adversary:
    """An adversary for a named preset; indices are drawn from ``seed``."""
    r = random.Random(f"preset:{preset}:{seed}")
    c = config.chunks_per_tick
    # data frames 0 and 1 are the manifest and file bundle; round 0 follows
    round0 = max(1, math.ceil((vm.chunk_count + vm.page_count) / c))
    disk_msgs = max(1, math.ceil(vm.chunk_count / c))
    cfg = ch.AdversaryConfig(seed=seed)
    kwargs = {}
    if preset == "eavesdrop":
        cfg = ch.AdversaryConfig(eavesdrop=True, seed=seed)
    elif preset == "tamper-precopy":
        cfg = ch.AdversaryConfig(tamper=(ch.Tamper(ch.ContentType.DISK, r.randrange(disk_msgs)),), seed=seed)
    elif preset == "tamper-vtpm":
        cfg = ch.AdversaryConfig(tamper=(ch.Tamper(ch.ContentType.VTPM, 0),), seed=seed)
    elif preset == "replay-data":
        cfg = ch.AdversaryConfig(replay=(r.randrange(2, 2 + round0),), seed=seed)
    elif preset == "drop":
        cfg = ch.AdversaryConfig(drop=(r.randrange(1, 2 + round0),), seed=seed)
    elif preset == "impersonate":
        cfg = ch.AdversaryConfig(impersonate=True, seed=seed)
        kwargs["fake_identity"] = ch.self_signed_identity(
            hosts["destination"].host_id, _seed_bytes(seed, "forger"), issuer=ca.name
        )
    elif preset == "replay-handshake":
        cfg = ch.AdversaryConfig(replay_handshake=True, seed=seed)
        # a passive capture of an earlier legitimate session between the same hosts
        spy = ch.Adversary(ch.AdversaryConfig(eavesdrop=True))
        ch.handshake(hosts["source"].identity, hosts["destination"].identity, ca.root,
                     spy, rng=random.Random(f"earlier:{seed}"))
        kwargs["stale_hello"] = spy.observed[1]
    return ch.Adversary(cfg, **kwargs)


# -- reference replay -------------------------------------------------------


def replay_writes(initial_disk: np.ndarray, initial_memory: np.ndarray, ops) -> tuple:
    """Flat-array model: apply every logged write in order."""
    disk = initial_disk.copy()
    mem = initial_memory.copy()
    for _, target, idx, data in ops:
        arr = disk if target == "disk" else mem
        arr[idx] = np.frombuffer(data, dtype=np.uint8)
    return disk, mem


def silent_corruption(built: Built, report: mig.MigrationReport) -> bool:
    """Committed, yet the destination differs from the reference replay."""
    if report.verdict != "committed":
        return False
    s = built.session
    d = s.destination
    disk, mem = replay_writes(built.initial_disk, built.initial_memory, s.workload.ops)
    files_ok = all(d.files[k] == s.transfer_files[k] for k in ("config", "system", "data"))
    return not (
        np.array_equal(d.disk.chunks, disk)
        and np.array_equal(d.memory.chunks, mem)
        and files_ok
        and d.vtpm is not None
        and d.vtpm.pcrs == built.initial_pcrs
    )
