"""Labeled datasets for the channel surrogate and the perturber sensor.

Two binary formats (little-endian) are used:

``RSCD`` (channel records)::

    magic "RSCD" | version u32 | count u64 | n_bits u32 | n_freq u32
    count x { n_bits x u8 bit | theta f64 | n_freq x (re f64, im f64) }

``RSSD`` (sensing records)::

    magic "RSSD" | version u32 | count u64 | n_bits u32 | n_probes u32 | n_freq u32
    count x { theta f64 | n_probes x n_freq x (re f64, im f64) }

Every record draws its randomness from its own generator, seeded by
:func:`record_seed`, so the file bytes do not depend on how many worker
threads produced them.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DegenerateSceneError, FormatError, InvalidArgumentError
from .physics import FrequencyGrid
from .scene import (TWO_PI, RisConfiguration, SceneSpec, canonical_angle, random_config)
from .simulator import ChannelSimulator

log = logging.getLogger(__name__)

CE_MAGIC = b"RSCD"
SENSING_MAGIC = b"RSSD"
DATASET_VERSION = 1
N_PROBES = 10
_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def record_seed(seed: int, index: int) -> int:
    """64-bit seed of record ``index``: ``splitmix64(splitmix64(seed) xor index)``."""
    return splitmix64(splitmix64(int(seed) & _MASK) ^ (int(index) & _MASK))


def record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(record_seed(seed, index))


@dataclass(frozen=True)
class ProbeSet:
    """Fixed series of random RIS configurations used for sensing."""

    configs: tuple[RisConfiguration, ...]
    seed: int

    @classmethod
    def from_seed(cls, seed: int, n_probes: int = N_PROBES, n_bits: int = 25) -> "ProbeSet":
        rng = record_rng(seed, 0)
        return cls(tuple(random_config(rng, n_bits) for _ in range(n_probes)), int(seed))

    def __len__(self):
        return len(self.configs)

    def to_dict(self) -> dict:
        return {"schema": "risadapt.probes", "version": 1, "seed": self.seed,
                "configs": [list(c.bits) for c in self.configs]}

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeSet":
        if d.get("schema") != "risadapt.probes":
            raise FormatError(f"not a probe-set file (schema={d.get('schema')!r})")
        return cls(tuple(RisConfiguration(tuple(b)) for b in d["configs"]), int(d["seed"]))

    def save(self, path, manifest=None):
        d = self.to_dict()
        if manifest is not None:
            d["manifest"] = manifest
        Path(path).write_text(json.dumps(d, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ProbeSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class CeRecord:
    config: RisConfiguration
    theta: float
    spectrum: np.ndarray


@dataclass(frozen=True)
class SensingRecord:
    theta: float
    spectra: np.ndarray  # (n_probes, n_freq)


@dataclass
class CeDataset:
    """Column-oriented store of ``{C, theta, H_RX-TX}`` records."""

    bits: np.ndarray  # (n, n_bits) uint8
    theta: np.ndarray  # (n,)
    spectra: np.ndarray  # (n, n_freq) complex

    def __len__(self):
        return len(self.theta)

    @property
    def n_bits(self) -> int:
        return self.bits.shape[1]

    @property
    def n_freq(self) -> int:
        return self.spectra.shape[1]

    def records(self):
        for b, t, s in zip(self.bits, self.theta, self.spectra):
            yield CeRecord(RisConfiguration(tuple(b)), float(t), s.copy())

    @classmethod
    def from_records(cls, records, n_bits=25, n_freq=None) -> "CeDataset":
        records = list(records)
        if not records:
            return cls(np.zeros((0, n_bits), np.uint8), np.zeros(0),
                       np.zeros((0, n_freq or 0), complex))
        return cls(np.array([r.config.as_array() for r in records], dtype=np.uint8),
                   np.array([r.theta for r in records], dtype=float),
                   np.array([r.spectrum for r in records], dtype=complex))


@dataclass
class SensingDataset:
    """Column-oriented store of ``{theta, {H_AR-TX,i}}`` records."""

    theta: np.ndarray  # (n,)
    spectra: np.ndarray  # (n, n_probes, n_freq) complex
    n_bits: int = 25

    def __len__(self):
        return len(self.theta)

    @property
    def n_probes(self) -> int:
        return self.spectra.shape[1]

    @property
    def n_freq(self) -> int:
        return self.spectra.shape[2]

    def records(self):
        for t, s in zip(self.theta, self.spectra):
            yield SensingRecord(float(t), s.copy())

    @classmethod
    def from_records(cls, records, n_bits=25, n_probes=N_PROBES, n_freq=None):
        records = list(records)
        if not records:
            return cls(np.zeros(0), np.zeros((0, n_probes, n_freq or 0), complex), n_bits)
        return cls(np.array([r.theta for r in records], dtype=float),
                   np.array([r.spectra for r in records], dtype=complex), n_bits)


# ---------------------------------------------------------------------------
# Generation


def draw_ce_inputs(seed: int, index: int, n_bits: int = 25):
    """Random ``(C, theta)`` of CE record ``index``."""
    rng = record_rng(seed, index)
    config = random_config(rng, n_bits)
    theta = canonical_angle(rng.uniform(0.0, TWO_PI))
    return config, theta


def draw_sensing_theta(seed: int, index: int) -> float:
    return canonical_angle(record_rng(seed, index).uniform(0.0, TWO_PI))


def _parallel_map(fn, n: int, threads: int):
    if threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def _guarded(fn, what):
    def run(i):
        try:
            return fn(i)
        except DegenerateSceneError as exc:
            raise DegenerateSceneError(f"{what} record {i} aborted: {exc}") from exc
    return run


def _progress(i, n, what):
    if n >= 1000 and (i + 1) % (n // 10) == 0:
        log.info("%s: %d/%d records", what, i + 1, n)


def generate_ce_dataset(spec: SceneSpec, grid: FrequencyGrid, n: int, seed: int,
                        path=None, threads: int = 1, simulator: ChannelSimulator | None = None
                        ) -> CeDataset:
    """Simulate ``n`` channel records with random ``C`` and ``theta``.

    A failing record aborts the whole run with its index in the message.
    """
    if n < 1:
        raise InvalidArgumentError("dataset size must be >= 1")
    sim = simulator or ChannelSimulator(spec, grid)

    def one(i):
        config, theta = draw_ce_inputs(seed, i, spec.n_bits)
        h = sim.spectrum(config, theta, "tx", "rx")
        _progress(i, n, "CE dataset")
        return config.as_array(), theta, h

    rows = _parallel_map(_guarded(one, "CE"), n, threads)
    ds = CeDataset(np.array([r[0] for r in rows], dtype=np.uint8),
                   np.array([r[1] for r in rows]), np.array([r[2] for r in rows]))
    if path is not None:
        write_dataset(ds, path)
    return ds


def simulate_probes(sim: ChannelSimulator, probes: ProbeSet, theta: float) -> np.ndarray:
    """TX to AR spectra for every probe configuration, shape ``(n_probes, n_freq)``."""
    state = sim.theta_state(theta)
    return np.array([sim.channels(state, c, "tx", ("ar",))[0] for c in probes.configs])


def generate_sensing_dataset(spec: SceneSpec, grid: FrequencyGrid, probes: ProbeSet, n: int,
                             seed: int, path=None, threads: int = 1,
                             simulator: ChannelSimulator | None = None) -> SensingDataset:
    """Simulate ``n`` sensing records with random ``theta`` under the fixed probes."""
    if n < 1:
        raise InvalidArgumentError("dataset size must be >= 1")
    if len(probes) != N_PROBES:
        raise InvalidArgumentError(f"expected {N_PROBES} probe configurations, got {len(probes)}")
    sim = simulator or ChannelSimulator(spec, grid)

    def one(i):
        theta = draw_sensing_theta(seed, i)
        out = simulate_probes(sim, probes, theta)
        _progress(i, n, "sensing dataset")
        return theta, out

    rows = _parallel_map(_guarded(one, "sensing"), n, threads)
    ds = SensingDataset(np.array([r[0] for r in rows]), np.array([r[1] for r in rows]),
                        spec.n_bits)
    if path is not None:
        write_dataset(ds, path)
    return ds


# ---------------------------------------------------------------------------
# Serialization


def _ce_dtype(n_bits, n_freq):
    return np.dtype([("bits", "u1", (n_bits,)), ("theta", "<f8"), ("h", "<f8", (n_freq, 2))])


def _sensing_dtype(n_probes, n_freq):
    return np.dtype([("theta", "<f8"), ("h", "<f8", (n_probes, n_freq, 2))])


CE_HEADER = struct.Struct("<4sIQII")
SENSING_HEADER = struct.Struct("<4sIQIII")


def ce_file_size(n: int, n_bits: int, n_freq: int) -> int:
    return CE_HEADER.size + n * (n_bits + 8 + 16 * n_freq)


def sensing_file_size(n: int, n_probes: int, n_freq: int) -> int:
    return SENSING_HEADER.size + n * (8 + 16 * n_probes * n_freq)


def _complex_pairs(h):
    return np.stack([h.real, h.imag], axis=-1)


def dumps_dataset(ds) -> bytes:
    if isinstance(ds, CeDataset):
        rec = np.zeros(len(ds), dtype=_ce_dtype(ds.n_bits, ds.n_freq))
        if len(ds):
            if np.any(ds.bits > 1):
                raise InvalidArgumentError("RIS bits must be 0 or 1")
            rec["bits"], rec["theta"], rec["h"] = ds.bits, ds.theta, _complex_pairs(ds.spectra)
        header = CE_HEADER.pack(CE_MAGIC, DATASET_VERSION, len(ds), ds.n_bits, ds.n_freq)
    elif isinstance(ds, SensingDataset):
        rec = np.zeros(len(ds), dtype=_sensing_dtype(ds.n_probes, ds.n_freq))
        if len(ds):
            rec["theta"], rec["h"] = ds.theta, _complex_pairs(ds.spectra)
        header = SENSING_HEADER.pack(SENSING_MAGIC, DATASET_VERSION, len(ds), ds.n_bits,
                                     ds.n_probes, ds.n_freq)
    else:
        raise InvalidArgumentError(f"cannot serialize {type(ds).__name__}")
    if len(ds) and not np.all(np.isfinite(rec["h"])):
        raise InvalidArgumentError("dataset contains non-finite spectra")
    return header + rec.tobytes()


def loads_dataset(data: bytes, expect: bytes | None = None):
    """Parse dataset bytes; ``expect`` optionally pins the magic (``b"RSCD"``/``b"RSSD"``)."""
    magic = data[:4]
    if len(magic) < 4:
        raise FormatError("truncated dataset header", len(data))
    if magic not in (CE_MAGIC, SENSING_MAGIC):
        raise FormatError(f"bad magic {magic!r}; expected {CE_MAGIC!r} or {SENSING_MAGIC!r}", 0)
    if expect is not None and magic != expect:
        raise FormatError(f"found a {magic.decode()} dataset where a {expect.decode()} "
                          "dataset was expected", 0)
    header = CE_HEADER if magic == CE_MAGIC else SENSING_HEADER
    if len(data) < header.size:
        raise FormatError("truncated dataset header", len(data))
    fields = header.unpack_from(data)
    version, count = fields[1], fields[2]
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    if magic == CE_MAGIC:
        n_bits, n_freq = fields[3:]
        dtype = _ce_dtype(n_bits, n_freq)
    else:
        n_bits, n_probes, n_freq = fields[3:]
        dtype = _sensing_dtype(n_probes, n_freq)
    body = len(data) - header.size
    if body < count * dtype.itemsize:
        complete = body // dtype.itemsize
        raise FormatError(
            f"truncated dataset: header announces {count} records, only {complete} complete",
            header.size + complete * dtype.itemsize)
    if body > count * dtype.itemsize:
        raise FormatError("trailing bytes after the last record",
                          header.size + count * dtype.itemsize)
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=header.size)
    h = rec["h"][..., 0] + 1j * rec["h"][..., 1]
    if magic == CE_MAGIC:
        if count and np.any(rec["bits"] > 1):
            raise FormatError("RIS bit outside {0, 1}", header.size)
        return CeDataset(rec["bits"].copy(), rec["theta"].copy(), h)
    return SensingDataset(rec["theta"].copy(), h, n_bits)


def write_dataset(ds, path) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def read_dataset(path, expect: bytes | None = None):
    return loads_dataset(Path(path).read_bytes(), expect)


def export_csv(ds, path) -> None:
    """Human-readable dump: one row per record, complex values as re/im column pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if isinstance(ds, CeDataset):
            w.writerow([f"bit_{i}" for i in range(ds.n_bits)] + ["theta"]
                       + [f"{p}_{k}" for k in range(ds.n_freq) for p in ("re", "im")])
            for b, t, h in zip(ds.bits, ds.theta, ds.spectra):
                w.writerow(list(map(int, b)) + [repr(float(t))]
                           + [repr(float(x)) for x in _complex_pairs(h).ravel()])
        else:
            w.writerow(["theta"] + [f"p{j}_{p}_{k}" for j in range(ds.n_probes)
                                    for k in range(ds.n_freq) for p in ("re", "im")])
            for t, h in zip(ds.theta, ds.spectra):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in _complex_pairs(h).ravel()])

