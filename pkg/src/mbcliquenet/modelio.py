"""The MBCQ checkpoint archive and its compression report.

Layout (all multi-byte integers little-endian)::

    header   magic "MBCQ" | version u16 | mode u8 (0 deploy, 1 train) | reserved u8 (0)
    body     config_len u32 | config text (UTF-8)
             meta_len u32   | meta text (UTF-8, sorted "key = value" lines)
             record_count u32
             record*        name_len u16 | name | role u8 | dtype u8 | ndim u8
                            | dim u32 * ndim | payload_len u64 | payload
    trailer  CRC-32 (zlib polynomial) of the body, u32

Float payloads are raw little-endian IEEE values in C order; packed
payloads use the :func:`binary.pack_bits` layout.  Serialization is
canonical: the same network and optimizer state always give the same bytes.
"""
from __future__ import annotations

import csv
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binary import PackedBits, pack_bits, sign_binarize, unpack_bits
from .clique import BINARY, BN, FULL, MFILTER, DeployOnlyError, MBCliqueNet, NetworkConfig
from .training import OptimizerState

__all__ = [
    "ArchiveError",
    "DeployOnlyError",
    "ArchiveStats",
    "LoadedModel",
    "Record",
    "save_model",
    "load_model",
    "read_archive",
    "load_for_training",
    "compression_report",
    "CompressionReport",
]

MAGIC = b"MBCQ"
VERSION = 1
HEADER = struct.Struct("<4sHBB")
MODES = {"deploy": 0, "train": 1}

ROLE_MASTER, ROLE_PACKED, ROLE_MFILTER, ROLE_FP32, ROLE_BN = (
    "master-fp32", "binarized-packed", "mfilter-fp32", "fp32", "bn-state")
ROLE_CODES = {ROLE_MASTER: 1, ROLE_PACKED: 2, ROLE_MFILTER: 3, ROLE_FP32: 4, ROLE_BN: 5}
DTYPE_CODES = {"float32": 1, "float64": 2, "bits": 3}

OPT_PREFIX = "opt.velocity."
DATA_PREFIX = "data."


class ArchiveError(ValueError):
    """The archive is malformed, corrupt or inconsistent with its config."""


@dataclass
class Record:
    name: str
    role: str
    shape: tuple
    dtype: str  # "float32", "float64" or "bits"
    payload: bytes

    @property
    def weights(self) -> int:
        """Scalar count the record describes (bits count one each)."""
        return int(np.prod(self.shape)) if self.shape else 1

    def array(self) -> np.ndarray:
        if self.dtype == "bits":
            return unpack_bits(PackedBits(self.weights, self.payload), self.shape)
        return np.frombuffer(self.payload, dtype=np.dtype(self.dtype).newbyteorder("<")) \
            .astype(self.dtype).reshape(self.shape)


@dataclass
class ArchiveStats:
    path: str
    mode: str
    total_bytes: int
    role_bytes: dict


@dataclass
class LoadedModel:
    net: MBCliqueNet
    mode: str
    optimizer: OptimizerState | None
    meta: dict
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None


@dataclass
class _Archive:
    mode: str
    config_text: str
    meta: dict
    records: list = field(default_factory=list)


# --------------------------------------------------------------- encoding

def _float_record(name, role, arr) -> Record:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return Record(name, role, tuple(arr.shape), arr.dtype.name,
                  arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def _packed_record(name, bank) -> Record:
    packed = pack_bits(bank)
    return Record(name, ROLE_PACKED, tuple(bank.shape), "bits", packed.data)


def _meta_text(meta: dict) -> str:
    return "".join(f"{k} = {meta[k]}\n" for k in sorted(meta))


def _parse_meta(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _network_records(net: MBCliqueNet, mode: str) -> list[Record]:
    records = []
    for name, p in net.params.items():
        role = net.roles[name]
        if role == BN:
            continue  # written once per BN layer below
        if role == BINARY:
            if mode == "train":
                if not net.has_masters:
                    raise DeployOnlyError(
                        f"deploy-only archive: no master for {name}, cannot write a train archive"
                    )
                records.append(_float_record(name, ROLE_MASTER, p))
            records.append(_packed_record(name, net.binarized[name]))
        elif role == MFILTER:
            records.append(_float_record(name, ROLE_MFILTER, p))
        else:
            records.append(_float_record(name, ROLE_FP32, p))
    for name, st in net.bn.items():
        stacked = np.stack([st.gamma, st.beta, st.running_mean, st.running_var])
        records.append(_float_record(name, ROLE_BN, stacked))
    return records


def _encode(archive: _Archive) -> bytes:
    body = io.BytesIO()
    for text in (archive.config_text, _meta_text(archive.meta)):
        raw = text.encode("utf-8")
        body.write(struct.pack("<I", len(raw)))
        body.write(raw)
    body.write(struct.pack("<I", len(archive.records)))
    for rec in archive.records:
        name = rec.name.encode("utf-8")
        body.write(struct.pack("<H", len(name)))
        body.write(name)
        body.write(struct.pack("<BBB", ROLE_CODES[rec.role], DTYPE_CODES[rec.dtype], len(rec.shape)))
        body.write(struct.pack(f"<{len(rec.shape)}I", *rec.shape))
        body.write(struct.pack("<Q", len(rec.payload)))
        body.write(rec.payload)
    body = body.getvalue()
    header = HEADER.pack(MAGIC, VERSION, MODES[archive.mode], 0)
    return header + body + struct.pack("<I", zlib.crc32(body))


def save_model(net: MBCliqueNet, path, mode: str = "deploy", optimizer: OptimizerState | None = None,
               meta: dict | None = None, channel_mean=None, channel_std=None) -> ArchiveStats:
    """Write ``net`` to ``path``.

    ``deploy`` stores every binarized bank as packed bits and drops the
    masters.  ``train`` also stores the masters and, when given, the
    optimizer velocities and step.  Returns per-role payload byte totals.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be 'deploy' or 'train', got {mode!r}")
    records = _network_records(net, mode)
    meta = dict(meta or {})
    if mode == "train" and optimizer is not None:
        meta["optimizer_step"] = optimizer.step
        for name in net.params:
            v = optimizer.velocity.get(name)
            if v is not None:
                records.append(_float_record(OPT_PREFIX + name, ROLE_FP32, v))
    for key, value in (("channel_mean", channel_mean), ("channel_std", channel_std)):
        if value is not None:
            records.append(_float_record(DATA_PREFIX + key, ROLE_FP32, np.asarray(value, np.float32)))
    blob = _encode(_Archive(mode, net.config.to_text(), meta, records))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    role_bytes: dict[str, int] = {}
    for rec in records:
        role_bytes[rec.role] = role_bytes.get(rec.role, 0) + len(rec.payload)
    return ArchiveStats(str(path), mode, len(blob), role_bytes)


# --------------------------------------------------------------- decoding

class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ArchiveError(f"{self.path}: truncated at offset {self.pos + HEADER.size}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        st = struct.Struct("<" + fmt)
        return st.unpack(self.take(st.size))


def read_archive(path) -> _Archive:
    """Parse and validate an archive's framing, checksum and records."""
    blob = Path(path).read_bytes()
    if len(blob) < HEADER.size + 4:
        raise ArchiveError(f"{path}: file too short to be an archive")
    magic, version, mode_code, _ = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ArchiveError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ArchiveError(f"{path}: unknown format version {version}")
    modes = {v: k for k, v in MODES.items()}
    if mode_code not in modes:
        raise ArchiveError(f"{path}: unknown mode byte {mode_code}")
    body = blob[HEADER.size:-4]
    (stored,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != stored:
        raise ArchiveError(f"{path}: checksum mismatch, archive is corrupt")
    r = _Reader(body, path)
    (n,) = r.unpack("I")
    config_text = r.take(n).decode("utf-8")
    (n,) = r.unpack("I")
    meta = _parse_meta(r.take(n).decode("utf-8"))
    roles = {v: k for k, v in ROLE_CODES.items()}
    dtypes = {v: k for k, v in DTYPE_CODES.items()}
    (count,) = r.unpack("I")
    records = []
    for _ in range(count):
        (n,) = r.unpack("H")
        name = r.take(n).decode("utf-8")
        role_code, dtype_code, ndim = r.unpack("BBB")
        if role_code not in roles or dtype_code not in dtypes:
            raise ArchiveError(f"{path}: record {name!r} has unknown role/dtype code")
        shape = tuple(r.unpack(f"{ndim}I")) if ndim else ()
        (size,) = r.unpack("Q")
        rec = Record(name, roles[role_code], shape, dtypes[dtype_code], r.take(size))
        expect = ((rec.weights + 7) // 8 if rec.dtype == "bits"
                  else rec.weights * np.dtype(rec.dtype).itemsize)
        if size != expect:
            raise ArchiveError(f"{path}: record {name!r} has {size} payload bytes, shape implies {expect}")
        records.append(rec)
    if r.pos != len(body):
        raise ArchiveError(f"{path}: {len(body) - r.pos} trailing bytes after the last record")
    return _Archive(modes[mode_code], config_text, meta, records)


def _check_shape(path, name, got, want):
    if tuple(got) != tuple(want):
        raise ArchiveError(f"{path}: record {name!r} has shape {tuple(got)}, config implies {tuple(want)}")


def load_model(path) -> LoadedModel:
    """Rebuild a network (and optimizer state, for train archives) from ``path``."""
    arc = read_archive(path)
    try:
        config = NetworkConfig.from_text(arc.config_text)
    except ValueError as exc:
        raise ArchiveError(f"{path}: embedded config is invalid: {exc}") from exc
    by_role: dict[str, dict[str, Record]] = {}
    for rec in arc.records:
        by_role.setdefault(rec.role, {})[rec.name] = rec
    masters = by_role.get(ROLE_MASTER, {})
    packed = by_role.get(ROLE_PACKED, {})
    floats = [rec for rec in arc.records if rec.dtype != "bits"]
    dtype = np.dtype(floats[0].dtype) if floats else np.dtype(np.float32)
    net = MBCliqueNet(config, seed=0, dtype=dtype)
    used = set()
    for name, role in net.roles.items():
        if role == BN:
            continue
        want = net.params[name].shape
        if role == BINARY:
            if name not in packed:
                raise ArchiveError(f"{path}: missing packed record for {name!r}")
            bits = packed[name]
            _check_shape(path, name, bits.shape, want)
            bank = bits.array().astype(dtype)
            used.add((ROLE_PACKED, name))
            if arc.mode == "train":
                if name not in masters:
                    raise ArchiveError(f"{path}: train archive lacks master for {name!r}")
                master = masters[name].array()
                _check_shape(path, name, master.shape, want)
                if not np.array_equal(sign_binarize(master), bank):
                    raise ArchiveError(f"{path}: packed bits of {name!r} disagree with sign(master)")
                net.params[name][...] = master
                used.add((ROLE_MASTER, name))
            else:
                net.params[name][...] = bank
            net.binarized[name] = bank
        else:
            want_role = ROLE_MFILTER if role == MFILTER else ROLE_FP32
            rec = by_role.get(want_role, {}).get(name)
            if rec is None:
                raise ArchiveError(f"{path}: missing {want_role} record for {name!r}")
            _check_shape(path, name, rec.shape, want)
            net.params[name][...] = rec.array()
            used.add((want_role, name))
    for name, st in net.bn.items():
        rec = by_role.get(ROLE_BN, {}).get(name)
        if rec is None:
            raise ArchiveError(f"{path}: missing bn-state record for {name!r}")
        _check_shape(path, name, rec.shape, (4, st.channels))
        g, b, m, v = rec.array()
        st.gamma[...], st.beta[...] = g, b
        st.running_mean[...], st.running_var[...] = m, v
        used.add((ROLE_BN, name))
    if arc.mode == "deploy":
        net.has_masters = False
    optimizer = None
    extra = {}
    for rec in arc.records:
        if (rec.role, rec.name) in used:
            continue
        if rec.name.startswith(OPT_PREFIX) and rec.name[len(OPT_PREFIX):] in net.params:
            target = rec.name[len(OPT_PREFIX):]
            _check_shape(path, rec.name, rec.shape, net.params[target].shape)
            if optimizer is None:
                optimizer = OptimizerState(step=int(arc.meta.get("optimizer_step", 0)))
            optimizer.velocity[target] = rec.array().copy()
        elif rec.name.startswith(DATA_PREFIX):
            extra[rec.name[len(DATA_PREFIX):]] = rec.array().copy()
        else:
            raise ArchiveError(f"{path}: unexpected record {rec.name!r} ({rec.role})")
    if optimizer is None and arc.mode == "train" and "optimizer_step" in arc.meta:
        optimizer = OptimizerState(step=int(arc.meta["optimizer_step"]))
    return LoadedModel(net, arc.mode, optimizer, arc.meta,
                       extra.get("channel_mean"), extra.get("channel_std"))


def load_for_training(path) -> LoadedModel:
    """Like :func:`load_model`, refusing archives that cannot resume training."""
    loaded = load_model(path)
    if loaded.mode != "train":
        raise DeployOnlyError(
            f"{path}: deploy-only archive, full-precision masters are absent so training cannot resume"
        )
    return loaded


# -------------------------------------------------------------- reporting

CSV_COLUMNS = ("record", "role", "weights", "bytes", "ratio")


@dataclass
class CompressionReport:
    """Per-record and per-role sizes against an all-fp32 baseline.

    ``ratio`` is ``4 * weights / bytes``: 32.0 for a packed record whose
    count is a multiple of 8, 1.0 for a float32 record.  Summary rows:

    * ``modulation_3x3``: 3x3 bank weights a k=1 network of the same widths
      would store, divided by the stored (width/k) banks, i.e. exactly k.
    * ``combined_3x3``: fp32 bytes of those k=1 banks over the bytes actually
      stored for the 3x3 banks; packing times modulation.
    * ``mfilter_overhead``: the M-filters the modulation itself costs.
    * ``archive``: all-fp32 bytes of every stored scalar over stored bytes.
    """

    rows: list
    summary: list
    mode: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows + self.summary:
            w.writerow([row[0], row[1], row[2], row[3], f"{row[4]:.6g}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'record':<28} {'role':<17} {'weights':>10} {'bytes':>10} {'ratio':>8}"]
        for row in self.rows + self.summary:
            lines.append(f"{row[0]:<28} {row[1]:<17} {row[2]:>10} {row[3]:>10} {row[4]:>8.4g}")
        return "\n".join(lines) + "\n"

    def ratio(self, record: str) -> float:
        for row in self.rows + self.summary:
            if row[0] == record:
                return row[4]
        raise KeyError(record)


def _ratio(weights: int, nbytes: int) -> float:
    return 4.0 * weights / nbytes if nbytes else 1.0


def compression_report(archive) -> CompressionReport:
    """Report a saved archive (path) or the in-memory network's deploy form."""
    if isinstance(archive, MBCliqueNet):
        arc = _Archive("deploy", archive.config.to_text(), {}, _network_records(archive, "deploy"))
    else:
        arc = read_archive(archive)
    config = NetworkConfig.from_text(arc.config_text)
    rows, per_role = [], {}
    for rec in arc.records:
        if rec.name.startswith(DATA_PREFIX):
            continue
        nbytes = len(rec.payload)
        rows.append((rec.name, rec.role, rec.weights, nbytes, _ratio(rec.weights, nbytes)))
        w, b = per_role.get(rec.role, (0, 0))
        per_role[rec.role] = (w + rec.weights, b + nbytes)
    for role in sorted(per_role):
        w, b = per_role[role]
        rows.append((f"total:{role}", role, w, b, _ratio(w, b)))
    by_name = {}
    for rec in arc.records:
        # inference storage: the packed form wins over a master of the same name
        if rec.role in (ROLE_PACKED, ROLE_FP32, ROLE_MFILTER, ROLE_BN):
            by_name[rec.name] = rec
    unmodulated = stored_w = stored_b = m_w = m_b = 0
    for b, blk in enumerate(config.blocks):
        for i in range(1, blk.n_layers + 1):
            rec = by_name[f"b{b}.l{i}.conv3"]
            unmodulated += blk.width * blk.bottleneck * blk.kernel ** 2
            stored_w += rec.weights
            stored_b += len(rec.payload)
        rec = by_name[f"b{b}.m"]
        m_w += rec.weights
        m_b += len(rec.payload)
    summary = [
        ("modulation_3x3", "summary", stored_w, stored_b, unmodulated / stored_w),
        ("combined_3x3", "summary", unmodulated, stored_b, _ratio(unmodulated, stored_b)),
        ("mfilter_overhead", "summary", m_w, m_b, _ratio(m_w, m_b)),
    ]
    inference = [rec for rec in by_name.values() if not rec.name.startswith((OPT_PREFIX, DATA_PREFIX))]
    all_w = sum(r.weights for r in inference)
    all_b = sum(len(r.payload) for r in inference)
    summary.append(("archive", "summary", all_w, all_b, _ratio(all_w, all_b)))
    return CompressionReport(rows, summary, arc.mode)
