"""On-disk snapshot container, partition planning, and per-rank block I/O.

A dataset is one UTF-8 manifest plus one or more binary shards. Each shard
holds a contiguous global row range in column-major order (a whole snapshot
column is contiguous within a shard) with a 64-byte header. Global rows are
variable-major: row ``g`` holds variable ``g // rows_per_var`` at spatial
cell ``g % rows_per_var``.

Partition plans split rows across ranks either directly (row-balanced) or by
splitting cells so each rank holds every variable for a contiguous cell range
(variable-aligned, the layout centering requires).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, InvalidPartitionError, UsageError

SHARD_MAGIC = b"DOPINFD1"
FORMAT_VERSION = 1
SCALAR_F64 = 1
LAYOUT_VARIABLE_MAJOR = 1
HEADER_BYTES = 64
MANIFEST_TAG = "dopinf-manifest v1"

ROW_BALANCED = "row-balanced"
VARIABLE_ALIGNED = "variable-aligned"


@dataclass(frozen=True)
class DatasetHeader:
    """Fixed 64-byte header written at the start of every shard."""

    n_rows: int
    n_cols: int
    n_vars: int
    rows_per_var: int
    scalar_kind: int = SCALAR_F64
    layout: int = LAYOUT_VARIABLE_MAJOR
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.n_rows != self.n_vars * self.rows_per_var:
            raise DatasetFormatError(
                f"n_rows={self.n_rows} != n_vars*rows_per_var="
                f"{self.n_vars * self.rows_per_var}"
            )
        if self.scalar_kind != SCALAR_F64:
            raise DatasetFormatError(f"unknown scalar kind {self.scalar_kind}")
        if self.layout != LAYOUT_VARIABLE_MAJOR:
            raise DatasetFormatError(f"unknown layout code {self.layout}")

    def pack(self, start_row: int, row_count: int) -> bytes:
        return struct.pack(
            "<8sIIIIQQQQQ",
            SHARD_MAGIC,
            self.version,
            self.scalar_kind,
            self.layout,
            self.n_vars,
            self.n_rows,
            self.n_cols,
            self.rows_per_var,
            start_row,
            row_count,
        )

    @staticmethod
    def unpack(raw: bytes) -> tuple["DatasetHeader", int, int]:
        if len(raw) < HEADER_BYTES:
            raise DatasetFormatError("shard header is truncated")
        (magic, version, scalar, layout, n_vars, n_rows, n_cols,
         rows_per_var, start_row, row_count) = struct.unpack_from(
            "<8sIIIIQQQQQ", raw, 0)
        if magic != SHARD_MAGIC:
            raise DatasetFormatError(f"bad shard magic {magic!r}")
        header = DatasetHeader(
            n_rows=n_rows, n_cols=n_cols, n_vars=n_vars,
            rows_per_var=rows_per_var, scalar_kind=scalar, layout=layout,
            version=version,
        )
        return header, start_row, row_count


def balanced_split(total: int, parts: int) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous split: the first ``total % parts`` parts get one extra item."""
    base, rem = divmod(total, parts)
    counts = np.full(parts, base, dtype=np.int64)
    counts[:rem] += 1
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return counts, offsets


@dataclass(frozen=True)
class PartitionPlan:
    """How the global rows are divided over ``p`` ranks."""

    p: int
    n_rows: int
    mode: str
    row_counts: tuple
    row_offsets: tuple
    rows_per_var: int = 0
    n_vars: int = 1
    # variable-aligned only: contiguous cell range per rank
    cell_counts: tuple = ()
    cell_offsets: tuple = ()

    def local_rows(self, rank: int) -> int:
        return self.row_counts[rank]

    def global_row_runs(self, rank: int) -> list[tuple[int, int]]:
        """Contiguous global row runs owned by ``rank``, in local block order."""
        if self.mode == ROW_BALANCED:
            start = self.row_offsets[rank]
            return [(start, start + self.row_counts[rank])]
        c0 = self.cell_offsets[rank]
        k = self.cell_counts[rank]
        return [
            (v * self.rows_per_var + c0, v * self.rows_per_var + c0 + k)
            for v in range(self.n_vars)
        ]

    def variable_map(self, rank: int) -> tuple[np.ndarray, np.ndarray]:
        """Per local row: (variable index, cell index)."""
        runs = self.global_row_runs(rank)
        rows = np.concatenate([np.arange(a, b, dtype=np.int64) for a, b in runs])
        return rows // self.rows_per_var, rows % self.rows_per_var

    def owner_of(self, var: int, cell: int) -> tuple[int, int]:
        """Owning rank and local row index of a (variable, cell) pair."""
        if not (0 <= var < self.n_vars and 0 <= cell < self.rows_per_var):
            raise UsageError(f"probe (var={var}, cell={cell}) outside dataset")
        if self.mode == ROW_BALANCED:
            g = var * self.rows_per_var + cell
            rank = int(np.searchsorted(self.row_offsets, g, side="right")) - 1
            return rank, g - self.row_offsets[rank]
        rank = int(np.searchsorted(self.cell_offsets, cell, side="right")) - 1
        local = var * self.cell_counts[rank] + (cell - self.cell_offsets[rank])
        return rank, local


def plan_partition(n_rows: int, p: int, mode: str = ROW_BALANCED,
                   rows_per_var: int = 0) -> PartitionPlan:
    """Divide ``n_rows`` over ``p`` ranks.

    Row-balanced: contiguous blocks of ``n_rows // p`` rows with the remainder
    spread over the lowest ranks. Variable-aligned: the cell range is split the
    same way and every rank receives all ``n_vars`` variables for its cells.
    """
    if p < 1:
        raise InvalidPartitionError(f"rank count p={p} must be >= 1")
    if mode == ROW_BALANCED:
        if p > n_rows:
            raise InvalidPartitionError(f"p={p} exceeds n_rows={n_rows}")
        counts, offsets = balanced_split(n_rows, p)
        rpv = rows_per_var if rows_per_var else n_rows
        return PartitionPlan(
            p=p, n_rows=n_rows, mode=mode,
            row_counts=tuple(int(c) for c in counts),
            row_offsets=tuple(int(o) for o in offsets),
            rows_per_var=rpv, n_vars=n_rows // rpv,
        )
    if mode == VARIABLE_ALIGNED:
        if rows_per_var <= 0:
            raise InvalidPartitionError("variable-aligned mode needs rows_per_var")
        if n_rows % rows_per_var:
            raise InvalidPartitionError(
                f"n_rows={n_rows} is not a multiple of rows_per_var={rows_per_var}")
        n_vars = n_rows // rows_per_var
        if p > rows_per_var:
            raise InvalidPartitionError(
                f"p={p} exceeds cell count {rows_per_var}")
        cells, cell_offs = balanced_split(rows_per_var, p)
        counts = cells * n_vars
        offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
        return PartitionPlan(
            p=p, n_rows=n_rows, mode=mode,
            row_counts=tuple(int(c) for c in counts),
            row_offsets=tuple(int(o) for o in offsets),
            rows_per_var=rows_per_var, n_vars=n_vars,
            cell_counts=tuple(int(c) for c in cells),
            cell_offsets=tuple(int(o) for o in cell_offs),
        )
    raise InvalidPartitionError(f"unknown partition mode {mode!r}")


@dataclass
class SnapshotPartition:
    """One rank's row block plus the layout metadata distributed steps need.

    ``gram_offset``/``gram_total`` locate this block inside the concatenated
    distributed matrix (the vertical stack of all rank blocks), which is what
    the order-stable Gram accumulation keys on.
    """

    plan: PartitionPlan
    rank: int
    block: np.ndarray
    var_index: np.ndarray
    cell_index: np.ndarray
    n_vars: int
    rows_per_var: int
    gram_offset: int
    gram_total: int
    aux_of_var: dict = field(default_factory=dict)

    @property
    def n_local_rows(self) -> int:
        return self.block.shape[0]

    @property
    def n_cols(self) -> int:
        return self.block.shape[1]


@dataclass(frozen=True)
class ShardEntry:
    index: int
    path: Path
    start_row: int
    row_count: int
    byte_length: int


@dataclass(frozen=True)
class Manifest:
    path: Path
    n_rows: int
    n_cols: int
    n_vars: int
    rows_per_var: int
    shards: tuple

    @property
    def header(self) -> DatasetHeader:
        return DatasetHeader(n_rows=self.n_rows, n_cols=self.n_cols,
                             n_vars=self.n_vars, rows_per_var=self.rows_per_var)


def write_dataset_from(row_source, header: DatasetHeader, shard_count: int,
                       path) -> Path:
    """Write shards plus a manifest, pulling row blocks on demand.

    ``row_source(start, count)`` must return global rows [start, start+count)
    as a (count, n_cols) array; only one shard's rows are held at a time.
    Shards split the rows contiguously with the remainder going to the first
    shards; payloads are little-endian float64, column-major within each
    shard. Returns the manifest path.
    """
    path = Path(path)
    if shard_count < 1:
        raise UsageError(f"shard_count={shard_count} must be >= 1")
    if shard_count > header.n_rows:
        raise UsageError(f"shard_count={shard_count} exceeds n_rows")

    path.parent.mkdir(parents=True, exist_ok=True)
    counts, offsets = balanced_split(header.n_rows, shard_count)
    lines = [
        f"{MANIFEST_TAG} n_rows={header.n_rows} n_cols={header.n_cols} "
        f"n_vars={header.n_vars}"
    ]
    stem = path.name.removesuffix(".manifest")
    for k in range(shard_count):
        start, rows = int(offsets[k]), int(counts[k])
        block = np.asarray(row_source(start, rows), dtype=np.float64)
        if block.shape != (rows, header.n_cols):
            raise DatasetFormatError(
                f"row source returned {block.shape}, expected "
                f"({rows}, {header.n_cols})")
        shard_name = f"{stem}.s{k}.bin"
        shard_path = path.parent / shard_name
        try:
            with open(shard_path, "wb") as fh:
                fh.write(header.pack(start, rows))
                fh.write(block.tobytes(order="F"))
        except OSError as exc:
            raise DatasetFormatError(f"cannot write shard {shard_path}: {exc}") from exc
        byte_length = HEADER_BYTES + block.size * 8
        lines.append(f"shard {k} {shard_name} {start} {rows} {byte_length}")
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DatasetFormatError(f"cannot write manifest {path}: {exc}") from exc
    return path


def write_dataset(matrix: np.ndarray, header: DatasetHeader,
                  shard_count: int, path) -> Path:
    """Write a fully materialized matrix (global variable-major rows)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (header.n_rows, header.n_cols):
        raise DatasetFormatError(
            f"matrix shape {matrix.shape} does not match header "
            f"({header.n_rows}, {header.n_cols})")
    return write_dataset_from(lambda s, c: matrix[s : s + c, :], header,
                              shard_count, path)


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetFormatError(f"cannot read manifest {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(MANIFEST_TAG):
        raise DatasetFormatError(f"{path} is not a {MANIFEST_TAG} manifest")
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    n_rows, n_cols, n_vars = (int(meta[k]) for k in ("n_rows", "n_cols", "n_vars"))
    if n_rows % n_vars:
        raise DatasetFormatError(f"n_rows={n_rows} not divisible by n_vars={n_vars}")
    shards = []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] != "shard" or len(parts) != 6:
            raise DatasetFormatError(f"bad manifest line: {ln!r}")
        shards.append(ShardEntry(
            index=int(parts[1]), path=path.parent / parts[2],
            start_row=int(parts[3]), row_count=int(parts[4]),
            byte_length=int(parts[5]),
        ))
    shards.sort(key=lambda s: s.start_row)
    covered = 0
    for s in shards:
        if s.start_row != covered:
            raise DatasetFormatError(
                f"shards do not tile the rows: gap/overlap at row {covered}")
        covered += s.row_count
    if covered != n_rows:
        raise DatasetFormatError(f"shards cover {covered} rows, expected {n_rows}")
    return Manifest(path=path, n_rows=n_rows, n_cols=n_cols, n_vars=n_vars,
                    rows_per_var=n_rows // n_vars, shards=tuple(shards))


def _open_shard(entry: ShardEntry, manifest: Manifest) -> np.memmap:
    if not entry.path.exists():
        raise DatasetFormatError(f"missing shard file {entry.path}")
    actual = entry.path.stat().st_size
    if actual != entry.byte_length:
        raise DatasetFormatError(
            f"shard {entry.path} has {actual} bytes, manifest says "
            f"{entry.byte_length}")
    with open(entry.path, "rb") as fh:
        header, start, rows = DatasetHeader.unpack(fh.read(HEADER_BYTES))
    if (start, rows) != (entry.start_row, entry.row_count):
        raise DatasetFormatError(
            f"shard {entry.path} header range ({start}, {rows}) disagrees "
            f"with manifest ({entry.start_row}, {entry.row_count})")
    if (header.n_rows, header.n_cols) != (manifest.n_rows, manifest.n_cols):
        raise DatasetFormatError(
            f"shard {entry.path} global dims disagree with manifest")
    return np.memmap(entry.path, dtype="<f8", mode="r", offset=HEADER_BYTES,
                     shape=(entry.row_count, manifest.n_cols), order="F")


def read_rows(manifest: Manifest, start: int, count: int,
              n_cols: int | None = None) -> np.ndarray:
    """Read global rows [start, start+count), assembling across shards."""
    n_cols = manifest.n_cols if n_cols is None else n_cols
    out = np.empty((count, n_cols), dtype=np.float64)
    filled = 0
    for entry in manifest.shards:
        lo = max(start, entry.start_row)
        hi = min(start + count, entry.start_row + entry.row_count)
        if lo >= hi:
            continue
        mm = _open_shard(entry, manifest)
        out[lo - start : hi - start, :] = mm[lo - entry.start_row : hi - entry.start_row, :n_cols]
        del mm
        filled += hi - lo
    if filled != count:
        raise DatasetFormatError(
            f"rows [{start}, {start + count}) not fully covered by shards")
    return out


def read_partition(manifest: Manifest, plan: PartitionPlan, rank: int,
                   n_cols: int | None = None) -> SnapshotPartition:
    """Load exactly the rows of ``rank`` per ``plan``.

    ``n_cols`` limits the read to the leading snapshot columns (training
    subsets). Plans over a leading row subset of the dataset are accepted in
    row-balanced mode, which is how weak-scaling row truncation works.
    """
    if rank >= plan.p or rank < 0:
        raise UsageError(f"rank {rank} outside plan with p={plan.p}")
    if plan.n_rows > manifest.n_rows:
        raise InvalidPartitionError(
            f"plan covers {plan.n_rows} rows but dataset has {manifest.n_rows}")
    if plan.n_rows < manifest.n_rows and plan.mode != ROW_BALANCED:
        raise InvalidPartitionError(
            "row truncation is only supported for row-balanced plans")
    if n_cols is not None and not (1 <= n_cols <= manifest.n_cols):
        raise UsageError(f"n_cols={n_cols} outside dataset with {manifest.n_cols}")

    runs = plan.global_row_runs(rank)
    blocks = [read_rows(manifest, a, b - a, n_cols) for a, b in runs]
    block = blocks[0] if len(blocks) == 1 else np.vstack(blocks)
    var_idx, cell_idx = plan.variable_map(rank)
    return SnapshotPartition(
        plan=plan, rank=rank, block=block,
        var_index=var_idx, cell_index=cell_idx,
        n_vars=plan.n_vars, rows_per_var=plan.rows_per_var,
        gram_offset=plan.row_offsets[rank], gram_total=plan.n_rows,
    )


def read_full(manifest: Manifest, n_cols: int | None = None) -> np.ndarray:
    """Whole dataset as one matrix (serial oracles and small outputs)."""
    return read_rows(manifest, 0, manifest.n_rows, n_cols)
