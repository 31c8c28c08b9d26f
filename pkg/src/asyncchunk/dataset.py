"""Episode dataset: columnar binary tables plus JSON metadata.

Layout under ``root``::

    meta/info.json                   schema, fps, path templates, totals
    meta/stats.json                  per-feature mean/std/min/max
    meta/tasks.jsonl                 task text <-> task_index
    meta/episodes/chunk-NNN.jsonl    one record per episode
    data/chunk-NNN/file-MMM.bin      concatenated frames of several episodes

A data file starts with the 8-byte magic ``LRDSTAB1``, a u32 schema hash and
a u32 row count, followed by one little-endian block per column in schema
order. Files are replaced atomically (write to a temp file, then rename) and
metadata is committed last, so readers that only trust committed episode
records never observe a partial write.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

FORMAT_VERSION = "lrds/1.0"
TABLE_MAGIC = b"LRDSTAB1"
_TABLE_HEADER = struct.Struct("<8sII")
DATA_PATH = "data/chunk-{chunk_index:03d}/file-{file_index:03d}.bin"
EPISODES_PATH = "meta/episodes/chunk-{chunk_index:03d}.jsonl"

DEFAULT_ROWS_PER_FILE = 1000
DEFAULT_FILES_PER_CHUNK = 1000
EPISODES_PER_META_FILE = 1000
NORM_EPS = 1e-8
# fraction of a frame period a requested offset may sit off the frame grid
GRID_TOLERANCE = 0.25

SUPPORTED_DTYPES = ("float64", "float32", "int64", "int32", "uint8", "bool")
RESERVED = {
    "timestamp": ("float64", ()),
    "frame_index": ("int64", ()),
    "episode_index": ("int64", ()),
    "index": ("int64", ()),
    "task_index": ("int64", ()),
}

PathLike = Union[str, os.PathLike]


class DatasetError(Exception):
    pass


class SchemaMismatch(DatasetError):
    pass


class IoFailure(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


class StaleStats(DatasetError):
    pass


class OffsetNotOnGrid(DatasetError):
    pass


class MissingFeature(DatasetError, KeyError):
    pass


@dataclass
class DatasetInfo:
    fps: float
    features: Dict[str, Tuple[str, Tuple[int, ...]]]
    version: str = FORMAT_VERSION
    data_path: str = DATA_PATH
    episodes_path: str = EPISODES_PATH
    rows_per_file: int = DEFAULT_ROWS_PER_FILE
    files_per_chunk: int = DEFAULT_FILES_PER_CHUNK
    total_episodes: int = 0
    total_frames: int = 0
    total_files: int = 0
    stats_stale: bool = True

    def __post_init__(self):
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        feats = {}
        for name, (dtype, shape) in self.features.items():
            if dtype not in SUPPORTED_DTYPES:
                raise SchemaMismatch(f"feature {name!r}: unsupported dtype {dtype!r}")
            feats[name] = (dtype, tuple(int(s) for s in shape))
        self.features = feats
        if not any(n not in RESERVED for n in self.features):
            raise SchemaMismatch("schema needs at least one non-reserved feature")

    @property
    def user_features(self) -> List[str]:
        return [n for n in self.features if n not in RESERVED]

    def schema_hash(self) -> int:
        canon = json.dumps([[n, d, list(s)] for n, (d, s) in self.features.items()], separators=(",", ":"))
        return zlib.crc32(canon.encode()) & 0xFFFFFFFF

    def to_json(self) -> dict:
        return {
            "version": self.version, "fps": self.fps,
            "features": {n: {"dtype": d, "shape": list(s)} for n, (d, s) in self.features.items()},
            "data_path": self.data_path, "episodes_path": self.episodes_path,
            "rows_per_file": self.rows_per_file, "files_per_chunk": self.files_per_chunk,
            "total_episodes": self.total_episodes, "total_frames": self.total_frames,
            "total_files": self.total_files, "stats_stale": self.stats_stale,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetInfo":
        d = dict(d)
        d["features"] = {n: (f["dtype"], tuple(f["shape"])) for n, f in d["features"].items()}
        return cls(**d)


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray

    def to_json(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("mean", "std", "min", "max")}

    @classmethod
    def from_json(cls, d: dict) -> "FeatureStats":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("mean", "std", "min", "max")))


@dataclass
class EpisodeMeta:
    episode_index: int
    length: int
    task: str
    task_index: int
    file_id: int
    row_offset: int

    def to_json(self) -> dict:
        return self.__dict__.copy()


@dataclass
class EpisodeFrame:
    """One timestep: feature values keyed by name, plus its timestamp in seconds."""

    values: Dict[str, np.ndarray]
    timestamp: Optional[float] = None


@dataclass
class FrameWindow:
    """Stacked feature values over requested offsets.

    ``values[f]`` has a leading offsets axis (after the batch axis for
    streamed batches). ``pad_mask[f]`` is True where the frame is real and
    False where it was padded by repeating the nearest valid frame.
    """

    values: Dict[str, np.ndarray]
    pad_mask: Dict[str, np.ndarray]
    index: Optional[np.ndarray] = None
    episode_index: Optional[np.ndarray] = None
    frame_index: Optional[np.ndarray] = None


# low-level file helpers

def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _write_json(path: Path, obj):
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=False) + "\n").encode())


def _write_jsonl(path: Path, rows):
    _atomic_write(path, "".join(json.dumps(r) + "\n" for r in rows).encode())


def _read_jsonl(path: Path) -> list:
    if not path.exists():
        return []
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _column_dtype(dtype: str) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<") if dtype != "bool" else np.dtype("?")


def encode_table(info: DatasetInfo, columns: Mapping[str, np.ndarray]) -> bytes:
    rows = None
    blocks = []
    for name, (dtype, shape) in info.features.items():
        col = np.asarray(columns[name])
        if rows is None:
            rows = col.shape[0]
        if col.shape != (rows,) + shape:
            raise SchemaMismatch(f"column {name!r} has shape {col.shape}, expected {(rows,) + shape}")
        blocks.append(np.ascontiguousarray(col, dtype=_column_dtype(dtype)).tobytes())
    return _TABLE_HEADER.pack(TABLE_MAGIC, info.schema_hash(), rows or 0) + b"".join(blocks)


def read_table(path: PathLike, info: DatasetInfo, mmap: bool = True) -> Dict[str, np.ndarray]:
    """Map every column of a data file; arrays are read-only views when ``mmap``."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            head = f.read(_TABLE_HEADER.size)
        if len(head) < _TABLE_HEADER.size:
            raise IoFailure(f"{path}: truncated header")
        magic, schema_hash, rows = _TABLE_HEADER.unpack(head)
        if magic != TABLE_MAGIC:
            raise IoFailure(f"{path}: bad magic {magic!r}")
        if schema_hash != info.schema_hash():
            raise SchemaMismatch(f"{path}: schema hash {schema_hash:#x} != {info.schema_hash():#x}")
        out = {}
        offset = _TABLE_HEADER.size
        size = path.stat().st_size
        raw = None if mmap else path.read_bytes()
        for name, (dtype, shape) in info.features.items():
            dt = _column_dtype(dtype)
            count = rows * int(np.prod(shape, dtype=np.int64))
            if offset + count * dt.itemsize > size:
                raise IoFailure(f"{path}: column {name!r} runs past end of file")
            if count == 0:
                arr = np.zeros((rows,) + shape, dtype=dt)
            elif mmap:
                arr = np.memmap(path, dtype=dt, mode="r", offset=offset, shape=(rows,) + shape)
            else:
                arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape((rows,) + shape)
            out[name] = arr
            offset += count * dt.itemsize
        return out
    except OSError as e:
        raise IoFailure(f"{path}: {e}") from e


# dataset-level operations

def _info_path(root: Path) -> Path:
    return root / "meta" / "info.json"


def load_info(root: PathLike) -> DatasetInfo:
    try:
        with open(_info_path(Path(root))) as f:
            return DatasetInfo.from_json(json.load(f))
    except FileNotFoundError as e:
        raise IoFailure(f"no dataset at {root}") from e


def create_dataset(root: PathLike, fps: float, features: Mapping[str, Tuple[str, Sequence[int]]],
                   rows_per_file: int = DEFAULT_ROWS_PER_FILE,
                   files_per_chunk: int = DEFAULT_FILES_PER_CHUNK) -> DatasetInfo:
    """Initialise an empty dataset with the given user feature schema."""
    root = Path(root)
    if _info_path(root).exists():
        raise DatasetError(f"dataset already exists at {root}")
    for name in features:
        if name in RESERVED:
            raise SchemaMismatch(f"feature name {name!r} is reserved")
    schema = {n: (d, tuple(s)) for n, (d, s) in features.items()}
    schema.update(RESERVED)
    if rows_per_file < 1 or files_per_chunk < 1:
        raise ValueError("rows_per_file and files_per_chunk must be >= 1")
    info = DatasetInfo(fps=float(fps), features=schema, rows_per_file=int(rows_per_file),
                       files_per_chunk=int(files_per_chunk))
    (root / "data").mkdir(parents=True, exist_ok=True)
    (root / "meta" / "episodes").mkdir(parents=True, exist_ok=True)
    _write_jsonl(root / "meta" / "tasks.jsonl", [])
    _write_json(_info_path(root), info.to_json())
    return info


def data_file_path(root: PathLike, info: DatasetInfo, file_id: int) -> Path:
    return Path(root) / info.data_path.format(chunk_index=file_id // info.files_per_chunk,
                                              file_index=file_id % info.files_per_chunk)


def load_episodes(root: PathLike, info: Optional[DatasetInfo] = None) -> List[EpisodeMeta]:
    root = Path(root)
    info = info or load_info(root)
    episodes = []
    n_files = -(-info.total_episodes // EPISODES_PER_META_FILE)
    for c in range(n_files):
        episodes.extend(EpisodeMeta(**r) for r in _read_jsonl(root / info.episodes_path.format(chunk_index=c)))
    # only records covered by the committed total are trusted
    return episodes[:info.total_episodes]


def load_tasks(root: PathLike) -> Dict[str, int]:
    return {r["task"]: r["task_index"] for r in _read_jsonl(Path(root) / "meta" / "tasks.jsonl")}


def _validate_frames(info: DatasetInfo, frames: Sequence[EpisodeFrame]) -> Dict[str, np.ndarray]:
    if not frames:
        raise SchemaMismatch("episode has no frames")
    user = info.user_features
    cols = {}
    for name in user:
        dtype, shape = info.features[name]
        try:
            vals = [np.asarray(fr.values[name]) for fr in frames]
        except KeyError as e:
            raise SchemaMismatch(f"frame missing feature {e.args[0]!r}") from None
        for v in vals:
            if v.shape != shape:
                raise SchemaMismatch(f"feature {name!r}: shape {v.shape} != {shape}")
        stacked = np.stack(vals)
        if np.issubdtype(stacked.dtype, np.floating) and not np.issubdtype(np.dtype(dtype), np.floating):
            raise SchemaMismatch(f"feature {name!r}: floating values for {dtype} column")
        cols[name] = stacked.astype(_column_dtype(dtype))
    extra = set(frames[0].values) - set(user)
    if extra:
        raise SchemaMismatch(f"unknown features {sorted(extra)}")
    n = len(frames)
    ts = np.array([fr.timestamp if fr.timestamp is not None else i / info.fps for i, fr in enumerate(frames)])
    expected = np.arange(n) / info.fps
    if not np.allclose(ts - ts[0], expected, atol=1e-6):
        raise SchemaMismatch("timestamps must be strictly increasing at 1/fps spacing")
    cols["timestamp"] = ts
    return cols


def write_episode(root: PathLike, frames: Sequence[EpisodeFrame], task: str) -> EpisodeMeta:
    """Append one episode; rolls to a new data file past ``rows_per_file``.

    An episode is never split across files, so a single long episode may
    exceed the threshold on its own.
    """
    root = Path(root)
    info = load_info(root)
    cols = _validate_frames(info, frames)
    n = len(frames)
    tasks = load_tasks(root)
    task_index = tasks.get(task, len(tasks))
    episodes = load_episodes(root, info)

    if info.total_files == 0:
        file_id, existing = 0, None
    else:
        file_id = info.total_files - 1
        existing = read_table(data_file_path(root, info, file_id), info, mmap=False)
        rows = existing["index"].shape[0]
        if rows > 0 and rows + n > info.rows_per_file:
            file_id, existing = file_id + 1, None
    row_offset = 0 if existing is None else existing["index"].shape[0]

    ep_index = info.total_episodes
    cols["frame_index"] = np.arange(n, dtype=np.int64)
    cols["episode_index"] = np.full(n, ep_index, dtype=np.int64)
    cols["index"] = info.total_frames + np.arange(n, dtype=np.int64)
    cols["task_index"] = np.full(n, task_index, dtype=np.int64)
    if existing is not None:
        cols = {k: np.concatenate([existing[k], cols[k]]) for k in info.features}

    meta = EpisodeMeta(ep_index, n, task, task_index, file_id, row_offset)
    try:
        _atomic_write(data_file_path(root, info, file_id), encode_table(info, cols))
        if task not in tasks:
            tasks[task] = task_index
            _write_jsonl(root / "meta" / "tasks.jsonl",
                         [{"task_index": i, "task": t} for t, i in sorted(tasks.items(), key=lambda kv: kv[1])])
        chunk = ep_index // EPISODES_PER_META_FILE
        same_chunk = [e.to_json() for e in episodes[chunk * EPISODES_PER_META_FILE:]]
        _write_jsonl(root / info.episodes_path.format(chunk_index=chunk), same_chunk + [meta.to_json()])
        info.total_episodes += 1
        info.total_frames += n
        info.total_files = file_id + 1
        info.stats_stale = True
        _write_json(_info_path(root), info.to_json())
    except OSError as e:
        raise IoFailure(str(e)) from e
    return meta


def _welford_merge(n_a, mean_a, m2_a, block: np.ndarray):
    # Chan et al. pairwise update of (count, mean, M2) with a whole block
    n_b = block.shape[0]
    mean_b = block.mean(axis=0)
    m2_b = ((block - mean_b) ** 2).sum(axis=0)
    n = n_a + n_b
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / n)
    m2 = m2_a + m2_b + delta ** 2 * (n_a * n_b / n)
    return n, mean, m2


def compute_stats(root: PathLike) -> Dict[str, FeatureStats]:
    """Population mean/std and min/max of every user feature in one pass; persists meta/stats.json."""
    root = Path(root)
    info = load_info(root)
    episodes = load_episodes(root, info)
    if not episodes:
        raise EmptyDataset(f"{root} has no episodes")
    acc = {}
    by_file: Dict[int, List[EpisodeMeta]] = {}
    for ep in episodes:
        by_file.setdefault(ep.file_id, []).append(ep)
    for file_id, eps in sorted(by_file.items()):
        table = read_table(data_file_path(root, info, file_id), info)
        for ep in eps:
            for name in info.user_features:
                block = np.asarray(table[name][ep.row_offset:ep.row_offset + ep.length], dtype=float)
                if name not in acc:
                    shape = block.shape[1:]
                    acc[name] = [0, np.zeros(shape), np.zeros(shape), block.min(axis=0), block.max(axis=0)]
                a = acc[name]
                a[0], a[1], a[2] = _welford_merge(a[0], a[1], a[2], block)
                a[3] = np.minimum(a[3], block.min(axis=0))
                a[4] = np.maximum(a[4], block.max(axis=0))
    stats = {name: FeatureStats(mean, np.sqrt(m2 / n), lo, hi) for name, (n, mean, m2, lo, hi) in acc.items()}
    _write_json(root / "meta" / "stats.json", {k: v.to_json() for k, v in stats.items()})
    info.stats_stale = False
    _write_json(_info_path(root), info.to_json())
    return stats


def load_stats(root: PathLike, allow_stale: bool = False) -> Dict[str, FeatureStats]:
    root = Path(root)
    info = load_info(root)
    if info.stats_stale and not allow_stale:
        raise StaleStats(f"stats for {root} are stale; run compute_stats")
    with open(root / "meta" / "stats.json") as f:
        return {k: FeatureStats.from_json(v) for k, v in json.load(f).items()}


def normalize(x, stats: FeatureStats, mode: str = "meanstd") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if mode == "meanstd":
        return (x - stats.mean) / np.maximum(stats.std, NORM_EPS)
    if mode == "minmax":
        return 2.0 * (x - stats.min) / np.maximum(stats.max - stats.min, NORM_EPS) - 1.0
    raise ValueError(f"unknown normalization mode {mode!r}")


def denormalize(y, stats: FeatureStats, mode: str = "meanstd") -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if mode == "meanstd":
        return y * np.maximum(stats.std, NORM_EPS) + stats.mean
    if mode == "minmax":
        return (y + 1.0) / 2.0 * np.maximum(stats.max - stats.min, NORM_EPS) + stats.min
    raise ValueError(f"unknown normalization mode {mode!r}")


def offsets_to_frames(deltas: Sequence[float], fps: float, tolerance: float = GRID_TOLERANCE) -> np.ndarray:
    """Convert second offsets to integer frame offsets, rejecting off-grid values."""
    x = np.asarray(deltas, dtype=float) * fps
    k = np.round(x)
    bad = np.abs(x - k) > tolerance
    if np.any(bad):
        raise OffsetNotOnGrid(f"offsets {np.asarray(deltas)[bad].tolist()} s are not on the {fps} Hz grid")
    return k.astype(np.int64)


class LocalDataset:
    """Read-side view of a dataset pinned to the metadata committed at open time."""

    def __init__(self, root: PathLike):
        self.root = Path(root)
        self.info = load_info(self.root)
        self.episodes = load_episodes(self.root, self.info)
        self._tables: Dict[int, Dict[str, np.ndarray]] = {}
        starts = np.cumsum([0] + [e.length for e in self.episodes])
        self._ep_start = starts[:-1]
        self.num_frames = int(starts[-1])

    def table(self, file_id: int) -> Dict[str, np.ndarray]:
        if file_id not in self._tables:
            self._tables[file_id] = read_table(data_file_path(self.root, self.info, file_id), self.info)
        return self._tables[file_id]

    def episode(self, episode: int) -> EpisodeMeta:
        if not 0 <= episode < len(self.episodes):
            raise IndexError(f"episode {episode} out of range [0, {len(self.episodes)})")
        return self.episodes[episode]

    def episode_arrays(self, episode: int, features: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
        ep = self.episode(episode)
        table = self.table(ep.file_id)
        names = features or list(self.info.features)
        return {n: np.array(table[n][ep.row_offset:ep.row_offset + ep.length]) for n in names}

    def frame(self, episode: int, frame: int) -> Dict[str, np.ndarray]:
        ep = self.episode(episode)
        if not 0 <= frame < ep.length:
            raise IndexError(f"frame {frame} out of range for episode {episode} (length {ep.length})")
        table = self.table(ep.file_id)
        return {n: np.array(table[n][ep.row_offset + frame]) for n in self.info.features}

    def _check_features(self, delta_ts: Mapping[str, Sequence[float]]):
        for name in delta_ts:
            if name not in self.info.features:
                raise MissingFeature(name)

    def read_window(self, episode: int, frame: int, delta_ts: Mapping[str, Sequence[float]]) -> FrameWindow:
        ep = self.episode(episode)
        if not 0 <= frame < ep.length:
            raise IndexError(f"frame {frame} out of range for episode {episode} (length {ep.length})")
        self._check_features(delta_ts)
        table = self.table(ep.file_id)
        values, mask = {}, {}
        for name, deltas in delta_ts.items():
            idx = frame + offsets_to_frames(deltas, self.info.fps)
            mask[name] = (idx >= 0) & (idx < ep.length)
            values[name] = np.array(table[name][ep.row_offset + np.clip(idx, 0, ep.length - 1)])
        return FrameWindow(values, mask)

    def locate(self, index: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Global frame ids -> (episode, frame-in-episode)."""
        ep = np.searchsorted(self._ep_start, index, side="right") - 1
        return ep, index - self._ep_start[ep]

    def gather(self, index: np.ndarray, delta_ts: Mapping[str, Sequence[float]]) -> FrameWindow:
        """Vectorised windows for a batch of global frame ids."""
        index = np.asarray(index, dtype=np.int64)
        self._check_features(delta_ts)
        eps, frames = self.locate(index)
        lengths = np.array([self.episodes[e].length for e in eps])
        files = np.array([self.episodes[e].file_id for e in eps])
        offsets = np.array([self.episodes[e].row_offset for e in eps])
        values, mask = {}, {}
        for name, deltas in delta_ts.items():
            k = offsets_to_frames(deltas, self.info.fps)
            idx = frames[:, None] + k[None, :]
            mask[name] = (idx >= 0) & (idx < lengths[:, None])
            rows = offsets[:, None] + np.clip(idx, 0, lengths[:, None] - 1)
            dtype, shape = self.info.features[name]
            out = np.empty((len(index), len(k)) + shape, dtype=_column_dtype(dtype))
            for f in np.unique(files):
                sel = files == f
                out[sel] = self.table(int(f))[name][rows[sel]]
            values[name] = out
        return FrameWindow(values, mask, index, eps, frames)


def read_window(root: PathLike, episode: int, frame: int, delta_ts: Mapping[str, Sequence[float]]) -> FrameWindow:
    return LocalDataset(root).read_window(episode, frame, delta_ts)


def shuffled_indices(n: int, shuffle_buffer: int, rng: np.random.Generator) -> Iterator[int]:
    """Bounded-buffer shuffle of range(n): each id comes out exactly once."""
    if shuffle_buffer < 1:
        raise ValueError("shuffle_buffer must be >= 1")
    buf: List[int] = []
    for i in range(n):
        if len(buf) < shuffle_buffer:
            buf.append(i)
            continue
        j = int(rng.integers(len(buf)))
        yield buf[j]
        buf[j] = i
    while buf:
        j = int(rng.integers(len(buf)))
        buf[j], buf[-1] = buf[-1], buf[j]
        yield buf.pop()


def stream_iter(root: PathLike, batch: int, shuffle_buffer: int, seed: int,
                delta_ts: Optional[Mapping[str, Sequence[float]]] = None,
                drop_last: bool = False) -> Iterator[FrameWindow]:
    """One epoch of batched windows drawn through a bounded shuffle buffer.

    Without ``delta_ts`` every feature is returned for the frame itself
    (a single zero offset).
    """
    ds = LocalDataset(root)
    if delta_ts is None:
        delta_ts = {name: [0.0] for name in ds.info.features}
    rng = np.random.default_rng(seed)
    pending: List[int] = []
    for i in shuffled_indices(ds.num_frames, shuffle_buffer, rng):
        pending.append(i)
        if len(pending) == batch:
            yield ds.gather(np.array(pending), delta_ts)
            pending = []
    if pending and not drop_last:
        yield ds.gather(np.array(pending), delta_ts)
