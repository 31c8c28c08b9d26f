import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asyncchunk import dataset as ds

ALL_DTYPES = {"f64": ("float64", (2,)), "f32": ("float32", ()), "i64": ("int64", (3,)), "i32": ("int32", ()),
              "u8": ("uint8", (2, 2)), "flag": ("bool", ())}


def _frames(n, rng, start=0.0, fps=30.0):
    return [ds.EpisodeFrame({"x": rng.normal(size=2), "y": np.array(float(i))}, start + i / fps) for i in range(n)]


def _mk(root, rows_per_file=1000, fps=30.0):
    return ds.create_dataset(root, fps, {"x": ("float64", (2,)), "y": ("float64", ())}, rows_per_file=rows_per_file)


def test_layout_and_metadata(tmp_path, rng):
    _mk(tmp_path)
    m0 = ds.write_episode(tmp_path, _frames(10, rng), "reach")
    m1 = ds.write_episode(tmp_path, _frames(10, rng), "reach")
    assert (m0.file_id, m0.row_offset, m1.file_id, m1.row_offset) == (0, 0, 0, 10)
    assert (tmp_path / "data/chunk-000/file-000.bin").read_bytes()[:8] == b"LRDSTAB1"
    info = json.loads((tmp_path / "meta/info.json").read_text())
    assert info["total_episodes"] == 2 and info["total_frames"] == 20 and info["stats_stale"]
    assert [json.loads(line)["episode_index"] for line in (tmp_path / "meta/episodes/chunk-000.jsonl").open()] == [0, 1]
    assert ds.load_tasks(tmp_path) == {"reach": 0}
    ds.write_episode(tmp_path, _frames(3, rng), "push")
    assert ds.load_tasks(tmp_path) == {"reach": 0, "push": 1}


def test_table_header_layout(tmp_path, rng):
    info = _mk(tmp_path)
    ds.write_episode(tmp_path, _frames(4, rng), "t")
    raw = (tmp_path / "data/chunk-000/file-000.bin").read_bytes()
    magic, h, rows = np.frombuffer(raw[:8], "S8")[0], int.from_bytes(raw[8:12], "little"), int.from_bytes(raw[12:16], "little")
    assert magic == b"LRDSTAB1" and h == info.schema_hash() and rows == 4


def test_rolling_threshold(tmp_path, rng):
    _mk(tmp_path, rows_per_file=15)
    a = ds.write_episode(tmp_path, _frames(10, rng), "t")
    b = ds.write_episode(tmp_path, _frames(10, rng), "t")
    assert (a.file_id, b.file_id, b.row_offset) == (0, 1, 0)
    big = ds.write_episode(tmp_path, _frames(40, rng), "t")
    assert big.file_id == 2 and big.length == 40  # never split


def test_episode_never_split_and_lengths_sum(tmp_path, rng):
    _mk(tmp_path, rows_per_file=25)
    lens = [7, 12, 30, 3, 9, 25, 1]
    for n in lens:
        ds.write_episode(tmp_path, _frames(n, rng), "t")
    info = ds.load_info(tmp_path)
    total = 0
    for f in range(info.total_files):
        rows = ds.read_table(ds.data_file_path(tmp_path, info, f), info)["index"].shape[0]
        total += rows
        eps = [e for e in ds.load_episodes(tmp_path) if e.file_id == f]
        assert rows <= 25 or len(eps) == 1
        for e in eps:
            assert e.row_offset + e.length <= rows
    assert total == sum(lens) == sum(e.length for e in ds.load_episodes(tmp_path))


def test_write_rejects_bad_frames(tmp_path, rng):
    _mk(tmp_path)
    with pytest.raises(ds.SchemaMismatch):
        ds.write_episode(tmp_path, [], "t")
    with pytest.raises(ds.SchemaMismatch):
        ds.write_episode(tmp_path, [ds.EpisodeFrame({"x": np.zeros(3), "y": np.array(0.0)})], "t")
    with pytest.raises(ds.SchemaMismatch):
        ds.write_episode(tmp_path, [ds.EpisodeFrame({"x": np.zeros(2)})], "t")
    bad_ts = _frames(3, rng)
    bad_ts[2].timestamp = 0.5
    with pytest.raises(ds.SchemaMismatch):
        ds.write_episode(tmp_path, bad_ts, "t")
    assert ds.load_info(tmp_path).total_episodes == 0


def test_reserved_and_unsupported_schema(tmp_path):
    with pytest.raises(ds.SchemaMismatch):
        ds.create_dataset(tmp_path / "a", 30, {"index": ("int64", ())})
    with pytest.raises(ds.SchemaMismatch):
        ds.create_dataset(tmp_path / "b", 30, {"x": ("complex128", ())})


def test_roundtrip_all_dtypes_value_exact(tmp_path, rng):
    ds.create_dataset(tmp_path, 10.0, ALL_DTYPES)
    frames = []
    for i in range(17):
        frames.append(ds.EpisodeFrame({
            "f64": rng.normal(size=2) * 1e300, "f32": np.float32(rng.normal()), "i64": rng.integers(-2**62, 2**62, 3),
            "i32": np.int32(rng.integers(-2**31, 2**31 - 1)), "u8": rng.integers(0, 256, (2, 2)).astype(np.uint8),
            "flag": np.bool_(i % 3 == 0)}))
    ds.write_episode(tmp_path, frames, "t")
    got = ds.LocalDataset(tmp_path).episode_arrays(0)
    for name in ALL_DTYPES:
        want = np.stack([np.asarray(f.values[name]) for f in frames])
        assert np.array_equal(got[name].astype(want.dtype), want), name
        assert got[name].dtype == np.dtype(ALL_DTYPES[name][0])


def test_read_table_corruption(tmp_path, rng):
    info = _mk(tmp_path)
    ds.write_episode(tmp_path, _frames(5, rng), "t")
    p = ds.data_file_path(tmp_path, info, 0)
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(ds.IoFailure):
        ds.read_table(p, info)
    p.write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(ds.IoFailure):
        ds.read_table(p, info)


def test_stats_frozen_and_constant(tmp_path):
    ds.create_dataset(tmp_path, 1.0, {"v": ("float64", ()), "c": ("float64", ())})
    ds.write_episode(tmp_path, [ds.EpisodeFrame({"v": np.array(float(v)), "c": np.array(4.0)}) for v in (1, 2, 3)], "t")
    st_ = ds.compute_stats(tmp_path)
    assert st_["v"].mean == 2.0 and np.isclose(st_["v"].std, np.sqrt(2 / 3)) and st_["v"].min == 1 and st_["v"].max == 3
    assert st_["c"].std == 0 and st_["c"].min == st_["c"].max == st_["c"].mean == 4.0
    assert not ds.load_info(tmp_path).stats_stale
    assert ds.load_stats(tmp_path)["v"].mean == 2.0


def test_stats_match_two_pass_oracle(tmp_path, rng):
    _mk(tmp_path, rows_per_file=700)
    all_x = []
    for n in (1000, 2500, 3000, 3500):
        fr = _frames(n, rng)
        all_x.append(np.stack([f.values["x"] for f in fr]))
        ds.write_episode(tmp_path, fr, "t")
    x = np.concatenate(all_x)
    assert len(x) == 10_000
    s = ds.compute_stats(tmp_path)["x"]
    mean = x.sum(0) / len(x)
    std = np.sqrt(((x - mean) ** 2).sum(0) / len(x))
    assert np.max(np.abs(s.mean - mean)) <= 1e-12 and np.max(np.abs(s.std - std)) <= 1e-12
    assert np.array_equal(s.min, x.min(0)) and np.array_equal(s.max, x.max(0))


def test_stale_and_empty(tmp_path, rng):
    _mk(tmp_path)
    with pytest.raises(ds.EmptyDataset):
        ds.compute_stats(tmp_path)
    ds.write_episode(tmp_path, _frames(3, rng), "t")
    ds.compute_stats(tmp_path)
    ds.write_episode(tmp_path, _frames(3, rng), "t")
    with pytest.raises(ds.StaleStats):
        ds.load_stats(tmp_path)
    assert ds.load_stats(tmp_path, allow_stale=True)


def test_normalize_frozen():
    s = ds.FeatureStats(np.array([1.0]), np.array([2.0]), np.array([-1.0]), np.array([5.0]))
    assert ds.normalize([1.0], s)[0] == 0.0
    assert ds.normalize([-1.0], s, "minmax")[0] == -1.0 and ds.normalize([5.0], s, "minmax")[0] == 1.0
    flat = ds.FeatureStats(np.array([3.0]), np.array([0.0]), np.array([3.0]), np.array([3.0]))
    assert np.isfinite(ds.normalize([4.0], flat)).all() and np.isfinite(ds.normalize([4.0], flat, "minmax")).all()
    with pytest.raises(ValueError):
        ds.normalize([1.0], s, "robust")


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_normalize_roundtrip(x, mean, std, width):
    s = ds.FeatureStats(np.array([mean]), np.array([std]), np.array([mean - width]), np.array([mean + width]))
    for mode in ("meanstd", "minmax"):
        assert abs(ds.denormalize(ds.normalize([x], s, mode), s, mode)[0] - x) <= 1e-9 * max(1.0, abs(x))


def test_window_examples(tmp_path, rng):
    _mk(tmp_path)
    ds.write_episode(tmp_path, _frames(5, rng), "t")
    w = ds.read_window(tmp_path, 0, 2, {"y": [0.0]})
    assert w.values["y"].tolist() == [2.0] and w.pad_mask["y"].tolist() == [True]
    w = ds.read_window(tmp_path, 0, 0, {"y": [-1 / 30, 0.0, 1 / 30]})
    assert w.values["y"].tolist() == [0.0, 0.0, 1.0] and w.pad_mask["y"].tolist() == [False, True, True]
    w = ds.read_window(tmp_path, 0, 4, {"y": [0.0, 2 / 30]})
    assert w.values["y"].tolist() == [4.0, 4.0] and w.pad_mask["y"].tolist() == [True, False]
    with pytest.raises(ds.OffsetNotOnGrid):
        ds.read_window(tmp_path, 0, 0, {"y": [0.0123]})
    with pytest.raises(ds.MissingFeature):
        ds.read_window(tmp_path, 0, 0, {"z": [0.0]})
    with pytest.raises(IndexError):
        ds.read_window(tmp_path, 0, 5, {"y": [0.0]})


def test_offsets_grid_tolerance():
    assert ds.offsets_to_frames([0.0, 1 / 30, -2 / 30], 30).tolist() == [0, 1, -2]
    assert ds.offsets_to_frames([0.2 / 30], 30).tolist() == [0]
    with pytest.raises(ds.OffsetNotOnGrid):
        ds.offsets_to_frames([0.3 / 30], 30)


def test_gather_matches_read_window(tmp_path, rng):
    _mk(tmp_path, rows_per_file=20)
    for n in (8, 15, 4):
        ds.write_episode(tmp_path, _frames(n, rng), "t")
    lds = ds.LocalDataset(tmp_path)
    delta = {"x": [-2 / 30, 0.0, 3 / 30], "y": [0.0]}
    batch = lds.gather(np.arange(lds.num_frames), delta)
    for i in range(lds.num_frames):
        e, f = lds.locate(np.array([i]))
        w = lds.read_window(int(e[0]), int(f[0]), delta)
        for k in delta:
            assert np.array_equal(batch.values[k][i], w.values[k])
            assert np.array_equal(batch.pad_mask[k][i], w.pad_mask[k])


def test_streaming_degenerate_buffer_and_determinism(tmp_path, rng):
    _mk(tmp_path)
    for n in (6, 9):
        ds.write_episode(tmp_path, _frames(n, rng), "t")
    ids = np.concatenate([b.index for b in ds.stream_iter(tmp_path, 4, 1, seed=3)])
    assert ids.tolist() == list(range(15))
    a = np.concatenate([b.index for b in ds.stream_iter(tmp_path, 4, 8, seed=3)])
    b = np.concatenate([b.index for b in ds.stream_iter(tmp_path, 4, 8, seed=3)])
    assert a.tolist() == b.tolist() and a.tolist() != list(range(15))
    sizes = [len(b.index) for b in ds.stream_iter(tmp_path, 4, 8, seed=3, drop_last=True)]
    assert sizes == [4, 4, 4]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_shuffle_is_permutation(n, buf, seed):
    out = list(ds.shuffled_indices(n, buf, np.random.default_rng(seed)))
    assert sorted(out) == list(range(n))


def test_streaming_throughput(tmp_path):
    rng = np.random.default_rng(0)
    ds.create_dataset(tmp_path, 30.0, {"x": ("float64", (4,)), "a": ("float64", (2,))}, rows_per_file=20_000)
    for _ in range(10):
        n = 10_000
        x, a = rng.normal(size=(n, 4)), rng.normal(size=(n, 2))
        ds.write_episode(tmp_path, [ds.EpisodeFrame({"x": x[i], "a": a[i]}) for i in range(n)], "t")
    t0 = time.perf_counter()
    count = 0
    for _ in ds.stream_iter(tmp_path, 32, 1000, seed=0, delta_ts={"x": [-1 / 30, 0.0], "a": [0.0, 1 / 30]}):
        count += 1
    rate = count / (time.perf_counter() - t0)
    assert count == -(-100_000 // 32)
    assert rate >= 80


def test_missing_dataset(tmp_path):
    with pytest.raises(ds.IoFailure):
        ds.load_info(tmp_path / "nope")
    _mk(tmp_path / "d")
    with pytest.raises(ds.DatasetError):
        _mk(tmp_path / "d")
