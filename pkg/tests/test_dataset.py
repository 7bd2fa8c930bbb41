import gzip

import numpy as np
import pytest

from aerofed import dataset
from aerofed.rng import stream

GOOD_LINE = "2004-03-01 00:58:46.002832 2 1 19.9884 37.0933 45.08 2.69964"


def test_parse_trace_field_order():
    result = dataset.parse_trace([GOOD_LINE])
    assert result.skipped == 0
    assert len(result.records) == 1
    rec = result.records[0]
    assert rec.mote_id == 1
    assert np.allclose(rec.features, [19.9884, 37.0933, 45.08, 2.69964])


def test_parse_trace_skips_missing_voltage():
    line = "2004-03-01 00:58:46.002832 2 1 19.9884 37.0933 45.08"
    result = dataset.parse_trace([GOOD_LINE, line])
    assert len(result.records) == 1
    assert result.skipped == 1


def test_parse_trace_empty_stream():
    result = dataset.parse_trace([])
    assert result.records == []
    assert result.skipped == 0


def test_parse_trace_skips_non_finite():
    line = "2004-03-01 00:58:46.002832 2 1 nan 37.0933 45.08 2.69964"
    result = dataset.parse_trace([line])
    assert result.records == []
    assert result.skipped == 1


def test_parse_serialize_parse_roundtrip():
    rec = dataset.parse_trace([GOOD_LINE]).records[0]
    again = dataset.parse_trace([dataset.format_record(rec)]).records[0]
    assert again.mote_id == rec.mote_id
    assert again.timestamp == rec.timestamp
    assert np.array_equal(again.features, rec.features)


def test_read_trace_gzip(tmp_path):
    path = tmp_path / "trace.txt.gz"
    with gzip.open(path, "wt") as fh:
        fh.write(GOOD_LINE + "\n")
    result = dataset.read_trace(path)
    assert len(result.records) == 1


def test_read_trace_missing_file(tmp_path):
    with pytest.raises(OSError):
        dataset.read_trace(tmp_path / "nope.txt")


def _fake_records(n_motes, per_mote):
    records = []
    for m in range(1, n_motes + 1):
        for i in range(per_mote):
            records.append(dataset.SensorRecord(float(i * 31 + m), m,
                                                np.array([20.0, 40.0, 100.0, 2.7]) + m))
    return records


def test_assign_motes_one_per_device():
    records = _fake_records(6, 3)
    streams = dataset.assign_motes_to_devices(records, 6, stream(0, "motes"))
    assert len(streams) == 6
    assert all(len(s) == 3 for s in streams)
    motes_per_device = [{r.mote_id for r in s} for s in streams]
    assert all(len(m) == 1 for m in motes_per_device)


def test_assign_motes_deterministic():
    records = _fake_records(5, 2)
    a = dataset.assign_motes_to_devices(records, 3, stream(1, "motes"))
    b = dataset.assign_motes_to_devices(records, 3, stream(1, "motes"))
    assert [[r.mote_id for r in s] for s in a] == [[r.mote_id for r in s] for s in b]


def test_assign_motes_partition_covers_all():
    records = _fake_records(7, 4)
    streams = dataset.assign_motes_to_devices(records, 3, stream(2, "motes"))
    total = sum(len(s) for s in streams)
    assert total == len(records)


def test_assign_motes_reuse_when_few_motes():
    records = _fake_records(2, 3)
    streams = dataset.assign_motes_to_devices(records, 5, stream(3, "motes"))
    assert all(len(s) > 0 for s in streams)


def test_assign_streams_time_ordered():
    records = _fake_records(4, 10)
    for s in dataset.assign_motes_to_devices(records, 2, stream(4, "motes")):
        times = [r.timestamp for r in s]
        assert times == sorted(times)


def test_ring_buffer_keeps_newest():
    buf = dataset.RingBuffer(capacity=4096, n_features=1)
    for i in range(5000):
        buf.append(np.array([float(i)]))
    assert len(buf) == 4096
    view = buf.view()
    assert view[0, 0] == 5000 - 4096
    assert view[-1, 0] == 4999


def test_build_uav_buffer_no_coverage():
    buf = dataset.RingBuffer(8, 1)
    streams = [dataset.DeviceStream(np.arange(5.0).reshape(-1, 1))]
    dataset.build_uav_buffer(buf, streams, [])
    assert len(buf) == 0


def test_build_uav_buffer_ordered_appends():
    buf = dataset.RingBuffer(64, 1)
    streams = [dataset.DeviceStream(np.arange(100.0).reshape(-1, 1))]
    for _ in range(10):
        dataset.build_uav_buffer(buf, streams, [0])
    assert np.array_equal(buf.view().ravel(), np.arange(10.0))


def test_device_stream_wraps_around():
    s = dataset.DeviceStream(np.arange(3.0).reshape(-1, 1))
    got = [s.next()[0] for _ in range(7)]
    assert got == [0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 0.0]


def test_split_sizes():
    rows = stream(5, "split").normal(size=(100, 4))
    out = dataset.split(rows)
    assert out.train.shape[0] == 70
    assert out.validation.shape[0] == 15
    assert out.test.shape[0] == 15


def test_split_normalization_stats():
    rows = stream(6, "split").normal(loc=5.0, scale=3.0, size=(200, 4))
    out = dataset.split(rows)
    assert np.all(np.abs(out.train.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(out.train.std(axis=0) - 1.0) < 1e-6)


def test_split_disjoint():
    rows = np.arange(400.0).reshape(100, 4)
    out = dataset.split(rows)
    recovered = out.normalizer.denormalize(np.vstack([out.train, out.validation, out.test]))
    assert np.allclose(recovered, rows)


def test_split_too_few_records():
    with pytest.raises(ValueError):
        dataset.split(np.zeros((5, 4)))


def test_normalizer_invertible():
    rows = stream(7, "norm").normal(loc=2.0, scale=4.0, size=(50, 4))
    norm = dataset.Normalizer.fit(rows)
    assert np.all(np.abs(norm.denormalize(norm.normalize(rows)) - rows) < 1e-10)


def test_inject_fraction_zero():
    rows = stream(8, "inject").normal(size=(40, 4))
    out, labels = dataset.inject_anomalies(rows, 0.0, 3.0, stream(8, "inject-rng"))
    assert np.array_equal(out, rows)
    assert not labels.any()


def test_inject_fraction_one_magnitude_zero():
    rows = stream(9, "inject").normal(size=(40, 4))
    out, labels = dataset.inject_anomalies(rows, 1.0, 0.0, stream(9, "inject-rng"))
    assert np.array_equal(out, rows)
    assert labels.all()


def test_inject_exact_count():
    rows = stream(10, "inject").normal(size=(1000, 4))
    _, labels = dataset.inject_anomalies(rows, 0.05, 3.0, stream(10, "inject-rng"))
    assert labels.sum() == 50


def test_inject_rejects_bad_fraction():
    with pytest.raises(ValueError):
        dataset.inject_anomalies(np.zeros((5, 4)), 1.5, 3.0, stream(0, "x"))


def test_synthesize_empty():
    assert dataset.synthesize(0, 3, stream(11, "synth")) == []


def test_synthesize_deterministic():
    a = dataset.synthesize(50, 3, stream(12, "synth"))
    b = dataset.synthesize(50, 3, stream(12, "synth"))
    assert all(np.array_equal(x.features, y.features) for x, y in zip(a, b))


def test_synthesize_feature_means_near_centers():
    records = dataset.synthesize(10_000, 5, stream(13, "synth"))
    rows = dataset.records_to_rows(records)
    means = rows.mean(axis=0)
    assert np.all(np.abs(means - dataset.SYNTH_CENTERS) / dataset.SYNTH_CENTERS < 0.10)


def test_record_cache_roundtrip(tmp_path):
    records = dataset.parse_trace([GOOD_LINE]).records
    records += dataset.synthesize(20, 3, stream(14, "synth"))
    path = tmp_path / "trace.afcache"
    dataset.write_record_cache(path, records)
    loaded = dataset.read_record_cache(path)
    assert len(loaded) == len(records)
    for a, b in zip(loaded, records):
        assert a.timestamp == b.timestamp
        assert a.mote_id == b.mote_id
        assert np.array_equal(a.features, b.features)


def test_record_cache_rejects_garbage(tmp_path):
    path = tmp_path / "bad.afcache"
    path.write_bytes(b"\x00" * 20)
    with pytest.raises(ValueError):
        dataset.read_record_cache(path)
