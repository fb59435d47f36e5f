import json

import numpy as np
import pytest

from adaptive_tamaraw.dataset import (Dataset, assign_splits, load_manifest,
                                      load_trace_dir, manifest_payload,
                                      parse_trace_filename)
from adaptive_tamaraw.errors import ManifestError
from adaptive_tamaraw.trace import Trace, serialize_trace


def make_traces(n_sites=3, per_site=40):
    traces = []
    for s in range(n_sites):
        for i in range(per_site):
            traces.append(Trace(np.array([0.0, 0.1 + 0.001 * i]),
                                np.array([1, -1], dtype=np.int8), s, i))
    return traces


class TestSplits:
    def test_811_proportions_per_site(self):
        traces = make_traces(per_site=40)
        splits = assign_splits(traces, seed=5)
        for s in range(3):
            site = [splits[(s, i)] for i in range(40)]
            assert site.count("train") == 32
            assert site.count("validation") == 4
            assert site.count("test") == 4

    def test_deterministic_and_seed_sensitive(self):
        traces = make_traces()
        a = assign_splits(traces, seed=5)
        b = assign_splits(traces, seed=5)
        c = assign_splits(traces, seed=6)
        assert a == b
        assert a != c

    def test_adding_site_does_not_move_others(self):
        base = make_traces(n_sites=2)
        more = make_traces(n_sites=3)
        a = assign_splits(base, seed=5)
        b = assign_splits(more, seed=5)
        assert all(b[k] == v for k, v in a.items())

    def test_custom_ratios(self):
        traces = make_traces(n_sites=1, per_site=10)
        splits = assign_splits(traces, seed=0, ratios=(1, 1, 0))
        values = list(splits.values())
        assert values.count("validation") == 5
        assert values.count("test") == 0


class TestFilenames:
    def test_labeled(self):
        assert parse_trace_filename("12-34") == (12, 34)

    def test_unlabeled(self):
        assert parse_trace_filename("7") == (-1, 7)

    def test_garbage(self):
        with pytest.raises(ManifestError):
            parse_trace_filename("foo.txt")


class TestManifest:
    def _write_corpus(self, tmp_path, traces):
        data = tmp_path / "data"
        data.mkdir()
        for t in traces:
            (data / f"{t.site_id}-{t.instance_id}").write_text(
                serialize_trace(t))
        return data

    def test_dir_roundtrip(self, tmp_path):
        traces = make_traces(n_sites=2, per_site=5)
        data = self._write_corpus(tmp_path, traces)
        ds = load_trace_dir(data, seed=3)
        assert [t.key() for t in ds.traces] == sorted(t.key() for t in traces)

    def test_manifest_roundtrip(self, tmp_path):
        traces = make_traces(n_sites=2, per_site=5)
        data = self._write_corpus(tmp_path, traces)
        ds = load_trace_dir(data, seed=3)
        paths = {t.key(): str(data / f"{t.site_id}-{t.instance_id}")
                 for t in ds.traces}
        payload = manifest_payload(ds, paths, 3, (8, 1, 1))
        mpath = tmp_path / "manifest.json"
        mpath.write_text(json.dumps(payload))
        again = load_manifest(mpath)
        assert again.traces == ds.traces
        assert again.splits == ds.splits

    def test_unknown_top_level_field_rejected(self, tmp_path):
        mpath = tmp_path / "m.json"
        mpath.write_text(json.dumps({"format": "trace-manifest/1",
                                     "surprise": 1, "traces": []}))
        with pytest.raises(ManifestError, match="unknown manifest fields"):
            load_manifest(mpath)

    def test_unknown_trace_field_rejected(self, tmp_path):
        traces = make_traces(n_sites=1, per_site=2)
        data = self._write_corpus(tmp_path, traces)
        row = {"path": str(data / "0-0"), "site": 0, "instance": 0,
               "split": "train", "extra": True}
        mpath = tmp_path / "m.json"
        mpath.write_text(json.dumps({"format": "trace-manifest/1",
                                     "seed": 0, "ratios": [8, 1, 1],
                                     "traces": [row]}))
        with pytest.raises(ManifestError, match="unknown trace fields"):
            load_manifest(mpath)

    def test_duplicate_keys_rejected(self):
        t = make_traces(n_sites=1, per_site=1)[0]
        with pytest.raises(ManifestError, match="duplicate"):
            Dataset([t, t], {t.key(): "train"})

    def test_split_accessors(self):
        traces = make_traces(n_sites=2, per_site=10)
        ds = Dataset(traces, assign_splits(traces, seed=1))
        names = {t.key() for t in ds.split("train")}
        names |= {t.key() for t in ds.split("validation")}
        names |= {t.key() for t in ds.split("test")}
        assert names == {t.key() for t in traces}
        assert set(ds.by_site("train")) == {0, 1}
