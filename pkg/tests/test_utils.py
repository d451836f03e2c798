# tests/test_utils.py

import os

import pytest

from lrclone.utils import THREAD_ENV_VARS, canonical_json, configure_threads, fnv1a64, write_atomic


class TestChecksum:
    def test_known_vectors(self):
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C

    def test_chunked_matches_whole(self):
        data = bytes(range(200))
        assert fnv1a64(data[100:], seed=fnv1a64(data[:100])) == fnv1a64(data)

    def test_memoryview(self):
        assert fnv1a64(memoryview(b"abc")) == fnv1a64(b"abc")


class TestCanonicalJson:
    def test_key_order_irrelevant(self):
        assert canonical_json({"b": 1, "a": [1, 2]}) == canonical_json({"a": [1, 2], "b": 1}) == '{"a":[1,2],"b":1}'

    def test_ascii_only(self):
        assert canonical_json({"x": "ü"}) == '{"x":"\\u00fc"}'


class TestWriteAtomic:
    def test_creates_parents(self, temp_dir):
        path = temp_dir / "a" / "b" / "file.bin"
        write_atomic(path, b"\x00\x01")
        assert path.read_bytes() == b"\x00\x01"
        assert not path.with_suffix(".bin.tmp").exists()

    def test_overwrites(self, temp_dir):
        path = temp_dir / "file.txt"
        write_atomic(path, "one")
        write_atomic(path, "two")
        assert path.read_text() == "two"


class TestThreads:
    def test_exports_thread_count(self, monkeypatch):
        monkeypatch.setenv("LRC_THREADS", "2")
        for var in THREAD_ENV_VARS:
            monkeypatch.delenv(var, raising=False)
        assert configure_threads() == 2
        assert all(os.environ[var] == "2" for var in THREAD_ENV_VARS)

    @pytest.mark.parametrize("raw", ["many", "0"])
    def test_bad_values_ignored(self, monkeypatch, raw):
        monkeypatch.setenv("LRC_THREADS", raw)
        assert configure_threads() is None

    def test_unset(self, monkeypatch):
        monkeypatch.delenv("LRC_THREADS", raising=False)
        assert configure_threads() is None
