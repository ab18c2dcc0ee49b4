import numpy as np
import pytest

from teacher_export.store import StoreWriter, verify_store


def _fill(path, n=3, frames=49, seed=0):
    rng = np.random.default_rng(seed)
    items = [(f"w/clip{i}.wav", rng.normal(0, 0.4, (frames, 768)).astype(np.float32))
             for i in range(n)]
    with StoreWriter(path) as w:
        for uid, arr in items:
            w.add(uid, arr)
    return items


class TestWriter:
    def test_fresh_store_verifies(self, tmp_path):
        path = tmp_path / "s.w2ve"
        _fill(path)
        report = verify_store(path)
        assert report["ok"], report["errors"]
        assert report["records"] == 3
        assert report["frame_histogram"] == {49: 3}

    def test_empty_store_valid(self, tmp_path):
        path = tmp_path / "empty.w2ve"
        with StoreWriter(path):
            pass
        report = verify_store(path)
        assert report["ok"] and report["records"] == 0

    def test_wrong_dim_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            with StoreWriter(tmp_path / "s.w2ve") as w:
                w.add("a", np.zeros((4, 512), dtype=np.float32))

    def test_duplicate_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            with StoreWriter(tmp_path / "s.w2ve") as w:
                w.add("a", np.zeros((4, 768), dtype=np.float32))
                w.add("a", np.zeros((4, 768), dtype=np.float32))


class TestVerify:
    def test_single_flipped_byte_fails_exactly_one_record(self, tmp_path):
        path = tmp_path / "s.w2ve"
        _fill(path, n=3)
        raw = bytearray(path.read_bytes())
        # corrupt the middle of the first record's payload
        raw[12 + 30 + 1000] ^= 0x01
        path.write_bytes(bytes(raw))
        report = verify_store(path)
        assert not report["ok"]
        crc_errors = [e for e in report["errors"] if "CRC" in e]
        assert len(crc_errors) == 1
        assert "w/clip0.wav" in crc_errors[0]

    def test_truncated_file_reports_index_failure(self, tmp_path):
        path = tmp_path / "s.w2ve"
        _fill(path, n=2)
        path.write_bytes(path.read_bytes()[:-30])
        report = verify_store(path)
        assert not report["ok"]
        assert report["errors"]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.w2ve"
        path.write_bytes(b"XXXX" + bytes(40))
        report = verify_store(path)
        assert not report["ok"]
        assert "bad magic" in report["errors"]

    def test_count_mismatch_detected(self, tmp_path):
        path = tmp_path / "s.w2ve"
        _fill(path, n=2)
        raw = bytearray(path.read_bytes())
        raw[8:12] = (5).to_bytes(4, "little")   # lie about the record count
        path.write_bytes(bytes(raw))
        report = verify_store(path)
        assert not report["ok"]


class TestPrimaryInterop:
    """Store interop criterion: the trainer-side reader must round-trip the
    exporter's bytes exactly."""

    def test_read_back_bit_identical(self, tmp_path):
        tcakws_data = pytest.importorskip("tcakws.data")
        path = tmp_path / "s.w2ve"
        items = _fill(path, n=4, seed=3)
        report = verify_store(path)
        store = tcakws_data.TeacherStore(path)
        assert store.record_count == 4
        ok = report["ok"] and report["frame_histogram"] == {49: 4}
        for uid, arr in items:
            got = tcakws_data.read_teacher(store, uid)
            ok = ok and np.array_equal(got, arr) and got.tobytes() == arr.tobytes()
        print(f"\nACCEPTANCE store-interop: {'PASS' if ok else 'FAIL'} "
              f"(4 records verified, read back bit-identical, uniform 49 frames)",
              flush=True)
        assert ok

    def test_primary_written_store_verifies_here(self, tmp_path):
        tcakws_data = pytest.importorskip("tcakws.data")
        path = tmp_path / "p.w2ve"
        rng = np.random.default_rng(5)
        with tcakws_data.TeacherStoreWriter(path) as w:
            for i in range(3):
                w.add(f"x/{i}.wav", rng.normal(size=(49, 768)).astype(np.float32))
        report = verify_store(path)
        assert report["ok"], report["errors"]
        assert report["frame_histogram"] == {49: 3}
