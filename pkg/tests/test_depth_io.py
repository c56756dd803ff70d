import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vdpp import depth_io
from vdpp.depth_io import DepthFormatError, DepthSequence


def test_pfm_round_trip(tmp_path):
    frame = np.arange(12, dtype=np.float64).reshape(3, 4) + 0.5
    depth_io.write_pfm(frame, tmp_path / "f.pfm")
    np.testing.assert_array_equal(depth_io.read_pfm(tmp_path / "f.pfm"), frame)


def test_pfm_hand_built_bottom_to_top(tmp_path):
    # in memory [[1, 2], [3, 4]]; PFM stores the bottom row first
    payload = struct.pack("<4f", 3.0, 4.0, 1.0, 2.0)
    (tmp_path / "h.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + payload)
    np.testing.assert_array_equal(depth_io.read_pfm(tmp_path / "h.pfm"), [[1, 2], [3, 4]])


def test_pfm_big_endian(tmp_path):
    payload = struct.pack(">4f", 3.0, 4.0, 1.0, 2.0)
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 2\n1.0\n" + payload)
    np.testing.assert_array_equal(depth_io.read_pfm(tmp_path / "b.pfm"), [[1, 2], [3, 4]])


def test_color_pfm_rejected(tmp_path):
    (tmp_path / "c.pfm").write_bytes(b"PF\n1 1\n-1.0\n" + b"\0" * 12)
    with pytest.raises(DepthFormatError, match="unsupported: color PFM"):
        depth_io.read_pfm(tmp_path / "c.pfm")


@pytest.mark.parametrize(
    "blob, msg",
    [
        (b"P5\n2 2\n-1.0\n" + b"\0" * 16, "bad magic"),
        (b"Pf\n2 2\n-1.0\n" + b"\0" * 12, "expected 16"),
        (b"Pf\n2 2\n-1.0\n" + struct.pack("<4f", 1, 2, float("inf"), 1), "non-finite"),
    ],
)
def test_pfm_errors(tmp_path, blob, msg):
    (tmp_path / "x.pfm").write_bytes(blob)
    with pytest.raises(DepthFormatError, match=msg):
        depth_io.read_pfm(tmp_path / "x.pfm")


def test_write_constant_payload(tmp_path):
    depth_io.write_pfm(np.ones((3, 5)), tmp_path / "one.pfm")
    data = (tmp_path / "one.pfm").read_bytes()
    assert data.endswith(struct.pack("<f", 1.0) * 15)


def test_write_file_size(tmp_path):
    depth_io.write_pfm(np.zeros((3, 3)), tmp_path / "z.pfm")
    header = b"Pf\n3 3\n-1.0\n"
    assert (tmp_path / "z.pfm").stat().st_size == len(header) + 36


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(3, 9), st.integers(3, 9)), elements=st.floats(-1e6, 1e6)))
def test_round_trip_is_exact_at_float32(tmp_path_factory, frame):
    path = tmp_path_factory.mktemp("rt") / "f.pfm"
    depth_io.write_pfm(frame, path)
    back = depth_io.read_pfm(path)
    np.testing.assert_array_equal(back, frame.astype(np.float32).astype(np.float64))


def _write_frames(d, names, shape=(4, 4)):
    d.mkdir(parents=True, exist_ok=True)
    for i, n in enumerate(names):
        depth_io.write_pfm(np.full(shape, float(i + 1)), d / n)


def test_load_sequence_name_order(tmp_path):
    names = [f"{i:03d}.pfm" for i in range(16)]
    # write in scrambled order; loading must not depend on it
    _write_frames(tmp_path, list(reversed(names)))
    seq = depth_io.load_sequence(tmp_path)
    assert seq.T == 16
    assert seq.names == names
    # frame written first got value 1 and is named 015.pfm
    assert seq.frames[-1, 0, 0] == 1.0


def test_load_sequence_mixed_resolution(tmp_path):
    _write_frames(tmp_path, ["000.pfm", "001.pfm"], shape=(32, 32))
    depth_io.write_pfm(np.ones((64, 64)), tmp_path / "002.pfm")
    with pytest.raises(DepthFormatError, match="002.pfm"):
        depth_io.load_sequence(tmp_path)


def test_load_sequence_empty(tmp_path):
    with pytest.raises(DepthFormatError, match="no frames matched"):
        depth_io.load_sequence(tmp_path)


def test_load_sequence_single_frame(tmp_path):
    _write_frames(tmp_path, ["000.pfm"])
    with pytest.raises(DepthFormatError, match="at least 2"):
        depth_io.load_sequence(tmp_path)


def test_load_sequence_unreadable_named(tmp_path):
    _write_frames(tmp_path, ["000.pfm", "001.pfm"])
    (tmp_path / "002.pfm").write_bytes(b"garbage")
    with pytest.raises(DepthFormatError, match="002.pfm"):
        depth_io.load_sequence(tmp_path)


def test_sequence_invariants():
    with pytest.raises(DepthFormatError):
        DepthSequence(np.ones((1, 4, 4)))
    with pytest.raises(DepthFormatError):
        DepthSequence(np.ones((2, 2, 4)))


class TestRenderGray:
    def test_constant_is_zero(self):
        assert not depth_io.render_gray(np.full((3, 3), 7.0)).any()

    def test_endpoints(self):
        img = depth_io.render_gray(np.array([[0.0, 1.0]]), 0.0, 1.0)
        np.testing.assert_array_equal(img, [[0, 255]])

    def test_midpoint_floors(self):
        # floor(0.5 * 255) = 127
        assert depth_io.render_gray(np.array([[0.5]]), 0.0, 1.0)[0, 0] == 127

    def test_clamped(self):
        img = depth_io.render_gray(np.array([[-1.0, 2.0]]), 0.0, 1.0)
        np.testing.assert_array_equal(img, [[0, 255]])

    def test_degenerate_range(self):
        with pytest.raises(ValueError):
            depth_io.render_gray(np.array([[0.0, 1.0]]), 0.5, 0.5)


def test_pgm_round_trip(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    depth_io.write_pgm(img, tmp_path / "a.pgm")
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")
    np.testing.assert_array_equal(depth_io.read_pgm(tmp_path / "a.pgm"), img)


class TestSlitScan:
    def test_temporally_constant(self):
        frame = np.random.default_rng(0).uniform(1, 2, size=(5, 6))
        scan = depth_io.slit_scan(np.stack([frame] * 4), "row", 2)
        assert scan.shape == (4, 6)
        assert (scan == scan[0]).all()

    def test_constant_frames(self):
        c = np.array([1.0, 3.0, 2.0])
        seq = np.broadcast_to(c[:, None, None], (3, 4, 5)).copy()
        scan = depth_io.slit_scan(seq, "row", 1)
        for t in range(3):
            expected = depth_io.render_gray(np.full((1, 5), c[t]), 1.0, 3.0)[0]
            np.testing.assert_array_equal(scan[t], expected)

    def test_moving_edge_hand_assembled(self):
        # frame t: columns < t+1 are near (1.0), the rest far (2.0)
        seq = np.full((3, 4, 5), 2.0)
        for t in range(3):
            seq[t, :, : t + 1] = 1.0
        expected = np.array(
            [
                [0, 255, 255, 255, 255],
                [0, 0, 255, 255, 255],
                [0, 0, 0, 255, 255],
            ],
            dtype=np.uint8,
        )
        np.testing.assert_array_equal(depth_io.slit_scan(seq, "row", 3), expected)
        col = depth_io.slit_scan(seq, "column", 1)
        assert col.shape == (4, 3)
        np.testing.assert_array_equal(col, np.array([[255, 0, 0]] * 4, dtype=np.uint8))

    def test_rows_match_render_of_line(self):
        seq = np.random.default_rng(1).uniform(0.5, 3.0, size=(6, 5, 7))
        lo, hi = seq.min(), seq.max()
        scan = depth_io.slit_scan(seq, "row", 4)
        for t in range(6):
            np.testing.assert_array_equal(scan[t], depth_io.render_gray(seq[t, 4:5, :], lo, hi)[0])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            depth_io.slit_scan(np.ones((2, 4, 4)), "row", 4)
        with pytest.raises(IndexError):
            depth_io.slit_scan(np.ones((2, 4, 4)), "column", -1)


def test_disparity_to_depth():
    np.testing.assert_array_equal(depth_io.disparity_to_depth([2.0, 0.0]), [0.5, 1e6])
