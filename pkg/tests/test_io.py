import numpy as np
import pytest

from degenlio.imu import ImuStream
from degenlio.io import (FileFormatError, read_imu_csv, read_ply, read_points_csv,
                         write_imu_csv, write_ply, write_points_csv)


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(25, 3)) * 10
    taus = rng.uniform(-0.1, 0.0, size=25)
    path = tmp_path / "cloud.ply"
    write_ply(path, pts, taus)
    back_pts, back_t = read_ply(path)
    assert np.array_equal(back_pts, pts)
    assert np.array_equal(back_t, taus)


def test_ply_without_time(tmp_path):
    pts = np.array([[1.0, 2.0, 3.0]])
    path = tmp_path / "p.ply"
    write_ply(path, pts)
    back, t = read_ply(path)
    assert t is None
    assert np.array_equal(back, pts)


def test_ply_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text("not a ply\n")
    with pytest.raises(FileFormatError):
        read_ply(path)


def test_points_csv_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(10, 3))
    taus = rng.uniform(-0.1, 0, size=10)
    path = tmp_path / "c.csv"
    write_points_csv(path, pts, taus)
    back, t = read_points_csv(path)
    assert np.array_equal(back, pts)
    assert np.array_equal(t, taus)


def test_points_csv_header_error(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(FileFormatError):
        read_points_csv(path)


def test_imu_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    n = 20
    stream = ImuStream(np.arange(1, n + 1) * 0.005,
                       rng.normal(size=(n, 3)), rng.normal(size=(n, 3)))
    path = tmp_path / "imu.csv"
    write_imu_csv(path, stream)
    back = read_imu_csv(path)
    assert np.array_equal(back.times, stream.times)
    assert np.array_equal(back.gyro, stream.gyro)
    assert np.array_equal(back.accel, stream.accel)


def test_imu_csv_monotonicity_enforced(tmp_path):
    path = tmp_path / "imu.csv"
    path.write_text("t,gx,gy,gz,ax,ay,az\n0.1,0,0,0,0,0,0\n0.1,0,0,0,0,0,0\n")
    with pytest.raises(FileFormatError):
        read_imu_csv(path)


def test_imu_csv_bad_line_number(tmp_path):
    path = tmp_path / "imu.csv"
    path.write_text("t,gx,gy,gz,ax,ay,az\n0.1,0,0,0,0,0,0\n0.2,x,0,0,0,0,0\n")
    with pytest.raises(FileFormatError, match=":3:"):
        read_imu_csv(path)
