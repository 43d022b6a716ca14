import json
import struct

import numpy as np
import pytest

from kdaif.data import gen_blobs
from kdaif.distill import TrainConfig, train_kdaif
from kdaif.errors import InputError
from kdaif.io import influence_files, load_params, read_metrics_csv, save_params, save_run, write_metrics_csv
from kdaif.model import MlpSpec, Net, init_params


class TestParamFile:
    def test_round_trip(self, tmp_path):
        spec = MlpSpec((3, 4, 2), "relu")
        theta = np.random.default_rng(0).normal(size=spec.n_params)
        save_params(tmp_path / "p.bin", spec, theta, {"role": "x"})
        back_spec, back, header = load_params(tmp_path / "p.bin", expect=spec)
        assert back_spec == spec
        np.testing.assert_array_equal(back, theta)
        assert header["role"] == "x" and header["spec_hash"] == spec.spec_hash()

    def test_layout_is_little_endian_float64(self, tmp_path):
        spec = MlpSpec((1, 2))
        theta = np.array([1.5, -2.0, 0.25, 3.0])
        save_params(tmp_path / "p.bin", spec, theta)
        raw = (tmp_path / "p.bin").read_bytes()
        assert raw[:8] == b"KDAIFPRM"
        (hlen,) = struct.unpack("<I", raw[8:12])
        assert json.loads(raw[12 : 12 + hlen])["dim"] == 4
        assert struct.unpack("<4d", raw[12 + hlen :]) == tuple(theta)

    def test_spec_mismatch(self, tmp_path):
        spec = MlpSpec((3, 2))
        save_params(tmp_path / "p.bin", spec, np.zeros(spec.n_params))
        with pytest.raises(InputError):
            load_params(tmp_path / "p.bin", expect=MlpSpec((3, 5, 2)))

    def test_not_a_param_file(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"hello world!")
        with pytest.raises(InputError):
            load_params(tmp_path / "x.bin")

    def test_truncated(self, tmp_path):
        spec = MlpSpec((3, 2))
        save_params(tmp_path / "p.bin", spec, np.zeros(spec.n_params))
        raw = (tmp_path / "p.bin").read_bytes()
        (tmp_path / "p.bin").write_bytes(raw[:-8])
        with pytest.raises(InputError):
            load_params(tmp_path / "p.bin")


def test_metrics_csv_round_trip(tmp_path):
    rows = [{"iteration": 0, "step": 0, "acc": 0.5}, {"iteration": 1, "step": 10, "acc": 0.75, "extra": 1.25}]
    write_metrics_csv(tmp_path / "m.csv", rows)
    assert read_metrics_csv(tmp_path / "m.csv") == rows


@pytest.fixture(scope="module")
def run():
    b = gen_blobs(3, 30, 2, 3.0, 0)
    t = Net(MlpSpec((2, 6, 3)), init_params(MlpSpec((2, 6, 3)), 0))
    s = Net(MlpSpec((2, 3)), init_params(MlpSpec((2, 3)), 1))
    cfg = TrainConfig(max_steps=5, repeats=2, batch_size=16)
    return train_kdaif(t, s, b.train, b.val, cfg, "m3", test=b.test), b


class TestRunDirectory:
    def test_layout(self, run, tmp_path):
        r, b = run
        out = save_run(r, tmp_path / "r", {"note": "x"}, b.noise_mask)
        names = sorted(p.name for p in out.iterdir())
        assert names == [
            "config.json",
            "final_params.bin",
            "final_teacher_params.bin",
            "influence_iter_0.json",
            "influence_iter_1.json",
            "metrics.csv",
            "noise_mask.csv",
        ]
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["schema_version"] == 1 and cfg["mechanism"] == "M3_BOTH" and cfg["note"] == "x"
        assert [p.name for p in influence_files(out)] == ["influence_iter_0.json", "influence_iter_1.json"]
        spec, theta, _ = load_params(out / "final_params.bin")
        np.testing.assert_array_equal(theta, r.student.params)
        assert len(read_metrics_csv(out / "metrics.csv")) == 3

    def test_append_only(self, run, tmp_path):
        r, _ = run
        save_run(r, tmp_path / "r")
        with pytest.raises(InputError):
            save_run(r, tmp_path / "r")
