import csv
import struct

import numpy as np
import pytest
from PIL import Image

from mimlab.analysis import InvarianceCurve
from mimlab.data import (Dataset, DatasetFormatError, gen_synthetic, load_dataset, load_packed,
                         parse_synthetic_spec, save_packed)
from mimlab.storage import (CURVE_HEADER, METRICS_HEADER, Checkpoint, CheckpointError, checkpoint_bytes,
                            emit_curve, emit_metrics, load_checkpoint, read_curve, read_metrics, save_checkpoint)
from mimlab.training import MetricsLog
from mimlab.vit import init_params


class TestDataset:
    def test_invariants(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 3, 4, 4)), labels=[0])
        with pytest.raises(ValueError):
            Dataset(np.full((1, 3, 4, 4), 1.2))

    def test_folder_with_labels(self, tmp_path):
        rng = np.random.default_rng(0)
        for name in ("b.png", "a.ppm"):
            Image.fromarray(rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)).save(tmp_path / name)
        with open(tmp_path / "labels.csv", "w", newline="") as fh:
            csv.writer(fh).writerows([["filename", "label"], ["b.png", 1], ["a.ppm", 0]])
        ds = load_dataset(str(tmp_path), require_labels=True)
        assert len(ds) == 2 and ds.labels.tolist() == [0, 1]
        assert ds.images.shape == (2, 3, 8, 8) and 0.0 <= ds.images.min() and ds.images.max() <= 1.0
        with Image.open(tmp_path / "a.ppm") as im:
            np.testing.assert_array_equal(ds.images[0], np.asarray(im).transpose(2, 0, 1) / 255.0)

    def test_folder_missing_labels(self, tmp_path):
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / "x.png")
        with pytest.raises(DatasetFormatError):
            load_dataset(str(tmp_path), require_labels=True)

    def test_packed_round_trip(self, tmp_path):
        ds = gen_synthetic(12, classes=3, image_size=8, seed=1)
        save_packed(ds, tmp_path / "d.bin")
        back = load_packed(tmp_path / "d.bin")
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_packed_layout(self, tmp_path):
        ds = Dataset(np.full((1, 1, 2, 2), 1.0), labels=[3])
        save_packed(ds, tmp_path / "d.bin")
        raw = (tmp_path / "d.bin").read_bytes()
        assert raw[:8] == b"MIMDATA\0"
        assert struct.unpack_from("<IIIIII", raw, 8) == (1, 1, 1, 2, 2, 1)
        assert raw[32:36] == b"\xff" * 4 and struct.unpack_from("<i", raw, 36) == (3,)

    def test_truncated(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(b"MIMDA")
        with pytest.raises(DatasetFormatError, match="corrupt header"):
            load_packed(tmp_path / "t.bin")

    def test_size_mismatch(self, tmp_path):
        save_packed(gen_synthetic(4, image_size=8), tmp_path / "d.bin")
        raw = (tmp_path / "d.bin").read_bytes()
        (tmp_path / "d.bin").write_bytes(raw[:-3])
        with pytest.raises(DatasetFormatError, match="size mismatch"):
            load_packed(tmp_path / "d.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "d.bin").write_bytes(b"X" * 64)
        with pytest.raises(DatasetFormatError):
            load_packed(tmp_path / "d.bin")


class TestSynthetic:
    def test_deterministic(self):
        a, b = gen_synthetic(20, seed=4), gen_synthetic(20, seed=4)
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != gen_synthetic(20, seed=5).fingerprint()

    def test_balanced(self):
        counts = list(gen_synthetic(103, classes=4).class_histogram().values())
        assert max(counts) - min(counts) <= 1

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            gen_synthetic(4, classes=1)

    def test_descriptor_string(self):
        assert parse_synthetic_spec("synthetic:n=8,classes=3,image_size=16,seed=2") == \
            {"n": 8, "classes": 3, "image_size": 16, "seed": 2}
        assert len(load_dataset("synthetic:n=8,classes=2,image_size=8")) == 8

    def test_separable_by_small_mlp(self):
        # a 2-layer classifier on raw pixels: the classes must be learnable
        from sklearn.neural_network import MLPClassifier

        ds = gen_synthetic(1000, classes=4, seed=0)
        X = ds.images.reshape(len(ds), -1)
        clf = MLPClassifier(hidden_layer_sizes=(128,), max_iter=300, random_state=0)
        clf.fit(X[:800], ds.labels[:800])
        assert clf.score(X[800:], ds.labels[800:]) >= 0.9


def _checkpoint(cfg, rng):
    params = init_params(cfg, rng)
    target = params.copy(requires_grad=False)
    opt = {"t": 3, "m": {k: rng.normal(size=t.shape) for k, t in params.items()},
           "v": {k: rng.random(t.shape) for k, t in params.items()}}
    state = np.random.default_rng(9).bit_generator.state
    return Checkpoint(cfg, params, target, opt, {"mode": "mae"}, state, epoch=2, step=16,
                      metrics=[{"epoch": 1, "loss": 0.5}], extra={"k": 1})


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, tiny_config, rng):
        ck = _checkpoint(tiny_config, rng)
        save_checkpoint(ck, tmp_path / "c.ckpt")
        back = load_checkpoint(tmp_path / "c.ckpt")
        assert checkpoint_bytes(back) == checkpoint_bytes(ck)
        for k, t in ck.params.items():
            np.testing.assert_array_equal(back.params[k].data, t.data)
            np.testing.assert_array_equal(back.optimizer["v"][k], ck.optimizer["v"][k])
        assert back.rng_state == ck.rng_state and back.epoch == 2 and back.optimizer["t"] == 3

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 60)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_checksum(self, tmp_path, tiny_config, rng):
        raw = bytearray(checkpoint_bytes(_checkpoint(tiny_config, rng)))
        raw[-100] ^= 1
        (tmp_path / "c.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_version(self, tmp_path, tiny_config, rng):
        import hashlib

        raw = bytearray(checkpoint_bytes(_checkpoint(tiny_config, rng)))
        struct.pack_into("<I", raw, 8, 99)
        body = bytes(raw[:-32])
        (tmp_path / "c.ckpt").write_bytes(body + hashlib.sha256(body).digest())
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_truncated(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"MIML")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_unwritable(self, tmp_path, tiny_config, rng):
        with pytest.raises(OSError):
            save_checkpoint(_checkpoint(tiny_config, rng), tmp_path / "missing" / "c.ckpt")


class TestCSV:
    def _log(self):
        log = MetricsLog()
        for e in range(1, 4):
            log.append(e, loss=1.0 / e, distance_term=None, constraint_term=None, psnr=10.0 + e, lr=1e-4 * e)
        return log

    def test_metrics(self, tmp_path):
        log = self._log()
        emit_metrics(log, tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,distance_term,constraint_term,psnr,lr"
        assert len(lines) == 1 + 3
        assert read_metrics(tmp_path / "m.csv") == [{k: r.get(k) for k in METRICS_HEADER} for r in log.records]

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            emit_metrics(self._log(), tmp_path / "nope" / "m.csv")

    def test_curve(self, tmp_path):
        curve = InvarianceCurve([0.0, 0.5], [0, 1], np.array([[1.0, 0.8], [1.0, 0.6]]), 64, 0)
        emit_curve(curve, tmp_path / "c.csv", tmp_path / "c.svg")
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == ",".join(CURVE_HEADER)
        assert read_curve(tmp_path / "c.csv") == [(0, 0.0, 1.0), (0, 0.5, 0.8), (1, 0.0, 1.0), (1, 0.5, 0.6)]
        assert (tmp_path / "c.svg").read_text().startswith("<svg")

    def test_metrics_log_append_only(self):
        log = self._log()
        with pytest.raises(ValueError):
            log.append(3, loss=0.0)
