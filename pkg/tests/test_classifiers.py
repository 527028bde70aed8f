import struct

import numpy as np
import pytest

from signshield import classifiers as C
from signshield import dataset as D
from signshield import tensor as T
from signshield.errors import DataError, FormatError, InputShapeError, LabelError, ParameterError


def tiny_model(model_id="A", seed=0):
    arch = C.architecture(model_id)
    params = T.glorot_init(arch.layers, arch.input_shape, np.random.default_rng(seed))
    return C.TrainedModel(arch, T.Network(arch.input_shape, arch.layers, params))


@pytest.fixture(scope="module")
def small_set():
    x, y = D.as_arrays(D.generate_synthetic(seed=0, per_class=1))
    return x, y


def test_architectures():
    a, b = C.architecture("A"), C.architecture(C.ModelId.MODEL_B)
    assert a.input_shape == (64, 64, 3) and b.input_shape == (56, 56, 3)
    assert C.architecture("model_b") is b
    assert any(layer.kind == "residual_add" for layer in b.layers)
    with pytest.raises(ParameterError):
        C.architecture("C")


class TestTrain:
    def test_bit_identical_reruns(self, small_set):
        x, y = small_set
        cfg = C.TrainConfig(epochs=1, batch_size=6, learning_rate=0.01, seed=4)
        m1, m2 = C.train(x, y, C.architecture("A"), cfg), C.train(x, y, C.architecture("A"), cfg)
        for k in m1.weights:
            assert m1.weights[k].tobytes() == m2.weights[k].tobytes()
        assert m1.epoch_losses == m2.epoch_losses

    def test_label_out_of_range(self, small_set):
        x, y = small_set
        y = y.copy()
        y[0] = 18
        with pytest.raises(LabelError):
            C.train(x, y, C.architecture("A"), C.TrainConfig(epochs=1))

    def test_empty(self):
        with pytest.raises(DataError):
            C.train(np.zeros((0, 64, 64, 3)), np.zeros(0, int), C.architecture("A"))

    def test_wrong_resolution(self, small_set):
        x, y = small_set
        with pytest.raises(InputShapeError):
            C.train(x, y, C.architecture("B"), C.TrainConfig(epochs=1))

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            C.TrainConfig(epochs=0)
        with pytest.raises(ParameterError):
            C.TrainConfig(crop_fraction=0)


class TestPredict:
    def _dense_model(self, logits):
        arch = C.ModelArchitecture(C.ModelId.MODEL_A, (2,), (T.dense("d", len(logits)),))
        params = {"d.w": np.zeros((2, len(logits)), np.float32), "d.b": np.asarray(logits, np.float32)}
        return C.TrainedModel(arch, T.Network((2,), arch.layers, params))

    def test_argmax(self):
        assert C.predict(self._dense_model([0.1, 3.0, 0.1]), np.zeros(2, np.float32))[0] == 1

    def test_tie_goes_to_lowest_index(self):
        assert C.predict(self._dense_model([0.5] * 18), np.zeros(2, np.float32))[0] == 0

    def test_batch_matches_single(self, small_set):
        m = tiny_model()
        x, _ = small_set
        assert C.predict_batch(m, x[:3]).tolist() == [C.predict(m, xi)[0] for xi in x[:3]]

    def test_shape_mismatch(self):
        with pytest.raises(InputShapeError):
            C.predict(tiny_model(), np.zeros((56, 56, 3), np.float32))


class TestWeightFile:
    @pytest.mark.parametrize("model_id", ["A", "B"])
    def test_round_trip_bitwise(self, tmp_path, model_id):
        m = tiny_model(model_id, seed=2)
        C.save_model(m, tmp_path / "m.sshd")
        back = C.load_model(tmp_path / "m.sshd")
        x = np.random.default_rng(0).uniform(size=m.input_shape).astype(np.float32)
        assert C.predict(back, x)[1].tobytes() == C.predict(m, x)[1].tobytes()
        assert back.architecture.id == m.architecture.id

    def test_bad_magic(self, tmp_path):
        C.save_model(tiny_model(), tmp_path / "m.sshd")
        data = bytearray((tmp_path / "m.sshd").read_bytes())
        data[:4] = b"XXXX"
        (tmp_path / "m.sshd").write_bytes(bytes(data))
        with pytest.raises(FormatError) as info:
            C.load_model(tmp_path / "m.sshd")
        assert info.value.offset == 0

    def test_truncation_names_tensor(self, tmp_path):
        C.save_model(tiny_model(), tmp_path / "m.sshd")
        data = (tmp_path / "m.sshd").read_bytes()
        (tmp_path / "m.sshd").write_bytes(data[:-10])
        with pytest.raises(FormatError, match="weights of tensor") as info:
            C.load_model(tmp_path / "m.sshd")
        assert info.value.offset is not None

    def test_trailing_bytes(self, tmp_path):
        C.save_model(tiny_model(), tmp_path / "m.sshd")
        with open(tmp_path / "m.sshd", "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(FormatError, match="trailing"):
            C.load_model(tmp_path / "m.sshd")

    def test_header_layout(self, tmp_path):
        m = tiny_model()
        C.save_model(m, tmp_path / "m.sshd")
        data = (tmp_path / "m.sshd").read_bytes()
        assert data[:4] == b"SSHD" and data[4] == 1 and data[5] == 0
        assert struct.unpack("<I", data[6:10])[0] == len(m.weights)
