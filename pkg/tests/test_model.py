import numpy as np
import pytest
import torch

from cider import model as M
from cider.augment import AugmentConfig
from cider.dsp import FeatureConfig, Waveform, chunk_recording, mfcc
from cider.errors import ConfigError, DataError, DivergenceError, InferenceError, TrainingError
from cider.model import (
    ModelConfig,
    TrainConfig,
    chunk_logits,
    chunk_stacks,
    forward,
    init_model,
    load_checkpoint,
    predict_recording,
    save_checkpoint,
    score_from_logits,
    sigmoid,
    train,
)

from conftest import SR, tone
from oracles import gradcheck_relative_error

SMALL = ModelConfig(in_channels=3, stage_channels=(4, 8, 8, 16), dropout=0.0)


def conv_count(net):
    return sum(isinstance(mod, torch.nn.Conv2d) and mod.kernel_size != (1, 1) for mod in net.modules())


def test_nine_conv_layers():
    assert conv_count(init_model(ModelConfig()).net) == 9
    assert conv_count(init_model(ModelConfig(stage_channels=(4, 8), blocks_per_stage=(2, 2),
                                             downsample_strides=(1, 2))).net) == 9


def test_eight_layer_layout_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(stage_channels=(4, 8, 16), blocks_per_stage=(1, 1, 1), downsample_strides=(1, 2, 2))
    with pytest.raises(ConfigError):
        ModelConfig(n_conv_layers=8)


def test_init_is_seeded():
    a, b = init_model(SMALL, seed=4), init_model(SMALL, seed=4)
    for p, q in zip(a.net.parameters(), b.net.parameters()):
        assert torch.equal(p, q)
    c = init_model(SMALL, seed=5)
    assert not torch.equal(next(a.net.parameters()), next(c.net.parameters()))


def test_in_channels_only_changes_stem():
    one = init_model(ModelConfig(in_channels=1))
    three = init_model(ModelConfig(in_channels=3))
    s1 = {k: v.shape for k, v in one.net.state_dict().items()}
    s3 = {k: v.shape for k, v in three.net.state_dict().items()}
    assert s1.pop("stem.0.weight")[1] == 1 and s3.pop("stem.0.weight")[1] == 3
    assert s1 == s3


def test_forward_shapes_and_errors(rng):
    m = init_model(SMALL)
    x = rng.standard_normal((5, 3, 40, 98))
    assert forward(m, x).shape == (5,)
    with pytest.raises(InferenceError):
        forward(m, rng.standard_normal((2, 1, 40, 98)))


def test_batch_permutation_and_duplicates(rng):
    m = init_model(SMALL, seed=1)
    x = rng.standard_normal((6, 3, 40, 98))
    perm = rng.permutation(6)
    assert np.allclose(forward(m, x)[perm], forward(m, x[perm]), atol=1e-6)
    dup = forward(m, np.stack([x[0], x[0]]))
    assert abs(dup[0] - dup[1]) < 1e-6


def test_gradients_match_finite_differences():
    assert gradcheck_relative_error() < 1e-3


def test_logit_mean_fixture():
    assert f"{score_from_logits([-4.0, 4.0]):.6f}" == "0.500000"
    with pytest.raises(InferenceError):
        score_from_logits([])


def test_single_chunk_identity(short_cfg):
    m = init_model(ModelConfig(in_channels=1, stage_channels=(4, 8, 8, 16)), seed=2, feature_config=short_cfg)
    w = tone(220, 1.0)
    direct = sigmoid(forward(m, mfcc(w, short_cfg)[None, None]))[0]
    assert abs(predict_recording(m, [w]) - direct) < 1e-6


def test_long_recording_chunk_count():
    cfg = FeatureConfig()
    m = init_model(ModelConfig(in_channels=1, stage_channels=(4, 8, 8, 16)), feature_config=cfg)
    w = Waveform(np.random.default_rng(0).uniform(-0.5, 0.5, 14 * SR), SR)
    assert chunk_logits(m, [w]).shape == (3,)


def test_chunk_order_does_not_matter(short_cfg, rng):
    m = init_model(ModelConfig(in_channels=1, stage_channels=(4, 8, 8, 16)), feature_config=short_cfg)
    w = Waveform(rng.uniform(-0.5, 0.5, int(4.5 * SR)), SR)
    stacks = chunk_stacks([w], short_cfg)
    base = score_from_logits(forward(m, stacks))
    shuffled = score_from_logits(forward(m, stacks[rng.permutation(len(stacks))]))
    assert abs(base - shuffled) < 1e-9


def test_modalities_align_by_repeating_last_chunk(short_cfg):
    long_w, short_w = tone(200, 2.5), tone(300, 0.8)
    stacks = chunk_stacks([long_w, short_w, None], short_cfg)
    assert stacks.shape == (3, 3, 40, short_cfg.n_frames())
    assert np.array_equal(stacks[1, 1], stacks[2, 1]) and np.array_equal(stacks[0, 1], stacks[2, 1])
    assert np.all(stacks[:, 2] == 0)
    last = chunk_recording(long_w, short_cfg)[-1]
    assert np.array_equal(stacks[2, 0], mfcc(last, short_cfg))


def test_weighted_bce_matches_formula():
    z = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    y = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    p = 1 / (1 + np.exp(-z.numpy()))
    expected = -np.mean(3.0 * y.numpy() * np.log(p) + (1 - y.numpy()) * np.log(1 - p))
    assert M.weighted_bce(z, y, 3.0).item() == pytest.approx(expected, rel=1e-12)


def _quick_train(tiny_instances, cfg, seed=0, epochs=2):
    m = init_model(SMALL, seed=seed, feature_config=cfg, modality_set=("breath", "vowel", "counting"))
    tc = TrainConfig(epochs=epochs, batch_size=4, learning_rate=1e-3, seed=seed, patience=5)
    return train(m, tiny_instances["train"], tiny_instances["val"], tc, AugmentConfig())


def test_training_is_deterministic(tiny_instances, short_cfg):
    m1, h1 = _quick_train(tiny_instances, short_cfg)
    m2, h2 = _quick_train(tiny_instances, short_cfg)
    assert [r.to_dict() for r in h1] == [r.to_dict() for r in h2]
    for p, q in zip(m1.net.state_dict().values(), m2.net.state_dict().values()):
        assert torch.equal(p, q)


def test_training_errors(tiny_instances, short_cfg, monkeypatch):
    m = init_model(SMALL, feature_config=short_cfg)
    tc = TrainConfig(epochs=1, batch_size=4)
    one_class = [i for i in tiny_instances["train"] if i.label == 1]
    with pytest.raises(TrainingError):
        train(m, one_class, tiny_instances["val"], tc)
    with pytest.raises(TrainingError):
        train(m, tiny_instances["train"], [], tc)
    monkeypatch.setattr(M, "weighted_bce", lambda *a: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(DivergenceError):
        train(m, tiny_instances["train"], tiny_instances["val"], tc)


def test_checkpoint_roundtrip(tiny_instances, short_cfg, tmp_path):
    m, _ = _quick_train(tiny_instances, short_cfg, epochs=1)
    digest = save_checkpoint(m, tmp_path / "m.ckpt", extra={"seed": 0})
    back = load_checkpoint(tmp_path / "m.ckpt")
    inst = tiny_instances["test"][0]
    assert predict_recording(back, inst.waveforms) == predict_recording(m, inst.waveforms)
    assert back.modality_set == m.modality_set and len(digest) == 64
    blob = bytearray((tmp_path / "m.ckpt").read_bytes())
    blob[len(blob) // 3] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad.ckpt")
