import math

import numpy as np
import pytest
import torch

from odgen.data import apply_scaler, fit_feature_scaler, generate_synthetic_corpus
from odgen.diffusion import SamplerConfig
from odgen.training import CLIP_HEADROOM, DiffusionTrainConfig, WeDAN, train_wedan

from conftest import make_area


@pytest.fixture(scope="module")
def small():
    data = generate_synthetic_corpus(3, (4, 6), seed=2, noise_level=0.1)
    return data, train_wedan(data, DiffusionTrainConfig(T=20, steps=10, grad_accum=2, seed=3))


def test_checkpoint_roundtrip(small, tmp_path):
    data, model = small
    model.save(tmp_path / "ck")
    loaded = WeDAN.load(tmp_path / "ck")
    for a, b in zip(model.model.state_dict().values(), loaded.model.state_dict().values()):
        assert torch.equal(a, b)
    sampler = SamplerConfig(tau=5, n_samples=2)
    np.testing.assert_array_equal(model.generate(data[0][0], sampler, 1).flows, loaded.generate(data[0][0], sampler, 1).flows)
    assert loaded.manifest_extra["train_area_ids"] == [a.area_id for a, _ in data]


def test_clip_range_from_training_flows(small):
    data, model = small
    top = max(np.log1p(od.flows).max() for _, od in data)
    lo, hi = model.clip_range
    assert lo == 0.0 and hi == pytest.approx(top + CLIP_HEADROOM)
    assert CLIP_HEADROOM == pytest.approx(math.log(10))


def test_training_is_seeded(small):
    data, model = small
    again = train_wedan(data, DiffusionTrainConfig(T=20, steps=10, grad_accum=2, seed=3))
    assert again.history == model.history


def test_callback_and_ema():
    data = generate_synthetic_corpus(2, (3, 4), seed=0)
    seen = []
    cfg = DiffusionTrainConfig(T=10, steps=6, ema_decay=0.9, lr_schedule="cosine")
    train_wedan(data, cfg, callback=lambda step, bundle: seen.append((step, len(bundle.history))))
    assert seen == [(s, s) for s in range(1, 7)]


def test_config_validation():
    with pytest.raises(ValueError):
        DiffusionTrainConfig(steps=0)
    with pytest.raises(ValueError):
        DiffusionTrainConfig(ema_decay=1.0)
    with pytest.raises(ValueError):
        DiffusionTrainConfig.from_dict({"bogus": 1})
    assert DiffusionTrainConfig.from_dict({"T": 50, "split": {"seed": 1}}).T == 50


def test_log1p_scaler_roundtrip():
    areas = [make_area(5, seed=s) for s in range(3)]
    sc = fit_feature_scaler(areas, log1p=True)
    Z = np.vstack([apply_scaler(sc, a).node_features for a in areas])
    np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-10)
    X = np.vstack([a.feature_matrix for a in areas])
    np.testing.assert_allclose(sc.inverse(Z), X, rtol=1e-10, atol=1e-10)
    assert type(sc).from_dict(sc.to_dict()).log1p
