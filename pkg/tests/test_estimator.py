import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from robustfield import RobustMasker, RobustRadianceField
from robustfield.mask import compute_robust_mask
from robustfield.scene import build_scene, generate_dataset


def test_masker_params_and_clone():
    m = RobustMasker(trim_quantile=0.7, mode="trim_diffuse")
    assert m.get_params()["trim_quantile"] == 0.7
    c = clone(m)
    assert c.get_params() == m.get_params()


def test_masker_transform_matches_pipeline():
    eps = np.random.default_rng(0).random((3, 16, 16))
    out = RobustMasker().fit().transform(eps)
    assert np.array_equal(out, compute_robust_mask(eps).final)
    assert RobustMasker().fit_transform(eps).shape == (3, 16, 16)


def test_masker_validation():
    with pytest.raises(NotFittedError):
        RobustMasker().transform(np.zeros((16, 16)))
    m = RobustMasker().fit()
    with pytest.raises(ValueError):
        m.transform(np.zeros((2, 8, 8)))
    with pytest.raises(ValueError):
        m.transform(-np.ones((16, 16)))
    with pytest.raises(ValueError):
        m.transform(np.full((16, 16), np.nan))


def test_field_estimator_fit_predict_score():
    ds = generate_dataset(build_scene("easy", seed=0), n_train=3, n_eval=2, image_size=16)
    est = RobustRadianceField(steps=4, resolution=5, n_samples=8, patches_per_batch=2, warmup_steps=1,
                              log_interval=2)
    with pytest.raises(NotFittedError):
        est.predict(ds)
    est.fit(ds)
    imgs = est.predict(ds)
    assert imgs.shape == (2, 16, 16, 3)
    assert np.isfinite(est.score(ds))
    assert len(est.history_) == 2
    assert est.to_config().steps == 4
    with pytest.raises(TypeError):
        est.fit("not a dataset")
