import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from zsadmoe import PromptMoEDetector
from zsadmoe.data import load_dataset, stack_samples
from zsadmoe.errors import InputError


@pytest.fixture(scope="module")
def splits(tiny_data):
    return stack_samples(load_dataset(tiny_data / "train.json")), stack_samples(load_dataset(tiny_data / "test.json"))


@pytest.fixture(scope="module")
def fitted(splits):
    (x, m, y, c), _ = splits
    return PromptMoEDetector(config="micro").fit(x, y, m, classes=c)


def test_params_and_clone():
    det = PromptMoEDetector(config="micro", epochs=1, top_k=1, alpha=0.0)
    params = det.get_params()
    assert params["epochs"] == 1 and params["top_k"] == 1 and params["alpha"] == 0.0
    twin = clone(det)
    assert twin.get_params() == params and not hasattr(twin, "model_")
    det.set_params(lr=0.01)
    assert det.lr == 0.01


def test_not_fitted(splits):
    _, (x, _, _, _) = splits
    with pytest.raises(NotFittedError):
        PromptMoEDetector().decision_function(x)


def test_fit_predict(fitted, splits):
    _, (x, m, y, _) = splits
    scores = fitted.decision_function(x)
    maps = fitted.predict_maps(x)
    assert scores.shape == (len(x),) and maps.shape == m.shape
    assert scores.min() >= 0 and scores.max() <= 1 and maps.min() >= 0 and maps.max() <= 1
    assert set(np.unique(fitted.predict(x))) <= {0, 1}
    assert 0 <= fitted.score(x, y) <= 1
    assert fitted.config_.train.epochs == 2 and len(fitted.train_log_) > 0
    assert fitted.n_features_in_ == 32 * 32 * 3


def test_overrides_reach_config(splits):
    (x, m, y, c), _ = splits
    det = PromptMoEDetector(config="micro", epochs=1, static_prompt=True, random_state=3).fit(x, y, m)
    assert det.config_.train.epochs == 1 and det.config_.vgmop.static_prompt and det.config_.train.seed == 3


def test_deterministic(fitted, splits):
    (x, m, y, c), (xt, _, _, _) = splits
    again = PromptMoEDetector(config="micro").fit(x, y, m, classes=c)
    assert np.array_equal(again.decision_function(xt), fitted.decision_function(xt))


@pytest.mark.parametrize("bad", [np.zeros((2, 32, 32)), np.full((2, 32, 32, 3), 1.5), np.zeros((2, 16, 16, 3))])
def test_input_validation(fitted, bad):
    with pytest.raises(InputError):
        fitted.decision_function(bad)


def test_fit_shape_mismatch(splits):
    (x, m, y, _), _ = splits
    with pytest.raises(InputError):
        PromptMoEDetector(config="micro").fit(x, y[:-1], m)
