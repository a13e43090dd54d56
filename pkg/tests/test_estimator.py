import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gsclab.autodiff import ContractViolation
from gsclab.estimator import IncrementalSegmenter, check_images, check_label_maps
from gsclab.scenario import build_step_dataset, preset_scenario

PARAMS = dict(channels=(4, 4, 4), epochs_step0=3, epochs_per_step=2, batch_size=4, lr_step0=0.05,
              lr_incremental=0.005)


@pytest.fixture(scope="module")
def data():
    spec = preset_scenario("4-1", images_per_step=8, test_images_per_step=4, image_size=(16, 16))
    return [build_step_dataset(spec, t) for t in range(2)], build_step_dataset(spec, 1, "test")


def test_get_params_and_clone():
    est = IncrementalSegmenter(method="ft", softness=0.5)
    params = est.get_params()
    assert params["method"] == "ft" and params["softness"] == 0.5
    assert clone(est).get_params() == params


def test_fit_partial_fit_predict(data):
    (d0, d1), test = data
    est = IncrementalSegmenter(**PARAMS).fit(d0.images, d0.gt_visible)
    assert est.classes_.tolist() == [0, 1, 2, 3, 4]
    est.partial_fit(d1.images, d1.gt_visible)
    assert est.classes_.tolist() == [0, 1, 2, 3, 4, 5]
    assert est.step_classes_ == [[1, 2, 3, 4], [5]]
    proba = est.predict_proba(test.images)
    assert proba.shape == (4, 6, 16, 16)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
    pred = est.predict(test.images)
    assert set(np.unique(pred)) <= set(est.classes_.tolist())
    assert 0.0 <= est.score(test.images, test.gt_full) <= 1.0


def test_partial_fit_on_fresh_estimator_fits(data):
    (d0, _), _ = data
    est = IncrementalSegmenter(**PARAMS).partial_fit(d0.images, d0.gt_visible)
    assert len(est.step_classes_) == 1


def test_not_fitted():
    with pytest.raises(NotFittedError):
        IncrementalSegmenter().predict(np.zeros((1, 3, 8, 8)))


def test_incremental_step_needs_new_class(data):
    (d0, _), _ = data
    est = IncrementalSegmenter(**PARAMS).fit(d0.images, d0.gt_visible)
    with pytest.raises(ContractViolation):
        est.partial_fit(d0.images, d0.gt_visible)


def test_bad_method(data):
    (d0, _), _ = data
    with pytest.raises(ContractViolation):
        IncrementalSegmenter(method="nope").fit(d0.images, d0.gt_visible)


class TestValidation:
    @pytest.mark.parametrize("x", [np.zeros((3, 8, 8)), np.zeros((1, 4, 8, 8)), np.zeros((0, 3, 8, 8)),
                                   np.array([[[["a"]]]])])
    def test_images_rejected(self, x):
        with pytest.raises(ContractViolation):
            check_images(x)

    def test_nan_rejected(self):
        x = np.zeros((1, 3, 4, 4))
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(ContractViolation):
            check_images(x)

    def test_labels(self):
        x = np.zeros((2, 3, 4, 4))
        assert check_label_maps(np.ones((2, 4, 4)), x).dtype == np.int64
        for bad in (np.full((2, 4, 4), -1), np.full((2, 4, 4), 0.5), np.zeros((2, 4, 5), int), np.zeros((4, 4))):
            with pytest.raises(ContractViolation):
                check_label_maps(bad, x)
