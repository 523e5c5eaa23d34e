import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mbcliquenet import MBCliqueNetClassifier
from mbcliquenet.data import synthetic_dataset
from mbcliquenet.validation import check_images, check_labels, check_positive_int


@pytest.fixture(scope="module")
def blobs():
    ds = synthetic_dataset(32, 1, 8, 8, 2, seed=0, separation=3.0)
    names = np.array(["cat", "dog"])
    return ds.images, names[ds.labels]


class TestClassifier:
    def test_params_and_clone(self):
        clf = MBCliqueNetClassifier(epochs=3, k=1)
        assert clf.get_params()["epochs"] == 3
        twin = clone(clf)
        assert twin.get_params() == clf.get_params() and twin is not clf

    def test_fit_predict(self, blobs):
        X, y = blobs
        clf = MBCliqueNetClassifier(epochs=20, batch_size=8, random_state=0).fit(X, y)
        assert set(clf.classes_) == {"cat", "dog"}
        assert clf.n_features_in_ == 64
        proba = clf.predict_proba(X)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-6)
        assert clf.score(X, y) == 1.0

    def test_flat_input(self, blobs):
        X, y = blobs
        clf = MBCliqueNetClassifier(epochs=1, batch_size=16, image_shape=(1, 8, 8))
        clf.fit(X.reshape(len(X), -1), y)
        assert clf.predict(X.reshape(len(X), -1)).shape == (len(X),)

    def test_not_fitted(self, blobs):
        with pytest.raises(NotFittedError):
            MBCliqueNetClassifier().predict(blobs[0])

    def test_reproducible(self, blobs):
        X, y = blobs
        a = MBCliqueNetClassifier(epochs=1, batch_size=16).fit(X, y).decision_function(X)
        b = MBCliqueNetClassifier(epochs=1, batch_size=16).fit(X, y).decision_function(X)
        assert np.array_equal(a, b)


class TestValidation:
    def test_image_ranks(self):
        assert check_images(np.zeros((2, 4, 4))).shape == (2, 1, 4, 4)
        assert check_images(np.zeros((2, 48)), (3, 4, 4)).shape == (2, 3, 4, 4)

    def test_image_errors(self):
        with pytest.raises(ValueError, match="image_shape"):
            check_images(np.zeros((2, 16)))
        with pytest.raises(ValueError, match="square"):
            check_images(np.zeros((2, 1, 4, 5)))
        with pytest.raises(ValueError):
            check_images(np.full((2, 1, 4, 4), np.nan))

    def test_labels(self):
        classes, enc = check_labels(["b", "a", "b"], 3)
        assert classes.tolist() == ["a", "b"] and enc.tolist() == [1, 0, 1]
        with pytest.raises(ValueError, match="two classes"):
            check_labels([1, 1], 2)
        with pytest.raises(ValueError, match="labels for"):
            check_labels([1, 2], 3)

    def test_positive_int(self):
        assert check_positive_int(3, "n") == 3
        for bad in (0, -1, 2.5, True):
            with pytest.raises(ValueError):
                check_positive_int(bad, "n")
