import numpy as np

from vitdae.classifier import extract_features, fit_classifier, load_classifier, predict, save_classifier
from vitdae.data import ToySpec, generate_toy


def test_toy_classes_are_separable():
    train = generate_toy(ToySpec(count=100, seed=0))
    test = generate_toy(ToySpec(count=50, seed=1))
    model = fit_classifier(train.images, train.labels, 4, epochs=5, seed=0)
    acc = (predict(model, test.images) == test.labels).mean()
    assert acc > 0.9


def test_checkpoint_round_trip(tmp_path):
    ds = generate_toy(ToySpec(count=8, resolution=8, seed=0))
    model = fit_classifier(ds.images, ds.labels, 4, epochs=1, seed=0)
    save_classifier(model, tmp_path / "clf")
    back = load_classifier(tmp_path / "clf")
    a, b = extract_features(model, ds.images), extract_features(back, ds.images)
    assert a.shape == (32, model.cfg.feature_dim)
    assert np.array_equal(a, b)
    assert np.array_equal(predict(model, ds.images), predict(back, ds.images))
