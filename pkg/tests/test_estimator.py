import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fusionflow import SceneFlowEstimator, dataio, pipeline
from fusionflow.validation import check_samples

TINY = dict(channels=(4, 4, 6, 6, 8, 8), search_radius=1, estimator_widths=(8, 6),
            context_widths=(6, 6, 6, 6, 6, 6), steps=2, batch_size=2)


@pytest.fixture(scope='module')
def samples():
    return dataio.synth_dataset(2, (64, 64), seed=9)


@pytest.fixture(scope='module')
def fitted(samples):
    return SceneFlowEstimator(**TINY).fit(samples)


def test_params_round_trip():
    est = SceneFlowEstimator(**TINY)
    params = est.get_params()
    assert params['steps'] == 2 and params['channels'] == TINY['channels']
    copy = clone(est).set_params(steps=5)
    assert copy.steps == 5 and est.steps == 2


def test_predict_before_fit(samples):
    with pytest.raises(NotFittedError):
        SceneFlowEstimator(**TINY).predict(samples)


def test_fit_predict(fitted, samples):
    out = fitted.predict(samples)
    assert out.shape == (2, 64, 64, 4) and np.isfinite(out).all()
    assert len(fitted.loss_curve_) == 2
    again = fitted.predict(samples)
    assert np.array_equal(out, again)


def test_explicit_sparse_inputs(fitted, samples):
    rng = np.random.default_rng(0)
    inputs = [tuple(pipeline.eval_lidar(s, rng, points=50)) for s in samples]
    out = fitted.predict(samples, sparse_inputs=inputs)
    assert out.shape == (2, 64, 64, 4)
    report = fitted.evaluate(samples, inputs, sparse_eval=True)
    assert report.sparse_count <= 100
    assert fitted.score(samples) == pytest.approx(-fitted.evaluate(samples).SF_EPE)


def test_validation_rejects_bad_input(samples):
    with pytest.raises(ValueError):
        check_samples([])
    bad = samples[0].replace(image_t=samples[0].image_t * 2)
    with pytest.raises(ValueError, match='image_t'):
        check_samples([bad])
    with pytest.raises(TypeError):
        check_samples(['not a sample'])
    mixed = [samples[0], dataio.synth_generate(1, (64, 128))]
    with pytest.raises(ValueError, match='one size'):
        check_samples(mixed, same_size=True)
    negative = samples[0].replace(depth_t=dataio.SparseDepthInput(-samples[0].depth_t.disparity,
                                                                  samples[0].depth_t.validity))
    with pytest.raises(ValueError, match='positive'):
        check_samples([negative])
