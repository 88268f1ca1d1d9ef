"""scikit-learn style wrapper around the scene flow network."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import dataio, metrics, network, pipeline
from .validation import check_samples


class SceneFlowEstimator(BaseEstimator):
    '''
    Dense scene flow from two RGB frames and their sparse LiDAR disparity.

    fit takes a list of Samples (ground truth included) and trains a fresh
    network; predict returns N x H x W x 4 fields of (u, v, d0, d1).

    Arg(s):
        use_confidence_conv : bool
            confidence convolutions in the LiDAR pyramid
        use_confidence_concat : bool
            LiDAR confidence as an extra fusion input
        channels : tuple[int]
            pyramid channels per level 1..6
        steps : int
            optimizer steps
        fixed_fraction : float
            train at one LiDAR density instead of a random one per step
        eval_fraction : float
            LiDAR density drawn for predict when samples are dense
        random_state : int
            seed for initialization, sampling and augmentation
    '''

    def __init__(self,
                 use_confidence_conv=True,
                 use_confidence_concat=True,
                 channels=network.DESK_WIDTHS['channels'],
                 estimator_widths=network.DESK_WIDTHS['estimator_widths'],
                 context_widths=network.DESK_WIDTHS['context_widths'],
                 search_radius=4,
                 level_weights=network.DEFAULT_LEVEL_WEIGHTS,
                 robust_loss=False,
                 steps=1000,
                 batch_size=4,
                 learning_rate=1e-4,
                 density_range=(dataio.MIN_DENSITY, dataio.MAX_DENSITY),
                 fixed_fraction=None,
                 fixed_points=None,
                 noise_sigma=dataio.DEFAULT_NOISE_SIGMA,
                 augment=True,
                 eval_fraction=pipeline.DEFAULT_EVAL_FRACTION,
                 random_state=0):
        self.use_confidence_conv = use_confidence_conv
        self.use_confidence_concat = use_confidence_concat
        self.channels = channels
        self.estimator_widths = estimator_widths
        self.context_widths = context_widths
        self.search_radius = search_radius
        self.level_weights = level_weights
        self.robust_loss = robust_loss
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.density_range = density_range
        self.fixed_fraction = fixed_fraction
        self.fixed_points = fixed_points
        self.noise_sigma = noise_sigma
        self.augment = augment
        self.eval_fraction = eval_fraction
        self.random_state = random_state

    def _model_config(self):
        return network.ModelConfig(
            use_confidence_conv=self.use_confidence_conv,
            use_confidence_concat=self.use_confidence_concat,
            channels=self.channels,
            search_radius=self.search_radius,
            level_weights=self.level_weights,
            estimator_widths=self.estimator_widths,
            context_widths=self.context_widths,
            robust_loss=self.robust_loss)

    def _schedule(self):
        return network.TrainSchedule(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            density_range=tuple(self.density_range),
            fixed_fraction=self.fixed_fraction,
            fixed_points=self.fixed_points,
            noise_sigma=self.noise_sigma,
            augment=self.augment,
            seed=self.random_state,
            log_every=0)

    def fit(self, X, y=None):
        '''
        Arg(s):
            X : list[Sample]
                training samples of one common size, with dense or sparse
                depth sources and ground truth
            y : None
                ground truth travels inside the samples
        '''
        samples = check_samples(X, require_gt=True, same_size=True)
        self.model_, history = network.train(samples, self._model_config(), self._schedule())
        self.loss_curve_ = [row['total'] for row in history]
        self.n_features_in_ = 4
        return self

    def _lidar(self, samples, sparse_inputs):
        if sparse_inputs:
            return [d[0] for d in sparse_inputs], [d[1] for d in sparse_inputs]
        rng = np.random.default_rng(self.random_state)
        drawn = [pipeline.eval_lidar(s, rng, fraction=self.eval_fraction) for s in samples]
        return [d[0] for d in drawn], [d[1] for d in drawn]

    def predict(self, X, sparse_inputs=None):
        '''
        Arg(s):
            X : list[Sample]
            sparse_inputs : list[tuple[SparseDepthInput, SparseDepthInput]]
                LiDAR inputs to use as given; drawn from the samples' depth
                sources at eval_fraction otherwise
        Returns:
            numpy.ndarray : N x H x W x 4, or a list when sizes differ
        '''
        check_is_fitted(self, 'model_')
        samples = check_samples(X, require_gt=False)
        depth_t, depth_t1 = self._lidar(samples, sparse_inputs)
        preds = [network.predict(self.model_, [s], [a], [b])[0] for s, a, b in zip(samples, depth_t, depth_t1)]
        if len({p.shape for p in preds}) == 1:
            return np.stack(preds)
        return preds

    def evaluate(self, X, sparse_inputs=None, sparse_eval=False):
        '''Pooled MetricsReport over the samples.'''
        check_is_fitted(self, 'model_')
        samples = check_samples(X, require_gt=True)
        depth_t, _ = self._lidar(samples, sparse_inputs)
        preds = self.predict(samples, sparse_inputs)
        reports = []
        for sample, pred, lidar in zip(samples, preds, depth_t):
            mask = lidar.validity if sparse_eval else None
            reports.append(metrics.evaluate(pred, sample.gt, sample.valid, sample.calib, mask))
        return metrics.aggregate(reports)

    def score(self, X, y=None):
        '''Negative scene flow endpoint error, so that greater is better.'''
        return -self.evaluate(X).SF_EPE
