"""Dense scene flow from stereo-free RGB frames fused with sparse LiDAR."""
from .dataio import Calibration, Sample, SparseDepthInput
from .estimator import SceneFlowEstimator
from .network import ModelConfig, SceneFlowNet, TrainSchedule

__all__ = ['Calibration', 'Sample', 'SparseDepthInput', 'SceneFlowEstimator',
           'ModelConfig', 'SceneFlowNet', 'TrainSchedule']
__version__ = '0.1.0'
