"""Desk-scale registration pipeline with pluggable KD-tree search backends."""

from .backend import (APPROX_STAGES, STAGES, BackendConfig, ErrorInjection, KdClock, SearchBackend,
                      SearchIndex)
from .config import PRESETS, KeypointParams, PipelineConfig, RejectionConfig, preset
from .features import Descriptors, NormalEstimate, compute_fpfh, detect_keypoints, estimate_normals
from .pipeline import PipelineResult, PipelineStageError, PointCloudRegistration, StageTiming, run_pipeline
from .solver import (Correspondence, Correspondences, DegenerateCorrespondenceError, DistanceRejection,
                     IcpConfig, IcpResult, RansacRejection, estimate_correspondences_kpce,
                     estimate_transform_svd, icp, reject_correspondences)
