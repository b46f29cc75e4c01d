"""KD-tree search, registration and accelerator simulation for point clouds."""

from .kdtree import EmptyTreeError, KDTree, NeighborResult, RadiusResult, SearchStats
from .pointcloud import (PointCloud, PointCloudParseError, RegistrationError, RigidTransform, apply_transform,
                         compose, invert, load_kitti_bin, load_xyz_ascii, registration_error, save_kitti_bin,
                         save_xyz_ascii)
from .twostage import ApproxConfig, TwoStageKDTree, redundancy_report

__version__ = "0.1.0"
