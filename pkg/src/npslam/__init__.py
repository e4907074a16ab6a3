"""Dense RGBD SLAM with an optimizable neural point-cloud map.

The map is a growing set of 3D points carrying geometric and color feature
vectors, decoded through small MLPs and rendered by depth-guided volume
compositing. Camera tracking and map optimization both minimize the
re-rendering error through a numpy reverse-mode autodiff tape; no GPU or
deep-learning framework is required.
"""

__version__ = "0.1.0"
