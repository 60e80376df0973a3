# This file is part of ts_unigs.
#
# Developed for the Vera Rubin Observatory Systems.
# This product includes software developed by the LSST Project
# (https://www.lsst.org).
# See the COPYRIGHT file at the top-level directory of this distribution
# for details of code ownership.
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

__all__ = [
    "LAYER_NORM_EPS",
    "SH_C0",
    "SH_C1",
    "SH_DC_OFFSET",
    "NUM_SH_COEFFICIENT",
    "NUM_RAW_PARAMETER",
    "RAW_SCALE_MIN",
    "RAW_SCALE_MAX",
    "QUATERNION_EPS",
    "QUATERNION_UNIT_TOLERANCE",
    "IDENTITY_QUATERNION",
    "PROJECTION_EPS",
    "OUT_OF_VIEW_UV",
    "ROTATION_DET_TOLERANCE",
    "NEAR_PLANE",
    "BLUR_2D",
    "ALPHA_MAX",
    "TRANSMITTANCE_MIN",
    "TILE_SIZE",
    "EXTENT_SIGMA",
    "PSNR_MAX",
    "MSE_MIN",
    "SSIM_WINDOW",
    "SSIM_SIGMA",
    "SSIM_K1",
    "SSIM_K2",
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPS",
    "CHECKPOINT_HEADER",
    "FIT_LR_SCALE",
    "INIT_RAW_SCALE",
    "INIT_QUERY_STD",
    "INIT_MAX_TRIAL",
    "INIT_MIN_ACCEPTANCE",
    "COARSE_HEAD_INIT_SCALE",
    "ATTENTION_WINDOW",
    "ATTENTION_FULL_MAP_TOKENS",
    "OFFSET_INIT_SCALE",
    "BENCH_VIEW_COUNTS",
    "ABLATION_NUM_GAUSSIANS",
    "ABLATION_SESA_RATES",
    "MAX_VIEW_TIME_RATIO",
    "SYNTH_RADIUS",
    "SYNTH_FOV_DEG",
    "SYNTH_ELEVATION_DEG",
    "MASK_THRESHOLD",
]

import numpy as np

# Epsilon added to the variance of the layer normalization
LAYER_NORM_EPS = 1e-5

# Real spherical-harmonics constants of the degree 0 and 1
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

# Color offset applied when the spherical harmonics are evaluated
SH_DC_OFFSET = 0.5

# Spherical-harmonics coefficients: 3 channels x 4 basis functions
NUM_SH_COEFFICIENT = 12

# Raw parameters per Gaussian: center (3), opacity (1), scale (3),
# rotation (4), and spherical harmonics (12)
NUM_RAW_PARAMETER = 23

# Clamp range of the raw (log) scale before the exponential
RAW_SCALE_MIN = -10.0
RAW_SCALE_MAX = 3.0

# Quaternions shorter than this fall back to the identity
QUATERNION_EPS = 1e-8

# Allowed deviation of a unit quaternion from the norm of 1
QUATERNION_UNIT_TOLERANCE = 1e-3

# Identity quaternion in the order of (w, x, y, z)
IDENTITY_QUATERNION = np.array([1.0, 0.0, 0.0, 0.0])

# Minimum camera-space depth of a valid projection
PROJECTION_EPS = 1e-6

# Normalized coordinate given to the points behind the camera, so that the
# sampling of the feature map is out of range and gives zeros
OUT_OF_VIEW_UV = 1e4

# Allowed deviation of det(R) from 1 for a camera rotation
ROTATION_DET_TOLERANCE = 1e-6

# Near plane of the renderer
NEAR_PLANE = 0.01

# Isotropic blur added to the projected covariance in pixel^2
BLUR_2D = 0.3

# Clamp of the per-splat opacity
ALPHA_MAX = 0.99

# Compositing stops when the transmittance drops below this
TRANSMITTANCE_MIN = 1e-4

# Tile size of the rasterizer in pixel
TILE_SIZE = 16

# Splat extent in the standard deviations
EXTENT_SIGMA = 3.0

# PSNR cap in dB and the MSE below which the cap applies
PSNR_MAX = 99.0
MSE_MIN = 1e-10

# SSIM Gaussian window and stabilizing constants
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# Adam optimizer
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Version header of the weight checkpoint
CHECKPOINT_HEADER = "unigs-ckpt-v1"

# Learning-rate multipliers of the per-scene fitting relative to the run
# learning rate
FIT_LR_SCALE = {
    "centers": 10.0,
    "opacity": 500.0,
    "scale": 100.0,
    "rotation": 50.0,
    "sh": 100.0,
}

# Initial raw scale, log(0.05)
INIT_RAW_SCALE = float(np.log(0.05))

# Standard deviation of the initial queries
INIT_QUERY_STD = 0.02

# Rejection sampling of the random initialization
INIT_MAX_TRIAL = 1000000
INIT_MIN_ACCEPTANCE = 1e-3

# Weight scale of the per-pixel initialization head
COARSE_HEAD_INIT_SCALE = 0.01

# Window size of the cross-view attention and the token count up to which
# the whole map is a single window
ATTENTION_WINDOW = 8
ATTENTION_FULL_MAP_TOKENS = 64

# Radius of the initial sampling offsets in the normalized coordinate
OFFSET_INIT_SCALE = 0.02

# View counts of the view benchmark
BENCH_VIEW_COUNTS = (1, 2, 4, 6, 8)

# Gaussian counts and self-attention rates of the ablation sweep
ABLATION_NUM_GAUSSIANS = (128, 512)
ABLATION_SESA_RATES = (0.005, 0.05)

# Maximum ratio of the reconstruction wall-time of 8 views to that of 1 view
MAX_VIEW_TIME_RATIO = 3.0

# Camera ring of the synthetic scenes
SYNTH_RADIUS = 2.5
SYNTH_FOV_DEG = 50.0
SYNTH_ELEVATION_DEG = (0.0, 30.0)

# Accumulated alpha above which a pixel is the foreground
MASK_THRESHOLD = 0.5
