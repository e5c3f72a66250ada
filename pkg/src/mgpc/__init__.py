"""mgpc: a learned joint geometry+attribute point cloud codec.

A single encoder maps a voxelized colored cloud into a shared latent
(lossless octree-coded skeleton + range-coded feature tensor); geometry
decodes first and guides the attribute decoder. Feature blocks are
tri-directional state-space scans; the entropy model is a grouped causal
conditional Gaussian driven by the same scan machinery.
"""

from .autograd import (Adam, Context, DiffTensor, Parameter, Tape,
                       load_checkpoint, save_checkpoint)
from .codec import BitstreamContainer, EncodeStats, decode, encode
from .config import RATE_POINTS, STAGE1_LAMBDA_A, ModelConfig, TrainConfig
from .entropy import MemModel, QuantizedLatent, RangeDecoder, RangeEncoder, quantize
from .errors import (CodecError, ConfigError, ContractError, DecodeError,
                     DimensionError, NumericError, RangeError)
from .metrics import RdPoint, bd_rate, d1_psnr, d2_psnr, y_psnr, yuv_psnr
from .model import CodecModel
from .octree import octree_build, skeleton_decode, skeleton_encode
from .ply import read_ply, write_ply
from .sparse import (SparseVoxelTensor, morton_decode, morton_encode,
                     serialize, sparse_conv, voxelize)
from .ssm import TriMambaBlock, selective_scan, tri_mamba, zoh_discretize
from .training import (bidirectional_mse, loss_attribute, loss_unified,
                       run_stage, synth_dataset, train_two_stage)

__version__ = "0.1.0"
