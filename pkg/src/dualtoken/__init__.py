"""Dual-token vision transformer with position-aware global tokens, built on
a small numpy autodiff core with numba-accelerated convolution kernels."""

from .tensor import (Tensor, GradTape, backward, count_macs, add, sub, mul,
                     scale, gelu, sigmoid, elementwise, matmul, conv2d,
                     avgpool2d, layernorm, softmax, bilinear_resize)
from .gradcheck import grad_check
from .layers import Linear, LayerNorm, MultiHeadAttention, init_params, mhsa
from .block import (BlockConfig, BlockActivations, GlobalTokens,
                    DualTokenBlock, dual_token_fusion)
from .model import (ModelConfig, StageConfig, Model, build_model, preset,
                    PRESET_NAMES, save_checkpoint, load_checkpoint,
                    CheckpointError)
from .analysis import (CostReport, count_params, count_flops,
                       instrumented_macs, extract_attention_map,
                       export_heatmap, top_cells, TABLE_TARGETS)
from .data import SyntheticDataset, gen_synthetic, save_dataset, load_dataset
from .train import (cross_entropy, train_toy, train_step, evaluate,
                    TrainState, save_state, load_state, TrainingDiverged)

__version__ = "0.1.0"
