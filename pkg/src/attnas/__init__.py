"""attnas: differentiable search over stage-wise self-attention networks."""

__version__ = "0.1.0"

from .attention import (
    ALL_CANDIDATES,
    STEM_OP,
    BlockParams,
    CandidateOp,
    block_param_count,
    bottleneck_block,
    local_multihead_sa,
    mid_channels,
    non_local_sa,
)
from .car import Decoder, MaskSpec, apply_masks, car_forward, car_loss, generate_masks
from .data import ImageDataset, SplitSpec, load_cifar_binary, split, synth_shapes
from .errors import CheckpointError, ConfigError, DataError, ShapeError
from .optim import Adam, LrSchedule, SgdMomentum, lr_at
from .precision import dtype, precision_name, set_precision
from .search import (
    SearchConfig,
    SearchRun,
    bilevel_epoch,
    run_car_search,
    run_finetune,
    run_full_pipeline,
)
from .supernet import (
    ArchParams,
    Architecture,
    MacroConfig,
    StageSpec,
    Supernet,
    arch_param_count,
    build_supernet,
    discretize,
    instantiate,
    mixed_forward,
    shape_trace,
    space_size,
    supernet_param_count,
)
from .tensor import (
    Tape,
    Tensor,
    backward,
    cross_entropy,
    l1_loss,
    no_grad,
    reset_tape,
    softmax,
)
from .train import TrainConfig, count_params, evaluate, train_final
