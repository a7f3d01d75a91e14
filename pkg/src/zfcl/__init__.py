"""Zero-forgetting continual learning through per-task weight modulation grids."""

from .autodiff import Tensor, backward, grad_check
from .bank import (
    ModulationSpec,
    TaskBank,
    TaskRecord,
    activate_task,
    load_bank,
    load_base,
    register_task,
    save_bank,
    save_base,
    storage_bits,
)
from .interp import InterpMethod, ModGrid, upsample1d, upsample_adjoint, upsample_mod
from .nn import BatchNorm, ModulatedConv, ModulatedLinear, Network, bn_restore, bn_snapshot, small_cnn
from .trainer import TrainConfig, evaluate, lr_search, pretrain, train_task

__version__ = "0.1.0"
