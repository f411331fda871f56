"""binspot: a binary keyword-spotting stack, end to end at desk scale.

Bit-packed XNOR/popcount kernels, a dual-scale thinnable binarized FSMN
with hand-derived backward passes, a learnable binarizer, frequency-split
wavelet distillation, a deterministic training loop, and FLOPs/diagnostic
reports.
"""

from .binarize import (
    BinarizerParams,
    DualScaleResult,
    dual_scale_binarize,
    lpb_backward,
    lpb_forward,
    lpb_surrogate,
    sign_binarize,
    ste_backward,
    ste_surrogate,
    weight_scale,
)
from .bitkernel import (
    KernelBlocking,
    assemble_scaled_output,
    bench_kernel,
    bgemm_blocked,
    bgemm_reference,
    xnor_popcount_dot,
)
from .bitpack import BitTensor, pack_signs, unpack_signs
from .data import FeatureDataset, FormatError, gen_toy_dataset, load_features, save_features
from .model import (
    MemoryBlockConfig,
    ModelConfig,
    ThinnableFsmn,
    make_teacher,
    thinned_copy,
)
from .serial import export_packed, load_checkpoint, load_packed, save_checkpoint
from .train import (
    SGD,
    TrainConfig,
    cosine_lr,
    evaluate,
    run_training,
    softmax_cross_entropy,
    total_loss,
    train_step,
)
from .wavelet import (
    FrequencyEnergies,
    WaveletPyramid,
    freq_distill_loss,
    freq_distill_loss_and_grads,
    haar_dwt2,
    haar_idwt2,
    relative_energy,
    split_frequency,
)

__all__ = [
    "BinarizerParams",
    "BitTensor",
    "DualScaleResult",
    "FeatureDataset",
    "FormatError",
    "FrequencyEnergies",
    "KernelBlocking",
    "MemoryBlockConfig",
    "ModelConfig",
    "SGD",
    "ThinnableFsmn",
    "TrainConfig",
    "WaveletPyramid",
    "assemble_scaled_output",
    "bench_kernel",
    "bgemm_blocked",
    "bgemm_reference",
    "cosine_lr",
    "dual_scale_binarize",
    "evaluate",
    "export_packed",
    "freq_distill_loss",
    "freq_distill_loss_and_grads",
    "gen_toy_dataset",
    "haar_dwt2",
    "haar_idwt2",
    "load_checkpoint",
    "load_features",
    "load_packed",
    "lpb_backward",
    "lpb_forward",
    "lpb_surrogate",
    "make_teacher",
    "pack_signs",
    "relative_energy",
    "run_training",
    "save_checkpoint",
    "save_features",
    "sign_binarize",
    "softmax_cross_entropy",
    "split_frequency",
    "ste_backward",
    "ste_surrogate",
    "thinned_copy",
    "total_loss",
    "train_step",
    "unpack_signs",
    "weight_scale",
    "xnor_popcount_dot",
]

__version__ = "0.1.0"
