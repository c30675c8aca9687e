"""Latent-space codebook compression for neural-network weight matrices.

A weight matrix is cut into short row subvectors, projected into a
latent space by a small encoder MLP, snapped to the nearest entry of a
learned codebook, and reconstructed by a small decoder MLP. The
shippable artifact is the half-precision codebook, the packed codeword
indices, and the float32 decoder.
"""

__version__ = "0.1.0"

from .codebook import (
    AssignmentResult,
    Codebook,
    assign_nearest,
    init_codebook,
    refresh_dead_codewords,
    ste_route,
    vq_loss,
)
from .compressor import (
    EpochRecord,
    LatentCodebookCompressor,
    TrainReport,
    compress_layer,
    compress_model,
    reconstruct_layer,
)
from .metrics import (
    LayerMetrics,
    export_reconstruction,
    layer_metrics,
    weight_histogram,
)
from .nets import MetaNet, MetaNetConfig, gelu, gelu_grad, rln_backward, rln_forward
from .optim import Adam
from .pocket_format import (
    CompressedLayer,
    CompressedModel,
    avg_bits,
    compression_ratio_bits,
    compression_ratio_params,
    fp16_decode,
    fp16_encode,
    load_pocket_file,
    model_stats,
    pack_indices,
    read_pocket_file,
    save_pocket_file,
    unpack_indices,
    write_pocket_file,
)
from .tensor_store import (
    LayerEntry,
    ModelManifest,
    SubvectorSet,
    load_manifest,
    merge,
    save_manifest,
    split_rows,
)

__all__ = [
    "Adam",
    "AssignmentResult",
    "Codebook",
    "CompressedLayer",
    "CompressedModel",
    "EpochRecord",
    "LatentCodebookCompressor",
    "LayerEntry",
    "LayerMetrics",
    "MetaNet",
    "MetaNetConfig",
    "ModelManifest",
    "SubvectorSet",
    "TrainReport",
    "assign_nearest",
    "avg_bits",
    "compress_layer",
    "compress_model",
    "compression_ratio_bits",
    "compression_ratio_params",
    "export_reconstruction",
    "fp16_decode",
    "fp16_encode",
    "gelu",
    "gelu_grad",
    "init_codebook",
    "layer_metrics",
    "load_manifest",
    "load_pocket_file",
    "merge",
    "model_stats",
    "pack_indices",
    "read_pocket_file",
    "reconstruct_layer",
    "refresh_dead_codewords",
    "rln_backward",
    "rln_forward",
    "save_manifest",
    "save_pocket_file",
    "split_rows",
    "ste_route",
    "unpack_indices",
    "vq_loss",
    "weight_histogram",
    "write_pocket_file",
]
