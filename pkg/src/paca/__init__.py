"""Patch-to-cluster attention vision transformers, desk scale.

The package is a self-contained numpy implementation: a small reverse-mode
autodiff engine (``paca.tensor``), the attention mechanisms including the
learnable clustering variant (``paca.attention``), pyramid model assembly
(``paca.blocks``, ``paca.model``), data and training (``paca.data``,
``paca.train``), the forward explainer (``paca.explain``), and an exact
FLOP cost model (``paca.profiler``). ``paca.cli`` exposes everything as
subcommands.
"""

from .tensor import Tensor, Tape, backward, flop_meter, set_debug_checks
from .attention import (
    AttentionParams,
    ClusterAssignment,
    ClusterParams,
    LayerNormParams,
    compute_clusters,
    mhsa,
    nested_attention,
    nested_embed_tokens,
    paca_attention,
    paca_tokens,
    scaled_attention,
)
from .blocks import BlockParams, ConvSpec, MBlockParams, mblock_ffn, stem, transformer_block, transition
from .model import (
    ModelConfig,
    PaCaModel,
    StageConfig,
    build_model,
    forward,
    load_checkpoint,
    param_count,
    preset,
    save_checkpoint,
)
from .data import Batch, Dataset, batch_iter, load_cifar, synth_dataset, write_cifar
from .train import TrainConfig, adamw_step, cross_entropy, evaluate, train_loop
from .explain import Heatmap, ImportanceReport, cluster_importance, export_heatmap, extract_heatmaps, mask_image
from .profiler import FlopReport, attention_flops, measure_attention_flops, scaling_report

__version__ = "0.1.0"
