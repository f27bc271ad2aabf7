"""Mixture of task-specific adapter experts for class-incremental learning."""
from . import kernels
from .dataset import (
    EmbeddingDataset,
    Protocol,
    SyntheticSpec,
    concat_protocols,
    generate_synthetic,
    make_splits,
    read_embeddings,
    write_embeddings,
)
from .expert import AdapterExpert, TrainConfig, adapter_forward, ce_loss_and_grads, cosine_anneal_lr, train_task
from .harness import RunMetrics, avg_accuracy, avg_forgetting, memory_report, run_protocol
from .inference import InferenceConfig, expert_weight, fuse, predict, predict_batch, scs
from .prototypes import PrototypePool, compute_prototypes, synthesize_overflow_prototypes

__version__ = "0.1.0"
