"""Conditional graph normalizing flow over target graphs given context graphs."""
from .graph import (RELATION_KINDS, GraphBatch, GraphError, HeteroGraph, NodeGraph, RelationSet,
                    augment_masks, collate, mask_context, merge)
from .model import (KEEP_FRACTIONS, FlowConfig, FlowError, FlowParams, actnorm_forward, actnorm_inverse,
                    coupling_forward, coupling_inverse, feature_split, flow_forward, flow_inverse,
                    init_params, initialize_actnorm, log_prob, loss_total, message_pass, mode_sample,
                    nll, node_mpjpe, sample)
from .train import (TrainConfig, TrainingAborted, TrainLog, checkpoint_dict, load_checkpoint,
                    params_from_dict, save_checkpoint, train)

__all__ = [
    "RELATION_KINDS", "GraphBatch", "GraphError", "HeteroGraph", "NodeGraph", "RelationSet",
    "augment_masks", "collate", "mask_context", "merge", "KEEP_FRACTIONS", "FlowConfig", "FlowError",
    "FlowParams", "actnorm_forward", "actnorm_inverse", "coupling_forward", "coupling_inverse",
    "feature_split", "flow_forward", "flow_inverse", "init_params", "initialize_actnorm", "log_prob",
    "loss_total", "message_pass", "mode_sample", "nll", "node_mpjpe", "sample", "TrainConfig",
    "TrainingAborted", "TrainLog", "checkpoint_dict", "load_checkpoint", "params_from_dict",
    "save_checkpoint", "train",
]
