"""Minimal float64 reverse-mode tensor library and the layers the models train on."""
from .tensor import Tensor, TapeError, TapeNode, backward
from .params import ParamStore, adam_step, load_tensors, save_store, save_tensors
from . import tensor as ops
from .layers import (GRUCell, FeedForward, LayerNorm, Linear, MultiHeadSelfAttention,
                     TransformerEncoderLayer, attention, rnn_cell_step, run_gru,
                     sinusoidal_positions, softmax_rows)

__all__ = ["Tensor", "TapeError", "TapeNode", "backward", "ParamStore", "adam_step",
           "load_tensors", "save_store", "save_tensors", "ops", "GRUCell", "FeedForward",
           "LayerNorm", "Linear", "MultiHeadSelfAttention", "TransformerEncoderLayer",
           "attention", "rnn_cell_step", "run_gru", "sinusoidal_positions", "softmax_rows"]
