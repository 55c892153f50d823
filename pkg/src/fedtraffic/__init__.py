"""Federated traffic forecasting with graph-aware server aggregation."""

__version__ = "0.1.0"

from .aggregation import (
    AggregatorConfig,
    ParamLayout,
    ParamMatrix,
    fedavg,
    flatten,
    graph_fedavg,
    layout_for_arch,
    mp_fedavg,
    unflatten,
)
from .data import TrafficDataset, WindowedSplit, chronological_split, generate_synthetic, load_dataset, make_windows
from .errors import FedTrafficError
from .fedsim import FedConfig, RoundReport, run, run_centralized
from .graph import PropagationMatrix, SensorGraph, build_operator, is_connected, load_graph
from .metrics import MetricReport, evaluate
from .model import AdamState, GruArch, GruSeq2Seq, adam_step, backward, forward, gru_cell, init_params, mse_loss, train_epochs
