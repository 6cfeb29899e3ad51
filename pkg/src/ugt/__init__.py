"""Unified graph transformer toolkit: structural sampling, structure-biased
attention, transition-preserving pretraining and an isomorphism test harness."""

__version__ = "0.1.0"

from .graph import DatasetBundle, Graph, LabelSet, NodeFeatures, load_dataset, load_edge_list
from .model import UGTConfig, forward, prepare_inputs, preprocess

__all__ = ["DatasetBundle", "Graph", "LabelSet", "NodeFeatures", "UGTConfig", "forward",
           "load_dataset", "load_edge_list", "prepare_inputs", "preprocess", "__version__"]
