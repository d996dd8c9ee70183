"""Structure-only self-supervised pre-training of graph convolutional encoders.

Synthetic DCBM corpora, local structural features, centrality ranking targets, a
small reverse-mode autodiff engine, the multi-task encoder and fix-tune adaptation.
"""
from .graph import Graph, build_graph, read_graph, write_graph
from .model import ModelConfig
from .pretrain import PretrainConfig, pretrain_run
from .synth import DcbmRanges, generate_corpus, load_corpus

__version__ = "0.1.0"

__all__ = ["Graph", "build_graph", "read_graph", "write_graph", "ModelConfig", "PretrainConfig",
           "pretrain_run", "DcbmRanges", "generate_corpus", "load_corpus", "__version__"]
