"""Graph reduction (coarsening, sparsification) versus GNN backdoor attacks."""
from .graph import (Dataset, DatasetError, DatasetSplit, Graph, generate_sbm, laplacian,
                    load_cora, load_dataset, save_dataset, split_dataset, two_hop_density)

__all__ = ["Dataset", "DatasetError", "DatasetSplit", "Graph", "generate_sbm", "laplacian",
           "load_cora", "load_dataset", "save_dataset", "split_dataset", "two_hop_density"]
__version__ = "0.1.0"
