"""Dependency-tree LSTM language models.

Top-level pieces:

  * :mod:`treelm.deptree`  -- tree data model, CoNLL ingestion, paths
  * :mod:`treelm.corpus`   -- vocabulary and dataset handling
  * :mod:`treelm.nncore`   -- dense numeric layer (LSTM cells, optimizers)
  * :mod:`treelm.model`    -- tree LSTM / left-dependent variant / sequential baseline
  * :mod:`treelm.trainer`  -- NLL and noise-contrastive training loops
  * :mod:`treelm.tasks`    -- completion, reranking, classifiers, generation
  * :mod:`treelm.cli`      -- command-line entry point
"""

__version__ = "0.1.0"
