"""
csg test suite

Scenario tests for every pipeline module on small synthetic instances:
- surface graphs, file grammars and the dataset split
- spectral embedding and alignment
- the graph convolution network, training and prediction
- MRF refinement, evaluation metrics, configuration and the CLI
"""
