"""Condition-invariant feature embeddings for retrieval-based localization.

Library layout:

- `geodata`: geo-tagged samples, JSONL ingestion, synthetic world generator
- `volume`: parallelotope squared volumes, reduced-rank form, gradients
- `losses`: volume objective plus triplet-family baselines with gradients
- `mining`: feature cache, hard-positive and pairwise-negative mining
- `embedder`: unit-norm feature map with manual backprop and Adam
- `trainer`: epochs, tuple pipeline, ablation toggles, metrics
- `retrieval`: PCA whitening, reference maps, exact top-1 search
- `evaluate`: accuracy/upper-bound protocol, sweeps, CSV and SVG reports
- `cli`: the `voloc` command line tying everything together
"""

__version__ = "0.1.0"
