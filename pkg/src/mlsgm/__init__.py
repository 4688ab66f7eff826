"""Instance-label graph matching for multi-label recognition.

The pipeline turns a per-image feature map into semantic instances,
connects them to every label in an assignment graph, scores each
instance-label edge with stacked graph-network blocks, and trains under
full-label, partial-label, and few-shot regimes.
"""

__version__ = "0.1.0"
