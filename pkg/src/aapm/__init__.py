"""Agent-augmented asset pricing engine.

News flows through an analyst agent with retrieval-augmented memory into
daily report embeddings; those are smoothed, fused with manual financial
factors in a return-prediction network, and turned into portfolios whose
performance and pricing errors are evaluated end to end.
"""

__version__ = "0.1.0"
