"""Attention-mass decomposition, analytical cost model and latency benchmark."""
